#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/tensor.hpp"
#include "embedkit/trainer.hpp"

namespace embedkit {

// The compression surface is the dense linear maps: attention projections,
// feed-forward weights, and the pooling MLP. Embeddings, norms, biases, the
// latent dictionary, and adapter tensors stay dense and full precision.
bool is_prunable(const std::string& name);
std::vector<std::string> prunable_tensors(const ModelCheckpoint& ckpt);

struct PrunePattern {
    enum class Kind { none, unstructured, n_of_m };
    Kind kind = Kind::none;
    double fraction = 0.0;  // removed fraction, unstructured only
    std::int64_t n = 0;     // kept per group, n_of_m only
    std::int64_t m = 0;     // group size, n_of_m only

    // "none" | "unstructured:P" | "N:M" (e.g. "2:4", "4:8")
    static PrunePattern parse(const std::string& text);
    std::string describe() const;
    void validate() const;
};

struct PruneMask {
    PrunePattern pattern;
    std::map<std::string, std::vector<std::uint8_t>> keep;  // row-major, 1 = kept

    double kept_fraction(const std::string& name) const;
};

struct PruneResult {
    ModelCheckpoint ckpt;
    PruneMask mask;
};

// Keep the largest-magnitude weights, zero the rest. Unstructured scopes the
// whole tensor and keeps round((1-p) * numel) entries; N:M scopes each aligned
// group of M consecutive weights along the input dimension (weights are stored
// [out x in] row-major, so a group is M consecutive stored elements) and keeps
// exactly N. Magnitude ties keep the earlier index.
PruneResult magnitude_prune(const ModelCheckpoint& ckpt, const PrunePattern& pattern);

// Re-zero every masked-out weight in place (after optimizer steps).
void apply_prune_mask(ModelCheckpoint& ckpt, const PruneMask& mask);

// (student state index, teacher state index) pairs.
using KdMapping = std::vector<std::pair<std::size_t, std::size_t>>;

// Index-aligned pairs for all but the student's last state, which follows the
// teacher's last state. Covers both equal-depth students and students with
// states removed (n_student <= n_teacher).
KdMapping kd_default_mapping(std::size_t n_student, std::size_t n_teacher);

// Sum of per-pair mean-squared errors over the mapping. Differentiable
// through the student states.
TensorPtr kd_loss(const std::vector<TensorPtr>& student_states,
                  const std::vector<TensorPtr>& teacher_states, const KdMapping& mapping);

double kd_total_loss(double contrastive, double kd, double alpha);

struct QuantFormat {
    enum class Kind { int8_perrow_absmax, fp8_e4m3, fp8_e5m2 };
    Kind kind = Kind::int8_perrow_absmax;

    static QuantFormat parse(const std::string& text);  // "int8" | "fp8e4m3" | "fp8e5m2"
    std::string describe() const;
};

// Every finite non-negative value of the format, ascending from 0.
std::vector<double> fp8_value_table(QuantFormat::Kind kind);

// Nearest representable value, ties to even mantissa, saturating at the
// largest finite magnitude.
double fp8_round(double x, QuantFormat::Kind kind);

// Simulated quantization of the linear weights in place: values are replaced
// by their dequantized forms. int8 uses one absmax scale per output unit.
void quantize_weights(ModelCheckpoint& ckpt, const QuantFormat& fmt);

// The distilled student drops the latent attention block: mean pooling plus
// no latent or pooling-MLP tensors.
ModelCheckpoint make_student(const ModelCheckpoint& teacher);

// Training hooks for compressed-model retraining: adds alpha * (batch-mean
// layer-state distillation against the frozen teacher) to the step loss, and
// re-zeroes pruned weights after every optimizer step when a mask is given.
TrainHooks make_kd_hooks(const ModelCheckpoint& teacher, double alpha,
                         std::shared_ptr<const PruneMask> mask = nullptr);

struct CompressionReport {
    std::string prune;
    std::string quant;
    std::map<std::string, double> kept_fraction;
    std::map<std::string, double> metrics_before;  // optional eval deltas
    std::map<std::string, double> metrics_after;
};

// prune=/quant= lines, kept.<tensor>= lines, then before./after./delta.
// metric lines for every metric present on both sides.
void write_compression_report(const std::string& path, const CompressionReport& rep);

}  // namespace embedkit
