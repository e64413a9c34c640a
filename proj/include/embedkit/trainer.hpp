#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/curation.hpp"
#include "embedkit/encoder.hpp"

namespace embedkit {

struct StageConfig {
    int stage = 1;
    bool in_batch_negatives = true;
    std::vector<std::string> datasets;
    std::int64_t steps = 100;
    std::int64_t warmup_steps = 50;
    double learning_rate = 2e-5;
    std::int64_t batch_size = 128;
    std::int64_t n_hard_negatives = 7;
    double temperature = 0.05;
    double weight_decay = 0.03;
    std::uint64_t seed = 0;
    TrainMode train_mode = TrainMode::full;

    void validate() const;
};

// Stage 1 trains with in-batch negatives at the higher peak rate; stage 2
// drops the in-batch trick and lowers the rate.
StageConfig stage_defaults(int stage);

struct BatchEmbeddings {
    TensorPtr Q;                 // B x d unit rows
    TensorPtr P;                 // B x d unit rows, P[i] is Q[i]'s positive
    std::vector<TensorPtr> negs;  // per query: k_i x d unit rows, or nullptr

    void validate() const;
};

// Temperature-scaled InfoNCE. Candidates for query i: its positive, its own
// hard negatives, and (if in_batch) the other queries' positives. Returns the
// batch-mean loss; per_query receives each row's loss when non-null.
TensorPtr contrastive_loss(const BatchEmbeddings& be, bool in_batch, double temperature,
                           std::vector<double>* per_query = nullptr);

// Decoupled weight decay, beta1 0.9, beta2 0.999, eps 1e-8. The schedule is
// linear warmup to the peak rate then linear decay to zero. Moment buffers
// are created on first use, so a fresh optimizer starts from zero state.
class AdamW {
public:
    AdamW(double peak_lr, double weight_decay, std::int64_t warmup_steps,
          std::int64_t total_steps);

    double lr_at(std::int64_t t) const;  // t counts from 0
    void step(ModelCheckpoint& ckpt);    // updates tensors with grads, then clears them
    std::int64_t steps_taken() const { return t_; }

    // nullptr until the named tensor has been updated at least once
    const std::vector<double>* first_moment(const std::string& name) const;
    const std::vector<double>* second_moment(const std::string& name) const;

private:
    double peak_lr_;
    double weight_decay_;
    std::int64_t warmup_;
    std::int64_t total_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

struct StepTrace {
    std::int64_t step = 0;
    double loss = 0.0;
    std::map<std::string, double> per_source;  // mean per-query loss by source tag
};

// step,loss lines; one per step
void write_metrics(const std::string& path, const std::vector<StepTrace>& trace);

// Query-side states exposed to the extra-loss hook (distillation etc).
struct SequenceStates {
    TokenSequence seq;
    EncodeStates enc;
    TensorPtr embedding;  // 1 x d, normalized
};

struct TrainHooks {
    // called after backward, before the optimizer step
    std::function<void(std::int64_t step, const AdamW&)> on_step;
    // called after each optimizer step (e.g. re-zero pruned weights)
    std::function<void(ModelCheckpoint&)> after_update;
    // scalar added to the contrastive loss each step
    std::function<TensorPtr(const std::vector<SequenceStates>& queries)> extra_loss;
};

struct StageResult {
    ModelCheckpoint ckpt;
    std::vector<StepTrace> trace;
};

// One optimization stage: sample a blended batch, embed queries/documents,
// InfoNCE, backward, AdamW with fresh optimizer state. Deterministic under
// (config, seed). Any non-finite loss or forward failure aborts with the
// step index.
StageResult train_stage(const StageConfig& cfg, const ModelCheckpoint& ckpt_in,
                        const TrainHooks& hooks = {});

struct TwoStageResult {
    ModelCheckpoint ckpt;
    std::vector<StepTrace> trace1, trace2;
};

// train_stage(cfg2) on top of train_stage(cfg1). The stage boundary
// materializes the stage-1 artifact: tensors are rounded through 32-bit
// storage exactly as a save/load pair would, so resuming stage 2 from the
// saved stage-1 checkpoint reproduces the combined run bit for bit.
TwoStageResult two_stage_train(const StageConfig& cfg1, const StageConfig& cfg2,
                               const ModelCheckpoint& ckpt0, const TrainHooks& hooks = {},
                               const std::function<void(const StageResult&)>& after_stage1 = {});

}  // namespace embedkit
