#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

enum class MaskMode { causal, bidirectional };
enum class PoolKind { eos, mean, self_attention, latent_attention };
enum class TrainMode { full, lora };

MaskMode mask_mode_from_string(const std::string& s);
std::string to_string(MaskMode m);
PoolKind pool_kind_from_string(const std::string& s);
std::string to_string(PoolKind k);

struct EncoderConfig {
    std::int64_t vocab_size = 260;  // 256 byte values + PAD/BOS/EOS/MASK
    std::int64_t d_model = 32;
    std::int64_t n_layers = 2;
    std::int64_t n_heads = 4;
    std::int64_t d_ff = 64;
    std::int64_t max_len = 16;
    MaskMode mask_mode = MaskMode::bidirectional;

    void validate() const;  // d_model % n_heads == 0, max_len >= 2, positive dims
};

struct PoolingConfig {
    PoolKind kind = PoolKind::latent_attention;
    std::int64_t latents = 64;    // r, rows of the shared K=V dictionary
    std::int64_t n_heads = 4;
    std::int64_t mlp_hidden = 0;  // 0 means 4 * d_model
    bool residual = true;         // residual connection around the post-attention MLP
    bool eq1_literal = false;     // skip the 1/sqrt(d_head) attention scale

    std::int64_t resolved_mlp_hidden(std::int64_t d_model) const {
        return mlp_hidden > 0 ? mlp_hidden : 4 * d_model;
    }
    void validate(std::int64_t d_model) const;
};

struct LoraSpec {
    std::string target;  // name of a linear weight tensor, e.g. "enc.L0.attn.wq"
    std::int64_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.1;
};

// Named-tensor container: encoder weights, pooling head weights (including
// the latent dictionary), optional LoRA adapters, plus the configs needed to
// rebuild the forward pass.
struct ModelCheckpoint {
    EncoderConfig enc;
    PoolingConfig pool;
    std::vector<LoraSpec> adapters;
    std::map<std::string, TensorPtr> tensors;

    const TensorPtr& tensor(const std::string& name) const;
    TensorPtr& tensor(const std::string& name);
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    ModelCheckpoint clone() const;  // deep copy of all tensor data
};

// Fresh seeded weights: N(0, 0.02) matrices, zero biases, unit norm gains.
ModelCheckpoint init_checkpoint(const EncoderConfig& enc, const PoolingConfig& pool,
                                std::uint64_t seed);

// Adds adapter tensors lora.<target>.A (N(0,0.02)) and lora.<target>.B (zero)
// for each spec. Unknown or non-linear target -> ValidationError.
void apply_lora(ModelCheckpoint& ckpt, const std::vector<LoraSpec>& adapters, std::uint64_t seed);

// full: every tensor requires grad. lora: only lora.* tensors do.
void set_trainable(ModelCheckpoint& ckpt, TrainMode mode);
std::vector<std::string> trainable_tensor_names(const ModelCheckpoint& ckpt, TrainMode mode);

// Binary persistence: magic "EMBK", u32 version, JSON config blob, then the
// named tensors sorted by name, each (name, rank, dims, float32 payload),
// all little-endian. Round-trips exactly at 32-bit precision.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

// Rounds every tensor value through 32-bit storage, exactly what one
// save/load cycle would do.
void round_to_f32(ModelCheckpoint& ckpt);

}  // namespace embedkit
