#pragma once

#include <cstdint>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

// Per-position participation flags for pooling. PAD and instruction tokens
// are always excluded; BOS is excluded; EOS is included.
struct PoolMask {
    std::vector<char> keep;

    std::vector<std::int64_t> kept_indices() const;
};

PoolMask pool_mask_for(const TokenSequence& seq);

// The EOS position's hidden state, unchanged.
TensorPtr pool_eos(const TensorPtr& H, const TokenSequence& seq);

// Arithmetic mean of the masked-in rows. All-false mask -> contract error.
TensorPtr pool_mean(const TensorPtr& H, const PoolMask& mask);

// Optional visibility into the attention inside the two attention heads:
// one probability matrix per head, rows summing to 1.
struct PoolProbe {
    std::vector<TensorPtr> head_probs;
};

// Cross-attention of the masked-in rows (queries) against the shared K = V
// latent dictionary, then a two-linear GELU MLP with optional residual,
// then the mean over rows.
TensorPtr pool_latent_attention(const TensorPtr& H, const ModelCheckpoint& ckpt,
                                const PoolMask& mask, PoolProbe* probe = nullptr);

// One projection-free self-attention pass over the masked-in rows
// (Q = K = V = H), then the same MLP + mean path.
TensorPtr pool_self_attention(const TensorPtr& H, const ModelCheckpoint& ckpt,
                              const PoolMask& mask, PoolProbe* probe = nullptr);

// Unit L2 norm. Zero vector -> numeric error.
TensorPtr normalize(const TensorPtr& e);

// Dispatch on ckpt.pool.kind; returns the un-normalized [1 x d] embedding.
TensorPtr pool(const TensorPtr& H, const ModelCheckpoint& ckpt, const TokenSequence& seq);

}  // namespace embedkit
