#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

// Byte-level vocabulary: ids 0..255 are raw bytes, then the specials.
constexpr std::int64_t PAD_ID = 256;
constexpr std::int64_t BOS_ID = 257;
constexpr std::int64_t EOS_ID = 258;
constexpr std::int64_t MASK_ID = 259;

struct TokenSequence {
    std::vector<std::int64_t> ids;    // right-padded with PAD to max_len
    std::int64_t instruction_end = 0; // ids[0..instruction_end) are instruction tokens
    std::int64_t valid_len = 0;       // count excluding padding; ids[valid_len-1] == EOS
};

// BOS + text bytes + EOS, truncated from the right (BOS kept, EOS re-appended),
// right-padded with PAD. Detects the "Instruct: ... Query: " template and sets
// instruction_end one past the marker. Whitespace-only text -> ValidationError.
TokenSequence tokenize(const std::string& text, std::int64_t max_len);

// Additive attention mask, 0 where allowed and -1e30 where not. causal allows
// j <= i; bidirectional allows all pairs; PAD columns (j >= valid_len) are
// disallowed in both modes.
TensorPtr build_attention_mask(std::int64_t l, std::int64_t valid_len, MaskMode mode);

// Multi-head attention over full-width q/k/v via column slices. mask may be
// null; head_probs, when given, receives each head's softmax matrix.
TensorPtr multi_head_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                               const TensorPtr& mask, std::int64_t n_heads, bool scaled,
                               std::vector<TensorPtr>* head_probs = nullptr);

struct EncodeOptions {
    bool training = false;  // enables LoRA dropout
    Rng* rng = nullptr;     // dropout stream; required if training with dropout > 0
};

// Last-layer hidden states of the pre-norm transformer, one row per position
// (including PAD rows, which are masked out of attention columns and pooling).
TensorPtr encode(const TokenSequence& seq, const ModelCheckpoint& ckpt,
                 const EncodeOptions& opt = {});

// Same forward pass, also exposing the residual-stream state after each block
// (the states distillation pairs up).
struct EncodeStates {
    TensorPtr H;
    std::vector<TensorPtr> block_states;  // n_layers entries
};
EncodeStates encode_states(const TokenSequence& seq, const ModelCheckpoint& ckpt,
                           const EncodeOptions& opt = {});

}  // namespace embedkit
