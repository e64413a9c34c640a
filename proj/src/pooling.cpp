#include "embedkit/pooling.hpp"

#include <algorithm>

namespace embedkit {

namespace {

// two-linear MLP with GELU, optional residual, then mean over rows
TensorPtr mlp_and_mean(const TensorPtr& O, const ModelCheckpoint& ckpt) {
    TensorPtr h = gelu(add_rowvec(matmul_bt(O, ckpt.tensor("pool.mlp.w1")),
                                  ckpt.tensor("pool.mlp.b1")));
    TensorPtr m = add_rowvec(matmul_bt(h, ckpt.tensor("pool.mlp.w2")), ckpt.tensor("pool.mlp.b2"));
    if (ckpt.pool.residual) m = add(O, m);
    const std::int64_t rows = m->rows();
    TensorPtr w = Tensor::full({1, rows}, 1.0 / static_cast<double>(rows));
    return matmul(w, m);
}

TensorPtr gather_kept(const TensorPtr& H, const PoolMask& mask) {
    auto idx = mask.kept_indices();
    if (idx.empty()) throw std::invalid_argument("pooling mask keeps no positions");
    if (static_cast<std::int64_t>(mask.keep.size()) != H->rows()) {
        throw std::invalid_argument("pooling mask length does not match " + shape_str(H->shape));
    }
    return gather_rows(H, idx);
}

}  // namespace

std::vector<std::int64_t> PoolMask::kept_indices() const {
    std::vector<std::int64_t> idx;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) idx.push_back(static_cast<std::int64_t>(i));
    }
    return idx;
}

PoolMask pool_mask_for(const TokenSequence& seq) {
    PoolMask m;
    m.keep.assign(seq.ids.size(), 0);
    const std::int64_t start = std::max<std::int64_t>(seq.instruction_end, 1);  // BOS out
    for (std::int64_t i = start; i < seq.valid_len; ++i) m.keep[static_cast<std::size_t>(i)] = 1;
    return m;
}

TensorPtr pool_eos(const TensorPtr& H, const TokenSequence& seq) {
    if (seq.valid_len < 1 || seq.valid_len > H->rows() ||
        seq.ids[static_cast<std::size_t>(seq.valid_len - 1)] != EOS_ID) {
        throw std::invalid_argument("sequence has no EOS position to pool");
    }
    return gather_rows(H, {seq.valid_len - 1});
}

TensorPtr pool_mean(const TensorPtr& H, const PoolMask& mask) {
    TensorPtr sel = gather_kept(H, mask);
    const std::int64_t rows = sel->rows();
    TensorPtr w = Tensor::full({1, rows}, 1.0 / static_cast<double>(rows));
    return matmul(w, sel);
}

TensorPtr pool_latent_attention(const TensorPtr& H, const ModelCheckpoint& ckpt,
                                const PoolMask& mask, PoolProbe* probe) {
    const auto& latents = ckpt.tensor("pool.latents");
    if (latents->cols() != H->cols()) {
        throw ValidationError("latent dictionary width " + shape_str(latents->shape) +
                              " does not match hidden width " + shape_str(H->shape));
    }
    TensorPtr q = gather_kept(H, mask);
    TensorPtr o = multi_head_attention(q, latents, latents, nullptr, ckpt.pool.n_heads,
                                       /*scaled=*/!ckpt.pool.eq1_literal,
                                       probe ? &probe->head_probs : nullptr);
    return mlp_and_mean(o, ckpt);
}

TensorPtr pool_self_attention(const TensorPtr& H, const ModelCheckpoint& ckpt,
                              const PoolMask& mask, PoolProbe* probe) {
    TensorPtr q = gather_kept(H, mask);
    TensorPtr o = multi_head_attention(q, q, q, nullptr, ckpt.pool.n_heads,
                                       /*scaled=*/!ckpt.pool.eq1_literal,
                                       probe ? &probe->head_probs : nullptr);
    return mlp_and_mean(o, ckpt);
}

TensorPtr normalize(const TensorPtr& e) {
    return l2_normalize_rows(e);
}

TensorPtr pool(const TensorPtr& H, const ModelCheckpoint& ckpt, const TokenSequence& seq) {
    switch (ckpt.pool.kind) {
        case PoolKind::eos: return pool_eos(H, seq);
        case PoolKind::mean: return pool_mean(H, pool_mask_for(seq));
        case PoolKind::self_attention: return pool_self_attention(H, ckpt, pool_mask_for(seq));
        default: return pool_latent_attention(H, ckpt, pool_mask_for(seq));
    }
}

}  // namespace embedkit
