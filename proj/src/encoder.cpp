#include "embedkit/encoder.hpp"

#include <cmath>

namespace embedkit {

namespace {

bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

const LoraSpec* adapter_for(const ModelCheckpoint& ckpt, const std::string& target) {
    for (const auto& a : ckpt.adapters) {
        if (a.target == target) return &a;
    }
    return nullptr;
}

// y = x W^T + b, with the low-rank adapter path added when one is attached.
TensorPtr linear(const TensorPtr& x, const ModelCheckpoint& ckpt, const std::string& w_name,
                 const std::string& b_name, const EncodeOptions& opt) {
    TensorPtr y = add_rowvec(matmul_bt(x, ckpt.tensor(w_name)), ckpt.tensor(b_name));
    const LoraSpec* a = adapter_for(ckpt, w_name);
    if (!a) return y;
    TensorPtr in = x;
    if (opt.training && a->dropout > 0.0) {
        if (!opt.rng) throw std::invalid_argument("LoRA dropout requires an rng in training mode");
        const double keep = 1.0 - a->dropout;
        std::vector<double> m(x->data.size());
        for (auto& v : m) v = opt.rng->uniform() < keep ? 1.0 / keep : 0.0;
        in = mul(x, Tensor::make(x->shape, std::move(m)));
    }
    TensorPtr down = matmul_bt(in, ckpt.tensor("lora." + w_name + ".A"));
    TensorPtr up = matmul_bt(down, ckpt.tensor("lora." + w_name + ".B"));
    return add(y, scale(up, a->alpha / static_cast<double>(a->rank)));
}

EncodeStates run_encoder(const TokenSequence& seq, const ModelCheckpoint& ckpt,
                         const EncodeOptions& opt) {
    const EncoderConfig& cfg = ckpt.enc;
    const std::int64_t l = static_cast<std::int64_t>(seq.ids.size());
    if (l == 0) throw ValidationError("cannot encode an empty token sequence");
    if (l > cfg.max_len || seq.valid_len > l || seq.valid_len < 1) {
        throw ValidationError("token sequence length exceeds model max_len");
    }
    for (std::int64_t id : seq.ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw ValidationError("token id " + std::to_string(id) + " out of vocabulary");
        }
    }
    std::vector<std::int64_t> positions(static_cast<std::size_t>(l));
    for (std::int64_t i = 0; i < l; ++i) positions[static_cast<std::size_t>(i)] = i;

    TensorPtr x = add(gather_rows(ckpt.tensor("tok_emb"), seq.ids),
                      gather_rows(ckpt.tensor("pos_emb"), positions));
    TensorPtr mask = build_attention_mask(l, seq.valid_len, cfg.mask_mode);

    EncodeStates out;
    const double eps = 1e-5;
    for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "enc.L" + std::to_string(i) + ".";
        TensorPtr xn = layer_norm(x, ckpt.tensor(p + "ln1.gain"), ckpt.tensor(p + "ln1.bias"), eps);
        TensorPtr q = linear(xn, ckpt, p + "attn.wq", p + "attn.bq", opt);
        TensorPtr k = linear(xn, ckpt, p + "attn.wk", p + "attn.bk", opt);
        TensorPtr v = linear(xn, ckpt, p + "attn.wv", p + "attn.bv", opt);
        TensorPtr att = multi_head_attention(q, k, v, mask, cfg.n_heads, /*scaled=*/true);
        x = add(x, linear(att, ckpt, p + "attn.wo", p + "attn.bo", opt));

        TensorPtr x2 = layer_norm(x, ckpt.tensor(p + "ln2.gain"), ckpt.tensor(p + "ln2.bias"), eps);
        TensorPtr h = gelu(linear(x2, ckpt, p + "ff.w1", p + "ff.b1", opt));
        x = add(x, linear(h, ckpt, p + "ff.w2", p + "ff.b2", opt));
        out.block_states.push_back(x);
    }
    out.H = x;
    return out;
}

}  // namespace

TokenSequence tokenize(const std::string& text, std::int64_t max_len) {
    if (max_len < 2) throw ValidationError("max_len must be at least 2");
    bool all_space = true;
    for (unsigned char c : text) {
        if (!is_space(c)) {
            all_space = false;
            break;
        }
    }
    if (text.empty() || all_space) throw ValidationError("cannot tokenize empty text");

    TokenSequence seq;
    const std::size_t body = std::min(text.size(), static_cast<std::size_t>(max_len - 2));
    seq.ids.reserve(static_cast<std::size_t>(max_len));
    seq.ids.push_back(BOS_ID);
    for (std::size_t i = 0; i < body; ++i) {
        seq.ids.push_back(static_cast<std::int64_t>(static_cast<unsigned char>(text[i])));
    }
    seq.ids.push_back(EOS_ID);
    seq.valid_len = static_cast<std::int64_t>(seq.ids.size());

    // Eq-2-shaped strings carry their own pooling boundary: everything through
    // the " Query: " marker counts as instruction tokens (BOS included).
    static const std::string kPrefix = "Instruct: ";
    static const std::string kMarker = " Query: ";
    if (text.rfind(kPrefix, 0) == 0) {
        const std::size_t at = text.find(kMarker);
        if (at != std::string::npos) {
            std::int64_t end = static_cast<std::int64_t>(1 + at + kMarker.size());
            seq.instruction_end = std::min(end, seq.valid_len - 1);
        }
    }
    while (static_cast<std::int64_t>(seq.ids.size()) < max_len) seq.ids.push_back(PAD_ID);
    return seq;
}

TensorPtr multi_head_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                               const TensorPtr& mask, std::int64_t n_heads, bool scaled,
                               std::vector<TensorPtr>* head_probs) {
    const std::int64_t d = q->cols();
    if (n_heads < 1 || d % n_heads != 0) {
        throw std::invalid_argument("head count must divide width " + shape_str(q->shape));
    }
    if (k->cols() != d || v->cols() != d || k->rows() != v->rows()) {
        throw std::invalid_argument("attention k/v shapes disagree: " + shape_str(k->shape) +
                                    " vs " + shape_str(v->shape));
    }
    const std::int64_t dh = d / n_heads;
    std::vector<TensorPtr> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (std::int64_t h = 0; h < n_heads; ++h) {
        TensorPtr qh = slice_cols(q, h * dh, dh);
        TensorPtr kh = slice_cols(k, h * dh, dh);
        TensorPtr vh = slice_cols(v, h * dh, dh);
        TensorPtr scores = matmul_bt(qh, kh);
        if (scaled) scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
        if (mask) scores = add(scores, mask);
        TensorPtr probs = softmax_rows(scores);
        if (head_probs) head_probs->push_back(probs);
        heads.push_back(matmul(probs, vh));
    }
    return n_heads == 1 ? heads[0] : concat_cols(heads);
}

TensorPtr build_attention_mask(std::int64_t l, std::int64_t valid_len, MaskMode mode) {
    if (l < 1) throw std::invalid_argument("attention mask needs l >= 1");
    if (valid_len < 1 || valid_len > l) throw std::invalid_argument("valid_len out of range");
    std::vector<double> m(static_cast<std::size_t>(l * l), -1e30);
    for (std::int64_t i = 0; i < l; ++i) {
        const std::int64_t cols = mode == MaskMode::causal ? std::min(i + 1, valid_len) : valid_len;
        for (std::int64_t j = 0; j < cols; ++j) m[i * l + j] = 0.0;
    }
    return Tensor::make({l, l}, std::move(m));
}

TensorPtr encode(const TokenSequence& seq, const ModelCheckpoint& ckpt, const EncodeOptions& opt) {
    return run_encoder(seq, ckpt, opt).H;
}

EncodeStates encode_states(const TokenSequence& seq, const ModelCheckpoint& ckpt,
                           const EncodeOptions& opt) {
    return run_encoder(seq, ckpt, opt);
}

}  // namespace embedkit
