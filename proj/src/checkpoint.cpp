#include "embedkit/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "embedkit/rng.hpp"

namespace embedkit {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'E', 'M', 'B', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, double d) {
    float f = static_cast<float>(d);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ValidationError("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw ValidationError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f32(std::istream& is) {
    std::uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    return static_cast<double>(f);
}

json config_to_json(const ModelCheckpoint& ckpt) {
    json j;
    j["encoder"] = {{"vocab_size", ckpt.enc.vocab_size}, {"d_model", ckpt.enc.d_model},
                    {"n_layers", ckpt.enc.n_layers},     {"n_heads", ckpt.enc.n_heads},
                    {"d_ff", ckpt.enc.d_ff},             {"max_len", ckpt.enc.max_len},
                    {"mask_mode", to_string(ckpt.enc.mask_mode)}};
    j["pooling"] = {{"kind", to_string(ckpt.pool.kind)}, {"latents", ckpt.pool.latents},
                    {"n_heads", ckpt.pool.n_heads},      {"mlp_hidden", ckpt.pool.mlp_hidden},
                    {"residual", ckpt.pool.residual},    {"eq1_literal", ckpt.pool.eq1_literal}};
    j["adapters"] = json::array();
    for (const auto& a : ckpt.adapters) {
        j["adapters"].push_back({{"target", a.target},
                                 {"rank", a.rank},
                                 {"alpha", a.alpha},
                                 {"dropout", a.dropout}});
    }
    return j;
}

void config_from_json(const json& j, ModelCheckpoint& ckpt) {
    const auto& e = j.at("encoder");
    ckpt.enc.vocab_size = e.at("vocab_size").get<std::int64_t>();
    ckpt.enc.d_model = e.at("d_model").get<std::int64_t>();
    ckpt.enc.n_layers = e.at("n_layers").get<std::int64_t>();
    ckpt.enc.n_heads = e.at("n_heads").get<std::int64_t>();
    ckpt.enc.d_ff = e.at("d_ff").get<std::int64_t>();
    ckpt.enc.max_len = e.at("max_len").get<std::int64_t>();
    ckpt.enc.mask_mode = mask_mode_from_string(e.at("mask_mode").get<std::string>());
    const auto& p = j.at("pooling");
    ckpt.pool.kind = pool_kind_from_string(p.at("kind").get<std::string>());
    ckpt.pool.latents = p.at("latents").get<std::int64_t>();
    ckpt.pool.n_heads = p.at("n_heads").get<std::int64_t>();
    ckpt.pool.mlp_hidden = p.at("mlp_hidden").get<std::int64_t>();
    ckpt.pool.residual = p.at("residual").get<bool>();
    ckpt.pool.eq1_literal = p.at("eq1_literal").get<bool>();
    for (const auto& a : j.at("adapters")) {
        LoraSpec s;
        s.target = a.at("target").get<std::string>();
        s.rank = a.at("rank").get<std::int64_t>();
        s.alpha = a.at("alpha").get<double>();
        s.dropout = a.at("dropout").get<double>();
        ckpt.adapters.push_back(std::move(s));
    }
}

TensorPtr normal_tensor(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return Tensor::make(std::move(shape), std::move(v));
}

}  // namespace

MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "causal") return MaskMode::causal;
    if (s == "bidirectional") return MaskMode::bidirectional;
    throw ValidationError("unknown mask_mode '" + s + "' (causal|bidirectional)");
}

std::string to_string(MaskMode m) {
    return m == MaskMode::causal ? "causal" : "bidirectional";
}

PoolKind pool_kind_from_string(const std::string& s) {
    if (s == "eos") return PoolKind::eos;
    if (s == "mean") return PoolKind::mean;
    if (s == "self_attention") return PoolKind::self_attention;
    if (s == "latent_attention") return PoolKind::latent_attention;
    throw ValidationError("unknown pool_type '" + s +
                          "' (eos|mean|self_attention|latent_attention)");
}

std::string to_string(PoolKind k) {
    switch (k) {
        case PoolKind::eos: return "eos";
        case PoolKind::mean: return "mean";
        case PoolKind::self_attention: return "self_attention";
        default: return "latent_attention";
    }
}

void EncoderConfig::validate() const {
    if (vocab_size < 260) throw ValidationError("vocab_size must cover bytes plus specials (>= 260)");
    if (d_model <= 0 || n_layers < 0 || n_heads <= 0 || d_ff <= 0)
        throw ValidationError("encoder dimensions must be positive");
    if (d_model % n_heads != 0) throw ValidationError("d_model must be divisible by n_heads");
    if (max_len < 2) throw ValidationError("max_len must be at least 2 (room for BOS/EOS)");
}

void PoolingConfig::validate(std::int64_t d_model) const {
    if (latents < 1) throw ValidationError("latent count must be >= 1");
    if (n_heads <= 0 || d_model % n_heads != 0)
        throw ValidationError("pooling heads must divide d_model");
    if (mlp_hidden < 0) throw ValidationError("mlp_hidden must be >= 0");
}

const TensorPtr& ModelCheckpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("checkpoint has no tensor '" + name + "'");
    return it->second;
}

TensorPtr& ModelCheckpoint::tensor(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("checkpoint has no tensor '" + name + "'");
    return it->second;
}

ModelCheckpoint ModelCheckpoint::clone() const {
    ModelCheckpoint out;
    out.enc = enc;
    out.pool = pool;
    out.adapters = adapters;
    for (const auto& [name, t] : tensors) {
        out.tensors[name] = Tensor::make(t->shape, t->data, t->requires_grad);
    }
    return out;
}

ModelCheckpoint init_checkpoint(const EncoderConfig& enc, const PoolingConfig& pool,
                                std::uint64_t seed) {
    enc.validate();
    pool.validate(enc.d_model);
    ModelCheckpoint ckpt;
    ckpt.enc = enc;
    ckpt.pool = pool;
    Rng rng(seed);
    const double s = 0.02;
    const std::int64_t d = enc.d_model;

    ckpt.tensors["tok_emb"] = normal_tensor(rng, {enc.vocab_size, d}, s);
    ckpt.tensors["pos_emb"] = normal_tensor(rng, {enc.max_len, d}, s);
    for (std::int64_t i = 0; i < enc.n_layers; ++i) {
        const std::string p = "enc.L" + std::to_string(i) + ".";
        ckpt.tensors[p + "ln1.gain"] = Tensor::full({1, d}, 1.0);
        ckpt.tensors[p + "ln1.bias"] = Tensor::zeros({1, d});
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            ckpt.tensors[p + "attn." + w] = normal_tensor(rng, {d, d}, s);
        }
        for (const char* b : {"bq", "bk", "bv", "bo"}) {
            ckpt.tensors[p + "attn." + b] = Tensor::zeros({1, d});
        }
        ckpt.tensors[p + "ln2.gain"] = Tensor::full({1, d}, 1.0);
        ckpt.tensors[p + "ln2.bias"] = Tensor::zeros({1, d});
        ckpt.tensors[p + "ff.w1"] = normal_tensor(rng, {enc.d_ff, d}, s);
        ckpt.tensors[p + "ff.b1"] = Tensor::zeros({1, enc.d_ff});
        ckpt.tensors[p + "ff.w2"] = normal_tensor(rng, {d, enc.d_ff}, s);
        ckpt.tensors[p + "ff.b2"] = Tensor::zeros({1, d});
    }
    const std::int64_t mh = pool.resolved_mlp_hidden(d);
    // The latent dictionary is both keys and values of the pooling attention,
    // so the text reaches the embedding only through attention weights over
    // it. At weight-scale init those logits are ~1e-2 and every text pools to
    // nearly the same vector, which stalls training; dictionary scale 1/sqrt(d)
    // gives the attention an informative starting point.
    ckpt.tensors["pool.latents"] =
        normal_tensor(rng, {pool.latents, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    ckpt.tensors["pool.mlp.w1"] = normal_tensor(rng, {mh, d}, s);
    ckpt.tensors["pool.mlp.b1"] = Tensor::zeros({1, mh});
    ckpt.tensors["pool.mlp.w2"] = normal_tensor(rng, {d, mh}, s);
    ckpt.tensors["pool.mlp.b2"] = Tensor::zeros({1, d});
    return ckpt;
}

void apply_lora(ModelCheckpoint& ckpt, const std::vector<LoraSpec>& adapters, std::uint64_t seed) {
    Rng rng(seed);
    for (const auto& a : adapters) {
        if (!ckpt.has(a.target)) {
            throw ValidationError("LoRA target '" + a.target + "' is not a checkpoint tensor");
        }
        const auto& w = ckpt.tensor(a.target);
        if (w->shape.size() != 2) {
            throw ValidationError("LoRA target '" + a.target + "' is not a linear weight");
        }
        if (a.rank < 1 || a.rank > std::min(w->shape[0], w->shape[1])) {
            throw ValidationError("LoRA rank out of range for target '" + a.target + "'");
        }
        if (a.dropout < 0.0 || a.dropout >= 1.0) {
            throw ValidationError("LoRA dropout must be in [0, 1)");
        }
        const std::int64_t out = w->shape[0], in = w->shape[1];
        ckpt.tensors["lora." + a.target + ".A"] = normal_tensor(rng, {a.rank, in}, 0.02);
        ckpt.tensors["lora." + a.target + ".B"] = Tensor::zeros({out, a.rank});
        ckpt.adapters.push_back(a);
    }
}

void set_trainable(ModelCheckpoint& ckpt, TrainMode mode) {
    for (auto& [name, t] : ckpt.tensors) {
        t->requires_grad = (mode == TrainMode::full) || name.rfind("lora.", 0) == 0;
        t->grad.clear();
    }
}

std::vector<std::string> trainable_tensor_names(const ModelCheckpoint& ckpt, TrainMode mode) {
    std::vector<std::string> names;
    for (const auto& [name, t] : ckpt.tensors) {
        if (mode == TrainMode::full || name.rfind("lora.", 0) == 0) names.push_back(name);
    }
    return names;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("cannot open checkpoint file for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    const std::string blob = config_to_json(ckpt).dump();
    put_u64(os, blob.size());
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    put_u64(os, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {  // std::map: sorted, deterministic
        put_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(t->shape.size()));
        for (auto d : t->shape) put_u64(os, static_cast<std::uint64_t>(d));
        for (double v : t->data) put_f32(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open checkpoint file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw ValidationError("not a checkpoint file (bad magic): " + path);
    }
    std::uint32_t version = get_u32(is);
    if (version != kVersion) {
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t blob_len = get_u64(is);
    std::string blob(blob_len, '\0');
    is.read(blob.data(), static_cast<std::streamsize>(blob_len));
    if (!is) throw ValidationError("checkpoint truncated");
    ModelCheckpoint ckpt;
    try {
        config_from_json(nlohmann::json::parse(blob), ckpt);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("checkpoint config blob invalid: ") + e.what());
    }
    std::uint64_t count = get_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint64_t name_len = get_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        std::uint32_t rank = get_u32(is);
        std::vector<std::int64_t> shape(rank);
        std::int64_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::int64_t>(get_u64(is));
            numel *= d;
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        for (auto& v : data) v = get_f32(is);
        if (!is) throw ValidationError("checkpoint truncated");
        ckpt.tensors[name] = Tensor::make(std::move(shape), std::move(data));
    }
    return ckpt;
}

void round_to_f32(ModelCheckpoint& ckpt) {
    for (auto& [name, t] : ckpt.tensors) {
        for (auto& v : t->data) v = static_cast<double>(static_cast<float>(v));
    }
}

}  // namespace embedkit
