#include "embedkit/compress.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "embedkit/encoder.hpp"
#include "embedkit/pooling.hpp"

namespace embedkit {

namespace {

bool ends_with(const std::string& s, const std::string& tail) {
    return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

}  // namespace

bool is_prunable(const std::string& name) {
    if (name == "pool.mlp.w1" || name == "pool.mlp.w2") return true;
    if (name.rfind("enc.L", 0) != 0) return false;
    return ends_with(name, ".attn.wq") || ends_with(name, ".attn.wk") ||
           ends_with(name, ".attn.wv") || ends_with(name, ".attn.wo") ||
           ends_with(name, ".ff.w1") || ends_with(name, ".ff.w2");
}

std::vector<std::string> prunable_tensors(const ModelCheckpoint& ckpt) {
    std::vector<std::string> out;
    for (const auto& [name, t] : ckpt.tensors)
        if (is_prunable(name)) out.push_back(name);
    return out;
}

PrunePattern PrunePattern::parse(const std::string& text) {
    PrunePattern p;
    if (text == "none") return p;
    const std::string uns = "unstructured:";
    if (text.rfind(uns, 0) == 0) {
        p.kind = Kind::unstructured;
        const std::string num = text.substr(uns.size());
        std::size_t used = 0;
        try {
            p.fraction = std::stod(num, &used);
        } catch (const std::exception&) {
            throw ValidationError("bad prune fraction in '" + text + "'");
        }
        if (used != num.size()) throw ValidationError("bad prune fraction in '" + text + "'");
        p.validate();
        return p;
    }
    const auto colon = text.find(':');
    if (colon != std::string::npos) {
        try {
            std::size_t un = 0, um = 0;
            p.n = std::stoll(text.substr(0, colon), &un);
            p.m = std::stoll(text.substr(colon + 1), &um);
            if (un == colon && um == text.size() - colon - 1) {
                p.kind = Kind::n_of_m;
                p.validate();
                return p;
            }
        } catch (const std::exception&) {
        }
    }
    throw ValidationError("unrecognized prune pattern '" + text +
                          "' (want none, unstructured:P, or N:M)");
}

std::string PrunePattern::describe() const {
    switch (kind) {
        case Kind::none:
            return "none";
        case Kind::unstructured: {
            char buf[48];
            std::snprintf(buf, sizeof buf, "unstructured:%g", fraction);
            return buf;
        }
        case Kind::n_of_m:
            return std::to_string(n) + ":" + std::to_string(m);
    }
    return "none";
}

void PrunePattern::validate() const {
    if (kind == Kind::unstructured && !(fraction >= 0.0 && fraction <= 1.0))
        throw ValidationError("prune fraction must lie in [0, 1]");
    if (kind == Kind::n_of_m && (m <= 0 || n <= 0 || n > m))
        throw ValidationError("N:M pruning needs 0 < N <= M");
}

double PruneMask::kept_fraction(const std::string& name) const {
    auto it = keep.find(name);
    if (it == keep.end()) throw ValidationError("no prune mask for tensor " + name);
    if (it->second.empty()) return 1.0;
    double kept = 0.0;
    for (auto k : it->second) kept += k ? 1.0 : 0.0;
    return kept / static_cast<double>(it->second.size());
}

namespace {

// indices of v ordered by falling magnitude, earlier index first on ties
void order_by_magnitude(const std::vector<double>& v, std::vector<std::size_t>& idx) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(v[a]), mb = std::fabs(v[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    });
}

std::vector<std::uint8_t> prune_one(const std::string& name, const Tensor& t,
                                    const PrunePattern& pattern) {
    const auto& v = t.data;
    std::vector<std::uint8_t> keep(v.size(), 0);
    if (pattern.kind == PrunePattern::Kind::unstructured) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        order_by_magnitude(v, idx);
        const auto n_keep = static_cast<std::size_t>(
            std::llround((1.0 - pattern.fraction) * static_cast<double>(v.size())));
        for (std::size_t r = 0; r < n_keep && r < idx.size(); ++r) keep[idx[r]] = 1;
        return keep;
    }
    // N:M. Weights are [out x in], so each aligned group of M consecutive
    // stored weights is M inputs feeding one output unit.
    const std::int64_t out = t.rows(), in = t.cols();
    if (in % pattern.m != 0)
        throw ValidationError("tensor " + name + " input dim " + std::to_string(in) +
                              " is not divisible by the group size " + std::to_string(pattern.m));
    std::vector<double> group(static_cast<std::size_t>(pattern.m));
    std::vector<std::size_t> gidx(static_cast<std::size_t>(pattern.m));
    for (std::int64_t i = 0; i < out; ++i) {
        for (std::int64_t g = 0; g < in / pattern.m; ++g) {
            const auto base = static_cast<std::size_t>(i * in + g * pattern.m);
            for (std::int64_t r = 0; r < pattern.m; ++r)
                group[static_cast<std::size_t>(r)] = v[base + static_cast<std::size_t>(r)];
            std::iota(gidx.begin(), gidx.end(), 0);
            order_by_magnitude(group, gidx);
            for (std::int64_t r = 0; r < pattern.n; ++r)
                keep[base + gidx[static_cast<std::size_t>(r)]] = 1;
        }
    }
    return keep;
}

}  // namespace

PruneResult magnitude_prune(const ModelCheckpoint& ckpt, const PrunePattern& pattern) {
    pattern.validate();
    PruneResult res{ckpt.clone(), {}};
    res.mask.pattern = pattern;
    if (pattern.kind == PrunePattern::Kind::none) return res;
    for (const auto& name : prunable_tensors(res.ckpt)) {
        auto& t = *res.ckpt.tensor(name);
        auto keep = prune_one(name, t, pattern);
        for (std::size_t i = 0; i < t.data.size(); ++i)
            if (!keep[i]) t.data[i] = 0.0;
        res.mask.keep.emplace(name, std::move(keep));
    }
    return res;
}

void apply_prune_mask(ModelCheckpoint& ckpt, const PruneMask& mask) {
    for (const auto& [name, keep] : mask.keep) {
        if (!ckpt.has(name)) throw ValidationError("prune mask names missing tensor " + name);
        auto& t = *ckpt.tensor(name);
        if (t.data.size() != keep.size())
            throw ValidationError("prune mask for " + name + " has " +
                                  std::to_string(keep.size()) + " entries, tensor has " +
                                  std::to_string(t.data.size()));
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (!keep[i]) t.data[i] = 0.0;
    }
}

KdMapping kd_default_mapping(std::size_t n_student, std::size_t n_teacher) {
    if (n_student == 0 || n_teacher == 0)
        throw ValidationError("distillation needs at least one state on each side");
    if (n_student > n_teacher)
        throw ValidationError("student has more states than the teacher (" +
                              std::to_string(n_student) + " vs " + std::to_string(n_teacher) +
                              ")");
    KdMapping map;
    for (std::size_t i = 0; i + 1 < n_student; ++i) map.emplace_back(i, i);
    map.emplace_back(n_student - 1, n_teacher - 1);
    return map;
}

TensorPtr kd_loss(const std::vector<TensorPtr>& student_states,
                  const std::vector<TensorPtr>& teacher_states, const KdMapping& mapping) {
    if (mapping.empty()) throw ValidationError("distillation mapping is empty");
    TensorPtr total;
    for (const auto& [si, ti] : mapping) {
        if (si >= student_states.size() || ti >= teacher_states.size())
            throw ValidationError("distillation mapping (" + std::to_string(si) + ", " +
                                  std::to_string(ti) + ") is out of range");
        const auto& s = student_states[si];
        const auto& t = teacher_states[ti];
        if (s->shape != t->shape)
            throw ValidationError("state pair (" + std::to_string(si) + ", " +
                                  std::to_string(ti) + ") has mismatched shapes " +
                                  shape_str(s->shape) + " vs " + shape_str(t->shape));
        auto diff = sub(s, t);
        auto mse = scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(s->data.size()));
        total = total ? add(total, mse) : mse;
    }
    return total;
}

double kd_total_loss(double contrastive, double kd, double alpha) {
    if (alpha < 0.0) throw ValidationError("distillation weight must be nonnegative");
    return contrastive + alpha * kd;
}

QuantFormat QuantFormat::parse(const std::string& text) {
    if (text == "int8") return {Kind::int8_perrow_absmax};
    if (text == "fp8e4m3") return {Kind::fp8_e4m3};
    if (text == "fp8e5m2") return {Kind::fp8_e5m2};
    throw ValidationError("unrecognized quantization format '" + text +
                          "' (want int8, fp8e4m3, or fp8e5m2)");
}

std::string QuantFormat::describe() const {
    switch (kind) {
        case Kind::int8_perrow_absmax:
            return "int8";
        case Kind::fp8_e4m3:
            return "fp8e4m3";
        case Kind::fp8_e5m2:
            return "fp8e5m2";
    }
    return "int8";
}

std::vector<double> fp8_value_table(QuantFormat::Kind kind) {
    if (kind == QuantFormat::Kind::int8_perrow_absmax)
        throw ValidationError("int8 has no shared value table; scales are per output unit");
    const int ebits = kind == QuantFormat::Kind::fp8_e4m3 ? 4 : 5;
    const int mbits = kind == QuantFormat::Kind::fp8_e4m3 ? 3 : 2;
    const int bias = (1 << (ebits - 1)) - 1;
    std::vector<double> out;
    for (int exp = 0; exp < (1 << ebits); ++exp) {
        for (int mant = 0; mant < (1 << mbits); ++mant) {
            if (ebits == 5 && exp == (1 << ebits) - 1) continue;  // inf and NaN
            if (ebits == 4 && exp == (1 << ebits) - 1 && mant == (1 << mbits) - 1)
                continue;  // the single NaN pattern of the all-finite variant
            const double frac = static_cast<double>(mant) / (1 << mbits);
            out.push_back(exp == 0 ? std::ldexp(frac, 1 - bias)
                                   : std::ldexp(1.0 + frac, exp - bias));
        }
    }
    return out;
}

double fp8_round(double x, QuantFormat::Kind kind) {
    if (std::isnan(x)) throw ValidationError("cannot quantize a NaN weight");
    static const std::vector<double> e4m3 = fp8_value_table(QuantFormat::Kind::fp8_e4m3);
    static const std::vector<double> e5m2 = fp8_value_table(QuantFormat::Kind::fp8_e5m2);
    const auto& table = kind == QuantFormat::Kind::fp8_e4m3 ? e4m3 : e5m2;
    if (kind != QuantFormat::Kind::fp8_e4m3 && kind != QuantFormat::Kind::fp8_e5m2)
        throw ValidationError("fp8_round needs an fp8 format");
    const double v = std::fabs(x);
    if (v >= table.back()) return std::copysign(table.back(), x);
    const auto it = std::lower_bound(table.begin(), table.end(), v);
    if (*it == v) return std::copysign(v, x);
    // *it > v and v > table[0] = 0, so both neighbors exist
    const auto hi_idx = static_cast<std::size_t>(it - table.begin());
    const double lo = table[hi_idx - 1], hi = table[hi_idx];
    const double mid = (lo + hi) / 2.0;  // dyadic, exact in double
    double r;
    if (v < mid) {
        r = lo;
    } else if (v > mid) {
        r = hi;
    } else {
        // ties to even mantissa; table index parity equals mantissa parity
        r = (hi_idx % 2 == 0) ? hi : lo;
    }
    return std::copysign(r, x);
}

namespace {

void quantize_int8(Tensor& t) {
    // weights are [out x in]: one absmax scale per stored row
    const std::int64_t out = t.rows(), in = t.cols();
    for (std::int64_t i = 0; i < out; ++i) {
        double amax = 0.0;
        for (std::int64_t j = 0; j < in; ++j)
            amax = std::max(amax, std::fabs(t.data[static_cast<std::size_t>(i * in + j)]));
        if (amax == 0.0) continue;
        const double scale = amax / 127.0;
        for (std::int64_t j = 0; j < in; ++j) {
            auto& w = t.data[static_cast<std::size_t>(i * in + j)];
            const double q = std::min(127.0, std::max(-127.0, std::nearbyint(w / scale)));
            w = q * scale;
        }
    }
}

}  // namespace

void quantize_weights(ModelCheckpoint& ckpt, const QuantFormat& fmt) {
    for (const auto& name : prunable_tensors(ckpt)) {
        auto& t = *ckpt.tensor(name);
        if (fmt.kind == QuantFormat::Kind::int8_perrow_absmax) {
            quantize_int8(t);
        } else {
            for (auto& w : t.data) w = fp8_round(w, fmt.kind);
        }
    }
}

ModelCheckpoint make_student(const ModelCheckpoint& teacher) {
    ModelCheckpoint s = teacher.clone();
    s.pool.kind = PoolKind::mean;
    for (const char* name :
         {"pool.latents", "pool.mlp.w1", "pool.mlp.b1", "pool.mlp.w2", "pool.mlp.b2"})
        s.tensors.erase(name);
    return s;
}

TrainHooks make_kd_hooks(const ModelCheckpoint& teacher, double alpha,
                         std::shared_ptr<const PruneMask> mask) {
    if (alpha < 0.0) throw ValidationError("distillation weight must be nonnegative");
    auto frozen = std::make_shared<ModelCheckpoint>(teacher.clone());
    for (auto& [name, t] : frozen->tensors) t->requires_grad = false;
    auto cache = std::make_shared<std::unordered_map<std::string, std::vector<TensorPtr>>>();

    TrainHooks hooks;
    hooks.extra_loss = [frozen, cache, alpha](const std::vector<SequenceStates>& queries) {
        if (queries.empty() || alpha == 0.0) return TensorPtr{};
        TensorPtr total;
        for (const auto& qs : queries) {
            std::vector<TensorPtr> ss = qs.enc.block_states;
            ss.push_back(qs.embedding);

            std::string key(reinterpret_cast<const char*>(qs.seq.ids.data()),
                            qs.seq.ids.size() * sizeof(qs.seq.ids[0]));
            key += ':' + std::to_string(qs.seq.instruction_end);
            auto it = cache->find(key);
            if (it == cache->end()) {
                NoGradGuard ng;
                auto est = encode_states(qs.seq, *frozen);
                auto ts = est.block_states;
                ts.push_back(normalize(pool(est.H, *frozen, qs.seq)));
                it = cache->emplace(key, std::move(ts)).first;
            }
            auto kd = kd_loss(ss, it->second, kd_default_mapping(ss.size(), it->second.size()));
            total = total ? add(total, kd) : kd;
        }
        return scale(total, alpha / static_cast<double>(queries.size()));
    };
    if (mask) {
        hooks.after_update = [mask](ModelCheckpoint& ck) { apply_prune_mask(ck, *mask); };
    }
    return hooks;
}

void write_compression_report(const std::string& path, const CompressionReport& rep) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write compression report to " + path);
    char buf[96];
    out << "prune=" << rep.prune << "\n";
    out << "quant=" << rep.quant << "\n";
    for (const auto& [name, frac] : rep.kept_fraction) {
        std::snprintf(buf, sizeof buf, "%.9g", frac);
        out << "kept." << name << "=" << buf << "\n";
    }
    for (const auto& [metric, val] : rep.metrics_before) {
        std::snprintf(buf, sizeof buf, "%.9g", val);
        out << "before." << metric << "=" << buf << "\n";
    }
    for (const auto& [metric, val] : rep.metrics_after) {
        std::snprintf(buf, sizeof buf, "%.9g", val);
        out << "after." << metric << "=" << buf << "\n";
    }
    for (const auto& [metric, val] : rep.metrics_after) {
        auto it = rep.metrics_before.find(metric);
        if (it == rep.metrics_before.end()) continue;
        std::snprintf(buf, sizeof buf, "%.9g", val - it->second);
        out << "delta." << metric << "=" << buf << "\n";
    }
}

}  // namespace embedkit
