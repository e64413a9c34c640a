#include "embedkit/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "embedkit/pooling.hpp"

namespace embedkit {

void StageConfig::validate() const {
    if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2");
    if (datasets.empty()) throw ValidationError("stage has no datasets");
    if (steps < 0) throw ValidationError("steps must be >= 0");
    if (warmup_steps < 0 || warmup_steps > steps)
        throw ValidationError("warmup_steps must lie in [0, steps]");
    if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (n_hard_negatives < 0) throw ValidationError("n_hard_negatives must be >= 0");
    if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
}

StageConfig stage_defaults(int stage) {
    if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2");
    StageConfig cfg;
    cfg.stage = stage;
    cfg.in_batch_negatives = stage == 1;
    cfg.learning_rate = stage == 1 ? 2e-5 : 1.5e-5;
    return cfg;
}

void BatchEmbeddings::validate() const {
    if (!Q || !P) throw ValidationError("batch is missing query or positive embeddings");
    if (Q->shape != P->shape || Q->shape.size() != 2)
        throw ValidationError("query and positive embeddings must both be B x d");
    const std::int64_t B = Q->shape[0];
    const std::int64_t d = Q->shape[1];
    if (B < 1) throw ValidationError("batch must hold at least one query");
    if (!negs.empty() && static_cast<std::int64_t>(negs.size()) != B)
        throw ValidationError("negative lists must be empty or one per query");

    auto check_unit = [d](const TensorPtr& t, const char* what) {
        for (std::int64_t i = 0; i < t->shape[0]; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j) s += t->at(i, j) * t->at(i, j);
            if (std::abs(std::sqrt(s) - 1.0) > 1e-9)
                throw ValidationError(std::string(what) + " embeddings must be unit-normalized");
        }
    };
    check_unit(Q, "query");
    check_unit(P, "positive");
    for (const auto& n : negs) {
        if (!n) continue;
        if (n->shape.size() != 2 || n->shape[1] != d)
            throw ValidationError("negative embeddings must be k x d");
        check_unit(n, "negative");
    }
}

TensorPtr contrastive_loss(const BatchEmbeddings& be, bool in_batch, double temperature,
                           std::vector<double>* per_query) {
    if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
    be.validate();

    const std::int64_t B = be.Q->shape[0];
    auto S = matmul_bt(be.Q, be.P);  // S[i][j] = cos(q_i, p_j)

    std::int64_t max_k = 0;
    for (const auto& n : be.negs)
        if (n) max_k = std::max(max_k, n->shape[0]);
    const std::int64_t width = 1 + max_k + (in_batch ? B - 1 : 0);

    std::vector<TensorPtr> rows;
    rows.reserve(static_cast<std::size_t>(B));
    for (std::int64_t i = 0; i < B; ++i) {
        auto srow = gather_rows(S, {i});
        std::vector<TensorPtr> parts{slice_cols(srow, i, 1)};  // positive at column 0
        std::int64_t w = 1;
        const TensorPtr& ni = be.negs.empty() ? nullptr : be.negs[static_cast<std::size_t>(i)];
        if (ni) {
            parts.push_back(matmul_bt(gather_rows(be.Q, {i}), ni));
            w += ni->shape[0];
        }
        if (in_batch && B > 1) {
            if (i > 0) parts.push_back(slice_cols(srow, 0, i));
            if (i < B - 1) parts.push_back(slice_cols(srow, i + 1, B - 1 - i));
            w += B - 1;
        }
        // unreachable pad columns: exp underflows to exactly zero after scaling
        if (w < width) parts.push_back(Tensor::full({1, width - w}, -1e30));
        rows.push_back(concat_cols(parts));
    }
    auto logits = scale(concat_rows(rows), 1.0 / temperature);
    return cross_entropy_rows(logits, std::vector<std::int64_t>(static_cast<std::size_t>(B), 0),
                              per_query);
}

AdamW::AdamW(double peak_lr, double weight_decay, std::int64_t warmup_steps,
             std::int64_t total_steps)
    : peak_lr_(peak_lr), weight_decay_(weight_decay), warmup_(warmup_steps), total_(total_steps) {
    if (!(peak_lr >= 0.0)) throw ValidationError("learning rate must be >= 0");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw ValidationError("warmup_steps must lie in [0, total_steps]");
}

double AdamW::lr_at(std::int64_t t) const {
    if (total_ == 0) return 0.0;
    if (t < warmup_) return peak_lr_ * static_cast<double>(t + 1) / static_cast<double>(warmup_);
    if (total_ == warmup_) return peak_lr_;
    return peak_lr_ * static_cast<double>(total_ - t) / static_cast<double>(total_ - warmup_);
}

void AdamW::step(ModelCheckpoint& ckpt) {
    const double lr = lr_at(t_);
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& [name, w] : ckpt.tensors) {
        if (!w->requires_grad || w->grad.empty()) continue;
        auto& m = m_[name];
        auto& v = v_[name];
        m.resize(w->data.size(), 0.0);
        v.resize(w->data.size(), 0.0);
        const auto& g = w->grad;
        for (std::size_t e = 0; e < w->data.size(); ++e) {
            m[e] = b1 * m[e] + (1.0 - b1) * g[e];
            v[e] = b2 * v[e] + (1.0 - b2) * g[e] * g[e];
            const double mhat = m[e] / bc1;
            const double vhat = v[e] / bc2;
            w->data[e] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay_ * w->data[e]);
        }
        w->grad.clear();
    }
}

const std::vector<double>* AdamW::first_moment(const std::string& name) const {
    auto it = m_.find(name);
    return it == m_.end() ? nullptr : &it->second;
}

const std::vector<double>* AdamW::second_moment(const std::string& name) const {
    auto it = v_.find(name);
    return it == v_.end() ? nullptr : &it->second;
}

void write_metrics(const std::string& path, const std::vector<StepTrace>& trace) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open metrics file for writing: " + path);
    char buf[64];
    for (const auto& t : trace) {
        std::snprintf(buf, sizeof buf, "%lld,%.9g\n", static_cast<long long>(t.step), t.loss);
        out << buf;
    }
    if (!out) throw ValidationError("failed writing metrics file: " + path);
}

namespace {

struct EncodedText {
    TokenSequence seq;
    EncodeStates enc;
    TensorPtr embedding;
};

EncodedText embed_for_training(const std::string& text, const ModelCheckpoint& ckpt,
                               const EncodeOptions& opt) {
    EncodedText out;
    out.seq = tokenize(text, ckpt.enc.max_len);
    out.enc = encode_states(out.seq, ckpt, opt);
    out.embedding = normalize(pool(out.enc.H, ckpt, out.seq));
    return out;
}

std::string document_text(const TrainingExample& ex, const std::string& doc) {
    // symmetric tasks instruct both sides; plain retrieval leaves documents raw
    return ex.symmetric ? format_instructed_query(ex.task_definition, doc) : doc;
}

}  // namespace

StageResult train_stage(const StageConfig& cfg, const ModelCheckpoint& ckpt_in,
                        const TrainHooks& hooks) {
    cfg.validate();
    StageResult res{ckpt_in.clone(), {}};
    auto& ckpt = res.ckpt;
    if (cfg.train_mode == TrainMode::lora && ckpt.adapters.empty())
        throw ValidationError("lora training requires a checkpoint with adapters");
    set_trainable(ckpt, cfg.train_mode);

    Rng root(cfg.seed + static_cast<std::uint64_t>(cfg.stage));
    BlendedStream stream = load_blended(cfg.datasets, root.next_u64());
    Rng dropout_rng = root.fork(1);

    AdamW opt(cfg.learning_rate, cfg.weight_decay, cfg.warmup_steps, cfg.steps);
    res.trace.reserve(static_cast<std::size_t>(cfg.steps));

    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        try {
            std::vector<TrainingExample> batch;
            batch.reserve(static_cast<std::size_t>(cfg.batch_size));
            for (std::int64_t b = 0; b < cfg.batch_size; ++b) batch.push_back(stream.next());

            EncodeOptions eopt;
            eopt.training = true;
            eopt.rng = &dropout_rng;

            std::vector<SequenceStates> qstates;
            std::vector<TensorPtr> qrows, prows;
            BatchEmbeddings be;
            for (const auto& ex : batch) {
                auto q = embed_for_training(
                    format_instructed_query(ex.task_definition, ex.query), ckpt, eopt);
                qrows.push_back(q.embedding);
                qstates.push_back({q.seq, q.enc, q.embedding});
                prows.push_back(
                    embed_for_training(document_text(ex, ex.positive), ckpt, eopt).embedding);

                const std::size_t k = std::min<std::size_t>(
                    ex.negatives.size(), static_cast<std::size_t>(cfg.n_hard_negatives));
                if (k == 0) {
                    be.negs.push_back(nullptr);
                } else {
                    std::vector<TensorPtr> nrows;
                    for (std::size_t j = 0; j < k; ++j) {
                        nrows.push_back(
                            embed_for_training(document_text(ex, ex.negatives[j]), ckpt, eopt)
                                .embedding);
                    }
                    be.negs.push_back(concat_rows(nrows));
                }
            }
            be.Q = concat_rows(qrows);
            be.P = concat_rows(prows);

            std::vector<double> per_query;
            auto loss = contrastive_loss(be, cfg.in_batch_negatives, cfg.temperature, &per_query);
            if (hooks.extra_loss) {
                if (auto extra = hooks.extra_loss(qstates)) loss = add(loss, extra);
            }
            const double loss_value = loss->item();
            if (!std::isfinite(loss_value)) throw std::runtime_error("loss is not finite");

            StepTrace tr;
            tr.step = step;
            tr.loss = loss_value;
            std::map<std::string, std::pair<double, std::int64_t>> acc;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                auto& slot = acc[batch[i].source_dataset];
                slot.first += per_query[i];
                slot.second += 1;
            }
            for (const auto& [src, sc] : acc)
                tr.per_source[src] = sc.first / static_cast<double>(sc.second);

            backward(loss);
            if (hooks.on_step) hooks.on_step(step, opt);
            opt.step(ckpt);
            if (hooks.after_update) hooks.after_update(ckpt);
            res.trace.push_back(std::move(tr));
        } catch (const ValidationError&) {
            throw;
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                                     e.what());
        }
    }
    return res;
}

TwoStageResult two_stage_train(const StageConfig& cfg1, const StageConfig& cfg2,
                               const ModelCheckpoint& ckpt0, const TrainHooks& hooks,
                               const std::function<void(const StageResult&)>& after_stage1) {
    if (cfg1.stage != 1) throw ValidationError("first config must have stage = 1");
    if (cfg2.stage != 2) throw ValidationError("second config must have stage = 2");

    StageResult s1 = train_stage(cfg1, ckpt0, hooks);
    round_to_f32(s1.ckpt);  // the boundary persists the stage-1 artifact
    if (after_stage1) after_stage1(s1);

    StageResult s2 = train_stage(cfg2, s1.ckpt, hooks);
    return {std::move(s2.ckpt), std::move(s1.trace), std::move(s2.trace)};
}

}  // namespace embedkit
