#include "embedkit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "embedkit/compress.hpp"
#include "embedkit/curation.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/eval.hpp"
#include "embedkit/pooling.hpp"

namespace embedkit {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// flat key = value file with '#' comments and duplicate/unknown key rejection
class KvConfig {
public:
    static KvConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open config file " + path);
        KvConfig kv;
        kv.path_ = path;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ValidationError(path + ":" + std::to_string(lineno) +
                                      ": expected key = value");
            const auto key = trim(line.substr(0, eq));
            const auto val = trim(line.substr(eq + 1));
            if (key.empty())
                throw ValidationError(path + ":" + std::to_string(lineno) + ": empty key");
            if (!kv.entries_.emplace(key, val).second)
                throw ValidationError(path + ":" + std::to_string(lineno) + ": duplicate key '" +
                                      key + "'");
        }
        return kv;
    }

    std::string str(const std::string& key, const std::string& dflt) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return dflt;
        consumed_.insert(key);
        return it->second;
    }

    std::int64_t i64(const std::string& key, std::int64_t dflt) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return dflt;
        consumed_.insert(key);
        try {
            std::size_t used = 0;
            const auto v = std::stoll(it->second, &used);
            if (used == it->second.size()) return v;
        } catch (const std::exception&) {
        }
        throw ValidationError(path_ + ": key '" + key + "' wants an integer, got '" + it->second +
                              "'");
    }

    std::uint64_t u64(const std::string& key, std::uint64_t dflt) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return dflt;
        consumed_.insert(key);
        try {
            std::size_t used = 0;
            const auto v = std::stoull(it->second, &used);
            if (used == it->second.size()) return v;
        } catch (const std::exception&) {
        }
        throw ValidationError(path_ + ": key '" + key + "' wants a nonnegative integer, got '" +
                              it->second + "'");
    }

    double f64(const std::string& key, double dflt) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return dflt;
        consumed_.insert(key);
        try {
            std::size_t used = 0;
            const auto v = std::stod(it->second, &used);
            if (used == it->second.size()) return v;
        } catch (const std::exception&) {
        }
        throw ValidationError(path_ + ": key '" + key + "' wants a number, got '" + it->second +
                              "'");
    }

    bool boolean(const std::string& key, bool dflt) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return dflt;
        consumed_.insert(key);
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw ValidationError(path_ + ": key '" + key + "' wants true or false, got '" +
                              it->second + "'");
    }

    std::vector<std::string> list(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return {};
        consumed_.insert(key);
        std::vector<std::string> out;
        std::stringstream ss(it->second);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    void reject_unknown() const {
        for (const auto& [key, val] : entries_)
            if (consumed_.count(key) == 0)
                throw ValidationError(path_ + ": unknown config key '" + key + "'");
    }

private:
    std::map<std::string, std::string> entries_;
    std::string path_;
    mutable std::set<std::string> consumed_;
};

void fill_stage(const KvConfig& kv, StageConfig& sc, const std::string& prefix,
                std::uint64_t seed) {
    sc.datasets = kv.list(prefix + "datasets");
    sc.steps = kv.i64(prefix + "steps", sc.steps);
    sc.warmup_steps = kv.i64(prefix + "warmup_steps", sc.warmup_steps);
    sc.learning_rate = kv.f64(prefix + "learning_rate", sc.learning_rate);
    sc.batch_size = kv.i64(prefix + "batch_size", sc.batch_size);
    sc.n_hard_negatives = kv.i64(prefix + "n_hard_negatives", sc.n_hard_negatives);
    sc.temperature = kv.f64(prefix + "temperature", sc.temperature);
    sc.weight_decay = kv.f64(prefix + "weight_decay", sc.weight_decay);
    sc.in_batch_negatives = kv.boolean(prefix + "in_batch_negatives", sc.in_batch_negatives);
    const auto mode = kv.str(prefix + "train_mode", sc.train_mode == TrainMode::lora ? "lora" : "full");
    if (mode == "full")
        sc.train_mode = TrainMode::full;
    else if (mode == "lora")
        sc.train_mode = TrainMode::lora;
    else
        throw ValidationError("key '" + prefix + "train_mode' wants full or lora, got '" + mode +
                              "'");
    sc.seed = seed;
}

}  // namespace

RunConfig parse_run_config(const std::string& path) {
    const auto kv = KvConfig::load(path);
    RunConfig rc;
    rc.seed = kv.u64("seed", rc.seed);

    rc.enc.d_model = kv.i64("d_model", rc.enc.d_model);
    rc.enc.n_layers = kv.i64("n_layers", rc.enc.n_layers);
    rc.enc.n_heads = kv.i64("n_heads", rc.enc.n_heads);
    rc.enc.d_ff = kv.i64("d_ff", rc.enc.d_ff);
    rc.enc.max_len = kv.i64("max_len", rc.enc.max_len);
    rc.enc.mask_mode = mask_mode_from_string(kv.str("mask_mode", to_string(rc.enc.mask_mode)));

    rc.pool.kind = pool_kind_from_string(kv.str("pooling", to_string(rc.pool.kind)));
    rc.pool.latents = kv.i64("latents", rc.pool.latents);
    rc.pool.n_heads = kv.i64("pool_heads", rc.pool.n_heads);
    rc.pool.mlp_hidden = kv.i64("mlp_hidden", rc.pool.mlp_hidden);
    rc.pool.residual = kv.boolean("pool_residual", rc.pool.residual);
    rc.pool.eq1_literal = kv.boolean("eq1_literal", rc.pool.eq1_literal);

    const auto targets = kv.list("lora.targets");
    const auto rank = kv.i64("lora.rank", 16);
    const auto alpha = kv.f64("lora.alpha", 32.0);
    const auto dropout = kv.f64("lora.dropout", 0.1);
    for (const auto& t : targets) rc.adapters.push_back({t, rank, alpha, dropout});

    rc.stage1 = stage_defaults(1);
    rc.stage2 = stage_defaults(2);
    fill_stage(kv, rc.stage1, "stage1.", rc.seed);
    fill_stage(kv, rc.stage2, "stage2.", rc.seed);

    rc.out_checkpoint = kv.str("out_checkpoint", "");
    rc.out_stage1_checkpoint = kv.str("out_stage1_checkpoint", "");
    rc.metrics_path = kv.str("metrics", "");

    kv.reject_unknown();
    rc.enc.validate();
    rc.pool.validate(rc.enc.d_model);
    for (const auto* sc : {&rc.stage1, &rc.stage2})
        for (const auto& ds : sc->datasets)
            if (!std::filesystem::exists(ds))
                throw ValidationError("dataset file not found: " + ds);
    return rc;
}

ModelCheckpoint init_from_config(const RunConfig& cfg) {
    auto ck = init_checkpoint(cfg.enc, cfg.pool, cfg.seed);
    if (!cfg.adapters.empty()) apply_lora(ck, cfg.adapters, cfg.seed + 1);
    return ck;
}

namespace {

TensorPtr embed_one(const ModelCheckpoint& ck, const std::string& text) {
    auto seq = tokenize(text, ck.enc.max_len);
    return normalize(pool(encode(seq, ck), ck, seq));
}

// forward pass used by gradcheck: two instructed queries, their positives,
// and one hard negative each, through the configured pooling and mask mode
TensorPtr gradcheck_loss(const ModelCheckpoint& ck) {
    const std::string def = "match the color word";
    BatchEmbeddings be;
    be.Q = concat_rows({embed_one(ck, format_instructed_query(def, "crimson shade")),
                        embed_one(ck, format_instructed_query(def, "azure tint"))});
    be.P = concat_rows({embed_one(ck, "crimson paint"), embed_one(ck, "azure sky")});
    be.negs = {embed_one(ck, "granite slab"), embed_one(ck, "walnut plank")};
    return contrastive_loss(be, true, 0.05);
}

}  // namespace

bool gradcheck_model(const RunConfig& cfg, const std::string& filter, std::string& out) {
    auto ck = init_from_config(cfg);
    set_trainable(ck, TrainMode::full);
    // Check at a generic weight point rather than the production init: freshly
    // initialized models embed every text to nearly the same vector, and the
    // cosine gradient vanishes where embeddings coincide, which would make the
    // comparison 0 vs 0 and hide a broken backward rule.
    Rng rng(cfg.seed * 7919 + 13);
    for (auto& [name, t] : ck.tensors)
        for (auto& v : t->data) v = rng.normal(0.0, 0.5);
    std::vector<std::pair<std::string, TensorPtr>> params;
    for (const auto& [name, t] : ck.tensors)
        if (t->requires_grad && name.find(filter) != std::string::npos)
            params.emplace_back(name, t);
    if (params.empty()) {
        out += "no tensors selected; vacuous pass\n";
        return true;
    }

    auto loss = gradcheck_loss(ck);
    backward(loss);
    std::map<std::string, std::vector<double>> analytic;
    for (const auto& [name, t] : params) {
        analytic[name] = t->grad;  // empty when the tensor is unused by this model
        t->grad.clear();
    }

    const double h = 1e-5, rel = 1e-4, abs_tol = 1e-6;
    bool all_pass = true;
    char line[160];
    for (const auto& [name, t] : params) {
        std::vector<std::size_t> sample{0};
        if (t->data.size() > 2) sample.push_back(t->data.size() / 2);
        if (t->data.size() > 1) sample.push_back(t->data.size() - 1);
        bool ok = true;
        for (const auto i : sample) {
            const double keep = t->data[i];
            const double g = analytic[name].empty() ? 0.0 : analytic[name][i];
            double lp, lm;
            {
                NoGradGuard ng;
                t->data[i] = keep + h;
                lp = gradcheck_loss(ck)->data[0];
                t->data[i] = keep - h;
                lm = gradcheck_loss(ck)->data[0];
                t->data[i] = keep;
            }
            const double fd = (lp - lm) / (2.0 * h);
            const double gap = std::fabs(fd - g);
            if (gap > abs_tol + rel * std::max(std::fabs(fd), std::fabs(g))) {
                std::snprintf(line, sizeof line, "FAIL %s element %zu: fd %.6g analytic %.6g\n",
                              name.c_str(), i, fd, g);
                out += line;
                ok = false;
                all_pass = false;
                break;
            }
        }
        if (ok) out += "pass " + name + "\n";
    }
    return all_pass;
}

namespace {

void write_embeddings_file(const std::string& path, const EmbeddingMatrix& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write embeddings to " + path);
    char buf[40];
    for (std::size_t i = 0; i < m.ids.size(); ++i) {
        out << m.ids[i];
        for (const double v : m.vectors[i]) {
            std::snprintf(buf, sizeof buf, " %.9g", v);
            out << buf;
        }
        out << "\n";
    }
}

std::vector<StepTrace> combined_trace(const TwoStageResult& res, std::int64_t stage1_steps) {
    std::vector<StepTrace> all = res.trace1;
    for (auto tr : res.trace2) {
        tr.step += stage1_steps;
        all.push_back(tr);
    }
    return all;
}

void cmd_train(const std::string& config_path, const std::string& stage,
               const std::string& resume) {
    auto rc = parse_run_config(config_path);
    if (rc.out_checkpoint.empty())
        throw ValidationError("config needs out_checkpoint to train");
    ModelCheckpoint start = resume.empty() ? init_from_config(rc) : load_checkpoint(resume);

    if (stage == "both") {
        auto res = two_stage_train(rc.stage1, rc.stage2, start, {},
                                   [&](const StageResult& s1) {
                                       if (!rc.out_stage1_checkpoint.empty())
                                           save_checkpoint(s1.ckpt, rc.out_stage1_checkpoint);
                                   });
        save_checkpoint(res.ckpt, rc.out_checkpoint);
        if (!rc.metrics_path.empty())
            write_metrics(rc.metrics_path, combined_trace(res, rc.stage1.steps));
    } else {
        if (stage == "2" && resume.empty())
            throw ValidationError("--stage 2 needs --resume with the stage-1 checkpoint");
        auto res = train_stage(stage == "1" ? rc.stage1 : rc.stage2, start);
        save_checkpoint(res.ckpt, rc.out_checkpoint);
        if (!rc.metrics_path.empty()) write_metrics(rc.metrics_path, res.trace);
    }
    std::cout << "wrote " << rc.out_checkpoint << "\n";
}

void cmd_mine(const std::string& pairs_path, const std::string& corpus_path,
              const std::string& teacher_path, std::int64_t top_k, double margin,
              const std::string& out_path) {
    auto ds = load_dataset(pairs_path);
    std::vector<std::string> corpus;
    {
        std::ifstream in(corpus_path);
        if (!in) throw ValidationError("cannot open corpus file " + corpus_path);
        std::string line;
        while (std::getline(in, line))
            if (!trim(line).empty()) corpus.push_back(line);
    }
    auto ck = load_checkpoint(teacher_path);
    MiningConfig mc;
    mc.teacher = make_checkpoint_teacher(ck);
    mc.top_k = top_k;
    mc.percentage_margin = margin;

    std::size_t underfull = 0;
    for (auto& te : ds.examples) {
        const auto query = te.task_definition.empty()
                               ? te.query
                               : format_instructed_query(te.task_definition, te.query);
        auto mined = mine_hard_negatives(query, te.positive, corpus, mc);
        te.negatives = std::move(mined.negatives);
        if (mined.underfull) ++underfull;
    }
    save_dataset(out_path, ds);
    std::cout << "mined negatives for " << ds.examples.size() << " examples (" << underfull
              << " underfull) into " << out_path << "\n";
}

void print_report(const EvalReport& rep) {
    char buf[40];
    std::cout << "task=" << rep.task << "\n";
    for (const auto& [metric, value] : rep.metrics) {
        std::snprintf(buf, sizeof buf, "%.9g", value);
        std::cout << metric << "=" << buf << "\n";
    }
}

EvalReport eval_on_dir(const ModelCheckpoint& ck, const std::string& task,
                       const std::string& dir, const std::string& task_def, std::int64_t k) {
    const std::filesystem::path base(dir);
    if (task == "retrieval") {
        if (task_def.empty()) throw ValidationError("retrieval eval needs --task-def");
        auto queries = load_textset((base / "queries.tsv").string());
        auto corpus = load_textset((base / "corpus.tsv").string());
        auto qrels = load_qrels((base / "qrels.tsv").string());
        return run_retrieval_eval(queries, corpus, qrels, ck, task_def, k);
    }
    if (task == "sts") {
        if (task_def.empty()) throw ValidationError("sts eval needs --task-def");
        auto pairs = load_sts_file((base / "pairs.tsv").string());
        return run_sts_eval(pairs, ck, task_def);
    }
    if (task == "classification") {
        auto train = load_labeled((base / "train.tsv").string());
        auto test = load_labeled((base / "test.tsv").string());
        return run_classification_eval(train, test, ck, k);
    }
    throw ValidationError("unknown eval task '" + task + "'");
}

void cmd_eval(const std::string& ckpt_path, const std::string& task, const std::string& dir,
              const std::string& task_def, std::int64_t k, const std::string& out_path) {
    auto ck = load_checkpoint(ckpt_path);
    auto rep = eval_on_dir(ck, task, dir, task_def, k);
    print_report(rep);
    if (!out_path.empty()) write_report(out_path, rep);
}

struct CompressFlags {
    std::string ckpt, out, prune = "none", quant = "none";
    bool kd = false;
    std::string teacher, retrain_data;
    double alpha = 1.0;
    std::int64_t retrain_steps = 50, retrain_warmup = 5, retrain_batch = 8;
    double retrain_lr = 1e-4;
    std::uint64_t seed = 0;
    std::string eval_data, task_def, report;
    std::int64_t k = 10;
};

void cmd_compress(const CompressFlags& f) {
    auto pattern = PrunePattern::parse(f.prune);
    if (pattern.kind == PrunePattern::Kind::n_of_m &&
        !((pattern.n == 2 && pattern.m == 4) || (pattern.n == 4 && pattern.m == 8)))
        throw ValidationError("supported structured patterns are 2:4 and 4:8");
    if (f.kd && (f.teacher.empty() || f.retrain_data.empty()))
        throw ValidationError("--kd needs --teacher and --retrain-data");
    if (!f.eval_data.empty() && f.task_def.empty())
        throw ValidationError("--eval-data needs --task-def");

    auto ck = load_checkpoint(f.ckpt);
    CompressionReport rep;
    rep.prune = pattern.describe();
    rep.quant = f.quant;
    if (!f.eval_data.empty())
        rep.metrics_before = eval_on_dir(ck, "retrieval", f.eval_data, f.task_def, f.k).metrics;

    auto pruned = magnitude_prune(ck, pattern);
    ModelCheckpoint cur = std::move(pruned.ckpt);
    for (const auto& name : prunable_tensors(cur))
        rep.kept_fraction[name] = pattern.kind == PrunePattern::Kind::none
                                      ? 1.0
                                      : pruned.mask.kept_fraction(name);

    if (f.quant != "none") quantize_weights(cur, QuantFormat::parse(f.quant));

    if (f.kd) {
        auto teacher = load_checkpoint(f.teacher);
        std::shared_ptr<const PruneMask> mask;
        if (pattern.kind != PrunePattern::Kind::none)
            mask = std::make_shared<const PruneMask>(pruned.mask);
        auto hooks = make_kd_hooks(teacher, f.alpha, mask);
        StageConfig rcfg = stage_defaults(2);
        rcfg.datasets = {f.retrain_data};
        rcfg.steps = f.retrain_steps;
        rcfg.warmup_steps = f.retrain_warmup;
        rcfg.learning_rate = f.retrain_lr;
        rcfg.batch_size = f.retrain_batch;
        rcfg.seed = f.seed;
        cur = train_stage(rcfg, cur, hooks).ckpt;
    }

    save_checkpoint(cur, f.out);
    if (!f.eval_data.empty()) {
        auto final_ck = load_checkpoint(f.out);  // score the 32-bit artifact
        rep.metrics_after =
            eval_on_dir(final_ck, "retrieval", f.eval_data, f.task_def, f.k).metrics;
    }
    const auto report_path = f.report.empty() ? f.out + ".report" : f.report;
    write_compression_report(report_path, rep);
    std::cout << "wrote " << f.out << " and " << report_path << "\n";
}

void cmd_gradcheck(const std::string& config_path, const std::string& filter) {
    auto rc = parse_run_config(config_path);
    std::string out;
    const bool ok = gradcheck_model(rc, filter, out);
    std::cout << out;
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
    if (!ok) throw ValidationError("gradient check failed");
}

void cmd_embed(const std::string& ckpt_path, const std::string& input, const std::string& out,
               bool as_query, const std::string& task_def) {
    if (as_query && task_def.empty())
        throw ValidationError("--as-query needs --task with the instruction text");
    auto ck = load_checkpoint(ckpt_path);
    auto ts = load_textset(input);
    auto m = embed_texts(ts.texts, ck, as_query, task_def, ts.ids);
    write_embeddings_file(out, m);
    std::cout << "wrote " << m.ids.size() << " embeddings of width "
              << (m.vectors.empty() ? 0 : m.vectors[0].size()) << " to " << out << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"byte-level text embedding toolkit"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "run the contrastive training schedule");
    std::string t_config, t_stage = "both", t_resume;
    train->add_option("--config", t_config, "run configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    train->add_option("--stage", t_stage, "1, 2, or both")
        ->check(CLI::IsMember({"1", "2", "both"}));
    train->add_option("--resume", t_resume, "checkpoint to start from")
        ->check(CLI::ExistingFile);

    auto* mine = app.add_subcommand("mine", "mine positive-aware hard negatives");
    std::string m_pairs, m_corpus, m_teacher, m_out;
    std::int64_t m_topk = 7;
    double m_margin = 0.95;
    mine->add_option("--pairs", m_pairs, "query/positive dataset (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    mine->add_option("--corpus", m_corpus, "candidate documents, one per line")
        ->required()
        ->check(CLI::ExistingFile);
    mine->add_option("--teacher", m_teacher, "teacher checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    mine->add_option("--top-k", m_topk, "negatives per query");
    mine->add_option("--margin", m_margin, "positive-score margin");
    mine->add_option("--out", m_out, "output dataset path")->required();

    auto* ev = app.add_subcommand("eval", "score a checkpoint on a task directory");
    std::string e_ckpt, e_task, e_data, e_taskdef, e_out;
    std::int64_t e_k = 10;
    ev->add_option("--ckpt", e_ckpt)->required()->check(CLI::ExistingFile);
    ev->add_option("--task", e_task, "retrieval, sts, or classification")
        ->required()
        ->check(CLI::IsMember({"retrieval", "sts", "classification"}));
    ev->add_option("--data", e_data, "task data directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_option("--task-def", e_taskdef, "instruction text for queries");
    ev->add_option("--k", e_k, "ranking cutoff / neighbor count");
    ev->add_option("--out", e_out, "report file");

    auto* comp = app.add_subcommand("compress", "prune, quantize, and optionally retrain");
    CompressFlags cf;
    comp->add_option("--ckpt", cf.ckpt)->required()->check(CLI::ExistingFile);
    comp->add_option("--out", cf.out)->required();
    comp->add_option("--prune", cf.prune, "none, unstructured:P, 2:4, or 4:8");
    comp->add_option("--quant", cf.quant, "none, int8, fp8e4m3, or fp8e5m2")
        ->check(CLI::IsMember({"none", "int8", "fp8e4m3", "fp8e5m2"}));
    comp->add_flag("--kd", cf.kd, "retrain with layer-state distillation");
    comp->add_option("--teacher", cf.teacher)->check(CLI::ExistingFile);
    comp->add_option("--alpha", cf.alpha, "distillation weight");
    comp->add_option("--retrain-data", cf.retrain_data)->check(CLI::ExistingFile);
    comp->add_option("--retrain-steps", cf.retrain_steps);
    comp->add_option("--retrain-warmup", cf.retrain_warmup);
    comp->add_option("--retrain-lr", cf.retrain_lr);
    comp->add_option("--retrain-batch", cf.retrain_batch);
    comp->add_option("--seed", cf.seed);
    comp->add_option("--eval-data", cf.eval_data, "retrieval directory for before/after metrics")
        ->check(CLI::ExistingDirectory);
    comp->add_option("--task-def", cf.task_def);
    comp->add_option("--k", cf.k);
    comp->add_option("--report", cf.report, "report path (default: <out>.report)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string g_config, g_filter;
    gc->add_option("--config", g_config)->required()->check(CLI::ExistingFile);
    gc->add_option("--filter", g_filter, "only check tensors whose name contains this");

    auto* emb = app.add_subcommand("embed", "embed a file of id<TAB>text lines");
    std::string b_ckpt, b_input, b_out, b_task;
    bool b_asquery = false;
    emb->add_option("--ckpt", b_ckpt)->required()->check(CLI::ExistingFile);
    emb->add_option("--input", b_input)->required()->check(CLI::ExistingFile);
    emb->add_option("--out", b_out)->required();
    emb->add_flag("--as-query", b_asquery, "apply the instruction template");
    emb->add_option("--task", b_task, "instruction text for --as-query");

    std::vector<const char*> argv;
    argv.push_back("embedkit");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*train) cmd_train(t_config, t_stage, t_resume);
        if (*mine) cmd_mine(m_pairs, m_corpus, m_teacher, m_topk, m_margin, m_out);
        if (*ev) cmd_eval(e_ckpt, e_task, e_data, e_taskdef, e_k, e_out);
        if (*comp) cmd_compress(cf);
        if (*gc) cmd_gradcheck(g_config, g_filter);
        if (*emb) cmd_embed(b_ckpt, b_input, b_out, b_asquery, b_task);
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace embedkit
