#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "embedkit/cli.hpp"
#include "embedkit/compress.hpp"
#include "embedkit/curation.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/eval.hpp"
#include "embedkit/pooling.hpp"

using namespace embedkit;

namespace {

namespace fs = std::filesystem;

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

// in-process invocation with captured streams
CliRun run(const std::vector<std::string>& args) {
    std::stringstream out, err;
    auto* oldout = std::cout.rdbuf(out.rdbuf());
    auto* olderr = std::cerr.rdbuf(err.rdbuf());
    int code = 2;
    try {
        code = run_cli(args);
    } catch (...) {
        std::cout.rdbuf(oldout);
        std::cerr.rdbuf(olderr);
        throw;
    }
    std::cout.rdbuf(oldout);
    std::cerr.rdbuf(olderr);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("embedkit_cli_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* kFruit[8] = {"apple", "banana", "cherry", "date",
                         "elder", "fig",    "grape",  "melon"};

void write_pairs(const std::string& path) {
    Dataset ds;
    ds.name = "toy";
    for (int i = 0; i < 8; ++i) {
        TrainingExample te;
        te.task_definition = "match the fruit";
        te.query = kFruit[i];
        te.positive = std::string("fresh ") + kFruit[i];
        te.negatives = {std::string("fresh ") + kFruit[(i + 1) % 8]};
        te.source_dataset = "toy";
        ds.examples.push_back(te);
    }
    save_dataset(path, ds);
}

void write_eval_dir(const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream q((dir / "queries.tsv").string());
    std::ofstream c((dir / "corpus.tsv").string());
    std::ofstream r((dir / "qrels.tsv").string());
    for (int i = 0; i < 8; ++i) {
        q << "q" << i << "\t" << kFruit[i] << "\n";
        c << "d" << i << "\tfresh " << kFruit[i] << "\n";
        r << "q" << i << "\td" << i << "\t1\n";
    }
}

std::string base_config(const TempDir& tmp, const std::string& extra) {
    const auto cfg = tmp.file("run.cfg");
    write_file(cfg,
               "seed = 11\n"
               "d_model = 16\n"
               "n_layers = 1\n"
               "n_heads = 2\n"
               "d_ff = 24\n"
               "max_len = 48\n"
               "pooling = latent_attention\n"
               "latents = 4\n"
               "pool_heads = 2\n"
               "mlp_hidden = 20\n" +
                   extra);
    return cfg;
}

std::string training_config(const TempDir& tmp) {
    const auto pairs = tmp.file("pairs.jsonl");
    write_pairs(pairs);
    return base_config(tmp, "stage1.datasets = " + pairs +
                                "\n"
                                "stage1.steps = 4\n"
                                "stage1.warmup_steps = 1\n"
                                "stage1.batch_size = 4\n"
                                "stage1.n_hard_negatives = 1\n"
                                "stage2.datasets = " +
                                pairs +
                                "\n"
                                "stage2.steps = 3\n"
                                "stage2.warmup_steps = 1\n"
                                "stage2.batch_size = 4\n"
                                "stage2.n_hard_negatives = 1\n"
                                "out_checkpoint = " +
                                tmp.file("model.ckpt") +
                                "\n"
                                "out_stage1_checkpoint = " +
                                tmp.file("model.s1.ckpt") +
                                "\n"
                                "metrics = " +
                                tmp.file("metrics.csv") + "\n");
}

ModelCheckpoint saved_model(const TempDir& tmp, const std::string& name,
                            std::uint64_t seed = 21) {
    EncoderConfig e;
    e.d_model = 16;
    e.n_layers = 1;
    e.n_heads = 2;
    e.d_ff = 24;
    e.max_len = 48;
    PoolingConfig p;
    p.latents = 4;
    p.n_heads = 2;
    p.mlp_hidden = 20;
    auto ck = init_checkpoint(e, p, seed);
    save_checkpoint(ck, tmp.file(name));
    return load_checkpoint(tmp.file(name));  // 32-bit values, as the CLI sees them
}

}  // namespace

TEST_CASE("run config parsing") {
    TempDir tmp;
    SUBCASE("values, comments, and stage overrides land") {
        const auto pairs = tmp.file("p.jsonl");
        write_pairs(pairs);
        const auto cfg = tmp.file("a.cfg");
        write_file(cfg,
                   "# full surface\n"
                   "seed = 9\n"
                   "d_model = 8   # inline comment\n"
                   "n_layers = 1\n"
                   "n_heads = 2\n"
                   "d_ff = 12\n"
                   "max_len = 20\n"
                   "mask_mode = causal\n"
                   "pooling = mean\n"
                   "\n"
                   "stage1.datasets = " +
                       pairs + "," + pairs +
                       "\n"
                       "stage1.steps = 7\n"
                       "stage1.learning_rate = 0.25\n"
                       "stage2.in_batch_negatives = true\n"
                       "lora.targets = enc.L0.attn.wq, enc.L0.attn.wv\n"
                       "lora.rank = 2\n"
                       "out_checkpoint = out.ckpt\n");
        auto rc = parse_run_config(cfg);
        CHECK(rc.seed == 9);
        CHECK(rc.enc.d_model == 8);
        CHECK(rc.enc.mask_mode == MaskMode::causal);
        CHECK(rc.pool.kind == PoolKind::mean);
        CHECK(rc.stage1.datasets == std::vector<std::string>{pairs, pairs});
        CHECK(rc.stage1.steps == 7);
        CHECK(rc.stage1.learning_rate == 0.25);
        CHECK(rc.stage1.seed == 9);
        CHECK(rc.stage2.stage == 2);
        CHECK(rc.stage2.in_batch_negatives == true);   // override
        CHECK(rc.stage2.learning_rate == 1.5e-5);      // stage-2 default
        CHECK(rc.stage1.in_batch_negatives == true);   // stage-1 default
        REQUIRE(rc.adapters.size() == 2);
        CHECK(rc.adapters[0].target == "enc.L0.attn.wq");
        CHECK(rc.adapters[0].rank == 2);
        CHECK(rc.adapters[1].target == "enc.L0.attn.wv");
        CHECK(rc.out_checkpoint == "out.ckpt");
    }
    SUBCASE("rejects the unknown, the duplicate, and the malformed") {
        const auto cfg = tmp.file("b.cfg");
        write_file(cfg, "seed = 1\nbogus_key = 2\n");
        CHECK_THROWS_WITH_AS(parse_run_config(cfg), doctest::Contains("bogus_key"),
                             ValidationError);
        write_file(cfg, "seed = 1\nseed = 2\n");
        CHECK_THROWS_WITH_AS(parse_run_config(cfg), doctest::Contains(":2"), ValidationError);
        write_file(cfg, "seed = 1\nnot a pair\n");
        CHECK_THROWS_WITH_AS(parse_run_config(cfg), doctest::Contains("key = value"),
                             ValidationError);
        write_file(cfg, "seed = yes\n");
        CHECK_THROWS_AS(parse_run_config(cfg), ValidationError);
        write_file(cfg, "d_model = 8.5\n");
        CHECK_THROWS_AS(parse_run_config(cfg), ValidationError);
        write_file(cfg, "pool_residual = nah\n");
        CHECK_THROWS_AS(parse_run_config(cfg), ValidationError);
        write_file(cfg, "pooling = sideways\n");
        CHECK_THROWS_AS(parse_run_config(cfg), ValidationError);
        write_file(cfg, "stage1.train_mode = half\n");
        CHECK_THROWS_AS(parse_run_config(cfg), ValidationError);
        CHECK_THROWS_AS(parse_run_config(tmp.file("missing.cfg")), ValidationError);
    }
    SUBCASE("referenced datasets must exist before any compute") {
        const auto cfg = tmp.file("c.cfg");
        write_file(cfg, "stage1.datasets = " + tmp.file("ghost.jsonl") + "\n");
        CHECK_THROWS_WITH_AS(parse_run_config(cfg), doctest::Contains("ghost.jsonl"),
                             ValidationError);
    }
}

TEST_CASE("config-driven model construction is deterministic") {
    TempDir tmp;
    auto rc = parse_run_config(base_config(tmp, "lora.targets = enc.L0.attn.wq\n"));
    auto a = init_from_config(rc);
    auto b = init_from_config(rc);
    CHECK(a.has("lora.enc.L0.attn.wq.A"));
    for (const auto& [name, t] : a.tensors) CHECK(t->data == b.tensor(name)->data);

    auto rc2 = rc;
    rc2.seed = 12;
    auto c = init_from_config(rc2);
    CHECK(a.tensor("tok_emb")->data != c.tensor("tok_emb")->data);
}

TEST_CASE("model gradient check") {
    TempDir tmp;
    auto rc = parse_run_config(base_config(tmp, ""));
    rc.enc.d_model = 8;
    rc.enc.d_ff = 12;
    rc.pool.latents = 2;
    rc.pool.mlp_hidden = 10;

    SUBCASE("the configured model passes end to end") {
        std::string out;
        CHECK(gradcheck_model(rc, "pool.", out));
        CHECK(out.find("pass pool.latents") != std::string::npos);
        CHECK(out.find("FAIL") == std::string::npos);
    }
    SUBCASE("a corrupted backward rule is caught") {
        set_backward_corruption("matmul_bt");
        std::string out;
        const bool ok = gradcheck_model(rc, "", out);
        set_backward_corruption("");
        CHECK_FALSE(ok);
        CHECK(out.find("FAIL ") != std::string::npos);
    }
    SUBCASE("an empty selection passes vacuously") {
        std::string out;
        CHECK(gradcheck_model(rc, "no_such_tensor", out));
        CHECK(out.find("vacuous") != std::string::npos);
    }
}

TEST_CASE("train command") {
    TempDir tmp;
    const auto cfg = training_config(tmp);

    auto r = run({"train", "--config", cfg});
    CHECK(r.code == 0);
    REQUIRE(fs::exists(tmp.file("model.ckpt")));
    REQUIRE(fs::exists(tmp.file("model.s1.ckpt")));
    const auto first = slurp(tmp.file("model.ckpt"));
    const auto metrics = slurp(tmp.file("metrics.csv"));
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 7);  // 4 + 3 steps

    SUBCASE("a rerun reproduces the artifact byte for byte") {
        fs::remove(tmp.file("model.ckpt"));
        auto r2 = run({"train", "--config", cfg});
        CHECK(r2.code == 0);
        CHECK(slurp(tmp.file("model.ckpt")) == first);
        CHECK(slurp(tmp.file("metrics.csv")) == metrics);
    }
    SUBCASE("stage 2 resumed from the stage-1 artifact equals the full run") {
        auto r2 = run({"train", "--config", cfg, "--stage", "2", "--resume",
                       tmp.file("model.s1.ckpt")});
        CHECK(r2.code == 0);
        CHECK(slurp(tmp.file("model.ckpt")) == first);
    }
    SUBCASE("stage 2 without a resume checkpoint is a validation error") {
        auto r2 = run({"train", "--config", cfg, "--stage", "2"});
        CHECK(r2.code == 1);
        CHECK(r2.err.find("--resume") != std::string::npos);
    }
    SUBCASE("a missing config file fails without writing anything") {
        fs::remove(tmp.file("model.ckpt"));
        auto r2 = run({"train", "--config", tmp.file("ghost.cfg")});
        CHECK(r2.code == 1);
        CHECK_FALSE(fs::exists(tmp.file("model.ckpt")));
    }
    SUBCASE("a non-finite loss aborts with a runtime failure") {
        auto poisoned = load_checkpoint(tmp.file("model.ckpt"));
        poisoned.tensor("enc.L0.ff.w1")->data[0] = std::nan("");
        save_checkpoint(poisoned, tmp.file("poison.ckpt"));
        auto r2 = run({"train", "--config", cfg, "--stage", "1", "--resume",
                       tmp.file("poison.ckpt")});
        CHECK(r2.code == 2);
        CHECK(r2.err.find("aborted") != std::string::npos);
    }
}

TEST_CASE("embed command") {
    TempDir tmp;
    auto ck = saved_model(tmp, "m.ckpt");
    std::string input;
    for (int i = 0; i < 5; ++i)
        input += "t" + std::to_string(i) + "\t" + kFruit[i] + " stand\n";
    write_file(tmp.file("texts.tsv"), input);

    auto r = run({"embed", "--ckpt", tmp.file("m.ckpt"), "--input", tmp.file("texts.tsv"),
                  "--out", tmp.file("emb.txt")});
    CHECK(r.code == 0);
    const auto body = slurp(tmp.file("emb.txt"));
    CHECK(std::count(body.begin(), body.end(), '\n') == 5);

    // first line equals the library embedding rendered at 9 significant digits
    auto m = embed_texts({std::string(kFruit[0]) + " stand"}, ck, false, "", {"t0"});
    std::string want = "t0";
    char buf[40];
    for (double v : m.vectors[0]) {
        std::snprintf(buf, sizeof buf, " %.9g", v);
        want += buf;
    }
    CHECK(body.substr(0, body.find('\n')) == want);

    SUBCASE("rerun is byte-identical") {
        auto r2 = run({"embed", "--ckpt", tmp.file("m.ckpt"), "--input", tmp.file("texts.tsv"),
                       "--out", tmp.file("emb2.txt")});
        CHECK(r2.code == 0);
        CHECK(slurp(tmp.file("emb2.txt")) == body);
    }
    SUBCASE("the query template changes the output") {
        auto r2 = run({"embed", "--ckpt", tmp.file("m.ckpt"), "--input", tmp.file("texts.tsv"),
                       "--out", tmp.file("embq.txt"), "--as-query", "--task", "find the stand"});
        CHECK(r2.code == 0);
        CHECK(slurp(tmp.file("embq.txt")) != body);
    }
    SUBCASE("--as-query needs --task") {
        auto r2 = run({"embed", "--ckpt", tmp.file("m.ckpt"), "--input", tmp.file("texts.tsv"),
                       "--out", tmp.file("embq.txt"), "--as-query"});
        CHECK(r2.code == 1);
    }
}

TEST_CASE("mine command") {
    TempDir tmp;
    auto ck = saved_model(tmp, "t.ckpt");
    write_pairs(tmp.file("pairs.jsonl"));
    std::string corpus;
    for (int i = 0; i < 8; ++i) {
        corpus += std::string("fresh ") + kFruit[i] + "\n";
        corpus += std::string("dried ") + kFruit[i] + "\n";
    }
    write_file(tmp.file("corpus.txt"), corpus);
    const auto pairs_before = slurp(tmp.file("pairs.jsonl"));

    auto r = run({"mine", "--pairs", tmp.file("pairs.jsonl"), "--corpus", tmp.file("corpus.txt"),
                  "--teacher", tmp.file("t.ckpt"), "--top-k", "3", "--margin", "1.0", "--out",
                  tmp.file("mined.jsonl")});
    CHECK(r.code == 0);
    CHECK(slurp(tmp.file("pairs.jsonl")) == pairs_before);  // inputs stay untouched

    // the command's output must equal the in-process mining oracle
    auto mined = load_dataset(tmp.file("mined.jsonl"));
    std::vector<std::string> docs;
    {
        std::istringstream ss(corpus);
        for (std::string line; std::getline(ss, line);) docs.push_back(line);
    }
    MiningConfig mc;
    mc.teacher = make_checkpoint_teacher(ck);
    mc.top_k = 3;
    mc.percentage_margin = 1.0;
    auto src = load_dataset(tmp.file("pairs.jsonl"));
    REQUIRE(mined.examples.size() == src.examples.size());
    bool any_nonempty = false;
    for (std::size_t i = 0; i < src.examples.size(); ++i) {
        const auto& te = src.examples[i];
        auto want = mine_hard_negatives(format_instructed_query(te.task_definition, te.query),
                                        te.positive, docs, mc);
        CHECK(mined.examples[i].negatives == want.negatives);
        if (!want.negatives.empty()) any_nonempty = true;
    }
    CHECK(any_nonempty);

    SUBCASE("an empty corpus is a validation error") {
        write_file(tmp.file("empty.txt"), "\n");
        auto r2 = run({"mine", "--pairs", tmp.file("pairs.jsonl"), "--corpus",
                       tmp.file("empty.txt"), "--teacher", tmp.file("t.ckpt"), "--out",
                       tmp.file("m2.jsonl")});
        CHECK(r2.code == 1);
    }
}

TEST_CASE("eval command") {
    TempDir tmp;
    auto ck = saved_model(tmp, "e.ckpt");
    write_eval_dir(tmp.path / "data");

    auto r = run({"eval", "--ckpt", tmp.file("e.ckpt"), "--task", "retrieval", "--data",
                  (tmp.path / "data").string(), "--task-def", "match the fruit", "--k", "5",
                  "--out", tmp.file("report.txt")});
    CHECK(r.code == 0);
    CHECK(r.out.find("task=retrieval") != std::string::npos);
    CHECK(r.out.find("nDCG@5=") != std::string::npos);

    // the report file equals the library's own rendering
    auto queries = load_textset((tmp.path / "data" / "queries.tsv").string());
    auto corpus = load_textset((tmp.path / "data" / "corpus.tsv").string());
    auto qrels = load_qrels((tmp.path / "data" / "qrels.tsv").string());
    auto rep = run_retrieval_eval(queries, corpus, qrels, ck, "match the fruit", 5);
    write_report(tmp.file("want.txt"), rep);
    CHECK(slurp(tmp.file("report.txt")) == slurp(tmp.file("want.txt")));

    SUBCASE("retrieval without --task-def is a validation error") {
        auto r2 = run({"eval", "--ckpt", tmp.file("e.ckpt"), "--task", "retrieval", "--data",
                       (tmp.path / "data").string()});
        CHECK(r2.code == 1);
        CHECK(r2.err.find("task-def") != std::string::npos);
    }
    SUBCASE("classification on identical train and test is perfect") {
        std::string rows;
        for (int i = 0; i < 4; ++i)
            rows += std::to_string(i % 2) + "\t" + kFruit[i] + " basket\n";
        write_file((tmp.path / "data" / "train.tsv").string(), rows);
        write_file((tmp.path / "data" / "test.tsv").string(), rows);
        auto r2 = run({"eval", "--ckpt", tmp.file("e.ckpt"), "--task", "classification",
                       "--data", (tmp.path / "data").string(), "--k", "1"});
        CHECK(r2.code == 0);
        CHECK(r2.out.find("Accuracy=1\n") != std::string::npos);
    }
    SUBCASE("sts produces a correlation") {
        std::string rows;
        for (int i = 0; i < 4; ++i)
            rows += std::string(kFruit[i]) + " one\t" + kFruit[i] + " two\t" +
                    std::to_string(i + 1) + "\n";
        write_file((tmp.path / "data" / "pairs.tsv").string(), rows);
        auto r2 = run({"eval", "--ckpt", tmp.file("e.ckpt"), "--task", "sts", "--data",
                       (tmp.path / "data").string(), "--task-def", "compare"});
        CHECK(r2.code == 0);
        CHECK(r2.out.find("Spearman=") != std::string::npos);
    }
    SUBCASE("an unknown task is a usage error") {
        auto r2 = run({"eval", "--ckpt", tmp.file("e.ckpt"), "--task", "poetry", "--data",
                       (tmp.path / "data").string()});
        CHECK(r2.code == 1);
    }
}

TEST_CASE("compress command") {
    TempDir tmp;
    saved_model(tmp, "in.ckpt");
    write_eval_dir(tmp.path / "data");

    auto r = run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("p.ckpt"),
                  "--prune", "2:4", "--quant", "int8", "--eval-data",
                  (tmp.path / "data").string(), "--task-def", "match the fruit"});
    CHECK(r.code == 0);
    auto pruned = load_checkpoint(tmp.file("p.ckpt"));
    for (const auto& name : prunable_tensors(pruned)) {
        const auto& t = *pruned.tensor(name);
        for (std::size_t g = 0; g + 4 <= t.data.size(); g += 4) {
            int nz = 0;
            for (std::size_t i = g; i < g + 4; ++i) nz += t.data[i] != 0.0;
            CHECK(nz <= 2);  // exactly 2 unless quantization zeroed a kept value
        }
    }
    const auto report = slurp(tmp.file("p.ckpt.report"));
    CHECK(report.find("prune=2:4\n") != std::string::npos);
    CHECK(report.find("quant=int8\n") != std::string::npos);
    CHECK(report.find("kept.enc.L0.attn.wq=0.5\n") != std::string::npos);
    CHECK(report.find("before.Recall@1=") != std::string::npos);
    CHECK(report.find("delta.nDCG@10=") != std::string::npos);

    SUBCASE("quantization through files is a fixed point") {
        auto r1 = run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("q1.ckpt"),
                       "--quant", "int8"});
        auto r2 = run({"compress", "--ckpt", tmp.file("q1.ckpt"), "--out", tmp.file("q2.ckpt"),
                       "--quant", "int8"});
        CHECK(r1.code == 0);
        CHECK(r2.code == 0);
        CHECK(slurp(tmp.file("q1.ckpt")) == slurp(tmp.file("q2.ckpt")));

        auto r3 = run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("f1.ckpt"),
                       "--quant", "fp8e4m3"});
        auto r4 = run({"compress", "--ckpt", tmp.file("f1.ckpt"), "--out", tmp.file("f2.ckpt"),
                       "--quant", "fp8e4m3"});
        CHECK(r3.code == 0);
        CHECK(r4.code == 0);
        CHECK(slurp(tmp.file("f1.ckpt")) == slurp(tmp.file("f2.ckpt")));
    }
    SUBCASE("distillation retraining keeps the mask") {
        write_pairs(tmp.file("pairs.jsonl"));
        auto r2 = run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("kd.ckpt"),
                       "--prune", "2:4", "--kd", "--teacher", tmp.file("in.ckpt"),
                       "--retrain-data", tmp.file("pairs.jsonl"), "--retrain-steps", "3",
                       "--retrain-warmup", "1", "--retrain-batch", "4"});
        CHECK(r2.code == 0);
        auto base = load_checkpoint(tmp.file("in.ckpt"));
        auto kd = load_checkpoint(tmp.file("kd.ckpt"));
        auto want_mask = magnitude_prune(base, PrunePattern::parse("2:4")).mask;
        bool moved = false;
        for (const auto& [name, keep] : want_mask.keep) {
            const auto& data = kd.tensor(name)->data;
            for (std::size_t i = 0; i < keep.size(); ++i) {
                if (!keep[i]) CHECK(data[i] == 0.0);
            }
            if (data != base.tensor(name)->data) moved = true;
        }
        CHECK(moved);
    }
    SUBCASE("flag constraint errors") {
        CHECK(run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("x.ckpt"),
                   "--prune", "3:5"})
                  .code == 1);
        CHECK(run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("x.ckpt"),
                   "--kd"})
                  .code == 1);
        CHECK(run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("x.ckpt"),
                   "--eval-data", (tmp.path / "data").string()})
                  .code == 1);
        CHECK(run({"compress", "--ckpt", tmp.file("in.ckpt"), "--out", tmp.file("x.ckpt"),
                   "--quant", "int4"})
                  .code == 1);
    }
}

TEST_CASE("gradcheck command surface") {
    TempDir tmp;
    const auto cfg = base_config(tmp, "");
    auto r = run({"gradcheck", "--config", cfg, "--filter", "pool.mlp.w1"});
    CHECK(r.code == 0);
    CHECK(r.out.find("pass pool.mlp.w1") != std::string::npos);
    CHECK(r.out.find("gradcheck passed") != std::string::npos);
}

TEST_CASE("the installed binary honors the exit code contract") {
    TempDir tmp;
    const auto cfg = base_config(tmp, "");
    auto shell = [](const std::string& cmd) {
        const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
        return WEXITSTATUS(status);
    };
    const std::string bin = EMBEDKIT_BIN;
    CHECK(shell(bin + " --help") == 0);
    CHECK(shell(bin) == 1);                                       // missing subcommand
    CHECK(shell(bin + " train --config /does/not/exist") == 1);   // validation
    CHECK(shell(bin + " gradcheck --config " + cfg + " --filter pool.mlp.b1") == 0);
}
