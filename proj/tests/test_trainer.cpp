#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "embedkit/trainer.hpp"
#include "oracles.hpp"

using namespace embedkit;
using oracle::rand_tensor;

namespace {

std::vector<double> unit_vec(Rng& rng, int d) {
    std::vector<double> v(static_cast<std::size_t>(d));
    double n = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        n += x * x;
    }
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Direct per-query log-sum-exp reference.
double loss_oracle(const std::vector<std::vector<double>>& Q,
                   const std::vector<std::vector<double>>& P,
                   const std::vector<std::vector<std::vector<double>>>& negs, bool in_batch,
                   double tau) {
    const std::size_t B = Q.size();
    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        std::vector<double> logits{dot(Q[i], P[i]) / tau};
        for (const auto& n : negs[i]) logits.push_back(dot(Q[i], n) / tau);
        if (in_batch) {
            for (std::size_t j = 0; j < B; ++j)
                if (j != i) logits.push_back(dot(Q[i], P[j]) / tau);
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        total += mx + std::log(z) - logits[0];
    }
    return total / static_cast<double>(B);
}

BatchEmbeddings pack(const std::vector<std::vector<double>>& Q,
                     const std::vector<std::vector<double>>& P,
                     const std::vector<std::vector<std::vector<double>>>& negs) {
    const std::int64_t B = static_cast<std::int64_t>(Q.size());
    const std::int64_t d = static_cast<std::int64_t>(Q[0].size());
    BatchEmbeddings be;
    std::vector<double> qf, pf;
    for (const auto& r : Q) qf.insert(qf.end(), r.begin(), r.end());
    for (const auto& r : P) pf.insert(pf.end(), r.begin(), r.end());
    be.Q = Tensor::make({B, d}, qf);
    be.P = Tensor::make({B, d}, pf);
    for (const auto& lst : negs) {
        if (lst.empty()) {
            be.negs.push_back(nullptr);
            continue;
        }
        std::vector<double> nf;
        for (const auto& r : lst) nf.insert(nf.end(), r.begin(), r.end());
        be.negs.push_back(Tensor::make({static_cast<std::int64_t>(lst.size()), d}, nf));
    }
    return be;
}

std::string temp_path(const std::string& stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

// Tiny separable retrieval set: query and positive share a two-letter code.
std::string write_pairs_dataset(const std::string& stem, int n, bool with_negatives) {
    Dataset ds;
    ds.name = stem;
    for (int i = 0; i < n; ++i) {
        std::string code;
        code += static_cast<char>('a' + i / 8);
        code += static_cast<char>('a' + i % 8);
        TrainingExample te;
        te.task_definition = "retrieve the matching item";
        te.query = code;
        te.positive = code;
        te.source_dataset = stem;
        if (with_negatives && i % 2 == 0) {
            std::string other;
            other += static_cast<char>('a' + (i + 1) / 8);
            other += static_cast<char>('a' + (i + 1) % 8);
            te.negatives.push_back(other);
        }
        ds.examples.push_back(te);
    }
    auto path = temp_path(stem + ".jsonl");
    save_dataset(path, ds);
    return path;
}

ModelCheckpoint tiny_ckpt(std::uint64_t seed, PoolKind kind = PoolKind::mean) {
    EncoderConfig e;
    e.d_model = 16;
    e.n_layers = 1;
    e.n_heads = 2;
    e.d_ff = 24;
    e.max_len = 12;
    PoolingConfig p;
    p.kind = kind;
    p.latents = 4;
    p.n_heads = 2;
    p.mlp_hidden = 20;
    return init_checkpoint(e, p, seed);
}

}  // namespace

TEST_CASE("uniform-candidate closed forms") {
    std::vector<double> u{1, 0, 0, 0};
    SUBCASE("two queries sharing one direction, in-batch") {
        BatchEmbeddings be = pack({u, u}, {u, u}, {{}, {}});
        auto l = contrastive_loss(be, true, 0.05);
        CHECK(l->item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("one query with seven equal hard negatives") {
        std::vector<std::vector<std::vector<double>>> negs{
            std::vector<std::vector<double>>(7, u)};
        BatchEmbeddings be = pack({u}, {u}, negs);
        for (bool ib : {false, true}) {
            auto l = contrastive_loss(be, ib, 0.05);
            CHECK(l->item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
        }
    }
}

TEST_CASE("loss equals the enumeration oracle on random batches") {
    Rng rng(404);
    for (int trial = 0; trial < 200; ++trial) {
        const int B = 1 + static_cast<int>(rng.uniform_index(8));
        const int d = 3 + static_cast<int>(rng.uniform_index(6));
        const bool ib = trial % 2 == 0;
        const double tau = 0.03 + rng.uniform() * 0.5;
        std::vector<std::vector<double>> Q, P;
        std::vector<std::vector<std::vector<double>>> negs;
        for (int i = 0; i < B; ++i) {
            Q.push_back(unit_vec(rng, d));
            P.push_back(unit_vec(rng, d));
            std::vector<std::vector<double>> lst;
            const int k = static_cast<int>(rng.uniform_index(8));
            for (int j = 0; j < k; ++j) lst.push_back(unit_vec(rng, d));
            negs.push_back(lst);
        }
        std::vector<double> per_query;
        auto l = contrastive_loss(pack(Q, P, negs), ib, tau, &per_query);
        CHECK(l->item() == doctest::Approx(loss_oracle(Q, P, negs, ib, tau)).epsilon(1e-9));
        double mean = 0.0;
        for (double pq : per_query) mean += pq;
        CHECK(l->item() == doctest::Approx(mean / B).epsilon(1e-12));
    }
}

TEST_CASE("loss input validation") {
    std::vector<double> u{0.6, 0.8};
    BatchEmbeddings be = pack({u}, {u}, {{}});
    CHECK_THROWS_AS(contrastive_loss(be, true, 0.0), ValidationError);
    CHECK_THROWS_AS(contrastive_loss(be, true, -1.0), ValidationError);

    BatchEmbeddings bad = pack({{0.6, 0.9}}, {u}, {{}});
    CHECK_THROWS_AS(contrastive_loss(bad, true, 0.05), ValidationError);

    BatchEmbeddings mismatch = pack({u, u}, {u, u}, {{}});
    CHECK_THROWS_AS(contrastive_loss(mismatch, true, 0.05), ValidationError);
}

TEST_CASE("loss is invariant under a simultaneous batch permutation") {
    Rng rng(77);
    const int B = 5, d = 6;
    std::vector<std::vector<double>> Q, P;
    std::vector<std::vector<std::vector<double>>> negs;
    for (int i = 0; i < B; ++i) {
        Q.push_back(unit_vec(rng, d));
        P.push_back(unit_vec(rng, d));
        negs.push_back({unit_vec(rng, d)});
    }
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<std::vector<double>> Q2, P2;
    std::vector<std::vector<std::vector<double>>> negs2;
    for (auto i : perm) {
        Q2.push_back(Q[i]);
        P2.push_back(P[i]);
        negs2.push_back(negs[i]);
    }
    for (bool ib : {false, true}) {
        auto a = contrastive_loss(pack(Q, P, negs), ib, 0.05);
        auto b = contrastive_loss(pack(Q2, P2, negs2), ib, 0.05);
        CHECK(a->item() == doctest::Approx(b->item()).epsilon(1e-12));
    }
}

TEST_CASE("loss moves the right way under directional perturbations") {
    Rng rng(88);
    const int d = 8;
    auto q0 = unit_vec(rng, d), p0 = unit_vec(rng, d), n0 = unit_vec(rng, d);
    auto q1 = unit_vec(rng, d), p1 = unit_vec(rng, d);
    auto nudge_toward = [&](std::vector<double> v, const std::vector<double>& target) {
        double n = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] += 0.2 * target[i];
            n += v[i] * v[i];
        }
        n = std::sqrt(n);
        for (auto& x : v) x /= n;
        return v;
    };
    double base =
        contrastive_loss(pack({q0, q1}, {p0, p1}, {{n0}, {}}), false, 0.05)->item();
    double better_pos =
        contrastive_loss(pack({q0, q1}, {nudge_toward(p0, q0), p1}, {{n0}, {}}), false, 0.05)
            ->item();
    double harder_neg =
        contrastive_loss(pack({q0, q1}, {p0, p1}, {{nudge_toward(n0, q0)}, {}}), false, 0.05)
            ->item();
    CHECK(better_pos < base);
    CHECK(harder_neg > base);
}

TEST_CASE("in-batch collision: a duplicated positive contributes the positive's own term") {
    Rng rng(99);
    auto q0 = unit_vec(rng, 6), q1 = unit_vec(rng, 6);
    auto shared = unit_vec(rng, 6);
    BatchEmbeddings be = pack({q0, q1}, {shared, shared}, {{}, {}});
    // s(q0, p1) is bitwise s(q0, p0), so row 0 sees two identical candidates
    auto S = matmul_bt(be.Q, be.P);
    CHECK(S->at(0, 0) == S->at(0, 1));
    std::vector<double> per_query;
    contrastive_loss(be, true, 0.05, &per_query);
    CHECK(per_query[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(per_query[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences through normalization") {
    Rng rng(111);
    auto rq = rand_tensor(rng, {3, 5});
    auto rp = rand_tensor(rng, {3, 5});
    auto rn = rand_tensor(rng, {2, 5});
    for (bool ib : {false, true}) {
        auto make_loss = [&]() {
            BatchEmbeddings be;
            be.Q = l2_normalize_rows(rq);
            be.P = l2_normalize_rows(rp);
            be.negs = {l2_normalize_rows(rn), nullptr, nullptr};
            return contrastive_loss(be, ib, 0.07);
        };
        auto rep = oracle::fd_gradcheck({rq, rp, rn}, make_loss);
        CHECK_MESSAGE(rep.pass, "worst gap ", rep.worst_gap, " at ", rep.worst_param);
    }
}

TEST_CASE("optimizer schedule closed forms") {
    AdamW opt(1.0, 0.0, 2, 4);
    CHECK(opt.lr_at(0) == doctest::Approx(0.5));
    CHECK(opt.lr_at(1) == doctest::Approx(1.0));
    CHECK(opt.lr_at(2) == doctest::Approx(1.0));
    CHECK(opt.lr_at(3) == doctest::Approx(0.5));

    AdamW no_warmup(2.0, 0.0, 0, 4);
    CHECK(no_warmup.lr_at(0) == doctest::Approx(2.0));
    CHECK(no_warmup.lr_at(2) == doctest::Approx(1.0));

    CHECK_THROWS_AS(AdamW(1.0, 0.0, 5, 4), ValidationError);
}

TEST_CASE("optimizer descends a quadratic and leaves grad-free tensors alone") {
    ModelCheckpoint ck;
    auto w = Tensor::make({1, 1}, {10.0});
    w->requires_grad = true;
    auto frozen = Tensor::make({1, 1}, {5.0});
    ck.tensors["w"] = w;
    ck.tensors["frozen"] = frozen;

    AdamW opt(0.5, 0.0, 0, 100);
    CHECK(opt.first_moment("w") == nullptr);
    for (int t = 0; t < 100; ++t) {
        auto diff = sub(w, Tensor::scalar(3.0));
        auto loss = sum_all(mul(diff, diff));
        backward(loss);
        opt.step(ck);
    }
    CHECK(std::abs(w->at(0, 0) - 3.0) < 0.3);
    CHECK(frozen->at(0, 0) == 5.0);
    CHECK(opt.first_moment("w") != nullptr);
    CHECK(opt.first_moment("frozen") == nullptr);
    CHECK(opt.steps_taken() == 100);
}

TEST_CASE("zero learning rate leaves the checkpoint bitwise unchanged") {
    auto path = write_pairs_dataset("embedkit_tr_zero", 16, true);
    auto ck = tiny_ckpt(1);
    StageConfig cfg = stage_defaults(1);
    cfg.datasets = {path};
    cfg.steps = 3;
    cfg.warmup_steps = 1;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 4;
    cfg.seed = 5;
    auto res = train_stage(cfg, ck);
    REQUIRE(res.trace.size() == 3);
    for (const auto& [name, t] : ck.tensors) CHECK(res.ckpt.tensor(name)->data == t->data);
    std::filesystem::remove(path);
}

TEST_CASE("training is deterministic and separable pairs learn") {
    auto path = write_pairs_dataset("embedkit_tr_learn", 32, false);
    auto ck = tiny_ckpt(2);
    StageConfig cfg = stage_defaults(1);
    cfg.datasets = {path};
    cfg.steps = 300;
    cfg.warmup_steps = 20;
    cfg.learning_rate = 0.02;
    cfg.batch_size = 8;
    cfg.temperature = 0.05;
    cfg.seed = 9;

    auto r1 = train_stage(cfg, ck);
    auto r2 = train_stage(cfg, ck);
    REQUIRE(r1.trace.size() == 300);
    for (const auto& [name, t] : r1.ckpt.tensors) CHECK(r2.ckpt.tensor(name)->data == t->data);
    for (std::size_t i = 0; i < r1.trace.size(); ++i) CHECK(r1.trace[i].loss == r2.trace[i].loss);

    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
        first += r1.trace[static_cast<std::size_t>(i)].loss;
        last += r1.trace[r1.trace.size() - 1 - static_cast<std::size_t>(i)].loss;
    }
    CHECK(last / 10.0 < first / 10.0);

    // the trace has a per-source slice for the single dataset
    CHECK(r1.trace[0].per_source.count("embedkit_tr_learn") == 1);
    CHECK(r1.trace[0].per_source.at("embedkit_tr_learn") ==
          doctest::Approx(r1.trace[0].loss).epsilon(1e-12));
    std::filesystem::remove(path);
}

TEST_CASE("a non-finite forward pass aborts with the step index") {
    auto path = write_pairs_dataset("embedkit_tr_nan", 8, false);
    auto ck = tiny_ckpt(3);
    ck.tensor("tok_emb")->data[0] = std::numeric_limits<double>::infinity();
    // byte 0 never appears in text, so poison a code point that does
    for (int j = 0; j < 16; ++j)
        ck.tensor("tok_emb")->data[static_cast<std::size_t>('a') * 16 + static_cast<std::size_t>(j)] =
            std::numeric_limits<double>::infinity();
    StageConfig cfg = stage_defaults(1);
    cfg.datasets = {path};
    cfg.steps = 2;
    cfg.warmup_steps = 0;
    cfg.batch_size = 2;
    cfg.seed = 1;
    CHECK_THROWS_WITH_AS(train_stage(cfg, ck), doctest::Contains("step 0"), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("lora training touches only adapter tensors") {
    auto path = write_pairs_dataset("embedkit_tr_lora", 16, false);
    auto ck = tiny_ckpt(4);
    apply_lora(ck, {{"enc.L0.attn.wq", 2, 4.0, 0.1}, {"enc.L0.ff.w1", 2, 4.0, 0.0}}, 21);
    StageConfig cfg = stage_defaults(1);
    cfg.datasets = {path};
    cfg.steps = 4;
    cfg.warmup_steps = 0;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 4;
    cfg.seed = 2;
    cfg.train_mode = TrainMode::lora;
    auto res = train_stage(cfg, ck);
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("lora.", 0) == 0) continue;
        CHECK(res.ckpt.tensor(name)->data == t->data);
    }
    bool adapters_moved = false;
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("lora.", 0) == 0 && res.ckpt.tensor(name)->data != t->data)
            adapters_moved = true;
    }
    CHECK(adapters_moved);

    StageConfig bad = cfg;
    bad.train_mode = TrainMode::lora;
    CHECK_THROWS_AS(train_stage(bad, tiny_ckpt(4)), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("two-stage composition and optimizer reset") {
    auto path = write_pairs_dataset("embedkit_tr_two", 16, true);
    auto ck = tiny_ckpt(6);
    StageConfig cfg1 = stage_defaults(1);
    cfg1.datasets = {path};
    cfg1.steps = 5;
    cfg1.warmup_steps = 2;
    cfg1.learning_rate = 0.01;
    cfg1.batch_size = 4;
    cfg1.seed = 33;
    StageConfig cfg2 = stage_defaults(2);
    cfg2.datasets = {path};
    cfg2.steps = 4;
    cfg2.warmup_steps = 1;
    cfg2.learning_rate = 0.005;
    cfg2.batch_size = 4;
    cfg2.seed = 33;

    SUBCASE("empty second stage returns the persisted stage-1 weights") {
        StageConfig none = cfg2;
        none.steps = 0;
        none.warmup_steps = 0;
        auto two = two_stage_train(cfg1, none, ck);
        auto s1 = train_stage(cfg1, ck);
        round_to_f32(s1.ckpt);
        for (const auto& [name, t] : s1.ckpt.tensors)
            CHECK(two.ckpt.tensor(name)->data == t->data);
        CHECK(two.trace1.size() == 5);
        CHECK(two.trace2.empty());
    }
    SUBCASE("each stage starts from fresh optimizer state") {
        std::vector<bool> fresh_at_zero;
        TrainHooks hooks;
        hooks.on_step = [&](std::int64_t step, const AdamW& opt) {
            if (step == 0) {
                fresh_at_zero.push_back(opt.first_moment("tok_emb") == nullptr &&
                                        opt.steps_taken() == 0);
            }
        };
        bool saw_stage1 = false;
        auto two = two_stage_train(cfg1, cfg2, ck, hooks,
                                   [&](const StageResult& s1) { saw_stage1 = !s1.trace.empty(); });
        CHECK(saw_stage1);
        REQUIRE(fresh_at_zero.size() == 2);
        CHECK(fresh_at_zero[0]);
        CHECK(fresh_at_zero[1]);
        CHECK(two.trace2.size() == 4);
    }
    SUBCASE("stage order is validated") {
        CHECK_THROWS_AS(two_stage_train(cfg2, cfg2, ck), ValidationError);
        CHECK_THROWS_AS(two_stage_train(cfg1, cfg1, ck), ValidationError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("metrics file holds one step,loss line per step") {
    auto path = temp_path("embedkit_tr_metrics.csv");
    write_metrics(path, {{0, 2.0, {}}, {1, 0.53125, {}}});
    std::ifstream in(path);
    std::string l1, l2, extra;
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(l1 == "0,2");
    CHECK(l2 == "1,0.53125");
    CHECK_FALSE(std::getline(in, extra));
    std::filesystem::remove(path);
}
