#include "embedkit/curation.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "embedkit/encoder.hpp"
#include "embedkit/pooling.hpp"

namespace embedkit {

void TrainingExample::validate() const {
    if (query.empty()) throw ValidationError("training example has an empty query");
    if (positive.empty()) throw ValidationError("training example has an empty positive");
    for (const auto& n : negatives) {
        if (n == positive)
            throw ValidationError("training example lists its positive among the negatives");
    }
}

void MiningConfig::validate() const {
    if (!teacher) throw ValidationError("mining requires a teacher scorer");
    if (top_k < 1) throw ValidationError("mining top_k must be >= 1");
    if (!(percentage_margin > 0.0) || percentage_margin > 1.0)
        throw ValidationError("percentage_margin must be in (0, 1]");
}

PairMode pair_mode_from_string(const std::string& s) {
    if (s == "label_based") return PairMode::label_based;
    if (s == "example_based") return PairMode::example_based;
    throw ValidationError("unknown pair mode: " + s);
}

std::string to_string(PairMode m) {
    return m == PairMode::label_based ? "label_based" : "example_based";
}

std::string format_instructed_query(const std::string& task_definition, const std::string& query) {
    if (task_definition.empty()) throw ValidationError("task_definition must be non-empty");
    if (query.empty()) throw ValidationError("query must be non-empty");
    return "Instruct: " + task_definition + " Query: " + query;
}

namespace {

const std::vector<double>& embed_unit(const ModelCheckpoint& ck,
                                      std::unordered_map<std::string, std::vector<double>>& cache,
                                      const std::string& text) {
    auto it = cache.find(text);
    if (it != cache.end()) return it->second;
    NoGradGuard ng;
    auto seq = tokenize(text, ck.enc.max_len);
    auto e = normalize(pool(encode(seq, ck), ck, seq));
    return cache.emplace(text, e->data).first->second;
}

}  // namespace

TeacherFn make_checkpoint_teacher(const ModelCheckpoint& ckpt) {
    // Shares the checkpoint's tensor storage (read-only) and memoizes
    // embeddings; identical strings embed identically so caching is exact.
    auto cache = std::make_shared<std::unordered_map<std::string, std::vector<double>>>();
    ModelCheckpoint ck = ckpt;
    return [ck, cache](const std::string& q, const std::string& d) {
        const auto& eq = embed_unit(ck, *cache, q);
        const auto& ed = embed_unit(ck, *cache, d);
        double s = 0.0;
        for (std::size_t i = 0; i < eq.size(); ++i) s += eq[i] * ed[i];
        return s;
    };
}

MiningResult mine_hard_negatives(const std::string& query, const std::string& positive,
                                 const std::vector<std::string>& corpus,
                                 const MiningConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) throw ValidationError("mining corpus is empty");

    const double threshold = cfg.teacher(query, positive) * cfg.percentage_margin;

    struct Candidate {
        double score;
        std::size_t index;  // position in the original corpus (first occurrence)
        const std::string* doc;
    };
    std::vector<Candidate> eligible;
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const std::string& doc = corpus[i];
        if (doc == positive) continue;
        if (!seen.insert(doc).second) continue;
        double s = cfg.teacher(query, doc);
        if (s >= threshold) continue;  // likely false negative, drop
        eligible.push_back({s, i, &doc});
    }
    std::sort(eligible.begin(), eligible.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    });

    MiningResult out;
    const std::size_t take = std::min<std::size_t>(eligible.size(),
                                                   static_cast<std::size_t>(cfg.top_k));
    out.underfull = eligible.size() < static_cast<std::size_t>(cfg.top_k);
    out.negatives.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.negatives.push_back(*eligible[i].doc);
    return out;
}

PairBuildResult build_multiclass_pairs(const std::vector<LabeledExample>& examples, PairMode mode,
                                       std::uint64_t seed, const std::string& task_definition,
                                       std::int64_t n_negatives) {
    if (task_definition.empty()) throw ValidationError("task_definition must be non-empty");
    if (n_negatives < 0) throw ValidationError("n_negatives must be >= 0");

    std::vector<std::string> labels;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        auto [it, fresh] = members.try_emplace(examples[i].label);
        if (fresh) labels.push_back(examples[i].label);
        it->second.push_back(i);
    }
    if (labels.size() < 2) throw ValidationError("multiclass pair construction needs >= 2 classes");
    std::sort(labels.begin(), labels.end());

    PairBuildResult out;
    Rng rng(seed);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        TrainingExample te;
        te.task_definition = task_definition;
        te.query = ex.text;
        te.label = ex.label;

        if (mode == PairMode::label_based) {
            te.positive = ex.label;
            for (const auto& l : labels) {
                if (l == ex.label) continue;
                if (static_cast<std::int64_t>(te.negatives.size()) >= n_negatives) break;
                te.negatives.push_back(l);
            }
        } else {
            const auto& same = members[ex.label];
            if (same.size() < 2) {
                ++out.skipped_singletons;
                continue;
            }
            std::vector<std::size_t> others_same;
            for (std::size_t j : same)
                if (j != i) others_same.push_back(j);
            te.positive = examples[others_same[rng.uniform_index(others_same.size())]].text;

            std::vector<std::size_t> pool;
            for (std::size_t j = 0; j < examples.size(); ++j)
                if (examples[j].label != ex.label) pool.push_back(j);
            const std::size_t take =
                std::min<std::size_t>(pool.size(), static_cast<std::size_t>(n_negatives));
            for (std::size_t t = 0; t < take; ++t) {
                std::size_t pick = t + rng.uniform_index(pool.size() - t);
                std::swap(pool[t], pool[pick]);
                const std::string& neg = examples[pool[t]].text;
                if (neg != te.positive) te.negatives.push_back(neg);
            }
        }
        te.validate();
        out.examples.push_back(std::move(te));
    }
    return out;
}

std::vector<TrainingExample> build_sts_pairs(const std::string& t_a, const std::string& t_b,
                                             double score, const std::vector<std::string>& corpus,
                                             const MiningConfig& cfg,
                                             const std::string& task_definition) {
    if (score < 4.0) return {};
    std::vector<TrainingExample> out;
    for (const auto& [q, p] : {std::pair{t_a, t_b}, std::pair{t_b, t_a}}) {
        TrainingExample te;
        te.task_definition = task_definition;
        te.query = q;
        te.positive = p;
        te.symmetric = true;
        te.pair_score = score;
        if (!corpus.empty()) {
            te.negatives =
                mine_hard_negatives(format_instructed_query(task_definition, q), p, corpus, cfg)
                    .negatives;
        }
        te.validate();
        out.push_back(std::move(te));
    }
    return out;
}

namespace {

std::string require_string(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_string())
        throw ValidationError(where + ": missing or non-string field '" + key + "'");
    return j[key].get<std::string>();
}

}  // namespace

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open dataset file: " + path);

    Dataset ds;
    ds.name = std::filesystem::path(path).stem().string();

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError(where + ": malformed JSON record: " + e.what());
        }
        if (!j.is_object()) throw ValidationError(where + ": record is not an object");

        static const std::unordered_set<std::string> known{
            "task_definition", "query",     "positive", "negatives",
            "source_dataset",  "symmetric", "label",    "pair_score"};
        for (const auto& [key, _] : j.items()) {
            if (!known.count(key)) throw ValidationError(where + ": unknown field '" + key + "'");
        }

        TrainingExample te;
        te.task_definition = require_string(j, "task_definition", where);
        te.query = require_string(j, "query", where);
        te.positive = require_string(j, "positive", where);
        if (!j.contains("negatives") || !j["negatives"].is_array())
            throw ValidationError(where + ": missing or non-array field 'negatives'");
        for (const auto& n : j["negatives"]) {
            if (!n.is_string()) throw ValidationError(where + ": negatives must be strings");
            te.negatives.push_back(n.get<std::string>());
        }
        te.source_dataset =
            j.contains("source_dataset") ? require_string(j, "source_dataset", where) : ds.name;
        if (j.contains("symmetric")) {
            if (!j["symmetric"].is_boolean())
                throw ValidationError(where + ": 'symmetric' must be a boolean");
            te.symmetric = j["symmetric"].get<bool>();
        }
        if (j.contains("label")) {
            if (j["label"].is_string())
                te.label = j["label"].get<std::string>();
            else if (j["label"].is_number_integer())
                te.label = std::to_string(j["label"].get<std::int64_t>());
            else
                throw ValidationError(where + ": 'label' must be a string or integer");
        }
        if (j.contains("pair_score")) {
            if (!j["pair_score"].is_number())
                throw ValidationError(where + ": 'pair_score' must be a number");
            te.pair_score = j["pair_score"].get<double>();
        }
        te.validate();
        ds.examples.push_back(std::move(te));
    }
    return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open dataset file for writing: " + path);
    for (const auto& te : ds.examples) {
        nlohmann::json j;  // keys serialize sorted, so output is canonical
        j["task_definition"] = te.task_definition;
        j["query"] = te.query;
        j["positive"] = te.positive;
        j["negatives"] = te.negatives;
        j["source_dataset"] = te.source_dataset;
        j["symmetric"] = te.symmetric;
        if (!te.label.empty()) j["label"] = te.label;
        if (te.pair_score) j["pair_score"] = *te.pair_score;
        out << j.dump() << "\n";
    }
    if (!out) throw ValidationError("failed writing dataset file: " + path);
}

BlendedStream::BlendedStream(std::vector<Dataset> sets, std::uint64_t seed)
    : sets_(std::move(sets)), rng_(seed) {
    if (sets_.empty()) throw ValidationError("blended stream needs at least one dataset");
    for (const auto& ds : sets_) {
        if (ds.examples.empty())
            throw ValidationError("dataset '" + ds.name + "' has no examples");
    }
}

const TrainingExample& BlendedStream::next() {
    const auto& ds = sets_[rng_.uniform_index(sets_.size())];
    return ds.examples[rng_.uniform_index(ds.examples.size())];
}

BlendedStream load_blended(const std::vector<std::string>& paths, std::uint64_t seed) {
    std::vector<Dataset> sets;
    sets.reserve(paths.size());
    for (const auto& p : paths) sets.push_back(load_dataset(p));
    return BlendedStream(std::move(sets), seed);
}

}  // namespace embedkit
