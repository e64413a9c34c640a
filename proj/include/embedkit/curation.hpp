#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/rng.hpp"

namespace embedkit {

// One contrastive training instance: an instructed query, its positive
// document and up to n_hard_negatives mined negatives. symmetric marks pairs
// whose documents also receive the instruction prefix at encode time.
struct TrainingExample {
    std::string task_definition;
    std::string query;
    std::string positive;
    std::vector<std::string> negatives;
    std::string source_dataset;
    bool symmetric = false;
    std::string label;                 // class id for classification sources, else empty
    std::optional<double> pair_score;  // raw similarity score for STS sources

    void validate() const;  // positive never listed among negatives
};

struct Dataset {
    std::string name;
    std::vector<TrainingExample> examples;
};

struct LabeledExample {
    std::string text;
    std::string label;
};

// Scores a (query, document) pair; higher = more relevant.
using TeacherFn = std::function<double(const std::string&, const std::string&)>;

struct MiningConfig {
    TeacherFn teacher;
    std::int64_t top_k = 7;
    double percentage_margin = 0.95;

    void validate() const;
};

struct MiningResult {
    std::vector<std::string> negatives;
    bool underfull = false;  // fewer than top_k docs survived the filters
};

enum class PairMode { label_based, example_based };

PairMode pair_mode_from_string(const std::string& s);
std::string to_string(PairMode m);

struct PairBuildResult {
    std::vector<TrainingExample> examples;
    std::int64_t skipped_singletons = 0;
};

// "Instruct: {task_definition} Query: {query}". Documents get no prefix.
std::string format_instructed_query(const std::string& task_definition, const std::string& query);

// Teacher backed by a checkpoint: cosine similarity of its unit embeddings.
// max_len caps tokenization; the query side is scored as given (callers pass
// the instructed form).
TeacherFn make_checkpoint_teacher(const ModelCheckpoint& ckpt);

// Positive-aware mining: threshold = teacher(query, positive) * margin;
// candidates scoring >= threshold are dropped as likely false negatives, the
// exact positive string always is, then the top_k highest-scoring remaining
// docs are returned (descending score, ties by ascending corpus index).
MiningResult mine_hard_negatives(const std::string& query, const std::string& positive,
                                 const std::vector<std::string>& corpus, const MiningConfig& cfg);

// One TrainingExample per input text. label_based: positive = the label
// string itself, negatives = the other labels. example_based: positive = a
// random other member of the same class, negatives = random members of other
// classes (without replacement, at most n_negatives).
PairBuildResult build_multiclass_pairs(const std::vector<LabeledExample>& examples, PairMode mode,
                                       std::uint64_t seed, const std::string& task_definition,
                                       std::int64_t n_negatives = 7);

// Emits (t_a -> t_b) and (t_b -> t_a) iff score >= 4, both symmetric, with
// negatives mined from corpus against the instructed query.
std::vector<TrainingExample> build_sts_pairs(const std::string& t_a, const std::string& t_b,
                                             double score, const std::vector<std::string>& corpus,
                                             const MiningConfig& cfg,
                                             const std::string& task_definition);

// JSONL: one object per line with task_definition, query, positive,
// negatives, plus optional source_dataset / symmetric / label / pair_score.
Dataset load_dataset(const std::string& path);
void save_dataset(const std::string& path, const Dataset& ds);

// Infinite seeded stream: pick a dataset uniformly, then an example uniformly
// within it.
class BlendedStream {
public:
    BlendedStream(std::vector<Dataset> sets, std::uint64_t seed);

    const TrainingExample& next();
    const std::vector<Dataset>& datasets() const { return sets_; }

private:
    std::vector<Dataset> sets_;
    Rng rng_;
};

BlendedStream load_blended(const std::vector<std::string>& paths, std::uint64_t seed);

}  // namespace embedkit
