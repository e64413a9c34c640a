#pragma once

#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "embedkit/checkpoint.hpp"

namespace embedkit {

struct TextSet {
    std::vector<std::string> ids;
    std::vector<std::string> texts;
};

// qid -> did -> graded relevance
struct Qrels {
    std::map<std::string, std::map<std::string, double>> grades;
};

struct EmbeddingMatrix {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> vectors;  // unit rows, aligned with ids

    void validate() const;
};

struct EvalReport {
    std::string task;
    std::map<std::string, double> metrics;
    std::map<std::string, double> per_query;  // diagnostics, not persisted
};

// Queries get the instruction template; documents are embedded raw.
EmbeddingMatrix embed_texts(const std::vector<std::string>& texts, const ModelCheckpoint& ckpt,
                            bool as_query, const std::string& task_definition,
                            const std::vector<std::string>& ids = {});

// Exhaustive exact search: indices sorted by descending cosine, ties by
// ascending corpus index.
std::vector<std::size_t> rank_by_similarity(const std::vector<double>& query,
                                            const EmbeddingMatrix& corpus);

// Gain 2^grade - 1, discount 1/log2(rank+1), normalized by the ideal DCG@k.
// 0 when nothing relevant is judged.
double ndcg_at_k(const std::vector<std::string>& ranking,
                 const std::map<std::string, double>& relevance, std::int64_t k);

double recall_at_k(const std::vector<std::string>& ranking,
                   const std::set<std::string>& relevant, std::int64_t k);

// Pearson correlation of average-tie ranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Majority vote among the k nearest train rows by cosine; vote ties go to the
// label with the larger summed similarity, then the smaller label id.
double knn_classify(const EmbeddingMatrix& train, const std::vector<int>& train_labels,
                    const EmbeddingMatrix& test, const std::vector<int>& test_labels,
                    std::int64_t k);

// Metric assembly over precomputed matrices: mean nDCG@k plus Recall@{1,k}.
EvalReport retrieval_report(const EmbeddingMatrix& queries, const EmbeddingMatrix& docs,
                            const Qrels& qrels, std::int64_t k);

EvalReport run_retrieval_eval(const TextSet& queries, const TextSet& corpus, const Qrels& qrels,
                              const ModelCheckpoint& ckpt, const std::string& task_definition,
                              std::int64_t k = 10);

// Both sides instructed (symmetric task); Spearman of model cosine vs gold.
EvalReport run_sts_eval(const std::vector<std::tuple<std::string, std::string, double>>& pairs,
                        const ModelCheckpoint& ckpt, const std::string& task_definition);

EvalReport run_classification_eval(const std::vector<std::pair<int, std::string>>& train,
                                   const std::vector<std::pair<int, std::string>>& test,
                                   const ModelCheckpoint& ckpt, std::int64_t k);

// "qid<TAB>did<TAB>grade" lines
Qrels load_qrels(const std::string& path);
// "id<TAB>text" lines, unique ids
TextSet load_textset(const std::string& path);
// "label<TAB>text" lines, integer labels
std::vector<std::pair<int, std::string>> load_labeled(const std::string& path);
// "text_a<TAB>text_b<TAB>score" lines
std::vector<std::tuple<std::string, std::string, double>> load_sts_file(const std::string& path);

// flat metric=value lines, task first
void write_report(const std::string& path, const EvalReport& report);

}  // namespace embedkit
