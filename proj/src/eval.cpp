#include "embedkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "embedkit/curation.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/pooling.hpp"

namespace embedkit {

void EmbeddingMatrix::validate() const {
    if (ids.size() != vectors.size())
        throw ValidationError("embedding matrix ids and rows are misaligned");
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (vectors[i].size() != vectors[0].size())
            throw ValidationError("embedding matrix rows have mixed widths");
        double s = 0.0;
        for (double v : vectors[i]) s += v * v;
        if (std::abs(std::sqrt(s) - 1.0) > 1e-9)
            throw ValidationError("embedding row for id '" + ids[i] + "' is not unit-normalized");
    }
}

EmbeddingMatrix embed_texts(const std::vector<std::string>& texts, const ModelCheckpoint& ckpt,
                            bool as_query, const std::string& task_definition,
                            const std::vector<std::string>& ids) {
    if (!ids.empty() && ids.size() != texts.size())
        throw ValidationError("ids and texts must have equal lengths");
    NoGradGuard ng;
    EmbeddingMatrix out;
    out.ids.reserve(texts.size());
    out.vectors.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        const std::string text =
            as_query ? format_instructed_query(task_definition, texts[i]) : texts[i];
        auto seq = tokenize(text, ckpt.enc.max_len);
        out.vectors.push_back(normalize(pool(encode(seq, ckpt), ckpt, seq))->data);
        out.ids.push_back(ids.empty() ? std::to_string(i) : ids[i]);
    }
    return out;
}

std::vector<std::size_t> rank_by_similarity(const std::vector<double>& query,
                                            const EmbeddingMatrix& corpus) {
    std::vector<double> sims(corpus.vectors.size());
    for (std::size_t i = 0; i < corpus.vectors.size(); ++i) {
        const auto& row = corpus.vectors[i];
        if (row.size() != query.size())
            throw ValidationError("query and corpus embedding widths differ");
        double s = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) s += query[j] * row[j];
        sims[i] = s;
    }
    std::vector<std::size_t> order(sims.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return a < b;
    });
    return order;
}

double ndcg_at_k(const std::vector<std::string>& ranking,
                 const std::map<std::string, double>& relevance, std::int64_t k) {
    if (k < 1) throw ValidationError("ndcg k must be >= 1");
    auto gain = [](double grade) { return std::exp2(grade) - 1.0; };
    double dcg = 0.0;
    const std::size_t depth = std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < depth; ++r) {
        auto it = relevance.find(ranking[r]);
        if (it == relevance.end()) continue;
        dcg += gain(it->second) / std::log2(static_cast<double>(r) + 2.0);
    }
    std::vector<double> grades;
    grades.reserve(relevance.size());
    for (const auto& [id, g] : relevance) grades.push_back(g);
    std::sort(grades.begin(), grades.end(), std::greater<>());
    double ideal = 0.0;
    for (std::size_t r = 0; r < std::min<std::size_t>(grades.size(), static_cast<std::size_t>(k));
         ++r) {
        ideal += gain(grades[r]) / std::log2(static_cast<double>(r) + 2.0);
    }
    return ideal == 0.0 ? 0.0 : dcg / ideal;
}

double recall_at_k(const std::vector<std::string>& ranking,
                   const std::set<std::string>& relevant, std::int64_t k) {
    if (k < 1) throw ValidationError("recall k must be >= 1");
    if (relevant.empty()) throw ValidationError("recall needs a non-empty relevant set");
    std::size_t hits = 0;
    const std::size_t depth = std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < depth; ++r) hits += relevant.count(ranking[r]);
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

namespace {

std::vector<double> average_tie_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ValidationError("spearman inputs differ in length");
    if (x.size() < 2) throw ValidationError("spearman needs at least two points");
    auto rx = average_tie_ranks(x);
    auto ry = average_tie_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0.0 || vy == 0.0)
        throw ValidationError("spearman undefined: an input has zero rank variance");
    return cov / std::sqrt(vx * vy);
}

double knn_classify(const EmbeddingMatrix& train, const std::vector<int>& train_labels,
                    const EmbeddingMatrix& test, const std::vector<int>& test_labels,
                    std::int64_t k) {
    if (k < 1) throw ValidationError("knn k must be >= 1");
    if (train.vectors.empty()) throw ValidationError("knn needs a non-empty train set");
    if (train.vectors.size() != train_labels.size() || test.vectors.size() != test_labels.size())
        throw ValidationError("knn labels misaligned with embeddings");

    std::size_t correct = 0;
    for (std::size_t t = 0; t < test.vectors.size(); ++t) {
        auto order = rank_by_similarity(test.vectors[t], train);
        const std::size_t kk = std::min<std::size_t>(order.size(), static_cast<std::size_t>(k));
        std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, sim sum)
        for (std::size_t r = 0; r < kk; ++r) {
            const std::size_t idx = order[r];
            double s = 0.0;
            for (std::size_t j = 0; j < test.vectors[t].size(); ++j)
                s += test.vectors[t][j] * train.vectors[idx][j];
            auto& v = votes[train_labels[idx]];
            v.first += 1;
            v.second += s;
        }
        int best = 0;
        std::pair<std::size_t, double> best_score{0, 0.0};
        bool have = false;
        for (const auto& [label, sc] : votes) {
            const bool wins = !have || sc.first > best_score.first ||
                              (sc.first == best_score.first && sc.second > best_score.second);
            // map iteration is ascending, so equal (count, sim) keeps the smaller label
            if (wins) {
                best = label;
                best_score = sc;
                have = true;
            }
        }
        if (best == test_labels[t]) ++correct;
    }
    return test.vectors.empty() ? 0.0
                                : static_cast<double>(correct) /
                                      static_cast<double>(test.vectors.size());
}

EvalReport retrieval_report(const EmbeddingMatrix& queries, const EmbeddingMatrix& docs,
                            const Qrels& qrels, std::int64_t k) {
    if (k < 1) throw ValidationError("retrieval k must be >= 1");
    queries.validate();
    docs.validate();

    std::set<std::string> qids(queries.ids.begin(), queries.ids.end());
    std::set<std::string> dids(docs.ids.begin(), docs.ids.end());
    std::vector<std::string> dangling;
    for (const auto& [qid, row] : qrels.grades) {
        if (!qids.count(qid)) dangling.push_back(qid);
        for (const auto& [did, g] : row)
            if (!dids.count(did)) dangling.push_back(did);
    }
    if (!dangling.empty()) {
        std::string msg = "qrels reference unknown ids:";
        for (const auto& id : dangling) msg += " " + id;
        throw ValidationError(msg);
    }

    EvalReport rep;
    rep.task = "retrieval";
    double ndcg_sum = 0.0, r1_sum = 0.0, rk_sum = 0.0;
    for (std::size_t qi = 0; qi < queries.ids.size(); ++qi) {
        const std::string& qid = queries.ids[qi];
        auto it = qrels.grades.find(qid);
        if (it == qrels.grades.end() || it->second.empty())
            throw ValidationError("query '" + qid + "' has no relevance judgments");
        auto order = rank_by_similarity(queries.vectors[qi], docs);
        std::vector<std::string> ranking;
        ranking.reserve(order.size());
        for (auto idx : order) ranking.push_back(docs.ids[idx]);
        std::set<std::string> relevant;
        for (const auto& [did, g] : it->second)
            if (g > 0.0) relevant.insert(did);
        if (relevant.empty())
            throw ValidationError("query '" + qid + "' has no positively graded documents");
        const double nd = ndcg_at_k(ranking, it->second, k);
        ndcg_sum += nd;
        r1_sum += recall_at_k(ranking, relevant, 1);
        rk_sum += recall_at_k(ranking, relevant, k);
        rep.per_query[qid] = nd;
    }
    const double n = static_cast<double>(queries.ids.size());
    rep.metrics["nDCG@" + std::to_string(k)] = ndcg_sum / n;
    rep.metrics["Recall@1"] = r1_sum / n;
    rep.metrics["Recall@" + std::to_string(k)] = rk_sum / n;
    return rep;
}

EvalReport run_retrieval_eval(const TextSet& queries, const TextSet& corpus, const Qrels& qrels,
                              const ModelCheckpoint& ckpt, const std::string& task_definition,
                              std::int64_t k) {
    auto qm = embed_texts(queries.texts, ckpt, true, task_definition, queries.ids);
    auto dm = embed_texts(corpus.texts, ckpt, false, task_definition, corpus.ids);
    return retrieval_report(qm, dm, qrels, k);
}

EvalReport run_sts_eval(const std::vector<std::tuple<std::string, std::string, double>>& pairs,
                        const ModelCheckpoint& ckpt, const std::string& task_definition) {
    if (pairs.size() < 2) throw ValidationError("sts eval needs at least two pairs");
    std::vector<std::string> left, right;
    std::vector<double> gold;
    for (const auto& [a, b, s] : pairs) {
        left.push_back(a);
        right.push_back(b);
        gold.push_back(s);
    }
    auto la = embed_texts(left, ckpt, true, task_definition);
    auto lb = embed_texts(right, ckpt, true, task_definition);
    std::vector<double> sims(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < la.vectors[i].size(); ++j)
            s += la.vectors[i][j] * lb.vectors[i][j];
        sims[i] = s;
    }
    EvalReport rep;
    rep.task = "sts";
    rep.metrics["Spearman"] = spearman(sims, gold);
    return rep;
}

EvalReport run_classification_eval(const std::vector<std::pair<int, std::string>>& train,
                                   const std::vector<std::pair<int, std::string>>& test,
                                   const ModelCheckpoint& ckpt, std::int64_t k) {
    std::vector<std::string> tr_texts, te_texts;
    std::vector<int> tr_labels, te_labels;
    for (const auto& [l, t] : train) {
        tr_labels.push_back(l);
        tr_texts.push_back(t);
    }
    for (const auto& [l, t] : test) {
        te_labels.push_back(l);
        te_texts.push_back(t);
    }
    auto trm = embed_texts(tr_texts, ckpt, false, "");
    auto tem = embed_texts(te_texts, ckpt, false, "");
    EvalReport rep;
    rep.task = "classification";
    rep.metrics["Accuracy"] = knn_classify(trm, tr_labels, tem, te_labels, k);
    return rep;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path);
    return in;
}

}  // namespace

Qrels load_qrels(const std::string& path) {
    auto in = open_or_throw(path);
    Qrels q;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != 3)
            throw ValidationError(path + ":" + std::to_string(lineno) +
                                  ": expected qid<TAB>did<TAB>grade");
        try {
            std::size_t used = 0;
            double grade = std::stod(f[2], &used);
            if (used != f[2].size()) throw std::invalid_argument(f[2]);
            q.grades[f[0]][f[1]] = grade;
        } catch (const std::exception&) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": bad grade '" + f[2] +
                                  "'");
        }
    }
    return q;
}

TextSet load_textset(const std::string& path) {
    auto in = open_or_throw(path);
    TextSet ts;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != 2)
            throw ValidationError(path + ":" + std::to_string(lineno) + ": expected id<TAB>text");
        if (!seen.insert(f[0]).second)
            throw ValidationError(path + ":" + std::to_string(lineno) + ": duplicate id '" +
                                  f[0] + "'");
        ts.ids.push_back(f[0]);
        ts.texts.push_back(f[1]);
    }
    return ts;
}

std::vector<std::pair<int, std::string>> load_labeled(const std::string& path) {
    auto in = open_or_throw(path);
    std::vector<std::pair<int, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != 2)
            throw ValidationError(path + ":" + std::to_string(lineno) +
                                  ": expected label<TAB>text");
        try {
            std::size_t used = 0;
            int label = std::stoi(f[0], &used);
            if (used != f[0].size()) throw std::invalid_argument(f[0]);
            out.emplace_back(label, f[1]);
        } catch (const std::exception&) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": bad label '" + f[0] +
                                  "'");
        }
    }
    return out;
}

std::vector<std::tuple<std::string, std::string, double>> load_sts_file(const std::string& path) {
    auto in = open_or_throw(path);
    std::vector<std::tuple<std::string, std::string, double>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_tabs(line);
        if (f.size() != 3)
            throw ValidationError(path + ":" + std::to_string(lineno) +
                                  ": expected text_a<TAB>text_b<TAB>score");
        try {
            std::size_t used = 0;
            double score = std::stod(f[2], &used);
            if (used != f[2].size()) throw std::invalid_argument(f[2]);
            out.emplace_back(f[0], f[1], score);
        } catch (const std::exception&) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": bad score '" + f[2] +
                                  "'");
        }
    }
    return out;
}

void write_report(const std::string& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open report file for writing: " + path);
    out << "task=" << report.task << "\n";
    char buf[64];
    for (const auto& [name, value] : report.metrics) {
        std::snprintf(buf, sizeof buf, "%.9g", value);
        out << name << "=" << buf << "\n";
    }
    if (!out) throw ValidationError("failed writing report file: " + path);
}

}  // namespace embedkit
