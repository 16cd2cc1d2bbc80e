#include "relgen/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "relgen/tokenizer.hpp"
#include "relgen/util.hpp"

namespace relgen::retrieval {

RetrievalIndex build_index(const std::vector<corpus::RawPair>& train, double k1, double b) {
    if (train.empty()) throw std::runtime_error("cannot build index from empty training set");
    if (k1 <= 0) throw std::invalid_argument("k1 must be > 0");
    if (b < 0 || b > 1) throw std::invalid_argument("b must be in [0,1]");

    RetrievalIndex index;
    index.k1 = k1;
    index.b = b;
    index.doc_count = static_cast<int>(train.size());
    index.doc_lengths.reserve(train.size());
    index.doc_codes.reserve(train.size());

    long long total_len = 0;
    for (int d = 0; d < index.doc_count; ++d) {
        auto desc_tokens = tokenizer::tokenize(train[d].description);
        index.doc_lengths.push_back(static_cast<int>(desc_tokens.size()));
        total_len += static_cast<long long>(desc_tokens.size());
        index.doc_codes.push_back(tokenizer::tokenize(train[d].code));

        std::unordered_map<std::string, int> tf;
        for (const auto& t : desc_tokens) tf[t] += 1;
        for (const auto& [tok, cnt] : tf) index.postings[tok].push_back(Posting{d, cnt});
    }
    for (auto& [tok, plist] : index.postings)
        std::sort(plist.begin(), plist.end(),
                  [](const Posting& x, const Posting& y) { return x.doc_id < y.doc_id; });
    index.avg_doc_length = static_cast<double>(total_len) / index.doc_count;
    return index;
}

static int term_frequency(const RetrievalIndex& index, const std::string& token, int doc_id) {
    auto it = index.postings.find(token);
    if (it == index.postings.end()) return 0;
    const auto& plist = it->second;
    auto pit = std::lower_bound(plist.begin(), plist.end(), doc_id,
                                [](const Posting& p, int id) { return p.doc_id < id; });
    if (pit != plist.end() && pit->doc_id == doc_id) return pit->tf;
    return 0;
}

double bm25_score(const RetrievalIndex& index, const std::vector<std::string>& query_tokens,
                  int doc_id) {
    if (doc_id < 0 || doc_id >= index.doc_count)
        throw std::out_of_range("doc_id out of range: " + std::to_string(doc_id));

    std::set<std::string> distinct(query_tokens.begin(), query_tokens.end());
    const double len = index.doc_lengths[doc_id];
    const double norm = index.k1 * (1.0 - index.b + index.b * len / index.avg_doc_length);
    const double n_docs = index.doc_count;

    double score = 0.0;
    for (const auto& t : distinct) {
        auto it = index.postings.find(t);
        if (it == index.postings.end()) continue;
        int tf = term_frequency(index, t, doc_id);
        if (tf == 0) continue;
        double df = static_cast<double>(it->second.size());
        double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
        score += idf * tf * (index.k1 + 1.0) / (tf + norm);
    }
    return score;
}

std::vector<double> score_all_serial(const RetrievalIndex& index,
                                     const std::vector<std::string>& query_tokens) {
    std::vector<double> scores(index.doc_count, 0.0);
    for (int d = 0; d < index.doc_count; ++d) scores[d] = bm25_score(index, query_tokens, d);
    return scores;
}

std::vector<double> score_all(const RetrievalIndex& index,
                              const std::vector<std::string>& query_tokens) {
    std::vector<double> scores(index.doc_count, 0.0);
#pragma omp parallel for schedule(static)
    for (int d = 0; d < index.doc_count; ++d) scores[d] = bm25_score(index, query_tokens, d);
    return scores;
}

std::vector<ScoredDoc> retrieve_top_k(const RetrievalIndex& index,
                                      const std::vector<std::string>& query_tokens, int k,
                                      int exclude_doc_id) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");

    // candidate docs: those containing at least one query token
    std::set<std::string> distinct(query_tokens.begin(), query_tokens.end());
    std::set<int> candidate_set;
    for (const auto& t : distinct) {
        auto it = index.postings.find(t);
        if (it == index.postings.end()) continue;
        for (const auto& p : it->second) candidate_set.insert(p.doc_id);
    }
    std::vector<int> candidates(candidate_set.begin(), candidate_set.end());

    std::vector<double> scores(candidates.size(), 0.0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(candidates.size()); ++i)
        scores[i] = bm25_score(index, query_tokens, candidates[i]);

    std::vector<std::pair<double, int>> ranked;  // (score, doc_id)
    ranked.reserve(candidates.size());
    for (size_t i = 0; i < candidates.size(); ++i) {
        if (scores[i] > 0.0 && candidates[i] != exclude_doc_id)
            ranked.emplace_back(scores[i], candidates[i]);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    size_t take = std::min<size_t>(ranked.size(), static_cast<size_t>(k));
    std::vector<ScoredDoc> out;
    out.reserve(take);
    for (size_t i = 0; i < take; ++i)
        out.push_back(ScoredDoc{ranked[i].second, ranked[i].first, index.doc_codes[ranked[i].second]});
    return out;
}

double recode_similarity(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    const size_t n = a.size(), m = b.size();
    std::vector<size_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = j;
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= m; ++j) {
            size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    double dist = static_cast<double>(prev[m]);
    return 1.0 - dist / static_cast<double>(std::max(n, m));
}

ScoredDoc oracle_retrieve(const corpus::RawPair& test_pair,
                          const std::vector<corpus::RawPair>& train, const SentenceScorer& bleu) {
    if (train.empty()) throw std::runtime_error("oracle_retrieve needs a non-empty training set");
    auto ref = tokenizer::tokenize(test_pair.code);

    std::vector<std::vector<std::string>> codes(train.size());
    std::vector<double> scores(train.size(), 0.0);
#pragma omp parallel for schedule(static)
    for (int d = 0; d < static_cast<int>(train.size()); ++d) {
        codes[d] = tokenizer::tokenize(train[d].code);
        scores[d] = bleu(codes[d], ref);
    }
    int best = 0;
    for (int d = 1; d < static_cast<int>(train.size()); ++d)
        if (scores[d] > scores[best]) best = d;
    return ScoredDoc{best, scores[best], codes[best]};
}

void save_index(const RetrievalIndex& index, const std::string& path) {
    nlohmann::json j;
    j["format"] = "relgen-index";
    j["version"] = 1;
    j["k1"] = index.k1;
    j["b"] = index.b;
    j["doc_lengths"] = index.doc_lengths;
    j["doc_codes"] = index.doc_codes;
    nlohmann::json posts = nlohmann::json::object();
    for (const auto& [tok, plist] : index.postings) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : plist) arr.push_back({p.doc_id, p.tf});
        posts[tok] = std::move(arr);
    }
    j["postings"] = std::move(posts);
    write_text_file(path, j.dump());
}

RetrievalIndex load_index(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_text_file(path));
    if (!j.contains("format") || j["format"] != "relgen-index")
        throw std::runtime_error("not a retrieval index file: " + path);
    if (j["version"].get<int>() != 1)
        throw std::runtime_error("unsupported index version in " + path);

    RetrievalIndex index;
    index.k1 = j["k1"].get<double>();
    index.b = j["b"].get<double>();
    index.doc_lengths = j["doc_lengths"].get<std::vector<int>>();
    index.doc_codes = j["doc_codes"].get<std::vector<std::vector<std::string>>>();
    index.doc_count = static_cast<int>(index.doc_lengths.size());
    long long total = 0;
    for (int len : index.doc_lengths) total += len;
    index.avg_doc_length = index.doc_count ? static_cast<double>(total) / index.doc_count : 0.0;
    for (const auto& [tok, arr] : j["postings"].items()) {
        auto& plist = index.postings[tok];
        for (const auto& e : arr) plist.push_back(Posting{e[0].get<int>(), e[1].get<int>()});
        std::sort(plist.begin(), plist.end(),
                  [](const Posting& x, const Posting& y) { return x.doc_id < y.doc_id; });
    }
    if (index.doc_codes.size() != static_cast<size_t>(index.doc_count))
        throw std::runtime_error("corrupt index file: " + path);
    return index;
}

}  // namespace relgen::retrieval
