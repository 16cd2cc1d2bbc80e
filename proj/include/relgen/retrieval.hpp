#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "relgen/corpus.hpp"

namespace relgen::retrieval {

struct Posting {
    int doc_id;
    int tf;
};

// Inverted index over training-set descriptions. Each indexed description
// carries the code tokens of its paired snippet, which feedback consumes.
struct RetrievalIndex {
    std::unordered_map<std::string, std::vector<Posting>> postings;
    std::vector<int> doc_lengths;
    double avg_doc_length = 0.0;
    int doc_count = 0;
    std::vector<std::vector<std::string>> doc_codes;
    double k1 = 1.2;
    double b = 0.75;
};

struct ScoredDoc {
    int doc_id = -1;
    double score = 0.0;
    std::vector<std::string> code_tokens;
};

RetrievalIndex build_index(const std::vector<corpus::RawPair>& train, double k1 = 1.2,
                           double b = 0.75);

// BM25 with the Lucene-style idf: ln(1 + (N - df + 0.5) / (df + 0.5)).
// Duplicate query tokens contribute once.
double bm25_score(const RetrievalIndex& index, const std::vector<std::string>& query_tokens,
                  int doc_id);

// Scores every document. The parallel version is the default path; the serial
// one is the reference the tests and the benchmark compare against.
std::vector<double> score_all(const RetrievalIndex& index,
                              const std::vector<std::string>& query_tokens);
std::vector<double> score_all_serial(const RetrievalIndex& index,
                                     const std::vector<std::string>& query_tokens);

// Top min(k, doc_count) docs with positive score, by (score desc, doc_id asc).
std::vector<ScoredDoc> retrieve_top_k(const RetrievalIndex& index,
                                      const std::vector<std::string>& query_tokens, int k,
                                      int exclude_doc_id = -1);

// 1 - token_levenshtein(a, b) / max(|a|, |b|); 1.0 when both are empty.
double recode_similarity(const std::vector<std::string>& a, const std::vector<std::string>& b);

using SentenceScorer =
    std::function<double(const std::vector<std::string>&, const std::vector<std::string>&)>;

// Evaluation upper bound: the training snippet maximizing bleu(candidate =
// train code, reference = test code), ties by ascending doc id.
ScoredDoc oracle_retrieve(const corpus::RawPair& test_pair,
                          const std::vector<corpus::RawPair>& train, const SentenceScorer& bleu);

void save_index(const RetrievalIndex& index, const std::string& path);
RetrievalIndex load_index(const std::string& path);

}  // namespace relgen::retrieval
