#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "relgen/model.hpp"
#include "relgen/retrieval.hpp"
#include "relgen/tokenizer.hpp"

namespace relgen::prf {

enum class Strategy { kGreedy, kBeam };

struct DecodingConfig {
    double lambda = 0.8;        // interpolation weight on the model term
    int k = 5;                  // feedback depth (top-k retrieved docs)
    int stopword_n = 15;        // size of the masked common-token set
    int max_len = 100;          // generated tokens before forced stop
    Strategy strategy = Strategy::kGreedy;
    int beam_width = 4;
    bool normalize_rf = false;  // divide rf scores by their sum before mixing
    bool naive_top1 = false;    // append top-1 retrieved code to the source
};

// Per-query feedback state: the top-k retrieved docs, the accumulated
// relevance scores rf(w) = sum_d fr(w, d) * RS(q, d) over non-stopword code
// tokens, and the masked set itself. Immutable once built.
struct FeedbackContext {
    std::vector<retrieval::ScoredDoc> scored_docs;
    std::unordered_map<std::string, double> rf_scores;  // absent key = 0
    std::unordered_set<std::string> stopwords;
    double rf_sum = 0.0;

    double rf(const std::string& token) const {
        auto it = rf_scores.find(token);
        return it == rf_scores.end() ? 0.0 : it->second;
    }
};

// The n most frequent code-side training tokens; ties by first occurrence.
std::unordered_set<std::string> build_stopwords(const std::vector<corpus::RawPair>& train, int n);
// Same ranking recomputed from an index's stored code token streams.
std::unordered_set<std::string> build_stopwords_from_index(const retrieval::RetrievalIndex& index,
                                                           int n);

// occurrences of token in doc / |doc|; 0 for an empty doc
double token_freq(const std::string& token, const std::vector<std::string>& doc);

// 0 if token occurs in prefix, else 1
int repetition_penalty(const std::vector<std::string>& prefix, const std::string& token);

// Retrieves top-k and accumulates rf scores over their code tokens in rank
// order. Special tokens are always masked in addition to `stopwords`.
FeedbackContext relevance_feedback(const std::vector<std::string>& query_tokens,
                                   const retrieval::RetrievalIndex& index,
                                   const std::unordered_set<std::string>& stopwords, int k);

// P(w) = [lambda * M(w) + (1 - lambda) * rf(w) * RP(prefix, w)] / Z.
// lambda = 1 returns model_dist unchanged (exact ablation reduction); a
// zero-mass mixture falls back to model_dist with a warning. OOV ids resolve
// to their pair-local surface before the rf lookup. feedback_out, when given,
// receives each id's gated feedback term (before the 1 - lambda weight).
std::vector<double> interpolate(const std::vector<double>& model_dist, const FeedbackContext& fb,
                                const std::vector<int>& prefix_ids,
                                const std::map<int, std::string>& oov_map,
                                const tokenizer::Vocabulary& vocab, const DecodingConfig& config,
                                std::vector<double>* feedback_out = nullptr);

struct TraceCandidate {
    std::string token;
    double model_prob = 0.0;
    double rf_score = 0.0;   // gated feedback term at this step
    double final_prob = 0.0;
};

struct TraceStep {
    std::vector<std::string> prefix;
    std::vector<TraceCandidate> top10;
    std::string chosen;
};

struct GenerationResult {
    std::string code;                  // detokenized prediction
    std::vector<std::string> tokens;   // surface tokens, OOV ids resolved
    std::vector<int> ids;              // emitted ids without <sos>/<eos>
    bool truncated = false;            // max_len hit before <eos>
    std::vector<TraceStep> trace;      // greedy strategy only
};

// Tokenizes the query, encodes it (naive_top1 first appends the top-1
// retrieved code behind an <eos> separator), builds the feedback context once,
// then decodes step by step: decode_step -> copy_mix -> interpolate -> select.
// index may be null (pure model decoding). Greedy ties pick the lowest id.
GenerationResult generate(const std::string& query, const model::Transformer& model,
                          const retrieval::RetrievalIndex* index,
                          const tokenizer::Vocabulary& vocab, const DecodingConfig& config);

// one JSON object per decode step
std::string trace_to_jsonl(const std::vector<TraceStep>& trace);

}  // namespace relgen::prf
