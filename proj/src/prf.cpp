#include "relgen/prf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "relgen/util.hpp"

namespace relgen::prf {

namespace {

void check_config(const DecodingConfig& c) {
    if (c.lambda < 0.0 || c.lambda > 1.0)
        throw std::invalid_argument("decode: lambda must be in [0, 1]");
    if (c.k < 1) throw std::invalid_argument("decode: k must be >= 1");
    if (c.stopword_n < 0) throw std::invalid_argument("decode: stopword_n must be >= 0");
    if (c.max_len < 1) throw std::invalid_argument("decode: max_len must be >= 1");
    if (c.strategy == Strategy::kBeam && c.beam_width < 1)
        throw std::invalid_argument("decode: beam_width must be >= 1");
}

std::unordered_set<std::string> top_n_tokens(const TokenCounter& tc, int n) {
    std::unordered_set<std::string> out;
    for (size_t idx : tc.ranked()) {
        if (static_cast<int>(out.size()) >= n) break;
        out.insert(tc.tokens[idx]);
    }
    return out;
}

std::string surface_of(int id, const std::map<int, std::string>& oov_map,
                       const tokenizer::Vocabulary& vocab) {
    if (vocab.is_oov_id(id)) {
        auto it = oov_map.find(id - vocab.oov_base);
        if (it != oov_map.end()) return it->second;
    }
    return vocab.token(id);
}

int argmax_lowest_id(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = static_cast<int>(i);
    return best;
}

TraceStep make_trace_step(const std::vector<int>& prefix, const std::vector<double>& model_dist,
                          const std::vector<double>& feedback, const std::vector<double>& final_p,
                          int chosen, const std::map<int, std::string>& oov_map,
                          const tokenizer::Vocabulary& vocab) {
    TraceStep step;
    step.prefix.reserve(prefix.size());
    for (int id : prefix) step.prefix.push_back(surface_of(id, oov_map, vocab));
    std::vector<int> order(final_p.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return final_p[a] > final_p[b]; });
    const size_t top = std::min<size_t>(10, order.size());
    for (size_t r = 0; r < top; ++r) {
        const int id = order[r];
        TraceCandidate c;
        c.token = surface_of(id, oov_map, vocab);
        c.model_prob = model_dist[id];
        c.rf_score = feedback.empty() ? 0.0 : feedback[id];
        c.final_prob = final_p[id];
        step.top10.push_back(std::move(c));
    }
    step.chosen = surface_of(chosen, oov_map, vocab);
    return step;
}

}  // namespace

std::unordered_set<std::string> build_stopwords(const std::vector<corpus::RawPair>& train, int n) {
    if (n < 0) throw std::invalid_argument("stopwords: n must be >= 0");
    TokenCounter tc;
    for (const auto& pair : train)
        for (const auto& tok : tokenizer::tokenize(pair.code)) tc.add(tok);
    return top_n_tokens(tc, n);
}

std::unordered_set<std::string> build_stopwords_from_index(const retrieval::RetrievalIndex& index,
                                                           int n) {
    if (n < 0) throw std::invalid_argument("stopwords: n must be >= 0");
    TokenCounter tc;
    for (const auto& code : index.doc_codes)
        for (const auto& tok : code) tc.add(tok);
    return top_n_tokens(tc, n);
}

double token_freq(const std::string& token, const std::vector<std::string>& doc) {
    if (doc.empty()) return 0.0;
    const auto n = std::count(doc.begin(), doc.end(), token);
    return static_cast<double>(n) / static_cast<double>(doc.size());
}

int repetition_penalty(const std::vector<std::string>& prefix, const std::string& token) {
    return std::find(prefix.begin(), prefix.end(), token) == prefix.end() ? 1 : 0;
}

FeedbackContext relevance_feedback(const std::vector<std::string>& query_tokens,
                                   const retrieval::RetrievalIndex& index,
                                   const std::unordered_set<std::string>& stopwords, int k) {
    if (k < 1) throw std::invalid_argument("feedback: k must be >= 1");
    FeedbackContext fb;
    fb.stopwords = stopwords;
    fb.stopwords.insert(tokenizer::kPad);
    fb.stopwords.insert(tokenizer::kSos);
    fb.stopwords.insert(tokenizer::kEos);
    fb.stopwords.insert(tokenizer::kUnk);
    fb.scored_docs = retrieval::retrieve_top_k(index, query_tokens, k);
    for (const auto& doc : fb.scored_docs) {
        if (doc.code_tokens.empty()) continue;
        const double inv_len = 1.0 / static_cast<double>(doc.code_tokens.size());
        std::unordered_map<std::string, int> counts;
        for (const auto& tok : doc.code_tokens) ++counts[tok];
        for (const auto& [tok, cnt] : counts) {
            if (fb.stopwords.count(tok)) continue;
            fb.rf_scores[tok] += cnt * inv_len * doc.score;
        }
    }
    for (const auto& [tok, score] : fb.rf_scores) fb.rf_sum += score;
    return fb;
}

std::vector<double> interpolate(const std::vector<double>& model_dist, const FeedbackContext& fb,
                                const std::vector<int>& prefix_ids,
                                const std::map<int, std::string>& oov_map,
                                const tokenizer::Vocabulary& vocab, const DecodingConfig& config,
                                std::vector<double>* feedback_out) {
    if (config.lambda < 0.0 || config.lambda > 1.0)
        throw std::invalid_argument("interpolate: lambda must be in [0, 1]");
    if (feedback_out) feedback_out->assign(model_dist.size(), 0.0);
    if (config.lambda == 1.0) return model_dist;  // exact ablation reduction

    std::unordered_set<std::string> seen;
    for (int id : prefix_ids) seen.insert(surface_of(id, oov_map, vocab));
    const double lam = config.lambda;
    const double rf_scale = (config.normalize_rf && fb.rf_sum > 0.0) ? 1.0 / fb.rf_sum : 1.0;
    std::vector<double> out(model_dist.size());
    double z = 0.0;
    for (size_t id = 0; id < out.size(); ++id) {
        const std::string sur = surface_of(static_cast<int>(id), oov_map, vocab);
        double rf = 0.0;
        if (!seen.count(sur)) rf = fb.rf(sur) * rf_scale;
        if (feedback_out) (*feedback_out)[id] = rf;
        const double u = lam * model_dist[id] + (1.0 - lam) * rf;
        out[id] = u;
        z += u;
    }
    if (z <= 0.0) {
        std::fprintf(stderr,
                     "warning: interpolate mixture has zero mass; falling back to the model "
                     "distribution\n");
        return model_dist;
    }
    for (double& x : out) x /= z;
    return out;
}

namespace {

struct BeamEntry {
    std::vector<int> ids;
    double logp = 0.0;
    bool done = false;
};

}  // namespace

GenerationResult generate(const std::string& query, const model::Transformer& model,
                          const retrieval::RetrievalIndex* index,
                          const tokenizer::Vocabulary& vocab, const DecodingConfig& config) {
    check_config(config);
    const auto query_tokens = tokenizer::tokenize(query);
    if (query_tokens.empty()) throw std::invalid_argument("generate: empty query");

    std::vector<std::string> src_tokens = query_tokens;
    if (config.naive_top1 && index != nullptr) {
        const auto top = retrieval::retrieve_top_k(*index, query_tokens, 1);
        if (!top.empty()) {
            src_tokens.push_back(tokenizer::kEos);
            src_tokens.insert(src_tokens.end(), top[0].code_tokens.begin(),
                              top[0].code_tokens.end());
        }
    }
    const auto enc = tokenizer::encode_source(src_tokens, vocab);
    const model::Memory mem = model.encode(enc.ids);

    FeedbackContext fb;
    if (index != nullptr && config.lambda < 1.0)
        fb = relevance_feedback(query_tokens, *index,
                                build_stopwords_from_index(*index, config.stopword_n), config.k);

    // leave room for the <sos> slot in the model's position table
    const int step_cap = std::min(config.max_len, model.config().max_len - 1);
    GenerationResult res;
    std::vector<int> final_ids;

    if (config.strategy == Strategy::kGreedy) {
        std::vector<int> prefix = {vocab.sos_id};
        std::vector<double> feedback;
        bool ended = false;
        for (int step = 0; step < step_cap && !ended; ++step) {
            const auto so = model.decode_step(mem, prefix);
            const auto m = model::copy_mix(so, mem.src_ids);
            const auto p = interpolate(m, fb, prefix, enc.oov_map, vocab, config, &feedback);
            const int next = argmax_lowest_id(p);
            res.trace.push_back(make_trace_step(prefix, m, feedback, p, next, enc.oov_map, vocab));
            prefix.push_back(next);
            if (next == vocab.eos_id) ended = true;
        }
        res.truncated = !ended;
        final_ids = std::move(prefix);
    } else {
        std::vector<BeamEntry> beams{{{vocab.sos_id}, 0.0, false}};
        for (int step = 0; step < step_cap; ++step) {
            bool all_done = true;
            std::vector<BeamEntry> expanded;
            for (const BeamEntry& beam : beams) {
                if (beam.done) {
                    expanded.push_back(beam);
                    continue;
                }
                all_done = false;
                const auto so = model.decode_step(mem, beam.ids);
                const auto m = model::copy_mix(so, mem.src_ids);
                const auto p = interpolate(m, fb, beam.ids, enc.oov_map, vocab, config);
                std::vector<int> order(p.size());
                for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
                std::stable_sort(order.begin(), order.end(),
                                 [&](int a, int b) { return p[a] > p[b]; });
                const int width = std::min<int>(config.beam_width, static_cast<int>(order.size()));
                for (int r = 0; r < width; ++r) {
                    BeamEntry e = beam;
                    e.ids.push_back(order[r]);
                    e.logp += std::log(std::max(p[order[r]], 1e-300));
                    e.done = order[r] == vocab.eos_id;
                    expanded.push_back(std::move(e));
                }
            }
            if (all_done) break;
            std::stable_sort(expanded.begin(), expanded.end(),
                             [](const BeamEntry& a, const BeamEntry& b) {
                                 if (a.logp != b.logp) return a.logp > b.logp;
                                 if (a.ids.size() != b.ids.size())
                                     return a.ids.size() < b.ids.size();
                                 return a.ids < b.ids;
                             });
            if (static_cast<int>(expanded.size()) > config.beam_width)
                expanded.resize(static_cast<size_t>(config.beam_width));
            beams = std::move(expanded);
        }
        const BeamEntry* best = nullptr;
        for (const BeamEntry& beam : beams)
            if (beam.done && (best == nullptr || beam.logp > best->logp)) best = &beam;
        if (best == nullptr) {
            best = &beams.front();
            res.truncated = true;
        }
        final_ids = best->ids;
    }

    res.ids.clear();
    for (int id : final_ids)
        if (id != vocab.sos_id && id != vocab.eos_id && id != vocab.pad_id) res.ids.push_back(id);
    res.tokens = tokenizer::decode_ids_tokens(final_ids, vocab, enc.oov_map);
    res.code = tokenizer::decode_ids(final_ids, vocab, enc.oov_map);
    return res;
}

std::string trace_to_jsonl(const std::vector<TraceStep>& trace) {
    std::ostringstream os;
    for (const TraceStep& step : trace) {
        nlohmann::json rec;
        rec["prefix"] = step.prefix;
        nlohmann::json cands = nlohmann::json::array();
        for (const TraceCandidate& c : step.top10) {
            cands.push_back({{"token", c.token},
                             {"model_prob", c.model_prob},
                             {"rf_score", c.rf_score},
                             {"final_prob", c.final_prob}});
        }
        rec["top10"] = std::move(cands);
        rec["chosen"] = step.chosen;
        os << rec.dump() << "\n";
    }
    return os.str();
}

}  // namespace relgen::prf
