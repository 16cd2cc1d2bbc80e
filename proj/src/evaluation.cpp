#include "relgen/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "relgen/util.hpp"

namespace relgen::evaluation {

namespace {

constexpr double kEps = 1e-9;

// modified n-gram precision: clipped matches / candidate n-gram count
double ngram_precision(const std::vector<std::string>& cand, const std::vector<std::string>& ref,
                       size_t n) {
    std::map<std::vector<std::string>, int> ref_counts;
    for (size_t i = 0; i + n <= ref.size(); ++i)
        ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)] += 1;

    std::map<std::vector<std::string>, int> cand_counts;
    for (size_t i = 0; i + n <= cand.size(); ++i)
        cand_counts[std::vector<std::string>(cand.begin() + i, cand.begin() + i + n)] += 1;

    long long clipped = 0;
    long long total = 0;
    for (const auto& [gram, cnt] : cand_counts) {
        total += cnt;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) clipped += std::min(cnt, it->second);
    }
    if (clipped == 0) return kEps / static_cast<double>(total);
    return static_cast<double>(clipped) / static_cast<double>(total);
}

}  // namespace

double sentence_bleu(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference) {
    if (reference.empty()) throw std::invalid_argument("sentence_bleu: empty reference");
    if (candidate.empty()) return 0.0;

    // orders the candidate is too short to form are skipped, so identity
    // scores 1.0 even for sequences shorter than 4 tokens
    double log_sum = 0.0;
    int orders = 0;
    for (size_t n = 1; n <= 4 && n <= candidate.size(); ++n) {
        log_sum += std::log(ngram_precision(candidate, reference, n));
        orders += 1;
    }
    double geo = std::exp(log_sum / orders);

    double bp = 1.0;
    if (candidate.size() < reference.size())
        bp = std::exp(1.0 - static_cast<double>(reference.size()) /
                                static_cast<double>(candidate.size()));
    return geo * bp;
}

EvalReport evaluate_system(const std::vector<std::vector<std::string>>& predictions,
                           const std::vector<std::vector<std::string>>& references,
                           const std::string& name, const std::string& config_snapshot) {
    if (predictions.size() != references.size())
        throw std::invalid_argument("evaluate_system: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(references.size()) +
                                    " references");
    EvalReport report;
    report.system_name = name;
    report.config_snapshot = config_snapshot;
    report.per_pair_bleu.assign(predictions.size(), 0.0);

    const int n = static_cast<int>(predictions.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
        report.per_pair_bleu[i] = sentence_bleu(predictions[i], references[i]);

    double sum = 0.0;
    for (double s : report.per_pair_bleu) sum += s;
    report.mean_bleu = predictions.empty() ? 0.0 : sum / predictions.size();
    return report;
}

TTestResult paired_ttest(const EvalReport& a, const EvalReport& b, int num_comparisons) {
    if (a.per_pair_bleu.size() != b.per_pair_bleu.size())
        throw std::invalid_argument("paired_ttest: reports have different pair counts");
    const size_t n = a.per_pair_bleu.size();
    if (n < 2) throw std::invalid_argument("paired_ttest: need at least 2 pairs");
    if (num_comparisons < 1) throw std::invalid_argument("paired_ttest: num_comparisons >= 1");

    std::vector<double> diff(n);
    for (size_t i = 0; i < n; ++i) diff[i] = a.per_pair_bleu[i] - b.per_pair_bleu[i];
    double mean = 0.0;
    for (double d : diff) mean += d;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double d : diff) var += (d - mean) * (d - mean);
    var /= static_cast<double>(n - 1);

    TTestResult r;
    const double alpha = 0.05 / num_comparisons;
    if (var == 0.0) {
        if (mean == 0.0) {
            r.t_stat = 0.0;
            r.p_value = 1.0;
            r.significant_at_95 = false;
        } else {
            r.degenerate = true;
            r.t_stat = mean > 0 ? std::numeric_limits<double>::infinity()
                                : -std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
            r.significant_at_95 = true;
        }
        return r;
    }

    r.t_stat = mean / std::sqrt(var / static_cast<double>(n));
    boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t_stat)));
    r.significant_at_95 = r.p_value < alpha;
    return r;
}

void save_report(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    j["system"] = report.system_name;
    j["config"] = report.config_snapshot;
    j["mean_bleu"] = report.mean_bleu;
    j["per_pair_bleu"] = report.per_pair_bleu;
    write_text_file(path, j.dump(2));
}

EvalReport load_report(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_text_file(path));
    EvalReport r;
    r.system_name = j["system"].get<std::string>();
    r.config_snapshot = j["config"].get<std::string>();
    r.mean_bleu = j["mean_bleu"].get<double>();
    r.per_pair_bleu = j["per_pair_bleu"].get<std::vector<double>>();
    return r;
}

}  // namespace relgen::evaluation
