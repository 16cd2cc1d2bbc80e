#pragma once

#include <string>
#include <vector>

namespace relgen::evaluation {

// Sentence BLEU-4: geometric mean of modified n-gram precisions (n = 1..4)
// with an epsilon floor (1e-9) on zero-count precisions, times the brevity
// penalty exp(1 - |ref|/|cand|) when the candidate is shorter. Empty
// candidate scores 0; reference must be non-empty.
double sentence_bleu(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference);

struct EvalReport {
    std::string system_name;
    std::string config_snapshot;
    std::vector<double> per_pair_bleu;
    double mean_bleu = 0.0;
};

// Per-pair sentence BLEU averaged over the dataset. Pair scoring is
// dispatched across threads; aggregation order is by pair index.
EvalReport evaluate_system(const std::vector<std::vector<std::string>>& predictions,
                           const std::vector<std::vector<std::string>>& references,
                           const std::string& name, const std::string& config_snapshot = "");

struct TTestResult {
    double t_stat = 0.0;
    double p_value = 1.0;
    bool significant_at_95 = false;
    bool degenerate = false;  // zero variance with nonzero mean difference
};

// Two-sided paired t-test on per-pair BLEU differences; the significance
// threshold is 0.05 / num_comparisons (Bonferroni).
TTestResult paired_ttest(const EvalReport& a, const EvalReport& b, int num_comparisons = 1);

void save_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);

}  // namespace relgen::evaluation
