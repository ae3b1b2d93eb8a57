#pragma once

// Instability metrics and protocol aggregates: multi-run and single-run label
// entropy, gold-probability statistics, entropy-reduction percentages and the
// high-entropy subset machinery.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "churn/core.hpp"
#include "churn/training.hpp"

namespace churn {

/// Per-example instability measurements.
struct ExampleInstability {
    std::string id;
    double le_m = 0.0;    // entropy of final predicted labels across runs (nats)
    double le_s = 0.0;    // entropy across one run's eval checkpoints (nats)
    double mu_m = 0.0;    // mean gold-label probability across runs
    double sigma_m = 0.0; // population std of gold-label probability across runs
    LabelCounts pred_counts;
};

/// One row of the strategy comparison table.
struct StrategyReport {
    std::string strategy;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    double sum_le_m = 0.0;
    double sum_le_s = 0.0;
    double sum_le_m_high = 0.0;
    double sum_le_s_high = 0.0;
    std::optional<double> delta_le_m_pct;
    std::optional<double> delta_le_s_pct;
    std::optional<double> delta_le_m_high_pct;
    std::optional<double> delta_le_s_high_pct;
    std::optional<double> pct_of_ensemble;
};

/// Multi-run instability from each run's final eval snapshot: pred_counts and
/// le_m from predicted labels, mu_m/sigma_m from gold-label probabilities.
/// Requires >= 2 traces over one eval set. le_s is left at 0 here.
std::vector<ExampleInstability> le_multi(const std::vector<RunTrace>& traces);

/// Per-example label entropy across one run's eval snapshots, in trace
/// eval order. Throws "insufficient checkpoints" with < 2 eval snapshots.
std::vector<double> le_single(const RunTrace& trace);

/// 100 * (sum_control - sum_method) / sum_control. Negative when the method
/// increased total entropy. Throws "control has zero entropy" on zero control.
double delta_le(double sum_method, double sum_control);

/// 100 * delta_method / delta_ensemble, or absent when the ensemble delta is 0.
std::optional<double> pct_of_ensemble(double delta_method, double delta_ensemble);

/// Ids whose CONTROL le_m is strictly over the threshold. The same id set is
/// reused when scoring every other strategy.
std::set<std::string> high_entropy_subset(const std::vector<ExampleInstability>& control,
                                          double threshold = 0.56);

/// Mean and population std of the final eval accuracies across runs.
std::pair<double, double> accuracy_stats(const std::vector<RunTrace>& traces);

/// Pearson correlation coefficient. Throws on length mismatch, < 2 points or
/// zero variance.
double correlation(const std::vector<double>& xs, const std::vector<double>& ys);

/// le_multi plus le_s filled from the designated run (lowest seed).
std::vector<ExampleInstability> compute_instability(const std::vector<RunTrace>& traces);

/// Per-example metrics CSV: example_id, gold, le_m, le_s, mu_m, sigma_m,
/// pred_counts as semicolon-separated label:count pairs.
void save_per_example_csv(const std::filesystem::path& path,
                          const std::vector<ExampleInstability>& rows, const Dataset& eval,
                          const LabelSpace& labels);

/// Strategy comparison CSV mirroring the published table columns; percentage
/// columns rounded to one decimal with full-precision duplicates alongside.
void save_strategy_report_csv(const std::filesystem::path& path,
                              const std::vector<StrategyReport>& rows);

}  // namespace churn
