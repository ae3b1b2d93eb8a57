#pragma once

// The six end-to-end strategies as named pipelines over the training and
// softlabel modules, producing comparable reports.

#include <cstdint>
#include <string>
#include <vector>

#include "churn/metrics.hpp"
#include "churn/softlabel.hpp"
#include "churn/training.hpp"

namespace churn {

enum class StrategyKind { control, l2, swa, uniform_ls, ensemble_eb, tgtss };

const char* strategy_name(StrategyKind kind);
StrategyKind strategy_from_name(const std::string& name);

/// Teacher seeds for the ensemble pool live in a range disjoint from any
/// plausible evaluation seed.
inline constexpr uint64_t kEnsembleTeacherSeedBase = 1'000'000'000'000ull;
/// A TGTSS teacher's seed is its student's seed XOR this constant.
inline constexpr uint64_t kTgtssTeacherSeedXor = 0x9e3779b97f4a7c15ull;

struct StrategySpec {
    StrategyKind kind = StrategyKind::control;
    TrainConfig base;
    std::vector<uint64_t> seeds;

    double weight_decay = 0.001;  // l2
    double alpha = 0.1;           // uniform_ls
    int n_models = 20;            // ensemble_eb teacher count
    int64_t burn_in = -1;         // tgtss; -1 selects from the teacher's loss curve
    double temperature = 0.5;     // ensemble_eb / tgtss
    bool shared_teacher = false;  // tgtss: one teacher-student pair feeds every student

    /// Fingerprint of kind + base config + kind-specific parameters
    /// (seed list excluded); guards resumed output directories.
    std::string hash() const;
    /// The per-run training config for evaluation (student) runs.
    TrainConfig student_config() const;
};

struct StrategyOutput {
    std::vector<RunTrace> traces;            // evaluated runs, one per seed
    std::vector<RunTrace> teacher_traces;    // ensemble pool or tgtss teachers
    std::vector<SoftLabelTable> soft_tables; // uniform/ensemble: one; tgtss: per pair
};

/// Runs a full strategy pipeline. Teachers and evaluation runs fan out over
/// `jobs` workers; outputs are bitwise independent of the worker count.
StrategyOutput run_strategy(const StrategySpec& spec, const Dataset& train, const Dataset& eval,
                            int jobs = 1);

/// Inputs to the comparison table, one per strategy.
struct StrategyEval {
    std::string name;
    std::vector<ExampleInstability> per_example;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
};

/// Builds the comparison table: deltas against control, percent-of-ensemble
/// when an ensemble row is present, and high-entropy-subset deltas over the
/// control's high-entropy ids. Rows are ordered control, ensemble, baselines,
/// tgtss. Throws when control is missing.
std::vector<StrategyReport> compare(const std::vector<StrategyEval>& evals,
                                    double high_entropy_threshold = 0.56);

}  // namespace churn
