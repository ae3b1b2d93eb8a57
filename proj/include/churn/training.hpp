#pragma once

// Instrumented training loop: epoching, seeded shuffling, minibatch Adam,
// eval/teacher snapshot capture, the SWA schedule, and trace persistence.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "churn/core.hpp"
#include "churn/model.hpp"
#include "churn/softlabel.hpp"

namespace churn {

struct TrainConfig {
    double lr = 1e-4;
    int epochs = 5;
    int batch_size = 256;
    double weight_decay = 0.0;
    uint64_t seed = 0;
    Layout arch;

    /// Eval snapshots per epoch, taken at epoch-fraction boundaries.
    int capture_eval_every = 1;
    /// Record full eval probability vectors in snapshots.
    bool store_eval_probs = false;

    /// Teacher instrumentation: full train-set inference passes for temporal
    /// averaging, every capture_train_stride optimization steps once
    /// step > burn_in_steps.
    bool capture_train_probs = false;
    int capture_train_stride = 1;
    int64_t burn_in_steps = 0;
    /// One train-set probability snapshot of the final model (ensemble teachers).
    bool capture_final_train_probs = false;

    double smoothing_alpha = 0.0;
    double temperature = 0.5;
    bool swa_enabled = false;

    /// Stable fingerprint of every trajectory-relevant field.
    std::string hash() const;
};

enum class Split { train, eval };

/// Predictions for every example of one split after a given optimization step.
/// Records are in dataset order; `probs` is empty unless capture was enabled.
struct PredictionSnapshot {
    int64_t step = 0;
    Split split = Split::eval;
    std::vector<int> pred;
    std::vector<double> gold_prob;
    std::vector<double> probs;  // n * k row-major, optional
};

/// Everything one training run produced.
struct RunTrace {
    std::string run_id;
    uint64_t seed = 0;
    std::string config_hash;
    std::vector<std::string> label_names;
    std::vector<std::string> train_ids;
    std::vector<std::string> eval_ids;
    std::vector<PredictionSnapshot> snapshots;
    ModelParams final_params;
    double final_eval_accuracy = 0.0;
    /// Mean cross-entropy against gold on the eval split, one point per eval
    /// snapshot. Input to select_burn_in.
    std::vector<std::pair<int64_t, double>> eval_loss_curve;

    const PredictionSnapshot& final_eval_snapshot() const;
    std::vector<const PredictionSnapshot*> eval_snapshots() const;
    std::vector<const PredictionSnapshot*> train_snapshots() const;
};

/// Trains one model. Targets come from `soft_targets` when non-null
/// (must cover every train example), else one-hot gold labels.
RunTrace train_run(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                   const SoftLabelTable* soft_targets = nullptr);

/// One train_run per seed, optionally fanned out over `jobs` workers.
/// Traces are bitwise independent of worker count. Seeds must be distinct.
std::vector<RunTrace> run_seeds(const TrainConfig& config, const Dataset& train,
                                const Dataset& eval, const SoftLabelTable* soft_targets,
                                const std::vector<uint64_t>& seeds, int jobs = 1);

/// Smallest step after which the validation loss stays within
/// (1 + delta) * final loss, delta = 0.05.
int64_t select_burn_in(const std::vector<std::pair<int64_t, double>>& loss_curve);

// Trace directory: manifest.json, snapshots.csv (step, split, example_id,
// pred_label, gold_prob), probs.bin (little-endian f64 K-vectors in example
// order per captured snapshot), params.chrn.
void save_trace(const std::filesystem::path& dir, const RunTrace& trace);
RunTrace load_trace(const std::filesystem::path& dir);

/// Runs `fn(i)` for i in [0, n) on `jobs` workers. fn must be safe to call
/// concurrently for distinct i.
void parallel_for_tasks(int jobs, int n, const std::function<void(int)>& fn);

}  // namespace churn
