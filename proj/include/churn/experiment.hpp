#pragma once

// Orchestration behind the CLI: dataset fingerprints, resumable strategy
// execution into a per-strategy directory tree, and report emission
// (comparison table, per-example metrics, trajectory plot data).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "churn/datagen.hpp"
#include "churn/mitigation.hpp"

namespace churn {

inline constexpr const char* kToolVersion = "0.1.0";

/// FNV-1a over the train and eval JSONL bytes.
std::string dataset_fingerprint(const std::filesystem::path& train_path,
                                const std::filesystem::path& eval_path);

/// Writes `text` to `path` via a temp file and atomic rename.
void atomic_write(const std::filesystem::path& path, const std::string& text);

struct ExperimentPaths {
    std::filesystem::path root;

    std::filesystem::path strategy_dir(const std::string& name) const { return root / name; }
    std::filesystem::path manifest(const std::string& name) const {
        return strategy_dir(name) / "manifest.json";
    }
    std::filesystem::path traces_dir(const std::string& name) const {
        return strategy_dir(name) / "traces";
    }
    std::filesystem::path teachers_dir(const std::string& name) const {
        return strategy_dir(name) / "teachers";
    }
    std::filesystem::path softlabels_dir(const std::string& name) const {
        return strategy_dir(name) / "softlabels";
    }
};

/// Executes a strategy with resume support. Completed seeds recorded in the
/// strategy manifest are skipped; a manifest whose spec hash or dataset
/// fingerprint disagrees aborts with an explanation. Returns the number of
/// seeds actually trained (0 means the call was a no-op).
size_t run_strategy_to_dir(const ExperimentPaths& paths, const StrategySpec& spec,
                           const Dataset& train, const Dataset& eval,
                           const std::string& dataset_fp, int jobs);

struct ReportOptions {
    double high_entropy_threshold = 0.56;
    int top_k_trajectories = 4;
};

/// Reads every strategy directory under the experiment root, recomputes all
/// metrics from the persisted traces, and writes report.csv, per-example
/// metrics CSVs and trajectory plot data under out_dir.
void emit_report(const ExperimentPaths& paths, const Dataset& eval,
                 const std::filesystem::path& out_dir, const ReportOptions& options);

/// Strategy directories present under the experiment root, in table order.
std::vector<std::string> discover_strategies(const ExperimentPaths& paths);

}  // namespace churn
