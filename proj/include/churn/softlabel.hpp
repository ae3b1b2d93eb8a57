#pragma once

// Builders for every kind of "soft" training target: uniform label smoothing,
// temperature-scaled ensemble-averaged labels, and temperature-scaled
// temporal running-average labels.

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "churn/core.hpp"
#include "churn/model.hpp"

namespace churn {

struct RunTrace;  // training.hpp

/// Predicted probability vectors for a set of examples, row-major n x k.
struct ProbTable {
    std::vector<std::string> ids;
    int k = 0;
    std::vector<double> probs;  // ids.size() * k

    ProbVector row(size_t i) const;
};

/// Streaming mean of probability tables, one accumulated vector per example.
struct RunningMeanProbs {
    std::vector<std::string> ids;
    int k = 0;
    std::vector<double> mean;  // ids.size() * k
    int64_t samples_seen = 0;
};

/// Map from example id to its training target, plus how it was built.
struct SoftLabelTable {
    enum class Provenance { uniform, ensemble, temporal };

    Provenance provenance = Provenance::uniform;
    double alpha = 0.0;        // uniform
    double temperature = 1.0;  // ensemble / temporal
    int64_t burn_in = 0;       // temporal
    int capture_stride = 1;    // temporal
    int source_models = 0;     // ensemble: model count; temporal: captures averaged

    std::vector<std::string> ids;
    std::vector<ProbVector> targets;

    const ProbVector* find(const std::string& id) const;
    void rebuild_index();

private:
    std::unordered_map<std::string, size_t> index_;
};

/// y_ls = (1-alpha)*onehot(gold) + alpha/K.
SoftLabel uniform_smooth(int gold, int k, double alpha);

/// Elementwise power T followed by renormalization; exact zeros stay zero.
/// T < 1 raises the entropy of any non-degenerate input.
ProbVector temperature_scale(const ProbVector& p, double temperature);

/// Per example, the elementwise mean across models, then temperature_scale.
/// Every table must cover the same example set.
SoftLabelTable ensemble_soft_labels(const std::vector<ProbTable>& per_model, double temperature);

/// Per example, the running mean over the teacher's train-set captures with
/// step > burn_in, then temperature_scale.
/// Throws std::runtime_error("burn-in exhausts trace") when no capture survives.
SoftLabelTable temporal_soft_labels(const RunTrace& teacher, int64_t burn_in, double temperature);

/// mean_{n+1} = mean_n + (x - mean_n)/(n+1), per entry.
void running_mean_update(RunningMeanProbs& state, const ProbTable& table);

/// Uniform-smoothing table covering every example of a dataset.
SoftLabelTable uniform_soft_labels(const Dataset& data, double alpha);

// CSV persistence: a leading "# provenance=..." line, a header row, then one
// row per example with K probability columns in label order.
void save_soft_labels(const std::filesystem::path& path, const SoftLabelTable& table,
                      const LabelSpace& labels);
SoftLabelTable load_soft_labels(const std::filesystem::path& path);

}  // namespace churn
