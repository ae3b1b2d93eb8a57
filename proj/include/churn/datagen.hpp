#pragma once

// Data sources: a synthetic ambiguous-classification generator with a
// controllable instability level, and JSONL loaders for external corpora.

#include <cstdint>
#include <filesystem>
#include <utility>

#include "churn/core.hpp"

namespace churn {

/// Synthetic mixture spec. Centroids sit at scaled simplex vertices (scaled
/// basis vectors, so dim >= K) with all pairwise distances equal to
/// `separation` in units of the unit cluster std. `ambiguous_frac` of the
/// points are resampled around the midpoint of two random centroids (gold
/// label from the first); `label_noise` of the points are uniformly
/// re-labeled.
struct SynthSpec {
    int k = 6;
    int n_per_class = 200;
    int dim = 16;
    double separation = 4.0;
    double label_noise = 0.0;
    double ambiguous_frac = 0.0;
    uint64_t seed = 0;

    void validate() const;
};

/// Deterministic 80/20 train/eval split by hash of example id.
std::pair<Dataset, Dataset> gen_synthetic(const SynthSpec& spec);

/// Loads a JSONL corpus; each line needs "id", "label", and either "text"
/// (run through the hashing featurizer) or "features" (a dense array, taken
/// verbatim). Errors name the offending line.
Dataset load_jsonl(const std::filesystem::path& path, int feat_dim = 4096, uint64_t salt = 0);

/// Writes the dataset in the same JSONL shape with dense "features" arrays.
void save_jsonl(const std::filesystem::path& path, const Dataset& data);

}  // namespace churn
