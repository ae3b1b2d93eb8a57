#pragma once

// Miniature deterministic differentiable classifier: hashing bag-of-words
// featurizer, linear or one-hidden-layer tanh network with softmax output,
// cross-entropy against soft targets, analytic gradients, Adam with optional
// decoupled weight decay, and uniform parameter averaging.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "churn/core.hpp"

namespace churn {

/// Architecture descriptor. hidden_dim == 0 means a plain linear model.
struct Layout {
    int input_dim = 0;
    int hidden_dim = 0;
    int output_dim = 0;

    /// Flat parameter count for the canonical order
    /// (W1 row-major, b1, then W2 row-major, b2 when hidden_dim > 0).
    size_t param_count() const;
    bool operator==(const Layout&) const = default;
};

/// Flat parameter vector in the canonical Layout order.
struct ModelParams {
    Layout layout;
    std::vector<double> values;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    int64_t t = 0;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    static AdamState init(size_t n_params, double lr, double weight_decay);
};

/// Training target on the probability simplex (one-hot, smoothed or distilled).
struct SoftLabel {
    ProbVector target;
};

/// Hashing bag-of-words. Lowercased ASCII-alphanumeric tokens, each hashed
/// with 64-bit FNV-1a over (salt || token) to index hash % dim; +1 per
/// occurrence, then every weight is scaled by 1/sqrt(total token count).
/// dim must be a power of two >= 2. Empty text yields an empty vector.
SparseVec featurize(std::string_view text, int dim, uint64_t salt);

struct ForwardResult {
    std::vector<double> logits;
    ProbVector probs;
};

/// logits = W1^T x + b1 (linear) or W2^T tanh(W1^T x + b1) + b2 (MLP);
/// probs = softmax(logits) with max-subtraction.
/// Throws std::runtime_error("numeric overflow") on non-finite output.
ForwardResult forward(const ModelParams& params, const SparseVec& features);

/// -sum_k t_k ln(max(p_k, 1e-12)).
double xent_soft(const ProbVector& probs, const SoftLabel& target);

/// Exact analytic gradient of xent_soft(forward(params, x), target) with
/// respect to every parameter, in the flat ModelParams order.
std::vector<double> backward(const ModelParams& params, const SparseVec& features,
                             const SoftLabel& target);

/// Standard Adam with bias correction. When weight_decay > 0, decoupled decay
/// params -= lr * weight_decay * params is applied before the Adam update.
void adam_step(AdamState& state, ModelParams& params, const std::vector<double>& grad);

/// Elementwise arithmetic mean. Throws on empty input or layout mismatch.
ModelParams average_params(const std::vector<ModelParams>& list);

/// Weights uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero.
/// Draw order: W1 entries, then W2 entries.
ModelParams init_params(const Layout& layout, uint64_t seed);

// Checkpoint file: magic "CHRN", u16 format version, u32 D/H/K, then the
// values as a little-endian f64 array. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace churn
