#pragma once

// Foundational domain types and the exact probability/entropy primitives the
// rest of the library is built on. Everything here is a pure function on
// immutable inputs; all probability arithmetic is double precision.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace churn {

/// One class label: position in its LabelSpace plus a display name.
struct LabelId {
    int index = -1;
    std::string name;
};

/// Ordered, immutable set of K >= 2 labels. Label order is fixed for the
/// lifetime of an experiment; every per-class vector in the library is laid
/// out in this order.
class LabelSpace {
public:
    LabelSpace() = default;
    explicit LabelSpace(std::vector<std::string> names);

    int k() const { return static_cast<int>(labels_.size()); }
    const LabelId& label(int index) const { return labels_.at(static_cast<size_t>(index)); }
    const std::vector<LabelId>& labels() const { return labels_; }
    std::optional<int> find(std::string_view name) const;

    bool operator==(const LabelSpace& other) const;

private:
    std::vector<LabelId> labels_;
    std::unordered_map<std::string, int> by_name_;
};

/// Sparse feature vector: (index, weight) pairs, sorted by index, unique.
using SparseVec = std::vector<std::pair<int32_t, double>>;

/// One labeled utterance/point. `features` indices are < the featurizer
/// dimensionality of the owning Dataset.
struct Example {
    std::string id;
    SparseVec features;
    int gold = -1;
    std::string text;
};

/// A label space plus examples with unique ids.
struct Dataset {
    LabelSpace labels;
    int dim = 0;
    std::vector<Example> examples;

    size_t size() const { return examples.size(); }
    /// Throws if ids collide, a gold index is out of range, or a feature
    /// index is >= dim.
    void validate() const;
};

/// Point on the K-class probability simplex.
struct ProbVector {
    std::vector<double> probs;

    int k() const { return static_cast<int>(probs.size()); }
    double operator[](size_t i) const { return probs[i]; }

    /// Enforces the simplex invariants: entries >= 0, sum within 1e-9 of 1.
    void validate() const;
    /// Validating factory for values coming from outside the library.
    static ProbVector checked(std::vector<double> p);
};

/// Tally of predicted labels for one example. `total` is the number of
/// observation events; tally() keeps total == sum of counts. (The two can be
/// constructed apart to reproduce published tallies whose cells omit runs.)
struct LabelCounts {
    std::vector<int64_t> counts;  // indexed by label, zeros allowed
    int64_t total = 0;

    void tally(int label);
    static LabelCounts from_labels(const std::vector<int>& labels, int k);
};

/// Shannon entropy in nats of the empirical label distribution:
/// -sum_j (c_j/total) ln(c_j/total) over labels with c_j > 0.
/// Returns 0 when a single label holds all counts.
/// Throws std::invalid_argument("no observations") when total < 1.
double entropy_nats(const LabelCounts& counts);

/// Index of the largest probability; ties break to the lowest index so the
/// result is deterministic across runs and platforms.
int argmax_label(const ProbVector& p);

/// Divides a non-negative vector by its sum.
/// Throws std::invalid_argument("degenerate distribution") if the sum is 0.
ProbVector normalize(const std::vector<double>& v);

}  // namespace churn
