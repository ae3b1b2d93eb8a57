#include "churn/core.hpp"

#include <cmath>

namespace churn {

LabelSpace::LabelSpace(std::vector<std::string> names) {
    if (names.size() < 2) {
        throw std::invalid_argument("LabelSpace requires at least 2 labels");
    }
    labels_.reserve(names.size());
    for (size_t i = 0; i < names.size(); ++i) {
        if (names[i].empty()) {
            throw std::invalid_argument("label name must be non-empty");
        }
        if (!by_name_.emplace(names[i], static_cast<int>(i)).second) {
            throw std::invalid_argument("duplicate label name: " + names[i]);
        }
        labels_.push_back(LabelId{static_cast<int>(i), std::move(names[i])});
    }
}

std::optional<int> LabelSpace::find(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
}

bool LabelSpace::operator==(const LabelSpace& other) const {
    if (labels_.size() != other.labels_.size()) return false;
    for (size_t i = 0; i < labels_.size(); ++i) {
        if (labels_[i].name != other.labels_[i].name) return false;
    }
    return true;
}

void Dataset::validate() const {
    std::unordered_map<std::string, int> seen;
    for (const auto& ex : examples) {
        if (ex.id.empty()) throw std::invalid_argument("example id must be non-empty");
        if (!seen.emplace(ex.id, 1).second) {
            throw std::invalid_argument("duplicate example id: " + ex.id);
        }
        if (ex.gold < 0 || ex.gold >= labels.k()) {
            throw std::invalid_argument("gold label out of range for example " + ex.id);
        }
        for (const auto& [idx, w] : ex.features) {
            if (idx < 0 || idx >= dim) {
                throw std::invalid_argument("feature index out of range for example " + ex.id);
            }
            if (!std::isfinite(w)) {
                throw std::invalid_argument("non-finite feature weight for example " + ex.id);
            }
        }
    }
}

void ProbVector::validate() const {
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw std::invalid_argument("probability entry < 0 or NaN");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("probabilities do not sum to 1");
    }
}

ProbVector ProbVector::checked(std::vector<double> p) {
    ProbVector out{std::move(p)};
    out.validate();
    return out;
}

void LabelCounts::tally(int label) {
    if (label < 0) throw std::invalid_argument("negative label index");
    if (static_cast<size_t>(label) >= counts.size()) {
        counts.resize(static_cast<size_t>(label) + 1, 0);
    }
    ++counts[static_cast<size_t>(label)];
    ++total;
}

LabelCounts LabelCounts::from_labels(const std::vector<int>& labels, int k) {
    LabelCounts out;
    out.counts.assign(static_cast<size_t>(k), 0);
    for (int label : labels) out.tally(label);
    return out;
}

double entropy_nats(const LabelCounts& counts) {
    if (counts.total < 1) throw std::invalid_argument("no observations");
    int64_t seen = 0;
    double h = 0.0;
    const double total = static_cast<double>(counts.total);
    for (int64_t c : counts.counts) {
        if (c < 0) throw std::invalid_argument("negative count");
        if (c == 0) continue;
        seen += c;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    if (seen > counts.total) throw std::invalid_argument("counts exceed total");
    return h;
}

int argmax_label(const ProbVector& p) {
    if (p.probs.empty()) throw std::invalid_argument("empty probability vector");
    int best = 0;
    for (int i = 1; i < p.k(); ++i) {
        if (p.probs[static_cast<size_t>(i)] > p.probs[static_cast<size_t>(best)]) best = i;
    }
    return best;
}

ProbVector normalize(const std::vector<double>& v) {
    double sum = 0.0;
    for (double x : v) {
        if (!(x >= 0.0)) throw std::invalid_argument("negative entry");
        sum += x;
    }
    if (sum <= 0.0) throw std::invalid_argument("degenerate distribution");
    ProbVector out;
    out.probs.reserve(v.size());
    for (double x : v) out.probs.push_back(x / sum);
    return out;
}

}  // namespace churn
