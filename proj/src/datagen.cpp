#include "churn/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "churn/model.hpp"
#include "churn/rng.hpp"

namespace churn {

namespace {

using json = nlohmann::json;

std::string point_id(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "ex%06zu", i);
    return std::string(buf);
}

}  // namespace

void SynthSpec::validate() const {
    if (k < 2) throw std::invalid_argument("k must be >= 2");
    if (n_per_class < 5) throw std::invalid_argument("degenerate dataset");
    if (dim < k) throw std::invalid_argument("dim must be >= k for simplex centroids");
    if (separation < 0.0) throw std::invalid_argument("separation must be >= 0");
    if (label_noise < 0.0 || label_noise > 1.0 || ambiguous_frac < 0.0 || ambiguous_frac > 1.0) {
        throw std::invalid_argument("fractions must lie in [0,1]");
    }
}

std::pair<Dataset, Dataset> gen_synthetic(const SynthSpec& spec) {
    spec.validate();
    const size_t n = static_cast<size_t>(spec.k) * static_cast<size_t>(spec.n_per_class);
    const size_t d = static_cast<size_t>(spec.dim);

    // Scaled basis vectors: |c_i - c_j| = separation for every pair.
    const double scale = spec.separation / std::sqrt(2.0);
    auto centroid = [&](int cls, size_t coord) {
        return coord == static_cast<size_t>(cls) ? scale : 0.0;
    };

    std::vector<std::vector<double>> features(n, std::vector<double>(d));
    std::vector<int> gold(n);
    Rng feat_rng(spec.seed, /*stream=*/0);
    for (size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i / static_cast<size_t>(spec.n_per_class));
        gold[i] = cls;
        for (size_t c = 0; c < d; ++c) features[i][c] = centroid(cls, c) + feat_rng.normal();
    }

    // Ambiguous points: gaussian around the midpoint of two random centroids.
    {
        Rng amb_rng(spec.seed, /*stream=*/1);
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        amb_rng.shuffle(order);
        const size_t m = static_cast<size_t>(spec.ambiguous_frac * static_cast<double>(n) + 0.5);
        std::vector<size_t> chosen(order.begin(), order.begin() + static_cast<ptrdiff_t>(m));
        std::sort(chosen.begin(), chosen.end());
        for (size_t i : chosen) {
            const int a = static_cast<int>(amb_rng.bounded(static_cast<uint64_t>(spec.k)));
            int b = static_cast<int>(amb_rng.bounded(static_cast<uint64_t>(spec.k - 1)));
            if (b >= a) ++b;
            for (size_t c = 0; c < d; ++c) {
                features[i][c] = 0.5 * (centroid(a, c) + centroid(b, c)) + amb_rng.normal();
            }
            gold[i] = a;
        }
    }

    // Label noise: uniform re-label.
    {
        Rng noise_rng(spec.seed, /*stream=*/2);
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        noise_rng.shuffle(order);
        const size_t m = static_cast<size_t>(spec.label_noise * static_cast<double>(n) + 0.5);
        std::vector<size_t> chosen(order.begin(), order.begin() + static_cast<ptrdiff_t>(m));
        std::sort(chosen.begin(), chosen.end());
        for (size_t i : chosen) {
            gold[i] = static_cast<int>(noise_rng.bounded(static_cast<uint64_t>(spec.k)));
        }
    }

    std::vector<std::string> names;
    names.reserve(static_cast<size_t>(spec.k));
    for (int c = 0; c < spec.k; ++c) names.push_back("class_" + std::to_string(c));

    Dataset train, eval;
    train.labels = LabelSpace(names);
    eval.labels = train.labels;
    train.dim = spec.dim;
    eval.dim = spec.dim;
    for (size_t i = 0; i < n; ++i) {
        Example ex;
        ex.id = point_id(i);
        ex.gold = gold[i];
        ex.features.reserve(d);
        for (size_t c = 0; c < d; ++c) {
            ex.features.emplace_back(static_cast<int32_t>(c), features[i][c]);
        }
        // Split by id hash, not by position: stable under appended data.
        if (fnv1a64(ex.id) % 5 == 4) {
            eval.examples.push_back(std::move(ex));
        } else {
            train.examples.push_back(std::move(ex));
        }
    }
    train.validate();
    eval.validate();
    return {std::move(train), std::move(eval)};
}

Dataset load_jsonl(const std::filesystem::path& path, int feat_dim, uint64_t salt) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset: " + path.string());

    struct Row {
        std::string id;
        std::string label;
        std::string text;
        std::vector<double> features;
        bool has_text = false;
    };
    std::vector<Row> rows;
    std::set<std::string> ids;
    std::set<std::string> label_names;
    int dense_dim = -1;
    bool any_text = false, any_features = false;

    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": invalid JSON (" +
                                     e.what() + ")");
        }
        if (!obj.is_object()) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": expected an object");
        }
        Row row;
        if (!obj.contains("id") || !obj["id"].is_string()) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": missing \"id\"");
        }
        if (!obj.contains("label") || !obj["label"].is_string()) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": missing \"label\"");
        }
        row.id = obj["id"].get<std::string>();
        row.label = obj["label"].get<std::string>();
        if (!ids.insert(row.id).second) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": duplicate id \"" +
                                     row.id + "\"");
        }
        if (obj.contains("text") && obj["text"].is_string()) {
            row.text = obj["text"].get<std::string>();
            row.has_text = true;
            any_text = true;
        } else if (obj.contains("features") && obj["features"].is_array()) {
            row.features = obj["features"].get<std::vector<double>>();
            if (dense_dim < 0) dense_dim = static_cast<int>(row.features.size());
            if (static_cast<int>(row.features.size()) != dense_dim) {
                throw std::runtime_error("line " + std::to_string(line_no) +
                                         ": inconsistent feature length");
            }
            any_features = true;
        } else {
            throw std::runtime_error("line " + std::to_string(line_no) +
                                     ": need \"text\" or \"features\"");
        }
        label_names.insert(row.label);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("empty dataset file: " + path.string());
    if (any_text && any_features) {
        throw std::runtime_error("mixed text/features rows in " + path.string());
    }
    if (label_names.size() < 2) {
        throw std::runtime_error("dataset needs at least 2 distinct labels: " + path.string());
    }

    Dataset out;
    out.labels = LabelSpace(std::vector<std::string>(label_names.begin(), label_names.end()));
    out.dim = any_text ? feat_dim : dense_dim;
    out.examples.reserve(rows.size());
    for (auto& row : rows) {
        Example ex;
        ex.id = std::move(row.id);
        ex.gold = *out.labels.find(row.label);
        if (row.has_text) {
            ex.text = row.text;
            ex.features = featurize(row.text, feat_dim, salt);
        } else {
            ex.features.reserve(row.features.size());
            for (size_t c = 0; c < row.features.size(); ++c) {
                ex.features.emplace_back(static_cast<int32_t>(c), row.features[c]);
            }
        }
        out.examples.push_back(std::move(ex));
    }
    out.validate();
    return out;
}

void save_jsonl(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write dataset: " + path.string());
    for (const Example& ex : data.examples) {
        std::vector<double> dense(static_cast<size_t>(data.dim), 0.0);
        for (const auto& [idx, w] : ex.features) dense[static_cast<size_t>(idx)] = w;
        json obj;
        obj["id"] = ex.id;
        obj["label"] = data.labels.label(ex.gold).name;
        obj["features"] = dense;
        out << obj.dump() << "\n";
    }
    if (!out) throw std::runtime_error("short write on dataset: " + path.string());
}

}  // namespace churn
