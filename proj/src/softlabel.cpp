#include "churn/softlabel.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "churn/csv.hpp"
#include "churn/training.hpp"

namespace churn {

namespace {

const char* provenance_name(SoftLabelTable::Provenance p) {
    switch (p) {
        case SoftLabelTable::Provenance::uniform: return "uniform";
        case SoftLabelTable::Provenance::ensemble: return "ensemble";
        case SoftLabelTable::Provenance::temporal: return "temporal";
    }
    return "uniform";
}

SoftLabelTable::Provenance provenance_from(const std::string& s) {
    if (s == "uniform") return SoftLabelTable::Provenance::uniform;
    if (s == "ensemble") return SoftLabelTable::Provenance::ensemble;
    if (s == "temporal") return SoftLabelTable::Provenance::temporal;
    throw std::runtime_error("unknown soft-label provenance: " + s);
}

void check_coverage(const RunningMeanProbs& state, const ProbTable& table) {
    if (state.ids.size() != table.ids.size() || state.k != table.k) {
        throw std::invalid_argument("running mean: coverage mismatch");
    }
    for (size_t i = 0; i < state.ids.size(); ++i) {
        if (state.ids[i] != table.ids[i]) {
            throw std::invalid_argument("running mean: coverage mismatch at " + table.ids[i]);
        }
    }
}

}  // namespace

ProbVector ProbTable::row(size_t i) const {
    ProbVector out;
    out.probs.assign(probs.begin() + static_cast<ptrdiff_t>(i * static_cast<size_t>(k)),
                     probs.begin() + static_cast<ptrdiff_t>((i + 1) * static_cast<size_t>(k)));
    return out;
}

const ProbVector* SoftLabelTable::find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return nullptr;
    return &targets[it->second];
}

void SoftLabelTable::rebuild_index() {
    index_.clear();
    index_.reserve(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) index_.emplace(ids[i], i);
}

SoftLabel uniform_smooth(int gold, int k, double alpha) {
    if (k < 2) throw std::invalid_argument("uniform_smooth: k must be >= 2");
    if (gold < 0 || gold >= k) throw std::invalid_argument("uniform_smooth: gold out of range");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("uniform_smooth: alpha in [0,1]");
    SoftLabel out;
    out.target.probs.assign(static_cast<size_t>(k), alpha / static_cast<double>(k));
    out.target.probs[static_cast<size_t>(gold)] = (1.0 - alpha) + alpha / static_cast<double>(k);
    return out;
}

ProbVector temperature_scale(const ProbVector& p, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    std::vector<double> powered(p.probs.size());
    for (size_t i = 0; i < p.probs.size(); ++i) {
        const double x = p.probs[i];
        powered[i] = x == 0.0 ? 0.0 : std::pow(x, temperature);
    }
    return normalize(powered);
}

SoftLabelTable ensemble_soft_labels(const std::vector<ProbTable>& per_model, double temperature) {
    if (per_model.empty()) throw std::invalid_argument("ensemble_soft_labels: no models");
    const ProbTable& first = per_model.front();
    for (size_t m = 1; m < per_model.size(); ++m) {
        const ProbTable& t = per_model[m];
        if (t.ids.size() != first.ids.size() || t.k != first.k) {
            throw std::invalid_argument("ensemble_soft_labels: table shape mismatch");
        }
        std::string missing;
        for (size_t i = 0; i < t.ids.size(); ++i) {
            if (t.ids[i] != first.ids[i]) {
                missing += missing.empty() ? t.ids[i] : ("," + t.ids[i]);
            }
        }
        if (!missing.empty()) {
            throw std::invalid_argument("ensemble_soft_labels: coverage mismatch, ids " + missing);
        }
    }

    const size_t n = first.ids.size();
    const size_t k = static_cast<size_t>(first.k);
    std::vector<double> mean(n * k, 0.0);
    for (const ProbTable& t : per_model) {
        for (size_t i = 0; i < n * k; ++i) mean[i] += t.probs[i];
    }
    const double inv = 1.0 / static_cast<double>(per_model.size());
    for (double& x : mean) x *= inv;

    SoftLabelTable table;
    table.provenance = SoftLabelTable::Provenance::ensemble;
    table.temperature = temperature;
    table.source_models = static_cast<int>(per_model.size());
    table.ids = first.ids;
    table.targets.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        ProbVector p;
        p.probs.assign(mean.begin() + static_cast<ptrdiff_t>(i * k),
                       mean.begin() + static_cast<ptrdiff_t>((i + 1) * k));
        table.targets.push_back(temperature_scale(p, temperature));
    }
    table.rebuild_index();
    return table;
}

SoftLabelTable temporal_soft_labels(const RunTrace& teacher, int64_t burn_in, double temperature) {
    const int k = static_cast<int>(teacher.label_names.size());
    RunningMeanProbs state;
    state.ids = teacher.train_ids;
    state.k = k;
    int stride = 1;
    int64_t prev_step = -1;
    for (const PredictionSnapshot* snap : teacher.train_snapshots()) {
        if (snap->probs.empty()) continue;
        if (prev_step >= 0 && snap->step > prev_step) {
            stride = static_cast<int>(snap->step - prev_step);
        }
        prev_step = snap->step;
        if (snap->step <= burn_in) continue;
        ProbTable t;
        t.ids = teacher.train_ids;
        t.k = k;
        t.probs = snap->probs;
        running_mean_update(state, t);
    }
    if (state.samples_seen == 0) throw std::runtime_error("burn-in exhausts trace");

    SoftLabelTable table;
    table.provenance = SoftLabelTable::Provenance::temporal;
    table.temperature = temperature;
    table.burn_in = burn_in;
    table.capture_stride = stride;
    table.source_models = static_cast<int>(state.samples_seen);
    table.ids = state.ids;
    const size_t n = state.ids.size();
    table.targets.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        ProbVector p;
        p.probs.assign(state.mean.begin() + static_cast<ptrdiff_t>(i * static_cast<size_t>(k)),
                       state.mean.begin() + static_cast<ptrdiff_t>((i + 1) * static_cast<size_t>(k)));
        table.targets.push_back(temperature_scale(p, temperature));
    }
    table.rebuild_index();
    return table;
}

void running_mean_update(RunningMeanProbs& state, const ProbTable& table) {
    if (state.samples_seen == 0 && state.mean.empty()) {
        state.ids = table.ids;
        state.k = table.k;
        state.mean.assign(table.probs.size(), 0.0);
    }
    check_coverage(state, table);
    const double inv = 1.0 / static_cast<double>(state.samples_seen + 1);
    for (size_t i = 0; i < state.mean.size(); ++i) {
        state.mean[i] += (table.probs[i] - state.mean[i]) * inv;
    }
    ++state.samples_seen;
}

SoftLabelTable uniform_soft_labels(const Dataset& data, double alpha) {
    SoftLabelTable table;
    table.provenance = SoftLabelTable::Provenance::uniform;
    table.alpha = alpha;
    table.ids.reserve(data.size());
    table.targets.reserve(data.size());
    for (const Example& ex : data.examples) {
        table.ids.push_back(ex.id);
        table.targets.push_back(uniform_smooth(ex.gold, data.labels.k(), alpha).target);
    }
    table.rebuild_index();
    return table;
}

void save_soft_labels(const std::filesystem::path& path, const SoftLabelTable& table,
                      const LabelSpace& labels) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write soft labels: " + path.string());
    out << "# provenance=" << provenance_name(table.provenance) << " alpha=" << csv::num(table.alpha)
        << " temperature=" << csv::num(table.temperature) << " burn_in=" << table.burn_in
        << " capture_stride=" << table.capture_stride << " source_models=" << table.source_models
        << "\n";
    out << "example_id";
    for (const LabelId& l : labels.labels()) out << "," << l.name;
    out << "\n";
    for (size_t i = 0; i < table.ids.size(); ++i) {
        out << table.ids[i];
        for (double p : table.targets[i].probs) out << "," << csv::num(p);
        out << "\n";
    }
    if (!out) throw std::runtime_error("short write on soft labels: " + path.string());
}

SoftLabelTable load_soft_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open soft labels: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("# provenance=", 0) != 0) {
        throw std::runtime_error("missing provenance header in " + path.string());
    }
    SoftLabelTable table;
    {
        std::istringstream hdr(line.substr(2));
        std::string tok;
        while (hdr >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = tok.substr(0, eq);
            const std::string val = tok.substr(eq + 1);
            if (key == "provenance") table.provenance = provenance_from(val);
            else if (key == "alpha") table.alpha = std::stod(val);
            else if (key == "temperature") table.temperature = std::stod(val);
            else if (key == "burn_in") table.burn_in = std::stoll(val);
            else if (key == "capture_stride") table.capture_stride = std::stoi(val);
            else if (key == "source_models") table.source_models = std::stoi(val);
        }
    }
    if (!std::getline(in, line)) throw std::runtime_error("missing header row in " + path.string());
    const size_t k = csv::split(line).size() - 1;
    size_t line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = csv::split(line);
        if (fields.size() != k + 1) {
            throw std::runtime_error("bad column count at line " + std::to_string(line_no) +
                                     " of " + path.string());
        }
        table.ids.push_back(fields[0]);
        ProbVector p;
        p.probs.reserve(k);
        for (size_t c = 1; c < fields.size(); ++c) p.probs.push_back(std::stod(fields[c]));
        table.targets.push_back(std::move(p));
    }
    table.rebuild_index();
    return table;
}

}  // namespace churn
