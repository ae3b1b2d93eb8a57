#include "churn/metrics.hpp"

#include <cmath>
#include <fstream>

#include "churn/csv.hpp"

namespace churn {

namespace {

void check_same_eval_set(const std::vector<RunTrace>& traces) {
    const auto& first = traces.front();
    for (size_t t = 1; t < traces.size(); ++t) {
        if (traces[t].eval_ids != first.eval_ids ||
            traces[t].label_names != first.label_names) {
            throw std::invalid_argument("trace eval-set mismatch");
        }
    }
}

std::pair<double, double> mean_and_population_std(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    return {mean, std::sqrt(var)};
}

}  // namespace

std::vector<ExampleInstability> le_multi(const std::vector<RunTrace>& traces) {
    if (traces.size() < 2) throw std::invalid_argument("le_multi requires >= 2 traces");
    check_same_eval_set(traces);
    const auto& ids = traces.front().eval_ids;
    const int k = static_cast<int>(traces.front().label_names.size());

    std::vector<const PredictionSnapshot*> finals;
    finals.reserve(traces.size());
    for (const auto& t : traces) finals.push_back(&t.final_eval_snapshot());

    std::vector<ExampleInstability> out(ids.size());
    std::vector<double> gp(traces.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        ExampleInstability& row = out[i];
        row.id = ids[i];
        row.pred_counts.counts.assign(static_cast<size_t>(k), 0);
        for (size_t t = 0; t < finals.size(); ++t) {
            row.pred_counts.tally(finals[t]->pred[i]);
            gp[t] = finals[t]->gold_prob[i];
        }
        row.le_m = entropy_nats(row.pred_counts);
        std::tie(row.mu_m, row.sigma_m) = mean_and_population_std(gp);
    }
    return out;
}

std::vector<double> le_single(const RunTrace& trace) {
    const auto snaps = trace.eval_snapshots();
    if (snaps.size() < 2) throw std::invalid_argument("insufficient checkpoints");
    const int k = static_cast<int>(trace.label_names.size());
    std::vector<double> out(trace.eval_ids.size());
    for (size_t i = 0; i < out.size(); ++i) {
        LabelCounts counts;
        counts.counts.assign(static_cast<size_t>(k), 0);
        for (const PredictionSnapshot* s : snaps) counts.tally(s->pred[i]);
        out[i] = entropy_nats(counts);
    }
    return out;
}

double delta_le(double sum_method, double sum_control) {
    if (sum_control == 0.0) throw std::invalid_argument("control has zero entropy");
    return 100.0 * (sum_control - sum_method) / sum_control;
}

std::optional<double> pct_of_ensemble(double delta_method, double delta_ensemble) {
    if (delta_ensemble == 0.0) return std::nullopt;
    return 100.0 * delta_method / delta_ensemble;
}

std::set<std::string> high_entropy_subset(const std::vector<ExampleInstability>& control,
                                          double threshold) {
    std::set<std::string> out;
    for (const auto& row : control) {
        if (row.le_m > threshold) out.insert(row.id);
    }
    return out;
}

std::pair<double, double> accuracy_stats(const std::vector<RunTrace>& traces) {
    if (traces.empty()) throw std::invalid_argument("no traces");
    std::vector<double> accs;
    accs.reserve(traces.size());
    for (const auto& t : traces) accs.push_back(t.final_eval_accuracy);
    return mean_and_population_std(accs);
}

double correlation(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("need at least 2 points");
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if (vx == 0.0 || vy == 0.0) throw std::invalid_argument("zero variance");
    return cov / std::sqrt(vx * vy);
}

std::vector<ExampleInstability> compute_instability(const std::vector<RunTrace>& traces) {
    std::vector<ExampleInstability> rows = le_multi(traces);
    // Designated single-run source: the trace with the lowest seed.
    size_t designated = 0;
    for (size_t t = 1; t < traces.size(); ++t) {
        if (traces[t].seed < traces[designated].seed) designated = t;
    }
    const std::vector<double> les = le_single(traces[designated]);
    for (size_t i = 0; i < rows.size(); ++i) rows[i].le_s = les[i];
    return rows;
}

void save_per_example_csv(const std::filesystem::path& path,
                          const std::vector<ExampleInstability>& rows, const Dataset& eval,
                          const LabelSpace& labels) {
    if (rows.size() != eval.size()) throw std::invalid_argument("row/eval size mismatch");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write metrics csv: " + path.string());
    out << "example_id,gold,le_m,le_s,mu_m,sigma_m,pred_counts\n";
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (r.id != eval.examples[i].id) throw std::invalid_argument("row/eval order mismatch");
        out << r.id << ',' << labels.label(eval.examples[i].gold).name << ',' << csv::num(r.le_m)
            << ',' << csv::num(r.le_s) << ',' << csv::num(r.mu_m) << ',' << csv::num(r.sigma_m)
            << ',';
        bool first = true;
        for (size_t c = 0; c < r.pred_counts.counts.size(); ++c) {
            if (r.pred_counts.counts[c] == 0) continue;
            if (!first) out << ';';
            out << labels.label(static_cast<int>(c)).name << ':' << r.pred_counts.counts[c];
            first = false;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("short write on metrics csv: " + path.string());
}

void save_strategy_report_csv(const std::filesystem::path& path,
                              const std::vector<StrategyReport>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report csv: " + path.string());
    out << "strategy,accuracy_mean_pct,accuracy_std_pct,delta_le_m_pct,pct_of_ensemble,"
           "delta_le_s_pct,delta_le_m_high_pct,delta_le_s_high_pct,"
           "sum_le_m,sum_le_s,sum_le_m_high,sum_le_s_high,"
           "accuracy_mean_full,accuracy_std_full,delta_le_m_pct_full,pct_of_ensemble_full,"
           "delta_le_s_pct_full,delta_le_m_high_pct_full,delta_le_s_high_pct_full\n";
    auto opt1 = [](const std::optional<double>& v) { return v ? csv::num1(*v) : std::string(); };
    auto optf = [](const std::optional<double>& v) { return v ? csv::num(*v) : std::string(); };
    for (const auto& r : rows) {
        out << r.strategy << ',' << csv::num1(100.0 * r.accuracy_mean) << ','
            << csv::num1(100.0 * r.accuracy_std) << ',' << opt1(r.delta_le_m_pct) << ','
            << opt1(r.pct_of_ensemble) << ',' << opt1(r.delta_le_s_pct) << ','
            << opt1(r.delta_le_m_high_pct) << ',' << opt1(r.delta_le_s_high_pct) << ','
            << csv::num(r.sum_le_m) << ',' << csv::num(r.sum_le_s) << ','
            << csv::num(r.sum_le_m_high) << ',' << csv::num(r.sum_le_s_high) << ','
            << csv::num(r.accuracy_mean) << ',' << csv::num(r.accuracy_std) << ','
            << optf(r.delta_le_m_pct) << ',' << optf(r.pct_of_ensemble) << ','
            << optf(r.delta_le_s_pct) << ',' << optf(r.delta_le_m_high_pct) << ','
            << optf(r.delta_le_s_high_pct) << "\n";
    }
    if (!out) throw std::runtime_error("short write on report csv: " + path.string());
}

}  // namespace churn
