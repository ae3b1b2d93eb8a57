#include "churn/mitigation.hpp"

#include <algorithm>
#include <array>
#include <bit>

#include "churn/rng.hpp"

namespace churn {

namespace {

std::string hex64_local(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

/// Trains the TGTSS teacher for one student seed and derives its soft-label
/// table. When burn_in < 0 the plateau of the teacher's validation loss curve
/// picks it.
SoftLabelTable build_temporal_table(const StrategySpec& spec, const Dataset& train,
                                    const Dataset& eval, uint64_t teacher_seed,
                                    RunTrace* teacher_out) {
    TrainConfig tc = spec.base;
    tc.seed = teacher_seed;
    tc.weight_decay = 0.0;
    tc.swa_enabled = false;
    tc.capture_train_probs = true;
    tc.capture_final_train_probs = false;
    tc.burn_in_steps = spec.burn_in >= 0 ? spec.burn_in : 0;
    RunTrace teacher = train_run(tc, train, eval, nullptr);
    const int64_t n = spec.burn_in >= 0 ? spec.burn_in : select_burn_in(teacher.eval_loss_curve);
    SoftLabelTable table = temporal_soft_labels(teacher, n, spec.temperature);
    if (teacher_out) *teacher_out = std::move(teacher);
    return table;
}

}  // namespace

const char* strategy_name(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::control: return "control";
        case StrategyKind::l2: return "l2";
        case StrategyKind::swa: return "swa";
        case StrategyKind::uniform_ls: return "uniform_ls";
        case StrategyKind::ensemble_eb: return "ensemble_eb";
        case StrategyKind::tgtss: return "tgtss";
    }
    return "control";
}

StrategyKind strategy_from_name(const std::string& name) {
    if (name == "control") return StrategyKind::control;
    if (name == "l2") return StrategyKind::l2;
    if (name == "swa") return StrategyKind::swa;
    if (name == "uniform_ls") return StrategyKind::uniform_ls;
    if (name == "ensemble_eb") return StrategyKind::ensemble_eb;
    if (name == "tgtss") return StrategyKind::tgtss;
    throw std::invalid_argument("unknown strategy: " + name);
}

std::string StrategySpec::hash() const {
    std::string s = strategy_name(kind);
    s += ';';
    s += student_config().hash();
    s += ';';
    s += hex64_local(std::bit_cast<uint64_t>(weight_decay));
    s += hex64_local(std::bit_cast<uint64_t>(alpha));
    s += hex64_local(std::bit_cast<uint64_t>(temperature));
    s += std::to_string(n_models);
    s += ':';
    s += std::to_string(burn_in);
    s += ':';
    s += shared_teacher ? '1' : '0';
    return hex64_local(fnv1a64(s));
}

TrainConfig StrategySpec::student_config() const {
    TrainConfig c = base;
    c.weight_decay = kind == StrategyKind::l2 ? weight_decay : 0.0;
    c.swa_enabled = kind == StrategyKind::swa;
    c.capture_train_probs = false;
    c.capture_final_train_probs = false;
    return c;
}

StrategyOutput run_strategy(const StrategySpec& spec, const Dataset& train, const Dataset& eval,
                            int jobs) {
    if (!(train.labels == eval.labels)) {
        throw std::invalid_argument("train/eval label spaces disagree");
    }
    if (spec.seeds.empty()) throw std::invalid_argument("no evaluation seeds");

    StrategyOutput out;
    const TrainConfig student = spec.student_config();

    switch (spec.kind) {
        case StrategyKind::control:
        case StrategyKind::l2:
        case StrategyKind::swa: {
            out.traces = run_seeds(student, train, eval, nullptr, spec.seeds, jobs);
            break;
        }
        case StrategyKind::uniform_ls: {
            out.soft_tables.push_back(uniform_soft_labels(train, spec.alpha));
            out.traces =
                run_seeds(student, train, eval, &out.soft_tables.front(), spec.seeds, jobs);
            break;
        }
        case StrategyKind::ensemble_eb: {
            if (spec.n_models < 2) {
                throw std::invalid_argument("ensemble_eb requires at least 2 teacher models");
            }
            std::vector<uint64_t> teacher_seeds;
            teacher_seeds.reserve(static_cast<size_t>(spec.n_models));
            for (int i = 0; i < spec.n_models; ++i) {
                teacher_seeds.push_back(kEnsembleTeacherSeedBase + static_cast<uint64_t>(i));
            }
            for (uint64_t s : spec.seeds) {
                if (s >= kEnsembleTeacherSeedBase &&
                    s < kEnsembleTeacherSeedBase + static_cast<uint64_t>(spec.n_models)) {
                    throw std::invalid_argument("evaluation seed collides with teacher pool");
                }
            }
            TrainConfig tc = spec.base;
            tc.weight_decay = 0.0;
            tc.swa_enabled = false;
            tc.capture_train_probs = false;
            tc.capture_final_train_probs = true;
            out.teacher_traces = run_seeds(tc, train, eval, nullptr, teacher_seeds, jobs);

            std::vector<ProbTable> tables;
            tables.reserve(out.teacher_traces.size());
            for (const RunTrace& t : out.teacher_traces) {
                const auto train_snaps = t.train_snapshots();
                if (train_snaps.empty() || train_snaps.back()->probs.empty()) {
                    throw std::runtime_error("teacher trace lacks final train probabilities");
                }
                ProbTable pt;
                pt.ids = t.train_ids;
                pt.k = static_cast<int>(t.label_names.size());
                pt.probs = train_snaps.back()->probs;
                tables.push_back(std::move(pt));
            }
            out.soft_tables.push_back(ensemble_soft_labels(tables, spec.temperature));
            out.traces =
                run_seeds(student, train, eval, &out.soft_tables.front(), spec.seeds, jobs);
            break;
        }
        case StrategyKind::tgtss: {
            if (spec.shared_teacher) {
                const uint64_t anchor = *std::min_element(spec.seeds.begin(), spec.seeds.end());
                RunTrace teacher;
                out.soft_tables.push_back(build_temporal_table(
                    spec, train, eval, anchor ^ kTgtssTeacherSeedXor, &teacher));
                out.teacher_traces.push_back(std::move(teacher));
                out.traces =
                    run_seeds(student, train, eval, &out.soft_tables.front(), spec.seeds, jobs);
            } else {
                // One teacher-student pair per evaluation seed.
                const size_t n = spec.seeds.size();
                out.traces.resize(n);
                out.teacher_traces.resize(n);
                out.soft_tables.resize(n);
                parallel_for_tasks(jobs, static_cast<int>(n), [&](int i) {
                    const uint64_t seed = spec.seeds[static_cast<size_t>(i)];
                    out.soft_tables[static_cast<size_t>(i)] =
                        build_temporal_table(spec, train, eval, seed ^ kTgtssTeacherSeedXor,
                                             &out.teacher_traces[static_cast<size_t>(i)]);
                    TrainConfig sc = student;
                    sc.seed = seed;
                    out.traces[static_cast<size_t>(i)] = train_run(
                        sc, train, eval, &out.soft_tables[static_cast<size_t>(i)]);
                });
            }
            break;
        }
    }
    return out;
}

std::vector<StrategyReport> compare(const std::vector<StrategyEval>& evals,
                                    double high_entropy_threshold) {
    const StrategyEval* control = nullptr;
    const StrategyEval* ensemble = nullptr;
    for (const auto& e : evals) {
        if (e.name == "control") control = &e;
        if (e.name == "ensemble_eb") ensemble = &e;
    }
    if (!control) throw std::invalid_argument("comparison requires a control strategy");

    const std::set<std::string> high_ids =
        high_entropy_subset(control->per_example, high_entropy_threshold);

    auto sums = [&](const StrategyEval& e) {
        double lm = 0.0, ls = 0.0, lmh = 0.0, lsh = 0.0;
        for (const auto& row : e.per_example) {
            lm += row.le_m;
            ls += row.le_s;
            if (high_ids.count(row.id)) {
                lmh += row.le_m;
                lsh += row.le_s;
            }
        }
        return std::array<double, 4>{lm, ls, lmh, lsh};
    };
    const auto control_sums = sums(*control);

    std::optional<double> ensemble_delta;
    if (ensemble && control_sums[0] > 0.0) {
        ensemble_delta = delta_le(sums(*ensemble)[0], control_sums[0]);
    }

    auto build_row = [&](const StrategyEval& e) {
        StrategyReport r;
        r.strategy = e.name;
        r.accuracy_mean = e.accuracy_mean;
        r.accuracy_std = e.accuracy_std;
        const auto s = sums(e);
        r.sum_le_m = s[0];
        r.sum_le_s = s[1];
        r.sum_le_m_high = s[2];
        r.sum_le_s_high = s[3];
        if (&e != control) {
            if (control_sums[0] > 0.0) r.delta_le_m_pct = delta_le(s[0], control_sums[0]);
            if (control_sums[1] > 0.0) r.delta_le_s_pct = delta_le(s[1], control_sums[1]);
            if (control_sums[2] > 0.0) r.delta_le_m_high_pct = delta_le(s[2], control_sums[2]);
            if (control_sums[3] > 0.0) r.delta_le_s_high_pct = delta_le(s[3], control_sums[3]);
            if (r.delta_le_m_pct && ensemble_delta) {
                r.pct_of_ensemble = pct_of_ensemble(*r.delta_le_m_pct, *ensemble_delta);
            }
        }
        return r;
    };

    // Fixed table order: control, ensemble, baselines, then tgtss.
    const char* order[] = {"control", "ensemble_eb", "l2", "swa", "uniform_ls", "tgtss"};
    std::vector<StrategyReport> rows;
    for (const char* name : order) {
        for (const auto& e : evals) {
            if (e.name == name) rows.push_back(build_row(e));
        }
    }
    for (const auto& e : evals) {
        bool known = false;
        for (const char* name : order) known |= e.name == name;
        if (!known) rows.push_back(build_row(e));
    }
    return rows;
}

}  // namespace churn
