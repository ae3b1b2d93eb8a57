#include "churn/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "churn/csv.hpp"
#include "churn/rng.hpp"

namespace churn {

namespace {

using json = nlohmann::json;

uint64_t hash_file(const std::filesystem::path& path, uint64_t h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file for fingerprint: " + path.string());
    char buf[65536];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

std::string sanitize_filename(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
        if (!ok) c = '_';
    }
    return out;
}

struct StrategyManifest {
    std::string strategy;
    std::string spec_hash;
    std::string dataset_fp;
    std::vector<uint64_t> seeds;
    std::set<uint64_t> completed;
    std::set<uint64_t> teachers_done;
    std::string status = "running";
};

json to_json(const StrategyManifest& m) {
    json j;
    j["tool_version"] = kToolVersion;
    j["strategy"] = m.strategy;
    j["spec_hash"] = m.spec_hash;
    j["dataset_fingerprint"] = m.dataset_fp;
    std::vector<std::string> seeds;
    for (uint64_t s : m.seeds) seeds.push_back(std::to_string(s));
    j["seeds"] = seeds;
    std::vector<std::string> done(m.completed.size());
    std::transform(m.completed.begin(), m.completed.end(), done.begin(),
                   [](uint64_t s) { return std::to_string(s); });
    j["completed"] = done;
    std::vector<std::string> teachers(m.teachers_done.size());
    std::transform(m.teachers_done.begin(), m.teachers_done.end(), teachers.begin(),
                   [](uint64_t s) { return std::to_string(s); });
    j["teachers_done"] = teachers;
    j["status"] = m.status;
    return j;
}

StrategyManifest manifest_from_json(const json& j) {
    StrategyManifest m;
    m.strategy = j.at("strategy").get<std::string>();
    m.spec_hash = j.at("spec_hash").get<std::string>();
    m.dataset_fp = j.at("dataset_fingerprint").get<std::string>();
    for (const auto& s : j.at("seeds")) m.seeds.push_back(std::stoull(s.get<std::string>()));
    for (const auto& s : j.at("completed")) m.completed.insert(std::stoull(s.get<std::string>()));
    for (const auto& s : j.at("teachers_done")) {
        m.teachers_done.insert(std::stoull(s.get<std::string>()));
    }
    m.status = j.at("status").get<std::string>();
    return m;
}

class ManifestStore {
public:
    ManifestStore(std::filesystem::path path, StrategyManifest m)
        : path_(std::move(path)), manifest_(std::move(m)) {}

    void write() {
        std::lock_guard<std::mutex> lock(mutex_);
        atomic_write(path_, to_json(manifest_).dump(2) + "\n");
    }
    void mark_teacher(uint64_t seed) {
        std::lock_guard<std::mutex> lock(mutex_);
        manifest_.teachers_done.insert(seed);
        atomic_write(path_, to_json(manifest_).dump(2) + "\n");
    }
    void mark_completed(uint64_t seed) {
        std::lock_guard<std::mutex> lock(mutex_);
        manifest_.completed.insert(seed);
        atomic_write(path_, to_json(manifest_).dump(2) + "\n");
    }
    void finalize() {
        std::lock_guard<std::mutex> lock(mutex_);
        manifest_.status = "complete";
        atomic_write(path_, to_json(manifest_).dump(2) + "\n");
    }
    const StrategyManifest& manifest() const { return manifest_; }

private:
    std::filesystem::path path_;
    StrategyManifest manifest_;
    std::mutex mutex_;
};

std::filesystem::path seed_dir(const std::filesystem::path& base, uint64_t seed) {
    return base / ("seed" + std::to_string(seed));
}

/// Loads a teacher trace if recorded as done, otherwise trains and persists it.
RunTrace load_or_train_teacher(ManifestStore& store, const std::filesystem::path& dir,
                               uint64_t seed, const TrainConfig& config, const Dataset& train,
                               const Dataset& eval) {
    if (store.manifest().teachers_done.count(seed)) {
        return load_trace(seed_dir(dir, seed));
    }
    TrainConfig tc = config;
    tc.seed = seed;
    RunTrace trace = train_run(tc, train, eval, nullptr);
    save_trace(seed_dir(dir, seed), trace);
    store.mark_teacher(seed);
    return trace;
}

}  // namespace

std::string dataset_fingerprint(const std::filesystem::path& train_path,
                                const std::filesystem::path& eval_path) {
    uint64_t h = hash_file(train_path, kFnvOffset);
    h = hash_file(eval_path, h);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

void atomic_write(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
        if (!out) throw std::runtime_error("short write on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

size_t run_strategy_to_dir(const ExperimentPaths& paths, const StrategySpec& spec,
                           const Dataset& train, const Dataset& eval,
                           const std::string& dataset_fp, int jobs) {
    const std::string name = strategy_name(spec.kind);
    const std::filesystem::path dir = paths.strategy_dir(name);
    std::filesystem::create_directories(dir);

    StrategyManifest manifest;
    manifest.strategy = name;
    manifest.spec_hash = spec.hash();
    manifest.dataset_fp = dataset_fp;
    manifest.seeds = spec.seeds;

    const std::filesystem::path mpath = paths.manifest(name);
    if (std::filesystem::exists(mpath)) {
        std::ifstream in(mpath);
        StrategyManifest prior = manifest_from_json(json::parse(in));
        if (prior.spec_hash != manifest.spec_hash) {
            throw std::runtime_error(
                "refusing to resume " + dir.string() + ": existing outputs were produced with a "
                "different configuration (spec hash " + prior.spec_hash + " vs " +
                manifest.spec_hash + "); use a fresh --out directory or delete the old one");
        }
        if (prior.dataset_fp != dataset_fp) {
            throw std::runtime_error(
                "refusing to resume " + dir.string() + ": dataset fingerprint changed (" +
                prior.dataset_fp + " vs " + dataset_fp + ")");
        }
        manifest.completed = prior.completed;
        manifest.teachers_done = prior.teachers_done;
        // Seed list may legitimately grow between invocations; merge.
        std::set<uint64_t> merged(prior.seeds.begin(), prior.seeds.end());
        merged.insert(spec.seeds.begin(), spec.seeds.end());
        manifest.seeds.assign(merged.begin(), merged.end());
    }

    std::vector<uint64_t> pending;
    for (uint64_t s : spec.seeds) {
        if (!manifest.completed.count(s)) pending.push_back(s);
    }

    ManifestStore store(mpath, manifest);
    store.write();  // written before any run starts

    const TrainConfig student = spec.student_config();

    if (!pending.empty()) {
        switch (spec.kind) {
            case StrategyKind::control:
            case StrategyKind::l2:
            case StrategyKind::swa:
            case StrategyKind::uniform_ls: {
                SoftLabelTable uniform;
                const SoftLabelTable* targets = nullptr;
                if (spec.kind == StrategyKind::uniform_ls) {
                    uniform = uniform_soft_labels(train, spec.alpha);
                    save_soft_labels(paths.softlabels_dir(name) / "table.csv", uniform,
                                     train.labels);
                    targets = &uniform;
                }
                parallel_for_tasks(jobs, static_cast<int>(pending.size()), [&](int i) {
                    TrainConfig c = student;
                    c.seed = pending[static_cast<size_t>(i)];
                    RunTrace trace = train_run(c, train, eval, targets);
                    save_trace(seed_dir(paths.traces_dir(name), c.seed), trace);
                    store.mark_completed(c.seed);
                });
                break;
            }
            case StrategyKind::ensemble_eb: {
                if (spec.n_models < 2) {
                    throw std::invalid_argument("ensemble_eb requires at least 2 teacher models");
                }
                TrainConfig tc = spec.base;
                tc.weight_decay = 0.0;
                tc.swa_enabled = false;
                tc.capture_train_probs = false;
                tc.capture_final_train_probs = true;
                std::vector<RunTrace> teachers(static_cast<size_t>(spec.n_models));
                parallel_for_tasks(jobs, spec.n_models, [&](int i) {
                    const uint64_t seed = kEnsembleTeacherSeedBase + static_cast<uint64_t>(i);
                    teachers[static_cast<size_t>(i)] = load_or_train_teacher(
                        store, paths.teachers_dir(name), seed, tc, train, eval);
                });
                std::vector<ProbTable> tables;
                tables.reserve(teachers.size());
                for (const RunTrace& t : teachers) {
                    const auto snaps = t.train_snapshots();
                    if (snaps.empty() || snaps.back()->probs.empty()) {
                        throw std::runtime_error("teacher trace lacks final train probabilities");
                    }
                    ProbTable pt;
                    pt.ids = t.train_ids;
                    pt.k = static_cast<int>(t.label_names.size());
                    pt.probs = snaps.back()->probs;
                    tables.push_back(std::move(pt));
                }
                const SoftLabelTable soft = ensemble_soft_labels(tables, spec.temperature);
                save_soft_labels(paths.softlabels_dir(name) / "table.csv", soft, train.labels);
                parallel_for_tasks(jobs, static_cast<int>(pending.size()), [&](int i) {
                    TrainConfig c = student;
                    c.seed = pending[static_cast<size_t>(i)];
                    RunTrace trace = train_run(c, train, eval, &soft);
                    save_trace(seed_dir(paths.traces_dir(name), c.seed), trace);
                    store.mark_completed(c.seed);
                });
                break;
            }
            case StrategyKind::tgtss: {
                if (spec.shared_teacher) {
                    // Anchor on the smallest seed, unless a teacher already
                    // exists from an earlier invocation; that one stays
                    // authoritative even if smaller seeds are added later.
                    const uint64_t anchor =
                        *std::min_element(manifest.seeds.begin(), manifest.seeds.end());
                    const uint64_t tseed = manifest.teachers_done.empty()
                                               ? anchor ^ kTgtssTeacherSeedXor
                                               : *manifest.teachers_done.begin();
                    TrainConfig tc = spec.base;
                    tc.weight_decay = 0.0;
                    tc.swa_enabled = false;
                    tc.capture_train_probs = true;
                    tc.capture_final_train_probs = false;
                    tc.burn_in_steps = spec.burn_in >= 0 ? spec.burn_in : 0;
                    RunTrace teacher = load_or_train_teacher(store, paths.teachers_dir(name),
                                                             tseed, tc, train, eval);
                    const int64_t n =
                        spec.burn_in >= 0 ? spec.burn_in : select_burn_in(teacher.eval_loss_curve);
                    const SoftLabelTable soft =
                        temporal_soft_labels(teacher, n, spec.temperature);
                    save_soft_labels(paths.softlabels_dir(name) / "table.csv", soft, train.labels);
                    parallel_for_tasks(jobs, static_cast<int>(pending.size()), [&](int i) {
                        TrainConfig c = student;
                        c.seed = pending[static_cast<size_t>(i)];
                        RunTrace trace = train_run(c, train, eval, &soft);
                        save_trace(seed_dir(paths.traces_dir(name), c.seed), trace);
                        store.mark_completed(c.seed);
                    });
                } else {
                    parallel_for_tasks(jobs, static_cast<int>(pending.size()), [&](int i) {
                        const uint64_t seed = pending[static_cast<size_t>(i)];
                        TrainConfig tc = spec.base;
                        tc.weight_decay = 0.0;
                        tc.swa_enabled = false;
                        tc.capture_train_probs = true;
                        tc.capture_final_train_probs = false;
                        tc.burn_in_steps = spec.burn_in >= 0 ? spec.burn_in : 0;
                        const RunTrace teacher =
                            load_or_train_teacher(store, paths.teachers_dir(name),
                                                  seed ^ kTgtssTeacherSeedXor, tc, train, eval);
                        const int64_t n = spec.burn_in >= 0
                                              ? spec.burn_in
                                              : select_burn_in(teacher.eval_loss_curve);
                        const SoftLabelTable soft =
                            temporal_soft_labels(teacher, n, spec.temperature);
                        save_soft_labels(paths.softlabels_dir(name) /
                                             ("seed" + std::to_string(seed) + ".csv"),
                                         soft, train.labels);
                        TrainConfig c = student;
                        c.seed = seed;
                        RunTrace trace = train_run(c, train, eval, &soft);
                        save_trace(seed_dir(paths.traces_dir(name), seed), trace);
                        store.mark_completed(seed);
                    });
                }
                break;
            }
        }
    }

    store.finalize();
    return pending.size();
}

std::vector<std::string> discover_strategies(const ExperimentPaths& paths) {
    std::vector<std::string> found;
    if (!std::filesystem::exists(paths.root)) return found;
    std::vector<std::string> present;
    for (const auto& entry : std::filesystem::directory_iterator(paths.root)) {
        if (entry.is_directory() && std::filesystem::exists(entry.path() / "manifest.json")) {
            present.push_back(entry.path().filename().string());
        }
    }
    std::sort(present.begin(), present.end());
    const char* order[] = {"control", "ensemble_eb", "l2", "swa", "uniform_ls", "tgtss"};
    for (const char* name : order) {
        auto it = std::find(present.begin(), present.end(), name);
        if (it != present.end()) {
            found.push_back(*it);
            present.erase(it);
        }
    }
    for (const auto& other : present) found.push_back(other);
    return found;
}

void emit_report(const ExperimentPaths& paths, const Dataset& eval,
                 const std::filesystem::path& out_dir, const ReportOptions& options) {
    const std::vector<std::string> strategies = discover_strategies(paths);
    if (strategies.empty()) {
        throw std::runtime_error("no strategy outputs under " + paths.root.string());
    }

    std::filesystem::create_directories(out_dir);

    std::vector<StrategyEval> evals;
    std::vector<std::vector<RunTrace>> all_traces;
    for (const std::string& name : strategies) {
        std::vector<RunTrace> traces;
        const std::filesystem::path tdir = paths.traces_dir(name);
        if (std::filesystem::exists(tdir)) {
            for (const auto& entry : std::filesystem::directory_iterator(tdir)) {
                if (entry.is_directory()) traces.push_back(load_trace(entry.path()));
            }
        }
        if (traces.size() < 2) {
            throw std::runtime_error("strategy " + name + " has fewer than 2 traces");
        }
        std::sort(traces.begin(), traces.end(),
                  [](const RunTrace& a, const RunTrace& b) { return a.seed < b.seed; });
        for (const RunTrace& t : traces) {
            if (t.eval_ids.size() != eval.size()) {
                throw std::runtime_error("trace eval set does not match dataset for " + name);
            }
            for (size_t i = 0; i < eval.size(); ++i) {
                if (t.eval_ids[i] != eval.examples[i].id) {
                    throw std::runtime_error("trace eval set does not match dataset for " + name);
                }
            }
        }

        StrategyEval ev;
        ev.name = name;
        ev.per_example = compute_instability(traces);
        std::tie(ev.accuracy_mean, ev.accuracy_std) = accuracy_stats(traces);
        save_per_example_csv(out_dir / ("per_example_" + name + ".csv"), ev.per_example, eval,
                             eval.labels);
        evals.push_back(std::move(ev));
        all_traces.push_back(std::move(traces));
    }

    const std::vector<StrategyReport> rows = compare(evals, options.high_entropy_threshold);
    save_strategy_report_csv(out_dir / "report.csv", rows);

    auto opt1 = [](const std::optional<double>& v) { return v ? csv::num1(*v) : std::string(); };
    auto optf = [](const std::optional<double>& v) { return v ? csv::num(*v) : std::string(); };
    {
        // Single-run entropy reduction, one row per strategy.
        std::ofstream out(out_dir / "report_le_s.csv", std::ios::trunc);
        out << "strategy,delta_le_s_pct,sum_le_s,delta_le_s_pct_full\n";
        for (const auto& r : rows) {
            out << r.strategy << ',' << opt1(r.delta_le_s_pct) << ',' << csv::num(r.sum_le_s)
                << ',' << optf(r.delta_le_s_pct) << "\n";
        }
    }
    {
        // Deltas restricted to the control's high-entropy examples.
        std::ofstream out(out_dir / "report_high_entropy.csv", std::ios::trunc);
        out << "strategy,delta_le_m_pct,delta_le_s_pct,sum_le_m,sum_le_s,"
               "delta_le_m_pct_full,delta_le_s_pct_full\n";
        for (const auto& r : rows) {
            out << r.strategy << ',' << opt1(r.delta_le_m_high_pct) << ','
                << opt1(r.delta_le_s_high_pct) << ',' << csv::num(r.sum_le_m_high) << ','
                << csv::num(r.sum_le_s_high) << ',' << optf(r.delta_le_m_high_pct) << ','
                << optf(r.delta_le_s_high_pct) << "\n";
        }
    }

    // Trajectory plot data for the top-k most unstable control examples. The
    // same ids are emitted for every strategy so pre/post mitigation curves
    // line up.
    const StrategyEval* control = nullptr;
    for (const auto& e : evals) {
        if (e.name == "control") control = &e;
    }
    if (control && options.top_k_trajectories > 0) {
        std::vector<const ExampleInstability*> ranked;
        ranked.reserve(control->per_example.size());
        for (const auto& row : control->per_example) ranked.push_back(&row);
        std::sort(ranked.begin(), ranked.end(),
                  [](const ExampleInstability* a, const ExampleInstability* b) {
                      if (a->le_m != b->le_m) return a->le_m > b->le_m;
                      return a->id < b->id;
                  });
        const size_t top_k =
            std::min(ranked.size(), static_cast<size_t>(options.top_k_trajectories));

        for (size_t si = 0; si < evals.size(); ++si) {
            const std::vector<RunTrace>& traces = all_traces[si];
            const RunTrace& designated = traces.front();  // lowest seed after sort
            const auto snaps = designated.eval_snapshots();
            const std::filesystem::path tdir = out_dir / "trajectories" / evals[si].name;
            std::filesystem::create_directories(tdir);
            for (size_t r = 0; r < top_k; ++r) {
                const std::string& id = ranked[r]->id;
                size_t idx = 0;
                while (idx < designated.eval_ids.size() && designated.eval_ids[idx] != id) ++idx;
                if (idx == designated.eval_ids.size()) continue;
                char prefix[32];
                std::snprintf(prefix, sizeof prefix, "%02zu_", r + 1);
                std::ofstream out(tdir / (prefix + sanitize_filename(id) + ".csv"),
                                  std::ios::trunc);
                out << "step,gold_prob,cum_le_s\n";
                LabelCounts counts;
                counts.counts.assign(designated.label_names.size(), 0);
                for (const PredictionSnapshot* s : snaps) {
                    counts.tally(s->pred[idx]);
                    out << s->step << ',' << csv::num(s->gold_prob[idx]) << ','
                        << csv::num(entropy_nats(counts)) << "\n";
                }
            }
        }
    }
}

}  // namespace churn
