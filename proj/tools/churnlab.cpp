// churnlab: measure prediction churn across retraining runs and compare
// mitigation strategies on desk-scale classifiers.
//
// Subcommands: gen, run, soft-labels, metrics, report.
// Exit codes: 0 success, 2 usage error, 1 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "churn/datagen.hpp"
#include "churn/experiment.hpp"
#include "churn/metrics.hpp"
#include "churn/mitigation.hpp"
#include "churn/softlabel.hpp"
#include "churn/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace churn;

namespace {

std::vector<uint64_t> parse_seed_range(const std::string& text) {
    const auto pos = text.find("..");
    if (pos == std::string::npos) {
        return {std::stoull(text)};
    }
    const uint64_t lo = std::stoull(text.substr(0, pos));
    const uint64_t hi = std::stoull(text.substr(pos + 2));
    if (hi < lo) throw std::runtime_error("seed range end before start: " + text);
    std::vector<uint64_t> seeds;
    seeds.reserve(hi - lo + 1);
    for (uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    return seeds;
}

struct DataPair {
    Dataset train;
    Dataset eval;
    std::string fingerprint;
};

DataPair load_data_dir(const fs::path& dir) {
    DataPair d;
    d.train = load_jsonl(dir / "train.jsonl");
    d.eval = load_jsonl(dir / "eval.jsonl");
    if (!(d.train.labels == d.eval.labels)) {
        // Label spaces are built from the labels present per file; remap both
        // splits onto the sorted union so indices line up.
        std::set<std::string> names;
        for (const auto& l : d.train.labels.labels()) names.insert(l.name);
        for (const auto& l : d.eval.labels.labels()) names.insert(l.name);
        LabelSpace unified(std::vector<std::string>(names.begin(), names.end()));
        auto remap = [&](Dataset& ds) {
            for (auto& ex : ds.examples) {
                ex.gold = *unified.find(ds.labels.label(ex.gold).name);
            }
            ds.labels = unified;
        };
        remap(d.train);
        remap(d.eval);
    }
    d.fingerprint = dataset_fingerprint(dir / "train.jsonl", dir / "eval.jsonl");
    return d;
}

void write_experiment_manifest(const fs::path& root, const std::string& dataset_fp,
                               const std::string& status) {
    json j;
    j["experiment_id"] = "exp-" + dataset_fp.substr(0, 12);
    j["dataset_fingerprint"] = dataset_fp;
    j["output_root"] = root.string();
    j["tool_version"] = kToolVersion;
    j["status"] = status;
    std::vector<std::string> strategies;
    if (fs::exists(root)) {
        ExperimentPaths paths{root};
        strategies = discover_strategies(paths);
    }
    j["strategies"] = strategies;
    atomic_write(root / "experiment.json", j.dump(2) + "\n");
}

ProbTable final_train_table(const RunTrace& t) {
    const auto snaps = t.train_snapshots();
    if (snaps.empty() || snaps.back()->probs.empty()) {
        throw std::runtime_error("trace " + t.run_id + " has no train probability captures");
    }
    ProbTable pt;
    pt.ids = t.train_ids;
    pt.k = static_cast<int>(t.label_names.size());
    pt.probs = snaps.back()->probs;
    return pt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"churnlab: label-switching-entropy instability measurement and mitigation"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    int jobs = 1;
    std::string global_seed_range;
    app.add_option("--config", config_path, "JSON file with base training configuration");
    app.add_option("--out", out_dir, "Output directory");
    app.add_option("--jobs", jobs, "Worker threads for seed-level fan-out")->check(CLI::Range(1, 256));
    app.add_option("--seed-range", global_seed_range, "Seed range a..b (inclusive)");

    // gen
    auto* gen = app.add_subcommand("gen", "Generate a synthetic ambiguous dataset");
    gen->fallthrough();
    SynthSpec synth;
    gen->add_option("--classes", synth.k, "Number of classes")->check(CLI::Range(2, 4096));
    gen->add_option("--per-class", synth.n_per_class, "Points per class")
        ->check(CLI::Range(5, 10'000'000));
    gen->add_option("--dim", synth.dim, "Feature dimensionality (>= classes)");
    gen->add_option("--separation", synth.separation, "Centroid distance in cluster stds")
        ->check(CLI::NonNegativeNumber);
    gen->add_option("--ambiguous", synth.ambiguous_frac, "Fraction resampled between centroids")
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--noise", synth.label_noise, "Fraction uniformly re-labeled")
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--seed", synth.seed, "Generator seed");

    // run
    auto* run = app.add_subcommand("run", "Run one mitigation strategy over a seed list");
    run->fallthrough();
    std::string data_dir, strategy, run_seeds_text;
    double opt_lr = 1e-4, opt_wd = 0.001, opt_alpha = 0.1, opt_temp = 0.5;
    int opt_epochs = 5, opt_batch = 256, opt_hidden = 0, opt_cee = 1, opt_stride = 1;
    int opt_teachers = 20;
    int64_t opt_burn_in = -1;
    bool opt_shared_teacher = false;
    run->add_option("--data", data_dir, "Dataset directory from `gen`")->required();
    run->add_option("--strategy", strategy,
                    "control|l2|swa|uniform_ls|ensemble_eb|tgtss (or \"kind\" in --config)");
    run->add_option("--seeds", run_seeds_text, "Seed range a..b or single seed");
    auto* o_lr = run->add_option("--lr", opt_lr, "Learning rate");
    auto* o_epochs = run->add_option("--epochs", opt_epochs, "Training epochs");
    auto* o_batch = run->add_option("--batch-size", opt_batch, "Minibatch size");
    auto* o_hidden = run->add_option("--hidden", opt_hidden, "Hidden units (0 = linear)");
    auto* o_cee = run->add_option("--capture-eval-every", opt_cee, "Eval snapshots per epoch");
    auto* o_stride = run->add_option("--capture-stride", opt_stride,
                                     "Steps between teacher inference passes");
    auto* o_wd = run->add_option("--weight-decay", opt_wd, "L2 strategy decay");
    auto* o_alpha = run->add_option("--alpha", opt_alpha, "Uniform smoothing parameter");
    auto* o_temp = run->add_option("--temperature", opt_temp, "Soft-label temperature");
    auto* o_teachers = run->add_option("--teachers", opt_teachers, "Ensemble teacher count");
    auto* o_burn = run->add_option("--burn-in", opt_burn_in,
                                   "TGTSS burn-in steps (-1 = pick from validation curve)");
    auto* o_shared = run->add_flag("--shared-teacher", opt_shared_teacher,
                                   "One TGTSS teacher for all students");

    // soft-labels
    auto* softcmd = app.add_subcommand("soft-labels", "Build a soft-label table from traces");
    softcmd->fallthrough();
    std::string soft_mode, soft_traces, soft_trace, soft_out;
    double soft_temp = 0.5;
    int64_t soft_burn = -1;
    softcmd->add_option("--mode", soft_mode, "ensemble|temporal")->required();
    softcmd->add_option("--traces", soft_traces, "Directory of teacher run directories (ensemble)");
    softcmd->add_option("--trace", soft_trace, "One teacher run directory (temporal)");
    softcmd->add_option("--temperature", soft_temp, "Temperature");
    softcmd->add_option("--burn-in", soft_burn, "Burn-in steps (-1 = pick from validation curve)");
    softcmd->add_option("--table-out", soft_out, "Output CSV path")->required();

    // metrics
    auto* metricscmd = app.add_subcommand("metrics", "Per-example instability CSV for a strategy");
    metricscmd->fallthrough();
    std::string m_exp, m_strategy, m_data, m_out;
    metricscmd->add_option("--exp", m_exp, "Experiment root from `run`")->required();
    metricscmd->add_option("--strategy", m_strategy, "Strategy name")->required();
    metricscmd->add_option("--data", m_data, "Dataset directory")->required();
    metricscmd->add_option("--csv-out", m_out, "Output CSV path")->required();

    // report
    auto* reportcmd = app.add_subcommand("report", "Comparison tables and plot data");
    reportcmd->fallthrough();
    std::string r_exp, r_data;
    double r_threshold = 0.56;
    int r_top_k = 4;
    reportcmd->add_option("--exp", r_exp, "Experiment root from `run`")->required();
    reportcmd->add_option("--data", r_data, "Dataset directory")->required();
    reportcmd->add_option("--threshold", r_threshold, "High-entropy subset threshold (nats)");
    reportcmd->add_option("--top-k", r_top_k, "Trajectory files per strategy");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) {
            if (out_dir.empty()) {
                std::cerr << "usage error: gen requires --out\n";
                return 2;
            }
            try {
                synth.validate();
            } catch (const std::invalid_argument& e) {
                std::cerr << "usage error: " << e.what() << "\n";
                return 2;
            }
            const auto [train, eval] = gen_synthetic(synth);
            fs::create_directories(out_dir);
            save_jsonl(fs::path(out_dir) / "train.jsonl", train);
            save_jsonl(fs::path(out_dir) / "eval.jsonl", eval);
            json manifest;
            manifest["kind"] = "synthetic";
            manifest["classes"] = synth.k;
            manifest["per_class"] = synth.n_per_class;
            manifest["dim"] = synth.dim;
            manifest["separation"] = synth.separation;
            manifest["ambiguous_frac"] = synth.ambiguous_frac;
            manifest["label_noise"] = synth.label_noise;
            manifest["seed"] = std::to_string(synth.seed);
            manifest["fingerprint"] = dataset_fingerprint(fs::path(out_dir) / "train.jsonl",
                                                          fs::path(out_dir) / "eval.jsonl");
            manifest["tool_version"] = kToolVersion;
            atomic_write(fs::path(out_dir) / "dataset.json", manifest.dump(2) + "\n");
            std::cout << "wrote " << train.size() << " train / " << eval.size()
                      << " eval examples to " << out_dir << "\n";
        } else if (*run) {
            if (out_dir.empty()) {
                std::cerr << "usage error: run requires --out\n";
                return 2;
            }
            StrategySpec spec;
            spec.base.lr = opt_lr;
            spec.base.epochs = opt_epochs;
            spec.base.batch_size = opt_batch;
            spec.base.capture_eval_every = opt_cee;
            spec.base.capture_train_stride = opt_stride;
            spec.base.temperature = opt_temp;
            spec.weight_decay = opt_wd;
            spec.alpha = opt_alpha;
            spec.temperature = opt_temp;
            spec.n_models = opt_teachers;
            spec.burn_in = opt_burn_in;
            spec.shared_teacher = opt_shared_teacher;
            int hidden = opt_hidden;

            if (!config_path.empty()) {
                std::ifstream in(config_path);
                if (!in) throw std::runtime_error("cannot open --config " + config_path);
                const json cfg = json::parse(in);
                auto take_d = [&](const char* key, double& dst, const CLI::Option* flag) {
                    if (cfg.contains(key) && flag->count() == 0) dst = cfg[key].get<double>();
                };
                auto take_i = [&](const char* key, int& dst, const CLI::Option* flag) {
                    if (cfg.contains(key) && flag->count() == 0) dst = cfg[key].get<int>();
                };
                take_d("lr", spec.base.lr, o_lr);
                take_i("epochs", spec.base.epochs, o_epochs);
                take_i("batch_size", spec.base.batch_size, o_batch);
                take_i("capture_eval_every", spec.base.capture_eval_every, o_cee);
                take_i("capture_train_stride", spec.base.capture_train_stride, o_stride);
                take_i("hidden_dim", hidden, o_hidden);
                if (cfg.contains("store_eval_probs")) {
                    spec.base.store_eval_probs = cfg["store_eval_probs"].get<bool>();
                }
                take_d("weight_decay", spec.weight_decay, o_wd);
                take_d("alpha", spec.alpha, o_alpha);
                take_i("n_models", spec.n_models, o_teachers);
                if (cfg.contains("temperature") && o_temp->count() == 0) {
                    spec.temperature = cfg["temperature"].get<double>();
                    spec.base.temperature = spec.temperature;
                }
                if (cfg.contains("burn_in") && o_burn->count() == 0) {
                    spec.burn_in = cfg["burn_in"].get<int64_t>();
                }
                if (cfg.contains("shared_teacher") && o_shared->count() == 0) {
                    spec.shared_teacher = cfg["shared_teacher"].get<bool>();
                }
                // A full strategy spec file may also carry the kind and seeds.
                if (cfg.contains("kind") && strategy.empty()) {
                    strategy = cfg["kind"].get<std::string>();
                }
                if (cfg.contains("seeds") && run_seeds_text.empty()) {
                    if (cfg["seeds"].is_string()) {
                        run_seeds_text = cfg["seeds"].get<std::string>();
                    } else {
                        for (const auto& s : cfg["seeds"]) {
                            spec.seeds.push_back(s.get<uint64_t>());
                        }
                    }
                }
            }
            if (strategy.empty()) {
                std::cerr << "usage error: run requires --strategy or \"kind\" in --config\n";
                return 2;
            }
            try {
                spec.kind = strategy_from_name(strategy);
            } catch (const std::invalid_argument& e) {
                std::cerr << "usage error: " << e.what() << "\n";
                return 2;
            }
            if (spec.seeds.empty()) {
                const std::string seeds_text =
                    !run_seeds_text.empty() ? run_seeds_text : global_seed_range;
                if (seeds_text.empty()) {
                    std::cerr << "usage error: run requires --seeds, --seed-range, or \"seeds\" "
                                 "in --config\n";
                    return 2;
                }
                try {
                    spec.seeds = parse_seed_range(seeds_text);
                } catch (const std::exception& e) {
                    std::cerr << "usage error: bad seed range \"" << seeds_text << "\"\n";
                    return 2;
                }
            }
            spec.base.smoothing_alpha = spec.alpha;
            spec.base.burn_in_steps = std::max<int64_t>(spec.burn_in, 0);

            const DataPair data = load_data_dir(data_dir);
            spec.base.arch =
                Layout{data.train.dim, hidden, data.train.labels.k()};

            const fs::path root(out_dir);
            write_experiment_manifest(root, data.fingerprint, "running");
            ExperimentPaths paths{root};
            const size_t trained =
                run_strategy_to_dir(paths, spec, data.train, data.eval, data.fingerprint, jobs);
            write_experiment_manifest(root, data.fingerprint, "complete");
            std::cout << strategy << ": trained " << trained << " seeds, skipped "
                      << (spec.seeds.size() - trained) << " (already complete)\n";
        } else if (*softcmd) {
            if (soft_mode == "ensemble") {
                if (soft_traces.empty()) {
                    std::cerr << "usage error: --mode ensemble requires --traces\n";
                    return 2;
                }
                std::vector<RunTrace> teachers;
                for (const auto& entry : fs::directory_iterator(soft_traces)) {
                    if (entry.is_directory()) teachers.push_back(load_trace(entry.path()));
                }
                if (teachers.empty()) {
                    throw std::runtime_error("no teacher run directories under " + soft_traces);
                }
                std::sort(teachers.begin(), teachers.end(),
                          [](const RunTrace& a, const RunTrace& b) { return a.seed < b.seed; });
                std::vector<ProbTable> tables;
                tables.reserve(teachers.size());
                for (const RunTrace& t : teachers) tables.push_back(final_train_table(t));
                const SoftLabelTable table = ensemble_soft_labels(tables, soft_temp);
                LabelSpace labels(teachers.front().label_names);
                save_soft_labels(soft_out, table, labels);
                std::cout << "wrote ensemble soft labels for " << table.ids.size()
                          << " examples from " << teachers.size() << " teachers\n";
            } else if (soft_mode == "temporal") {
                if (soft_trace.empty()) {
                    std::cerr << "usage error: --mode temporal requires --trace\n";
                    return 2;
                }
                const RunTrace teacher = load_trace(soft_trace);
                const int64_t n =
                    soft_burn >= 0 ? soft_burn : select_burn_in(teacher.eval_loss_curve);
                const SoftLabelTable table = temporal_soft_labels(teacher, n, soft_temp);
                LabelSpace labels(teacher.label_names);
                save_soft_labels(soft_out, table, labels);
                std::cout << "wrote temporal soft labels (burn-in " << n << ", "
                          << table.source_models << " captures averaged)\n";
            } else {
                std::cerr << "usage error: --mode must be ensemble or temporal\n";
                return 2;
            }
        } else if (*metricscmd) {
            const DataPair data = load_data_dir(m_data);
            ExperimentPaths paths{fs::path(m_exp)};
            std::vector<RunTrace> traces;
            for (const auto& entry : fs::directory_iterator(paths.traces_dir(m_strategy))) {
                if (entry.is_directory()) traces.push_back(load_trace(entry.path()));
            }
            std::sort(traces.begin(), traces.end(),
                      [](const RunTrace& a, const RunTrace& b) { return a.seed < b.seed; });
            const auto rows = compute_instability(traces);
            save_per_example_csv(m_out, rows, data.eval, data.eval.labels);
            std::cout << "wrote per-example metrics for " << rows.size() << " examples\n";
        } else if (*reportcmd) {
            if (out_dir.empty()) {
                std::cerr << "usage error: report requires --out\n";
                return 2;
            }
            const DataPair data = load_data_dir(r_data);
            ExperimentPaths paths{fs::path(r_exp)};
            ReportOptions options;
            options.high_entropy_threshold = r_threshold;
            options.top_k_trajectories = r_top_k;
            emit_report(paths, data.eval, out_dir, options);
            std::cout << "wrote report to " << out_dir << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
