#include "churn/training.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "churn/csv.hpp"
#include "churn/rng.hpp"

namespace churn {

namespace {

using json = nlohmann::json;

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

void absorb(std::string& s, const char* key, double v) {
    s += key;
    s += '=';
    s += hex64(std::bit_cast<uint64_t>(v));
    s += ';';
}

void absorb(std::string& s, const char* key, int64_t v) {
    s += key;
    s += '=';
    s += std::to_string(v);
    s += ';';
}

/// Predictions over one split with the given parameters. Records follow
/// dataset order.
PredictionSnapshot take_snapshot(const ModelParams& params, const Dataset& data, int64_t step,
                                 Split split, bool store_probs, double* mean_gold_xent) {
    PredictionSnapshot snap;
    snap.step = step;
    snap.split = split;
    const size_t n = data.size();
    const size_t k = static_cast<size_t>(data.labels.k());
    snap.pred.resize(n);
    snap.gold_prob.resize(n);
    if (store_probs) snap.probs.resize(n * k);
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const Example& ex = data.examples[i];
        const ForwardResult r = forward(params, ex.features);
        snap.pred[i] = argmax_label(r.probs);
        snap.gold_prob[i] = r.probs[static_cast<size_t>(ex.gold)];
        if (store_probs) {
            std::copy(r.probs.probs.begin(), r.probs.probs.end(),
                      snap.probs.begin() + static_cast<ptrdiff_t>(i * k));
        }
        loss -= std::log(std::max(snap.gold_prob[i], 1e-12));
    }
    if (mean_gold_xent) *mean_gold_xent = loss / static_cast<double>(n);
    return snap;
}

double snapshot_accuracy(const PredictionSnapshot& snap, const Dataset& data) {
    size_t hits = 0;
    for (size_t i = 0; i < snap.pred.size(); ++i) {
        if (snap.pred[i] == data.examples[i].gold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(snap.pred.size());
}

const char* split_name(Split s) { return s == Split::train ? "train" : "eval"; }

Split split_from(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "eval") return Split::eval;
    throw std::runtime_error("unknown split: " + s);
}

}  // namespace

std::string TrainConfig::hash() const {
    // Everything trajectory- or capture-relevant except the seed, which
    // varies per run under one config.
    std::string s;
    absorb(s, "lr", lr);
    absorb(s, "epochs", static_cast<int64_t>(epochs));
    absorb(s, "batch", static_cast<int64_t>(batch_size));
    absorb(s, "wd", weight_decay);
    absorb(s, "d", static_cast<int64_t>(arch.input_dim));
    absorb(s, "h", static_cast<int64_t>(arch.hidden_dim));
    absorb(s, "k", static_cast<int64_t>(arch.output_dim));
    absorb(s, "cee", static_cast<int64_t>(capture_eval_every));
    absorb(s, "sep", static_cast<int64_t>(store_eval_probs ? 1 : 0));
    absorb(s, "ctp", static_cast<int64_t>(capture_train_probs ? 1 : 0));
    absorb(s, "cts", static_cast<int64_t>(capture_train_stride));
    absorb(s, "burn", burn_in_steps);
    absorb(s, "cftp", static_cast<int64_t>(capture_final_train_probs ? 1 : 0));
    absorb(s, "alpha", smoothing_alpha);
    absorb(s, "temp", temperature);
    absorb(s, "swa", static_cast<int64_t>(swa_enabled ? 1 : 0));
    return hex64(fnv1a64(s));
}

const PredictionSnapshot& RunTrace::final_eval_snapshot() const {
    for (auto it = snapshots.rbegin(); it != snapshots.rend(); ++it) {
        if (it->split == Split::eval) return *it;
    }
    throw std::runtime_error("trace has no eval snapshot");
}

std::vector<const PredictionSnapshot*> RunTrace::eval_snapshots() const {
    std::vector<const PredictionSnapshot*> out;
    for (const auto& s : snapshots) {
        if (s.split == Split::eval) out.push_back(&s);
    }
    return out;
}

std::vector<const PredictionSnapshot*> RunTrace::train_snapshots() const {
    std::vector<const PredictionSnapshot*> out;
    for (const auto& s : snapshots) {
        if (s.split == Split::train) out.push_back(&s);
    }
    return out;
}

RunTrace train_run(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                   const SoftLabelTable* soft_targets) {
    if (train.size() == 0 || eval.size() == 0) {
        throw std::invalid_argument("empty dataset");
    }
    if (!(train.labels == eval.labels)) {
        throw std::invalid_argument("train/eval label spaces disagree");
    }
    // lr == 0 is allowed: the SWA identity checks train with frozen weights.
    if (config.lr < 0.0 || config.epochs < 1 || config.batch_size < 1 ||
        config.capture_eval_every < 1 || config.capture_train_stride < 1 ||
        config.burn_in_steps < 0) {
        throw std::invalid_argument("invalid training configuration");
    }
    const int k = train.labels.k();
    if (config.arch.output_dim != k || config.arch.input_dim != train.dim) {
        throw std::invalid_argument("architecture does not match dataset");
    }

    const size_t n = train.size();
    std::vector<SoftLabel> targets;
    targets.reserve(n);
    for (const Example& ex : train.examples) {
        if (soft_targets) {
            const ProbVector* t = soft_targets->find(ex.id);
            if (!t) throw std::invalid_argument("missing soft label for train example " + ex.id);
            if (t->k() != k) throw std::invalid_argument("soft label dimension mismatch");
            targets.push_back(SoftLabel{*t});
        } else {
            SoftLabel one_hot;
            one_hot.target.probs.assign(static_cast<size_t>(k), 0.0);
            one_hot.target.probs[static_cast<size_t>(ex.gold)] = 1.0;
            targets.push_back(std::move(one_hot));
        }
    }

    RunTrace trace;
    trace.run_id = "seed" + std::to_string(config.seed);
    trace.seed = config.seed;
    trace.config_hash = config.hash();
    for (const LabelId& l : train.labels.labels()) trace.label_names.push_back(l.name);
    for (const Example& ex : train.examples) trace.train_ids.push_back(ex.id);
    for (const Example& ex : eval.examples) trace.eval_ids.push_back(ex.id);

    ModelParams params = init_params(config.arch, config.seed);
    AdamState adam = AdamState::init(params.values.size(), config.lr, config.weight_decay);

    const int64_t steps_per_epoch =
        static_cast<int64_t>((n + static_cast<size_t>(config.batch_size) - 1) /
                             static_cast<size_t>(config.batch_size));
    // Epoch-fraction boundaries; j = capture_eval_every always lands on the
    // epoch's last step.
    std::set<int64_t> eval_boundaries;
    for (int j = 1; j <= config.capture_eval_every; ++j) {
        const int64_t b = (steps_per_epoch * j + config.capture_eval_every - 1) /
                          config.capture_eval_every;
        eval_boundaries.insert(std::max<int64_t>(b, 1));
    }

    std::vector<size_t> perm(n);
    std::vector<double> grad(params.values.size());
    std::vector<ModelParams> epoch_end;  // last two, for SWA

    auto push_eval = [&](const ModelParams& with, int64_t step) {
        double loss = 0.0;
        PredictionSnapshot snap =
            take_snapshot(with, eval, step, Split::eval, config.store_eval_probs, &loss);
        trace.eval_loss_curve.emplace_back(step, loss);
        trace.snapshots.push_back(std::move(snap));
    };

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(perm.begin(), perm.end(), size_t{0});
        Rng shuffle_rng(config.seed, /*stream=*/1 + static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(perm);

        for (int64_t s = 1; s <= steps_per_epoch; ++s) {
            const size_t begin = static_cast<size_t>(s - 1) * static_cast<size_t>(config.batch_size);
            const size_t end = std::min(n, begin + static_cast<size_t>(config.batch_size));
            std::fill(grad.begin(), grad.end(), 0.0);
            for (size_t bi = begin; bi < end; ++bi) {
                const size_t i = perm[bi];
                const std::vector<double> g =
                    backward(params, train.examples[i].features, targets[i]);
                for (size_t j = 0; j < grad.size(); ++j) grad[j] += g[j];
            }
            const double inv = 1.0 / static_cast<double>(end - begin);
            for (double& g : grad) g *= inv;
            adam_step(adam, params, grad);

            const int64_t global_step = static_cast<int64_t>(epoch) * steps_per_epoch + s;
            if (config.capture_train_probs && global_step > config.burn_in_steps &&
                (global_step - config.burn_in_steps - 1) % config.capture_train_stride == 0) {
                trace.snapshots.push_back(
                    take_snapshot(params, train, global_step, Split::train, true, nullptr));
            }
            const bool last_step = epoch == config.epochs - 1 && s == steps_per_epoch;
            if (eval_boundaries.count(s) && !last_step) {
                push_eval(params, global_step);
            }
        }
        if (config.swa_enabled) {
            epoch_end.push_back(params);
            if (epoch_end.size() > 2) epoch_end.erase(epoch_end.begin());
        }
    }

    const int64_t total_steps = static_cast<int64_t>(config.epochs) * steps_per_epoch;
    trace.final_params = config.swa_enabled ? average_params(epoch_end) : params;
    push_eval(trace.final_params, total_steps);
    if (config.capture_final_train_probs) {
        trace.snapshots.push_back(
            take_snapshot(trace.final_params, train, total_steps, Split::train, true, nullptr));
    }
    trace.final_eval_accuracy = snapshot_accuracy(trace.final_eval_snapshot(), eval);
    return trace;
}

std::vector<RunTrace> run_seeds(const TrainConfig& config, const Dataset& train,
                                const Dataset& eval, const SoftLabelTable* soft_targets,
                                const std::vector<uint64_t>& seeds, int jobs) {
    std::set<uint64_t> unique(seeds.begin(), seeds.end());
    if (unique.size() != seeds.size()) throw std::invalid_argument("duplicate seeds");
    std::vector<RunTrace> traces(seeds.size());
    parallel_for_tasks(jobs, static_cast<int>(seeds.size()), [&](int i) {
        TrainConfig c = config;
        c.seed = seeds[static_cast<size_t>(i)];
        traces[static_cast<size_t>(i)] = train_run(c, train, eval, soft_targets);
    });
    return traces;
}

int64_t select_burn_in(const std::vector<std::pair<int64_t, double>>& loss_curve) {
    if (loss_curve.empty()) throw std::invalid_argument("empty loss curve");
    for (size_t i = 1; i < loss_curve.size(); ++i) {
        if (loss_curve[i].first <= loss_curve[i - 1].first) {
            throw std::invalid_argument("loss curve steps must increase");
        }
    }
    const double threshold = 1.05 * loss_curve.back().second;
    // Smallest step whose entire suffix stays under the plateau threshold.
    size_t first_ok = loss_curve.size() - 1;
    for (size_t i = loss_curve.size(); i-- > 0;) {
        if (loss_curve[i].second <= threshold) {
            first_ok = i;
        } else {
            break;
        }
    }
    return loss_curve[first_ok].first;
}

void parallel_for_tasks(int jobs, int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (jobs < 1) jobs = 1;
    jobs = std::min(jobs, n);
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(jobs));
    for (int w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            while (true) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

void save_trace(const std::filesystem::path& dir, const RunTrace& trace) {
    std::filesystem::create_directories(dir);

    json manifest;
    manifest["run_id"] = trace.run_id;
    manifest["seed"] = std::to_string(trace.seed);
    manifest["config_hash"] = trace.config_hash;
    manifest["accuracy"] = trace.final_eval_accuracy;
    manifest["labels"] = trace.label_names;
    manifest["train_ids"] = trace.train_ids;
    manifest["eval_ids"] = trace.eval_ids;
    json snaps = json::array();
    for (const auto& s : trace.snapshots) {
        snaps.push_back({{"step", s.step},
                         {"split", split_name(s.split)},
                         {"has_probs", !s.probs.empty()}});
    }
    manifest["snapshots"] = snaps;
    json curve = json::array();
    for (const auto& [step, loss] : trace.eval_loss_curve) {
        curve.push_back({{"step", step}, {"loss", loss}});
    }
    manifest["eval_loss_curve"] = curve;

    {
        std::ofstream out(dir / "manifest.json", std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write trace manifest in " + dir.string());
        out << manifest.dump(2) << "\n";
    }
    {
        std::ofstream out(dir / "snapshots.csv", std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write snapshots in " + dir.string());
        out << "step,split,example_id,pred_label,gold_prob\n";
        for (const auto& s : trace.snapshots) {
            const auto& ids = s.split == Split::train ? trace.train_ids : trace.eval_ids;
            for (size_t i = 0; i < ids.size(); ++i) {
                out << s.step << ',' << split_name(s.split) << ',' << ids[i] << ','
                    << trace.label_names[static_cast<size_t>(s.pred[i])] << ','
                    << csv::num(s.gold_prob[i]) << "\n";
            }
        }
    }
    bool any_probs = false;
    for (const auto& s : trace.snapshots) any_probs |= !s.probs.empty();
    if (any_probs) {
        std::ofstream out(dir / "probs.bin", std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write probs in " + dir.string());
        for (const auto& s : trace.snapshots) {
            if (s.probs.empty()) continue;
            out.write(reinterpret_cast<const char*>(s.probs.data()),
                      static_cast<std::streamsize>(s.probs.size() * sizeof(double)));
        }
        if (!out) throw std::runtime_error("short write on probs in " + dir.string());
    }
    save_checkpoint(dir / "params.chrn", trace.final_params);
}

RunTrace load_trace(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("cannot open trace manifest in " + dir.string());
    json manifest = json::parse(mf);

    RunTrace trace;
    trace.run_id = manifest.at("run_id").get<std::string>();
    trace.seed = std::stoull(manifest.at("seed").get<std::string>());
    trace.config_hash = manifest.at("config_hash").get<std::string>();
    trace.final_eval_accuracy = manifest.at("accuracy").get<double>();
    trace.label_names = manifest.at("labels").get<std::vector<std::string>>();
    trace.train_ids = manifest.at("train_ids").get<std::vector<std::string>>();
    trace.eval_ids = manifest.at("eval_ids").get<std::vector<std::string>>();
    for (const auto& pt : manifest.at("eval_loss_curve")) {
        trace.eval_loss_curve.emplace_back(pt.at("step").get<int64_t>(),
                                           pt.at("loss").get<double>());
    }

    std::unordered_map<std::string, int> label_index;
    for (size_t i = 0; i < trace.label_names.size(); ++i) {
        label_index[trace.label_names[i]] = static_cast<int>(i);
    }
    const size_t k = trace.label_names.size();

    std::vector<bool> has_probs;
    for (const auto& sm : manifest.at("snapshots")) {
        PredictionSnapshot snap;
        snap.step = sm.at("step").get<int64_t>();
        snap.split = split_from(sm.at("split").get<std::string>());
        trace.snapshots.push_back(std::move(snap));
        has_probs.push_back(sm.at("has_probs").get<bool>());
    }

    std::ifstream rows(dir / "snapshots.csv");
    if (!rows) throw std::runtime_error("cannot open snapshots in " + dir.string());
    std::string line;
    std::getline(rows, line);  // header
    for (auto& snap : trace.snapshots) {
        const auto& ids = snap.split == Split::train ? trace.train_ids : trace.eval_ids;
        snap.pred.resize(ids.size());
        snap.gold_prob.resize(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (!std::getline(rows, line)) {
                throw std::runtime_error("truncated snapshots.csv in " + dir.string());
            }
            const auto fields = csv::split(line);
            if (fields.size() != 5 || fields[2] != ids[i]) {
                throw std::runtime_error("snapshot row mismatch in " + dir.string());
            }
            auto li = label_index.find(fields[3]);
            if (li == label_index.end()) {
                throw std::runtime_error("unknown predicted label in " + dir.string());
            }
            snap.pred[i] = li->second;
            snap.gold_prob[i] = std::stod(fields[4]);
        }
    }

    bool any_probs = false;
    for (bool b : has_probs) any_probs |= b;
    if (any_probs) {
        std::ifstream pb(dir / "probs.bin", std::ios::binary);
        if (!pb) throw std::runtime_error("cannot open probs.bin in " + dir.string());
        for (size_t si = 0; si < trace.snapshots.size(); ++si) {
            if (!has_probs[si]) continue;
            auto& snap = trace.snapshots[si];
            const auto& ids = snap.split == Split::train ? trace.train_ids : trace.eval_ids;
            snap.probs.resize(ids.size() * k);
            pb.read(reinterpret_cast<char*>(snap.probs.data()),
                    static_cast<std::streamsize>(snap.probs.size() * sizeof(double)));
            if (!pb) throw std::runtime_error("truncated probs.bin in " + dir.string());
        }
    }

    trace.final_params = load_checkpoint(dir / "params.chrn");
    return trace;
}

}  // namespace churn
