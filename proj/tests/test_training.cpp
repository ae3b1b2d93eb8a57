#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "churn/datagen.hpp"
#include "churn/rng.hpp"
#include "churn/training.hpp"

using namespace churn;

namespace {

Dataset tiny_dataset(size_t n, int dim, int k, uint64_t seed, const char* prefix) {
    Dataset d;
    std::vector<std::string> names;
    for (int c = 0; c < k; ++c) names.push_back("L" + std::to_string(c));
    d.labels = LabelSpace(names);
    d.dim = dim;
    Rng rng(seed);
    for (size_t i = 0; i < n; ++i) {
        Example ex;
        ex.id = std::string(prefix) + std::to_string(i);
        ex.gold = static_cast<int>(rng.bounded(static_cast<uint64_t>(k)));
        ex.features.emplace_back(static_cast<int32_t>(rng.bounded(static_cast<uint64_t>(dim))),
                                 rng.uniform(0.5, 1.5));
        d.examples.push_back(std::move(ex));
    }
    return d;
}

bool traces_equal(const RunTrace& a, const RunTrace& b) {
    if (a.seed != b.seed || a.config_hash != b.config_hash) return false;
    if (a.final_params.values != b.final_params.values) return false;
    if (a.final_eval_accuracy != b.final_eval_accuracy) return false;
    if (a.snapshots.size() != b.snapshots.size()) return false;
    for (size_t i = 0; i < a.snapshots.size(); ++i) {
        const auto& x = a.snapshots[i];
        const auto& y = b.snapshots[i];
        if (x.step != y.step || x.split != y.split || x.pred != y.pred ||
            x.gold_prob != y.gold_prob || x.probs != y.probs) {
            return false;
        }
    }
    return a.eval_loss_curve == b.eval_loss_curve;
}

TrainConfig small_config(const Dataset& train, uint64_t seed) {
    TrainConfig c;
    c.lr = 0.05;
    c.epochs = 3;
    c.batch_size = 16;
    c.seed = seed;
    c.arch = Layout{train.dim, 0, train.labels.k()};
    return c;
}

}  // namespace

TEST_CASE("step accounting matches ceil(n/batch) and burn-in capture counts") {
    // 11514 train examples, batch 256: 45 steps per epoch, 225 in 5 epochs;
    // teacher captures after step 180 land on steps 181..225.
    const Dataset train = tiny_dataset(11514, 4, 2, 1, "t");
    const Dataset eval = tiny_dataset(64, 4, 2, 2, "e");
    TrainConfig c;
    c.lr = 0.01;
    c.epochs = 5;
    c.batch_size = 256;
    c.seed = 3;
    c.arch = Layout{4, 0, 2};
    c.capture_train_probs = true;
    c.burn_in_steps = 180;
    const RunTrace trace = train_run(c, train, eval, nullptr);

    std::vector<int64_t> eval_steps;
    for (const auto* s : trace.eval_snapshots()) eval_steps.push_back(s->step);
    CHECK(eval_steps == std::vector<int64_t>{45, 90, 135, 180, 225});

    const auto teacher = trace.train_snapshots();
    REQUIRE(teacher.size() == 45);
    CHECK(teacher.front()->step == 181);
    CHECK(teacher.back()->step == 225);
    for (const auto* s : teacher) CHECK(!s->probs.empty());
}

TEST_CASE("identical seed and config give bit-identical traces") {
    const Dataset train = tiny_dataset(120, 6, 3, 4, "t");
    const Dataset eval = tiny_dataset(30, 6, 3, 5, "e");
    const TrainConfig c = small_config(train, 17);
    const RunTrace a = train_run(c, train, eval, nullptr);
    const RunTrace b = train_run(c, train, eval, nullptr);
    CHECK(traces_equal(a, b));

    TrainConfig c2 = c;
    c2.seed = 18;
    const RunTrace d = train_run(c2, train, eval, nullptr);
    CHECK(!traces_equal(a, d));
}

TEST_CASE("eval snapshot steps strictly increase and end after the last step") {
    const Dataset train = tiny_dataset(50, 4, 2, 6, "t");
    const Dataset eval = tiny_dataset(20, 4, 2, 7, "e");
    TrainConfig c = small_config(train, 1);
    c.epochs = 4;
    c.capture_eval_every = 3;
    const RunTrace trace = train_run(c, train, eval, nullptr);
    const auto snaps = trace.eval_snapshots();
    REQUIRE(snaps.size() >= 2);
    for (size_t i = 1; i < snaps.size(); ++i) CHECK(snaps[i]->step > snaps[i - 1]->step);
    const int64_t steps_per_epoch = (50 + c.batch_size - 1) / c.batch_size;
    CHECK(snaps.back()->step == c.epochs * steps_per_epoch);
}

TEST_CASE("swa with zero lr keeps the initial parameters") {
    const Dataset train = tiny_dataset(40, 4, 2, 8, "t");
    const Dataset eval = tiny_dataset(20, 4, 2, 9, "e");
    TrainConfig c = small_config(train, 21);
    c.lr = 0.0;
    c.epochs = 2;
    c.swa_enabled = true;
    const RunTrace trace = train_run(c, train, eval, nullptr);
    const ModelParams initial = init_params(c.arch, c.seed);
    CHECK(trace.final_params.values == initial.values);

    // lr = 0 also means the final accuracy equals the epoch-1 model's.
    TrainConfig one = c;
    one.epochs = 1;
    one.swa_enabled = false;
    const RunTrace epoch1 = train_run(one, train, eval, nullptr);
    CHECK(trace.final_eval_accuracy == epoch1.final_eval_accuracy);
}

TEST_CASE("swa with a single epoch reduces to the plain run") {
    const Dataset train = tiny_dataset(60, 4, 3, 10, "t");
    const Dataset eval = tiny_dataset(20, 4, 3, 11, "e");
    TrainConfig c = small_config(train, 33);
    c.epochs = 1;
    TrainConfig cs = c;
    cs.swa_enabled = true;
    const RunTrace plain = train_run(c, train, eval, nullptr);
    const RunTrace swa = train_run(cs, train, eval, nullptr);
    CHECK(plain.final_params.values == swa.final_params.values);
    CHECK(plain.final_eval_accuracy == swa.final_eval_accuracy);
}

TEST_CASE("run_seeds rejects duplicates and matches train_run for one seed") {
    const Dataset train = tiny_dataset(60, 4, 2, 12, "t");
    const Dataset eval = tiny_dataset(20, 4, 2, 13, "e");
    const TrainConfig c = small_config(train, 0);
    CHECK_THROWS_WITH_AS(run_seeds(c, train, eval, nullptr, {7, 7}, 1), "duplicate seeds",
                         std::invalid_argument);

    const auto single = run_seeds(c, train, eval, nullptr, {7}, 1);
    TrainConfig c7 = c;
    c7.seed = 7;
    CHECK(traces_equal(single.front(), train_run(c7, train, eval, nullptr)));
}

TEST_CASE("run_seeds output is invariant to worker count") {
    const Dataset train = tiny_dataset(80, 4, 2, 14, "t");
    const Dataset eval = tiny_dataset(20, 4, 2, 15, "e");
    const TrainConfig c = small_config(train, 0);
    const std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
    const auto serial = run_seeds(c, train, eval, nullptr, seeds, 1);
    const auto parallel = run_seeds(c, train, eval, nullptr, seeds, 3);
    REQUIRE(serial.size() == parallel.size());
    for (size_t i = 0; i < serial.size(); ++i) CHECK(traces_equal(serial[i], parallel[i]));
}

TEST_CASE("missing soft labels and empty datasets are rejected") {
    const Dataset train = tiny_dataset(20, 4, 2, 16, "t");
    const Dataset eval = tiny_dataset(10, 4, 2, 17, "e");
    const TrainConfig c = small_config(train, 0);

    SoftLabelTable incomplete;
    incomplete.ids = {train.examples[0].id};
    incomplete.targets = {ProbVector{{0.5, 0.5}}};
    incomplete.rebuild_index();
    CHECK_THROWS_AS(train_run(c, train, eval, &incomplete), std::invalid_argument);

    Dataset empty;
    empty.labels = train.labels;
    empty.dim = train.dim;
    CHECK_THROWS_WITH_AS(train_run(c, empty, eval, nullptr), "empty dataset",
                         std::invalid_argument);
}

TEST_CASE("select_burn_in finds the loss plateau") {
    // Monotone decreasing curve ending at 0.2: first step with loss <= 0.21.
    std::vector<std::pair<int64_t, double>> curve;
    const std::vector<double> losses = {1.0, 0.6, 0.4, 0.25, 0.209, 0.205, 0.2};
    for (size_t i = 0; i < losses.size(); ++i) {
        curve.emplace_back(static_cast<int64_t>(10 * (i + 1)), losses[i]);
    }
    CHECK(select_burn_in(curve) == 50);  // loss 0.209 is the first within 1.05 * 0.2

    std::vector<std::pair<int64_t, double>> constant = {{5, 0.3}, {10, 0.3}, {15, 0.3}};
    CHECK(select_burn_in(constant) == 5);

    std::vector<std::pair<int64_t, double>> single = {{42, 0.7}};
    CHECK(select_burn_in(single) == 42);

    // A late spike pushes the plateau past it.
    std::vector<std::pair<int64_t, double>> spike = {{1, 0.2}, {2, 0.9}, {3, 0.2}};
    CHECK(select_burn_in(spike) == 3);

    CHECK_THROWS_AS(select_burn_in({}), std::invalid_argument);
    CHECK_THROWS_AS(select_burn_in({{3, 0.1}, {3, 0.1}}), std::invalid_argument);
}

TEST_CASE("traces round-trip through the directory format") {
    const Dataset train = tiny_dataset(40, 4, 2, 18, "t");
    const Dataset eval = tiny_dataset(16, 4, 2, 19, "e");
    TrainConfig c = small_config(train, 77);
    c.capture_train_probs = true;
    c.store_eval_probs = true;
    const RunTrace trace = train_run(c, train, eval, nullptr);

    const auto dir = std::filesystem::temp_directory_path() / "churn_trace_test";
    std::filesystem::remove_all(dir);
    save_trace(dir, trace);
    const RunTrace back = load_trace(dir);
    CHECK(traces_equal(trace, back));
    CHECK(back.run_id == trace.run_id);
    CHECK(back.train_ids == trace.train_ids);
    CHECK(back.eval_ids == trace.eval_ids);
    CHECK(back.label_names == trace.label_names);
    std::filesystem::remove_all(dir);
}

TEST_CASE("epoch permutations depend only on seed and epoch") {
    // Same seed trains identically even when another run interleaves;
    // the shuffle stream is not shared state.
    const Dataset train = tiny_dataset(64, 4, 2, 20, "t");
    const Dataset eval = tiny_dataset(16, 4, 2, 21, "e");
    const TrainConfig c = small_config(train, 5);
    const RunTrace first = train_run(c, train, eval, nullptr);
    (void)train_run(small_config(train, 99), train, eval, nullptr);
    const RunTrace again = train_run(c, train, eval, nullptr);
    CHECK(traces_equal(first, again));
}
