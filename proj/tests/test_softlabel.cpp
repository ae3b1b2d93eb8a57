#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "churn/rng.hpp"
#include "churn/softlabel.hpp"
#include "churn/training.hpp"

using namespace churn;

namespace {

double dist_entropy(const ProbVector& p) {
    double h = 0.0;
    for (double x : p.probs) {
        if (x > 0.0) h -= x * std::log(x);
    }
    return h;
}

ProbVector random_simplex(Rng& rng, int k) {
    std::vector<double> raw(static_cast<size_t>(k));
    for (auto& x : raw) x = rng.uniform01() + 1e-3;
    return normalize(raw);
}

ProbTable table_of(std::vector<std::string> ids, int k, std::vector<double> probs) {
    ProbTable t;
    t.ids = std::move(ids);
    t.k = k;
    t.probs = std::move(probs);
    return t;
}

/// Hand-built teacher trace: train captures at the given steps.
RunTrace teacher_trace(std::vector<std::string> train_ids, int k,
                       const std::vector<std::pair<int64_t, std::vector<double>>>& captures) {
    RunTrace t;
    t.run_id = "teacher";
    for (int c = 0; c < k; ++c) t.label_names.push_back("L" + std::to_string(c));
    t.train_ids = std::move(train_ids);
    for (const auto& [step, probs] : captures) {
        PredictionSnapshot s;
        s.step = step;
        s.split = Split::train;
        const size_t n = t.train_ids.size();
        s.pred.assign(n, 0);
        s.gold_prob.assign(n, 0.0);
        s.probs = probs;
        t.snapshots.push_back(std::move(s));
    }
    return t;
}

}  // namespace

TEST_CASE("uniform smoothing formula") {
    const SoftLabel a0 = uniform_smooth(1, 3, 0.0);
    CHECK(a0.target.probs == std::vector<double>{0.0, 1.0, 0.0});

    const SoftLabel a = uniform_smooth(2, 5, 0.1);
    const std::vector<double> expected = {0.02, 0.02, 0.92, 0.02, 0.02};
    for (size_t i = 0; i < expected.size(); ++i) {
        CHECK(a.target.probs[i] == doctest::Approx(expected[i]).epsilon(1e-15));
    }

    const SoftLabel a1 = uniform_smooth(0, 4, 1.0);
    for (double p : a1.target.probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

    CHECK_THROWS_AS(uniform_smooth(0, 2, 1.5), std::invalid_argument);
}

TEST_CASE("uniform smoothing entropy grows with alpha") {
    double prev = -1.0;
    for (double alpha : {0.0, 0.1, 0.3, 0.5, 0.8, 1.0}) {
        const double h = dist_entropy(uniform_smooth(1, 6, alpha).target);
        CHECK(h > prev - 1e-15);
        prev = h;
    }
}

TEST_CASE("temperature scaling closed form and identity") {
    const ProbVector q = temperature_scale(ProbVector{{0.9, 0.1}}, 0.5);
    CHECK(std::abs(q[0] - 0.75) <= 1e-12);
    CHECK(std::abs(q[1] - 0.25) <= 1e-12);

    Rng rng(21);
    const ProbVector p = random_simplex(rng, 5);
    const ProbVector same = temperature_scale(p, 1.0);
    for (size_t i = 0; i < p.probs.size(); ++i) CHECK(std::abs(same.probs[i] - p.probs[i]) <= 1e-12);

    const ProbVector u = temperature_scale(ProbVector{{0.25, 0.25, 0.25, 0.25}}, 0.3);
    for (double x : u.probs) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));

    CHECK_THROWS_AS(temperature_scale(p, 0.0), std::invalid_argument);
}

TEST_CASE("temperature below one preserves argmax and raises entropy") {
    Rng rng(22);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 2 + static_cast<int>(rng.bounded(6));
        const ProbVector p = random_simplex(rng, k);
        for (double t : {0.25, 0.5, 0.75}) {
            const ProbVector q = temperature_scale(p, t);
            CHECK(argmax_label(q) == argmax_label(p));
            CHECK(dist_entropy(q) >= dist_entropy(p) - 1e-12);
        }
    }
}

TEST_CASE("temperature scaling keeps exact zeros at zero") {
    const ProbVector q = temperature_scale(ProbVector{{0.0, 0.4, 0.6}}, 0.5);
    CHECK(q[0] == 0.0);
    CHECK(q[1] > 0.0);
}

TEST_CASE("ensemble soft labels average and temperature-scale") {
    const auto t1 = table_of({"a", "b"}, 2, {1.0, 0.0, 0.25, 0.75});
    const auto t2 = table_of({"a", "b"}, 2, {0.0, 1.0, 0.25, 0.75});
    const SoftLabelTable table = ensemble_soft_labels({t1, t2}, 1.0);
    CHECK(table.source_models == 2);
    const ProbVector* a = table.find("a");
    REQUIRE(a != nullptr);
    CHECK(a->probs[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(a->probs[1] == doctest::Approx(0.5).epsilon(1e-15));

    // N identical tables reduce to the temperature-scaled table.
    const SoftLabelTable rep = ensemble_soft_labels({t1, t1, t1}, 0.5);
    const SoftLabelTable one = ensemble_soft_labels({t1}, 0.5);
    for (size_t i = 0; i < rep.targets.size(); ++i) {
        for (size_t c = 0; c < 2; ++c) {
            CHECK(rep.targets[i].probs[c] == doctest::Approx(one.targets[i].probs[c]).epsilon(1e-15));
        }
    }
}

TEST_CASE("ensemble soft labels reject coverage mismatches") {
    const auto t1 = table_of({"a", "b"}, 2, {1.0, 0.0, 0.0, 1.0});
    const auto t2 = table_of({"a", "c"}, 2, {1.0, 0.0, 0.0, 1.0});
    CHECK_THROWS_WITH_AS(ensemble_soft_labels({t1, t2}, 1.0),
                         "ensemble_soft_labels: coverage mismatch, ids c", std::invalid_argument);
}

TEST_CASE("temporal soft labels average post-burn-in captures") {
    // Captures at steps 1..5; p(a) drifts from 0.2 to 1.0 by step.
    std::vector<std::pair<int64_t, std::vector<double>>> captures;
    for (int64_t s = 1; s <= 5; ++s) {
        const double pa = 0.2 * static_cast<double>(s);
        captures.push_back({s, {pa, 1.0 - pa}});
    }
    const RunTrace teacher = teacher_trace({"a"}, 2, captures);

    // burn_in = 2 keeps steps 3, 4, 5: mean p(a) = (0.6 + 0.8 + 1.0)/3 = 0.8.
    const SoftLabelTable table = temporal_soft_labels(teacher, 2, 1.0);
    CHECK(table.source_models == 3);
    CHECK(table.burn_in == 2);
    CHECK(table.capture_stride == 1);
    CHECK(table.find("a")->probs[0] == doctest::Approx(0.8).epsilon(1e-12));

    // Single surviving capture is just its temperature scale.
    const SoftLabelTable last = temporal_soft_labels(teacher, 4, 0.5);
    CHECK(last.source_models == 1);
    CHECK(last.find("a")->probs[0] == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(temporal_soft_labels(teacher, 5, 1.0), "burn-in exhausts trace",
                         std::runtime_error);
}

TEST_CASE("temporal equals ensemble when every capture is identical") {
    std::vector<std::pair<int64_t, std::vector<double>>> captures;
    for (int64_t s = 1; s <= 4; ++s) captures.push_back({s, {0.7, 0.3}});
    const RunTrace teacher = teacher_trace({"a"}, 2, captures);
    const SoftLabelTable temporal = temporal_soft_labels(teacher, 0, 0.5);
    const SoftLabelTable ensemble =
        ensemble_soft_labels({table_of({"a"}, 2, {0.7, 0.3})}, 0.5);
    for (size_t c = 0; c < 2; ++c) {
        CHECK(temporal.find("a")->probs[c] ==
              doctest::Approx(ensemble.find("a")->probs[c]).epsilon(1e-12));
    }

    // At T = 1 the student targets are exactly the teacher's converged table.
    const SoftLabelTable identity = temporal_soft_labels(teacher, 0, 1.0);
    CHECK(identity.find("a")->probs[0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(identity.find("a")->probs[1] == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("temporal counts 45 captures for steps 181..225 at burn-in 180") {
    std::vector<std::pair<int64_t, std::vector<double>>> captures;
    for (int64_t s = 181; s <= 225; ++s) captures.push_back({s, {0.5, 0.5}});
    const RunTrace teacher = teacher_trace({"a"}, 2, captures);
    const SoftLabelTable table = temporal_soft_labels(teacher, 180, 0.5);
    CHECK(table.source_models == 45);
}

TEST_CASE("running mean streaming equals the batch mean") {
    Rng rng(23);
    const int k = 3;
    const std::vector<std::string> ids = {"a", "b", "c", "d"};
    std::vector<ProbTable> tables;
    RunningMeanProbs state;
    for (int u = 0; u < 17; ++u) {
        ProbTable t;
        t.ids = ids;
        t.k = k;
        for (size_t i = 0; i < ids.size(); ++i) {
            const ProbVector p = random_simplex(rng, k);
            t.probs.insert(t.probs.end(), p.probs.begin(), p.probs.end());
        }
        running_mean_update(state, t);
        tables.push_back(std::move(t));
    }
    CHECK(state.samples_seen == 17);
    // Batch oracle.
    std::vector<double> batch(ids.size() * k, 0.0);
    for (const auto& t : tables) {
        for (size_t i = 0; i < batch.size(); ++i) batch[i] += t.probs[i];
    }
    for (auto& x : batch) x /= 17.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        CHECK(std::abs(state.mean[i] - batch[i]) <= 1e-12);
    }
}

TEST_CASE("running mean basics") {
    RunningMeanProbs state;
    running_mean_update(state, table_of({"a"}, 2, {1.0, 0.0}));
    CHECK(state.samples_seen == 1);
    CHECK(state.mean == std::vector<double>{1.0, 0.0});
    running_mean_update(state, table_of({"a"}, 2, {0.0, 1.0}));
    CHECK(state.mean[0] == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(running_mean_update(state, table_of({"b"}, 2, {1.0, 0.0})),
                    std::invalid_argument);
}

TEST_CASE("soft label tables round-trip through CSV") {
    Rng rng(24);
    SoftLabelTable table;
    table.provenance = SoftLabelTable::Provenance::temporal;
    table.temperature = 0.5;
    table.burn_in = 180;
    table.capture_stride = 2;
    table.source_models = 23;
    for (int i = 0; i < 6; ++i) {
        table.ids.push_back("ex" + std::to_string(i));
        table.targets.push_back(random_simplex(rng, 4));
    }
    table.rebuild_index();

    const auto dir = std::filesystem::temp_directory_path() / "churn_soft_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "table.csv";
    const LabelSpace labels({"w", "x", "y", "z"});
    save_soft_labels(path, table, labels);
    const SoftLabelTable back = load_soft_labels(path);
    CHECK(back.provenance == SoftLabelTable::Provenance::temporal);
    CHECK(back.temperature == 0.5);
    CHECK(back.burn_in == 180);
    CHECK(back.capture_stride == 2);
    CHECK(back.source_models == 23);
    REQUIRE(back.ids == table.ids);
    for (size_t i = 0; i < table.targets.size(); ++i) {
        for (size_t c = 0; c < 4; ++c) {
            CHECK(back.targets[i].probs[c] == table.targets[i].probs[c]);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("builder outputs satisfy the simplex invariants") {
    Rng rng(25);
    for (int trial = 0; trial < 20; ++trial) {
        const int k = 2 + static_cast<int>(rng.bounded(5));
        std::vector<ProbTable> tables;
        for (int m = 0; m < 3; ++m) {
            ProbTable t;
            t.ids = {"a", "b"};
            t.k = k;
            for (int i = 0; i < 2; ++i) {
                const ProbVector p = random_simplex(rng, k);
                t.probs.insert(t.probs.end(), p.probs.begin(), p.probs.end());
            }
            tables.push_back(std::move(t));
        }
        const SoftLabelTable table = ensemble_soft_labels(tables, 0.25 + rng.uniform01());
        for (const auto& target : table.targets) CHECK_NOTHROW(target.validate());
    }
}
