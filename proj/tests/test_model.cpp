#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "churn/model.hpp"
#include "churn/rng.hpp"

using namespace churn;

namespace {

SoftLabel soft(std::vector<double> t) { return SoftLabel{ProbVector{std::move(t)}}; }

SoftLabel random_simplex(Rng& rng, int k) {
    std::vector<double> raw(static_cast<size_t>(k));
    for (auto& x : raw) x = rng.uniform01() + 1e-3;
    return SoftLabel{normalize(raw)};
}

SparseVec random_features(Rng& rng, int d) {
    SparseVec x;
    for (int i = 0; i < d; ++i) {
        if (rng.uniform01() < 0.6) x.emplace_back(i, rng.uniform(-2.0, 2.0));
    }
    return x;
}

double loss_at(const ModelParams& p, const SparseVec& x, const SoftLabel& t) {
    return xent_soft(forward(p, x).probs, t);
}

double dist_entropy(const ProbVector& p) {
    double h = 0.0;
    for (double x : p.probs) {
        if (x > 0.0) h -= x * std::log(x);
    }
    return h;
}

}  // namespace

TEST_CASE("featurize hashes tokens and scales by 1/sqrt(token count)") {
    const SparseVec fj = featurize("funny joke", 4096, 0);
    REQUIRE(fj.size() == 2);
    CHECK(fj[0].second == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(fj[1].second == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));

    const SparseVec ggg = featurize("go go go", 4096, 0);
    REQUIRE(ggg.size() == 1);
    CHECK(ggg[0].second == doctest::Approx(3.0 / std::sqrt(3.0)).epsilon(1e-15));

    CHECK(featurize("", 4096, 0).empty());
    CHECK(featurize("  .,!  ", 4096, 0).empty());
}

TEST_CASE("featurize lowercases and is salt-sensitive") {
    CHECK(featurize("Funny JOKE", 64, 7) == featurize("funny joke", 64, 7));
    CHECK(featurize("funny joke", 4096, 1) != featurize("funny joke", 4096, 2));
    CHECK_THROWS_AS(featurize("x", 100, 0), std::invalid_argument);  // not a power of two
}

TEST_CASE("forward with zero params is uniform") {
    ModelParams p;
    p.layout = Layout{3, 0, 4};
    p.values.assign(p.layout.param_count(), 0.0);
    const ForwardResult r = forward(p, {{0, 1.0}, {2, -1.0}});
    for (double q : r.probs.probs) CHECK(q == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("forward closed form: softmax of (ln 2, 0)") {
    ModelParams p;
    p.layout = Layout{1, 0, 2};
    p.values = {std::log(2.0), 0.0, 0.0, 0.0};  // W1 = [[ln2, 0]], b = 0
    const ForwardResult r = forward(p, {{0, 1.0}});
    CHECK(r.probs[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(r.probs[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("forward probs sum to 1 and are shift invariant") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const int d = 2 + static_cast<int>(rng.bounded(6));
        const int h = static_cast<int>(rng.bounded(5));
        const int k = 2 + static_cast<int>(rng.bounded(4));
        ModelParams p = init_params(Layout{d, h, k}, rng.next_u64());
        const SparseVec x = random_features(rng, d);
        const ForwardResult r = forward(p, x);
        double sum = 0.0;
        for (double q : r.probs.probs) sum += q;
        CHECK(std::abs(sum - 1.0) <= 1e-12);

        // Shifting every logit by a constant must not move the probabilities.
        // For the linear model that is a constant added to the bias row.
        if (h == 0) {
            ModelParams shifted = p;
            for (int c = 0; c < k; ++c) {
                shifted.values[static_cast<size_t>(d) * k + static_cast<size_t>(c)] += 3.7;
            }
            const ForwardResult r2 = forward(shifted, x);
            for (int c = 0; c < k; ++c) {
                CHECK(std::abs(r.probs[static_cast<size_t>(c)] -
                               r2.probs[static_cast<size_t>(c)]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("forward reports numeric overflow") {
    ModelParams p;
    p.layout = Layout{1, 0, 2};
    p.values = {1e308, 0.0, 0.0, 0.0};
    CHECK_THROWS_WITH_AS(forward(p, {{0, 1e308}}), "numeric overflow", std::runtime_error);
}

TEST_CASE("cross entropy examples") {
    CHECK(xent_soft(ProbVector{{0.5, 0.5}}, soft({1.0, 0.0})) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(xent_soft(ProbVector{{0.75, 0.25}}, soft({0.75, 0.25})) ==
          doctest::Approx(0.5623351446188083).epsilon(1e-12));
}

TEST_CASE("cross entropy dominates target entropy (Gibbs)") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng.bounded(5));
        const SoftLabel t = random_simplex(rng, k);
        const SoftLabel p = random_simplex(rng, k);
        const double h_t = dist_entropy(t.target);
        CHECK(xent_soft(p.target, t) >= h_t - 1e-12);
        CHECK(xent_soft(t.target, t) == doctest::Approx(h_t).epsilon(1e-9));
    }
}

TEST_CASE("logit-layer gradient for the linear model is outer(x, p - t)") {
    Rng rng(9);
    const Layout layout{4, 0, 3};
    ModelParams p = init_params(layout, 11);
    const SparseVec x = {{0, 0.5}, {2, -1.25}, {3, 2.0}};
    const SoftLabel t = random_simplex(rng, 3);
    const ForwardResult f = forward(p, x);
    const std::vector<double> g = backward(p, x, t);
    std::vector<double> dz(3);
    for (int c = 0; c < 3; ++c) dz[static_cast<size_t>(c)] = f.probs[static_cast<size_t>(c)] - t.target[static_cast<size_t>(c)];
    for (const auto& [idx, val] : x) {
        for (int c = 0; c < 3; ++c) {
            CHECK(g[static_cast<size_t>(idx) * 3 + static_cast<size_t>(c)] ==
                  doctest::Approx(val * dz[static_cast<size_t>(c)]).epsilon(1e-12));
        }
    }
    // Bias row equals dz itself.
    for (int c = 0; c < 3; ++c) {
        CHECK(g[4 * 3 + static_cast<size_t>(c)] ==
              doctest::Approx(dz[static_cast<size_t>(c)]).epsilon(1e-12));
    }
}

TEST_CASE("gradient vanishes when probs equal the target") {
    ModelParams p;
    p.layout = Layout{2, 0, 2};
    p.values.assign(p.layout.param_count(), 0.0);  // uniform output
    const std::vector<double> g = backward(p, {{0, 1.0}}, soft({0.5, 0.5}));
    for (double v : g) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(10);
    const double h_step = 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int d = 1 + static_cast<int>(rng.bounded(8));
        const int hid = static_cast<int>(rng.bounded(9));  // 0..8
        const int k = 2 + static_cast<int>(rng.bounded(4));
        ModelParams p = init_params(Layout{d, hid, k}, rng.next_u64());
        for (auto& v : p.values) v += rng.uniform(-0.5, 0.5);
        SparseVec x = random_features(rng, d);
        if (x.empty()) x.emplace_back(0, 1.0);
        const SoftLabel t = random_simplex(rng, k);

        const std::vector<double> g = backward(p, x, t);
        for (size_t i = 0; i < p.values.size(); ++i) {
            ModelParams lo = p, hi = p;
            lo.values[i] -= h_step;
            hi.values[i] += h_step;
            const double fd = (loss_at(hi, x, t) - loss_at(lo, x, t)) / (2.0 * h_step);
            const double rel =
                std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("first adam step moves by about -lr * sign(g)") {
    ModelParams p;
    p.layout = Layout{1, 0, 2};
    p.values = {0.3, -0.2, 0.1, 0.0};
    AdamState s = AdamState::init(p.values.size(), 0.01, 0.0);
    const std::vector<double> g = {0.5, -1.5, 2.0, -0.01};
    const ModelParams before = p;
    adam_step(s, p, g);
    CHECK(s.t == 1);
    for (size_t i = 0; i < p.values.size(); ++i) {
        const double delta = p.values[i] - before.values[i];
        const double expected = -0.01 * (g[i] > 0 ? 1.0 : -1.0);
        CHECK(std::abs(delta - expected) <= 0.01 * 1e-4);
    }
}

TEST_CASE("zero gradient with zero decay leaves params untouched") {
    ModelParams p = init_params(Layout{3, 2, 2}, 5);
    const ModelParams before = p;
    AdamState s = AdamState::init(p.values.size(), 0.1, 0.0);
    adam_step(s, p, std::vector<double>(p.values.size(), 0.0));
    CHECK(p.values == before.values);
}

TEST_CASE("decay-only update scales params by (1 - lr*wd)") {
    ModelParams p;
    p.layout = Layout{1, 0, 2};
    p.values = {1.0, -2.0, 4.0, 0.5};
    AdamState s = AdamState::init(p.values.size(), 1e-4, 1e-3);
    const ModelParams before = p;
    adam_step(s, p, std::vector<double>(p.values.size(), 0.0));
    for (size_t i = 0; i < p.values.size(); ++i) {
        CHECK(p.values[i] == doctest::Approx(before.values[i] * (1.0 - 1e-7)).epsilon(1e-15));
    }
}

TEST_CASE("average_params is the elementwise mean") {
    ModelParams a, b;
    a.layout = b.layout = Layout{1, 0, 2};
    a.values = {1.0, 2.0, 3.0, 4.0};
    b.values = {0.0, 0.0, 0.0, 0.0};
    const ModelParams m = average_params({a, b});
    for (size_t i = 0; i < a.values.size(); ++i) {
        CHECK(m.values[i] == a.values[i] / 2.0);
    }
    const ModelParams same = average_params({a, a});
    CHECK(same.values == a.values);

    ModelParams c;
    c.layout = Layout{2, 0, 2};
    c.values.assign(c.layout.param_count(), 0.0);
    CHECK_THROWS_AS(average_params({a, c}), std::invalid_argument);
    CHECK_THROWS_AS(average_params({}), std::invalid_argument);
}

TEST_CASE("average_params is permutation invariant") {
    Rng rng(12);
    std::vector<ModelParams> list;
    for (int i = 0; i < 4; ++i) list.push_back(init_params(Layout{3, 2, 3}, rng.next_u64()));
    const ModelParams m1 = average_params(list);
    std::swap(list[0], list[3]);
    std::swap(list[1], list[2]);
    const ModelParams m2 = average_params(list);
    for (size_t i = 0; i < m1.values.size(); ++i) {
        CHECK(m1.values[i] == doctest::Approx(m2.values[i]).epsilon(1e-15));
    }
}

TEST_CASE("checkpoints round-trip bit exactly") {
    const auto dir = std::filesystem::temp_directory_path() / "churn_ckpt_test";
    std::filesystem::create_directories(dir);
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        const Layout layout{1 + static_cast<int>(rng.bounded(6)),
                            static_cast<int>(rng.bounded(4)),
                            2 + static_cast<int>(rng.bounded(4))};
        ModelParams p = init_params(layout, rng.next_u64());
        const auto path = dir / ("p" + std::to_string(trial) + ".chrn");
        save_checkpoint(path, p);
        const ModelParams q = load_checkpoint(path);
        CHECK(q.layout == p.layout);
        REQUIRE(q.values.size() == p.values.size());
        for (size_t i = 0; i < p.values.size(); ++i) {
            CHECK(std::memcmp(&p.values[i], &q.values[i], sizeof(double)) == 0);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("init_params is deterministic and bounded by 1/sqrt(fan_in)") {
    const Layout layout{16, 8, 4};
    const ModelParams a = init_params(layout, 99);
    const ModelParams b = init_params(layout, 99);
    CHECK(a.values == b.values);
    const ModelParams c = init_params(layout, 100);
    CHECK(a.values != c.values);

    const double bound1 = 1.0 / std::sqrt(16.0);
    for (size_t i = 0; i < 16 * 8; ++i) CHECK(std::abs(a.values[i]) <= bound1);
    // Biases stay zero.
    for (size_t i = 16 * 8; i < 16 * 8 + 8; ++i) CHECK(a.values[i] == 0.0);
}
