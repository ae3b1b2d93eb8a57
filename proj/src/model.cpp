#include "churn/model.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

#include "churn/rng.hpp"

namespace churn {

namespace {

constexpr uint16_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'C', 'H', 'R', 'N'};

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

void check_layout(const Layout& layout) {
    if (layout.input_dim < 1 || layout.output_dim < 2 || layout.hidden_dim < 0) {
        throw std::invalid_argument("invalid model layout");
    }
}

// Hidden pre-activation a = W1^T x + b1 (or the logits directly when linear).
void affine_sparse(const double* w, const double* b, int cols, const SparseVec& x,
                   std::vector<double>& out) {
    out.assign(static_cast<size_t>(cols), 0.0);
    for (const auto& [idx, val] : x) {
        const double* row = w + static_cast<size_t>(idx) * static_cast<size_t>(cols);
        for (int c = 0; c < cols; ++c) out[static_cast<size_t>(c)] += val * row[c];
    }
    for (int c = 0; c < cols; ++c) out[static_cast<size_t>(c)] += b[c];
}

}  // namespace

size_t Layout::param_count() const {
    const size_t d = static_cast<size_t>(input_dim);
    const size_t h = static_cast<size_t>(hidden_dim);
    const size_t k = static_cast<size_t>(output_dim);
    if (hidden_dim == 0) return d * k + k;
    return d * h + h + h * k + k;
}

AdamState AdamState::init(size_t n_params, double lr, double weight_decay) {
    AdamState s;
    s.m.assign(n_params, 0.0);
    s.v.assign(n_params, 0.0);
    s.lr = lr;
    s.weight_decay = weight_decay;
    return s;
}

SparseVec featurize(std::string_view text, int dim, uint64_t salt) {
    if (!is_pow2(dim) || dim < 2) {
        throw std::invalid_argument("featurizer dim must be a power of two >= 2");
    }
    const uint64_t mask = static_cast<uint64_t>(dim) - 1;
    const uint64_t salted = fnv1a64_u64(salt);

    std::vector<double> weights;  // lazily sized; dim can be large but tokens few
    std::vector<int32_t> touched;
    size_t n_tokens = 0;
    size_t i = 0;
    const size_t n = text.size();
    std::string token;
    while (i < n) {
        token.clear();
        while (i < n && std::isalnum(static_cast<unsigned char>(text[i]))) {
            token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
            ++i;
        }
        if (!token.empty()) {
            ++n_tokens;
            const int32_t idx = static_cast<int32_t>(fnv1a64(token, salted) & mask);
            if (weights.empty()) weights.assign(static_cast<size_t>(dim), 0.0);
            if (weights[static_cast<size_t>(idx)] == 0.0) touched.push_back(idx);
            weights[static_cast<size_t>(idx)] += 1.0;
        } else {
            ++i;
        }
    }
    SparseVec out;
    if (n_tokens == 0) return out;
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_tokens));
    std::sort(touched.begin(), touched.end());
    out.reserve(touched.size());
    for (int32_t idx : touched) {
        out.emplace_back(idx, weights[static_cast<size_t>(idx)] * scale);
    }
    return out;
}

ForwardResult forward(const ModelParams& params, const SparseVec& features) {
    check_layout(params.layout);
    const int d = params.layout.input_dim;
    const int h = params.layout.hidden_dim;
    const int k = params.layout.output_dim;
    if (params.values.size() != params.layout.param_count()) {
        throw std::invalid_argument("parameter vector does not match layout");
    }
    for (const auto& [idx, val] : features) {
        if (idx < 0 || idx >= d) throw std::invalid_argument("feature index out of range");
        (void)val;
    }

    ForwardResult r;
    if (h == 0) {
        affine_sparse(params.values.data(), params.values.data() + static_cast<size_t>(d) * k, k,
                      features, r.logits);
    } else {
        const double* w1 = params.values.data();
        const double* b1 = w1 + static_cast<size_t>(d) * h;
        const double* w2 = b1 + h;
        const double* b2 = w2 + static_cast<size_t>(h) * k;
        std::vector<double> hidden;
        affine_sparse(w1, b1, h, features, hidden);
        for (double& a : hidden) a = std::tanh(a);
        r.logits.assign(static_cast<size_t>(k), 0.0);
        for (int j = 0; j < h; ++j) {
            const double hj = hidden[static_cast<size_t>(j)];
            const double* row = w2 + static_cast<size_t>(j) * k;
            for (int c = 0; c < k; ++c) r.logits[static_cast<size_t>(c)] += hj * row[c];
        }
        for (int c = 0; c < k; ++c) r.logits[static_cast<size_t>(c)] += b2[c];
    }

    double zmax = r.logits[0];
    for (double z : r.logits) zmax = std::max(zmax, z);
    double sum = 0.0;
    r.probs.probs.resize(r.logits.size());
    for (size_t c = 0; c < r.logits.size(); ++c) {
        const double e = std::exp(r.logits[c] - zmax);
        r.probs.probs[c] = e;
        sum += e;
    }
    for (double& p : r.probs.probs) p /= sum;
    for (double z : r.logits) {
        if (!std::isfinite(z)) throw std::runtime_error("numeric overflow");
    }
    for (double p : r.probs.probs) {
        if (!std::isfinite(p)) throw std::runtime_error("numeric overflow");
    }
    return r;
}

double xent_soft(const ProbVector& probs, const SoftLabel& target) {
    if (probs.k() != target.target.k()) throw std::invalid_argument("dimension mismatch");
    double loss = 0.0;
    for (int c = 0; c < probs.k(); ++c) {
        const double t = target.target[static_cast<size_t>(c)];
        if (t == 0.0) continue;
        loss -= t * std::log(std::max(probs[static_cast<size_t>(c)], 1e-12));
    }
    return loss;
}

std::vector<double> backward(const ModelParams& params, const SparseVec& features,
                             const SoftLabel& target) {
    const int d = params.layout.input_dim;
    const int h = params.layout.hidden_dim;
    const int k = params.layout.output_dim;
    if (target.target.k() != k) throw std::invalid_argument("dimension mismatch");

    std::vector<double> grad(params.values.size(), 0.0);
    // dL/dz = p - t at the logits, the softmax-xent identity.
    if (h == 0) {
        const ForwardResult r = forward(params, features);
        std::vector<double> dz(static_cast<size_t>(k));
        for (int c = 0; c < k; ++c) {
            dz[static_cast<size_t>(c)] =
                r.probs[static_cast<size_t>(c)] - target.target[static_cast<size_t>(c)];
        }
        for (const auto& [idx, val] : features) {
            double* grow = grad.data() + static_cast<size_t>(idx) * k;
            for (int c = 0; c < k; ++c) grow[c] += val * dz[static_cast<size_t>(c)];
        }
        double* gb = grad.data() + static_cast<size_t>(d) * k;
        for (int c = 0; c < k; ++c) gb[c] += dz[static_cast<size_t>(c)];
        return grad;
    }

    const double* w1 = params.values.data();
    const double* b1 = w1 + static_cast<size_t>(d) * h;
    const double* w2 = b1 + h;

    std::vector<double> hidden;
    affine_sparse(w1, b1, h, features, hidden);
    for (double& a : hidden) a = std::tanh(a);

    std::vector<double> logits(static_cast<size_t>(k), 0.0);
    for (int j = 0; j < h; ++j) {
        const double hj = hidden[static_cast<size_t>(j)];
        const double* row = w2 + static_cast<size_t>(j) * k;
        for (int c = 0; c < k; ++c) logits[static_cast<size_t>(c)] += hj * row[c];
    }
    const double* b2 = w2 + static_cast<size_t>(h) * k;
    for (int c = 0; c < k; ++c) logits[static_cast<size_t>(c)] += b2[c];

    double zmax = logits[0];
    for (double z : logits) zmax = std::max(zmax, z);
    std::vector<double> dz(static_cast<size_t>(k));
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
        dz[static_cast<size_t>(c)] = std::exp(logits[static_cast<size_t>(c)] - zmax);
        sum += dz[static_cast<size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
        dz[static_cast<size_t>(c)] =
            dz[static_cast<size_t>(c)] / sum - target.target[static_cast<size_t>(c)];
    }

    const size_t off_w2 = static_cast<size_t>(d) * h + static_cast<size_t>(h);
    const size_t off_b2 = off_w2 + static_cast<size_t>(h) * k;
    std::vector<double> dh(static_cast<size_t>(h), 0.0);
    for (int j = 0; j < h; ++j) {
        const double hj = hidden[static_cast<size_t>(j)];
        const double* row = w2 + static_cast<size_t>(j) * k;
        double* grow = grad.data() + off_w2 + static_cast<size_t>(j) * k;
        for (int c = 0; c < k; ++c) {
            grow[c] += hj * dz[static_cast<size_t>(c)];
            dh[static_cast<size_t>(j)] += row[c] * dz[static_cast<size_t>(c)];
        }
    }
    for (int c = 0; c < k; ++c) grad[off_b2 + static_cast<size_t>(c)] += dz[static_cast<size_t>(c)];

    // tanh' = 1 - tanh^2
    std::vector<double> da(static_cast<size_t>(h));
    for (int j = 0; j < h; ++j) {
        const double hj = hidden[static_cast<size_t>(j)];
        da[static_cast<size_t>(j)] = (1.0 - hj * hj) * dh[static_cast<size_t>(j)];
    }
    for (const auto& [idx, val] : features) {
        double* grow = grad.data() + static_cast<size_t>(idx) * h;
        for (int j = 0; j < h; ++j) grow[j] += val * da[static_cast<size_t>(j)];
    }
    double* gb1 = grad.data() + static_cast<size_t>(d) * h;
    for (int j = 0; j < h; ++j) gb1[j] += da[static_cast<size_t>(j)];
    return grad;
}

void adam_step(AdamState& state, ModelParams& params, const std::vector<double>& grad) {
    const size_t n = params.values.size();
    if (grad.size() != n || state.m.size() != n || state.v.size() != n) {
        throw std::invalid_argument("gradient/state dimension mismatch");
    }
    if (state.weight_decay > 0.0) {
        const double decay = state.lr * state.weight_decay;
        for (size_t i = 0; i < n; ++i) params.values[i] -= decay * params.values[i];
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < n; ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

ModelParams average_params(const std::vector<ModelParams>& list) {
    if (list.empty()) throw std::invalid_argument("average_params: empty list");
    if (list.size() == 1) return list.front();
    ModelParams out = list.front();
    for (size_t i = 1; i < list.size(); ++i) {
        if (!(list[i].layout == out.layout)) {
            throw std::invalid_argument("average_params: layout mismatch");
        }
        for (size_t j = 0; j < out.values.size(); ++j) out.values[j] += list[i].values[j];
    }
    const double inv = 1.0 / static_cast<double>(list.size());
    for (double& v : out.values) v *= inv;
    return out;
}

ModelParams init_params(const Layout& layout, uint64_t seed) {
    check_layout(layout);
    ModelParams p;
    p.layout = layout;
    p.values.assign(layout.param_count(), 0.0);
    Rng rng(seed, /*stream=*/0);
    const int d = layout.input_dim;
    const int h = layout.hidden_dim;
    const int k = layout.output_dim;
    if (h == 0) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        for (size_t i = 0; i < static_cast<size_t>(d) * k; ++i) {
            p.values[i] = rng.uniform(-bound, bound);
        }
    } else {
        const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
        for (size_t i = 0; i < static_cast<size_t>(d) * h; ++i) {
            p.values[i] = rng.uniform(-b1, b1);
        }
        const double b2 = 1.0 / std::sqrt(static_cast<double>(h));
        const size_t off = static_cast<size_t>(d) * h + static_cast<size_t>(h);
        for (size_t i = 0; i < static_cast<size_t>(h) * k; ++i) {
            p.values[off + i] = rng.uniform(-b2, b2);
        }
    }
    return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint format assumes a little-endian host");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    out.write(kCheckpointMagic, 4);
    const uint16_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const uint32_t dims[3] = {static_cast<uint32_t>(params.layout.input_dim),
                              static_cast<uint32_t>(params.layout.hidden_dim),
                              static_cast<uint32_t>(params.layout.output_dim)};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(params.values.data()),
              static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    if (!out) throw std::runtime_error("short write on checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw std::runtime_error("bad checkpoint magic in " + path.string());
    }
    uint16_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (!in || version != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version in " + path.string());
    }
    uint32_t dims[3];
    in.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
    ModelParams p;
    p.layout = Layout{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                      static_cast<int>(dims[2])};
    p.values.resize(p.layout.param_count());
    in.read(reinterpret_cast<char*>(p.values.data()),
            static_cast<std::streamsize>(p.values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint values in " + path.string());
    return p;
}

}  // namespace churn
