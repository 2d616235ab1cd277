#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dmsn/nn.hpp"
#include "dmsn/rng.hpp"

namespace dmsn {

// Linear alpha schedule with cumulative products. Steps are 1-based:
// alpha(t) for t in [1, T]; alpha_bar(0) == 1 by convention.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double a(int t) const {
        if (t < 1 || t > steps) throw ContractError("schedule step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
        return alpha[t - 1];
    }
    double abar(int t) const {
        if (t == 0) return 1.0;
        if (t < 1 || t > steps) throw ContractError("schedule step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
        return alpha_bar[t - 1];
    }
};

inline NoiseSchedule schedule_from_alphas(std::vector<double> alphas) {
    if (alphas.empty()) throw ConfigError("noise schedule needs at least one step");
    NoiseSchedule s;
    s.steps = static_cast<int>(alphas.size());
    s.alpha = std::move(alphas);
    double prod = 1.0;
    for (double a : s.alpha) {
        if (a <= 0.0 || a > 1.0) throw ConfigError("alpha outside (0, 1]: " + std::to_string(a));
        prod *= a;
        s.alpha_bar.push_back(prod);
    }
    return s;
}

// Linear grid from `start` to `end` inclusive; a single step takes `start`.
inline NoiseSchedule build_schedule(int steps, double start = 0.999, double end = 0.98) {
    if (steps < 1) throw ConfigError("diffusion step count must be >= 1, got " + std::to_string(steps));
    std::vector<double> alphas(steps);
    for (int t = 0; t < steps; ++t) {
        alphas[t] = steps == 1 ? start : start + (end - start) * static_cast<double>(t) / (steps - 1);
    }
    return schedule_from_alphas(std::move(alphas));
}

// h_noised = sqrt(alpha_t) h + sqrt(1 - alpha_t) eps
inline T forward_step(const T& h, int t, const T& eps, const NoiseSchedule& sched) {
    const double a = sched.a(t);
    return axpby(std::sqrt(a), h, std::sqrt(1.0 - a), eps);
}

// h_{t-1} = (h_t - (1 - alpha_t)/sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
inline T reverse_step(const T& h_hat, const T& eps_hat, int t, const NoiseSchedule& sched) {
    const double a = sched.a(t);
    const double abar = sched.abar(t);
    if (abar >= 1.0) throw SingularityError("reverse step at t=" + std::to_string(t) + " has alpha_bar = 1");
    const double coef = (1.0 - a) / std::sqrt(1.0 - abar);
    const double inv = 1.0 / std::sqrt(a);
    return axpby(inv, h_hat, -coef * inv, eps_hat);
}

// algebraic inverse of forward_step: (h_hat - sqrt(1 - alpha_t) eps) / sqrt(alpha_t)
inline T exact_invert(const T& h_hat, const T& eps, int t, const NoiseSchedule& sched) {
    const double a = sched.a(t);
    const double inv = 1.0 / std::sqrt(a);
    return axpby(inv, h_hat, -std::sqrt(1.0 - a) * inv, eps);
}

constexpr int kNumModalities = 3;  // order: id, im, te

// Learned pairwise fusion coefficients alpha_{m,n} for m != n. Unconstrained
// scalars; no normalization is imposed.
struct FusionWeights {
    std::array<std::array<Parameter*, kNumModalities>, kNumModalities> w{};

    static FusionWeights create(ParamStore& store, const std::string& name, double init) {
        static const char* tags[kNumModalities] = {"id", "im", "te"};
        FusionWeights fw;
        for (int m = 0; m < kNumModalities; ++m)
            for (int n = 0; n < kNumModalities; ++n) {
                if (m == n) continue;
                fw.w[m][n] = &store.add_scalar(name + "." + tags[m] + "_" + tags[n], init);
            }
        return fw;
    }
};

struct DiffusionState {
    std::array<T, kNumModalities> h;
    int t = 0;
};

// The cross-modal interaction function: scaled-dot attention with the single
// vector h_n as both key and value. Softmax over one element is identically
// 1 (with zero gradient to the score), so CI(h_m, h_n) == h_n exactly,
// gradients included. ci_denoise uses that collapsed form.
inline T ci_attention(const T& h_m, const T& h_n) {
    return scaled_dot_attention_grouped(h_m, h_n, h_n, 1);
}

// eps_hat_m = sum_{n != m} alpha_{m,n} * CI(h_m, h_n) = sum alpha_{m,n} h_n
inline std::array<T, kNumModalities> ci_denoise(Tape& tape, const std::array<T, kNumModalities>& h, const FusionWeights& weights) {
    std::array<T, kNumModalities> eps_hat;
    for (int m = 0; m < kNumModalities; ++m) {
        const int n1 = (m + 1) % kNumModalities;
        const int n2 = (m + 2) % kNumModalities;
        eps_hat[m] = lincomb2(leaf(tape, *weights.w[m][n1]), h[n1], leaf(tape, *weights.w[m][n2]), h[n2]);
    }
    return eps_hat;
}

// Per-(sample, step, modality) gaussian noise, reproducible independently of
// batch composition or evaluation threading.
struct NoiseSource {
    std::vector<uint64_t> sample_seeds;
    int d = 0;
    bool zero = false;

    std::vector<double> block(int t, int m) const {
        std::vector<double> out(sample_seeds.size() * static_cast<size_t>(d), 0.0);
        if (zero) return out;
        for (size_t b = 0; b < sample_seeds.size(); ++b) {
            Rng rng(Rng::mix(sample_seeds[b], static_cast<uint64_t>(t), static_cast<uint64_t>(m) + 101));
            for (int j = 0; j < d; ++j) out[b * static_cast<size_t>(d) + j] = rng.gaussian();
        }
        return out;
    }
};

// Multi-step synergistic feature interaction: corrupt every modality for T
// steps with fresh gaussian noise, then denoise back with cross-modal
// interaction at every step. h0 rows are [B x d_e] per modality (id, im, te).
inline std::array<T, kNumModalities> run_mssfi(Tape& tape, const std::array<T, kNumModalities>& h0,
                                               const NoiseSchedule& sched, const FusionWeights& weights,
                                               const NoiseSource& noise) {
    const int B = rows(h0[0]);
    std::array<T, kNumModalities> h = h0;
    for (int t = 1; t <= sched.steps; ++t) {
        for (int m = 0; m < kNumModalities; ++m) {
            T eps = constant(tape, B, noise.d, noise.block(t, m));
            h[m] = forward_step(h[m], t, eps, sched);
        }
    }
    for (int t = sched.steps; t >= 1; --t) {
        auto eps_hat = ci_denoise(tape, h, weights);
        for (int m = 0; m < kNumModalities; ++m) {
            h[m] = reverse_step(h[m], eps_hat[m], t, sched);
        }
    }
    return h;
}

// Fuses the denoised modality features into E_syn and projects the target
// for the synergy loss.
struct SynergyHead {
    Mlp fuse;            // [3*d_e -> hidden -> d_e] over concat(im, te, id)
    Linear target_proj;  // concatenated target embeddings -> d_e

    static SynergyHead create(ParamStore& store, const std::string& name, int d_e, int hidden, int d_target_cat, Rng& rng) {
        SynergyHead s;
        s.fuse = Mlp::create(store, name + ".fuse", {3 * d_e, hidden, d_e}, rng);
        s.target_proj = Linear::create(store, name + ".target_proj", d_target_cat, d_e, rng);
        return s;
    }

    // order follows the fusion definition: (h_im, h_te, h_id)
    T synergy_fuse(Tape& tape, const T& h0_im, const T& h0_te, const T& h0_id) const {
        return fuse(tape, concat_cols({h0_im, h0_te, h0_id}));
    }
};

// L_syn = (1-y) max(0, -1 - cos) + y max(0, 1 - cos), batch mean. The
// negative branch is identically zero for true cosines; corrected_margin
// (non-paper, off by default) replaces it with max(0, cos - margin).
inline T synergy_loss(Tape& tape, const T& e_syn, const T& e_target, const std::vector<double>& y,
                      bool corrected_margin = false, double margin = 0.0) {
    const int B = rows(e_syn);
    if (static_cast<size_t>(B) != y.size()) throw DimensionError("synergy_loss: labels size mismatch");
    T cos = rowwise_cosine(e_syn, e_target);
    T pos = relu(add_scalar(scale(cos, -1.0), 1.0));  // max(0, 1 - cos)
    T neg = corrected_margin ? relu(add_scalar(cos, -margin))        // max(0, cos - margin)
                             : relu(add_scalar(scale(cos, -1.0), -1.0));  // max(0, -1 - cos)
    std::vector<double> ypos(y), yneg(B);
    for (int b = 0; b < B; ++b) yneg[b] = 1.0 - y[b];
    T weighted = add(mul(constant(tape, B, 1, ypos), pos), mul(constant(tape, B, 1, yneg), neg));
    return mean_all(weighted);
}

}  // namespace dmsn
