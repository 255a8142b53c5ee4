#pragma once
// masked discrete diffusion over token sequences: sine mask schedule,
// bernoulli forward corruption, masked cross-entropy, confidence-ordered
// reverse sampling with top-k / temperature annealing, and classifier-free
// guidance with std rescaling.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "common.hpp"

namespace voxfactor {
namespace diff {

inline constexpr int kMaskToken = -1;

struct MaskSchedule {
    double horizon = 1.0;
};

// sigma(t) = sin(pi * t / (2 * horizon)), evaluated in extended precision so
// the landmark values sigma(horizon) = 1 and sigma(horizon / 3) = 0.5 come
// out exact in double
inline double mask_ratio(double t, const MaskSchedule& sched = {}) {
    check(std::isfinite(t) && t >= 0.0 && t <= sched.horizon,
          "mask_ratio: time outside [0, horizon]");
    constexpr long double pi = 3.14159265358979323846264338327950288L;
    long double x = pi * (long double)t / (2.0L * (long double)sched.horizon);
    return (double)sinl(x);
}

struct DiffusionState {
    std::vector<int> tokens;  // kMaskToken wherever mask is set
    std::vector<int> mask;    // 1 = masked
    double t = 0.0;
    long prompt_len = 0;

    long size() const { return (long)tokens.size(); }
    long masked_count() const {
        long c = 0;
        for (int m : mask) c += (m != 0);
        return c;
    }
};

// each non-prompt position masked independently with probability sigma(t);
// the prompt prefix is never corrupted
inline DiffusionState forward_mask(const std::vector<int>& x, double t, long prompt_len,
                                   Rng& rng, const MaskSchedule& sched = {}) {
    long n = (long)x.size();
    check(n >= 1, "forward_mask: empty sequence");
    check(prompt_len >= 0 && prompt_len <= n, "forward_mask: prompt length out of range");
    double sigma = mask_ratio(t, sched);
    DiffusionState st;
    st.tokens = x;
    st.mask.assign((size_t)n, 0);
    st.t = t;
    st.prompt_len = prompt_len;
    for (long i = prompt_len; i < n; ++i) {
        if (rng.uniform() < sigma) {
            st.mask[(size_t)i] = 1;
            st.tokens[(size_t)i] = kMaskToken;
        }
    }
    return st;
}

// mean over masked positions of -log softmax(logits)[target]; positions with
// mask 0 contribute nothing; empty mask gives 0 by convention
inline ad::Var masked_ce_loss(const ad::Var& logits, const std::vector<int>& targets,
                              const std::vector<int>& mask) {
    long n = logits.rows();
    check((long)targets.size() == n && (long)mask.size() == n, "masked_ce_loss: shape mismatch");
    long cnt = 0;
    for (int m : mask) cnt += (m != 0);
    if (cnt == 0) return ad::constant_scalar(0.0);
    std::vector<int> idx((size_t)n, 0);
    Mat msk = Mat::Zero(n, 1);
    for (long i = 0; i < n; ++i) {
        if (!mask[(size_t)i]) continue;
        int tg = targets[(size_t)i];
        check(tg >= 0 && tg < logits.cols(), "masked_ce_loss: target outside vocabulary");
        idx[(size_t)i] = tg;
        msk(i, 0) = 1.0;
    }
    ad::Var picked = ad::pick_cols(ad::log_softmax_rows(logits), idx);
    return ad::scale(ad::sum_all(ad::emul(picked, ad::constant(msk))), -1.0 / (double)cnt);
}

inline double masked_ce_loss_value(const Mat& logits, const std::vector<int>& targets,
                                   const std::vector<int>& mask) {
    ad::NoGradGuard ng;
    return masked_ce_loss(ad::constant(logits), targets, mask).val()(0, 0);
}

// remask the floor(n_gen * sigma(t_next)) least-confident positions of the
// proposal.  Candidates are the currently-masked positions (optionally with
// Gumbel(0,1) noise added to their confidences); already-committed tokens
// rank strictly after every candidate, so they are only pulled back when the
// budget exceeds the candidate pool, and prompt positions never.
inline DiffusionState remask_step(const std::vector<int>& proposal, const std::vector<double>& conf,
                                  double t_next, const DiffusionState& state, Rng& rng, bool gumbel,
                                  const MaskSchedule& sched = {}) {
    long n = state.size();
    check((long)proposal.size() == n && (long)conf.size() == n, "remask_step: shape mismatch");
    check(t_next <= state.t, "remask_step: time must not increase");
    for (long i = 0; i < n; ++i)
        check(proposal[(size_t)i] != kMaskToken, "remask_step: proposal has unfilled positions");
    for (long i = 0; i < state.prompt_len; ++i)
        check(proposal[(size_t)i] == state.tokens[(size_t)i], "remask_step: prompt region altered");

    long n_gen = n - state.prompt_len;
    long budget = (long)std::floor((double)n_gen * mask_ratio(t_next, sched));

    struct Entry {
        double key;
        long idx;
        int committed;
    };
    std::vector<Entry> order;
    order.reserve((size_t)n_gen);
    for (long i = state.prompt_len; i < n; ++i) {
        if (state.mask[(size_t)i])
            order.push_back({conf[(size_t)i] + (gumbel ? rng.gumbel() : 0.0), i, 0});
        else
            order.push_back({1.0, i, 1});
    }
    std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
        if (a.committed != b.committed) return a.committed < b.committed;
        if (a.key != b.key) return a.key < b.key;
        return a.idx < b.idx;
    });

    DiffusionState out;
    out.tokens = proposal;
    out.mask.assign((size_t)n, 0);
    out.t = t_next;
    out.prompt_len = state.prompt_len;
    check(budget <= (long)order.size(), "remask_step: budget exceeds generated region");
    for (long j = 0; j < budget; ++j) {
        out.mask[(size_t)order[(size_t)j].idx] = 1;
        out.tokens[(size_t)order[(size_t)j].idx] = kMaskToken;
    }
    return out;
}

enum class CfgStdAxis { per_position, per_sequence };

// g_cfg = g_cond + alpha * (g_cond - g_uncond), rescaled so its population
// std matches g_cond's; rows (or the whole matrix, depending on axis) where
// std(g_cfg) is zero fall back to g_cond unchanged
inline Mat cfg_combine(const Mat& g_cond, const Mat& g_uncond, double alpha,
                       CfgStdAxis axis = CfgStdAxis::per_position) {
    check(g_cond.rows() == g_uncond.rows() && g_cond.cols() == g_uncond.cols(),
          "cfg_combine: shape mismatch");
    auto pop_std = [](const auto& m) {
        double mu = m.mean();
        return std::sqrt((m.array() - mu).square().mean());
    };
    Mat g_cfg = g_cond + alpha * (g_cond - g_uncond);
    if (axis == CfgStdAxis::per_sequence) {
        double s = pop_std(g_cfg);
        if (s <= 0.0) return g_cond;
        return Mat(g_cfg * (pop_std(g_cond) / s));
    }
    Mat out = g_cfg;
    for (long r = 0; r < g_cfg.rows(); ++r) {
        double s = pop_std(g_cfg.row(r));
        if (s <= 0.0)
            out.row(r) = g_cond.row(r);
        else
            out.row(r) *= pop_std(g_cond.row(r)) / s;
    }
    return out;
}

// conditioning dropout for guidance training: true means withhold the prompt
// on this step
inline bool cfg_train_drop(Rng& rng, double p_cfg = 0.15) {
    return rng.uniform() < p_cfg;
}

// one position's draw from a logit row: keep the topk largest logits, then
// sample the temperature-scaled categorical over them (temp 0 = argmax);
// returns the token and the probability that categorical assigned it
inline std::pair<int, double> sample_token_row(const Mat& logits, long row, int topk, double temp,
                                               Rng& rng) {
    long v = logits.cols();
    long k = std::min<long>(topk, v);
    check(k >= 1, "sample_token_row: empty vocabulary");
    std::vector<long> ids((size_t)v);
    std::iota(ids.begin(), ids.end(), 0L);
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](long a, long b) {
        double la = logits(row, a), lb = logits(row, b);
        if (la != lb) return la > lb;
        return a < b;
    });
    if (temp <= 0.0) return {(int)ids[0], 1.0};
    double mx = logits(row, ids[0]);
    std::vector<double> w((size_t)k);
    double total = 0.0;
    for (long j = 0; j < k; ++j) {
        w[(size_t)j] = std::exp((logits(row, ids[(size_t)j]) - mx) / temp);
        total += w[(size_t)j];
    }
    int pick = rng.categorical(w);
    return {(int)ids[(size_t)pick], w[(size_t)pick] / total};
}

// denoiser over a partially masked state; conditioning is carried in the
// closure.  An empty uncond function disables guidance for the stage.
using DenoiserFn = std::function<Mat(const DiffusionState&)>;

struct SampleConfig {
    long steps = 4;
    double alpha = 1.0;
    int topk = 20;
    double temp_start = 1.5;
    bool gumbel = true;
    MaskSchedule sched{};
    CfgStdAxis cfg_axis = CfgStdAxis::per_position;
};

struct SampleStats {
    long nfe = 0;
    std::vector<long> masked_after_step;
};

// reverse process: start fully masked after the prompt, and for k = 1..steps
// denoise at t_{k-1}, sample proposals for masked positions (top-k filter,
// temperature annealed linearly from temp_start to 0), then remask down to
// the floor(n_gen * sigma(t_k)) least confident, with t_k on the uniform
// grid horizon * (steps - k) / steps.  Deterministic given the rng seed.
inline std::vector<int> sample(const DenoiserFn& denoiser, const DenoiserFn& uncond, long n,
                               const std::vector<int>& prompt, const SampleConfig& cfg, Rng& rng,
                               SampleStats* stats = nullptr) {
    check(cfg.steps >= 1, "sample: steps must be >= 1");
    check((bool)denoiser, "sample: denoiser required");
    long p = (long)prompt.size();
    check(n >= p, "sample: sequence shorter than prompt");
    check(n >= 1, "sample: empty sequence");

    const double horizon = cfg.sched.horizon;
    DiffusionState st;
    st.tokens.assign((size_t)n, kMaskToken);
    st.mask.assign((size_t)n, 1);
    for (long i = 0; i < p; ++i) {
        st.tokens[(size_t)i] = prompt[(size_t)i];
        st.mask[(size_t)i] = 0;
    }
    st.t = horizon;
    st.prompt_len = p;

    for (long k = 1; k <= cfg.steps; ++k) {
        Mat g = denoiser(st);
        if (stats) stats->nfe++;
        check(g.rows() == n, "sample: denoiser row count mismatch");
        if (!g.allFinite())
            throw vox_error("sample: non-finite conditional logits at step " + std::to_string(k));
        if (uncond) {
            Mat gu = uncond(st);
            if (stats) stats->nfe++;
            check(gu.rows() == g.rows() && gu.cols() == g.cols(),
                  "sample: unconditional logits shape mismatch");
            if (!gu.allFinite())
                throw vox_error("sample: non-finite unconditional logits at step " +
                                std::to_string(k));
            g = cfg_combine(g, gu, cfg.alpha, cfg.cfg_axis);
        }

        double temp = cfg.steps > 1
                          ? cfg.temp_start * (double)(cfg.steps - k) / (double)(cfg.steps - 1)
                          : 0.0;
        std::vector<int> proposal = st.tokens;
        std::vector<double> conf((size_t)n, 1.0);
        for (long i = 0; i < n; ++i) {
            if (!st.mask[(size_t)i]) continue;
            auto [tok, pr] = sample_token_row(g, i, cfg.topk, temp, rng);
            proposal[(size_t)i] = tok;
            conf[(size_t)i] = pr;
        }
        double t_next = horizon * (double)(cfg.steps - k) / (double)cfg.steps;
        st = remask_step(proposal, conf, t_next, st, rng, cfg.gumbel, cfg.sched);
        if (stats) stats->masked_after_step.push_back(st.masked_count());
    }
    check(st.masked_count() == 0, "sample: masked tokens remain after final step");
    return st.tokens;
}

}  // namespace diff
}  // namespace voxfactor
