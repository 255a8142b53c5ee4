#pragma once

// Finite-difference gradient oracle for tests: rebuilds the scalar loss from
// perturbed parameter values and compares central differences against the
// analytic gradients from backward().

#include "voxfactor/autodiff.hpp"

#include <functional>

namespace voxfactor {
namespace testutil {

using BuildFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

inline double eval_loss(const BuildFn& build, const std::vector<Mat>& vals) {
    ad::NoGradGuard ng;
    std::vector<ad::Var> ps;
    ps.reserve(vals.size());
    for (const auto& m : vals) ps.push_back(ad::param(m));
    ad::Var loss = build(ps);
    check(loss.rows() == 1 && loss.cols() == 1, "fd_check: loss must be scalar");
    return loss.val()(0, 0);
}

// returns the worst relative error between analytic and numeric gradients
// across every entry of every parameter
inline double fd_max_err(const BuildFn& build, const std::vector<Mat>& init,
                         double h = 1e-5) {
    std::vector<ad::Var> params;
    params.reserve(init.size());
    for (const auto& m : init) params.push_back(ad::param(m));
    ad::Var loss = build(params);
    ad::GradMap g = ad::backward(loss);

    double max_err = 0.0;
    for (size_t pi = 0; pi < init.size(); ++pi) {
        const Mat* gp = ad::grad_of(g, params[pi]);
        Mat ga = gp ? *gp : Mat::Zero(init[pi].rows(), init[pi].cols());
        for (long r = 0; r < init[pi].rows(); ++r) {
            for (long c = 0; c < init[pi].cols(); ++c) {
                std::vector<Mat> pert = init;
                pert[pi](r, c) += h;
                double f_hi = eval_loss(build, pert);
                pert[pi](r, c) -= 2.0 * h;
                double f_lo = eval_loss(build, pert);
                double fd = (f_hi - f_lo) / (2.0 * h);
                double an = ga(r, c);
                double scale = std::max({1.0, std::abs(fd), std::abs(an)});
                max_err = std::max(max_err, std::abs(fd - an) / scale);
            }
        }
    }
    return max_err;
}

inline Mat rand_mat(Rng& rng, long r, long c, double scl = 1.0) {
    Mat m(r, c);
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) m(i, j) = scl * rng.normal();
    return m;
}

}  // namespace testutil
}  // namespace voxfactor
