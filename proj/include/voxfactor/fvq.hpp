#pragma once

// Factorized vector quantization: project frame latents into a low-dimensional
// bottleneck, residually quantize across levels against learned codebooks with
// straight-through gradients, and report codebook/commitment losses.

#include "voxfactor/nn.hpp"

namespace voxfactor {
namespace fvq {

// nearest codebook entry by squared distance; ties broken by lowest index.
// plain scalar loops keep the arithmetic identical to the exhaustive-search
// definition regardless of vectorization
inline int nearest_entry(const Eigen::RowVectorXd& v, const Mat& codebook) {
    check(v.allFinite(), "quantize: non-finite input vector");
    check(codebook.rows() > 0 && codebook.cols() == v.cols(), "quantize: shape mismatch");
    int best = 0;
    double best_d = 0.0;
    for (long k = 0; k < codebook.rows(); ++k) {
        double d = 0.0;
        for (long j = 0; j < v.cols(); ++j) {
            double diff = v(j) - codebook(k, j);
            d += diff * diff;
        }
        if (k == 0 || d < best_d) {
            best_d = d;
            best = (int)k;
        }
    }
    return best;
}

struct QuantizeResult {
    int index;
    Eigen::RowVectorXd q;
};

inline QuantizeResult quantize_vector(const Eigen::RowVectorXd& v, const Mat& codebook) {
    int idx = nearest_entry(v, codebook);
    return {idx, codebook.row(idx)};
}

enum class Attribute { prosody, content, detail };

inline const char* attribute_name(Attribute a) {
    switch (a) {
        case Attribute::prosody: return "prosody";
        case Attribute::content: return "content";
        default: return "detail";
    }
}

struct BranchConfig {
    Attribute attribute = Attribute::prosody;
    long num_levels = 1;
    long codebook_size = 1024;
    long d_low = 8;
    long d_model = 48;
    bool bottleneck = true;  // false: quantize at full model dimension
};

struct BranchForward {
    std::vector<std::vector<int>> codes;  // [num_levels][T]
    ad::Var z;              // T x D, straight-through value = embedded codes
    ad::Var codebook_loss;  // pulls codebook entries toward residuals
    ad::Var commit_loss;    // pulls encoder outputs toward codewords
};

class FvqBranch {
public:
    FvqBranch() = default;
    FvqBranch(nn::ParamStore& ps, const std::string& prefix, const BranchConfig& cfg)
        : cfg_(cfg) {
        long d_eff = effective_dim();
        down_ = nn::Linear(ps, prefix + ".down", cfg.d_model, d_eff, false);
        up_ = nn::Linear(ps, prefix + ".up", d_eff, cfg.d_model, false);
        for (long l = 0; l < cfg.num_levels; ++l)
            codebooks_.push_back(ps.create(prefix + ".cb" + std::to_string(l),
                                           cfg.codebook_size, d_eff, nn::Init::Normal, 0.05));
    }

    const BranchConfig& config() const { return cfg_; }
    long effective_dim() const { return cfg_.bottleneck ? cfg_.d_low : cfg_.d_model; }
    const std::vector<ad::Var>& codebooks() const { return codebooks_; }
    const nn::Linear& down() const { return down_; }
    const nn::Linear& up() const { return up_; }

    // residual code assignment in the low-dim space (pure value computation)
    std::vector<std::vector<int>> assign_codes(const Mat& v_low) const {
        long t = v_low.rows();
        std::vector<std::vector<int>> codes((size_t)cfg_.num_levels,
                                            std::vector<int>((size_t)t));
        for (long i = 0; i < t; ++i) {
            Eigen::RowVectorXd r = v_low.row(i);
            for (long l = 0; l < cfg_.num_levels; ++l) {
                int idx = nearest_entry(r, codebooks_[(size_t)l].val());
                codes[(size_t)l][(size_t)i] = idx;
                r -= codebooks_[(size_t)l].val().row(idx);
            }
        }
        return codes;
    }

    // summed codewords per frame; the one arithmetic path shared by training
    // forward and decode-from-codes, which keeps the two bit-identical
    Mat codes_to_qsum(const std::vector<std::vector<int>>& codes) const {
        check((long)codes.size() == cfg_.num_levels, "fvq: level count mismatch");
        long t = (long)codes[0].size();
        Mat qsum = Mat::Zero(t, effective_dim());
        for (long l = 0; l < cfg_.num_levels; ++l) {
            check((long)codes[(size_t)l].size() == t, "fvq: ragged code grid");
            const Mat& cb = codebooks_[(size_t)l].val();
            for (long i = 0; i < t; ++i) {
                int idx = codes[(size_t)l][(size_t)i];
                check(idx >= 0 && idx < cfg_.codebook_size, "fvq: code out of range");
                qsum.row(i) += cb.row(idx);
            }
        }
        return qsum;
    }

    BranchForward forward(const ad::Var& h) const {
        check(h.rows() >= 1, "fvq: empty input");
        check(h.cols() == cfg_.d_model, "fvq: input dim mismatch");
        check(h.val().allFinite(), "fvq: non-finite input");

        ad::Var v = down_.forward(h);  // T x d_eff
        BranchForward out;
        out.codes = assign_codes(v.val());

        // per-level losses against the residual at that level
        ad::Var residual = v;
        ad::Var cb_loss = ad::constant_scalar(0.0);
        ad::Var cm_loss = ad::constant_scalar(0.0);
        for (long l = 0; l < cfg_.num_levels; ++l) {
            ad::Var q_learn = ad::rows_gather(codebooks_[(size_t)l], out.codes[(size_t)l]);
            ad::Var q_const = ad::constant(q_learn.val());
            cb_loss = ad::add(cb_loss,
                              ad::mean_all(ad::square(ad::sub(ad::detach(residual), q_learn))));
            cm_loss = ad::add(cm_loss, ad::mean_all(ad::square(ad::sub(residual, q_const))));
            residual = ad::sub(residual, q_const);
        }
        double inv_levels = 1.0 / (double)cfg_.num_levels;
        out.codebook_loss = ad::scale(cb_loss, inv_levels);
        out.commit_loss = ad::scale(cm_loss, inv_levels);

        // value: exactly the embedded codes; gradient: identity to v
        ad::Var st = ad::straight_through(ad::constant(codes_to_qsum(out.codes)), v);
        out.z = up_.forward(st);
        return out;
    }

    // decode path for generated codes; same arithmetic as forward's value path
    ad::Var embed_codes(const std::vector<std::vector<int>>& codes) const {
        return up_.forward(ad::constant(codes_to_qsum(codes)));
    }

    // quantize one already-pooled row through the first-level codebook
    int quantize_pooled_row(const Eigen::RowVectorXd& pooled_model_dim) const {
        check(pooled_model_dim.cols() == cfg_.d_model, "fvq: pooled dim mismatch");
        ad::NoGradGuard ng;
        ad::Var v = down_.forward(ad::constant(Mat(pooled_model_dim)));
        return nearest_entry(v.val().row(0), codebooks_[0].val());
    }

private:
    BranchConfig cfg_;
    nn::Linear down_, up_;
    std::vector<ad::Var> codebooks_;
};

}  // namespace fvq
}  // namespace voxfactor
