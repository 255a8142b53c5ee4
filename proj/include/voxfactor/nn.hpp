#pragma once

// Model-building blocks on top of the autodiff core: a named parameter store
// with deterministic per-name initialization, plus the layers shared by the
// codec and the generator (linear, embedding, norms, attention, transformer
// and conformer blocks, sinusoidal position/time features, dropout).

#include "voxfactor/autodiff.hpp"

#include <ostream>
#include <istream>

namespace voxfactor {
namespace nn {

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

enum class Init { Zeros, Ones, XavierNormal, Normal, Uniform };

// Named parameter registry. Initialization is seeded by hashing the parameter
// name, so the same (seed, name, shape) always yields the same tensor no
// matter in which order modules are built.
class ParamStore {
public:
    explicit ParamStore(uint64_t seed = 1) : seed_(seed) {}

    ad::Var create(const std::string& name, long rows, long cols, Init kind,
                   double scale = 1.0) {
        auto it = params_.find(name);
        if (it != params_.end()) {
            check(it->second.rows() == rows && it->second.cols() == cols,
                  "param store: shape clash for " + name);
            return it->second;
        }
        Mat m(rows, cols);
        Rng rng(seed_ ^ fnv1a(name));
        rng.next_u64();
        switch (kind) {
            case Init::Zeros: m.setZero(); break;
            case Init::Ones: m.setOnes(); break;
            case Init::XavierNormal: {
                double std = std::sqrt(2.0 / (double)(rows + cols));
                for (long i = 0; i < rows; ++i)
                    for (long j = 0; j < cols; ++j) m(i, j) = std * rng.normal();
                break;
            }
            case Init::Normal:
                for (long i = 0; i < rows; ++i)
                    for (long j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
                break;
            case Init::Uniform:
                for (long i = 0; i < rows; ++i)
                    for (long j = 0; j < cols; ++j) m(i, j) = rng.uniform(-scale, scale);
                break;
        }
        ad::Var v = ad::param(std::move(m));
        params_.emplace(name, v);
        return v;
    }

    ad::Var get(const std::string& name) const {
        auto it = params_.find(name);
        check(it != params_.end(), "param store: unknown param " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, ad::Var>& all() const { return params_; }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& [k, v] : params_) n += (size_t)(v.rows() * v.cols());
        return n;
    }

    void save(std::ostream& out) const {
        uint64_t n = params_.size();
        out.write((const char*)&n, sizeof(n));
        for (const auto& [name, v] : params_) {
            uint64_t len = name.size();
            out.write((const char*)&len, sizeof(len));
            out.write(name.data(), (std::streamsize)len);
            int64_t r = v.rows(), c = v.cols();
            out.write((const char*)&r, sizeof(r));
            out.write((const char*)&c, sizeof(c));
            out.write((const char*)v.val().data(), (std::streamsize)(r * c * 8));
        }
    }

    void load(std::istream& in) {
        uint64_t n = 0;
        in.read((char*)&n, sizeof(n));
        check(in.good(), "param store: truncated header");
        for (uint64_t i = 0; i < n; ++i) {
            uint64_t len = 0;
            in.read((char*)&len, sizeof(len));
            check(in.good() && len < 4096, "param store: bad name length");
            std::string name(len, '\0');
            in.read(name.data(), (std::streamsize)len);
            int64_t r = 0, c = 0;
            in.read((char*)&r, sizeof(r));
            in.read((char*)&c, sizeof(c));
            check(in.good() && r >= 0 && c >= 0, "param store: bad shape for " + name);
            Mat m(r, c);
            in.read((char*)m.data(), (std::streamsize)(r * c * 8));
            check(in.good(), "param store: truncated data for " + name);
            auto it = params_.find(name);
            if (it != params_.end()) {
                check(it->second.rows() == r && it->second.cols() == c,
                      "param store: checkpoint shape mismatch for " + name);
                it->second.node()->value = std::move(m);
            } else {
                params_.emplace(name, ad::param(std::move(m)));
            }
        }
    }

private:
    uint64_t seed_;
    std::map<std::string, ad::Var> params_;
};

// --- layers -----------------------------------------------------------------

struct Linear {
    ad::Var w, b;
    bool with_bias = true;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, long in, long out,
           bool bias = true, Init kind = Init::XavierNormal, double scale = 1.0)
        : with_bias(bias) {
        w = ps.create(name + ".w", in, out, kind, scale);
        if (bias) b = ps.create(name + ".b", 1, out, Init::Zeros);
    }

    ad::Var forward(const ad::Var& x) const {
        ad::Var y = ad::matmul(x, w);
        return with_bias ? ad::add_rowvec(y, b) : y;
    }
};

struct Embedding {
    ad::Var table;

    Embedding() = default;
    Embedding(ParamStore& ps, const std::string& name, long n, long d,
              double scale = 0.02) {
        table = ps.create(name + ".table", n, d, Init::Normal, scale);
    }

    ad::Var forward(const std::vector<int>& idx) const {
        return ad::rows_gather(table, idx);
    }
};

struct LayerNorm {
    ad::Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, long d) {
        gamma = ps.create(name + ".gamma", 1, d, Init::Ones);
        beta = ps.create(name + ".beta", 1, d, Init::Zeros);
    }

    ad::Var forward(const ad::Var& x) const {
        return ad::add_rowvec(ad::mul_rowvec(ad::layer_norm_rows(x), gamma), beta);
    }
};

// layer norm whose scale and shift are predicted from a conditioning row
// vector; zero-initialized projections make it start as a plain layer norm
struct CondLayerNorm {
    Linear to_scale, to_shift;

    CondLayerNorm() = default;
    CondLayerNorm(ParamStore& ps, const std::string& name, long d, long d_cond) {
        to_scale = Linear(ps, name + ".scale", d_cond, d, true, Init::Zeros);
        to_shift = Linear(ps, name + ".shift", d_cond, d, true, Init::Zeros);
    }

    // x: T x D, h: 1 x Dc
    ad::Var forward(const ad::Var& x, const ad::Var& h) const {
        ad::Var normed = ad::layer_norm_rows(x);
        ad::Var s = ad::add_scalar(to_scale.forward(h), 1.0);  // 1 x D
        ad::Var t = to_shift.forward(h);                       // 1 x D
        return ad::add_rowvec(ad::mul_rowvec(normed, s), t);
    }
};

struct MultiHeadAttention {
    Linear q, k, v, out;
    long d = 0, heads = 0, dh = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& ps, const std::string& name, long d_, long heads_)
        : d(d_), heads(heads_), dh(d_ / heads_) {
        check(d_ % heads_ == 0, "attention: dim must divide heads");
        q = Linear(ps, name + ".q", d, d);
        k = Linear(ps, name + ".k", d, d);
        v = Linear(ps, name + ".v", d, d);
        out = Linear(ps, name + ".out", d, d);
    }

    ad::Var forward(const ad::Var& x) const {
        ad::Var qs = q.forward(x), ks = k.forward(x), vs = v.forward(x);
        double inv = 1.0 / std::sqrt((double)dh);
        std::vector<ad::Var> head_outs;
        head_outs.reserve((size_t)heads);
        for (long h = 0; h < heads; ++h) {
            ad::Var qh = ad::slice_cols(qs, h * dh, dh);
            ad::Var kh = ad::slice_cols(ks, h * dh, dh);
            ad::Var vh = ad::slice_cols(vs, h * dh, dh);
            ad::Var att = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
            head_outs.push_back(ad::matmul(att, vh));
        }
        return out.forward(ad::concat_cols(head_outs));
    }
};

struct FeedForward {
    Linear up, down;

    FeedForward() = default;
    FeedForward(ParamStore& ps, const std::string& name, long d, long hidden) {
        up = Linear(ps, name + ".up", d, hidden);
        down = Linear(ps, name + ".down", hidden, d);
    }

    ad::Var forward(const ad::Var& x) const {
        return down.forward(ad::gelu(up.forward(x)));
    }
};

// pre-norm transformer block; when built with d_cond > 0 both norms are
// condition-modulated and forward() expects the conditioning row
struct TransformerBlock {
    MultiHeadAttention attn;
    FeedForward ffn;
    LayerNorm ln1, ln2;
    CondLayerNorm cln1, cln2;
    bool conditional = false;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& name, long d, long heads,
                     long hidden, long d_cond = 0)
        : conditional(d_cond > 0) {
        attn = MultiHeadAttention(ps, name + ".attn", d, heads);
        ffn = FeedForward(ps, name + ".ffn", d, hidden);
        if (conditional) {
            cln1 = CondLayerNorm(ps, name + ".cln1", d, d_cond);
            cln2 = CondLayerNorm(ps, name + ".cln2", d, d_cond);
        } else {
            ln1 = LayerNorm(ps, name + ".ln1", d);
            ln2 = LayerNorm(ps, name + ".ln2", d);
        }
    }

    ad::Var forward(const ad::Var& x, const ad::Var& cond = ad::Var()) const {
        ad::Var n1 = conditional ? cln1.forward(x, cond) : ln1.forward(x);
        ad::Var h = ad::add(x, attn.forward(n1));
        ad::Var n2 = conditional ? cln2.forward(h, cond) : ln2.forward(h);
        return ad::add(h, ffn.forward(n2));
    }
};

inline ad::Var swish(const ad::Var& x) { return ad::emul(x, ad::sigmoid(x)); }

inline ad::Var glu(const ad::Var& x) {
    long d = x.cols() / 2;
    return ad::emul(ad::slice_cols(x, 0, d), ad::sigmoid(ad::slice_cols(x, d, d)));
}

// conformer block with macaron feed-forwards and a depthwise conv module.
// deliberately no positional encoding: with reflect-padded convs the block is
// permutation-consistent enough that mean pooling over frames is stable
// across sequence lengths for stationary inputs
struct ConformerBlock {
    FeedForward ff1, ff2;
    MultiHeadAttention attn;
    Linear conv_in, conv_out;
    ad::Var dw_kernel;
    LayerNorm ln_ff1, ln_attn, ln_conv, ln_mid, ln_final;

    ConformerBlock() = default;
    ConformerBlock(ParamStore& ps, const std::string& name, long d, long heads,
                   long hidden, long conv_kernel = 7) {
        ff1 = FeedForward(ps, name + ".ff1", d, hidden);
        ff2 = FeedForward(ps, name + ".ff2", d, hidden);
        attn = MultiHeadAttention(ps, name + ".attn", d, heads);
        conv_in = Linear(ps, name + ".conv_in", d, 2 * d);
        conv_out = Linear(ps, name + ".conv_out", d, d);
        dw_kernel = ps.create(name + ".dw", conv_kernel, d, Init::Normal, 0.1);
        ln_ff1 = LayerNorm(ps, name + ".ln_ff1", d);
        ln_attn = LayerNorm(ps, name + ".ln_attn", d);
        ln_conv = LayerNorm(ps, name + ".ln_conv", d);
        ln_mid = LayerNorm(ps, name + ".ln_mid", d);
        ln_final = LayerNorm(ps, name + ".ln_final", d);
    }

    ad::Var forward(const ad::Var& x) const {
        ad::Var h = ad::add(x, ad::scale(ff1.forward(ln_ff1.forward(x)), 0.5));
        h = ad::add(h, attn.forward(ln_attn.forward(h)));
        ad::Var c = glu(conv_in.forward(ln_conv.forward(h)));
        c = depthwise_reflect_conv(c, dw_kernel);
        c = swish(ln_mid.forward(c));
        h = ad::add(h, conv_out.forward(c));
        h = ad::add(h, ad::scale(ff2.forward(ln_final.forward(h)), 0.5));
        return h;
    }
};

// --- fixed features -----------------------------------------------------------

inline Mat sinusoidal_features(long t, long d) {
    Mat pe = Mat::Zero(t, d);
    for (long pos = 0; pos < t; ++pos) {
        for (long i = 0; i < d / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * (double)i / (double)d);
            pe(pos, 2 * i) = std::sin((double)pos * freq);
            pe(pos, 2 * i + 1) = std::cos((double)pos * freq);
        }
    }
    return pe;
}

inline ad::Var positional_encoding(long t, long d) {
    return ad::constant(sinusoidal_features(t, d));
}

// continuous scalar (e.g. diffusion time in [0, 1]) -> 1 x d feature row
inline Mat time_features(double t, long d) {
    Mat f = Mat::Zero(1, d);
    for (long i = 0; i < d / 2; ++i) {
        double freq = std::pow(10000.0, -2.0 * (double)i / (double)d);
        f(0, 2 * i) = std::sin(1000.0 * t * freq);
        f(0, 2 * i + 1) = std::cos(1000.0 * t * freq);
    }
    return f;
}

inline ad::Var dropout(const ad::Var& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    double keep = 1.0 - p;
    Mat mask(x.rows(), x.cols());
    for (long i = 0; i < mask.rows(); ++i)
        for (long j = 0; j < mask.cols(); ++j)
            mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return ad::emul(x, ad::constant(std::move(mask)));
}

}  // namespace nn
}  // namespace voxfactor
