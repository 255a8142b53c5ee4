#pragma once

// Factorized speech codec: strided-conv encoder, conformer timbre extractor,
// three residual FVQ branches (prosody / content / detail), supervision and
// gradient-reversal heads, detail dropout, and a transposed-conv decoder whose
// normalization layers are conditioned on the timbre embedding.

#include "voxfactor/fvq.hpp"
#include "voxfactor/wav.hpp"

namespace voxfactor {
namespace codec {

struct CodecConfig {
    int sample_rate = 16000;
    std::vector<long> strides = {2, 4, 5, 5};           // hop = 200 samples
    std::vector<long> enc_channels = {12, 16, 24, 48};  // per-stage outputs
    long d_model = 48;
    long d_timbre = 48;
    long timbre_blocks = 2;
    long heads = 4;
    long ffn_hidden = 96;
    long conformer_kernel = 7;
    bool timbre_attention_pool = false;  // mean pooling by default
    long num_phonemes = 40;
    long num_speakers = 8;
    long head_hidden = 64;
    double detail_dropout_p = 0.2;
    double grl_lambda = 1.0;
    double decoder_width = 2.0;  // decoder channels as a multiple of encoder's
    // quantizer
    long codebook_size = 1024;
    long d_low = 8;
    bool bottleneck = true;
    long prosody_levels = 1;
    long content_levels = 2;
    long detail_levels = 3;

    long hop() const {
        long h = 1;
        for (long s : strides) h *= s;
        return h;
    }
};

// code grids for one utterance: [levels][frames], all entries in [0, K)
struct AttributeCodes {
    std::vector<std::vector<int>> prosody, content, detail;
    long frames() const { return prosody.empty() ? 0 : (long)prosody[0].size(); }
};

struct CodecOutput {
    fvq::BranchForward prosody, content, detail;
    ad::Var h_t;  // 1 x D_t
    bool detail_dropped = false;
    ad::Var dec_detail;  // detail.z, or zeros when dropped (decoder path only)
    // supervision heads
    ad::Var f0_sup;       // T x 1 on z_p
    ad::Var phone_sup;    // T x P on z_c
    ad::Var speaker_sup;  // 1 x S on h_t
    // adversarial heads fed through gradient reversal
    ad::Var phone_grl_prosody;  // T x P
    ad::Var f0_grl_content;     // T x 1
    ad::Var phone_grl_detail;   // T x P
    ad::Var f0_grl_detail;      // T x 1
    ad::Var speaker_grl;        // 1 x S on the pooled sum, before dropout

    AttributeCodes codes() const {
        return {prosody.codes, content.codes, detail.codes};
    }
};

// levels * log2(K) bits per frame, frames per second = sample_rate / hop
inline double compute_bitrate(const CodecConfig& cfg) {
    double levels = (double)(cfg.prosody_levels + cfg.content_levels + cfg.detail_levels);
    return levels * std::log2((double)cfg.codebook_size) *
           ((double)cfg.sample_rate / (double)cfg.hop());
}

// the per-utterance decision that blanks the detail branch on the decoder path
inline bool detail_drop_decision(double p, bool training, Rng& rng) {
    check(p >= 0.0 && p <= 1.0, "detail dropout: probability outside [0, 1]");
    if (!training || p <= 0.0) return false;
    return rng.uniform() < p;
}

struct Mlp {
    nn::Linear in, out;

    Mlp() = default;
    Mlp(nn::ParamStore& ps, const std::string& name, long d_in, long hidden, long d_out) {
        in = nn::Linear(ps, name + ".in", d_in, hidden);
        out = nn::Linear(ps, name + ".out", hidden, d_out);
    }

    ad::Var forward(const ad::Var& x) const { return out.forward(ad::elu(in.forward(x))); }
};

class Codec {
public:
    Codec(nn::ParamStore& ps, CodecConfig cfg = {}) : cfg_(std::move(cfg)) {
        check(cfg_.strides.size() == cfg_.enc_channels.size(),
              "codec: strides and channel list must align");
        check(cfg_.enc_channels.back() == cfg_.d_model,
              "codec: last encoder channel count must equal d_model");
        check(cfg_.detail_dropout_p >= 0.0 && cfg_.detail_dropout_p <= 1.0,
              "codec: detail dropout probability outside [0, 1]");
        check(cfg_.grl_lambda >= 0.0, "codec: grl scale must be non-negative");

        long c_in = 1;
        for (size_t i = 0; i < cfg_.strides.size(); ++i) {
            long c_out = cfg_.enc_channels[i];
            long k = 2 * cfg_.strides[i];
            enc_w_.push_back(ps.create("enc.conv" + std::to_string(i) + ".w", c_out, k * c_in,
                                       nn::Init::XavierNormal));
            enc_b_.push_back(ps.create("enc.conv" + std::to_string(i) + ".b", 1, c_out,
                                       nn::Init::Zeros));
            enc_k_.push_back(k);
            c_in = c_out;
        }
        enc_proj_ = nn::Linear(ps, "enc.proj", cfg_.d_model, cfg_.d_model);

        for (long b = 0; b < cfg_.timbre_blocks; ++b)
            timbre_blocks_.push_back(nn::ConformerBlock(ps, "timbre.block" + std::to_string(b),
                                                        cfg_.d_model, cfg_.heads, cfg_.ffn_hidden,
                                                        cfg_.conformer_kernel));
        if (cfg_.d_timbre != cfg_.d_model)
            timbre_proj_ = nn::Linear(ps, "timbre.proj", cfg_.d_model, cfg_.d_timbre);
        if (cfg_.timbre_attention_pool)
            timbre_pool_ = nn::Linear(ps, "timbre.pool", cfg_.d_model, 1);

        auto branch_cfg = [&](fvq::Attribute a, long levels) {
            fvq::BranchConfig bc;
            bc.attribute = a;
            bc.num_levels = levels;
            bc.codebook_size = cfg_.codebook_size;
            bc.d_low = cfg_.d_low;
            bc.d_model = cfg_.d_model;
            bc.bottleneck = cfg_.bottleneck;
            return bc;
        };
        prosody_ = fvq::FvqBranch(ps, "fvq.prosody",
                                  branch_cfg(fvq::Attribute::prosody, cfg_.prosody_levels));
        content_ = fvq::FvqBranch(ps, "fvq.content",
                                  branch_cfg(fvq::Attribute::content, cfg_.content_levels));
        detail_ = fvq::FvqBranch(ps, "fvq.detail",
                                 branch_cfg(fvq::Attribute::detail, cfg_.detail_levels));

        long d = cfg_.d_model, hh = cfg_.head_hidden;
        f0_head_ = Mlp(ps, "head.f0_p", d, hh, 1);
        phone_head_ = Mlp(ps, "head.ph_c", d, hh, cfg_.num_phonemes);
        spk_head_ = Mlp(ps, "head.spk_t", cfg_.d_timbre, hh, cfg_.num_speakers);
        grl_ph_p_ = Mlp(ps, "head.grl_ph_p", d, hh, cfg_.num_phonemes);
        grl_f0_c_ = Mlp(ps, "head.grl_f0_c", d, hh, 1);
        grl_ph_d_ = Mlp(ps, "head.grl_ph_d", d, hh, cfg_.num_phonemes);
        grl_f0_d_ = Mlp(ps, "head.grl_f0_d", d, hh, 1);
        grl_spk_ = Mlp(ps, "head.grl_spk", d, hh, cfg_.num_speakers);

        std::vector<long> rev_ch(cfg_.enc_channels.rbegin(), cfg_.enc_channels.rend());
        std::vector<long> rev_st(cfg_.strides.rbegin(), cfg_.strides.rend());
        auto wide = [&](long c) { return (long)std::llround(cfg_.decoder_width * (double)c); };
        long dc_in = wide(rev_ch[0]);
        dec_pre_ = nn::Linear(ps, "dec.pre", cfg_.d_model, dc_in);
        dec_cln_pre_ = nn::CondLayerNorm(ps, "dec.cln_pre", dc_in, cfg_.d_timbre);
        for (size_t j = 0; j < rev_st.size(); ++j) {
            long dc_out = j + 1 < rev_ch.size() ? wide(rev_ch[j + 1]) : rev_ch.back();
            long k = 2 * rev_st[j];
            dec_w_.push_back(ps.create("dec.deconv" + std::to_string(j) + ".w", dc_out,
                                       k * dc_in, nn::Init::XavierNormal));
            dec_b_.push_back(ps.create("dec.deconv" + std::to_string(j) + ".b", 1, dc_out,
                                       nn::Init::Zeros));
            dec_k_.push_back(k);
            dec_s_.push_back(rev_st[j]);
            dec_cln_.push_back(nn::CondLayerNorm(ps, "dec.cln" + std::to_string(j), dc_out,
                                                 cfg_.d_timbre));
            dc_in = dc_out;
        }
        dec_out_ = nn::Linear(ps, "dec.out", dc_in, 1);
    }

    const CodecConfig& config() const { return cfg_; }
    const fvq::FvqBranch& prosody_branch() const { return prosody_; }
    const fvq::FvqBranch& content_branch() const { return content_; }
    const fvq::FvqBranch& detail_branch() const { return detail_; }
    const Mlp& speaker_head() const { return spk_head_; }
    const Mlp& adv_phone_prosody_head() const { return grl_ph_p_; }
    const Mlp& adv_speaker_head() const { return grl_spk_; }

    long frame_count(long num_samples) const {
        return (num_samples + cfg_.hop() - 1) / cfg_.hop();
    }

    // waveform -> frame latents [ceil(len/hop) x D]
    ad::Var encode(const WavData& x) const {
        check(x.sample_rate == cfg_.sample_rate,
              "encode: resample required, expected " + std::to_string(cfg_.sample_rate) + " Hz");
        check(!x.samples.empty(), "encode: empty audio");
        Mat m((long)x.samples.size(), 1);
        for (long i = 0; i < m.rows(); ++i) {
            check(std::isfinite(x.samples[(size_t)i]), "encode: non-finite sample");
            m(i, 0) = x.samples[(size_t)i];
        }
        ad::Var h = ad::constant(std::move(m));
        for (size_t i = 0; i < enc_w_.size(); ++i)
            h = ad::elu(ad::conv1d(h, enc_w_[i], enc_b_[i], enc_k_[i], cfg_.strides[i]));
        return enc_proj_.forward(h);
    }

    // frame latents -> one global embedding [1 x D_t]
    ad::Var extract_timbre(const ad::Var& h) const {
        check(h.rows() >= 1, "extract_timbre: empty latent");
        ad::Var x = h;
        for (const auto& blk : timbre_blocks_) x = blk.forward(x);
        ad::Var pooled;
        if (cfg_.timbre_attention_pool) {
            ad::Var scores = ad::softmax_rows(ad::transpose(timbre_pool_.forward(x)));
            pooled = ad::matmul(scores, x);
        } else {
            pooled = ad::colwise_mean(x);
        }
        return cfg_.d_timbre != cfg_.d_model ? timbre_proj_.forward(pooled) : pooled;
    }

    // run the timbre extractor, all three quantizer branches, and every head;
    // during training the detail latent is zeroed on the decoder path with
    // probability detail_dropout_p (codes are still computed either way)
    CodecOutput factorize(const ad::Var& h, bool training, Rng* rng) const {
        CodecOutput o;
        o.prosody = prosody_.forward(h);
        o.content = content_.forward(h);
        o.detail = detail_.forward(h);
        o.h_t = extract_timbre(h);

        double lam = cfg_.grl_lambda;
        o.phone_grl_prosody = grl_ph_p_.forward(ad::grad_reversal(o.prosody.z, lam));
        o.f0_grl_content = grl_f0_c_.forward(ad::grad_reversal(o.content.z, lam));
        o.phone_grl_detail = grl_ph_d_.forward(ad::grad_reversal(o.detail.z, lam));
        o.f0_grl_detail = grl_f0_d_.forward(ad::grad_reversal(o.detail.z, lam));
        ad::Var zsum = ad::add(ad::add(o.prosody.z, o.content.z), o.detail.z);
        o.speaker_grl = grl_spk_.forward(ad::colwise_mean(ad::grad_reversal(zsum, lam)));

        o.f0_sup = f0_head_.forward(o.prosody.z);
        o.phone_sup = phone_head_.forward(o.content.z);
        o.speaker_sup = spk_head_.forward(o.h_t);

        if (training) check(rng != nullptr, "factorize: rng required during training");
        o.detail_dropped =
            training && detail_drop_decision(cfg_.detail_dropout_p, training, *rng);
        o.dec_detail = o.detail_dropped ? ad::constant(Mat::Zero(h.rows(), cfg_.d_model))
                                        : o.detail.z;
        return o;
    }

    // summed attribute latents -> waveform samples [T*hop x 1]; the timbre
    // embedding enters only through the conditional normalization layers
    ad::Var decode(const ad::Var& z_p, const ad::Var& z_c, const ad::Var& z_d,
                   const ad::Var& h_t) const {
        check(z_p.rows() == z_c.rows() && z_c.rows() == z_d.rows(),
              "decode: frame count mismatch");
        check(z_p.cols() == cfg_.d_model && z_c.cols() == cfg_.d_model &&
                  z_d.cols() == cfg_.d_model,
              "decode: latent width mismatch");
        check(h_t.rows() == 1 && h_t.cols() == cfg_.d_timbre, "decode: bad timbre embedding");
        ad::Var x = ad::add(ad::add(z_p, z_c), z_d);
        x = ad::elu(dec_cln_pre_.forward(dec_pre_.forward(x), h_t));
        for (size_t j = 0; j < dec_w_.size(); ++j) {
            x = ad::conv1d_transpose(x, dec_w_[j], dec_b_[j], dec_k_[j], dec_s_[j]);
            x = ad::elu(dec_cln_[j].forward(x, h_t));
        }
        return ad::tanh_op(dec_out_.forward(x));
    }

    WavData wave_of(const ad::Var& y) const {
        WavData w;
        w.sample_rate = cfg_.sample_rate;
        w.samples.resize((size_t)y.rows());
        for (long i = 0; i < y.rows(); ++i) w.samples[(size_t)i] = y.val()(i, 0);
        return w;
    }

    WavData reconstruct(const WavData& x) const {
        ad::NoGradGuard ng;
        ad::Var h = encode(x);
        ad::Var zp = prosody_.forward(h).z;
        ad::Var zc = content_.forward(h).z;
        ad::Var zd = detail_.forward(h).z;
        return wave_of(decode(zp, zc, zd, extract_timbre(h)));
    }

    // keep the source's prosody/content/detail, take the timbre from the prompt
    WavData voice_convert(const WavData& source, const WavData& prompt) const {
        ad::NoGradGuard ng;
        ad::Var h = encode(source);
        ad::Var zp = prosody_.forward(h).z;
        ad::Var zc = content_.forward(h).z;
        ad::Var zd = detail_.forward(h).z;
        return wave_of(decode(zp, zc, zd, extract_timbre(encode(prompt))));
    }

private:
    CodecConfig cfg_;
    std::vector<ad::Var> enc_w_, enc_b_;
    std::vector<long> enc_k_;
    nn::Linear enc_proj_;
    std::vector<nn::ConformerBlock> timbre_blocks_;
    nn::Linear timbre_proj_, timbre_pool_;
    fvq::FvqBranch prosody_, content_, detail_;
    Mlp f0_head_, phone_head_, spk_head_;
    Mlp grl_ph_p_, grl_f0_c_, grl_ph_d_, grl_f0_d_, grl_spk_;
    nn::Linear dec_pre_, dec_out_;
    nn::CondLayerNorm dec_cln_pre_;
    std::vector<ad::Var> dec_w_, dec_b_;
    std::vector<long> dec_k_, dec_s_;
    std::vector<nn::CondLayerNorm> dec_cln_;
};

}  // namespace codec
}  // namespace voxfactor
