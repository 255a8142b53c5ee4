#pragma once

// Training: the ten-term codec loss with its pinned coefficients, an optional
// single-scale spectral critic, masked-token diffusion training over all five
// denoiser heads, Adam/AdamW with a linear-warmup inverse-square-root
// schedule, global-norm clipping, and resumable binary checkpoints.

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "voxfactor/autodiff.hpp"
#include "voxfactor/codec.hpp"
#include "voxfactor/common.hpp"
#include "voxfactor/data.hpp"
#include "voxfactor/denoiser.hpp"
#include "voxfactor/diffusion.hpp"
#include "voxfactor/dsp.hpp"
#include "voxfactor/nn.hpp"
#include "voxfactor/pipeline.hpp"

namespace voxfactor {
namespace train {

// --- loss weights ----------------------------------------------------------------

struct LossWeights {
    double rec = 10.0;
    double adv = 2.0;
    double feat = 2.0;
    double codebook = 1.0;
    double commit = 0.25;
    double ph = 5.0;
    double f0 = 5.0;
    double gr_ph = 5.0;
    double gr_f0 = 5.0;
    double gr_spk = 1.0;
    // auxiliary speaker-classifier supervision; trains the head that the
    // reversal losses push against, outside the ten pinned terms
    double spk_aux = 1.0;

    // adversarial training is off at desk scale
    static LossWeights desk() {
        LossWeights w;
        w.adv = 0.0;
        w.feat = 0.0;
        return w;
    }
    static LossWeights paper() { return LossWeights(); }
};

// the ten-term weighted sum; with every raw term at 1 and default weights
// this is exactly 36.25
inline double weighted_paper_sum(const LossWeights& w, double rec, double adv,
                                 double feat, double codebook, double commit,
                                 double ph, double f0, double gr_ph, double gr_f0,
                                 double gr_spk) {
    return w.rec * rec + w.adv * adv + w.feat * feat + w.codebook * codebook +
           w.commit * commit + w.ph * ph + w.f0 * f0 + w.gr_ph * gr_ph +
           w.gr_f0 * gr_f0 + w.gr_spk * gr_spk;
}

// --- optimizer -------------------------------------------------------------------

struct OptimizerConfig {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.9;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; > 0 makes the update AdamW
    long warmup = 200;
    double clip_norm = 1.0;  // global gradient norm cap; <= 0 disables

    static OptimizerConfig codec_desk() { return OptimizerConfig(); }
    static OptimizerConfig codec_paper() {
        OptimizerConfig c;
        c.warmup = 5000;
        return c;
    }
    static OptimizerConfig diffusion_desk() {
        OptimizerConfig c;
        c.lr = 1e-4;
        c.beta1 = 0.9;
        c.beta2 = 0.98;
        c.weight_decay = 0.01;
        c.warmup = 200;
        return c;
    }
    static OptimizerConfig diffusion_paper() {
        OptimizerConfig c = diffusion_desk();
        c.warmup = 5000;
        return c;
    }
};

// linear warmup to the peak rate, then peak * sqrt(warmup / step)
inline double lr_at(long step, const OptimizerConfig& cfg) {
    check(step >= 1, "lr_at: step starts at 1");
    check(cfg.warmup >= 1, "lr_at: warmup must be positive");
    if (step <= cfg.warmup) return cfg.lr * (double)step / (double)cfg.warmup;
    return cfg.lr * std::sqrt((double)cfg.warmup / (double)step);
}

class Adam {
  public:
    explicit Adam(OptimizerConfig cfg = OptimizerConfig()) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    long steps_done() const { return t_; }

    // one update over every parameter that received a gradient
    void step(nn::ParamStore& ps, const ad::GradMap& grads) {
        ++t_;
        double rate = lr_at(t_, cfg_);

        double sq = 0.0;
        for (const auto& [name, v] : ps.all()) {
            const Mat* g = ad::grad_of(grads, v);
            if (g) sq += g->squaredNorm();
        }
        double norm = std::sqrt(sq);
        check(std::isfinite(norm), "optimizer: non-finite gradient norm");
        double scale = 1.0;
        if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
            scale = cfg_.clip_norm / norm;

        double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
        for (const auto& [name, v] : ps.all()) {
            const Mat* gp = ad::grad_of(grads, v);
            if (!gp) continue;
            Mat g = *gp * scale;
            Mat& m = slot(m_, name, v);
            Mat& w = slot(v_, name, v);
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
            w = cfg_.beta2 * w + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            Mat mh = m / bc1;
            Mat vh = w / bc2;
            Mat upd = mh.array() / (vh.array().sqrt() + cfg_.eps);
            Mat& p = v.node()->value;
            if (cfg_.weight_decay > 0.0) p -= rate * cfg_.weight_decay * p;
            p -= rate * upd;
        }
    }

    const std::map<std::string, Mat>& first_moments() const { return m_; }
    const std::map<std::string, Mat>& second_moments() const { return v_; }
    void restore(long t, std::map<std::string, Mat> m, std::map<std::string, Mat> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

  private:
    Mat& slot(std::map<std::string, Mat>& store, const std::string& name,
              const ad::Var& v) {
        auto it = store.find(name);
        if (it == store.end())
            it = store.emplace(name, Mat::Zero(v.rows(), v.cols())).first;
        return it->second;
    }

    OptimizerConfig cfg_;
    long t_ = 0;
    std::map<std::string, Mat> m_, v_;
};

// --- checkpoints -----------------------------------------------------------------

constexpr char kCheckpointMagic[9] = "VXFCKPT1";

namespace io {

inline void write_named_mats(std::ostream& out, const std::map<std::string, Mat>& m) {
    uint64_t n = m.size();
    out.write((const char*)&n, sizeof(n));
    for (const auto& [name, mat] : m) {
        uint64_t len = name.size();
        out.write((const char*)&len, sizeof(len));
        out.write(name.data(), (std::streamsize)len);
        int64_t r = mat.rows(), c = mat.cols();
        out.write((const char*)&r, sizeof(r));
        out.write((const char*)&c, sizeof(c));
        out.write((const char*)mat.data(), (std::streamsize)(r * c * 8));
    }
}

inline std::map<std::string, Mat> read_named_mats(std::istream& in) {
    uint64_t n = 0;
    in.read((char*)&n, sizeof(n));
    check(in.good(), "checkpoint: truncated state table");
    std::map<std::string, Mat> m;
    for (uint64_t i = 0; i < n; ++i) {
        uint64_t len = 0;
        in.read((char*)&len, sizeof(len));
        check(in.good() && len < 4096, "checkpoint: bad state name");
        std::string name(len, '\0');
        in.read(name.data(), (std::streamsize)len);
        int64_t r = 0, c = 0;
        in.read((char*)&r, sizeof(r));
        in.read((char*)&c, sizeof(c));
        check(in.good() && r >= 0 && c >= 0, "checkpoint: bad state shape");
        Mat mat(r, c);
        in.read((char*)mat.data(), (std::streamsize)(r * c * 8));
        check(in.good(), "checkpoint: truncated state data");
        m.emplace(std::move(name), std::move(mat));
    }
    return m;
}

}  // namespace io

inline void save_checkpoint(const std::string& path, const nn::ParamStore& ps,
                            const Adam& opt, long step, const Rng& rng) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "checkpoint: cannot write " + path);
    out.write(kCheckpointMagic, 8);
    int64_t s = step;
    uint64_t r = rng.state();
    out.write((const char*)&s, sizeof(s));
    out.write((const char*)&r, sizeof(r));
    ps.save(out);
    int64_t t = opt.steps_done();
    out.write((const char*)&t, sizeof(t));
    io::write_named_mats(out, opt.first_moments());
    io::write_named_mats(out, opt.second_moments());
    check(out.good(), "checkpoint: write failed for " + path);
}

// restores parameters in place; optimizer and rng restored when non-null.
// returns the step the checkpoint was taken at
inline long load_checkpoint(const std::string& path, nn::ParamStore& ps,
                            Adam* opt = nullptr, Rng* rng = nullptr) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    check(in.good() && std::memcmp(magic, kCheckpointMagic, 8) == 0,
          "checkpoint: bad magic in " + path);
    int64_t step = 0;
    uint64_t rstate = 0;
    in.read((char*)&step, sizeof(step));
    in.read((char*)&rstate, sizeof(rstate));
    ps.load(in);
    int64_t t = 0;
    in.read((char*)&t, sizeof(t));
    check(in.good(), "checkpoint: truncated optimizer state");
    auto m = io::read_named_mats(in);
    auto v = io::read_named_mats(in);
    if (opt) opt->restore(t, std::move(m), std::move(v));
    if (rng) rng->set_state(rstate);
    return step;
}

// parameters only, for inference-time loading
inline void save_params(const std::string& path, const nn::ParamStore& ps) {
    Adam none;
    save_checkpoint(path, ps, none, 0, Rng(0));
}

// --- frame-level supervision targets -----------------------------------------------

struct FrameTargets {
    std::vector<int> phones;  // phoneme id per frame
    Vec f0z;                  // z-scored F0 per frame, 0 where unvoiced
};

inline FrameTargets frame_targets(const data::Utterance& u, long hop = 200) {
    FrameTargets t;
    for (size_t i = 0; i < u.phonemes.size(); ++i)
        for (int r = 0; r < u.durations[i]; ++r) t.phones.push_back(u.phonemes[i]);
    long frames = dsp::frame_count((long)u.wave.samples.size(), hop);
    check((long)t.phones.size() == frames,
          "frame targets: durations do not cover the audio (" + u.id + ")");
    dsp::F0Track f0 = dsp::estimate_f0(u.wave.samples, u.wave.sample_rate, hop);
    check(f0.zscore.size() == frames, "frame targets: pitch frame mismatch");
    t.f0z = f0.zscore;
    return t;
}

// --- spectral critic (optional, desk default off) ----------------------------------

// single-scale log-mel critic: per-frame MLP score, least-squares objectives,
// feature matching over the hidden activations
class SpectralCritic {
  public:
    SpectralCritic(nn::ParamStore& ps, int sample_rate, long n_fft = 256,
                   long hop = 100, long n_mels = 40, long hidden = 64)
        : plan_(sample_rate, n_fft, hop, n_mels, 0.0, sample_rate / 2.0) {
        l1_ = nn::Linear(ps, "critic.l1", n_mels, hidden);
        l2_ = nn::Linear(ps, "critic.l2", hidden, hidden);
        out_ = nn::Linear(ps, "critic.out", hidden, 1);
    }

    ad::Var score(const ad::Var& wave, std::vector<ad::Var>* feats = nullptr) const {
        ad::Var h1 = ad::gelu(l1_.forward(dsp::log_mel_var(wave, plan_)));
        ad::Var h2 = ad::gelu(l2_.forward(h1));
        if (feats) {
            feats->push_back(h1);
            feats->push_back(h2);
        }
        return out_.forward(h2);
    }

    // generator-side terms: push scores of the reconstruction toward 1 and
    // its features toward the target's
    ad::Var generator_adv(const ad::Var& recon) const {
        return ad::mean_all(ad::square(ad::add_scalar(score(recon), -1.0)));
    }
    ad::Var feature_match(const ad::Var& recon, const Vec& target) const {
        std::vector<ad::Var> fr, ft;
        score(recon, &fr);
        ad::Var t;
        {
            ad::NoGradGuard ng;
            t = score(ad::constant(target), &ft);
        }
        ad::Var sum;
        for (size_t i = 0; i < fr.size(); ++i) {
            ad::Var d = ad::mean_all(ad::abs_op(ad::sub(fr[i], ad::constant(ft[i].val()))));
            sum = i == 0 ? d : ad::add(sum, d);
        }
        return ad::scale(sum, 1.0 / (double)fr.size());
    }

    // critic-side term: real toward 1, reconstruction (detached) toward 0
    ad::Var critic_loss(const Vec& recon_value, const Vec& target) const {
        ad::Var real = ad::mean_all(ad::square(ad::add_scalar(score(ad::constant(target)), -1.0)));
        ad::Var fake = ad::mean_all(ad::square(score(ad::constant(recon_value))));
        return ad::add(real, fake);
    }

  private:
    dsp::MelPlan plan_;
    nn::Linear l1_, l2_, out_;
};

// --- codec loss assembly -----------------------------------------------------------

struct LossTerms {
    double rec = 0, adv = 0, feat = 0, codebook = 0, commit = 0, ph = 0, f0 = 0,
           gr_ph = 0, gr_f0 = 0, gr_spk = 0, spk_aux = 0;
    double total = 0;
};

struct CodecLoss {
    ad::Var total;
    LossTerms terms;
};

// weighted sum of the ten pinned terms plus the auxiliary speaker term; any
// non-finite term aborts with its name.  Terms with zero weight are left out
// of the graph entirely so their gradient paths vanish.
inline CodecLoss codec_total_loss(const codec::CodecOutput& o, const ad::Var& recon,
                                  const data::Utterance& u, const FrameTargets& tgt,
                                  const LossWeights& w, const dsp::MultiScaleMel& mel,
                                  const SpectralCritic* critic = nullptr) {
    check((w.adv == 0.0 && w.feat == 0.0) || critic != nullptr,
          "codec loss: adversarial weights need a critic");

    long frames = (long)tgt.phones.size();
    check(o.phone_sup.rows() == frames, "codec loss: phoneme target length mismatch");
    check(o.f0_sup.rows() == frames, "codec loss: pitch target length mismatch");
    check(recon.rows() >= (long)u.wave.samples.size(),
          "codec loss: reconstruction shorter than the target");

    Vec target = Vec::Zero(recon.rows());
    for (size_t i = 0; i < u.wave.samples.size(); ++i)
        target((long)i) = u.wave.samples[i];

    std::vector<int> all(tgt.phones.size(), 1);
    std::vector<int> spk_label = {u.speaker};
    std::vector<int> one = {1};
    ad::Var f0c = ad::constant(tgt.f0z);

    auto ce = [&](const ad::Var& logits, const std::vector<int>& labels,
                  const std::vector<int>& msk) {
        return diff::masked_ce_loss(logits, labels, msk);
    };
    auto mse = [&](const ad::Var& pred) {
        return ad::mean_all(ad::square(ad::sub(pred, f0c)));
    };

    ad::Var l_rec = mel.loss(recon, target);
    ad::Var l_codebook = ad::scale(
        ad::add(ad::add(o.prosody.codebook_loss, o.content.codebook_loss),
                o.detail.codebook_loss),
        1.0 / 3.0);
    ad::Var l_commit = ad::scale(
        ad::add(ad::add(o.prosody.commit_loss, o.content.commit_loss),
                o.detail.commit_loss),
        1.0 / 3.0);
    ad::Var l_ph = ce(o.phone_sup, tgt.phones, all);
    ad::Var l_f0 = mse(o.f0_sup);
    ad::Var l_gr_ph = ad::scale(ad::add(ce(o.phone_grl_prosody, tgt.phones, all),
                                        ce(o.phone_grl_detail, tgt.phones, all)),
                                0.5);
    ad::Var l_gr_f0 = ad::scale(ad::add(mse(o.f0_grl_content), mse(o.f0_grl_detail)), 0.5);
    ad::Var l_gr_spk = ce(o.speaker_grl, spk_label, one);
    ad::Var l_spk = ce(o.speaker_sup, spk_label, one);
    ad::Var l_adv, l_feat;
    if (w.adv > 0.0) l_adv = critic->generator_adv(recon);
    if (w.feat > 0.0) l_feat = critic->feature_match(recon, target);

    CodecLoss out;
    auto put = [&](const char* name, const ad::Var& term, double weight, double* slot) {
        double v = term.node() ? term.val()(0, 0) : 0.0;
        check(std::isfinite(v), std::string("codec loss: non-finite term ") + name);
        *slot = v;
        if (weight != 0.0 && term.node()) {
            ad::Var wt = ad::scale(term, weight);
            out.total = out.total.node() ? ad::add(out.total, wt) : wt;
        }
    };
    put("rec", l_rec, w.rec, &out.terms.rec);
    put("adv", l_adv, w.adv, &out.terms.adv);
    put("feat", l_feat, w.feat, &out.terms.feat);
    put("codebook", l_codebook, w.codebook, &out.terms.codebook);
    put("commit", l_commit, w.commit, &out.terms.commit);
    put("ph", l_ph, w.ph, &out.terms.ph);
    put("f0", l_f0, w.f0, &out.terms.f0);
    put("gr_ph", l_gr_ph, w.gr_ph, &out.terms.gr_ph);
    put("gr_f0", l_gr_f0, w.gr_f0, &out.terms.gr_f0);
    put("gr_spk", l_gr_spk, w.gr_spk, &out.terms.gr_spk);
    put("spk_aux", l_spk, w.spk_aux, &out.terms.spk_aux);
    out.terms.total =
        weighted_paper_sum(w, out.terms.rec, out.terms.adv, out.terms.feat,
                           out.terms.codebook, out.terms.commit, out.terms.ph,
                           out.terms.f0, out.terms.gr_ph, out.terms.gr_f0,
                           out.terms.gr_spk) +
        w.spk_aux * out.terms.spk_aux;
    return out;
}

// --- metrics log ---------------------------------------------------------------

inline void log_metric(std::ostream* log, long step, const std::string& term,
                       double value) {
    if (log) *log << step << " " << term << " " << value << "\n";
}

// --- codec training ------------------------------------------------------------

struct CodecTrainConfig {
    long steps = 2000;
    long batch_frames = 1000;  // batch unit is frames
    uint64_t seed = 7;
    OptimizerConfig opt = OptimizerConfig::codec_desk();
    LossWeights weights = LossWeights::desk();
    bool use_critic = false;  // single-scale spectral critic
    OptimizerConfig critic_opt = OptimizerConfig::codec_desk();
    std::string checkpoint_path;  // empty = no checkpoints
    long checkpoint_every = 1000;
    bool resume = false;
    long log_every = 10;
    std::ostream* log = nullptr;
};

struct CodecTrainStats {
    std::vector<LossTerms> history;  // one entry per step
    long start_step = 1;
};

inline CodecTrainStats train_codec(const data::Dataset& ds, codec::Codec& cdc,
                                   nn::ParamStore& ps, const CodecTrainConfig& tc,
                                   nn::ParamStore* critic_ps = nullptr) {
    check(!ds.utts.empty(), "train codec: empty dataset");
    check((long)ds.num_phonemes <= cdc.config().num_phonemes,
          "train codec: dataset phoneme inventory exceeds the model's");
    check((long)ds.num_speakers <= cdc.config().num_speakers,
          "train codec: dataset speakers exceed the model's");

    long hop = cdc.config().hop();
    dsp::MultiScaleMel mel(cdc.config().sample_rate);

    std::vector<FrameTargets> targets;
    targets.reserve(ds.utts.size());
    for (const auto& u : ds.utts) targets.push_back(frame_targets(u, hop));

    std::optional<SpectralCritic> critic_obj;
    if (tc.use_critic) {
        check(critic_ps != nullptr, "train codec: critic needs its own parameter store");
        critic_obj.emplace(*critic_ps, cdc.config().sample_rate);
    }
    SpectralCritic* critic = critic_obj ? &*critic_obj : nullptr;

    Adam opt(tc.opt);
    Adam critic_opt(tc.critic_opt);
    Rng rng(tc.seed);
    CodecTrainStats stats;
    long start = 1;
    if (tc.resume && !tc.checkpoint_path.empty()) {
        start = load_checkpoint(tc.checkpoint_path, ps, &opt, &rng) + 1;
        stats.start_step = start;
    }

    for (long step = start; step <= tc.steps; ++step) {
        std::vector<long> batch;
        long frames = 0;
        while (frames < tc.batch_frames) {
            long idx = rng.uniform_int((int)ds.utts.size());
            batch.push_back(idx);
            frames += dsp::frame_count((long)ds.utts[(size_t)idx].wave.samples.size(), hop);
        }

        ad::Var total;
        LossTerms sums;
        std::vector<std::pair<Vec, long>> recon_values;  // for the critic
        for (long idx : batch) {
            const data::Utterance& u = ds.utts[(size_t)idx];
            ad::Var h = cdc.encode(u.wave);
            codec::CodecOutput o = cdc.factorize(h, true, &rng);
            ad::Var y = cdc.decode(o.prosody.z, o.content.z, o.dec_detail, o.h_t);
            CodecLoss l = codec_total_loss(o, y, u, targets[(size_t)idx], tc.weights,
                                           mel, critic);
            total = total.node() ? ad::add(total, l.total) : l.total;
            sums.rec += l.terms.rec;
            sums.adv += l.terms.adv;
            sums.feat += l.terms.feat;
            sums.codebook += l.terms.codebook;
            sums.commit += l.terms.commit;
            sums.ph += l.terms.ph;
            sums.f0 += l.terms.f0;
            sums.gr_ph += l.terms.gr_ph;
            sums.gr_f0 += l.terms.gr_f0;
            sums.gr_spk += l.terms.gr_spk;
            sums.spk_aux += l.terms.spk_aux;
            sums.total += l.terms.total;
            if (tc.use_critic) recon_values.emplace_back(y.val().col(0), idx);
        }
        double inv = 1.0 / (double)batch.size();
        total = ad::scale(total, inv);
        sums.rec *= inv;
        sums.adv *= inv;
        sums.feat *= inv;
        sums.codebook *= inv;
        sums.commit *= inv;
        sums.ph *= inv;
        sums.f0 *= inv;
        sums.gr_ph *= inv;
        sums.gr_f0 *= inv;
        sums.gr_spk *= inv;
        sums.spk_aux *= inv;
        sums.total *= inv;

        ad::GradMap grads = ad::backward(total);
        opt.step(ps, grads);

        if (tc.use_critic) {
            ad::Var closs;
            for (const auto& [recon, idx] : recon_values) {
                Vec tg = Vec::Zero(recon.size());
                const auto& samples = ds.utts[(size_t)idx].wave.samples;
                for (size_t i = 0; i < samples.size(); ++i) tg((long)i) = samples[i];
                ad::Var c = critic->critic_loss(recon, tg);
                closs = closs.node() ? ad::add(closs, c) : c;
            }
            closs = ad::scale(closs, inv);
            ad::GradMap cg = ad::backward(closs);
            critic_opt.step(*critic_ps, cg);
        }

        stats.history.push_back(sums);
        if (tc.log && step % tc.log_every == 0) {
            log_metric(tc.log, step, "total", sums.total);
            log_metric(tc.log, step, "rec", sums.rec);
            log_metric(tc.log, step, "ph", sums.ph);
            log_metric(tc.log, step, "f0", sums.f0);
            log_metric(tc.log, step, "gr_spk", sums.gr_spk);
        }
        if (!tc.checkpoint_path.empty() &&
            (step % tc.checkpoint_every == 0 || step == tc.steps))
            save_checkpoint(tc.checkpoint_path, ps, opt, step, rng);
    }
    return stats;
}

// --- diffusion training ----------------------------------------------------------

struct DiffusionTrainConfig {
    long steps = 2000;
    long batch_frames = 1000;
    uint64_t seed = 11;
    OptimizerConfig opt = OptimizerConfig::diffusion_desk();
    double p_cfg = 0.15;  // chance of training the unconditional branch
    double prompt_frac_min = 0.1;
    double prompt_frac_max = 0.5;
    std::string checkpoint_path;
    long checkpoint_every = 1000;
    bool resume = false;
    long log_every = 10;
    std::ostream* log = nullptr;
};

struct DiffusionTrainStats {
    std::vector<std::pair<int, double>> history;  // (task index, masked CE)
    long uncond_trials = 0;
    long uncond_drops = 0;
    long start_step = 1;
};

// ground-truth grids for one utterance, computed once with the codec frozen
struct UttCodes {
    std::vector<std::vector<int>> prosody, content, detail;
    std::vector<int> pooled;       // phoneme-level prosody codes
    std::vector<int> dur_classes;  // durations clamped to the class range
};

inline UttCodes utt_codes(const codec::Codec& cdc, const data::Utterance& u,
                          long dur_classes) {
    ad::NoGradGuard ng;
    UttCodes c;
    ad::Var h = cdc.encode(u.wave);
    c.prosody = cdc.prosody_branch().forward(h).codes;
    c.content = cdc.content_branch().forward(h).codes;
    c.detail = cdc.detail_branch().forward(h).codes;
    c.pooled = pipeline::phoneme_pool(h.val(), u.durations, cdc.prosody_branch());
    c.dur_classes = u.durations;
    for (int& d : c.dur_classes) d = std::min(d, (int)dur_classes - 1);
    return c;
}

// the five denoising tasks cycle per step; level within a multi-level
// attribute is drawn uniformly
inline tts::Stage task_stage(long step) {
    switch ((step - 1) % 5) {
        case 0: return tts::Stage::ph_prosody;
        case 1: return tts::Stage::duration;
        case 2: return tts::Stage::prosody;
        case 3: return tts::Stage::content;
        default: return tts::Stage::detail;
    }
}

inline DiffusionTrainStats train_diffusion(const data::Dataset& ds,
                                           const codec::Codec& cdc,
                                           tts::TtsModel& model, nn::ParamStore& ps,
                                           const DiffusionTrainConfig& tc) {
    check(!ds.utts.empty(), "train diffusion: empty dataset");
    const tts::TtsConfig& mc = model.config();
    check(mc.code_vocab == cdc.config().codebook_size,
          "train diffusion: generator and codec vocabulary mismatch");

    long hop = cdc.config().hop();
    diff::MaskSchedule sched{mc.horizon};

    std::vector<UttCodes> codes;
    codes.reserve(ds.utts.size());
    for (const auto& u : ds.utts) codes.push_back(utt_codes(cdc, u, mc.dur_classes));

    Adam opt(tc.opt);
    Rng rng(tc.seed);
    DiffusionTrainStats stats;
    long start = 1;
    if (tc.resume && !tc.checkpoint_path.empty()) {
        start = load_checkpoint(tc.checkpoint_path, ps, &opt, &rng) + 1;
        stats.start_step = start;
    }

    for (long step = start; step <= tc.steps; ++step) {
        tts::Stage stage = task_stage(step);

        std::vector<long> batch;
        long frames = 0;
        while (frames < tc.batch_frames) {
            long idx = rng.uniform_int((int)ds.utts.size());
            batch.push_back(idx);
            frames += dsp::frame_count((long)ds.utts[(size_t)idx].wave.samples.size(), hop);
        }

        ad::Var total;
        double value_sum = 0.0;
        long contributing = 0;
        for (long idx : batch) {
            const data::Utterance& u = ds.utts[(size_t)idx];
            const UttCodes& gt = codes[(size_t)idx];

            double t = mc.horizon * (1.0 - rng.uniform());  // uniform on (0, T]
            double frac = rng.uniform(tc.prompt_frac_min, tc.prompt_frac_max);
            bool drop = false;
            if (stage != tts::Stage::duration) {
                drop = diff::cfg_train_drop(rng, tc.p_cfg);
                stats.uncond_trials++;
                if (drop) stats.uncond_drops++;
            }

            tts::StageRequest req;
            req.stage = stage;
            std::vector<int> target;
            if (stage == tts::Stage::ph_prosody || stage == tts::Stage::duration) {
                long l = (long)u.phonemes.size();
                req.n = l;
                req.prompt_len = (long)std::floor(frac * (double)l);
                req.cond_features = model.phoneme_encode_var(u.phonemes);
                if (stage == tts::Stage::duration) req.cond_codes = {gt.pooled};
                target = stage == tts::Stage::ph_prosody ? gt.pooled : gt.dur_classes;
            } else {
                long frames_u = (long)gt.prosody[0].size();
                req.n = frames_u;
                req.prompt_len = (long)std::floor(frac * (double)frames_u);
                req.cond_features = pipeline::length_regulate(
                    model.phoneme_encode_var(u.phonemes), u.durations);
                if (stage == tts::Stage::prosody) {
                    req.level = 0;
                    target = gt.prosody[0];
                } else if (stage == tts::Stage::content) {
                    long lvl = rng.uniform_int((int)mc.content_levels);
                    req.level = lvl;
                    req.cond_codes = {gt.prosody[0]};
                    req.cond_slots = {tts::grid_slot(tts::Stage::prosody, 0)};
                    for (long j = 0; j < lvl; ++j) {
                        req.cond_codes.push_back(gt.content[(size_t)j]);
                        req.cond_slots.push_back(tts::grid_slot(tts::Stage::content, j));
                    }
                    target = gt.content[(size_t)lvl];
                } else {
                    long lvl = rng.uniform_int((int)mc.detail_levels);
                    req.level = lvl;
                    req.cond_codes = {gt.prosody[0]};
                    req.cond_slots = {tts::grid_slot(tts::Stage::prosody, 0)};
                    for (long j = 0; j < mc.content_levels; ++j) {
                        req.cond_codes.push_back(gt.content[(size_t)j]);
                        req.cond_slots.push_back(tts::grid_slot(tts::Stage::content, j));
                    }
                    for (long j = 0; j < lvl; ++j) {
                        req.cond_codes.push_back(gt.detail[(size_t)j]);
                        req.cond_slots.push_back(tts::grid_slot(tts::Stage::detail, j));
                    }
                    target = gt.detail[(size_t)lvl];
                }
            }

            diff::DiffusionState st =
                diff::forward_mask(target, t, req.prompt_len, rng, sched);
            if (st.masked_count() == 0) continue;  // nothing to predict
            ad::Var logits = model.logits(req, st, drop);
            ad::Var l = diff::masked_ce_loss(logits, target, st.mask);
            total = total.node() ? ad::add(total, l) : l;
            value_sum += l.val()(0, 0);
            check(std::isfinite(value_sum), "train diffusion: non-finite masked CE");
            ++contributing;
        }
        if (contributing == 0) {
            stats.history.emplace_back((int)((step - 1) % 5), 0.0);
            continue;
        }
        total = ad::scale(total, 1.0 / (double)contributing);
        ad::GradMap grads = ad::backward(total);
        opt.step(ps, grads);

        double mean = value_sum / (double)contributing;
        stats.history.emplace_back((int)((step - 1) % 5), mean);
        if (tc.log && step % tc.log_every == 0)
            log_metric(tc.log, step, std::string("mask_") + tts::stage_name(stage), mean);
        if (!tc.checkpoint_path.empty() &&
            (step % tc.checkpoint_every == 0 || step == tc.steps))
            save_checkpoint(tc.checkpoint_path, ps, opt, step, rng);
    }
    return stats;
}

// deterministic masked-CE evaluation over the frame-level heads (the ones
// with the full code vocabulary); used to judge diffusion training progress
inline double eval_masked_ce(const data::Dataset& ds, const codec::Codec& cdc,
                             const tts::TtsModel& model, double t_eval = 0.5,
                             double prompt_frac = 0.3, uint64_t seed = 99) {
    check(!ds.utts.empty(), "eval masked ce: empty dataset");
    const tts::TtsConfig& mc = model.config();
    diff::MaskSchedule sched{mc.horizon};
    ad::NoGradGuard ng;

    double sum = 0.0;
    long count = 0;
    Rng rng(seed);
    for (size_t ui = 0; ui < ds.utts.size(); ++ui) {
        const data::Utterance& u = ds.utts[ui];
        UttCodes gt = utt_codes(cdc, u, mc.dur_classes);
        long frames_u = (long)gt.prosody[0].size();
        long p = (long)std::floor(prompt_frac * (double)frames_u);
        ad::Var c_ph = pipeline::length_regulate(model.phoneme_encode_var(u.phonemes),
                                                 u.durations);

        auto eval_one = [&](tts::Stage stage, long lvl,
                            const std::vector<std::vector<int>>& cond,
                            const std::vector<long>& slots,
                            const std::vector<int>& target) {
            tts::StageRequest req;
            req.stage = stage;
            req.level = lvl;
            req.n = frames_u;
            req.prompt_len = p;
            req.cond_features = c_ph;
            req.cond_codes = cond;
            req.cond_slots = slots;
            Rng local = rng.fork(0x6d636531ULL, (uint64_t)(ui * 16 + (size_t)tts::grid_slot(stage, lvl)));
            diff::DiffusionState st = diff::forward_mask(target, t_eval, p, local, sched);
            if (st.masked_count() == 0) return;
            ad::Var l = diff::masked_ce_loss(model.logits(req, st, false), target, st.mask);
            sum += l.val()(0, 0);
            ++count;
        };

        eval_one(tts::Stage::prosody, 0, {}, {}, gt.prosody[0]);
        std::vector<std::vector<int>> cond = {gt.prosody[0]};
        std::vector<long> slots = {tts::grid_slot(tts::Stage::prosody, 0)};
        for (long l = 0; l < mc.content_levels; ++l) {
            eval_one(tts::Stage::content, l, cond, slots, gt.content[(size_t)l]);
            cond.push_back(gt.content[(size_t)l]);
            slots.push_back(tts::grid_slot(tts::Stage::content, l));
        }
        for (long l = 0; l < mc.detail_levels; ++l) {
            eval_one(tts::Stage::detail, l, cond, slots, gt.detail[(size_t)l]);
            cond.push_back(gt.detail[(size_t)l]);
            slots.push_back(tts::grid_slot(tts::Stage::detail, l));
        }
    }
    check(count > 0, "eval masked ce: no masked positions anywhere");
    return sum / (double)count;
}

}  // namespace train
}  // namespace voxfactor
