// Training contracts: the pinned loss-weight sum, per-term breakdown, NaN
// containment, zero-weight gradient isolation, gradient-reversal wiring, the
// warmup/inverse-sqrt schedule, Adam updates, bit-exact checkpoint resume,
// and short smoke runs that actually reduce both losses.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include "voxfactor/training.hpp"

using namespace voxfactor;
using Catch::Matchers::ContainsSubstring;

namespace {

codec::CodecConfig tiny_cc() {
    codec::CodecConfig c;
    c.enc_channels = {4, 6, 8, 12};
    c.d_model = 12;
    c.d_timbre = 12;
    c.timbre_blocks = 1;
    c.heads = 2;
    c.ffn_hidden = 24;
    c.num_phonemes = 8;
    c.num_speakers = 2;
    c.head_hidden = 10;
    c.codebook_size = 17;
    c.d_low = 4;
    return c;
}

tts::TtsConfig tiny_tc() {
    tts::TtsConfig c;
    c.num_phonemes = 8;
    c.code_vocab = 17;
    c.dur_classes = 8;
    c.d_phe = 16;
    c.phe_layers = 1;
    c.phe_heads = 2;
    c.phe_ffn = 32;
    c.d_phd = 16;
    c.phd_layers = 1;
    c.phd_heads = 2;
    c.phd_ffn = 32;
    c.d_trunk = 24;
    c.trunk_layers = 1;
    c.trunk_heads = 2;
    c.trunk_ffn = 48;
    c.d_time = 8;
    return c;
}

// four short utterances, two speakers, phoneme ids under 8
data::Dataset tiny_dataset() {
    data::SyntheticSpec spec;
    spec.num_speakers = 2;
    spec.utts_per_speaker = 2;
    spec.num_phonemes = 8;
    spec.min_phones = 3;
    spec.max_phones = 4;
    spec.min_dur = 2;
    spec.max_dur = 4;
    spec.seed = 21;
    return data::as_dataset(data::make_synthetic(spec), spec.num_phonemes);
}

double grad_norm(const ad::GradMap& g, const ad::Var& v) {
    const Mat* m = ad::grad_of(g, v);
    return m ? m->norm() : 0.0;
}

}  // namespace

TEST_CASE("learning rate schedule hits its landmarks") {
    train::OptimizerConfig cfg;
    cfg.lr = 2e-4;
    cfg.warmup = 200;

    CHECK(train::lr_at(1, cfg) == 2e-4 / 200.0);
    CHECK(train::lr_at(100, cfg) == 1e-4);
    CHECK(train::lr_at(200, cfg) == 2e-4);
    CHECK(train::lr_at(800, cfg) == Catch::Approx(1e-4).margin(1e-18));

    for (long s = 201; s < 400; ++s) CHECK(train::lr_at(s + 1, cfg) < train::lr_at(s, cfg));
    CHECK_THROWS(train::lr_at(0, cfg));

    train::OptimizerConfig bad;
    bad.warmup = 0;
    CHECK_THROWS(train::lr_at(1, bad));
}

TEST_CASE("optimizer presets match the published recipe") {
    train::OptimizerConfig c = train::OptimizerConfig::codec_paper();
    CHECK(c.lr == 2e-4);
    CHECK(c.beta1 == 0.5);
    CHECK(c.beta2 == 0.9);
    CHECK(c.warmup == 5000);
    CHECK(c.weight_decay == 0.0);

    train::OptimizerConfig d = train::OptimizerConfig::diffusion_paper();
    CHECK(d.lr == 1e-4);
    CHECK(d.beta1 == 0.9);
    CHECK(d.beta2 == 0.98);
    CHECK(d.warmup == 5000);
    CHECK(d.weight_decay > 0.0);

    CHECK(train::OptimizerConfig::codec_desk().warmup == 200);
    CHECK(train::OptimizerConfig::diffusion_desk().warmup == 200);
}

TEST_CASE("all-ones weighted sum is pinned") {
    train::LossWeights w = train::LossWeights::paper();
    CHECK(train::weighted_paper_sum(w, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1) == 36.25);

    train::LossWeights d = train::LossWeights::desk();
    CHECK(d.adv == 0.0);
    CHECK(d.feat == 0.0);
    CHECK(train::weighted_paper_sum(d, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1) == 32.25);
}

TEST_CASE("adam takes the expected first step") {
    train::OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.warmup = 1;
    cfg.beta1 = 0.5;
    cfg.beta2 = 0.5;
    cfg.clip_norm = 0.0;

    SECTION("bias-corrected signed update") {
        nn::ParamStore ps;
        ad::Var w = ps.create("w", 1, 2, nn::Init::Zeros);
        train::Adam opt(cfg);
        ad::GradMap g;
        g[w.node()] = Mat::Constant(1, 2, 3.0);
        opt.step(ps, g);
        // mh = 3, vh = 9: the update is lr * 3 / (3 + eps) per coordinate
        double expect = -0.1 * 3.0 / (3.0 + cfg.eps);
        CHECK(w.val()(0, 0) == Catch::Approx(expect).margin(1e-12));
        CHECK(w.val()(0, 1) == Catch::Approx(expect).margin(1e-12));
        CHECK(opt.steps_done() == 1);
    }

    SECTION("decoupled weight decay acts even with zero gradient") {
        cfg.weight_decay = 0.1;
        nn::ParamStore ps;
        ad::Var w = ps.create("w", 1, 1, nn::Init::Ones);
        train::Adam opt(cfg);
        ad::GradMap g;
        g[w.node()] = Mat::Zero(1, 1);
        opt.step(ps, g);
        CHECK(w.val()(0, 0) == Catch::Approx(0.99).margin(1e-12));
    }

    SECTION("parameters without gradients stay put") {
        nn::ParamStore ps;
        ad::Var w = ps.create("w", 1, 1, nn::Init::Ones);
        ad::Var u = ps.create("u", 1, 1, nn::Init::Ones);
        train::Adam opt(cfg);
        ad::GradMap g;
        g[w.node()] = Mat::Constant(1, 1, 1.0);
        opt.step(ps, g);
        CHECK(u.val()(0, 0) == 1.0);
        CHECK(w.val()(0, 0) != 1.0);
    }

    SECTION("non-finite gradients abort") {
        nn::ParamStore ps;
        ad::Var w = ps.create("w", 1, 1, nn::Init::Ones);
        train::Adam opt(cfg);
        ad::GradMap g;
        g[w.node()] = Mat::Constant(1, 1, std::nan(""));
        CHECK_THROWS_WITH(opt.step(ps, g), ContainsSubstring("non-finite"));
    }
}

TEST_CASE("adam minimizes a quadratic") {
    nn::ParamStore ps(3);
    ad::Var w = ps.create("w", 1, 3, nn::Init::Normal);
    Mat target(1, 3);
    target << 0.3, -1.2, 2.0;

    train::OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.warmup = 10;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    train::Adam opt(cfg);

    double first = 0.0, last = 0.0;
    for (int s = 0; s < 500; ++s) {
        ad::Var loss = ad::mean_all(ad::square(ad::sub(w, ad::constant(target))));
        if (s == 0) first = loss.val()(0, 0);
        last = loss.val()(0, 0);
        ad::GradMap g = ad::backward(loss);
        opt.step(ps, g);
    }
    CHECK(last < first);
    CHECK(last < 1e-3);
    CHECK(opt.steps_done() == 500);
}

TEST_CASE("frame targets expand phonemes and pitch") {
    data::Utterance u;
    u.id = "spk0_utt000";
    u.speaker = 0;
    u.phonemes = {1, 2};
    u.durations = {2, 3};
    u.wave.sample_rate = 16000;
    u.wave.samples.resize(1000);
    for (size_t i = 0; i < u.wave.samples.size(); ++i)
        u.wave.samples[i] = 0.4 * std::sin(2.0 * M_PI * 200.0 * (double)i / 16000.0);

    train::FrameTargets t = train::frame_targets(u, 200);
    CHECK(t.phones == std::vector<int>{1, 1, 2, 2, 2});
    CHECK(t.f0z.size() == 5);
    for (long i = 0; i < 5; ++i) CHECK(std::isfinite(t.f0z(i)));

    u.durations = {2, 2};
    CHECK_THROWS_WITH(train::frame_targets(u, 200), ContainsSubstring("durations"));
}

TEST_CASE("ten-term breakdown matches the weighted total") {
    data::Dataset ds = tiny_dataset();
    nn::ParamStore ps(5);
    codec::Codec cdc(ps, tiny_cc());
    dsp::MultiScaleMel mel(cdc.config().sample_rate);
    const data::Utterance& u = ds.utts[0];
    train::FrameTargets tgt = train::frame_targets(u, cdc.config().hop());

    Rng rng(3);
    ad::Var h = cdc.encode(u.wave);
    codec::CodecOutput o = cdc.factorize(h, true, &rng);
    ad::Var y = cdc.decode(o.prosody.z, o.content.z, o.dec_detail, o.h_t);

    train::LossWeights w = train::LossWeights::desk();
    train::CodecLoss l = train::codec_total_loss(o, y, u, tgt, w, mel);

    CHECK(l.total.node() != nullptr);
    double total = l.total.val()(0, 0);
    CHECK(std::isfinite(total));
    CHECK(std::abs(total - l.terms.total) < 1e-6);

    // every reported raw term is finite; the active ones are positive
    CHECK(l.terms.rec > 0.0);
    CHECK(l.terms.codebook > 0.0);
    CHECK(l.terms.commit > 0.0);
    CHECK(l.terms.ph > 0.0);
    CHECK(l.terms.f0 > 0.0);
    CHECK(l.terms.gr_ph > 0.0);
    CHECK(l.terms.gr_f0 > 0.0);
    CHECK(l.terms.gr_spk > 0.0);
    CHECK(l.terms.spk_aux > 0.0);
    CHECK(l.terms.adv == 0.0);
    CHECK(l.terms.feat == 0.0);

    SECTION("adversarial weights demand a critic") {
        CHECK_THROWS_WITH(
            train::codec_total_loss(o, y, u, tgt, train::LossWeights::paper(), mel),
            ContainsSubstring("critic"));
    }

    SECTION("a poisoned term is reported by name") {
        ps.get("head.f0_p.out.w").node()->value.setConstant(std::nan(""));
        codec::CodecOutput bad = cdc.factorize(cdc.encode(u.wave), false, nullptr);
        ad::Var yb = cdc.decode(bad.prosody.z, bad.content.z, bad.dec_detail, bad.h_t);
        CHECK_THROWS_WITH(train::codec_total_loss(bad, yb, u, tgt, w, mel),
                          ContainsSubstring("f0"));
    }
}

TEST_CASE("zero-weight terms leave no gradient") {
    data::Dataset ds = tiny_dataset();
    nn::ParamStore ps(5);
    codec::Codec cdc(ps, tiny_cc());
    dsp::MultiScaleMel mel(cdc.config().sample_rate);
    const data::Utterance& u = ds.utts[1];
    train::FrameTargets tgt = train::frame_targets(u, cdc.config().hop());

    auto grads_with = [&](const train::LossWeights& w) {
        Rng rng(4);
        ad::Var h = cdc.encode(u.wave);
        codec::CodecOutput o = cdc.factorize(h, true, &rng);
        ad::Var y = cdc.decode(o.prosody.z, o.content.z, o.dec_detail, o.h_t);
        train::CodecLoss l = train::codec_total_loss(o, y, u, tgt, w, mel);
        return ad::backward(l.total);
    };

    train::LossWeights on = train::LossWeights::desk();
    ad::GradMap g_on = grads_with(on);
    CHECK(grad_norm(g_on, ps.get("head.ph_c.in.w")) > 0.0);
    CHECK(grad_norm(g_on, ps.get("head.f0_p.in.w")) > 0.0);
    CHECK(grad_norm(g_on, ps.get("head.spk_t.in.w")) > 0.0);
    CHECK(grad_norm(g_on, ps.get("head.grl_spk.in.w")) > 0.0);

    train::LossWeights off = on;
    off.ph = 0.0;
    off.f0 = 0.0;
    off.spk_aux = 0.0;
    off.gr_spk = 0.0;
    ad::GradMap g_off = grads_with(off);
    CHECK(grad_norm(g_off, ps.get("head.ph_c.in.w")) == 0.0);
    CHECK(grad_norm(g_off, ps.get("head.f0_p.in.w")) == 0.0);
    CHECK(grad_norm(g_off, ps.get("head.spk_t.in.w")) == 0.0);
    CHECK(grad_norm(g_off, ps.get("head.grl_spk.in.w")) == 0.0);
    // the reconstruction path still trains
    CHECK(grad_norm(g_off, ps.get("enc.conv0.w")) > 0.0);
    CHECK(grad_norm(g_off, ps.get("dec.out.w")) > 0.0);
}

TEST_CASE("gradient reversal flips the upstream direction") {
    SECTION("the primitive negates and scales") {
        nn::ParamStore ps(9);
        ad::Var x = ps.create("x", 2, 3, nn::Init::Normal);
        ad::GradMap g1 = ad::backward(ad::mean_all(ad::square(x)));
        ad::GradMap g2 = ad::backward(ad::mean_all(ad::square(ad::grad_reversal(x, 1.0))));
        ad::GradMap g3 = ad::backward(ad::mean_all(ad::square(ad::grad_reversal(x, 2.0))));
        const Mat* a = ad::grad_of(g1, x);
        const Mat* b = ad::grad_of(g2, x);
        const Mat* c = ad::grad_of(g3, x);
        REQUIRE(a);
        REQUIRE(b);
        REQUIRE(c);
        CHECK(b->isApprox(-*a, 1e-12));
        CHECK(c->isApprox(-2.0 * *a, 1e-12));
    }

    SECTION("the reversal sits between the codec encoder and the adversary") {
        data::Dataset ds = tiny_dataset();
        const data::Utterance& u = ds.utts[2];

        auto encoder_and_head = [&](double lambda, Mat* head_grad) {
            codec::CodecConfig cc = tiny_cc();
            cc.grl_lambda = lambda;
            nn::ParamStore ps(5);  // same seed: identical initial values
            codec::Codec cdc(ps, cc);
            codec::CodecOutput o = cdc.factorize(cdc.encode(u.wave), false, nullptr);
            ad::Var l = diff::masked_ce_loss(o.speaker_grl, {u.speaker}, {1});
            ad::GradMap g = ad::backward(l);
            const Mat* gh = ad::grad_of(g, ps.get("head.grl_spk.in.w"));
            REQUIRE(gh);
            *head_grad = *gh;
            return grad_norm(g, ps.get("enc.conv0.w"));
        };

        Mat head_on, head_off;
        double enc_on = encoder_and_head(1.0, &head_on);
        double enc_off = encoder_and_head(0.0, &head_off);
        CHECK(enc_on > 0.0);      // the adversary's loss reaches the encoder
        CHECK(enc_off == 0.0);    // ... only through the reversal gate
        CHECK(head_on == head_off);  // the head itself sees the true gradient
    }
}

TEST_CASE("checkpoints restore training bit for bit") {
    const char* path = "ckpt_roundtrip.bin";
    Mat target(1, 3);
    target << 1.0, -2.0, 0.5;

    train::OptimizerConfig cfg;
    cfg.lr = 0.05;
    cfg.warmup = 5;

    auto quad_step = [&](nn::ParamStore& ps, train::Adam& opt) {
        ad::Var w = ps.get("w");
        ad::Var loss = ad::mean_all(ad::square(ad::sub(w, ad::constant(target))));
        opt.step(ps, ad::backward(loss));
    };

    nn::ParamStore a(7);
    a.create("w", 1, 3, nn::Init::Normal);
    a.create("b", 2, 2, nn::Init::Normal);
    train::Adam opt_a(cfg);
    Rng rng_a(42);
    rng_a.uniform();
    for (int i = 0; i < 3; ++i) quad_step(a, opt_a);
    train::save_checkpoint(path, a, opt_a, 3, rng_a);

    nn::ParamStore b(8);  // different seed: load must overwrite everything
    b.create("w", 1, 3, nn::Init::Normal);
    b.create("b", 2, 2, nn::Init::Normal);
    train::Adam opt_b(cfg);
    Rng rng_b(0);
    long step = train::load_checkpoint(path, b, &opt_b, &rng_b);

    CHECK(step == 3);
    CHECK(rng_b.state() == rng_a.state());
    CHECK(opt_b.steps_done() == opt_a.steps_done());
    CHECK(b.get("w").val() == a.get("w").val());
    CHECK(b.get("b").val() == a.get("b").val());

    // both copies take two more identical steps and stay in lockstep
    for (int i = 0; i < 2; ++i) {
        quad_step(a, opt_a);
        quad_step(b, opt_b);
    }
    CHECK(b.get("w").val() == a.get("w").val());

    SECTION("missing and corrupt files are rejected") {
        nn::ParamStore c;
        CHECK_THROWS(train::load_checkpoint("no_such_checkpoint.bin", c));
        std::ofstream bad("ckpt_bad.bin", std::ios::binary);
        bad << "XXXXXXXXgarbage";
        bad.close();
        CHECK_THROWS_WITH(train::load_checkpoint("ckpt_bad.bin", c),
                          ContainsSubstring("magic"));
        std::remove("ckpt_bad.bin");
    }
    std::remove(path);
}

TEST_CASE("a resumed codec run continues where it stopped") {
    const char* path = "ckpt_resume.bin";
    data::Dataset ds = tiny_dataset();

    train::CodecTrainConfig tc;
    tc.steps = 6;
    tc.batch_frames = 20;
    tc.seed = 17;
    tc.opt.warmup = 5;
    tc.opt.lr = 1e-3;

    nn::ParamStore ps_a(5);
    codec::Codec cdc_a(ps_a, tiny_cc());
    train::CodecTrainStats full = train_codec(ds, cdc_a, ps_a, tc);
    REQUIRE(full.history.size() == 6);

    train::CodecTrainConfig tc_half = tc;
    tc_half.steps = 3;
    tc_half.checkpoint_path = path;
    tc_half.checkpoint_every = 3;
    nn::ParamStore ps_b(5);
    codec::Codec cdc_b(ps_b, tiny_cc());
    train_codec(ds, cdc_b, ps_b, tc_half);

    train::CodecTrainConfig tc_rest = tc;
    tc_rest.checkpoint_path = path;
    tc_rest.resume = true;
    nn::ParamStore ps_c(9);  // deliberately different init; checkpoint wins
    codec::Codec cdc_c(ps_c, tiny_cc());
    train::CodecTrainStats rest = train_codec(ds, cdc_c, ps_c, tc_rest);

    REQUIRE(rest.start_step == 4);
    REQUIRE(rest.history.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(rest.history[i].total - full.history[i + 3].total) < 1e-5);
        CHECK(std::abs(rest.history[i].rec - full.history[i + 3].rec) < 1e-5);
    }

    // the resumed parameters end up where the uninterrupted run's did
    for (const auto& [name, v] : ps_a.all())
        CHECK(v.val().isApprox(ps_c.get(name).val(), 1e-9));
    std::remove(path);
}

TEST_CASE("a short run reduces the codec loss") {
    data::Dataset ds = tiny_dataset();
    nn::ParamStore ps(5);
    codec::Codec cdc(ps, tiny_cc());

    train::CodecTrainConfig tc;
    tc.steps = 30;
    tc.batch_frames = 20;
    tc.seed = 23;
    tc.opt.lr = 1e-3;
    tc.opt.warmup = 5;

    std::ostringstream log;
    tc.log = &log;
    tc.log_every = 10;
    train::CodecTrainStats st = train_codec(ds, cdc, ps, tc);
    REQUIRE(st.history.size() == 30);

    auto mean_total = [&](size_t lo, size_t hi) {
        double s = 0;
        for (size_t i = lo; i < hi; ++i) s += st.history[i].total;
        return s / (double)(hi - lo);
    };
    CHECK(mean_total(25, 30) < mean_total(0, 5));
    for (const auto& t : st.history) CHECK(std::isfinite(t.total));

    // metrics lines parse as "<step> <term> <value>"
    std::istringstream in(log.str());
    std::string line;
    long lines = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        long step = 0;
        std::string term;
        double value = std::nan("");
        REQUIRE((ls >> step >> term >> value));
        CHECK(step % 10 == 0);
        CHECK(std::isfinite(value));
        ++lines;
    }
    CHECK(lines == 3 * 5);  // three logged steps, five terms each
}

TEST_CASE("the spectral critic trains against the decoder") {
    data::Dataset ds = tiny_dataset();
    nn::ParamStore ps(5);
    codec::Codec cdc(ps, tiny_cc());

    train::CodecTrainConfig tc;
    tc.steps = 3;
    tc.batch_frames = 10;
    tc.seed = 31;
    tc.weights = train::LossWeights::paper();  // adv and feat active
    tc.use_critic = true;

    SECTION("a critic store is required") {
        CHECK_THROWS_WITH(train_codec(ds, cdc, ps, tc), ContainsSubstring("critic"));
    }

    SECTION("adversarial terms flow once the critic exists") {
        nn::ParamStore critic_ps(6);
        train::CodecTrainStats st = train_codec(ds, cdc, ps, tc, &critic_ps);
        REQUIRE(st.history.size() == 3);
        for (const auto& t : st.history) {
            CHECK(t.adv > 0.0);
            CHECK(t.feat > 0.0);
            CHECK(std::isfinite(t.total));
        }
        CHECK(critic_ps.has("critic.l1.w"));
        // the critic's own optimizer moved its parameters
        nn::ParamStore fresh(6);
        train::SpectralCritic probe(fresh, cdc.config().sample_rate);
        CHECK(!critic_ps.get("critic.l1.w").val().isApprox(fresh.get("critic.l1.w").val(), 1e-12));
    }
}

TEST_CASE("diffusion training reduces masked cross-entropy") {
    data::Dataset ds = tiny_dataset();
    nn::ParamStore cps(5);
    codec::Codec cdc(cps, tiny_cc());
    nn::ParamStore tps(13);
    tts::TtsModel model(tps, tiny_tc());

    double before = train::eval_masked_ce(ds, cdc, model, 0.5, 0.3, 99);
    CHECK(std::isfinite(before));

    train::DiffusionTrainConfig tc;
    tc.steps = 40;
    tc.batch_frames = 20;
    tc.seed = 37;
    tc.opt.lr = 3e-3;
    tc.opt.warmup = 5;
    train::DiffusionTrainStats st = train_diffusion(ds, cdc, model, tps, tc);
    REQUIRE(st.history.size() == 40);

    double after = train::eval_masked_ce(ds, cdc, model, 0.5, 0.3, 99);
    CHECK(after < before);

    // every head was visited, in rotation
    for (size_t i = 0; i < st.history.size(); ++i)
        CHECK(st.history[i].first == (int)(i % 5));
    for (const auto& [task, loss] : st.history) CHECK(std::isfinite(loss));

    // the unconditional branch is only drawn for non-duration tasks
    CHECK(st.uncond_trials > 0);
    CHECK(st.uncond_drops <= st.uncond_trials);
    CHECK((double)st.uncond_drops / (double)st.uncond_trials < 0.5);
}

TEST_CASE("a resumed diffusion run continues where it stopped") {
    const char* path = "ckpt_diff_resume.bin";
    data::Dataset ds = tiny_dataset();
    nn::ParamStore cps(5);
    codec::Codec cdc(cps, tiny_cc());

    train::DiffusionTrainConfig tc;
    tc.steps = 6;
    tc.batch_frames = 20;
    tc.seed = 41;
    tc.opt.warmup = 5;

    nn::ParamStore pa(13);
    tts::TtsModel ma(pa, tiny_tc());
    train::DiffusionTrainStats full = train_diffusion(ds, cdc, ma, pa, tc);

    train::DiffusionTrainConfig th = tc;
    th.steps = 3;
    th.checkpoint_path = path;
    th.checkpoint_every = 3;
    nn::ParamStore pb(13);
    tts::TtsModel mb(pb, tiny_tc());
    train_diffusion(ds, cdc, mb, pb, th);

    train::DiffusionTrainConfig tr = tc;
    tr.checkpoint_path = path;
    tr.resume = true;
    nn::ParamStore pc(14);
    tts::TtsModel mc(pc, tiny_tc());
    train::DiffusionTrainStats rest = train_diffusion(ds, cdc, mc, pc, tr);

    REQUIRE(rest.start_step == 4);
    REQUIRE(rest.history.size() == 3);
    for (size_t i = 0; i < 3; ++i)
        CHECK(std::abs(rest.history[i].second - full.history[i + 3].second) < 1e-5);
    for (const auto& [name, v] : pa.all())
        CHECK(v.val().isApprox(pc.get(name).val(), 1e-9));
    std::remove(path);
}

TEST_CASE("masked evaluation is deterministic") {
    data::Dataset ds = tiny_dataset();
    nn::ParamStore cps(5);
    codec::Codec cdc(cps, tiny_cc());
    nn::ParamStore tps(13);
    tts::TtsModel model(tps, tiny_tc());

    double a = train::eval_masked_ce(ds, cdc, model, 0.5, 0.3, 7);
    double b = train::eval_masked_ce(ds, cdc, model, 0.5, 0.3, 7);
    double c = train::eval_masked_ce(ds, cdc, model, 0.5, 0.3, 8);
    CHECK(a == b);
    CHECK(a != c);

    // an untrained model over a 17-word vocabulary sits near uniform chance
    CHECK(a < 2.0 * std::log(17.0));
    CHECK(a > 0.2 * std::log(17.0));
}

TEST_CASE("inference parameters round-trip without an optimizer") {
    const char* path = "params_only.bin";
    nn::ParamStore a(3);
    a.create("w", 2, 3, nn::Init::Normal);
    train::save_params(path, a);

    nn::ParamStore b(4);
    b.create("w", 2, 3, nn::Init::Normal);
    long step = train::load_checkpoint(path, b);
    CHECK(step == 0);
    CHECK(b.get("w").val() == a.get("w").val());
    std::remove(path);
}

TEST_CASE("metric lines have the documented shape") {
    std::ostringstream os;
    train::log_metric(&os, 7, "rec", 1.5);
    CHECK(os.str() == "7 rec 1.5\n");
    train::log_metric(nullptr, 1, "rec", 1.0);  // a null sink is a no-op
}
