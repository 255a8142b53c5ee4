#include <catch2/catch_amalgamated.hpp>

#include "voxfactor/codec.hpp"
#include "fd_check.hpp"

using namespace voxfactor;
using testutil::rand_mat;

// small widths but the production hop of 200, so frame arithmetic is real
static codec::CodecConfig tiny_cfg() {
    codec::CodecConfig c;
    c.enc_channels = {4, 6, 8, 12};
    c.d_model = 12;
    c.d_timbre = 12;
    c.timbre_blocks = 1;
    c.heads = 2;
    c.ffn_hidden = 24;
    c.num_phonemes = 7;
    c.num_speakers = 3;
    c.head_hidden = 10;
    c.codebook_size = 17;
    c.d_low = 4;
    return c;
}

static WavData make_wave(Rng& rng, long n, int rate = 16000) {
    WavData w;
    w.sample_rate = rate;
    w.samples.resize((size_t)n);
    for (auto& s : w.samples) s = 0.5 * std::sin(rng.uniform(0, 6.28)) * rng.uniform();
    return w;
}

TEST_CASE("encoder frame arithmetic follows ceil division by the hop") {
    nn::ParamStore ps(11);
    codec::Codec cx(ps, tiny_cfg());
    Rng rng(600);

    ad::NoGradGuard ng;
    REQUIRE(cx.encode(make_wave(rng, 32000)).rows() == 160);
    REQUIRE(cx.encode(make_wave(rng, 200)).rows() == 1);
    REQUIRE(cx.encode(make_wave(rng, 201)).rows() == 2);
    REQUIRE(cx.frame_count(999) == 5);
    REQUIRE(cx.encode(make_wave(rng, 999)).cols() == 12);

    WavData wrong = make_wave(rng, 400, 8000);
    REQUIRE_THROWS_WITH(cx.encode(wrong), Catch::Matchers::ContainsSubstring("resample"));
    WavData empty;
    REQUIRE_THROWS_AS(cx.encode(empty), vox_error);
}

TEST_CASE("timbre embedding of a constant sequence ignores its length") {
    for (bool attn_pool : {false, true}) {
        auto cfg = tiny_cfg();
        cfg.timbre_attention_pool = attn_pool;
        nn::ParamStore ps(12);
        codec::Codec cx(ps, cfg);

        Rng rng(601);
        Mat row = rand_mat(rng, 1, 12);
        Mat h10 = row.replicate(10, 1), h20 = row.replicate(20, 1);

        ad::NoGradGuard ng;
        Mat t10 = cx.extract_timbre(ad::constant(h10)).val();
        Mat t20 = cx.extract_timbre(ad::constant(h20)).val();
        REQUIRE(t10.rows() == 1);
        REQUIRE(t10.cols() == 12);
        REQUIRE((t10 - t20).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("detail dropout decision hits its configured rate") {
    Rng rng(602);
    int hits = 0;
    for (int i = 0; i < 10000; ++i) hits += codec::detail_drop_decision(0.2, true, rng);
    double rate = hits / 10000.0;
    REQUIRE(rate >= 0.18);
    REQUIRE(rate <= 0.22);

    for (int i = 0; i < 100; ++i) {
        REQUIRE_FALSE(codec::detail_drop_decision(0.0, true, rng));
        REQUIRE(codec::detail_drop_decision(1.0, true, rng));
        REQUIRE_FALSE(codec::detail_drop_decision(0.9, false, rng));
    }
    REQUIRE_THROWS_AS(codec::detail_drop_decision(1.5, true, rng), vox_error);
}

TEST_CASE("factorization emits every head with the right shape and valid codes") {
    auto cfg = tiny_cfg();
    nn::ParamStore ps(13);
    codec::Codec cx(ps, cfg);
    Rng rng(603);

    ad::NoGradGuard ng;
    long t = 6;
    ad::Var h = ad::constant(rand_mat(rng, t, 12));
    auto o = cx.factorize(h, false, nullptr);

    REQUIRE((long)o.prosody.codes.size() == 1);
    REQUIRE((long)o.content.codes.size() == 2);
    REQUIRE((long)o.detail.codes.size() == 3);
    auto grids = o.codes();
    for (const auto* g : {&grids.prosody, &grids.content, &grids.detail})
        for (const auto& level : *g) {
            REQUIRE((long)level.size() == t);
            for (int code : level) {
                REQUIRE(code >= 0);
                REQUIRE(code < cfg.codebook_size);
            }
        }

    REQUIRE(o.h_t.rows() == 1);
    REQUIRE(o.h_t.cols() == cfg.d_timbre);
    REQUIRE(o.f0_sup.rows() == t);
    REQUIRE(o.f0_sup.cols() == 1);
    REQUIRE(o.phone_sup.rows() == t);
    REQUIRE(o.phone_sup.cols() == cfg.num_phonemes);
    REQUIRE(o.speaker_sup.rows() == 1);
    REQUIRE(o.speaker_sup.cols() == cfg.num_speakers);
    REQUIRE(o.phone_grl_prosody.rows() == t);
    REQUIRE(o.phone_grl_prosody.cols() == cfg.num_phonemes);
    REQUIRE(o.f0_grl_content.rows() == t);
    REQUIRE(o.f0_grl_content.cols() == 1);
    REQUIRE(o.phone_grl_detail.rows() == t);
    REQUIRE(o.f0_grl_detail.rows() == t);
    REQUIRE(o.speaker_grl.rows() == 1);
    REQUIRE(o.speaker_grl.cols() == cfg.num_speakers);

    // deterministic codes on repeated calls
    auto o2 = cx.factorize(h, false, nullptr);
    REQUIRE(o2.prosody.codes == o.prosody.codes);
    REQUIRE(o2.content.codes == o.content.codes);
    REQUIRE(o2.detail.codes == o.detail.codes);
    REQUIRE(o.detail_dropped == false);
    REQUIRE((o.dec_detail.val() - o.detail.z.val()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("detail dropout blanks only the decoder path") {
    auto cfg = tiny_cfg();
    cfg.detail_dropout_p = 1.0;
    nn::ParamStore ps(14);
    codec::Codec cx(ps, cfg);
    Rng rng(604);

    ad::NoGradGuard ng;
    ad::Var h = ad::constant(rand_mat(rng, 4, 12));
    auto o = cx.factorize(h, true, &rng);
    REQUIRE(o.detail_dropped);
    REQUIRE(o.dec_detail.val().cwiseAbs().maxCoeff() == 0.0);
    // codes and the true latent are still produced
    REQUIRE((long)o.detail.codes.size() == 3);
    REQUIRE(o.detail.z.val().cwiseAbs().maxCoeff() > 0.0);

    // inference never drops, and p = 0 never drops in training
    auto oi = cx.factorize(h, false, nullptr);
    REQUIRE_FALSE(oi.detail_dropped);
    auto cfg0 = tiny_cfg();
    cfg0.detail_dropout_p = 0.0;
    nn::ParamStore ps0(14);
    codec::Codec cx0(ps0, cfg0);
    for (int i = 0; i < 20; ++i) REQUIRE_FALSE(cx0.factorize(h, true, &rng).detail_dropped);
}

TEST_CASE("bitrate formula matches the published operating points") {
    codec::CodecConfig desk;  // 6 levels, K=1024, 80 fps
    REQUIRE(codec::compute_bitrate(desk) == 4800.0);

    auto no_detail = desk;
    no_detail.detail_levels = 0;
    REQUIRE(codec::compute_bitrate(no_detail) == 2400.0);

    auto binary = desk;
    binary.codebook_size = 2;
    REQUIRE(codec::compute_bitrate(binary) == 480.0);
}

TEST_CASE("decoder output spans exactly hop samples per frame") {
    auto cfg = tiny_cfg();
    nn::ParamStore ps(15);
    codec::Codec cx(ps, cfg);
    Rng rng(605);

    ad::NoGradGuard ng;
    long t = 5;
    ad::Var zp = ad::constant(rand_mat(rng, t, 12));
    ad::Var zc = ad::constant(rand_mat(rng, t, 12));
    ad::Var zd = ad::constant(rand_mat(rng, t, 12));
    ad::Var ht = ad::constant(rand_mat(rng, 1, 12));

    ad::Var y = cx.decode(zp, zc, zd, ht);
    REQUIRE(y.rows() == t * 200);
    REQUIRE(y.cols() == 1);
    REQUIRE(y.val().allFinite());
    REQUIRE(y.val().cwiseAbs().maxCoeff() <= 1.0);

    // an all-zero detail latent decodes fine
    ad::Var y0 = cx.decode(zp, zc, ad::constant(Mat::Zero(t, 12)), ht);
    REQUIRE(y0.val().allFinite());

    ad::Var zshort = ad::constant(rand_mat(rng, t - 1, 12));
    REQUIRE_THROWS_AS(cx.decode(zp, zc, zshort, ht), vox_error);
}

TEST_CASE("timbre conditioning reaches the decoder through its normalization") {
    auto cfg = tiny_cfg();
    nn::ParamStore ps(16);
    codec::Codec cx(ps, cfg);
    Rng rng(606);

    // the conditional norms start as plain layer norms (zero-initialized
    // projections); seed them so the conditioning path is active
    for (const auto& name : {"dec.cln_pre.scale.w", "dec.cln0.scale.w", "dec.cln2.shift.w"})
        ps.get(name).node()->value = rand_mat(rng, ps.get(name).rows(), ps.get(name).cols(), 0.5);

    ad::NoGradGuard ng;
    long t = 3;
    ad::Var zp = ad::constant(rand_mat(rng, t, 12));
    ad::Var zc = ad::constant(rand_mat(rng, t, 12));
    ad::Var zd = ad::constant(rand_mat(rng, t, 12));
    Mat ya = cx.decode(zp, zc, zd, ad::constant(rand_mat(rng, 1, 12))).val();
    Mat yb = cx.decode(zp, zc, zd, ad::constant(rand_mat(rng, 1, 12))).val();
    REQUIRE((ya - yb).norm() > 0.0);
}

TEST_CASE("voice conversion with the source as prompt is plain reconstruction") {
    auto cfg = tiny_cfg();
    nn::ParamStore ps(17);
    codec::Codec cx(ps, cfg);
    Rng rng(607);

    WavData x = make_wave(rng, 777);
    WavData rec = cx.reconstruct(x);
    WavData vc = cx.voice_convert(x, x);

    REQUIRE(rec.samples.size() == 800);  // 200 * ceil(777 / 200)
    REQUIRE(vc.samples.size() == rec.samples.size());
    for (size_t i = 0; i < rec.samples.size(); ++i) REQUIRE(vc.samples[i] == rec.samples[i]);

    // a different prompt keeps the length
    WavData other = make_wave(rng, 1234);
    REQUIRE(cx.voice_convert(x, other).samples.size() == rec.samples.size());
}

TEST_CASE("adversarial heads are identity in the forward pass and reverse gradients") {
    auto cfg = tiny_cfg();
    nn::ParamStore ps(18);
    codec::Codec cx(ps, cfg);
    Rng rng(608);

    {
        ad::NoGradGuard ng_scope;
        ad::Var h = ad::constant(rand_mat(rng, 5, 12));
        auto o = cx.factorize(h, false, nullptr);
        Mat direct = cx.adv_phone_prosody_head().forward(o.prosody.z).val();
        REQUIRE((o.phone_grl_prosody.val() - direct).cwiseAbs().maxCoeff() == 0.0);
    }

    {
        // gradient through the reversal equals -lambda times the identity path
        ad::Var probe = ad::param(rand_mat(rng, 4, 12));
        double lam = cfg.grl_lambda;
        auto g_rev = ad::backward(
            ad::sum_all(cx.adv_phone_prosody_head().forward(ad::grad_reversal(probe, lam))));
        auto g_id = ad::backward(ad::sum_all(cx.adv_phone_prosody_head().forward(probe)));
        Mat gr = *ad::grad_of(g_rev, probe);
        Mat gi = *ad::grad_of(g_id, probe);
        REQUIRE((gr + lam * gi).cwiseAbs().maxCoeff() < 1e-12);
        REQUIRE(gi.cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("the full analysis-synthesis graph carries gradients to both ends") {
    auto cfg = tiny_cfg();
    nn::ParamStore ps(19);
    codec::Codec cx(ps, cfg);
    Rng rng(609);

    WavData x = make_wave(rng, 400);
    ad::Var h = cx.encode(x);
    auto o = cx.factorize(h, true, &rng);
    ad::Var y = cx.decode(o.prosody.z, o.content.z, o.dec_detail, o.h_t);
    ad::Var loss = ad::mean_all(ad::square(y));
    loss = ad::add(loss, ad::scale(ad::add(o.prosody.commit_loss, o.prosody.codebook_loss), 0.25));
    loss = ad::add(loss, ad::mean_all(ad::square(o.speaker_grl)));
    // the conditional norms start at zero influence, so the timbre extractor
    // is reached through its supervision head
    loss = ad::add(loss, ad::mean_all(ad::square(o.speaker_sup)));

    auto grads = ad::backward(loss);
    for (const auto& name : {"enc.conv0.w", "dec.deconv0.w", "fvq.prosody.down.w",
                             "fvq.prosody.cb0", "head.grl_spk.in.w", "timbre.block0.attn.q.w"}) {
        const Mat* g = ad::grad_of(grads, ps.get(name));
        REQUIRE(g != nullptr);
        REQUIRE(g->allFinite());
        REQUIRE(g->cwiseAbs().maxCoeff() > 0.0);
    }
}
