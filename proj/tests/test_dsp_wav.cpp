#include <catch2/catch_amalgamated.hpp>

#include "voxfactor/dsp.hpp"
#include "voxfactor/wav.hpp"
#include "fd_check.hpp"

#include <cstdio>

using namespace voxfactor;
using testutil::rand_mat;

// independent per-bin DFT oracle (no shared code with the library GEMM path)
static Mat naive_stft_mag(const std::vector<double>& x, long n_fft, long hop) {
    long frames = (long)((x.size() + (size_t)hop - 1) / (size_t)hop);
    long bins = n_fft / 2 + 1;
    Mat mag(frames, bins);
    for (long t = 0; t < frames; ++t) {
        for (long k = 0; k < bins; ++k) {
            double re = 0.0, im = 0.0;
            for (long i = 0; i < n_fft; ++i) {
                size_t idx = (size_t)(t * hop + i);
                double s = idx < x.size() ? x[idx] : 0.0;
                double w = 0.5 - 0.5 * std::cos(2.0 * M_PI * (double)i / (double)n_fft);
                double ang = 2.0 * M_PI * (double)k * (double)i / (double)n_fft;
                re += s * w * std::cos(ang);
                im -= s * w * std::sin(ang);
            }
            mag(t, k) = std::sqrt(re * re + im * im);
        }
    }
    return mag;
}

static std::vector<double> sine(double freq, double secs, int sr, double amp = 0.5) {
    std::vector<double> x((size_t)(secs * sr));
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = amp * std::sin(2.0 * M_PI * freq * (double)i / sr);
    return x;
}

TEST_CASE("wav files round-trip exactly") {
    Rng rng(201);
    std::vector<double> x(1600);
    for (auto& s : x) s = std::lrint(rng.uniform(-0.9, 0.9) * 32767.0) / 32767.0;
    std::string path = "/tmp/vox_test_roundtrip.wav";
    write_wav(path, x, 16000);
    WavData w = read_wav(path);
    REQUIRE(w.sample_rate == 16000);
    REQUIRE(w.samples.size() == x.size());
    for (size_t i = 0; i < x.size(); ++i)
        REQUIRE(std::abs(w.samples[i] - x[i] * 32767.0 / 32768.0) < 1e-12);
    std::remove(path.c_str());
}

TEST_CASE("stft magnitudes match an independent per-bin oracle") {
    Rng rng(202);
    std::vector<double> x(700);
    for (auto& s : x) s = rng.uniform(-1.0, 1.0);
    dsp::StftPlan plan(128, 50);
    Mat lib = dsp::stft_magnitude(Eigen::Map<const Vec>(x.data(), (long)x.size()), plan);
    Mat ref = naive_stft_mag(x, 128, 50);
    REQUIRE(lib.rows() == ref.rows());
    REQUIRE((lib - ref).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("framing op differentiates correctly") {
    Rng rng(203);
    Mat x = rand_mat(rng, 23, 1);
    auto build = [](const std::vector<ad::Var>& p) {
        return ad::mean_all(ad::square(dsp::frame_signal(p[0], 8, 3)));
    };
    REQUIRE(testutil::fd_max_err(build, {x}) < 2e-6);
}

TEST_CASE("differentiable log-mel equals the plain computation and differentiates") {
    Rng rng(204);
    Mat x = rand_mat(rng, 300, 1, 0.3);
    dsp::MelPlan plan(16000, 64, 32, 12, 0.0, 8000.0);

    Mat plain = dsp::log_mel(Vec(x.col(0)), plan);
    ad::Var v = dsp::log_mel_var(ad::constant(x), plan);
    REQUIRE((plain - v.val()).cwiseAbs().maxCoeff() < 1e-12);

    auto build = [&plan](const std::vector<ad::Var>& p) {
        return ad::mean_all(dsp::log_mel_var(p[0], plan));
    };
    Mat xs = rand_mat(rng, 80, 1, 0.3);
    REQUIRE(testutil::fd_max_err(build, {xs}) < 2e-6);
}

TEST_CASE("multi-scale mel loss is zero on identical signals and positive otherwise") {
    Rng rng(205);
    std::vector<double> x = sine(220.0, 0.2, 16000);
    Vec xv = Eigen::Map<const Vec>(x.data(), (long)x.size());
    dsp::MultiScaleMel msm(16000);
    ad::Var zero_loss = msm.loss(ad::constant(xv), xv);
    REQUIRE(zero_loss.val()(0, 0) < 1e-12);

    Vec y = xv * 0.5;
    ad::Var pos_loss = msm.loss(ad::constant(Mat(y)), xv);
    REQUIRE(pos_loss.val()(0, 0) > 0.0);
}

TEST_CASE("mel filterbank covers the band") {
    Mat fb = dsp::mel_filterbank(16000, 512, 80, 0.0, 8000.0);
    REQUIRE(fb.rows() == 80);
    REQUIRE(fb.cols() == 257);
    for (long m = 0; m < fb.rows(); ++m) REQUIRE(fb.row(m).maxCoeff() > 0.0);
    REQUIRE(fb.minCoeff() >= 0.0);
}

TEST_CASE("pitch tracker finds a pure tone and rejects silence") {
    int sr = 16000;
    std::vector<double> x = sine(200.0, 0.5, sr);
    dsp::F0Track tr = dsp::estimate_f0(x, sr);
    long voiced = 0;
    for (long t = 0; t < tr.f0.size(); ++t) {
        if (tr.voiced[(size_t)t]) {
            ++voiced;
            REQUIRE(tr.f0(t) == Catch::Approx(200.0).margin(8.0));
        }
    }
    REQUIRE(voiced > (long)(0.7 * (double)tr.f0.size()));

    std::vector<double> quiet(8000, 0.0);
    dsp::F0Track silent = dsp::estimate_f0(quiet, sr);
    for (auto v : silent.voiced) REQUIRE(v == 0);

    // z-score statistics over voiced frames only
    std::vector<double> sweep(8000);
    for (size_t i = 0; i < sweep.size(); ++i) {
        double f = 150.0 + 100.0 * (double)i / (double)sweep.size();
        sweep[i] = 0.5 * std::sin(2.0 * M_PI * f * (double)i / sr);
    }
    dsp::F0Track sw = dsp::estimate_f0(sweep, sr);
    double mean = 0.0, var = 0.0;
    long cnt = 0;
    for (long t = 0; t < sw.zscore.size(); ++t)
        if (sw.voiced[(size_t)t]) {
            mean += sw.zscore(t);
            ++cnt;
        }
    REQUIRE(cnt >= 2);
    mean /= (double)cnt;
    for (long t = 0; t < sw.zscore.size(); ++t)
        if (sw.voiced[(size_t)t]) var += (sw.zscore(t) - mean) * (sw.zscore(t) - mean);
    var /= (double)cnt;
    REQUIRE(std::abs(mean) < 1e-9);
    REQUIRE(var == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("mel cepstra are identical for identical inputs") {
    std::vector<double> x = sine(300.0, 0.3, 16000);
    dsp::MelPlan plan(16000, 512, 200, 24, 0.0, 8000.0);
    Vec xv = Eigen::Map<const Vec>(x.data(), (long)x.size());
    Mat a = dsp::mel_cepstra(xv, plan, 13);
    Mat b = dsp::mel_cepstra(xv, plan, 13);
    REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(a.cols() == 14);
}
