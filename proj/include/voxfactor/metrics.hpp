#pragma once

// Objective evaluation: mel-cepstral distortion, multi-resolution STFT
// distance, pitch-contour error in z-score units, per-branch codebook
// perplexity, and speaker-head accuracy, aggregated over a dataset.

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "voxfactor/codec.hpp"
#include "voxfactor/data.hpp"
#include "voxfactor/dsp.hpp"

namespace voxfactor {
namespace metrics {

struct MetricReport {
    double mcd = 0.0;    // dB, order-13 mel cepstra, 0th coefficient excluded
    double mstft = 0.0;  // mean over scales of spectral convergence + log-mag L1
    double f0_mae = 0.0;  // z-score units over mutually voiced frames
    double perplexity_prosody = 0.0;
    double perplexity_content = 0.0;
    double perplexity_detail = 0.0;
    double speaker_accuracy = 0.0;
    long utterances = 0;

    std::string to_string() const {
        std::ostringstream os;
        os << "mcd " << mcd << "\n"
           << "mstft " << mstft << "\n"
           << "f0_zscore_mae " << f0_mae << "\n"
           << "perplexity_prosody " << perplexity_prosody << "\n"
           << "perplexity_content " << perplexity_content << "\n"
           << "perplexity_detail " << perplexity_detail << "\n"
           << "speaker_accuracy " << speaker_accuracy << "\n"
           << "utterances " << utterances << "\n";
        return os.str();
    }
};

namespace detail {

inline Vec to_vec(const std::vector<double>& x, long n) {
    Vec v(n);
    for (long i = 0; i < n; ++i) v(i) = x[(size_t)i];
    return v;
}

inline long common_samples(const std::vector<double>& a, const std::vector<double>& b) {
    long n = (long)std::min(a.size(), b.size());
    check(n > 0, "metrics: empty signal");
    return n;
}

}  // namespace detail

// mean over frames of (10 / ln 10) * sqrt(2 * sum_k diff_k^2) over cepstral
// coefficients 1..order; both signals are truncated to their common length
inline double mcd(const std::vector<double>& ref, const std::vector<double>& hyp,
                  int sample_rate, long order = 13) {
    long n = detail::common_samples(ref, hyp);
    dsp::MelPlan plan(sample_rate, 512, 200, 80, 0.0, sample_rate / 2.0);
    Mat cr = dsp::mel_cepstra(detail::to_vec(ref, n), plan, order);
    Mat ch = dsp::mel_cepstra(detail::to_vec(hyp, n), plan, order);
    check(cr.rows() == ch.rows(), "mcd: frame mismatch");
    double k = 10.0 / std::log(10.0) * std::sqrt(2.0);
    double sum = 0.0;
    for (long t = 0; t < cr.rows(); ++t) {
        double d2 = (cr.row(t).tail(order) - ch.row(t).tail(order)).squaredNorm();
        sum += k * std::sqrt(d2);
    }
    return sum / (double)cr.rows();
}

// mean over three FFT sizes (512/200, 256/100, 128/50 as n_fft/hop) of
// ||M_ref - M_hyp||_F / ||M_ref||_F + mean |log M_ref - log M_hyp|
inline double mstft(const std::vector<double>& ref, const std::vector<double>& hyp,
                    double eps = 1e-5) {
    long n = detail::common_samples(ref, hyp);
    Vec r = detail::to_vec(ref, n), h = detail::to_vec(hyp, n);
    const long sizes[3][2] = {{512, 200}, {256, 100}, {128, 50}};
    double total = 0.0;
    for (const auto& s : sizes) {
        dsp::StftPlan plan(s[0], s[1]);
        Mat mr = dsp::stft_magnitude(r, plan);
        Mat mh = dsp::stft_magnitude(h, plan);
        double denom = mr.norm();
        double sc = denom > 0.0 ? (mr - mh).norm() / denom : 0.0;
        double l1 = ((mr.array() + eps).log() - (mh.array() + eps).log()).abs().mean();
        total += sc + l1;
    }
    return total / 3.0;
}

// exp(entropy) of the empirical histogram over every level and frame of one
// branch's code grids; 1 for a single-code collapse, K for uniform usage
inline double code_perplexity(const std::vector<std::vector<int>>& grids, long k) {
    check(k > 0, "perplexity: empty codebook");
    std::vector<double> counts((size_t)k, 0.0);
    double total = 0.0;
    for (const auto& level : grids)
        for (int c : level) {
            check(c >= 0 && c < k, "perplexity: code outside the book");
            counts[(size_t)c] += 1.0;
            total += 1.0;
        }
    check(total > 0.0, "perplexity: no codes");
    double h = 0.0;
    for (double c : counts) {
        if (c == 0.0) continue;
        double p = c / total;
        h -= p * std::log(p);
    }
    return std::exp(h);
}

// mean |z_ref - z_hyp| over frames voiced in both tracks; 0 when none are
inline double f0_zscore_mae(const std::vector<double>& ref, const std::vector<double>& hyp,
                            int sample_rate, long hop = 200) {
    long n = detail::common_samples(ref, hyp);
    std::vector<double> r(ref.begin(), ref.begin() + n), h(hyp.begin(), hyp.begin() + n);
    dsp::F0Track fr = dsp::estimate_f0(r, sample_rate, hop);
    dsp::F0Track fh = dsp::estimate_f0(h, sample_rate, hop);
    double sum = 0.0;
    long count = 0;
    for (long t = 0; t < fr.f0.size(); ++t) {
        if (!fr.voiced[(size_t)t] || !fh.voiced[(size_t)t]) continue;
        sum += std::abs(fr.zscore(t) - fh.zscore(t));
        ++count;
    }
    return count > 0 ? sum / (double)count : 0.0;
}

// argmax of the supervised speaker head on the utterance's timbre embedding
inline int classify_speaker(const codec::Codec& cdc, const WavData& x) {
    ad::NoGradGuard ng;
    ad::Var logits = cdc.speaker_head().forward(cdc.extract_timbre(cdc.encode(x)));
    long best = 0;
    logits.val().row(0).maxCoeff(&best);
    return (int)best;
}

// reconstruct every utterance and average the objective metrics; code
// histograms pool the whole dataset per branch
inline MetricReport eval_reconstruction(const codec::Codec& cdc, const data::Dataset& ds) {
    check(!ds.utts.empty(), "eval: empty dataset");
    ad::NoGradGuard ng;
    MetricReport rep;
    std::vector<std::vector<int>> hp, hc, hd;  // pooled grids per branch
    long correct = 0;
    for (const auto& u : ds.utts) {
        WavData y = cdc.reconstruct(u.wave);
        rep.mcd += mcd(u.wave.samples, y.samples, cdc.config().sample_rate);
        rep.mstft += mstft(u.wave.samples, y.samples);
        rep.f0_mae += f0_zscore_mae(u.wave.samples, y.samples, cdc.config().sample_rate,
                                    cdc.config().hop());
        ad::Var h = cdc.encode(u.wave);
        codec::AttributeCodes codes = cdc.factorize(h, false, nullptr).codes();
        for (auto& g : codes.prosody) hp.push_back(std::move(g));
        for (auto& g : codes.content) hc.push_back(std::move(g));
        for (auto& g : codes.detail) hd.push_back(std::move(g));
        if (classify_speaker(cdc, u.wave) == u.speaker) ++correct;
    }
    double n = (double)ds.utts.size();
    rep.mcd /= n;
    rep.mstft /= n;
    rep.f0_mae /= n;
    long k = cdc.config().codebook_size;
    rep.perplexity_prosody = code_perplexity(hp, k);
    rep.perplexity_content = code_perplexity(hc, k);
    rep.perplexity_detail = code_perplexity(hd, k);
    rep.speaker_accuracy = (double)correct / n;
    rep.utterances = (long)ds.utts.size();
    return rep;
}

}  // namespace metrics
}  // namespace voxfactor
