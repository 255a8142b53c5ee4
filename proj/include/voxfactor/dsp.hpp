#pragma once

// Signal processing: windowed DFT magnitudes (plain and differentiable), mel
// filterbanks, the multi-scale mel reconstruction loss, mel cepstra, and an
// autocorrelation pitch tracker with per-utterance z-score normalization.

#include "voxfactor/autodiff.hpp"

namespace voxfactor {
namespace dsp {

inline Vec hann_window(long n) {
    Vec w(n);
    for (long i = 0; i < n; ++i)
        w(i) = 0.5 - 0.5 * std::cos(2.0 * M_PI * (double)i / (double)n);
    return w;
}

// DFT bases for real input: columns are cos / sin per bin, n_fft x (n_fft/2+1)
struct DftBasis {
    Mat cos_b, sin_b;
    explicit DftBasis(long n_fft) {
        long bins = n_fft / 2 + 1;
        cos_b.resize(n_fft, bins);
        sin_b.resize(n_fft, bins);
        for (long n = 0; n < n_fft; ++n) {
            for (long k = 0; k < bins; ++k) {
                double ang = 2.0 * M_PI * (double)k * (double)n / (double)n_fft;
                cos_b(n, k) = std::cos(ang);
                sin_b(n, k) = -std::sin(ang);
            }
        }
    }
};

inline long frame_count(long n_samples, long hop) { return (n_samples + hop - 1) / hop; }

// frame a signal column vector into rows of length n_fft at the given hop,
// zero-padding the tail; rows = ceil(N / hop)
inline Mat frame_signal_value(const Vec& x, long n_fft, long hop) {
    long frames = frame_count(x.size(), hop);
    Mat f = Mat::Zero(frames, n_fft);
    for (long t = 0; t < frames; ++t) {
        long start = t * hop;
        long take = std::min(n_fft, (long)x.size() - start);
        for (long i = 0; i < take; ++i) f(t, i) = x(start + i);
    }
    return f;
}

// autodiff framing op: x is N x 1
inline ad::Var frame_signal(const ad::Var& x, long n_fft, long hop) {
    check(x.cols() == 1, "frame_signal: expected column vector");
    long n = x.rows();
    Mat f = frame_signal_value(x.val().col(0), n_fft, hop);
    ad::Node* xn = x.node();
    long frames = f.rows();
    return ad::make_op(std::move(f), {x}, [xn, n, n_fft, hop, frames](const Mat& g, ad::GradMap& gm) {
        Mat dx = Mat::Zero(n, 1);
        for (long t = 0; t < frames; ++t) {
            long start = t * hop;
            long take = std::min(n_fft, n - start);
            for (long i = 0; i < take; ++i) dx(start + i, 0) += g(t, i);
        }
        ad::accum(gm, xn, dx);
    });
}

// power spectrogram frames x bins, shared by the plain and autodiff paths
struct StftPlan {
    long n_fft, hop;
    Vec window;
    DftBasis basis;
    StftPlan(long n_fft_, long hop_) : n_fft(n_fft_), hop(hop_), window(hann_window(n_fft_)), basis(n_fft_) {}
};

inline Mat stft_power(const Vec& x, const StftPlan& plan) {
    Mat f = frame_signal_value(x, plan.n_fft, plan.hop);
    f.array().rowwise() *= plan.window.transpose().array();
    Mat re = f * plan.basis.cos_b;
    Mat im = f * plan.basis.sin_b;
    return re.array().square() + im.array().square();
}

inline Mat stft_magnitude(const Vec& x, const StftPlan& plan) {
    return stft_power(x, plan).array().sqrt();
}

inline ad::Var stft_power_var(const ad::Var& x, const StftPlan& plan) {
    ad::Var f = frame_signal(x, plan.n_fft, plan.hop);
    ad::Var w = ad::mul_rowvec(f, ad::constant(plan.window.transpose()));
    ad::Var re = ad::matmul(w, ad::constant(plan.basis.cos_b));
    ad::Var im = ad::matmul(w, ad::constant(plan.basis.sin_b));
    return ad::add(ad::square(re), ad::square(im));
}

// --- mel -----------------------------------------------------------------------

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// triangular filterbank, n_mels x bins
inline Mat mel_filterbank(int sample_rate, long n_fft, long n_mels, double fmin,
                          double fmax) {
    long bins = n_fft / 2 + 1;
    Mat fb = Mat::Zero(n_mels, bins);
    double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
    std::vector<double> centers((size_t)n_mels + 2);
    for (long i = 0; i < n_mels + 2; ++i)
        centers[(size_t)i] = mel_to_hz(mlo + (mhi - mlo) * (double)i / (double)(n_mels + 1));
    for (long m = 0; m < n_mels; ++m) {
        double lo = centers[(size_t)m], mid = centers[(size_t)m + 1], hi = centers[(size_t)m + 2];
        for (long k = 0; k < bins; ++k) {
            double f = (double)k * sample_rate / (double)n_fft;
            if (f > lo && f < mid) fb(m, k) = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi) fb(m, k) = (hi - f) / (hi - mid);
        }
    }
    return fb;
}

struct MelPlan {
    StftPlan stft;
    Mat fb;  // n_mels x bins
    MelPlan(int sample_rate, long n_fft, long hop, long n_mels, double fmin, double fmax)
        : stft(n_fft, hop), fb(mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)) {}
};

inline Mat log_mel(const Vec& x, const MelPlan& plan, double eps = 1e-5) {
    Mat p = stft_power(x, plan.stft);
    Mat mel = p * plan.fb.transpose();
    return (mel.array() + eps).log();
}

inline ad::Var log_mel_var(const ad::Var& x, const MelPlan& plan, double eps = 1e-5) {
    ad::Var p = stft_power_var(x, plan.stft);
    ad::Var mel = ad::matmul(p, ad::constant(plan.fb.transpose()));
    return ad::log_op(ad::add_scalar(mel, eps));
}

// the reconstruction loss: mean L1 between log-mel spectrograms across scales
struct MultiScaleMel {
    std::vector<MelPlan> plans;
    explicit MultiScaleMel(int sample_rate) {
        plans.emplace_back(sample_rate, 512, 200, 80, 0.0, sample_rate / 2.0);
        plans.emplace_back(sample_rate, 256, 100, 64, 0.0, sample_rate / 2.0);
        plans.emplace_back(sample_rate, 128, 50, 40, 0.0, sample_rate / 2.0);
    }

    ad::Var loss(const ad::Var& recon, const Vec& target) const {
        std::vector<ad::Var> terms;
        for (const auto& plan : plans) {
            ad::Var lr = log_mel_var(recon, plan);
            Mat lt = log_mel(target, plan);
            check(lr.rows() == lt.rows(), "mel loss: frame mismatch");
            terms.push_back(ad::mean_all(ad::abs_op(ad::sub(lr, ad::constant(lt)))));
        }
        ad::Var total = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
        return ad::scale(total, 1.0 / (double)terms.size());
    }
};

// --- cepstra (for MCD) -----------------------------------------------------------

// mel-cepstral coefficients per frame via DCT-II of the log-mel spectrum;
// returns frames x (order+1), coefficient 0 included (caller drops it)
inline Mat mel_cepstra(const Vec& x, const MelPlan& plan, long order) {
    Mat lm = log_mel(x, plan);
    long frames = lm.rows(), m = lm.cols();
    Mat cep = Mat::Zero(frames, order + 1);
    for (long t = 0; t < frames; ++t)
        for (long k = 0; k <= order; ++k) {
            double acc = 0.0;
            for (long j = 0; j < m; ++j)
                acc += lm(t, j) * std::cos(M_PI * (double)k * ((double)j + 0.5) / (double)m);
            cep(t, k) = acc * std::sqrt(2.0 / (double)m);
        }
    return cep;
}

// --- pitch -------------------------------------------------------------------------

struct F0Track {
    Vec f0;                     // per frame, 0 where unvoiced
    std::vector<uint8_t> voiced;
    Vec zscore;                 // z-scored over voiced frames, 0 elsewhere
};

// normalized autocorrelation pitch estimator over 12.5 ms hops
inline F0Track estimate_f0(const std::vector<double>& samples, int sample_rate = 16000,
                           long hop = 200, long win = 400, double fmin = 50.0,
                           double fmax = 500.0, double voiced_thresh = 0.3) {
    long n = (long)samples.size();
    long frames = frame_count(n, hop);
    long lag_min = (long)std::floor((double)sample_rate / fmax);
    long lag_max = (long)std::ceil((double)sample_rate / fmin);

    F0Track out;
    out.f0 = Vec::Zero(frames);
    out.voiced.assign((size_t)frames, 0);

    auto sample_at = [&](long i) { return (i >= 0 && i < n) ? samples[(size_t)i] : 0.0; };

    std::vector<double> corr((size_t)(lag_max + 1));
    for (long t = 0; t < frames; ++t) {
        long start = t * hop;
        double e0 = 0.0;
        for (long i = 0; i < win; ++i) {
            double v = sample_at(start + i);
            e0 += v * v;
        }
        if (e0 < 1e-9) continue;  // silence
        double best_corr = 0.0;
        for (long lag = lag_min; lag <= lag_max; ++lag) {
            double num = 0.0, e1 = 0.0;
            for (long i = 0; i < win; ++i) {
                double a = sample_at(start + i), b = sample_at(start + i + lag);
                num += a * b;
                e1 += b * b;
            }
            corr[(size_t)lag] = e1 < 1e-9 ? 0.0 : num / std::sqrt(e0 * e1);
            best_corr = std::max(best_corr, corr[(size_t)lag]);
        }
        // sub-harmonics of the true period score nearly as high as the period
        // itself; take the smallest local peak close to the global best
        long best_lag = 0;
        for (long lag = lag_min; lag <= lag_max; ++lag) {
            bool peak = (lag == lag_min || corr[(size_t)lag] >= corr[(size_t)lag - 1]) &&
                        (lag == lag_max || corr[(size_t)lag] >= corr[(size_t)lag + 1]);
            if (peak && corr[(size_t)lag] >= 0.9 * best_corr) {
                best_lag = lag;
                break;
            }
        }
        if (best_corr > voiced_thresh && best_lag > 0) {
            out.f0(t) = (double)sample_rate / (double)best_lag;
            out.voiced[(size_t)t] = 1;
        }
    }

    // per-utterance z-score over voiced frames; unvoiced stay 0 and are
    // excluded from the statistics
    out.zscore = Vec::Zero(frames);
    double sum = 0.0;
    long cnt = 0;
    for (long t = 0; t < frames; ++t)
        if (out.voiced[(size_t)t]) {
            sum += out.f0(t);
            ++cnt;
        }
    if (cnt >= 2) {
        double mean = sum / (double)cnt, var = 0.0;
        for (long t = 0; t < frames; ++t)
            if (out.voiced[(size_t)t]) var += (out.f0(t) - mean) * (out.f0(t) - mean);
        var /= (double)cnt;
        double sd = std::sqrt(var);
        if (sd > 1e-9)
            for (long t = 0; t < frames; ++t)
                if (out.voiced[(size_t)t]) out.zscore(t) = (out.f0(t) - mean) / sd;
    }
    return out;
}

}  // namespace dsp
}  // namespace voxfactor
