#pragma once

// Dataset plumbing: aligned utterances, a line-delimited alignment text
// format, ingestion with a +/-1-frame duration tolerance, and a deterministic
// synthetic corpus where the three speech attributes are separable by
// construction — timbre is a speaker-fixed spectral envelope, prosody is a
// per-utterance F0 glide drawn from a range shared across speakers, and
// content is a phoneme-indexed formant trajectory.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "voxfactor/common.hpp"
#include "voxfactor/dsp.hpp"
#include "voxfactor/wav.hpp"

namespace voxfactor {
namespace data {

// phoneme id 0 is reserved for silence; deficit padding uses it
constexpr int kSilencePhoneme = 0;

struct Utterance {
    std::string id;
    int speaker = 0;
    WavData wave;
    std::vector<int> phonemes;
    std::vector<int> durations;  // frames at the codec hop, exact after ingest
};

struct Dataset {
    std::vector<Utterance> utts;  // ordered by id
    long num_speakers = 0;
    long num_phonemes = 0;

    long total_frames(long hop) const {
        long t = 0;
        for (const auto& u : utts) t += dsp::frame_count((long)u.wave.samples.size(), hop);
        return t;
    }
};

// utterance ids carry the speaker as a "spk<k>_" prefix
inline int speaker_of(const std::string& utt_id) {
    if (utt_id.rfind("spk", 0) != 0) return 0;
    size_t i = 3, v = 0;
    bool any = false;
    while (i < utt_id.size() && utt_id[i] >= '0' && utt_id[i] <= '9') {
        v = v * 10 + (size_t)(utt_id[i] - '0');
        any = true;
        ++i;
    }
    return any ? (int)v : 0;
}

// --- alignment text format -------------------------------------------------------
// one record per line:  utt_id|p1 p2 ... pL|d1 d2 ... dL
// '#' starts a comment; phonemes are integer ids; durations are frames

inline std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int> out;
    std::istringstream in(s);
    std::string tok;
    while (in >> tok) {
        try {
            size_t used = 0;
            int v = std::stoi(tok, &used);
            check(used == tok.size(), what + ": bad token '" + tok + "'");
            out.push_back(v);
        } catch (const std::exception&) {
            throw vox_error(what + ": bad token '" + tok + "'");
        }
    }
    return out;
}

struct AlignmentRecord {
    std::string utt_id;
    std::vector<int> phonemes;
    std::vector<int> durations;
};

inline std::vector<AlignmentRecord> read_alignments(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "alignments: cannot open " + path);
    std::vector<AlignmentRecord> recs;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::vector<std::string> parts = split(t, '|');
        check(parts.size() == 3, "alignments: line " + std::to_string(lineno) +
                                     ": expected utt_id|phonemes|durations");
        AlignmentRecord r;
        r.utt_id = trim(parts[0]);
        check(!r.utt_id.empty(), "alignments: line " + std::to_string(lineno) +
                                     ": empty utterance id");
        r.phonemes = parse_int_list(parts[1], "alignments: line " + std::to_string(lineno));
        r.durations = parse_int_list(parts[2], "alignments: line " + std::to_string(lineno));
        check(r.phonemes.size() == r.durations.size() && !r.phonemes.empty(),
              "alignments: line " + std::to_string(lineno) +
                  ": phoneme/duration arity mismatch");
        recs.push_back(std::move(r));
    }
    return recs;
}

inline void write_alignments(const std::vector<Utterance>& utts,
                             const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "alignments: cannot write " + path);
    for (const auto& u : utts) {
        out << u.id << '|';
        for (size_t i = 0; i < u.phonemes.size(); ++i)
            out << (i ? " " : "") << u.phonemes[i];
        out << '|';
        for (size_t i = 0; i < u.durations.size(); ++i)
            out << (i ? " " : "") << u.durations[i];
        out << '\n';
    }
}

// reconcile an alignment's duration sum with the audio's frame count:
// +1 excess decrements the last positive duration, -1 deficit appends a
// one-frame trailing silence phoneme, anything larger is a mismatch
inline bool reconcile_durations(std::vector<int>& phonemes,
                                std::vector<int>& durations, long frames,
                                std::string* why) {
    long sum = 0;
    for (int d : durations) {
        if (d < 0) {
            if (why) *why = "negative duration";
            return false;
        }
        sum += d;
    }
    if (sum == frames) return true;
    if (sum == frames + 1) {
        for (size_t i = durations.size(); i-- > 0;) {
            if (durations[i] > 0) {
                durations[i] -= 1;
                return true;
            }
        }
        if (why) *why = "excess frame with no positive duration";
        return false;
    }
    if (sum == frames - 1) {
        phonemes.push_back(kSilencePhoneme);
        durations.push_back(1);
        return true;
    }
    if (why)
        *why = "durations sum to " + std::to_string(sum) + " but audio has " +
               std::to_string(frames) + " frames";
    return false;
}

// load a directory of WAVs against an alignment file; bad records are skipped
// with a warning, and more than 10% skips abort the ingest
inline Dataset ingest(const std::string& audio_dir, const std::string& alignment_path,
                      long hop = 200, std::ostream* log = &std::cerr) {
    std::vector<AlignmentRecord> recs = read_alignments(alignment_path);
    check(!recs.empty(), "ingest: no alignment records in " + alignment_path);

    Dataset ds;
    size_t skipped = 0;
    auto warn = [&](const std::string& id, const std::string& why) {
        ++skipped;
        if (log) *log << "ingest: skipping " << id << ": " << why << "\n";
    };

    for (auto& r : recs) {
        std::string wav_path = audio_dir + "/" + r.utt_id + ".wav";
        Utterance u;
        u.id = r.utt_id;
        u.speaker = speaker_of(r.utt_id);
        try {
            u.wave = read_wav(wav_path);
        } catch (const std::exception& e) {
            warn(r.utt_id, e.what());
            continue;
        }
        u.phonemes = r.phonemes;
        u.durations = r.durations;
        long frames = dsp::frame_count((long)u.wave.samples.size(), hop);
        std::string why;
        if (!reconcile_durations(u.phonemes, u.durations, frames, &why)) {
            warn(r.utt_id, why);
            continue;
        }
        ds.utts.push_back(std::move(u));
    }

    check(skipped * 10 <= recs.size(),
          "ingest: " + std::to_string(skipped) + " of " + std::to_string(recs.size()) +
              " records skipped (over 10%)");
    check(!ds.utts.empty(), "ingest: every record was skipped");

    std::sort(ds.utts.begin(), ds.utts.end(),
              [](const Utterance& a, const Utterance& b) { return a.id < b.id; });
    for (const auto& u : ds.utts) {
        ds.num_speakers = std::max(ds.num_speakers, (long)u.speaker + 1);
        for (int p : u.phonemes) {
            check(p >= 0, "ingest: negative phoneme id in " + u.id);
            ds.num_phonemes = std::max(ds.num_phonemes, (long)p + 1);
        }
    }
    return ds;
}

// --- synthetic corpus ------------------------------------------------------------

struct SyntheticSpec {
    long num_speakers = 2;
    long utts_per_speaker = 20;
    long num_phonemes = 40;  // inventory size including silence at id 0
    double f0_min = 120.0;   // shared across speakers so prosody does not
    double f0_max = 260.0;   // identify the speaker
    long min_phones = 3;
    long max_phones = 8;
    long min_dur = 2;   // frames per phoneme
    long max_dur = 12;
    int sample_rate = 16000;
    long hop = 200;
    uint64_t seed = 1234;
};

namespace detail {

// speaker-fixed timbre: formant scaling, spectral tilt, and one extra
// resonance unique to the speaker
struct SpeakerVoice {
    double formant_scale, tilt, extra_f, extra_bw, extra_gain;
};

inline SpeakerVoice speaker_voice(const SyntheticSpec& spec, long s) {
    Rng r = Rng(spec.seed).fork(0x73706b76ULL, (uint64_t)s);  // 'spkv'
    SpeakerVoice v;
    v.formant_scale = r.uniform(0.85, 1.2);
    v.tilt = r.uniform(0.4, 1.4);
    v.extra_f = r.uniform(2600.0, 3400.0);
    v.extra_bw = r.uniform(250.0, 400.0);
    v.extra_gain = r.uniform(0.25, 0.5);
    return v;
}

// phoneme-indexed content: two formants, identical for every speaker
inline void phoneme_formants(int id, double* f1, double* f2) {
    auto frac = [](double x) { return x - std::floor(x); };
    *f1 = 300.0 + 600.0 * frac(0.6180339887498949 * (double)id + 0.11);
    *f2 = 1000.0 + 1400.0 * frac(0.7548776662466927 * (double)id + 0.37);
}

inline double envelope_at(const SpeakerVoice& v, double f, double f1, double f2) {
    auto g = [](double x, double c, double bw) {
        double z = (x - c) / bw;
        return std::exp(-0.5 * z * z);
    };
    double shape = g(f, f1 * v.formant_scale, 150.0) +
                   0.7 * g(f, f2 * v.formant_scale, 220.0) +
                   v.extra_gain * g(f, v.extra_f, v.extra_bw);
    return shape * std::pow(std::max(f, 100.0) / 200.0, -v.tilt);
}

}  // namespace detail

// harmonic-plus-formant toy utterances with exact alignments; byte-identical
// for a given spec
inline std::vector<Utterance> make_synthetic(const SyntheticSpec& spec) {
    check(spec.num_speakers >= 1 && spec.utts_per_speaker >= 1,
          "synthetic corpus: empty layout");
    check(spec.num_phonemes >= 2, "synthetic corpus: need at least one non-silence phoneme");
    check(spec.min_phones >= 1 && spec.max_phones >= spec.min_phones &&
              spec.min_dur >= 1 && spec.max_dur >= spec.min_dur,
          "synthetic corpus: bad length ranges");

    std::vector<Utterance> utts;
    Rng root(spec.seed);
    for (long s = 0; s < spec.num_speakers; ++s) {
        detail::SpeakerVoice voice = detail::speaker_voice(spec, s);
        for (long k = 0; k < spec.utts_per_speaker; ++k) {
            Rng ur = root.fork(0x75747473ULL, (uint64_t)(s * spec.utts_per_speaker + k));

            Utterance u;
            {
                std::ostringstream id;
                id << "spk" << s << "_utt";
                std::string num = std::to_string(k);
                id << std::string(num.size() >= 3 ? 0 : 3 - num.size(), '0') << num;
                u.id = id.str();
            }
            u.speaker = (int)s;

            long n_ph = spec.min_phones + ur.uniform_int((int)(spec.max_phones - spec.min_phones + 1));
            long total_frames = 0;
            for (long i = 0; i < n_ph; ++i) {
                u.phonemes.push_back(1 + ur.uniform_int((int)(spec.num_phonemes - 1)));
                int d = (int)(spec.min_dur + ur.uniform_int((int)(spec.max_dur - spec.min_dur + 1)));
                u.durations.push_back(d);
                total_frames += d;
            }

            // prosody: per-utterance F0 glide with vibrato, range shared by
            // every speaker
            double f0_a = ur.uniform(spec.f0_min, spec.f0_max);
            double f0_b = ur.uniform(spec.f0_min, spec.f0_max);
            double vib_phase = ur.uniform(0.0, 2.0 * M_PI);

            // per-frame formant track, lightly smoothed at phoneme boundaries
            std::vector<double> tf1((size_t)total_frames), tf2((size_t)total_frames);
            {
                long t = 0;
                for (size_t i = 0; i < u.phonemes.size(); ++i) {
                    double f1, f2;
                    detail::phoneme_formants(u.phonemes[i], &f1, &f2);
                    for (int r = 0; r < u.durations[i]; ++r, ++t) {
                        tf1[(size_t)t] = f1;
                        tf2[(size_t)t] = f2;
                    }
                }
                std::vector<double> s1 = tf1, s2 = tf2;
                for (long i = 1; i + 1 < total_frames; ++i) {
                    s1[(size_t)i] = (tf1[(size_t)i - 1] + tf1[(size_t)i] + tf1[(size_t)i + 1]) / 3.0;
                    s2[(size_t)i] = (tf2[(size_t)i - 1] + tf2[(size_t)i] + tf2[(size_t)i + 1]) / 3.0;
                }
                tf1 = s1;
                tf2 = s2;
            }

            long n = total_frames * spec.hop;
            u.wave.sample_rate = spec.sample_rate;
            u.wave.samples.assign((size_t)n, 0.0);

            double phase = 0.0;
            double sr = (double)spec.sample_rate;
            for (long t = 0; t < total_frames; ++t) {
                double pos = total_frames > 1 ? (double)t / (double)(total_frames - 1) : 0.0;
                double f0 = f0_a + (f0_b - f0_a) * pos +
                            3.0 * std::sin(vib_phase + 2.0 * M_PI * 5.0 * (double)t *
                                                           (double)spec.hop / sr);
                long kmax = (long)std::floor(7000.0 / f0);
                kmax = std::min<long>(kmax, 40);
                std::vector<double> amp((size_t)kmax + 1, 0.0);
                for (long h = 1; h <= kmax; ++h)
                    amp[(size_t)h] = detail::envelope_at(voice, (double)h * f0,
                                                         tf1[(size_t)t], tf2[(size_t)t]);
                double step = 2.0 * M_PI * f0 / sr;
                for (long i = 0; i < spec.hop; ++i) {
                    phase += step;
                    if (phase > 2.0 * M_PI) phase -= 2.0 * M_PI;
                    double x = 0.0;
                    for (long h = 1; h <= kmax; ++h)
                        x += amp[(size_t)h] * std::sin((double)h * phase);
                    u.wave.samples[(size_t)(t * spec.hop + i)] = x;
                }
            }

            double peak = 1e-9;
            for (double x : u.wave.samples) peak = std::max(peak, std::abs(x));
            for (auto& x : u.wave.samples) {
                x = 0.45 * x / peak + 1e-4 * ur.uniform(-1.0, 1.0);
            }
            utts.push_back(std::move(u));
        }
    }
    std::sort(utts.begin(), utts.end(),
              [](const Utterance& a, const Utterance& b) { return a.id < b.id; });
    return utts;
}

inline Dataset as_dataset(std::vector<Utterance> utts, long num_phonemes) {
    Dataset ds;
    ds.utts = std::move(utts);
    ds.num_phonemes = num_phonemes;
    for (const auto& u : ds.utts)
        ds.num_speakers = std::max(ds.num_speakers, (long)u.speaker + 1);
    return ds;
}

// write WAVs plus "alignments.txt" into a directory
inline void write_corpus(const std::vector<Utterance>& utts, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& u : utts)
        write_wav(dir + "/" + u.id + ".wav", u.wave.samples, u.wave.sample_rate);
    write_alignments(utts, dir + "/alignments.txt");
}

}  // namespace data
}  // namespace voxfactor
