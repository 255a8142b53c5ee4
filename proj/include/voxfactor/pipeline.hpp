#pragma once

// End-to-end factorized synthesis: factorize a spoken prompt into attribute
// codes and a timbre vector, then generate phoneme-level prosody, durations,
// and the frame-level prosody / content / detail grids with masked token
// diffusion, and decode the generated region.  Timbre is never generated; it
// comes from the prompt.  Stages run in a fixed order, each conditioned on
// the outputs of the previous ones.

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "voxfactor/autodiff.hpp"
#include "voxfactor/codec.hpp"
#include "voxfactor/common.hpp"
#include "voxfactor/denoiser.hpp"
#include "voxfactor/diffusion.hpp"
#include "voxfactor/fvq.hpp"
#include "voxfactor/wav.hpp"

namespace voxfactor {
namespace pipeline {

using Mat = Eigen::MatrixXd;
using tts::Stage;
using tts::StageRequest;

// builds the (conditional, unconditional) denoisers for one stage request;
// letting callers swap in oracle denoisers keeps the orchestration testable
using DenoiserFactory =
    std::function<diff::DenoiserFn(const StageRequest&, bool uncond)>;

inline DenoiserFactory model_factory(const tts::TtsModel& model) {
    return [&model](const StageRequest& req, bool uncond) {
        return model.denoiser(req, uncond);
    };
}

// denoisers that put all probability mass on a caller-supplied truth grid;
// validates orchestration independently of learned weights
inline DenoiserFactory oracle_factory(
    std::function<std::vector<int>(const StageRequest&)> truth_of, long code_vocab,
    long dur_classes) {
    return [truth_of, code_vocab, dur_classes](const StageRequest& req,
                                               bool) -> diff::DenoiserFn {
        std::vector<int> truth = truth_of(req);
        long vocab = req.stage == Stage::duration ? dur_classes : code_vocab;
        check((long)truth.size() == req.n, "oracle denoiser: truth length mismatch");
        return [truth, vocab](const diff::DiffusionState& st) {
            check((long)truth.size() == st.size(), "oracle denoiser: state length");
            Mat g = Mat::Zero(st.size(), vocab);
            for (long i = 0; i < st.size(); ++i) {
                check(truth[(size_t)i] >= 0 && truth[(size_t)i] < vocab,
                      "oracle denoiser: truth token out of range");
                g(i, truth[(size_t)i]) = 1e4;  // exact point mass after softmax
            }
            return g;
        };
    };
}

// --- phoneme-to-frame plumbing -------------------------------------------------

inline std::vector<int> frame_to_phoneme_map(const std::vector<int>& durations) {
    std::vector<int> map;
    for (size_t i = 0; i < durations.size(); ++i) {
        check(durations[i] >= 0, "length regulator: negative duration");
        for (int r = 0; r < durations[i]; ++r) map.push_back((int)i);
    }
    return map;
}

// repeat the feature row of phoneme i durations[i] times, in order
inline ad::Var length_regulate(const ad::Var& features,
                               const std::vector<int>& durations) {
    check(features.node() != nullptr, "length regulator: empty features");
    check(features.rows() == (long)durations.size(),
          "length regulator: feature/duration length mismatch");
    std::vector<int> map = frame_to_phoneme_map(durations);
    check(!map.empty(), "length regulator: zero total duration");
    return ad::rows_gather(features, map);
}

// mean-pool the pre-quantized frame latents over each phoneme's span and
// quantize every pooled vector through the first prosody level; zero-duration
// phonemes get the code of the zero vector
inline std::vector<int> phoneme_pool(const Mat& pre_quant,
                                     const std::vector<int>& durations,
                                     const fvq::FvqBranch& prosody) {
    long total = 0;
    for (int d : durations) {
        check(d >= 0, "phoneme pooling: negative duration");
        total += d;
    }
    check(total == pre_quant.rows(), "phoneme pooling: duration/frame mismatch");
    std::vector<int> codes;
    codes.reserve(durations.size());
    long pos = 0;
    for (int d : durations) {
        Eigen::RowVectorXd pooled = Eigen::RowVectorXd::Zero(pre_quant.cols());
        if (d > 0) {
            pooled = pre_quant.middleRows(pos, d).colwise().mean();
            pos += d;
        }
        codes.push_back(prosody.quantize_pooled_row(pooled));
    }
    return codes;
}

// --- generation stages ---------------------------------------------------------

// masked diffusion over duration classes; prompt region = prompt durations,
// conditioned on phoneme features and phoneme-level prosody codes, no
// classifier-free guidance
inline std::vector<int> generate_duration(const DenoiserFactory& factory,
                                          const ad::Var& ph_features,
                                          const std::vector<int>& dur_prompt,
                                          const std::vector<int>& ph_prosody_codes,
                                          const diff::SampleConfig& sc,
                                          long dur_classes, Rng& rng,
                                          diff::SampleStats* stats = nullptr) {
    long l = ph_features.rows();
    check((long)ph_prosody_codes.size() == l,
          "duration generation: phoneme-prosody code length mismatch");
    check((long)dur_prompt.size() <= l, "duration generation: prompt too long");
    for (int c : dur_prompt)
        check(c >= 0 && c < dur_classes, "duration generation: prompt class out of range");
    StageRequest req;
    req.stage = Stage::duration;
    req.n = l;
    req.prompt_len = (long)dur_prompt.size();
    req.cond_features = ph_features;
    req.cond_codes = {ph_prosody_codes};
    return diff::sample(factory(req, false), diff::DenoiserFn(), l, dur_prompt, sc,
                        rng, stats);
}

// one diffusion run per quantizer level, sequentially, each level conditioned
// on the upstream attributes and the previously generated levels of the same
// attribute; prompt region per level from the factorized prompt codes
inline std::vector<std::vector<int>> generate_attribute(
    const DenoiserFactory& factory, Stage attr, long levels,
    const ad::Var& cond_features, std::vector<std::vector<int>> upstream,
    std::vector<long> upstream_slots,
    const std::vector<std::vector<int>>& prompt_codes, long prompt_len,
    const diff::SampleConfig& sc, Rng& rng, diff::SampleStats* stats = nullptr) {
    check(attr != Stage::duration, "attribute generation: duration has its own path");
    long t = cond_features.rows();
    long need = (attr == Stage::ph_prosody || attr == Stage::prosody) ? 0
                : attr == Stage::content                              ? 1
                                                                      : 3;
    check((long)upstream.size() == need,
          std::string("attribute generation: ") + tts::stage_name(attr) +
              " requires " + std::to_string(need) +
              " upstream grids, got " + std::to_string(upstream.size()));
    check(upstream.size() == upstream_slots.size(),
          "attribute generation: upstream grids and slots mismatch");
    check((long)prompt_codes.size() == levels,
          "attribute generation: one prompt grid per level required");
    check(prompt_len >= 0 && prompt_len <= t, "attribute generation: bad prompt length");

    std::vector<std::vector<int>> out;
    for (long lvl = 0; lvl < levels; ++lvl) {
        check((long)prompt_codes[(size_t)lvl].size() == prompt_len,
              "attribute generation: prompt grid length mismatch");
        StageRequest req;
        req.stage = attr;
        req.level = lvl;
        req.n = t;
        req.prompt_len = prompt_len;
        req.cond_features = cond_features;
        req.cond_codes = upstream;
        req.cond_slots = upstream_slots;
        std::vector<int> tokens =
            diff::sample(factory(req, false), factory(req, true), t,
                         prompt_codes[(size_t)lvl], sc, rng, stats);
        out.push_back(tokens);
        if (lvl + 1 < levels) {
            upstream.push_back(std::move(tokens));
            upstream_slots.push_back(tts::grid_slot(attr, lvl));
        }
    }
    return out;
}

// --- prompts -------------------------------------------------------------------

// a prompt utterance with its phoneme alignment; durations are frames per
// phoneme and must sum to the waveform's frame count
struct AlignedPrompt {
    WavData wave;
    std::vector<int> phonemes;
    std::vector<int> durations;
};

// cap a prompt to its first max_frames frames (negative = keep everything)
inline AlignedPrompt trim_prompt(const AlignedPrompt& p, long max_frames, long hop) {
    long total = std::accumulate(p.durations.begin(), p.durations.end(), 0L);
    if (max_frames < 0 || total <= max_frames) return p;
    AlignedPrompt out;
    long kept = 0;
    for (size_t i = 0; i < p.durations.size() && kept < max_frames; ++i) {
        int take = (int)std::min<long>(p.durations[i], max_frames - kept);
        out.phonemes.push_back(p.phonemes[i]);
        out.durations.push_back(take);
        kept += take;
    }
    out.wave.sample_rate = p.wave.sample_rate;
    out.wave.samples.assign(p.wave.samples.begin(),
                            p.wave.samples.begin() + kept * hop);
    return out;
}

struct FactorizedPrompt {
    long frames = 0;
    Mat pre_quant;               // T x d_model encoder output, for pooling
    codec::AttributeCodes codes;  // every quantizer level
    Mat h_t;                     // 1 x d_timbre
};

inline FactorizedPrompt factorize_prompt(const codec::Codec& cdc,
                                         const AlignedPrompt& p) {
    ad::NoGradGuard ng;
    check(!p.phonemes.empty(), "prompt: empty phoneme alignment");
    check(p.phonemes.size() == p.durations.size(),
          "prompt: phoneme/duration length mismatch");
    ad::Var h = cdc.encode(p.wave);
    FactorizedPrompt f;
    f.pre_quant = h.val();
    f.frames = f.pre_quant.rows();
    long total = std::accumulate(p.durations.begin(), p.durations.end(), 0L);
    check(total == f.frames, "prompt: durations sum to " + std::to_string(total) +
                                 " but waveform has " + std::to_string(f.frames) +
                                 " frames");
    f.codes.prosody = cdc.prosody_branch().forward(h).codes;
    f.codes.content = cdc.content_branch().forward(h).codes;
    f.codes.detail = cdc.detail_branch().forward(h).codes;
    f.h_t = cdc.extract_timbre(h).val();
    return f;
}

// --- synthesis -----------------------------------------------------------------

struct SynthesisRequest {
    std::vector<int> phonemes;  // target text
    AlignedPrompt prompt;       // default prompt for every attribute
    // attribute mixing: optional per-attribute prompt overrides
    std::optional<AlignedPrompt> prosody_prompt;   // phoneme-level + frame prosody
    std::optional<AlignedPrompt> duration_prompt;  // duration stage
    std::optional<AlignedPrompt> timbre_prompt;    // timbre vector only
    double alpha = 1.0;  // guidance strength for all guided stages
    long steps = 4;      // diffusion steps per stage
    uint64_t seed = 1;
    long prompt_cap_frames = 80;  // 1 s at 16 kHz / hop 200; negative = full prompt
};

struct SynthesisResult {
    WavData wave;
    std::vector<int> ph_prosody;  // generated target phoneme-prosody codes
    std::vector<int> durations;   // generated target durations (frames)
    codec::AttributeCodes codes;  // generated target frame grids
    diff::SampleStats stats;      // aggregated over all stages (total NFE)
};

namespace detail {

template <class F>
auto stage_guard(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw vox_error(std::string("stage ") + name + ": " + e.what());
    }
}

inline std::vector<int> concat_ids(const std::vector<int>& a,
                                   const std::vector<int>& b) {
    std::vector<int> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

inline std::vector<int> tail(const std::vector<int>& v, long n) {
    return std::vector<int>(v.end() - n, v.end());
}

}  // namespace detail

// fixed stage order: ph_prosody -> duration -> prosody -> content -> detail,
// then decode the generated frames with the prompt's timbre vector
inline SynthesisResult synthesize(const codec::Codec& cdc,
                                  const tts::TtsConfig& tc,
                                  const DenoiserFactory& factory,
                                  const std::function<ad::Var(const std::vector<int>&)>&
                                      phoneme_encode,
                                  const SynthesisRequest& req) {
    using detail::concat_ids;
    using detail::stage_guard;
    using detail::tail;

    check(!req.phonemes.empty(), "synthesize: empty target phoneme sequence");
    check(req.steps >= 1, "synthesize: steps must be >= 1");
    const codec::CodecConfig& cc = cdc.config();
    check(tc.code_vocab == cc.codebook_size &&
              tc.prosody_levels == cc.prosody_levels &&
              tc.content_levels == cc.content_levels &&
              tc.detail_levels == cc.detail_levels,
          "synthesize: generator and codec disagree on code layout");

    long hop = cc.hop();
    AlignedPrompt base = trim_prompt(req.prompt, req.prompt_cap_frames, hop);
    AlignedPrompt pros_p = req.prosody_prompt
                               ? trim_prompt(*req.prosody_prompt, req.prompt_cap_frames, hop)
                               : base;
    AlignedPrompt dur_p = req.duration_prompt
                              ? trim_prompt(*req.duration_prompt, req.prompt_cap_frames, hop)
                              : base;

    SynthesisResult res;
    Rng rng(req.seed);
    diff::SampleConfig sc;
    sc.steps = req.steps;
    sc.alpha = req.alpha;
    sc.sched.horizon = tc.horizon;

    // factorize every distinct prompt utterance
    FactorizedPrompt f_base = stage_guard("prompt factorization",
                                          [&] { return factorize_prompt(cdc, base); });
    FactorizedPrompt f_pros =
        req.prosody_prompt
            ? stage_guard("prompt factorization",
                          [&] { return factorize_prompt(cdc, pros_p); })
            : f_base;
    FactorizedPrompt f_dur =
        req.duration_prompt
            ? stage_guard("prompt factorization",
                          [&] { return factorize_prompt(cdc, dur_p); })
            : f_base;
    Mat h_t = f_base.h_t;
    if (req.timbre_prompt) {
        AlignedPrompt tp = trim_prompt(*req.timbre_prompt, req.prompt_cap_frames, hop);
        h_t = stage_guard("prompt factorization",
                          [&] { return factorize_prompt(cdc, tp); })
                  .h_t;
    }

    long l_t = (long)req.phonemes.size();

    // phoneme features per prompt geometry: [prompt phonemes ++ target]
    ad::Var feats_pros = stage_guard("phoneme encoding", [&] {
        ad::NoGradGuard ng;
        return phoneme_encode(concat_ids(pros_p.phonemes, req.phonemes));
    });

    // 1. phoneme-level prosody over the prosody prompt's geometry
    std::vector<int> pooled_pros = stage_guard("ph_prosody", [&] {
        return phoneme_pool(f_pros.pre_quant, pros_p.durations, cdc.prosody_branch());
    });
    std::vector<int> php_full = stage_guard("ph_prosody", [&] {
        return generate_attribute(factory, Stage::ph_prosody, 1, feats_pros, {}, {},
                                  {pooled_pros}, (long)pooled_pros.size(), sc, rng,
                                  &res.stats)[0];
    });
    res.ph_prosody = tail(php_full, l_t);

    // 2. durations over the duration prompt's geometry, no guidance
    std::vector<int> gen_dur = stage_guard("duration", [&] {
        ad::Var feats_dur = req.duration_prompt || req.prosody_prompt
                                ? [&] {
                                      ad::NoGradGuard ng;
                                      return phoneme_encode(
                                          concat_ids(dur_p.phonemes, req.phonemes));
                                  }()
                                : feats_pros;
        std::vector<int> pooled_dur =
            req.duration_prompt || req.prosody_prompt
                ? phoneme_pool(f_dur.pre_quant, dur_p.durations, cdc.prosody_branch())
                : pooled_pros;
        std::vector<int> prompt_classes = dur_p.durations;
        for (int& d : prompt_classes) d = std::min(d, (int)tc.dur_classes - 1);
        std::vector<int> full = generate_duration(
            factory, feats_dur, prompt_classes,
            concat_ids(pooled_dur, res.ph_prosody), sc, tc.dur_classes, rng,
            &res.stats);
        return tail(full, l_t);
    });
    res.durations = gen_dur;
    long t_gen = std::accumulate(gen_dur.begin(), gen_dur.end(), 0L);
    check(t_gen > 0, "stage duration: generated zero total frames");

    // 3. frame-level prosody over the prosody prompt's geometry
    std::vector<int> pros_gen = stage_guard("prosody", [&] {
        ad::Var c_ph = length_regulate(feats_pros,
                                       concat_ids(pros_p.durations, gen_dur));
        auto grids = generate_attribute(factory, Stage::prosody, tc.prosody_levels,
                                        c_ph, {}, {}, f_pros.codes.prosody,
                                        f_pros.frames, sc, rng, &res.stats);
        return tail(grids[0], t_gen);
    });
    res.codes.prosody = {pros_gen};

    // content and detail share the base prompt's geometry; upstream grids are
    // the base prompt's codes continued by the generated region
    ad::Var feats_base = req.prosody_prompt
                             ? stage_guard("phoneme encoding",
                                           [&] {
                                               ad::NoGradGuard ng;
                                               return phoneme_encode(concat_ids(
                                                   base.phonemes, req.phonemes));
                                           })
                             : feats_pros;
    ad::Var c_ph_base = stage_guard("length regulation", [&] {
        return length_regulate(feats_base, concat_ids(base.durations, gen_dur));
    });
    std::vector<int> pros_grid_base =
        concat_ids(f_base.codes.prosody[0], pros_gen);

    // 4. content, two levels
    std::vector<std::vector<int>> cont_full = stage_guard("content", [&] {
        return generate_attribute(factory, Stage::content, tc.content_levels,
                                  c_ph_base, {pros_grid_base},
                                  {tts::grid_slot(Stage::prosody, 0)},
                                  f_base.codes.content, f_base.frames, sc, rng,
                                  &res.stats);
    });
    for (const auto& g : cont_full) res.codes.content.push_back(tail(g, t_gen));

    // 5. detail, three levels
    std::vector<std::vector<int>> upstream = {pros_grid_base};
    std::vector<long> upstream_slots = {tts::grid_slot(Stage::prosody, 0)};
    for (long l = 0; l < tc.content_levels; ++l) {
        upstream.push_back(concat_ids(f_base.codes.content[(size_t)l],
                                      res.codes.content[(size_t)l]));
        upstream_slots.push_back(tts::grid_slot(Stage::content, l));
    }
    std::vector<std::vector<int>> det_full = stage_guard("detail", [&] {
        return generate_attribute(factory, Stage::detail, tc.detail_levels,
                                  c_ph_base, upstream, upstream_slots,
                                  f_base.codes.detail, f_base.frames, sc, rng,
                                  &res.stats);
    });
    for (const auto& g : det_full) res.codes.detail.push_back(tail(g, t_gen));

    // 6. embed the generated codes and decode with the prompt's timbre
    res.wave = stage_guard("decoding", [&] {
        ad::NoGradGuard ng;
        ad::Var z_p = cdc.prosody_branch().embed_codes(res.codes.prosody);
        ad::Var z_c = cdc.content_branch().embed_codes(res.codes.content);
        ad::Var z_d = cdc.detail_branch().embed_codes(res.codes.detail);
        return cdc.wave_of(cdc.decode(z_p, z_c, z_d, ad::constant(h_t)));
    });
    return res;
}

inline SynthesisResult synthesize(const codec::Codec& cdc, const tts::TtsModel& model,
                                  const SynthesisRequest& req) {
    return synthesize(cdc, model.config(), model_factory(model),
                      [&model](const std::vector<int>& ph) {
                          return model.phoneme_encode_var(ph);
                      },
                      req);
}

}  // namespace pipeline
}  // namespace voxfactor
