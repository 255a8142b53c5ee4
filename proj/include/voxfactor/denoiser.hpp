#pragma once

// Denoiser models for factorized masked token diffusion: a phoneme encoder,
// two phoneme-resolution models (phoneme-level prosody and duration), and one
// frame-resolution transformer trunk shared by the prosody / content / detail
// heads, distinguished by attribute and level embeddings.  Every diffusion
// block is condition-modulated by a sinusoidal feature row of the current
// diffusion time.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "voxfactor/autodiff.hpp"
#include "voxfactor/common.hpp"
#include "voxfactor/diffusion.hpp"
#include "voxfactor/nn.hpp"

namespace voxfactor {
namespace tts {

using Mat = Eigen::MatrixXd;

enum class Stage { ph_prosody, duration, prosody, content, detail };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::ph_prosody: return "ph_prosody";
        case Stage::duration: return "duration";
        case Stage::prosody: return "prosody";
        case Stage::content: return "content";
        case Stage::detail: return "detail";
    }
    return "unknown";
}

// flat slot of each frame-level code grid: prosody level 0, content levels
// 0-1, detail levels 0-2.  Slots select conditioning tables and output heads.
inline long grid_slot(Stage attr, long level) {
    switch (attr) {
        case Stage::prosody:
            check(level == 0, "grid_slot: prosody has a single level");
            return 0;
        case Stage::content:
            check(level >= 0 && level < 2, "grid_slot: content level out of range");
            return 1 + level;
        case Stage::detail:
            check(level >= 0 && level < 3, "grid_slot: detail level out of range");
            return 3 + level;
        default:
            check(false, "grid_slot: not a frame-level stage");
            return -1;
    }
}

// one denoising problem: which head, sequence geometry, and what conditions
// it (feature rows plus previously completed code grids tagged by slot).
struct StageRequest {
    Stage stage = Stage::prosody;
    long level = 0;
    long n = 0;             // sequence length, prompt region included
    long prompt_len = 0;    // leading positions owned by the prompt
    ad::Var cond_features;  // n x d feature rows (phoneme features or frame features)
    std::vector<std::vector<int>> cond_codes;  // completed grids, each length n
    std::vector<long> cond_slots;              // grid_slot of each cond grid
};

struct TtsConfig {
    long num_phonemes = 40;
    long code_vocab = 1024;  // prosody / content / detail codebook size
    long dur_classes = 128;  // duration classes 0 .. dur_classes-1
    long prosody_levels = 1;
    long content_levels = 2;
    long detail_levels = 3;
    // phoneme encoder
    long d_phe = 128;
    long phe_layers = 2;
    long phe_heads = 4;
    long phe_ffn = 256;
    // phoneme-resolution diffusion models (phoneme-level prosody, duration)
    long d_phd = 128;
    long phd_layers = 2;
    long phd_heads = 4;
    long phd_ffn = 256;
    // shared frame-resolution trunk (prosody, content, detail)
    long d_trunk = 256;
    long trunk_layers = 4;
    long trunk_heads = 4;
    long trunk_ffn = 512;
    long d_time = 64;  // diffusion-time feature width fed to cond layernorm
    double horizon = 1.0;

    long frame_grids() const {
        return prosody_levels + content_levels + detail_levels;
    }
    long levels_of(Stage s) const {
        switch (s) {
            case Stage::ph_prosody: return 1;
            case Stage::duration: return 1;
            case Stage::prosody: return prosody_levels;
            case Stage::content: return content_levels;
            case Stage::detail: return detail_levels;
        }
        return 0;
    }
    long vocab_of(Stage s) const {
        return s == Stage::duration ? dur_classes : code_vocab;
    }

    // full-scale reference sizes; recorded, not meant for desk runs
    static TtsConfig paper_preset() {
        TtsConfig c;
        c.d_phe = 512;
        c.phe_layers = 6;
        c.phe_heads = 8;
        c.phe_ffn = 2048;
        c.d_phd = 1024;
        c.phd_layers = 6;
        c.phd_heads = 8;
        c.phd_ffn = 2048;
        c.d_trunk = 1024;
        c.trunk_layers = 12;
        c.trunk_heads = 8;
        c.trunk_ffn = 2048;
        return c;
    }
};

class TtsModel {
  public:
    TtsModel(nn::ParamStore& ps, TtsConfig cfg = TtsConfig()) : cfg_(cfg) {
        check(cfg_.num_phonemes > 0 && cfg_.code_vocab > 0 && cfg_.dur_classes > 0,
              "tts model: vocabulary sizes must be positive");
        check(cfg_.prosody_levels == 1 && cfg_.content_levels >= 1 &&
                  cfg_.detail_levels >= 1 && cfg_.frame_grids() <= 6,
              "tts model: unsupported level layout");

        phe_emb_ = nn::Embedding(ps, "tts.phe.emb", cfg_.num_phonemes, cfg_.d_phe);
        for (long i = 0; i < cfg_.phe_layers; ++i)
            phe_blocks_.emplace_back(ps, "tts.phe.block" + std::to_string(i),
                                     cfg_.d_phe, cfg_.phe_heads, cfg_.phe_ffn);
        phe_ln_ = nn::LayerNorm(ps, "tts.phe.ln", cfg_.d_phe);

        php_tok_ = nn::Embedding(ps, "tts.php.tok", cfg_.code_vocab + 1, cfg_.d_phd);
        php_cond_ = nn::Linear(ps, "tts.php.cond", cfg_.d_phe, cfg_.d_phd);
        for (long i = 0; i < cfg_.phd_layers; ++i)
            php_blocks_.emplace_back(ps, "tts.php.block" + std::to_string(i),
                                     cfg_.d_phd, cfg_.phd_heads, cfg_.phd_ffn,
                                     cfg_.d_time);
        php_ln_ = nn::LayerNorm(ps, "tts.php.ln", cfg_.d_phd);
        php_head_ = nn::Linear(ps, "tts.php.head", cfg_.d_phd, cfg_.code_vocab);

        dur_tok_ = nn::Embedding(ps, "tts.dur.tok", cfg_.dur_classes + 1, cfg_.d_phd);
        dur_cond_ = nn::Linear(ps, "tts.dur.cond", cfg_.d_phe, cfg_.d_phd);
        dur_php_ = nn::Embedding(ps, "tts.dur.php", cfg_.code_vocab, cfg_.d_phd);
        for (long i = 0; i < cfg_.phd_layers; ++i)
            dur_blocks_.emplace_back(ps, "tts.dur.block" + std::to_string(i),
                                     cfg_.d_phd, cfg_.phd_heads, cfg_.phd_ffn,
                                     cfg_.d_time);
        dur_ln_ = nn::LayerNorm(ps, "tts.dur.ln", cfg_.d_phd);
        dur_head_ = nn::Linear(ps, "tts.dur.head", cfg_.d_phd, cfg_.dur_classes);

        trunk_tok_ = nn::Embedding(ps, "tts.trunk.tok", cfg_.code_vocab + 1, cfg_.d_trunk);
        trunk_feat_ = nn::Linear(ps, "tts.trunk.feat", cfg_.d_phe, cfg_.d_trunk);
        attr_emb_ = nn::Embedding(ps, "tts.trunk.attr", 3, cfg_.d_trunk);
        level_emb_ = nn::Embedding(ps, "tts.trunk.level", 3, cfg_.d_trunk);
        for (long s = 0; s < cfg_.frame_grids(); ++s) {
            trunk_cond_.emplace_back(ps, "tts.trunk.cond" + std::to_string(s),
                                     cfg_.code_vocab, cfg_.d_trunk);
            trunk_head_.emplace_back(ps, "tts.trunk.head" + std::to_string(s),
                                     cfg_.d_trunk, cfg_.code_vocab);
        }
        for (long i = 0; i < cfg_.trunk_layers; ++i)
            trunk_blocks_.emplace_back(ps, "tts.trunk.block" + std::to_string(i),
                                       cfg_.d_trunk, cfg_.trunk_heads,
                                       cfg_.trunk_ffn, cfg_.d_time);
        trunk_ln_ = nn::LayerNorm(ps, "tts.trunk.ln", cfg_.d_trunk);
    }

    const TtsConfig& config() const { return cfg_; }

    // position-aware phoneme features [L x d_phe]
    ad::Var phoneme_encode_var(const std::vector<int>& phonemes) const {
        check(!phonemes.empty(), "phoneme encoder: empty sequence");
        for (int id : phonemes)
            check(id >= 0 && id < cfg_.num_phonemes,
                  "phoneme encoder: unknown phoneme id " + std::to_string(id));
        ad::Var x = ad::add(phe_emb_.forward(phonemes),
                            nn::positional_encoding((long)phonemes.size(), cfg_.d_phe));
        for (const auto& b : phe_blocks_) x = b.forward(x);
        return phe_ln_.forward(x);
    }

    Mat phoneme_encode(const std::vector<int>& phonemes) const {
        ad::NoGradGuard ng;
        return phoneme_encode_var(phonemes).val();
    }

    // gradient-capable logits for one masked state; training and sampling
    // share this path.  The unconditional variant masks the prompt tokens and
    // zeroes the prompt rows of every conditioning code grid; feature rows
    // derived from the text are kept.
    ad::Var logits(const StageRequest& req, const diff::DiffusionState& st,
                   bool uncond = false) const {
        check(req.n >= 1, "denoiser: empty request");
        check(st.size() == req.n, "denoiser: state length mismatch");
        check(st.prompt_len == req.prompt_len, "denoiser: prompt length mismatch");
        check(req.cond_features.node() != nullptr &&
                  req.cond_features.rows() == req.n,
              "denoiser: conditioning feature rows mismatch");
        switch (req.stage) {
            case Stage::ph_prosody: return ph_prosody_logits(req, st, uncond);
            case Stage::duration: return duration_logits(req, st, uncond);
            case Stage::prosody:
            case Stage::content:
            case Stage::detail: return trunk_logits(req, st, uncond);
        }
        check(false, "denoiser: unknown stage");
        return ad::Var();
    }

    // value-only closure for the sampler; the model must outlive it
    diff::DenoiserFn denoiser(StageRequest req, bool uncond = false) const {
        return [this, req = std::move(req), uncond](const diff::DiffusionState& st) {
            ad::NoGradGuard ng;
            return logits(req, st, uncond).val();
        };
    }

  private:
    ad::Var time_cond(double t) const {
        return ad::constant(nn::time_features(t / cfg_.horizon, cfg_.d_time));
    }

    std::vector<int> token_ids(const diff::DiffusionState& st, long vocab,
                               bool uncond) const {
        std::vector<int> ids(st.tokens.size());
        for (size_t i = 0; i < st.tokens.size(); ++i) {
            int tok = st.tokens[i];
            if (uncond && (long)i < st.prompt_len) {
                ids[i] = (int)vocab;  // prompt hidden behind the mask slot
                continue;
            }
            if (tok == diff::kMaskToken) {
                ids[i] = (int)vocab;
                continue;
            }
            check(tok >= 0 && tok < vocab, "denoiser: token out of range");
            ids[i] = tok;
        }
        return ids;
    }

    ad::Var embed_grid(const nn::Embedding& table, const std::vector<int>& codes,
                       long n, long vocab, long prompt_len, bool uncond) const {
        check((long)codes.size() == n, "denoiser: conditioning grid length mismatch");
        for (int c : codes)
            check(c >= 0 && c < vocab, "denoiser: conditioning code out of range");
        ad::Var e = table.forward(codes);
        if (uncond && prompt_len > 0) {
            Mat keep = Mat::Ones(n, 1);
            keep.topRows(prompt_len).setZero();
            e = ad::mul_colvec(e, ad::constant(keep));
        }
        return e;
    }

    ad::Var ph_prosody_logits(const StageRequest& req, const diff::DiffusionState& st,
                              bool uncond) const {
        check(req.cond_codes.empty(), "denoiser: ph_prosody takes no code grids");
        ad::Var x = ad::add(php_tok_.forward(token_ids(st, cfg_.code_vocab, uncond)),
                            php_cond_.forward(req.cond_features));
        x = ad::add(x, nn::positional_encoding(req.n, cfg_.d_phd));
        ad::Var tc = time_cond(st.t);
        for (const auto& b : php_blocks_) x = b.forward(x, tc);
        return php_head_.forward(php_ln_.forward(x));
    }

    ad::Var duration_logits(const StageRequest& req, const diff::DiffusionState& st,
                            bool uncond) const {
        check(req.cond_codes.size() == 1,
              "denoiser: duration takes exactly the phoneme-prosody grid");
        ad::Var x = ad::add(dur_tok_.forward(token_ids(st, cfg_.dur_classes, uncond)),
                            dur_cond_.forward(req.cond_features));
        x = ad::add(x, embed_grid(dur_php_, req.cond_codes[0], req.n,
                                  cfg_.code_vocab, req.prompt_len, uncond));
        x = ad::add(x, nn::positional_encoding(req.n, cfg_.d_phd));
        ad::Var tc = time_cond(st.t);
        for (const auto& b : dur_blocks_) x = b.forward(x, tc);
        return dur_head_.forward(dur_ln_.forward(x));
    }

    ad::Var trunk_logits(const StageRequest& req, const diff::DiffusionState& st,
                         bool uncond) const {
        check(req.cond_codes.size() == req.cond_slots.size(),
              "denoiser: conditioning grids and slots mismatch");
        long slot = grid_slot(req.stage, req.level);
        ad::Var x = ad::add(trunk_tok_.forward(token_ids(st, cfg_.code_vocab, uncond)),
                            trunk_feat_.forward(req.cond_features));
        for (size_t j = 0; j < req.cond_codes.size(); ++j) {
            long src = req.cond_slots[j];
            check(src >= 0 && src < (long)trunk_cond_.size(),
                  "denoiser: conditioning slot out of range");
            x = ad::add(x, embed_grid(trunk_cond_[(size_t)src], req.cond_codes[j],
                                      req.n, cfg_.code_vocab, req.prompt_len, uncond));
        }
        int attr_idx = req.stage == Stage::prosody ? 0
                       : req.stage == Stage::content ? 1
                                                     : 2;
        x = ad::add_rowvec(x, attr_emb_.forward({attr_idx}));
        x = ad::add_rowvec(x, level_emb_.forward({(int)req.level}));
        x = ad::add(x, nn::positional_encoding(req.n, cfg_.d_trunk));
        ad::Var tc = time_cond(st.t);
        for (const auto& b : trunk_blocks_) x = b.forward(x, tc);
        return trunk_head_[(size_t)slot].forward(trunk_ln_.forward(x));
    }

    TtsConfig cfg_;
    nn::Embedding phe_emb_;
    std::vector<nn::TransformerBlock> phe_blocks_;
    nn::LayerNorm phe_ln_;
    nn::Embedding php_tok_;
    nn::Linear php_cond_;
    std::vector<nn::TransformerBlock> php_blocks_;
    nn::LayerNorm php_ln_;
    nn::Linear php_head_;
    nn::Embedding dur_tok_;
    nn::Linear dur_cond_;
    nn::Embedding dur_php_;
    std::vector<nn::TransformerBlock> dur_blocks_;
    nn::LayerNorm dur_ln_;
    nn::Linear dur_head_;
    nn::Embedding trunk_tok_;
    nn::Linear trunk_feat_;
    nn::Embedding attr_emb_;
    nn::Embedding level_emb_;
    std::vector<nn::Embedding> trunk_cond_;
    std::vector<nn::Linear> trunk_head_;
    std::vector<nn::TransformerBlock> trunk_blocks_;
    nn::LayerNorm trunk_ln_;
};

}  // namespace tts
}  // namespace voxfactor
