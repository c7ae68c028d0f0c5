#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specattn/layer_map.hpp"
#include "specattn/model.hpp"
#include "specattn/select.hpp"
#include "specattn/trace.hpp"

namespace specattn {

struct SpecConfig {
    std::size_t gamma = 4;
    SelectionConfig selection;
    std::size_t max_tokens = 64;
    std::optional<TokenId> eos_token;
    AttentionMode attention_mode = AttentionMode::renormalized;

    void validate() const {
        if (gamma < 1) throw Error("gamma must be >= 1");
        selection.validate();
    }
};

inline void to_json(nlohmann::json& j, const SpecConfig& c) {
    j = nlohmann::json{{"gamma", c.gamma},
                       {"selection", c.selection},
                       {"max_tokens", c.max_tokens},
                       {"attention_mode", to_string(c.attention_mode)}};
    j["eos_token"] = c.eos_token ? nlohmann::json(*c.eos_token) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, SpecConfig& c) {
    c = SpecConfig{};
    c.gamma = j.value("gamma", c.gamma);
    if (j.contains("selection")) c.selection = j.at("selection").get<SelectionConfig>();
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    if (j.contains("eos_token") && !j.at("eos_token").is_null()) c.eos_token = j.at("eos_token").get<TokenId>();
    if (j.contains("attention_mode")) c.attention_mode = attention_mode_from_string(j.at("attention_mode").get<std::string>());
}

// Which verifier positions each layer may read during a round.
struct MaskPolicy {
    enum class Kind { dense, specattn, streaming, topk };
    Kind kind = Kind::specattn;
    std::size_t n_sink = 4;       // streaming
    std::size_t n_recent = 64;    // streaming
    std::size_t topk_budget = 64;  // topk

    static MaskPolicy dense() { return {Kind::dense}; }
    static MaskPolicy specattn() { return {Kind::specattn}; }
    static MaskPolicy streaming(std::size_t sink, std::size_t recent) { return {Kind::streaming, sink, recent}; }
    static MaskPolicy topk(std::size_t budget) {
        MaskPolicy p{Kind::topk};
        p.topk_budget = budget;
        return p;
    }
};

struct RoundRecord {
    std::vector<TokenId> draft_tokens;
    std::vector<TokenId> verifier_tokens;
    std::size_t n_accepted = 0;
    std::size_t cache_len_before = 0;
    std::size_t cache_len_after = 0;
    std::size_t verify_rows = 0;
    // Per verifier layer, summed over the round's verification rows: KV entries actually
    // read (including each query's own position) and entries dense attention would read.
    std::vector<std::size_t> attended;
    std::vector<std::size_t> dense;
};

inline nlohmann::json round_to_json(const RoundRecord& r, std::size_t index) {
    return nlohmann::json{{"round", index},
                          {"draft_tokens", r.draft_tokens},
                          {"verifier_tokens", r.verifier_tokens},
                          {"n_accepted", r.n_accepted},
                          {"cache_len_before", r.cache_len_before},
                          {"cache_len_after", r.cache_len_after},
                          {"verify_rows", r.verify_rows},
                          {"attended", r.attended},
                          {"dense", r.dense}};
}

// Masks for one round, one CSR per verifier layer with one row per verification query.
// An empty result means fully dense attention.
inline std::vector<CsrMask> build_round_masks(const MaskPolicy& policy, const SelectionConfig& sel,
                                              const AttnTrace& draft_steps, const LayerMapping& mapping,
                                              std::size_t verifier_layers, std::size_t cache_len, std::size_t n_rows) {
    switch (policy.kind) {
        case MaskPolicy::Kind::dense:
            return {};
        case MaskPolicy::Kind::specattn:
            return build_layer_masks(draft_steps, mapping, sel, verifier_layers, cache_len, n_rows);
        case MaskPolicy::Kind::topk: {
            // One budget-sized set per layer, ranked by the round's mean draft attention over
            // the pre-round cache.
            if (mapping.verifier_layers() != verifier_layers) throw Error("mapping does not cover every verifier layer");
            std::vector<CsrMask> masks;
            for (std::size_t j = 0; j < verifier_layers; ++j) {
                TokenSet set = TokenSet::all(cache_len);
                if (j >= sel.dense_prefix_layers && cache_len > 0) {
                    const std::size_t src = mapping(j);
                    if (src >= draft_steps.n_layers() || draft_steps.n_positions() == 0) {
                        throw Error("mapping refers to a draft layer missing from the trace");
                    }
                    Vector mean(cache_len, 0.0);
                    for (const auto& row : draft_steps.layers[src]) {
                        for (std::size_t i = 0; i < cache_len; ++i) mean[i] += row[i];
                    }
                    set = topk_select(mean, std::min(policy.topk_budget, cache_len));
                }
                masks.push_back(verification_rows(set, cache_len, n_rows));
            }
            return masks;
        }
        case MaskPolicy::Kind::streaming: {
            const TokenSet window = streaming_select(cache_len, policy.n_sink, policy.n_recent);
            std::vector<CsrMask> masks;
            for (std::size_t j = 0; j < verifier_layers; ++j) {
                masks.push_back(verification_rows(j < sel.dense_prefix_layers ? TokenSet::all(cache_len) : window,
                                                  cache_len, n_rows));
            }
            return masks;
        }
    }
    return {};
}

// Per-layer masks for verification row r; dense-prefix layers stay unmasked.
inline LayerMasks row_layer_masks(const std::vector<CsrMask>& masks, std::size_t row, std::size_t cache_len,
                                  std::size_t dense_prefix_layers) {
    if (masks.empty()) return {};
    LayerMasks out(masks.size());
    for (std::size_t j = 0; j < masks.size(); ++j) {
        if (j < dense_prefix_layers) continue;
        out[j] = csr_row_mask(masks[j], row, cache_len + row);
    }
    return out;
}

// Fills the per-layer KV accounting of a round whose first query saw `cache_len` entries.
inline void account_round(RoundRecord& rec, const std::vector<CsrMask>& masks, std::size_t verifier_layers,
                          std::size_t cache_len, std::size_t n_rows) {
    rec.verify_rows = n_rows;
    rec.attended.assign(verifier_layers, 0);
    rec.dense.assign(verifier_layers, 0);
    for (std::size_t j = 0; j < verifier_layers; ++j) {
        for (std::size_t r = 0; r < n_rows; ++r) {
            rec.dense[j] += cache_len + r + 1;
            rec.attended[j] += masks.empty() ? cache_len + r + 1 : masks[j].row_nnz(r) + 1;
        }
    }
}

struct DraftResult {
    std::vector<TokenId> tokens;
    AttnTrace steps;  // [draft layer][step]
};

// gamma greedy draft steps starting from the last accepted token. The draft cache grows by
// gamma entries: the fed token and the first gamma - 1 proposals.
inline DraftResult draft_phase(const Model& draft, KVCache& cache, TokenId last_token, std::size_t gamma) {
    if (gamma < 1) throw Error("gamma must be >= 1");
    DraftResult r{{}, AttnTrace::with_layers(ModelRole::draft, draft.config.n_layers)};
    TokenId z = last_token;
    for (std::size_t s = 0; s < gamma; ++s) {
        StepOutput out = forward_step(draft, z, cache);
        r.steps.append(out);
        z = static_cast<TokenId>(argmax(out.logits));
        r.tokens.push_back(z);
    }
    return r;
}

struct VerifyOptions {
    AttentionMode mode = AttentionMode::renormalized;
    std::size_t dense_prefix_layers = 0;
    const AttentionObserver* observer = nullptr;
};

// Feeds the last accepted token followed by the draft tokens (gamma + 1 queries) and returns
// the verifier's argmax after each. masks[j] has one row per query; empty means dense.
inline std::vector<TokenId> verify_phase(const Model& verifier, KVCache& cache, TokenId last_token,
                                         std::span<const TokenId> draft_tokens, const std::vector<CsrMask>& masks,
                                         const VerifyOptions& vopts = {}) {
    const std::size_t n_rows = draft_tokens.size() + 1;
    const std::size_t cache_len = cache.length();
    if (!masks.empty()) {
        if (masks.size() != verifier.config.n_layers) throw Error("verify_phase: one mask per verifier layer required");
        for (const auto& m : masks) {
            if (m.n_rows() != n_rows) throw Error("verify_phase: mask rows do not match verification queries");
            if (m.n_cols > cache_len + n_rows - 1) throw Error("verify_phase: mask wider than cache");
        }
    }
    std::vector<TokenId> predictions;
    predictions.reserve(n_rows);
    ForwardOptions opts;
    opts.mode = vopts.mode;
    opts.capture_attention = false;
    opts.observer = vopts.observer;
    for (std::size_t r = 0; r < n_rows; ++r) {
        const TokenId tok = r == 0 ? last_token : draft_tokens[r - 1];
        const LayerMasks lm = row_layer_masks(masks, r, cache_len, vopts.dense_prefix_layers);
        opts.masks = &lm;
        const StepOutput out = forward_step(verifier, tok, cache, opts);
        predictions.push_back(static_cast<TokenId>(argmax(out.logits)));
    }
    return predictions;
}

// Longest prefix on which draft and verifier agree.
inline std::size_t check_acceptance(std::span<const TokenId> draft_tokens, std::span<const TokenId> verifier_tokens) {
    std::size_t n = 0;
    while (n < draft_tokens.size() && n < verifier_tokens.size() && draft_tokens[n] == verifier_tokens[n]) ++n;
    return n;
}

struct GenerateOptions {
    MaskPolicy policy = MaskPolicy::specattn();
    const AttentionObserver* verifier_observer = nullptr;
};

struct GenerationResult {
    std::vector<TokenId> tokens;  // prompt followed by generated tokens
    std::vector<RoundRecord> rounds;
    std::optional<std::string> error;  // set when generation stopped early on a failure
};

// Speculative decoding with draft-guided sparse verification. Both caches hold every
// emitted token except the last one, which is fed at the start of the next round.
inline GenerationResult generate(const Model& draft, const Model& verifier, const LayerMapping& mapping,
                                 std::span<const TokenId> prompt, const SpecConfig& cfg,
                                 const GenerateOptions& gopts = {}) {
    if (prompt.empty()) throw Error("empty prompt");
    cfg.validate();
    if (gopts.policy.kind != MaskPolicy::Kind::dense) mapping.validate(draft.config.n_layers, verifier.config.n_layers);

    GenerationResult res;
    res.tokens.assign(prompt.begin(), prompt.end());
    if (cfg.max_tokens == 0) return res;

    KVCache cache_d(draft.config), cache_v(verifier.config);
    const std::size_t prompt_len = prompt.size();
    const std::size_t limit = prompt_len + cfg.max_tokens;
    try {
        if (prompt_len > 1) {
            const auto head = prompt.first(prompt_len - 1);
            ForwardOptions quiet;
            quiet.capture_attention = false;
            for (TokenId t : head) forward_step(draft, t, cache_d, quiet);
            for (TokenId t : head) forward_step(verifier, t, cache_v, quiet);
        }
        const VerifyOptions vopts{cfg.attention_mode, cfg.selection.dense_prefix_layers, gopts.verifier_observer};
        bool stop = false;
        while (!stop && res.tokens.size() < limit) {
            const std::size_t l0 = cache_v.length();
            const TokenId pending = res.tokens.back();
            if (l0 + cfg.gamma + 1 > verifier.config.max_seq || l0 + cfg.gamma > draft.config.max_seq) {
                throw Error("context overflow");
            }
            DraftResult d = draft_phase(draft, cache_d, pending, cfg.gamma);
            const std::vector<CsrMask> masks = build_round_masks(gopts.policy, cfg.selection, d.steps, mapping,
                                                                 verifier.config.n_layers, l0, cfg.gamma + 1);
            const std::vector<TokenId> v = verify_phase(verifier, cache_v, pending, d.tokens, masks, vopts);
            const std::size_t n_acc = check_acceptance(d.tokens, std::span<const TokenId>(v).first(cfg.gamma));

            RoundRecord rec;
            rec.draft_tokens = d.tokens;
            rec.verifier_tokens = v;
            rec.n_accepted = n_acc;
            rec.cache_len_before = l0;
            account_round(rec, masks, verifier.config.n_layers, l0, cfg.gamma + 1);

            cache_v.rollback(l0 + 1 + n_acc);
            if (n_acc < cfg.gamma) {
                cache_d.rollback(l0 + 1 + n_acc);
            } else {
                ForwardOptions quiet;
                quiet.capture_attention = false;
                forward_step(draft, d.tokens.back(), cache_d, quiet);
            }
            rec.cache_len_after = cache_v.length();
            res.rounds.push_back(std::move(rec));

            std::vector<TokenId> emitted(d.tokens.begin(), d.tokens.begin() + static_cast<std::ptrdiff_t>(n_acc));
            emitted.push_back(v[n_acc]);
            for (TokenId t : emitted) {
                if (res.tokens.size() >= limit) break;
                res.tokens.push_back(t);
                if (cfg.eos_token && t == *cfg.eos_token) {
                    stop = true;
                    break;
                }
            }
        }
    } catch (const Error& e) {
        res.error = e.what();
    }
    return res;
}

// Plain greedy decoding with the verifier alone; the lossless reference for generate().
inline std::vector<TokenId> greedy_generate(const Model& model, std::span<const TokenId> prompt, std::size_t max_tokens,
                                            std::optional<TokenId> eos = std::nullopt) {
    if (prompt.empty()) throw Error("empty prompt");
    std::vector<TokenId> out(prompt.begin(), prompt.end());
    if (max_tokens == 0) return out;
    KVCache cache(model.config);
    ForwardOptions quiet;
    quiet.capture_attention = false;
    StepOutput step = prefill_last(model, prompt, cache, quiet);
    for (std::size_t n = 0; n < max_tokens; ++n) {
        const auto t = static_cast<TokenId>(argmax(step.logits));
        out.push_back(t);
        if ((eos && t == *eos) || n + 1 == max_tokens) break;
        step = forward_step(model, t, cache, quiet);
    }
    return out;
}

}  // namespace specattn
