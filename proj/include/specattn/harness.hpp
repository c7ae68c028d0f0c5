#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "specattn/spec_decode.hpp"

namespace specattn {

// Percentage of KV entries skipped relative to dense attention over every verifier query
// and layer in the telemetry. Layers below dense_prefix_layers count as fully read.
inline double kv_reduction(std::span<const RoundRecord> rounds, std::size_t layer_count, std::size_t dense_prefix_layers) {
    if (rounds.empty()) throw Error("kv_reduction: empty telemetry");
    double attended = 0.0, total = 0.0;
    for (const auto& r : rounds) {
        if (r.attended.size() != layer_count || r.dense.size() != layer_count) {
            throw Error("kv_reduction: telemetry layer count mismatch");
        }
        for (std::size_t j = 0; j < layer_count; ++j) {
            total += static_cast<double>(r.dense[j]);
            attended += static_cast<double>(j < dense_prefix_layers ? r.dense[j] : r.attended[j]);
        }
    }
    if (total <= 0.0) throw Error("kv_reduction: no KV entries in telemetry");
    return 100.0 * (1.0 - attended / total);
}

struct PerplexityTrace {
    std::vector<double> cum_nll;
    std::vector<double> cum_ppl;
};

struct PerplexityOptions {
    MaskPolicy policy = MaskPolicy::dense();
    const Model* draft = nullptr;  // required for specattn / topk policies
    const LayerMapping* mapping = nullptr;
    SelectionConfig selection;
    std::size_t gamma = 4;
    AttentionMode mode = AttentionMode::renormalized;
    const AttentionObserver* observer = nullptr;
};

struct PerplexityResult {
    double perplexity = 0.0;
    std::size_t evaluated = 0;
    PerplexityTrace trace;
    std::vector<RoundRecord> rounds;
};

inline double token_nll(std::span<const double> logits, TokenId target) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double z : logits) s += std::exp(z - mx);
    return mx + std::log(s) - logits[target];
}

// Teacher-forced perplexity over the decode region. The first prefill_fraction of the corpus
// is prefilled densely; the rest is scored in rounds of `gamma` positions. For draft-guided
// policies the draft runs over the same true tokens and its attention builds the round's
// masks, exactly as a speculative round would.
inline PerplexityResult perplexity(const Model& verifier, std::span<const TokenId> corpus, double prefill_fraction,
                                   const PerplexityOptions& opts = {}) {
    const std::size_t n = corpus.size();
    if (n < 2) throw Error("perplexity: corpus needs at least two tokens");
    if (!(prefill_fraction >= 0.0 && prefill_fraction < 1.0)) throw Error("perplexity: prefill_fraction must be in [0, 1)");
    if (n > verifier.config.max_seq) throw Error("perplexity: corpus longer than verifier max_seq");
    if (opts.gamma < 1) throw Error("perplexity: gamma must be >= 1");
    const bool needs_draft = opts.policy.kind == MaskPolicy::Kind::specattn || opts.policy.kind == MaskPolicy::Kind::topk;
    if (needs_draft && (opts.draft == nullptr || opts.mapping == nullptr)) {
        throw Error("perplexity: draft model and mapping required for draft-guided masks");
    }
    if (opts.mapping != nullptr && opts.draft != nullptr) {
        opts.mapping->validate(opts.draft->config.n_layers, verifier.config.n_layers);
    }
    if (opts.draft != nullptr && n > opts.draft->config.max_seq) throw Error("perplexity: corpus longer than draft max_seq");

    const std::size_t n_pre = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(prefill_fraction * n)));
    if (n_pre >= n) throw Error("perplexity: no tokens left to evaluate");

    KVCache cache_v(verifier.config);
    std::optional<KVCache> cache_d;
    ForwardOptions quiet;
    quiet.capture_attention = false;
    for (std::size_t t = 0; t + 1 < n_pre; ++t) forward_step(verifier, corpus[t], cache_v, quiet);
    if (opts.draft != nullptr) {
        cache_d.emplace(opts.draft->config);
        for (std::size_t t = 0; t + 1 < n_pre; ++t) forward_step(*opts.draft, corpus[t], *cache_d, quiet);
    }

    PerplexityResult res;
    double cum = 0.0;
    const LayerMapping empty_mapping;
    for (std::size_t t = n_pre - 1; t + 1 < n;) {
        const std::size_t g = std::min(opts.gamma, n - 1 - t);
        const std::size_t l0 = cache_v.length();
        AttnTrace steps = AttnTrace::with_layers(ModelRole::draft, opts.draft ? opts.draft->config.n_layers : 0);
        std::vector<TokenId> draft_pred;
        if (opts.draft != nullptr) {
            for (std::size_t s = 0; s < g; ++s) {
                StepOutput out = forward_step(*opts.draft, corpus[t + s], *cache_d);
                steps.append(out);
                draft_pred.push_back(static_cast<TokenId>(argmax(out.logits)));
            }
        }
        const std::vector<CsrMask> masks =
            build_round_masks(opts.policy, opts.selection, steps, opts.mapping ? *opts.mapping : empty_mapping,
                              verifier.config.n_layers, l0, g);

        RoundRecord rec;
        rec.cache_len_before = l0;
        rec.draft_tokens = draft_pred;
        ForwardOptions fo;
        fo.mode = opts.mode;
        fo.capture_attention = false;
        fo.observer = opts.observer;
        for (std::size_t r = 0; r < g; ++r) {
            const LayerMasks lm = row_layer_masks(masks, r, l0, opts.selection.dense_prefix_layers);
            fo.masks = &lm;
            const StepOutput out = forward_step(verifier, corpus[t + r], cache_v, fo);
            const double nll = token_nll(out.logits, corpus[t + r + 1]);
            cum += nll;
            res.trace.cum_nll.push_back(cum);
            res.trace.cum_ppl.push_back(std::exp(cum / static_cast<double>(res.trace.cum_nll.size())));
            rec.verifier_tokens.push_back(static_cast<TokenId>(argmax(out.logits)));
        }
        rec.n_accepted = check_acceptance(rec.draft_tokens, rec.verifier_tokens);
        rec.cache_len_after = cache_v.length();
        account_round(rec, masks, verifier.config.n_layers, l0, g);
        res.rounds.push_back(std::move(rec));
        t += g;
    }
    res.evaluated = res.trace.cum_nll.size();
    res.perplexity = std::exp(cum / static_cast<double>(res.evaluated));
    return res;
}

struct BenchReport {
    std::string method;
    double perplexity = 0.0;
    double perplexity_delta = 0.0;
    double relative_increase = 0.0;  // percent
    double kv_reduction = 0.0;       // percent
    std::size_t rounds = 0;
    double mean_accepted = 0.0;
};

struct BenchConfig {
    std::vector<double> p_values{0.8, 0.9, 0.95, 0.99};
    // p, iterations, block size and dense prefix for the sparse runs; p picks the run whose
    // density the top-k and streaming baselines are matched to.
    SelectionConfig selection{0.95, 10, 16, 2, std::nullopt};
    std::size_t gamma = 4;
    double prefill_fraction = 0.1;
    AttentionMode mode = AttentionMode::renormalized;
    bool include_streaming = true;
    bool include_topk = true;
    std::size_t streaming_sink = 4;
    std::optional<std::size_t> streaming_recent;  // default: density matched
    std::optional<std::size_t> topk_budget;       // default: density matched
};

inline void to_json(nlohmann::json& j, const BenchConfig& c) {
    j = nlohmann::json{{"p_values", c.p_values},
                       {"selection", c.selection},
                       {"gamma", c.gamma},
                       {"prefill_fraction", c.prefill_fraction},
                       {"attention_mode", to_string(c.mode)},
                       {"include_streaming", c.include_streaming},
                       {"include_topk", c.include_topk},
                       {"streaming_sink", c.streaming_sink}};
    j["streaming_recent"] = c.streaming_recent ? nlohmann::json(*c.streaming_recent) : nlohmann::json(nullptr);
    j["topk_budget"] = c.topk_budget ? nlohmann::json(*c.topk_budget) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, BenchConfig& c) {
    c = BenchConfig{};
    c.p_values = j.value("p_values", c.p_values);
    if (j.contains("selection")) c.selection = j.at("selection").get<SelectionConfig>();
    c.gamma = j.value("gamma", c.gamma);
    c.prefill_fraction = j.value("prefill_fraction", c.prefill_fraction);
    if (j.contains("attention_mode")) c.mode = attention_mode_from_string(j.at("attention_mode").get<std::string>());
    c.include_streaming = j.value("include_streaming", c.include_streaming);
    c.include_topk = j.value("include_topk", c.include_topk);
    c.streaming_sink = j.value("streaming_sink", c.streaming_sink);
    if (j.contains("streaming_recent") && !j.at("streaming_recent").is_null()) {
        c.streaming_recent = j.at("streaming_recent").get<std::size_t>();
    }
    if (j.contains("topk_budget") && !j.at("topk_budget").is_null()) c.topk_budget = j.at("topk_budget").get<std::size_t>();
}

struct BenchResults {
    std::vector<BenchReport> reports;  // sorted by method tag
    std::map<std::string, PerplexityTrace> traces;
    std::size_t matched_budget = 0;
};

inline std::string specattn_tag(double p) { return fmt::format("specattn(p={:.2f})", p); }

// Mean size of the per-layer selected set over the pre-existing cache, across sparse layers
// and rounds. Recovered from the accounting: row r reads |set| + r + 1 entries.
inline double mean_selected(std::span<const RoundRecord> rounds, std::size_t dense_prefix_layers) {
    double sum = 0.0, count = 0.0;
    for (const auto& r : rounds) {
        const double g = static_cast<double>(r.verify_rows);
        for (std::size_t j = dense_prefix_layers; j < r.attended.size(); ++j) {
            sum += static_cast<double>(r.attended[j]) - g * (g + 1.0) / 2.0;
            count += g;
        }
    }
    return count > 0.0 ? sum / count : 0.0;
}

// Full attention, SpecAttn at each p, and density-matched top-k / streaming baselines.
inline BenchResults compare_methods(const Model& draft, const Model& verifier, const LayerMapping& mapping,
                                    std::span<const TokenId> corpus, const BenchConfig& cfg) {
    BenchResults out;
    const std::size_t layers = verifier.config.n_layers;
    const std::size_t prefix = cfg.selection.dense_prefix_layers;

    auto run = [&](const MaskPolicy& policy, const SelectionConfig& sel) {
        PerplexityOptions o;
        o.policy = policy;
        o.draft = &draft;
        o.mapping = &mapping;
        o.selection = sel;
        o.gamma = cfg.gamma;
        o.mode = cfg.mode;
        return perplexity(verifier, corpus, cfg.prefill_fraction, o);
    };
    auto report = [&](const std::string& tag, const PerplexityResult& r, double base) {
        BenchReport b;
        b.method = tag;
        b.perplexity = r.perplexity;
        b.perplexity_delta = r.perplexity - base;
        b.relative_increase = 100.0 * (r.perplexity - base) / base;
        b.kv_reduction = kv_reduction(r.rounds, layers, prefix);
        b.rounds = r.rounds.size();
        double acc = 0.0;
        for (const auto& rr : r.rounds) acc += static_cast<double>(rr.n_accepted);
        b.mean_accepted = acc / static_cast<double>(r.rounds.size());
        out.reports.push_back(b);
        out.traces[tag] = r.trace;
    };

    const PerplexityResult full = run(MaskPolicy::dense(), cfg.selection);
    report("full", full, full.perplexity);
    out.reports.back().perplexity_delta = 0.0;
    out.reports.back().relative_increase = 0.0;

    std::vector<double> ps = cfg.p_values;
    if (ps.empty()) ps.push_back(cfg.selection.p);
    std::optional<double> matched_density;
    double best_gap = 2.0;
    for (double p : ps) {
        SelectionConfig sel = cfg.selection;
        sel.p = p;
        const PerplexityResult r = run(MaskPolicy::specattn(), sel);
        report(specattn_tag(p), r, full.perplexity);
        if (std::abs(p - cfg.selection.p) < best_gap) {
            best_gap = std::abs(p - cfg.selection.p);
            matched_density = mean_selected(r.rounds, prefix);
        }
    }

    const std::size_t budget = cfg.topk_budget.value_or(
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(matched_density.value_or(1.0)))));
    out.matched_budget = budget;
    if (cfg.include_topk) report("topk", run(MaskPolicy::topk(budget), cfg.selection), full.perplexity);
    if (cfg.include_streaming) {
        const std::size_t recent = cfg.streaming_recent.value_or(budget > cfg.streaming_sink ? budget - cfg.streaming_sink : 1);
        report("streaming", run(MaskPolicy::streaming(cfg.streaming_sink, recent), cfg.selection), full.perplexity);
    }

    std::sort(out.reports.begin(), out.reports.end(),
              [](const BenchReport& a, const BenchReport& b) { return a.method < b.method; });
    return out;
}

inline std::string reports_to_csv(std::span<const BenchReport> reports) {
    std::string s = "method,perplexity,perplexity_delta,relative_increase_pct,kv_reduction_pct,rounds,mean_accepted\n";
    for (const auto& r : reports) {
        s += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{},{:.17g}\n", r.method, r.perplexity, r.perplexity_delta,
                         r.relative_increase, r.kv_reduction, r.rounds, r.mean_accepted);
    }
    return s;
}

inline nlohmann::json reports_to_json(const BenchResults& res) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : res.reports) {
        rows.push_back({{"method", r.method},
                        {"perplexity", r.perplexity},
                        {"perplexity_delta", r.perplexity_delta},
                        {"relative_increase_pct", r.relative_increase},
                        {"kv_reduction_pct", r.kv_reduction},
                        {"rounds", r.rounds},
                        {"mean_accepted", r.mean_accepted}});
    }
    // Large-model reference values (7B verifier, 2048-token context). Not comparable to
    // toy-scale numbers; carried for orientation only.
    const nlohmann::json reference = {
        {"full", {{"perplexity", 6.435}}},
        {"streaming", {{"perplexity", 186.242}, {"kv_reduction_pct", 77.4}}},
        {"specattn(p=0.95)", {{"perplexity", 7.419}, {"relative_increase_pct", 15.29}, {"kv_reduction_pct", 78.4}}},
        {"specattn(p=0.97)", {{"perplexity", 6.720}, {"relative_increase_pct", 4.43}, {"kv_reduction_pct", 68.8}}},
        {"specattn(p=0.99)", {{"perplexity", 6.471}, {"relative_increase_pct", 0.56}, {"kv_reduction_pct", 44.3}}}};
    return {{"banner", "toy-scale run: absolute values are not comparable to large-model results"},
            {"matched_budget", res.matched_budget},
            {"reports", rows},
            {"reference_large_model", reference}};
}

inline std::string traces_to_csv(const std::map<std::string, PerplexityTrace>& traces) {
    std::string s = "method,step,cum_nll,cum_ppl\n";
    for (const auto& [method, t] : traces) {
        for (std::size_t k = 0; k < t.cum_nll.size(); ++k) {
            s += fmt::format("{},{},{:.17g},{:.17g}\n", method, k, t.cum_nll[k], t.cum_ppl[k]);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------------------
// Error-bound audit

struct AuditResult {
    std::size_t checked = 0;            // (layer, head, step) probes
    std::size_t masked = 0;             // probes that had a mask
    std::size_t violations = 0;         // ||O - O_hat|| > bound + slack
    std::size_t output_mismatches = 0;  // model output differs from the recomputed eq2 output
    double max_dropped_mass = 0.0;
};

// Observer that recomputes dense and eq2-masked outputs for each probe through the public
// kernels and checks ||O - O_hat||_2 <= sum_{i dropped} W[i] ||V_i||_2.
class BoundAuditor {
public:
    explicit BoundAuditor(double slack = 1e-9) : slack_(slack) {}

    void operator()(const AttentionProbe& probe) {
        ++result_.checked;
        const std::size_t n = probe.keys.rows, dh = probe.keys.cols;
        Tensor2D q = Tensor2D::row_vector(probe.query);
        Tensor2D k(n, dh, std::vector<double>(probe.keys.data, probe.keys.data + n * dh));
        Tensor2D v(n, probe.values.cols,
                   std::vector<double>(probe.values.data, probe.values.data + n * probe.values.cols));
        const MaskVector mask = probe.mask ? *probe.mask : MaskVector(n, true);
        if (probe.mask) ++result_.masked;

        const AttentionResult dense = dense_attention(q, k, v);
        const Tensor2D sparse = sparse_attention_postmask(q, k, v, mask, false);
        const double bound = masked_error_bound(dense.weights, mask, v);
        Vector diff(sparse.cols());
        for (std::size_t c = 0; c < diff.size(); ++c) diff[c] = dense.out(0, c) - sparse(0, c);
        if (l2_norm(diff) > bound + slack_) ++result_.violations;

        double dropped = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!mask[i]) dropped += dense.weights[i];
        }
        result_.max_dropped_mass = std::max(result_.max_dropped_mass, dropped);
        if (probe.mode == AttentionMode::eq2) {
            for (std::size_t c = 0; c < probe.output.size(); ++c) {
                if (std::abs(probe.output[c] - sparse(0, c)) > 1e-12) {
                    ++result_.output_mismatches;
                    break;
                }
            }
        }
    }

    const AuditResult& result() const { return result_; }

private:
    double slack_;
    AuditResult result_;
};

// Runs speculative generation in eq2 mode with dual evaluation of every verifier head.
inline AuditResult bound_audit(const Model& draft, const Model& verifier, const LayerMapping& mapping,
                               std::span<const TokenId> prompt, SpecConfig cfg) {
    cfg.attention_mode = AttentionMode::eq2;
    BoundAuditor auditor;
    const AttentionObserver observer = [&](const AttentionProbe& p) { auditor(p); };
    GenerateOptions g;
    g.verifier_observer = &observer;
    const GenerationResult r = generate(draft, verifier, mapping, prompt, cfg, g);
    if (r.error) throw Error("bound audit generation failed: " + *r.error);
    return auditor.result();
}

// ---------------------------------------------------------------------------------------
// Utilities

inline std::size_t edit_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Mean edit distance between sparse-verified and dense-verified generations over `prompts`,
// one entry per p.
inline std::vector<double> degradation_curve(const Model& draft, const Model& verifier, const LayerMapping& mapping,
                                             std::span<const std::vector<TokenId>> prompts, SpecConfig cfg,
                                             std::span<const double> p_values) {
    if (prompts.empty()) throw Error("degradation_curve: no prompts");
    GenerateOptions dense_opts;
    dense_opts.policy = MaskPolicy::dense();
    std::vector<std::vector<TokenId>> reference;
    for (const auto& prompt : prompts) {
        reference.push_back(generate(draft, verifier, mapping, std::span<const TokenId>(prompt), cfg, dense_opts).tokens);
    }
    std::vector<double> curve;
    for (double p : p_values) {
        cfg.selection.p = p;
        double total = 0.0;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const auto out = generate(draft, verifier, mapping, std::span<const TokenId>(prompts[i]), cfg).tokens;
            total += static_cast<double>(edit_distance(out, reference[i]));
        }
        curve.push_back(total / static_cast<double>(prompts.size()));
    }
    return curve;
}

// Temperature sampling from a model with full attention. A corpus drawn this way makes the
// dense model the reference distribution, so any attention perturbation can only raise the
// expected NLL.
inline std::vector<TokenId> sample_corpus(const Model& model, std::size_t length, std::uint64_t seed,
                                          double temperature = 1.0, TokenId first = 0) {
    if (length < 1) throw Error("sample_corpus: length must be >= 1");
    if (length > model.config.max_seq) throw Error("sample_corpus: length exceeds max_seq");
    std::mt19937_64 rng(seed);
    std::vector<TokenId> out{first};
    KVCache cache(model.config);
    ForwardOptions quiet;
    quiet.capture_attention = false;
    while (out.size() < length) {
        const StepOutput step = forward_step(model, out.back(), cache, quiet);
        const double mx = *std::max_element(step.logits.begin(), step.logits.end());
        std::vector<double> probs(step.logits.size());
        double sum = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            probs[i] = std::exp((step.logits[i] - mx) / temperature);
            sum += probs[i];
        }
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * sum;
        double acc = 0.0;
        std::size_t pick = probs.size() - 1;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) {
                pick = i;
                break;
            }
        }
        out.push_back(static_cast<TokenId>(pick));
    }
    return out;
}

}  // namespace specattn
