#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "specattn/model.hpp"
#include "specattn/trace.hpp"

namespace specattn {

// Negative KL divergence -D_KL(a_v || a_d) after additive epsilon smoothing of both
// distributions. Always <= 0, and exactly 0 for identical inputs.
inline double kl_similarity(std::span<const double> a_v, std::span<const double> a_d, double epsilon = 1e-10) {
    if (a_v.size() != a_d.size()) throw Error("kl_similarity: length mismatch");
    if (a_v.empty()) throw Error("kl_similarity: empty distributions");
    if (!(epsilon > 0.0)) throw Error("kl_similarity: epsilon must be positive");
    double sv = 0.0, sd = 0.0;
    for (std::size_t k = 0; k < a_v.size(); ++k) {
        sv += a_v[k] + epsilon;
        sd += a_d[k] + epsilon;
    }
    double kl = 0.0;
    for (std::size_t k = 0; k < a_v.size(); ++k) {
        const double pv = (a_v[k] + epsilon) / sv;
        const double pd = (a_d[k] + epsilon) / sd;
        kl += pv * (std::log(pv) - std::log(pd));
    }
    // Gibbs: KL >= 0; clamp away rounding noise on near-identical inputs.
    return -std::max(kl, 0.0);
}

// S[i, j] for draft layer i (rows) and verifier layer j (columns).
struct SimilarityMatrix {
    Tensor2D scores;

    std::size_t draft_layers() const { return scores.rows(); }
    std::size_t verifier_layers() const { return scores.cols(); }
    double operator()(std::size_t i, std::size_t j) const { return scores(i, j); }
};

// Mean over calibration positions of kl_similarity(A^v_j, A^d_i).
inline SimilarityMatrix build_similarity_matrix(const AttnTrace& draft, const AttnTrace& verifier,
                                                double epsilon = 1e-10) {
    if (draft.n_layers() == 0 || verifier.n_layers() == 0) throw Error("similarity needs non-empty traces");
    const std::size_t n_pos = draft.n_positions();
    if (n_pos == 0) throw Error("similarity needs at least one calibration position");
    auto check = [&](const AttnTrace& t) {
        for (const auto& layer : t.layers) {
            if (layer.size() != n_pos) throw Error("misaligned traces: position counts differ");
            for (std::size_t p = 0; p < n_pos; ++p) {
                if (layer[p].size() != draft.layers[0][p].size()) throw Error("misaligned traces: context lengths differ");
            }
        }
    };
    check(draft);
    check(verifier);

    SimilarityMatrix s{Tensor2D(draft.n_layers(), verifier.n_layers())};
    for (std::size_t i = 0; i < draft.n_layers(); ++i) {
        for (std::size_t j = 0; j < verifier.n_layers(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < n_pos; ++p) acc += kl_similarity(verifier.layers[j][p], draft.layers[i][p], epsilon);
            s.scores(i, j) = acc / static_cast<double>(n_pos);
        }
    }
    return s;
}

// Monotone alignment of verifier layers onto draft layers maximizing sum_j S[f(j), j].
// dp[i][j] is the least cost (cost = -S) of mapping verifier layers < j with verifier
// layer j-1 on draft layer i-1. The "skip" transition min_{k<=i} dp[k][j-1] is carried as
// a running column minimum. Ties prefer diagonal, then repeat, then skip (lowest k).
inline LayerMapping monotonic_dtw(const SimilarityMatrix& s) {
    const std::size_t m = s.draft_layers(), n = s.verifier_layers();
    if (m == 0 || n == 0) throw Error("monotonic_dtw: empty similarity matrix");
    if (!s.scores.all_finite()) throw Error("monotonic_dtw: non-finite similarity");

    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> dp(m + 1, std::vector<double>(n + 1, inf));
    std::vector<std::vector<std::size_t>> back(m + 1, std::vector<std::size_t>(n + 1, 0));
    dp[0][0] = 0.0;

    for (std::size_t j = 1; j <= n; ++j) {
        double skip_best = inf;  // min over k <= i-2 of dp[k][j-1]
        std::size_t skip_arg = 0;
        for (std::size_t i = 1; i <= m; ++i) {
            if (i >= 2 && dp[i - 2][j - 1] < skip_best) {
                skip_best = dp[i - 2][j - 1];
                skip_arg = i - 2;
            }
            const double cost = -s(i - 1, j - 1);
            double best = dp[i - 1][j - 1];
            std::size_t arg = i - 1;
            if (dp[i][j - 1] < best) {
                best = dp[i][j - 1];
                arg = i;
            }
            if (skip_best < best) {
                best = skip_best;
                arg = skip_arg;
            }
            dp[i][j] = best + cost;
            back[i][j] = arg;
        }
    }

    std::size_t end = 1;
    for (std::size_t i = 2; i <= m; ++i) {
        if (dp[i][n] < dp[end][n]) end = i;
    }
    LayerMapping mapping;
    mapping.verifier_to_draft.assign(n, 0);
    std::size_t i = end;
    for (std::size_t j = n; j >= 1; --j) {
        mapping.verifier_to_draft[j - 1] = i - 1;
        i = back[i][j];
    }
    for (std::size_t j = 0; j < n; ++j) mapping.total_score += s(mapping.verifier_to_draft[j], j);
    return mapping;
}

struct CalibrationConfig {
    // Calibration rows are the last-position attention at prefix lengths warmup+1, ...
    std::size_t warmup = 8;
    std::size_t stride = 1;
    // 0 means every eligible position (bounded by both models' max_seq).
    std::size_t max_positions = 0;
    double epsilon = 1e-10;
};

inline void to_json(nlohmann::json& j, const CalibrationConfig& c) {
    j = nlohmann::json{{"warmup", c.warmup}, {"stride", c.stride}, {"max_positions", c.max_positions}, {"epsilon", c.epsilon}};
}

inline void from_json(const nlohmann::json& j, CalibrationConfig& c) {
    c = CalibrationConfig{};
    c.warmup = j.value("warmup", c.warmup);
    c.stride = j.value("stride", c.stride);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.epsilon = j.value("epsilon", c.epsilon);
}

struct CalibrationResult {
    SimilarityMatrix similarity;
    LayerMapping mapping;
    std::size_t positions = 0;
};

// Runs both models over the corpus, captures head-averaged attention at the sampled
// positions and aligns the layers.
inline CalibrationResult calibrate(const Model& draft, const Model& verifier, std::span<const TokenId> corpus,
                                   const CalibrationConfig& cfg = {}) {
    if (cfg.stride < 1) throw Error("calibration stride must be >= 1");
    std::size_t len = std::min({corpus.size(), draft.config.max_seq, verifier.config.max_seq});
    if (len <= cfg.warmup) throw Error("corpus too short for calibration");
    if (cfg.max_positions > 0) len = std::min(len, cfg.warmup + cfg.max_positions * cfg.stride);

    auto trace_of = [&](const Model& model, ModelRole role) {
        AttnTrace trace = AttnTrace::with_layers(role, model.config.n_layers);
        KVCache cache(model.config);
        ForwardOptions opts;
        for (std::size_t t = 0; t < len; ++t) {
            opts.capture_attention = t >= cfg.warmup && (t - cfg.warmup) % cfg.stride == 0;
            StepOutput out = forward_step(model, corpus[t], cache, opts);
            if (opts.capture_attention) trace.append(out);
        }
        return trace;
    };
    const AttnTrace d = trace_of(draft, ModelRole::draft);
    const AttnTrace v = trace_of(verifier, ModelRole::verifier);

    CalibrationResult r;
    r.similarity = build_similarity_matrix(d, v, cfg.epsilon);
    r.mapping = monotonic_dtw(r.similarity);
    r.positions = d.n_positions();
    return r;
}

inline nlohmann::json mapping_to_json(const LayerMapping& m, std::size_t draft_layers, const std::string& fingerprint) {
    return nlohmann::json{{"verifier_to_draft", m.verifier_to_draft},
                          {"total_score", m.total_score},
                          {"draft_layers", draft_layers},
                          {"verifier_layers", m.verifier_layers()},
                          {"fingerprint", fingerprint}};
}

// Validates the mapping against the model depths it is used with.
inline LayerMapping mapping_from_json(const nlohmann::json& j, std::size_t draft_layers, std::size_t verifier_layers) {
    LayerMapping m;
    try {
        m.verifier_to_draft = j.at("verifier_to_draft").get<std::vector<std::size_t>>();
        m.total_score = j.value("total_score", 0.0);
        if (j.contains("draft_layers") && j.at("draft_layers").get<std::size_t>() != draft_layers) {
            throw Error("mapping was calibrated for a different draft depth");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("mapping file invalid: ") + e.what());
    }
    m.validate(draft_layers, verifier_layers);
    return m;
}

inline std::string similarity_to_csv(const SimilarityMatrix& s) {
    std::string out = "draft_layer";
    for (std::size_t j = 0; j < s.verifier_layers(); ++j) out += fmt::format(",v{}", j);
    out += '\n';
    for (std::size_t i = 0; i < s.draft_layers(); ++i) {
        out += fmt::format("{}", i);
        for (std::size_t j = 0; j < s.verifier_layers(); ++j) out += fmt::format(",{:.17g}", s(i, j));
        out += '\n';
    }
    return out;
}

}  // namespace specattn
