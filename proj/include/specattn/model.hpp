#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "specattn/attention.hpp"
#include "specattn/tensor.hpp"

namespace specattn {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 16;
    std::size_t d_head = 8;
    std::size_t vocab = 256;
    std::size_t max_seq = 512;
    std::uint64_t seed = 0;
    // 0 selects 4 * d_model.
    std::size_t d_ff = 0;
    double rope_theta = 10000.0;
    // Init-time multipliers: qk_gain sharpens attention, logit_gain sharpens next-token
    // distributions. Both only scale the uniform init range.
    double qk_gain = 1.0;
    double logit_gain = 1.0;

    std::size_t ffn_dim() const { return d_ff == 0 ? 4 * d_model : d_ff; }

    void validate() const {
        if (n_layers < 1) throw Error("invalid config: n_layers must be >= 1");
        if (vocab < 2) throw Error("invalid config: vocab must be >= 2");
        if (n_heads < 1 || d_head < 1) throw Error("invalid config: n_heads and d_head must be >= 1");
        if (d_model != n_heads * d_head) throw Error("invalid config: d_model != n_heads * d_head");
        if (d_head % 2 != 0) throw Error("invalid config: d_head must be even for rotary embedding");
        if (max_seq < 1) throw Error("invalid config: max_seq must be >= 1");
        if (!(rope_theta > 0.0) || !(qk_gain > 0.0) || !(logit_gain > 0.0)) {
            throw Error("invalid config: rope_theta, qk_gain and logit_gain must be positive");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
                       {"d_head", c.d_head},     {"vocab", c.vocab},       {"max_seq", c.max_seq},
                       {"seed", c.seed},         {"d_ff", c.ffn_dim()},    {"rope_theta", c.rope_theta},
                       {"qk_gain", c.qk_gain},   {"logit_gain", c.logit_gain}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_head = j.contains("d_head") ? j.at("d_head").get<std::size_t>()
                                    : (c.n_heads > 0 ? c.d_model / c.n_heads : 0);
    c.vocab = j.value("vocab", c.vocab);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.seed = j.value("seed", c.seed);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.qk_gain = j.value("qk_gain", c.qk_gain);
    c.logit_gain = j.value("logit_gain", c.logit_gain);
    if (c.d_ff == 4 * c.d_model) c.d_ff = 0;
}

struct LayerWeights {
    Tensor2D attn_norm;  // 1 x d_model
    Tensor2D wq, wk, wv, wo;  // d_model x d_model
    Tensor2D ffn_norm;  // 1 x d_model
    Tensor2D w1;  // d_model x d_ff
    Tensor2D w2;  // d_ff x d_model
};

struct Model {
    ModelConfig config;
    Tensor2D embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
    Tensor2D final_norm;  // 1 x d_model
    Tensor2D lm_head;  // d_model x vocab

    // Visits every tensor in manifest order. The order and names define the weight file.
    template <typename Self, typename Fn>
    static void visit(Self& self, Fn&& fn) {
        fn(std::string("tok_embedding"), self.embedding);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& L = self.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            fn(p + "attn_norm", L.attn_norm);
            fn(p + "wq", L.wq);
            fn(p + "wk", L.wk);
            fn(p + "wv", L.wv);
            fn(p + "wo", L.wo);
            fn(p + "ffn_norm", L.ffn_norm);
            fn(p + "w1", L.w1);
            fn(p + "w2", L.w2);
        }
        fn(std::string("final_norm"), self.final_norm);
        fn(std::string("lm_head"), self.lm_head);
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) { visit(*this, fn); }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const { visit(*this, fn); }
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Portable uniform draw in [-a, a); std::uniform_real_distribution is not bit-stable
// across standard libraries.
inline void fill_uniform(Tensor2D& t, std::uint64_t stream_seed, double a) {
    std::mt19937_64 rng(stream_seed);
    for (double& x : t.flat()) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        x = (2.0 * u - 1.0) * a;
    }
}

inline Tensor2D ones_row(std::size_t n) { return Tensor2D(1, n, 1.0); }

}  // namespace detail

// Each tensor draws from its own stream keyed by (seed, tensor name), so a model with fewer
// layers and the same seed is exactly a layer-truncation of a deeper one.
inline Model init_model(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    const std::size_t d = config.d_model;
    const std::size_t ff = config.ffn_dim();
    m.embedding = Tensor2D(config.vocab, d);
    m.layers.resize(config.n_layers);
    for (auto& L : m.layers) {
        L.attn_norm = detail::ones_row(d);
        L.wq = Tensor2D(d, d);
        L.wk = Tensor2D(d, d);
        L.wv = Tensor2D(d, d);
        L.wo = Tensor2D(d, d);
        L.ffn_norm = detail::ones_row(d);
        L.w1 = Tensor2D(d, ff);
        L.w2 = Tensor2D(ff, d);
    }
    m.final_norm = detail::ones_row(d);
    m.lm_head = Tensor2D(d, config.vocab);

    const double proj = std::sqrt(3.0 / static_cast<double>(d));
    m.for_each_tensor([&](const std::string& name, Tensor2D& t) {
        if (name.ends_with("norm")) return;
        const std::uint64_t stream = detail::splitmix64(config.seed ^ detail::fnv1a(name));
        double a = std::sqrt(3.0 / static_cast<double>(t.rows()));
        if (name == "tok_embedding") {
            a = 1.0;
        } else if (name.ends_with(".wq") || name.ends_with(".wk")) {
            a = config.qk_gain * proj;
        } else if (name.ends_with(".wo") || name.ends_with(".w2")) {
            a *= 0.5;
        } else if (name == "lm_head") {
            a = config.logit_gain * proj;
        }
        detail::fill_uniform(t, stream, a);
    });
    return m;
}

inline std::uint64_t weight_checksum(const Model& m) {
    std::uint64_t h = 1469598103934665603ULL;
    m.for_each_tensor([&](const std::string&, const Tensor2D& t) {
        const auto vals = t.flat();
        h = detail::fnv1a({reinterpret_cast<const char*>(vals.data()), vals.size() * sizeof(double)}, h);
    });
    return h;
}

// Builds a shallower model from a subset of another model's layers, keeping its
// embedding, final norm and output head.
inline Model derive_draft(const Model& source, std::span<const std::size_t> keep_layers) {
    if (keep_layers.empty()) throw Error("derive_draft needs at least one layer");
    Model m;
    m.config = source.config;
    m.config.n_layers = keep_layers.size();
    m.embedding = source.embedding;
    for (std::size_t l : keep_layers) {
        if (l >= source.layers.size()) throw Error("derive_draft layer index out of range");
        m.layers.push_back(source.layers[l]);
    }
    m.final_norm = source.final_norm;
    m.lm_head = source.lm_head;
    return m;
}

// Per-layer, per-head append-only key/value history. All layers share one length.
class KVCache {
public:
    KVCache() = default;
    explicit KVCache(const ModelConfig& c)
        : n_layers_(c.n_layers), n_heads_(c.n_heads), d_head_(c.d_head), max_seq_(c.max_seq),
          keys_(c.n_layers * c.n_heads), values_(c.n_layers * c.n_heads) {}

    std::size_t length() const { return length_; }
    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t d_head() const { return d_head_; }
    std::size_t max_seq() const { return max_seq_; }

    // Views include rows appended by an in-flight step.
    MatrixView keys(std::size_t layer, std::size_t head) const {
        const auto& k = keys_[layer * n_heads_ + head];
        return {k.data(), k.size() / d_head_, d_head_};
    }
    MatrixView values(std::size_t layer, std::size_t head) const {
        const auto& v = values_[layer * n_heads_ + head];
        return {v.data(), v.size() / d_head_, d_head_};
    }

    void rollback(std::size_t new_length) {
        if (new_length > length_) {
            throw Error("rollback to " + std::to_string(new_length) + " exceeds cache length " +
                        std::to_string(length_));
        }
        for (auto& k : keys_) k.resize(new_length * d_head_);
        for (auto& v : values_) v.resize(new_length * d_head_);
        length_ = new_length;
    }

    void clear() { rollback(0); }

private:
    friend struct CacheWriter;

    std::size_t n_layers_ = 0, n_heads_ = 0, d_head_ = 0, max_seq_ = 0;
    std::size_t length_ = 0;
    std::vector<std::vector<double>> keys_, values_;
};

// Internal write access used by forward_step.
struct CacheWriter {
    static void push(KVCache& c, std::size_t layer, std::size_t head, std::span<const double> k,
                     std::span<const double> v) {
        auto& kk = c.keys_[layer * c.n_heads_ + head];
        auto& vv = c.values_[layer * c.n_heads_ + head];
        kk.insert(kk.end(), k.begin(), k.end());
        vv.insert(vv.end(), v.begin(), v.end());
    }
    static void commit(KVCache& c) { ++c.length_; }
};

inline void rollback(KVCache& cache, std::size_t new_length) { cache.rollback(new_length); }

// Optional per-layer masks over the cached positions (length == cache length before the
// step). std::nullopt (or an empty vector of masks) means dense attention for that layer.
using LayerMasks = std::vector<std::optional<MaskVector>>;

// Everything one head saw during one step, exposed for audits.
struct AttentionProbe {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t position = 0;
    std::span<const double> query;
    MatrixView keys;    // position + 1 rows
    MatrixView values;  // position + 1 rows
    const MaskVector* mask = nullptr;  // effective mask of length position + 1, or nullptr
    AttentionMode mode = AttentionMode::renormalized;
    std::span<const double> output;
};

using AttentionObserver = std::function<void(const AttentionProbe&)>;

struct ForwardOptions {
    const LayerMasks* masks = nullptr;
    AttentionMode mode = AttentionMode::renormalized;
    bool capture_attention = true;
    bool capture_per_head = false;
    const AttentionObserver* observer = nullptr;
};

struct StepOutput {
    Vector logits;
    // Head-averaged weights per layer, length == cache length after the step. Under eq2
    // masking these are the unmasked softmax weights.
    std::vector<AttnWeights> attentions;
    std::vector<std::vector<AttnWeights>> per_head_attentions;  // [layer][head], if requested
};

namespace detail {

inline void rms_norm(std::span<const double> x, const Tensor2D& gain, std::span<double> out) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    const auto g = gain.row(0);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * g[i];
}

inline void apply_rope(std::span<double> v, std::size_t pos, double theta) {
    const std::size_t d = v.size();
    for (std::size_t i = 0; i + 1 < d; i += 2) {
        const double freq = std::pow(theta, -static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = v[i], b = v[i + 1];
        v[i] = a * c - b * s;
        v[i + 1] = a * s + b * c;
    }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

inline std::size_t argmax(std::span<const double> x) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i] > x[best]) best = i;
    }
    return best;
}

// Runs one token through the model, appending its keys/values to `cache`. The new position
// can always attend to itself regardless of the layer mask.
inline StepOutput forward_step(const Model& model, TokenId token, KVCache& cache,
                               const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = model.config;
    if (token >= cfg.vocab) throw Error("token " + std::to_string(token) + " out of vocabulary");
    const std::size_t pos = cache.length();
    if (pos >= cfg.max_seq) throw Error("context overflow");
    if (cache.n_layers() != cfg.n_layers || cache.n_heads() != cfg.n_heads || cache.d_head() != cfg.d_head) {
        throw Error("cache shape does not match model");
    }
    const bool has_masks = opts.masks != nullptr && !opts.masks->empty();
    if (has_masks) {
        if (opts.masks->size() != cfg.n_layers) throw Error("mask count does not match layer count");
        for (const auto& m : *opts.masks) {
            if (m && m->size() != pos) {
                throw Error("mask length mismatch: got " + std::to_string(m->size()) + ", cache length " +
                            std::to_string(pos));
            }
        }
    }

    const std::size_t d = cfg.d_model, dh = cfg.d_head, ff = cfg.ffn_dim();
    StepOutput result;
    if (opts.capture_attention) result.attentions.resize(cfg.n_layers);
    if (opts.capture_per_head) result.per_head_attentions.resize(cfg.n_layers);

    Vector x(model.embedding.row(token).begin(), model.embedding.row(token).end());
    Vector h(d), q(d), k(d), v(d), att(d), proj(d), hidden(ff);
    AttnWeights w;
    MaskVector effective;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& L = model.layers[l];
        detail::rms_norm(x, L.attn_norm, h);
        vec_mat(h, L.wq, q);
        vec_mat(h, L.wk, k);
        vec_mat(h, L.wv, v);

        const MaskVector* mask = nullptr;
        if (has_masks && (*opts.masks)[l]) {
            effective = *(*opts.masks)[l];
            effective.push_back(true);
            mask = &effective;
        }
        if (opts.capture_attention) result.attentions[l].assign(pos + 1, 0.0);
        if (opts.capture_per_head) result.per_head_attentions[l].resize(cfg.n_heads);

        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            std::span<double> qh(q.data() + hd * dh, dh), kh(k.data() + hd * dh, dh);
            std::span<const double> vh(v.data() + hd * dh, dh);
            detail::apply_rope(qh, pos, cfg.rope_theta);
            detail::apply_rope(kh, pos, cfg.rope_theta);
            CacheWriter::push(cache, l, hd, kh, vh);
            std::span<double> out(att.data() + hd * dh, dh);
            detail::attend(qh, cache.keys(l, hd), cache.values(l, hd), mask, opts.mode, out, w);
            if (opts.observer != nullptr) {
                (*opts.observer)(AttentionProbe{l, hd, pos, qh, cache.keys(l, hd), cache.values(l, hd), mask,
                                                opts.mode, out});
            }
            if (opts.capture_attention) {
                auto& avg = result.attentions[l];
                for (std::size_t i = 0; i <= pos; ++i) avg[i] += w[i];
            }
            if (opts.capture_per_head) result.per_head_attentions[l][hd] = w;
        }
        if (opts.capture_attention) {
            for (double& a : result.attentions[l]) a /= static_cast<double>(cfg.n_heads);
        }

        vec_mat(att, L.wo, proj);
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

        detail::rms_norm(x, L.ffn_norm, h);
        vec_mat(h, L.w1, hidden);
        for (double& a : hidden) a = detail::silu(a);
        vec_mat(hidden, L.w2, proj);
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    }
    CacheWriter::commit(cache);

    detail::rms_norm(x, model.final_norm, h);
    result.logits.resize(cfg.vocab);
    vec_mat(h, model.lm_head, result.logits);
    return result;
}

inline std::vector<StepOutput> prefill(const Model& model, std::span<const TokenId> tokens, KVCache& cache,
                                       const ForwardOptions& opts = {}) {
    if (tokens.empty()) throw Error("prefill needs at least one token");
    std::vector<StepOutput> outs;
    outs.reserve(tokens.size());
    for (TokenId t : tokens) outs.push_back(forward_step(model, t, cache, opts));
    return outs;
}

// Same as prefill but keeps only the final step's output.
inline StepOutput prefill_last(const Model& model, std::span<const TokenId> tokens, KVCache& cache,
                               ForwardOptions opts = {}) {
    if (tokens.empty()) throw Error("prefill needs at least one token");
    const bool capture = opts.capture_attention;
    opts.capture_attention = false;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) forward_step(model, tokens[i], cache, opts);
    opts.capture_attention = capture;
    return forward_step(model, tokens.back(), cache, opts);
}

inline std::vector<TokenId> bytes_to_tokens(std::string_view bytes) {
    std::vector<TokenId> t;
    t.reserve(bytes.size());
    for (unsigned char c : bytes) t.push_back(c);
    return t;
}

inline std::string tokens_to_bytes(std::span<const TokenId> tokens) {
    std::string s;
    s.reserve(tokens.size());
    for (TokenId t : tokens) s.push_back(static_cast<char>(t & 0xFF));
    return s;
}

}  // namespace specattn
