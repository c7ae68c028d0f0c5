#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specattn/attention.hpp"
#include "specattn/trace.hpp"

namespace specattn {

struct SelectionConfig {
    double p = 0.95;
    std::size_t iterations = 10;
    std::size_t block_size = 1;
    std::size_t dense_prefix_layers = 2;
    // When set, the threshold search runs until the bracket is narrower than epsilon instead
    // of for a fixed number of iterations.
    std::optional<double> epsilon;

    void validate() const {
        if (!(p > 0.0 && p <= 1.0)) throw Error("selection p must be in (0, 1]");
        if (iterations < 1) throw Error("selection iterations must be >= 1");
        if (block_size < 1) throw Error("selection block_size must be >= 1");
        if (epsilon && !(*epsilon > 0.0)) throw Error("selection epsilon must be positive");
    }
};

inline void to_json(nlohmann::json& j, const SelectionConfig& c) {
    j = nlohmann::json{{"p", c.p},
                       {"iterations", c.iterations},
                       {"block_size", c.block_size},
                       {"dense_prefix_layers", c.dense_prefix_layers}};
    j["epsilon"] = c.epsilon ? nlohmann::json(*c.epsilon) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, SelectionConfig& c) {
    c = SelectionConfig{};
    c.p = j.value("p", c.p);
    c.iterations = j.value("iterations", c.iterations);
    c.block_size = j.value("block_size", c.block_size);
    c.dense_prefix_layers = j.value("dense_prefix_layers", c.dense_prefix_layers);
    if (j.contains("epsilon") && !j.at("epsilon").is_null()) c.epsilon = j.at("epsilon").get<double>();
}

// Strictly increasing absolute positions drawn from [0, universe).
struct TokenSet {
    std::vector<std::size_t> indices;
    std::size_t universe = 0;

    std::size_t size() const { return indices.size(); }
    bool contains(std::size_t i) const { return std::binary_search(indices.begin(), indices.end(), i); }

    bool valid() const {
        for (std::size_t k = 0; k < indices.size(); ++k) {
            if (indices[k] >= universe) return false;
            if (k > 0 && indices[k] <= indices[k - 1]) return false;
        }
        return true;
    }

    static TokenSet all(std::size_t n) {
        TokenSet s{std::vector<std::size_t>(n), n};
        std::iota(s.indices.begin(), s.indices.end(), std::size_t{0});
        return s;
    }

    MaskVector to_mask() const {
        MaskVector m(universe, false);
        for (std::size_t i : indices) m[i] = true;
        return m;
    }

    static TokenSet from_mask(const MaskVector& m) {
        TokenSet s{{}, m.size()};
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (m[i]) s.indices.push_back(i);
        }
        return s;
    }

    friend bool operator==(const TokenSet&, const TokenSet&) = default;
};

namespace detail {

inline void check_weights(std::span<const double> w) {
    if (w.empty()) throw Error("empty weights");
    for (double x : w) {
        if (!std::isfinite(x) || x < 0.0) throw Error("weights must be finite and non-negative");
    }
}

inline void check_p(double p) {
    if (!(p > 0.0 && p <= 1.0)) throw Error("p must be in (0, 1]");
}

inline double total_mass(std::span<const double> w) {
    double s = 0.0;
    for (double x : w) s += x;
    return s;
}

inline double mass_at_or_above(std::span<const double> w, double threshold) {
    double s = 0.0;
    for (double x : w) {
        if (x >= threshold) s += x;
    }
    return s;
}

inline TokenSet at_or_above(std::span<const double> w, double threshold) {
    TokenSet s{{}, w.size()};
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] >= threshold) s.indices.push_back(i);
    }
    return s;
}

}  // namespace detail

struct NucleusResult {
    TokenSet set;
    double threshold = 0.0;
};

// Sorting-free top-p: bisect a weight threshold on [0, max(w)]. The returned threshold is
// the lower bracket, whose mass never drops below p * sum(w), so the nucleus property holds
// exactly regardless of the iteration count.
inline NucleusResult nucleus_select_sortfree(std::span<const double> w, double p, std::size_t iterations = 10,
                                             std::optional<double> epsilon = std::nullopt) {
    detail::check_weights(w);
    detail::check_p(p);
    if (iterations < 1 && !epsilon) throw Error("iterations must be >= 1");
    const double target = p * detail::total_mass(w);
    double high = *std::max_element(w.begin(), w.end());
    double low = 0.0;

    auto step = [&] {
        const double mid = 0.5 * (high + low);
        if (detail::mass_at_or_above(w, mid) < target) {
            high = mid;
        } else {
            low = mid;
        }
    };
    if (epsilon) {
        // The bracket stops shrinking once it reaches adjacent doubles; cap the loop.
        for (std::size_t it = 0; high - low > *epsilon && it < 2048; ++it) step();
    } else {
        for (std::size_t it = 0; it < iterations; ++it) step();
    }
    return {detail::at_or_above(w, low), low};
}

inline NucleusResult nucleus_select_sortfree(std::span<const double> w, const SelectionConfig& cfg) {
    return nucleus_select_sortfree(w, cfg.p, cfg.iterations, cfg.epsilon);
}

// Sorting reference: minimal descending prefix reaching p * sum(w), closed under ties with
// its last weight.
inline TokenSet nucleus_select_oracle(std::span<const double> w, double p) {
    detail::check_weights(w);
    detail::check_p(p);
    const double target = p * detail::total_mass(w);
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    double cum = 0.0;
    double cut = w[order.back()];
    for (std::size_t i : order) {
        cum += w[i];
        if (cum >= target) {
            cut = w[i];
            break;
        }
    }
    return detail::at_or_above(w, cut);
}

// B largest weights, ties broken towards the lower index.
inline TokenSet topk_select(std::span<const double> w, std::size_t budget) {
    detail::check_weights(w);
    if (budget < 1 || budget > w.size()) {
        throw Error("top-k budget " + std::to_string(budget) + " out of range [1, " + std::to_string(w.size()) + "]");
    }
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    order.resize(budget);
    std::sort(order.begin(), order.end());
    return {order, w.size()};
}

// Attention-sink prefix plus a recent window, clipped to [0, L).
inline TokenSet streaming_select(std::size_t length, std::size_t n_sink, std::size_t n_recent) {
    if (n_sink + n_recent < 1) throw Error("streaming selection needs n_sink + n_recent >= 1");
    TokenSet s{{}, length};
    const std::size_t recent_start = n_recent >= length ? 0 : length - n_recent;
    for (std::size_t i = 0; i < length; ++i) {
        if (i < n_sink || i >= recent_start) s.indices.push_back(i);
    }
    return s;
}

// Sets may come from steps with different context lengths; indices are absolute positions.
inline TokenSet union_steps(std::span<const TokenSet> sets) {
    TokenSet out;
    for (const auto& s : sets) {
        out.universe = std::max(out.universe, s.universe);
        std::vector<std::size_t> merged;
        merged.reserve(out.indices.size() + s.indices.size());
        std::set_union(out.indices.begin(), out.indices.end(), s.indices.begin(), s.indices.end(),
                       std::back_inserter(merged));
        out.indices = std::move(merged);
    }
    return out;
}

inline TokenSet coarsen_to_blocks(const TokenSet& set, std::size_t block_size) {
    if (block_size < 1) throw Error("block_size must be >= 1");
    if (block_size == 1) return set;
    TokenSet out{{}, set.universe};
    std::size_t next = 0;  // first position not yet emitted
    for (std::size_t i : set.indices) {
        const std::size_t begin = std::max(next, (i / block_size) * block_size);
        const std::size_t end = std::min(set.universe, (i / block_size + 1) * block_size);
        for (std::size_t k = begin; k < end; ++k) out.indices.push_back(k);
        next = std::max(next, end);
    }
    return out;
}

inline TokenSet clip(const TokenSet& set, std::size_t universe) {
    TokenSet out{{}, universe};
    for (std::size_t i : set.indices) {
        if (i < universe) out.indices.push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------------------
// CSR masks

// Row r of a CSR mask lists the selected columns of that row; rows may describe different
// universes as long as every column is below n_cols.
struct CsrMask {
    std::vector<std::size_t> row_offsets{0};
    std::vector<std::size_t> col_indices;
    std::size_t n_cols = 0;

    std::size_t n_rows() const { return row_offsets.empty() ? 0 : row_offsets.size() - 1; }
    std::size_t row_nnz(std::size_t r) const { return row_offsets[r + 1] - row_offsets[r]; }
    std::span<const std::size_t> row(std::size_t r) const {
        return {col_indices.data() + row_offsets[r], row_nnz(r)};
    }

    void validate() const {
        if (row_offsets.empty() || row_offsets.front() != 0) throw Error("malformed CSR: row_offsets must start at 0");
        for (std::size_t r = 1; r < row_offsets.size(); ++r) {
            if (row_offsets[r] < row_offsets[r - 1]) throw Error("malformed CSR: row_offsets not monotone");
        }
        if (row_offsets.back() != col_indices.size()) throw Error("malformed CSR: last offset != column count");
        for (std::size_t r = 0; r + 1 < row_offsets.size(); ++r) {
            for (std::size_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k) {
                if (col_indices[k] >= n_cols) throw Error("malformed CSR: column out of range");
                if (k > row_offsets[r] && col_indices[k] <= col_indices[k - 1]) {
                    throw Error("malformed CSR: columns not strictly increasing");
                }
            }
        }
    }

    friend bool operator==(const CsrMask&, const CsrMask&) = default;
};

// n_cols is the longest row.
inline CsrMask to_csr(std::span<const MaskVector> rows) {
    CsrMask csr;
    for (const auto& row : rows) {
        csr.n_cols = std::max(csr.n_cols, row.size());
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (row[c]) csr.col_indices.push_back(c);
        }
        csr.row_offsets.push_back(csr.col_indices.size());
    }
    return csr;
}

// Every row comes back with length n_cols.
inline std::vector<MaskVector> from_csr(const CsrMask& csr) {
    csr.validate();
    std::vector<MaskVector> rows(csr.n_rows(), MaskVector(csr.n_cols, false));
    for (std::size_t r = 0; r < csr.n_rows(); ++r) {
        for (std::size_t c : csr.row(r)) rows[r][c] = true;
    }
    return rows;
}

// One row as a mask of the given length; columns must fit inside it.
inline MaskVector csr_row_mask(const CsrMask& csr, std::size_t r, std::size_t length) {
    if (r >= csr.n_rows()) throw Error("CSR row out of range");
    MaskVector m(length, false);
    for (std::size_t c : csr.row(r)) {
        if (c >= length) throw Error("CSR row has a column beyond the requested length");
        m[c] = true;
    }
    return m;
}

inline void to_json(nlohmann::json& j, const CsrMask& m) {
    j = nlohmann::json{{"row_offsets", m.row_offsets}, {"col_indices", m.col_indices}, {"n_cols", m.n_cols}};
}

inline void from_json(const nlohmann::json& j, CsrMask& m) {
    m.row_offsets = j.at("row_offsets").get<std::vector<std::size_t>>();
    m.col_indices = j.at("col_indices").get<std::vector<std::size_t>>();
    if (j.contains("n_cols")) {
        m.n_cols = j.at("n_cols").get<std::size_t>();
    } else {
        m.n_cols = m.col_indices.empty() ? 0 : *std::max_element(m.col_indices.begin(), m.col_indices.end()) + 1;
    }
    m.validate();
}

// Rows for a verification pass of n_rows queries starting at cache length `cache_len`:
// row r keeps `set` (over the pre-existing cache) plus the r positions appended earlier in
// the same pass. Each query's own position is handled by the attention kernel.
inline CsrMask verification_rows(const TokenSet& set, std::size_t cache_len, std::size_t n_rows) {
    if (n_rows < 1) throw Error("verification needs at least one row");
    const TokenSet base = clip(set, cache_len);
    CsrMask csr;
    csr.n_cols = cache_len + n_rows - 1;
    for (std::size_t r = 0; r < n_rows; ++r) {
        csr.col_indices.insert(csr.col_indices.end(), base.indices.begin(), base.indices.end());
        for (std::size_t k = 0; k < r; ++k) csr.col_indices.push_back(cache_len + k);
        csr.row_offsets.push_back(csr.col_indices.size());
    }
    return csr;
}

using TokenSelector = std::function<TokenSet(std::span<const double>)>;

// Generic per-layer mask construction from draft step traces: layers below
// dense_prefix_layers stay dense, other layers run `selector` on their mapped draft layer
// for every step, union the steps, coarsen to blocks and clip to the verifier cache.
inline std::vector<CsrMask> build_layer_masks_with(const AttnTrace& draft_steps, const LayerMapping& mapping,
                                                   std::size_t dense_prefix_layers, std::size_t block_size,
                                                   std::size_t verifier_layers, std::size_t cache_len,
                                                   std::size_t n_rows, const TokenSelector& selector) {
    if (mapping.verifier_layers() != verifier_layers) throw Error("mapping does not cover every verifier layer");
    if (draft_steps.n_positions() == 0) throw Error("draft traces are empty");
    std::vector<CsrMask> masks;
    masks.reserve(verifier_layers);
    for (std::size_t j = 0; j < verifier_layers; ++j) {
        if (j < dense_prefix_layers) {
            masks.push_back(verification_rows(TokenSet::all(cache_len), cache_len, n_rows));
            continue;
        }
        const std::size_t src = mapping(j);
        if (src >= draft_steps.n_layers()) throw Error("mapping refers to a draft layer missing from the trace");
        std::vector<TokenSet> per_step;
        for (const auto& row : draft_steps.layers[src]) per_step.push_back(selector(row));
        const TokenSet merged = coarsen_to_blocks(union_steps(per_step), block_size);
        masks.push_back(verification_rows(merged, cache_len, n_rows));
    }
    return masks;
}

inline std::vector<CsrMask> build_layer_masks(const AttnTrace& draft_steps, const LayerMapping& mapping,
                                              const SelectionConfig& cfg, std::size_t verifier_layers,
                                              std::size_t cache_len, std::size_t n_rows = 1) {
    cfg.validate();
    return build_layer_masks_with(draft_steps, mapping, cfg.dense_prefix_layers, cfg.block_size, verifier_layers,
                                  cache_len, n_rows, [&](std::span<const double> w) {
                                      return nucleus_select_sortfree(w, cfg).set;
                                  });
}

}  // namespace specattn
