#pragma once

// Independent reference checks for the selection and layer-mapping kernels, shared by the
// test suites and the `oracle-check` command.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "specattn/layer_map.hpp"
#include "specattn/select.hpp"

namespace specattn::oracle {

struct BruteForceMapping {
    std::vector<std::size_t> mapping;
    double score = -std::numeric_limits<double>::infinity();
};

// Enumerates all m^n maps from verifier layers to draft layers, keeping monotone ones.
inline BruteForceMapping best_monotone_mapping(const SimilarityMatrix& s) {
    const std::size_t m = s.draft_layers(), n = s.verifier_layers();
    BruteForceMapping best;
    std::vector<std::size_t> f(n, 0);
    while (true) {
        bool monotone = true;
        for (std::size_t j = 1; j < n && monotone; ++j) monotone = f[j - 1] <= f[j];
        if (monotone) {
            double score = 0.0;
            for (std::size_t j = 0; j < n; ++j) score += s(f[j], j);
            if (score > best.score) best = {f, score};
        }
        std::size_t j = 0;
        while (j < n && ++f[j] == m) f[j++] = 0;
        if (j == n) break;
    }
    return best;
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Mix of flat (normalized uniform) and peaked (softmax of scaled normals) distributions.
inline std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t length) {
    std::vector<double> w(length);
    if (rng() % 2 == 0) {
        double sum = 0.0;
        for (double& x : w) sum += (x = uniform01(rng) + 1e-3);
        for (double& x : w) x /= sum;
    } else {
        std::normal_distribution<double> normal(0.0, 1.0);
        const double scale = 0.5 + 5.5 * uniform01(rng);
        std::vector<double> logits(length);
        for (double& z : logits) z = scale * normal(rng);
        w = softmax(logits);
    }
    return w;
}

// A 60-step bisection on [0, max(w)] resolves thresholds to max(w) / 2^60, so it matches
// the sorting oracle whenever no weight sits within that resolution below the oracle's cut.
inline bool separated_at_cut(std::span<const double> w, double p) {
    const TokenSet want = nucleus_select_oracle(w, p);
    double cut = std::numeric_limits<double>::infinity();
    for (std::size_t i : want.indices) cut = std::min(cut, w[i]);
    const double res = *std::max_element(w.begin(), w.end()) * 0x1.0p-60;
    for (double x : w) {
        if (x < cut && x > cut - res) return false;
    }
    return true;
}

struct SuiteResult {
    std::size_t trials = 0;
    std::size_t failures = 0;
    std::string first_failure;

    bool ok() const { return trials > 0 && failures == 0; }
    void fail(const std::string& why) {
        if (failures++ == 0) first_failure = why;
    }
};

// Sort-free nucleus vs the tie-closed sorting oracle. 60 iterations must agree exactly on
// inputs separated at the cut; 10 iterations must keep at least p of the mass and contain the
// oracle set. `inject_fault` corrupts the sort-free result to exercise failure reporting.
inline SuiteResult nucleus_suite(std::size_t trials, std::uint64_t seed, std::size_t max_length = 4096,
                                 bool inject_fault = false) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    while (r.trials < trials) {
        const std::size_t len = 1 + rng() % max_length;
        const std::vector<double> w = random_distribution(rng, len);
        const double p = 0.05 + 0.949 * uniform01(rng);
        if (!separated_at_cut(w, p)) continue;
        ++r.trials;

        const TokenSet want = nucleus_select_oracle(w, p);
        TokenSet exact = nucleus_select_sortfree(w, p, 60).set;
        if (inject_fault && !exact.indices.empty()) exact.indices.pop_back();
        if (!(exact == want)) {
            r.fail("60-iteration mismatch at trial " + std::to_string(r.trials) + " (L=" + std::to_string(len) + ")");
            continue;
        }
        const NucleusResult coarse = nucleus_select_sortfree(w, p, 10);
        double total = 0.0, kept = 0.0;
        for (double x : w) total += x;
        for (std::size_t i : coarse.set.indices) kept += w[i];
        if (kept < p * total) {
            r.fail("10-iteration mass below target at trial " + std::to_string(r.trials));
            continue;
        }
        for (std::size_t i : want.indices) {
            if (!coarse.set.contains(i)) {
                r.fail("10-iteration set misses an oracle index at trial " + std::to_string(r.trials));
                break;
            }
        }
    }
    return r;
}

inline SimilarityMatrix random_similarity(std::mt19937_64& rng, std::size_t m, std::size_t n) {
    SimilarityMatrix s{Tensor2D(m, n)};
    for (double& x : s.scores.flat()) x = -3.0 * uniform01(rng);
    return s;
}

// monotonic_dtw vs exhaustive enumeration on random matrices up to 5 x 6.
inline SuiteResult dtw_suite(std::size_t trials, std::uint64_t seed, bool inject_fault = false) {
    SuiteResult r;
    std::mt19937_64 rng(seed);
    for (; r.trials < trials;) {
        const std::size_t m = 1 + rng() % 5, n = 1 + rng() % 6;
        const SimilarityMatrix s = random_similarity(rng, m, n);
        ++r.trials;
        const LayerMapping got = monotonic_dtw(s);
        const BruteForceMapping want = best_monotone_mapping(s);
        double score = got.total_score;
        if (inject_fault) score -= 1.0;
        if (!got.is_monotone()) {
            r.fail("non-monotone mapping at trial " + std::to_string(r.trials));
        } else if (std::abs(score - want.score) > 1e-9) {
            r.fail("suboptimal mapping at trial " + std::to_string(r.trials));
        }
    }
    return r;
}

}  // namespace specattn::oracle
