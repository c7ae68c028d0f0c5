#include <gtest/gtest.h>

#include <random>

#include "reference_model.hpp"
#include "specattn/layer_map.hpp"
#include "specattn/oracles.hpp"

using namespace specattn;
using specattn::testing::tiny_config;

TEST(KlSimilarity, IdenticalIsZero) {
    const std::vector<double> a{0.2, 0.3, 0.5};
    EXPECT_EQ(kl_similarity(a, a), 0.0);
}

TEST(KlSimilarity, FrozenValues) {
    EXPECT_NEAR(kl_similarity(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}), -0.6931471781573602, 1e-12);
    EXPECT_NEAR(kl_similarity(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}), -std::log(2.0), 1e-6);
    EXPECT_NEAR(kl_similarity(std::vector<double>{0.8, 0.2}, std::vector<double>{0.9, 0.1}), -0.04440300758688234,
                1e-8);
}

TEST(KlSimilarity, NonPositiveAndEpsilonHandlesZeros) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        auto a = oracle::random_distribution(rng, 1 + rng() % 50), b = oracle::random_distribution(rng, a.size());
        a[rng() % a.size()] = 0.0;
        const double s = kl_similarity(a, b);
        EXPECT_LE(s, 0.0);
        EXPECT_TRUE(std::isfinite(s));
    }
}

TEST(KlSimilarity, Rejects) {
    EXPECT_THROW(kl_similarity(std::vector<double>{1}, std::vector<double>{0.5, 0.5}), Error);
    EXPECT_THROW(kl_similarity(std::vector<double>{}, std::vector<double>{}), Error);
    EXPECT_THROW(kl_similarity(std::vector<double>{1}, std::vector<double>{1}, 0.0), Error);
}

TEST(SimilarityMatrix, TwoByTwoFrozen) {
    AttnTrace d = AttnTrace::with_layers(ModelRole::draft, 2), v = AttnTrace::with_layers(ModelRole::verifier, 2);
    d.layers[0] = {{0.9, 0.1}};
    d.layers[1] = {{0.3, 0.7}};
    v.layers[0] = {{0.8, 0.2}};
    v.layers[1] = {{0.2, 0.8}};
    const auto s = build_similarity_matrix(d, v);
    EXPECT_NEAR(s(0, 0), -0.04440300754664932, 1e-12);
    EXPECT_NEAR(s(0, 1), -1.362737753151381, 1e-12);
    EXPECT_NEAR(s(1, 0), -0.534110808481054, 1e-12);
    EXPECT_NEAR(s(1, 1), -0.02573209246469317, 1e-12);
    // Unsmoothed closed forms.
    EXPECT_NEAR(s(0, 0), -0.04440300758688234, 1e-8);
    EXPECT_NEAR(s(1, 1), -0.025732092477985358, 1e-8);
    EXPECT_EQ(monotonic_dtw(s).verifier_to_draft, (std::vector<std::size_t>{0, 1}));
}

TEST(SimilarityMatrix, AveragesPositions) {
    AttnTrace d = AttnTrace::with_layers(ModelRole::draft, 1), v = AttnTrace::with_layers(ModelRole::verifier, 1);
    d.layers[0] = {{0.9, 0.1}, {0.5, 0.5}};
    v.layers[0] = {{0.8, 0.2}, {0.5, 0.5}};
    EXPECT_NEAR(build_similarity_matrix(d, v)(0, 0), -0.04440300754664932 / 2, 1e-12);
}

TEST(SimilarityMatrix, RejectsMisaligned) {
    AttnTrace d = AttnTrace::with_layers(ModelRole::draft, 1), v = AttnTrace::with_layers(ModelRole::verifier, 1);
    d.layers[0] = {{0.9, 0.1}};
    v.layers[0] = {{0.8, 0.1, 0.1}};
    EXPECT_THROW(build_similarity_matrix(d, v), Error);
    v.layers[0] = {{0.8, 0.2}, {0.5, 0.5}};
    EXPECT_THROW(build_similarity_matrix(d, v), Error);
    EXPECT_THROW(build_similarity_matrix(AttnTrace{}, v), Error);
}

TEST(MonotonicDtw, HandMatrix) {
    // Candidates: (0,0,0) -6, (0,0,1) -1, (0,1,1) -2, (1,1,1) -5.
    const SimilarityMatrix s{Tensor2D(2, 3, std::vector<double>{0, -1, -5, -3, -2, 0})};
    const auto m = monotonic_dtw(s);
    EXPECT_EQ(m.verifier_to_draft, (std::vector<std::size_t>{0, 0, 1}));
    EXPECT_DOUBLE_EQ(m.total_score, -1.0);
}

TEST(MonotonicDtw, SkipsDraftLayers) {
    // The best map jumps from draft layer 0 straight to 3.
    Tensor2D t(4, 2, -10.0);
    t(0, 0) = 0;
    t(3, 1) = 0;
    const auto m = monotonic_dtw(SimilarityMatrix{t});
    EXPECT_EQ(m.verifier_to_draft, (std::vector<std::size_t>{0, 3}));
}

TEST(MonotonicDtw, MatchesEnumerationFourBySix) {
    std::mt19937_64 rng(46);
    for (int t = 0; t < 50; ++t) {
        const auto s = oracle::random_similarity(rng, 4, 6);
        const auto got = monotonic_dtw(s);
        const auto want = oracle::best_monotone_mapping(s);
        EXPECT_TRUE(got.is_monotone());
        EXPECT_NEAR(got.total_score, want.score, 1e-9);
        EXPECT_EQ(got.verifier_to_draft, want.mapping);
    }
}

TEST(MonotonicDtw, TiesPreferEarlierLayers) {
    // Every mapping scores 0; the lowest endpoint wins and the diagonal is preferred on the way back.
    const SimilarityMatrix s{Tensor2D(3, 3, 0.0)};
    EXPECT_EQ(monotonic_dtw(s).verifier_to_draft, (std::vector<std::size_t>{0, 0, 0}));
    Tensor2D t(3, 3, 0.0);
    t(2, 2) = 1.0;
    EXPECT_EQ(monotonic_dtw(SimilarityMatrix{t}).verifier_to_draft, (std::vector<std::size_t>{0, 1, 2}));
    const SimilarityMatrix one{Tensor2D(3, 1, -1.0)};
    EXPECT_EQ(monotonic_dtw(one).verifier_to_draft, (std::vector<std::size_t>{0}));
}

TEST(MonotonicDtw, SuiteAndFault) {
    EXPECT_TRUE(oracle::dtw_suite(200, 3).ok());
    EXPECT_FALSE(oracle::dtw_suite(5, 3, true).ok());
}

TEST(MonotonicDtw, Rejects) {
    EXPECT_THROW(monotonic_dtw(SimilarityMatrix{Tensor2D(0, 0)}), Error);
    EXPECT_THROW(monotonic_dtw(SimilarityMatrix{Tensor2D(1, 1, NAN)}), Error);
}

TEST(Calibrate, SelfCalibrationIsIdentity) {
    const auto m = init_model(tiny_config(4, 3));
    std::vector<TokenId> corpus;
    for (int i = 0; i < 48; ++i) corpus.push_back(static_cast<TokenId>((i * 37 + 11) % 256));
    const auto r = calibrate(m, m, corpus);
    EXPECT_EQ(r.mapping.verifier_to_draft, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_EQ(r.mapping.total_score, 0.0);
    EXPECT_EQ(r.positions, 40u);
}

TEST(Calibrate, DeterministicAndMonotone) {
    const auto v = init_model(tiny_config(6, 3));
    const std::vector<std::size_t> keep{0, 2, 4};
    const auto d = derive_draft(v, keep);
    std::vector<TokenId> corpus;
    for (int i = 0; i < 64; ++i) corpus.push_back(static_cast<TokenId>((i * 91 + 5) % 256));
    CalibrationConfig cfg;
    cfg.stride = 3;
    const auto a = calibrate(d, v, corpus, cfg), b = calibrate(d, v, corpus, cfg);
    EXPECT_EQ(a.mapping, b.mapping);
    EXPECT_EQ(similarity_to_csv(a.similarity), similarity_to_csv(b.similarity));
    EXPECT_NO_THROW(a.mapping.validate(3, 6));
    // Shared layers align exactly with their source.
    EXPECT_EQ(a.mapping(0), 0u);
    EXPECT_EQ(a.mapping(2), 1u);
    EXPECT_EQ(a.mapping(4), 2u);
}

TEST(Calibrate, ShortCorpus) {
    const auto m = init_model(tiny_config(2, 3));
    const std::vector<TokenId> corpus(8, 1);
    try {
        calibrate(m, m, corpus);
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "corpus too short for calibration");
    }
}

TEST(MappingJson, RoundTripAndValidation) {
    const LayerMapping m{{0, 0, 1, 2}, -1.5};
    const auto j = mapping_to_json(m, 3, "abc");
    EXPECT_EQ(mapping_from_json(j, 3, 4), m);
    EXPECT_THROW(mapping_from_json(j, 3, 5), Error);
    EXPECT_THROW(mapping_from_json(j, 2, 4), Error);
    auto bad = j;
    bad["verifier_to_draft"] = {0, 2, 1, 2};
    EXPECT_THROW(mapping_from_json(bad, 3, 4), Error);
    EXPECT_THROW(mapping_from_json(nlohmann::json::object(), 3, 4), Error);
}

TEST(SimilarityCsv, Layout) {
    const SimilarityMatrix s{Tensor2D(1, 2, std::vector<double>{-0.5, 0})};
    EXPECT_EQ(similarity_to_csv(s), "draft_layer,v0,v1\n0,-0.5,0\n");
}
