#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "reference_model.hpp"
#include "specattn/model.hpp"
#include "specattn/weights_io.hpp"

using namespace specattn;
using specattn::testing::reference_logits;
using specattn::testing::tiny_config;

namespace {

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab = 256) {
    std::vector<TokenId> t(n);
    for (auto& x : t) x = static_cast<TokenId>(rng() % vocab);
    return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("specattn_test_" + std::to_string(::getpid()) + "_" + name);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

// Rewrites the JSON header of a weight file, keeping the payload.
void patch_header(const std::filesystem::path& p, const std::function<void(nlohmann::json&)>& edit) {
    const std::string bytes = read_file(p);
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data(), sizeof len);
    auto header = nlohmann::json::parse(bytes.substr(8, len));
    edit(header);
    const std::string h = header.dump();
    std::uint64_t new_len = h.size();
    std::string out(reinterpret_cast<const char*>(&new_len), 8);
    write_file(p, out + h + bytes.substr(8 + len));
}

}  // namespace

TEST(ModelConfig, ValidateRejects) {
    auto c = tiny_config();
    c.d_model = 15;
    EXPECT_THROW(c.validate(), Error);
    c = tiny_config();
    c.d_head = 3;
    c.n_heads = 1;
    c.d_model = 3;
    EXPECT_THROW(c.validate(), Error);
    c = tiny_config();
    c.n_layers = 0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(ModelConfig, JsonRoundTrip) {
    auto c = tiny_config(3, 99);
    c.rope_theta = 500.0;
    const nlohmann::json j = c;
    EXPECT_EQ(j.at("d_ff"), 64);
    EXPECT_EQ(j.get<ModelConfig>(), c);
    auto wide = c;
    wide.d_ff = 100;
    EXPECT_EQ(nlohmann::json(wide).get<ModelConfig>(), wide);
}

TEST(Model, InitIsDeterministicAndSeedSensitive) {
    const auto a = init_model(tiny_config(2, 1)), b = init_model(tiny_config(2, 1)), c = init_model(tiny_config(2, 2));
    EXPECT_EQ(weight_checksum(a), weight_checksum(b));
    EXPECT_NE(weight_checksum(a), weight_checksum(c));
    bool finite = true;
    a.for_each_tensor([&](const std::string&, const Tensor2D& t) { finite = finite && t.all_finite(); });
    EXPECT_TRUE(finite);
}

TEST(Model, ShallowModelWithSameSeedIsTruncation) {
    const auto deep = init_model(tiny_config(4, 5)), shallow = init_model(tiny_config(2, 5));
    const std::vector<std::size_t> keep{0, 1};
    EXPECT_EQ(weight_checksum(shallow), weight_checksum(derive_draft(deep, keep)));
}

TEST(Model, IncrementalMatchesFullRecompute) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const auto m = init_model(tiny_config(2, 100 + trial));
        const auto seq = random_tokens(rng, 5 + rng() % 40);
        const auto ref = reference_logits(m, seq);
        KVCache cache(m.config);
        for (std::size_t t = 0; t < seq.size(); ++t) {
            const auto out = forward_step(m, seq[t], cache);
            EXPECT_LT(max_abs_diff(out.logits, ref[t]), 1e-8) << "trial " << trial << " position " << t;
        }
        EXPECT_EQ(cache.length(), seq.size());
    }
}

TEST(Model, PrefillSixteenTokens) {
    std::mt19937_64 rng(12);
    const auto m = init_model(tiny_config(3, 4));
    const auto prompt = random_tokens(rng, 16);
    const auto ref = reference_logits(m, prompt);
    KVCache a(m.config), b(m.config);
    const auto outs = prefill(m, prompt, a);
    ASSERT_EQ(outs.size(), 16u);
    for (std::size_t t = 0; t < 16; ++t) EXPECT_LT(max_abs_diff(outs[t].logits, ref[t]), 1e-8);
    const auto last = prefill_last(m, prompt, b);
    EXPECT_EQ(last.logits, outs.back().logits);
    EXPECT_EQ(a.length(), 16u);
    EXPECT_EQ(b.length(), 16u);
}

TEST(Model, AttentionCaptureIsNormalized) {
    const auto m = init_model(tiny_config(2, 3));
    KVCache cache(m.config);
    for (TokenId t : {1u, 2u, 3u, 4u}) {
        const auto out = forward_step(m, t, cache);
        ASSERT_EQ(out.attentions.size(), 2u);
        for (const auto& w : out.attentions) {
            ASSERT_EQ(w.size(), cache.length());
            double s = 0;
            for (double x : w) s += x;
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Model, MaskedStepMatchesMaskedReference) {
    std::mt19937_64 rng(13);
    const auto m = init_model(tiny_config(2, 8));
    const auto seq = random_tokens(rng, 12);
    // Layer 0 keeps only even positions, layer 1 stays dense.
    auto allowed = [](std::size_t layer, std::size_t, std::size_t key) { return layer == 1 || key % 2 == 0; };
    const auto ref = reference_logits(m, seq, allowed);
    KVCache cache(m.config);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        MaskVector even(t);
        for (std::size_t k = 0; k < t; ++k) even[k] = k % 2 == 0;
        const LayerMasks masks{even, std::nullopt};
        ForwardOptions opts;
        opts.masks = &masks;
        const auto out = forward_step(m, seq[t], cache, opts);
        EXPECT_LT(max_abs_diff(out.logits, ref[t]), 1e-8) << t;
    }
}

TEST(Model, FullMaskBitIdentical) {
    const auto m = init_model(tiny_config(2, 9));
    KVCache a(m.config), b(m.config);
    for (TokenId t : {5u, 6u, 7u, 8u, 9u}) {
        const LayerMasks full(2, MaskVector(a.length(), true));
        ForwardOptions opts;
        opts.masks = &full;
        const auto x = forward_step(m, t, a), y = forward_step(m, t, b, opts);
        EXPECT_EQ(x.logits, y.logits);
    }
}

TEST(Model, StepErrorsLeaveCacheUntouched) {
    auto cfg = tiny_config();
    cfg.max_seq = 3;
    const auto m = init_model(cfg);
    KVCache cache(cfg);
    forward_step(m, 1, cache);
    const LayerMasks bad{MaskVector(5, true), std::nullopt};
    ForwardOptions opts;
    opts.masks = &bad;
    EXPECT_THROW(forward_step(m, 2, cache, opts), Error);
    EXPECT_EQ(cache.length(), 1u);
    EXPECT_EQ(cache.keys(0, 0).rows, 1u);
    EXPECT_THROW(forward_step(m, 300, cache), Error);
    forward_step(m, 2, cache);
    forward_step(m, 3, cache);
    try {
        forward_step(m, 4, cache);
        FAIL() << "expected overflow";
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "context overflow");
    }
    EXPECT_EQ(cache.length(), 3u);
}

TEST(KVCache, RollbackRestoresState) {
    const auto m = init_model(tiny_config(2, 10));
    KVCache a(m.config), b(m.config);
    for (TokenId t : {1u, 2u, 3u}) forward_step(m, t, a);
    for (TokenId t : {1u, 2u, 3u, 40u, 50u}) forward_step(m, t, b);
    rollback(b, 3);
    EXPECT_EQ(b.length(), 3u);
    EXPECT_THROW(b.rollback(4), Error);
    const auto x = forward_step(m, 9, a), y = forward_step(m, 9, b);
    EXPECT_EQ(x.logits, y.logits);
    b.clear();
    EXPECT_EQ(b.length(), 0u);
}

TEST(Model, ArgmaxPrefersLowestIndex) {
    EXPECT_EQ(argmax(std::vector<double>{1.0, 3.0, 3.0, 2.0}), 1u);
}

TEST(Model, ByteTokenRoundTrip) {
    const std::string s = "hello\x01\xff";
    EXPECT_EQ(tokens_to_bytes(bytes_to_tokens(s)), s);
}

TEST(WeightsIo, RoundTripPreservesEveryValue) {
    const auto m = init_model(tiny_config(3, 21));
    const auto p = temp_path("roundtrip.bin");
    save_weights(m, p);
    const auto back = load_weights(p, m.config);
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(weight_checksum(back), weight_checksum(m));
    std::filesystem::remove(p);
}

TEST(WeightsIo, RejectsConfigMismatch) {
    const auto m = init_model(tiny_config(2, 21));
    const auto p = temp_path("mismatch.bin");
    save_weights(m, p);
    try {
        load_weights(p, tiny_config(3, 21));
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "config mismatch");
    }
    std::filesystem::remove(p);
}

TEST(WeightsIo, RejectsCorruptedOffset) {
    const auto m = init_model(tiny_config(2, 21));
    const auto p = temp_path("offset.bin");
    save_weights(m, p);
    patch_header(p, [](nlohmann::json& h) { h["tensors"][3]["offset"] = h["tensors"][3]["offset"].get<std::size_t>() + 8; });
    EXPECT_THROW(load_weights(p), Error);
    std::filesystem::remove(p);
}

TEST(WeightsIo, RejectsShapeAndTruncation) {
    const auto m = init_model(tiny_config(2, 21));
    const auto p = temp_path("shape.bin");
    save_weights(m, p);
    const std::string good = read_file(p);
    patch_header(p, [](nlohmann::json& h) { h["tensors"][1]["rows"] = 2; });
    EXPECT_THROW(load_weights(p), Error);
    write_file(p, good.substr(0, good.size() - 8));
    EXPECT_THROW(load_weights(p), Error);
    write_file(p, good + "x");
    EXPECT_THROW(load_weights(p), Error);
    write_file(p, "abc");
    EXPECT_THROW(load_weights(p), Error);
    std::filesystem::remove(p);
    EXPECT_THROW(load_weights(p), Error);
}

TEST(WeightsIo, RejectsNonFinite) {
    const auto m = init_model(tiny_config(2, 21));
    const auto p = temp_path("nan.bin");
    save_weights(m, p);
    std::string bytes = read_file(p);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::memcpy(bytes.data() + bytes.size() - 8, &nan, 8);
    write_file(p, bytes);
    EXPECT_THROW(load_weights(p), Error);
    std::filesystem::remove(p);
}
