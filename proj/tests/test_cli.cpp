#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;
using specattn::cli::run;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("specattn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        for (const char* f : {"toy.json", "toy_corpus.txt", "prompt.txt"}) {
            fs::copy_file(fs::path(SPECATTN_CONFIG_DIR) / f, dir_ / f);
        }
        auto j = nlohmann::json::parse(slurp(dir_ / "toy.json"));
        j["out_dir"] = "out";
        j["mapping"] = "out/mapping.json";
        spit(config(), j.dump());
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path config() const { return dir_ / "toy.json"; }
    fs::path out(const std::string& sub = "out") const { return dir_ / sub; }

    int cli(std::vector<std::string> args) {
        stdout_.str("");
        stderr_.str("");
        return run(args, stdout_, stderr_);
    }
    void edit(const std::function<void(nlohmann::json&)>& f) {
        auto j = nlohmann::json::parse(slurp(config()));
        f(j);
        spit(config(), j.dump());
    }

    fs::path dir_;
    std::ostringstream stdout_, stderr_;
};

}  // namespace

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(cli({}), 2);
    EXPECT_EQ(cli({"frobnicate"}), 2);
    EXPECT_EQ(cli({"calibrate"}), 2);
    EXPECT_EQ(cli({"generate", "--config", config().string(), "--mode", "bogus"}), 2);
    EXPECT_EQ(cli({"calibrate", "--config", (dir_ / "nope.json").string()}), 2);
    EXPECT_EQ(cli({"--help"}), 0);
    spit(dir_ / "broken.json", "{not json");
    EXPECT_EQ(cli({"calibrate", "--config", (dir_ / "broken.json").string()}), 2);
}

TEST_F(Cli, CalibrateWritesMappingAndMatrix) {
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0) << stderr_.str();
    const auto m = nlohmann::json::parse(slurp(out() / "mapping.json"));
    EXPECT_EQ(m.at("verifier_to_draft").size(), 4u);
    EXPECT_EQ(m.at("verifier_to_draft")[0], 0);
    EXPECT_EQ(m.at("verifier_to_draft")[1], 1);
    EXPECT_EQ(m.at("fingerprint").get<std::string>().size(), 16u);
    const auto csv = slurp(out() / "simmatrix.csv");
    EXPECT_EQ(csv.substr(0, 24), "draft_layer,v0,v1,v2,v3\n");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST_F(Cli, SelfCalibrationIsIdentity) {
    edit([](nlohmann::json& j) { j["draft"] = {{"derive_layers", {0, 1, 2, 3}}}; });
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0);
    const auto m = nlohmann::json::parse(slurp(out() / "mapping.json"));
    EXPECT_EQ(m.at("verifier_to_draft"), nlohmann::json({0, 1, 2, 3}));
}

TEST_F(Cli, MissingCorpusIsConfigError) {
    fs::remove(dir_ / "toy_corpus.txt");
    EXPECT_EQ(cli({"calibrate", "--config", config().string()}), 2);
    EXPECT_NE(stderr_.str().find("corpus not found"), std::string::npos);
}

TEST_F(Cli, GenerateRequiresMappingAndPrompt) {
    EXPECT_EQ(cli({"generate", "--config", config().string()}), 2);
    EXPECT_NE(stderr_.str().find("mapping file not found"), std::string::npos);
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0);
    spit(dir_ / "empty.txt", "");
    EXPECT_EQ(cli({"generate", "--config", config().string(), "--prompt", (dir_ / "empty.txt").string()}), 2);
    EXPECT_NE(stderr_.str().find("empty prompt"), std::string::npos);
}

TEST_F(Cli, GenerateDenseEquivalence) {
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0);
    ASSERT_EQ(cli({"generate", "--config", config().string(), "--mode", "dense-only", "--out-dir", out("dense").string()}), 0);
    ASSERT_EQ(cli({"generate", "--config", config().string(), "--p", "1.0", "--out-dir", out("p1").string()}), 0);
    edit([](nlohmann::json& j) { j["spec"]["selection"]["dense_prefix_layers"] = 100; });
    ASSERT_EQ(cli({"generate", "--config", config().string(), "--out-dir", out("alldense").string()}), 0);
    const auto dense = slurp(out("dense") / "output.bin");
    EXPECT_EQ(dense.size(), 48u);
    EXPECT_EQ(slurp(out("alldense") / "output.bin"), dense);
    const auto rounds = slurp(out("p1") / "rounds.jsonl");
    const auto first = nlohmann::json::parse(rounds.substr(0, rounds.find('\n')));
    EXPECT_EQ(first.at("round"), 0);
    EXPECT_TRUE(first.contains("fingerprint"));
}

TEST_F(Cli, GenerateModes) {
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0);
    for (const char* mode : {"specattn", "streaming", "topk"}) {
        EXPECT_EQ(cli({"generate", "--config", config().string(), "--mode", mode, "--gamma", "2"}), 0) << mode;
        EXPECT_EQ(slurp(out() / "output.bin").size(), 48u);
    }
}

TEST_F(Cli, BenchReport) {
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0);
    ASSERT_EQ(cli({"bench", "--config", config().string()}), 0) << stderr_.str();
    const auto report = nlohmann::json::parse(slurp(out() / "report.json"));
    const auto& rows = report.at("reports");
    ASSERT_EQ(rows.size(), 7u);
    std::vector<std::string> names;
    for (const auto& r : rows) names.push_back(r.at("method"));
    EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
    EXPECT_EQ(rows[0].at("method"), "full");
    EXPECT_EQ(rows[0].at("kv_reduction_pct"), 0.0);
    const auto csv = slurp(out() / "report.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
    EXPECT_FALSE(slurp(out() / "ppl_trace.csv").empty());
    ASSERT_EQ(cli({"bench", "--config", config().string(), "--p", "0.9", "--out-dir", out("single").string()}), 0);
    EXPECT_EQ(nlohmann::json::parse(slurp(out("single") / "report.json")).at("reports").size(), 4u);
}

TEST_F(Cli, OracleCheck) {
    EXPECT_EQ(cli({"oracle-check", "--config", config().string()}), 0) << stdout_.str();
    EXPECT_NE(stdout_.str().find("PASS nucleus 200/200"), std::string::npos);
    EXPECT_EQ(cli({"oracle-check", "--config", config().string(), "--inject-fault", "--trials", "10"}), 1);
    EXPECT_NE(stdout_.str().find("FAIL"), std::string::npos);
    EXPECT_EQ(cli({"oracle-check", "--config", config().string(), "--trials", "0"}), 2);
    EXPECT_NE(stderr_.str().find("no trials"), std::string::npos);
}

TEST_F(Cli, WeightsFromFile) {
    const auto m = specattn::init_model(nlohmann::json::parse(slurp(config()))["verifier"]["config"].get<specattn::ModelConfig>());
    specattn::save_weights(m, dir_ / "verifier.bin");
    edit([](nlohmann::json& j) { j["verifier"]["weights"] = "verifier.bin"; });
    ASSERT_EQ(cli({"calibrate", "--config", config().string(), "--out-dir", out("a").string()}), 0) << stderr_.str();
    edit([](nlohmann::json& j) { j["verifier"]["weights"] = "missing.bin"; });
    EXPECT_EQ(cli({"calibrate", "--config", config().string()}), 2);
    edit([](nlohmann::json& j) {
        j["verifier"]["weights"] = "verifier.bin";
        j["verifier"]["config"]["n_layers"] = 5;
    });
    EXPECT_EQ(cli({"calibrate", "--config", config().string()}), 2);
    EXPECT_NE(stderr_.str().find("config mismatch"), std::string::npos);
}

TEST_F(Cli, RerunsAreByteIdentical) {
    ASSERT_EQ(cli({"calibrate", "--config", config().string()}), 0);
    const auto run_all = [&](const std::string& sub) {
        const auto o = out(sub).string();
        ASSERT_EQ(cli({"calibrate", "--config", config().string(), "--out-dir", o}), 0);
        ASSERT_EQ(cli({"generate", "--config", config().string(), "--out-dir", o}), 0);
        ASSERT_EQ(cli({"bench", "--config", config().string(), "--out-dir", o}), 0);
        ASSERT_EQ(cli({"oracle-check", "--config", config().string(), "--out-dir", o, "--trials", "50"}), 0);
    };
    run_all("r1");
    run_all("r2");
    for (const char* f : {"mapping.json", "simmatrix.csv", "output.bin", "rounds.jsonl", "report.csv", "report.json",
                          "ppl_trace.csv", "oracle_check.json"}) {
        EXPECT_EQ(slurp(out("r1") / f), slurp(out("r2") / f)) << f;
        EXPECT_FALSE(slurp(out("r1") / f).empty()) << f;
    }
}

TEST_F(Cli, SeedChangesFingerprint) {
    ASSERT_EQ(cli({"calibrate", "--config", config().string(), "--out-dir", out("a").string()}), 0);
    ASSERT_EQ(cli({"calibrate", "--config", config().string(), "--out-dir", out("b").string(), "--seed", "8"}), 0);
    const auto a = nlohmann::json::parse(slurp(out("a") / "mapping.json"));
    const auto b = nlohmann::json::parse(slurp(out("b") / "mapping.json"));
    EXPECT_NE(a.at("fingerprint"), b.at("fingerprint"));
}
