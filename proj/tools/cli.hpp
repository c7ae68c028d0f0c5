#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "specattn/oracles.hpp"
#include "specattn/specattn.hpp"

namespace specattn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2 };

// Bad input or configuration: reported with exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

inline std::shared_ptr<spdlog::logger> logger() {
    auto l = spdlog::get("specattn");
    if (!l) l = spdlog::stderr_logger_st("specattn");
    return l;
}

inline void configure_logging() {
    const char* env = std::getenv("SPECATTN_LOG");
    auto level = spdlog::level::warn;
    if (env != nullptr && *env != '\0') level = spdlog::level::from_str(env);
    logger()->set_level(level);
}

struct ModelSpec {
    ModelConfig config;
    std::optional<fs::path> weights;
    std::vector<std::size_t> derive_layers;  // draft only: take these verifier layers
};

struct CorpusSample {
    std::size_t length = 4096;
    std::uint64_t seed = 0;
    double temperature = 1.0;
};

struct GenerateSettings {
    std::string mode = "specattn";
    std::optional<fs::path> prompt;
    std::size_t streaming_sink = 4;
    std::size_t streaming_recent = 64;
    std::size_t topk_budget = 64;
};

struct OracleSettings {
    std::size_t nucleus_trials = 1000;
    std::size_t dtw_trials = 500;
    std::size_t max_length = 4096;
    std::uint64_t seed = 1;
};

struct RunConfig {
    ModelSpec verifier, draft;
    std::optional<fs::path> corpus;
    std::optional<CorpusSample> corpus_sample;
    std::optional<fs::path> mapping;
    CalibrationConfig calibration;
    SpecConfig spec;
    BenchConfig bench;
    GenerateSettings generate;
    OracleSettings oracle;
    fs::path out_dir = "out";
    std::string fingerprint;
};

inline std::string fingerprint_of(json j) {
    j.erase("out_dir");
    return fmt::format("{:016x}", detail::fnv1a(j.dump()));
}

inline std::string read_bytes(const fs::path& p, const char* what) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot read {} '{}'", what, p.string()));
    return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_bytes(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
    if (!out) throw Error("failed writing " + p.string());
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

inline ModelSpec parse_model(const json& j, const fs::path& base) {
    ModelSpec m;
    if (j.contains("config")) m.config = j.at("config").get<ModelConfig>();
    if (j.contains("weights")) m.weights = resolve(base, j.at("weights").get<std::string>());
    if (j.contains("derive_layers")) m.derive_layers = j.at("derive_layers").get<std::vector<std::size_t>>();
    m.config.validate();
    return m;
}

struct Overrides {
    std::optional<double> p;
    std::optional<std::size_t> gamma;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    std::optional<std::string> prompt;
    std::optional<std::size_t> trials;
};

inline void apply_overrides(json& j, const Overrides& o) {
    if (o.p) {
        j["spec"]["selection"]["p"] = *o.p;
        j["bench"]["selection"]["p"] = *o.p;
        j["bench"]["p_values"] = json::array({*o.p});
    }
    if (o.gamma) {
        j["spec"]["gamma"] = *o.gamma;
        j["bench"]["gamma"] = *o.gamma;
    }
    if (o.seed) {
        for (const char* m : {"verifier", "draft"}) j[m]["config"]["seed"] = *o.seed;
        if (j.contains("corpus_sample")) j["corpus_sample"]["seed"] = *o.seed;
        j["oracle_check"]["seed"] = *o.seed;
    }
    if (o.mode) j["generate"]["mode"] = *o.mode;
    if (o.prompt) j["generate"]["prompt"] = fs::absolute(*o.prompt).string();
    if (o.trials) {
        j["oracle_check"]["nucleus_trials"] = *o.trials;
        j["oracle_check"]["dtw_trials"] = *o.trials;
    }
}

inline RunConfig load_run_config(const fs::path& path, const Overrides& o) {
    json j;
    try {
        j = json::parse(read_bytes(path, "config"));
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
    }
    apply_overrides(j, o);
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");

    RunConfig c;
    try {
        if (!j.contains("verifier")) throw ConfigError("config needs a 'verifier' section");
        c.verifier = parse_model(j.at("verifier"), base);
        c.draft = parse_model(j.value("draft", json::object()), base);
        if (j.contains("corpus")) c.corpus = resolve(base, j.at("corpus").get<std::string>());
        if (j.contains("corpus_sample")) {
            const auto& s = j.at("corpus_sample");
            c.corpus_sample = CorpusSample{s.value("length", std::size_t{4096}), s.value("seed", std::uint64_t{0}),
                                           s.value("temperature", 1.0)};
        }
        if (j.contains("mapping")) c.mapping = resolve(base, j.at("mapping").get<std::string>());
        if (j.contains("calibration")) c.calibration = j.at("calibration").get<CalibrationConfig>();
        if (j.contains("spec")) c.spec = j.at("spec").get<SpecConfig>();
        if (j.contains("bench")) c.bench = j.at("bench").get<BenchConfig>();
        if (j.contains("generate")) {
            const auto& g = j.at("generate");
            c.generate.mode = g.value("mode", c.generate.mode);
            if (g.contains("prompt")) c.generate.prompt = resolve(base, g.at("prompt").get<std::string>());
            c.generate.streaming_sink = g.value("streaming_sink", c.generate.streaming_sink);
            c.generate.streaming_recent = g.value("streaming_recent", c.generate.streaming_recent);
            c.generate.topk_budget = g.value("topk_budget", c.generate.topk_budget);
        }
        if (j.contains("oracle_check")) {
            const auto& s = j.at("oracle_check");
            c.oracle.nucleus_trials = s.value("nucleus_trials", c.oracle.nucleus_trials);
            c.oracle.dtw_trials = s.value("dtw_trials", c.oracle.dtw_trials);
            c.oracle.max_length = s.value("max_length", c.oracle.max_length);
            c.oracle.seed = s.value("seed", c.oracle.seed);
        }
        if (j.contains("out_dir")) c.out_dir = resolve(base, j.at("out_dir").get<std::string>());
        c.spec.validate();
        c.bench.selection.validate();
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config '{}' invalid: {}", path.string(), e.what()));
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(fmt::format("config '{}' invalid: {}", path.string(), e.what()));
    }
    for (const auto* w : {&c.verifier.weights, &c.draft.weights}) {
        if (*w && !fs::exists(**w)) throw ConfigError("weight file not found: " + (*w)->string());
    }
    c.fingerprint = fingerprint_of(j);
    return c;
}

struct Models {
    Model verifier, draft;
};

inline Model load_model(const ModelSpec& spec) {
    try {
        return spec.weights ? load_weights(*spec.weights, spec.config) : init_model(spec.config);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

inline Models load_models(const RunConfig& c) {
    Models m;
    m.verifier = load_model(c.verifier);
    if (!c.draft.derive_layers.empty()) {
        try {
            m.draft = derive_draft(m.verifier, c.draft.derive_layers);
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    } else {
        m.draft = load_model(c.draft);
    }
    if (m.draft.config.vocab != m.verifier.config.vocab) throw ConfigError("draft and verifier vocabularies differ");
    return m;
}

inline std::vector<TokenId> load_corpus(const RunConfig& c, const Model& verifier) {
    if (c.corpus) {
        if (!fs::exists(*c.corpus)) throw ConfigError("corpus not found: " + c.corpus->string());
        const auto bytes = read_bytes(*c.corpus, "corpus");
        if (bytes.empty()) throw ConfigError("corpus is empty: " + c.corpus->string());
        return bytes_to_tokens(bytes);
    }
    if (c.corpus_sample) {
        logger()->info("sampling a {}-token corpus from the verifier (seed {})", c.corpus_sample->length,
                       c.corpus_sample->seed);
        try {
            return sample_corpus(verifier, c.corpus_sample->length, c.corpus_sample->seed, c.corpus_sample->temperature);
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    }
    throw ConfigError("config has no corpus");
}

inline fs::path mapping_path(const RunConfig& c) { return c.mapping.value_or(c.out_dir / "mapping.json"); }

inline LayerMapping load_mapping(const RunConfig& c, const Models& m) {
    const fs::path p = mapping_path(c);
    if (!fs::exists(p)) throw ConfigError("mapping file not found: " + p.string() + " (run calibrate first)");
    try {
        return mapping_from_json(json::parse(read_bytes(p, "mapping")), m.draft.config.n_layers,
                                 m.verifier.config.n_layers);
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("mapping '{}' is not valid JSON: {}", p.string(), e.what()));
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

inline MaskPolicy policy_for(const GenerateSettings& g) {
    if (g.mode == "specattn") return MaskPolicy::specattn();
    if (g.mode == "dense-only") return MaskPolicy::dense();
    if (g.mode == "streaming") return MaskPolicy::streaming(g.streaming_sink, g.streaming_recent);
    if (g.mode == "topk") return MaskPolicy::topk(g.topk_budget);
    throw ConfigError("unknown mode '" + g.mode + "'");
}

inline void ensure_out_dir(const RunConfig& c) {
    std::error_code ec;
    fs::create_directories(c.out_dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + c.out_dir.string() + ": " + ec.message());
}

inline int cmd_calibrate(const RunConfig& c, std::ostream& out) {
    const Models m = load_models(c);
    const auto corpus = load_corpus(c, m.verifier);
    CalibrationResult r;
    try {
        r = calibrate(m.draft, m.verifier, corpus, c.calibration);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    ensure_out_dir(c);
    write_bytes(c.out_dir / "mapping.json", mapping_to_json(r.mapping, m.draft.config.n_layers, c.fingerprint).dump(2) + "\n");
    write_bytes(c.out_dir / "simmatrix.csv", similarity_to_csv(r.similarity));
    out << "mapping";
    for (std::size_t f : r.mapping.verifier_to_draft) out << ' ' << f;
    out << fmt::format("\ntotal_score {:.6g} over {} positions\n", r.mapping.total_score, r.positions);
    return kOk;
}

inline int cmd_generate(const RunConfig& c, std::ostream& out) {
    const Models m = load_models(c);
    const MaskPolicy policy = policy_for(c.generate);
    if (!c.generate.prompt) throw ConfigError("generate needs a prompt (--prompt or generate.prompt)");
    const auto prompt = bytes_to_tokens(read_bytes(*c.generate.prompt, "prompt"));
    if (prompt.empty()) throw ConfigError("empty prompt");
    const LayerMapping mapping = policy.kind == MaskPolicy::Kind::dense ? LayerMapping{} : load_mapping(c, m);

    GenerateOptions g;
    g.policy = policy;
    const GenerationResult r = generate(m.draft, m.verifier, mapping, prompt, c.spec, g);
    ensure_out_dir(c);
    const std::span<const TokenId> generated(r.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()), r.tokens.end());
    write_bytes(c.out_dir / "output.bin", tokens_to_bytes(generated));
    std::string lines;
    for (std::size_t i = 0; i < r.rounds.size(); ++i) {
        json rec = round_to_json(r.rounds[i], i);
        rec["fingerprint"] = c.fingerprint;
        lines += rec.dump() + "\n";
    }
    write_bytes(c.out_dir / "rounds.jsonl", lines);
    std::size_t accepted = 0;
    for (const auto& rec : r.rounds) accepted += rec.n_accepted;
    out << fmt::format("generated {} tokens in {} rounds ({} draft tokens accepted)\n", generated.size(),
                       r.rounds.size(), accepted);
    if (r.error) {
        logger()->error("generation stopped early: {}", *r.error);
        return kCheckFailed;
    }
    return kOk;
}

inline int cmd_bench(const RunConfig& c, std::ostream& out) {
    const Models m = load_models(c);
    auto corpus = load_corpus(c, m.verifier);
    const std::size_t cap = std::min(m.verifier.config.max_seq, m.draft.config.max_seq);
    if (corpus.size() > cap) {
        logger()->warn("corpus truncated from {} to {} tokens (max_seq)", corpus.size(), cap);
        corpus.resize(cap);
    }
    const LayerMapping mapping = load_mapping(c, m);
    BenchResults res;
    try {
        res = compare_methods(m.draft, m.verifier, mapping, corpus, c.bench);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    ensure_out_dir(c);
    write_bytes(c.out_dir / "report.csv", reports_to_csv(res.reports));
    json j = reports_to_json(res);
    j["fingerprint"] = c.fingerprint;
    write_bytes(c.out_dir / "report.json", j.dump(2) + "\n");
    write_bytes(c.out_dir / "ppl_trace.csv", traces_to_csv(res.traces));
    for (const auto& r : res.reports) {
        out << fmt::format("{:<18} ppl {:>10.4f}  delta {:>+9.4f} ({:>+7.2f}%)  kv_reduction {:>6.2f}%\n", r.method,
                           r.perplexity, r.perplexity_delta, r.relative_increase, r.kv_reduction);
    }
    return kOk;
}

inline int cmd_oracle_check(const RunConfig& c, bool inject_fault, std::ostream& out) {
    if (c.oracle.nucleus_trials == 0 || c.oracle.dtw_trials == 0) throw ConfigError("no trials");
    const auto nucleus = oracle::nucleus_suite(c.oracle.nucleus_trials, c.oracle.seed, c.oracle.max_length, inject_fault);
    const auto dtw = oracle::dtw_suite(c.oracle.dtw_trials, c.oracle.seed, inject_fault);
    auto line = [&](const char* name, const oracle::SuiteResult& r) {
        out << fmt::format("{} {} {}/{}{}\n", r.ok() ? "PASS" : "FAIL", name, r.trials - r.failures, r.trials,
                           r.ok() ? "" : " (" + r.first_failure + ")");
        return json{{"trials", r.trials}, {"failures", r.failures}, {"first_failure", r.first_failure}};
    };
    json summary{{"fingerprint", c.fingerprint}};
    summary["nucleus"] = line("nucleus", nucleus);
    summary["dtw"] = line("dtw", dtw);
    ensure_out_dir(c);
    write_bytes(c.out_dir / "oracle_check.json", summary.dump(2) + "\n");
    return nucleus.ok() && dtw.ok() ? kOk : kCheckFailed;
}

// Entry point shared by the executable and the tests. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    configure_logging();
    CLI::App app{"Draft-guided sparse attention for speculative decoding on toy transformers"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    Overrides o;
    bool inject_fault = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
        sub->add_option("--out-dir", out_dir, "Output directory (overrides out_dir)");
        sub->add_option("--p", o.p, "Nucleus threshold")->check(CLI::Range(0.0, 1.0));
        sub->add_option("--gamma", o.gamma, "Draft tokens per round")->check(CLI::PositiveNumber);
        sub->add_option("--seed", o.seed, "Seed for generated weights and sampled corpora");
    };
    auto* cal = app.add_subcommand("calibrate", "Align verifier layers to draft layers");
    auto* gen = app.add_subcommand("generate", "Speculative generation from a prompt file");
    auto* bench = app.add_subcommand("bench", "Perplexity and KV reduction across methods");
    auto* orc = app.add_subcommand("oracle-check", "Selection and alignment kernels against brute force");
    for (auto* s : {cal, gen, bench, orc}) common(s);
    gen->add_option("--prompt", o.prompt, "Prompt file (raw bytes)");
    gen->add_option("--mode", o.mode, "Verification masks")
        ->check(CLI::IsMember({"specattn", "dense-only", "streaming", "topk"}));
    orc->add_option("--trials", o.trials, "Trials per suite");
    orc->add_flag("--inject-fault", inject_fault, "Corrupt results to exercise failure reporting");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    try {
        RunConfig c = load_run_config(config_path, o);
        if (!out_dir.empty()) c.out_dir = out_dir;
        logger()->info("config fingerprint {}", c.fingerprint);
        if (cal->parsed()) return cmd_calibrate(c, out);
        if (gen->parsed()) return cmd_generate(c, out);
        if (bench->parsed()) return cmd_bench(c, out);
        return cmd_oracle_check(c, inject_fault, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kCheckFailed;
    }
}

}  // namespace specattn::cli
