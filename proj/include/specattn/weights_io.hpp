#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specattn/model.hpp"

// Weight file layout:
//   u64 little-endian header length N
//   N bytes of JSON: {"format":"specattn-weights","version":1,"config":{...},
//                     "tensors":[{"name","rows","cols","offset"}, ...]}
//   payload: little-endian f64 row-major tensors; offsets are relative to the payload start.

namespace specattn {

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

inline constexpr const char* kWeightFormat = "specattn-weights";

inline void save_weights(const Model& model, const std::filesystem::path& path) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    model.for_each_tensor([&](const std::string& name, const Tensor2D& t) {
        manifest.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
        offset += t.size() * sizeof(double);
    });
    const nlohmann::json header{
        {"format", kWeightFormat}, {"version", 1}, {"config", model.config}, {"tensors", manifest}};
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open weight file for writing: " + path.string());
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    model.for_each_tensor([&](const std::string&, const Tensor2D& t) {
        const auto vals = t.flat();
        out.write(reinterpret_cast<const char*>(vals.data()), static_cast<std::streamsize>(vals.size() * sizeof(double)));
    });
    if (!out) throw Error("failed writing weight file: " + path.string());
}

// Validates the header and manifest completely before touching the payload. When
// `expected` is given the stored config must equal it.
inline Model load_weights(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open weight file: " + path.string());
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);

    std::uint64_t header_len = 0;
    if (file_size < sizeof header_len || !in.read(reinterpret_cast<char*>(&header_len), sizeof header_len)) {
        throw Error("weight file truncated: missing header length");
    }
    if (header_len > file_size - sizeof header_len) throw Error("weight file truncated: header");
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("weight header is not valid JSON: ") + e.what());
    }
    if (header.value("format", "") != kWeightFormat) throw Error("not a specattn weight file");

    Model model;
    try {
        model.config = header.at("config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("weight header config invalid: ") + e.what());
    }
    model.config.validate();
    if (expected && !(*expected == model.config)) throw Error("config mismatch");

    // Shape the model from its config, then check the manifest against it tensor by tensor.
    Model shaped = init_model(model.config);
    struct Entry {
        std::size_t rows, cols;
        std::uint64_t offset;
    };
    std::map<std::string, Entry> entries;
    try {
        for (const auto& t : header.at("tensors")) {
            entries[t.at("name").get<std::string>()] = {t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>(),
                                                        t.at("offset").get<std::uint64_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("weight manifest invalid: ") + e.what());
    }

    const std::uint64_t payload_size = file_size - sizeof header_len - header_len;
    std::uint64_t expected_offset = 0;
    std::size_t seen = 0;
    shaped.for_each_tensor([&](const std::string& name, const Tensor2D& t) {
        auto it = entries.find(name);
        if (it == entries.end()) throw Error("weight manifest missing tensor " + name);
        const Entry& e = it->second;
        if (e.rows != t.rows() || e.cols != t.cols()) throw Error("manifest shape mismatch for " + name);
        if (e.offset != expected_offset) throw Error("manifest offset mismatch for " + name);
        expected_offset += static_cast<std::uint64_t>(e.rows) * e.cols * sizeof(double);
        ++seen;
    });
    if (seen != entries.size()) throw Error("weight manifest has unexpected tensors");
    if (expected_offset > payload_size) throw Error("weight file truncated: payload");
    if (expected_offset < payload_size) throw Error("weight payload has trailing bytes");

    model = std::move(shaped);
    model.for_each_tensor([&](const std::string&, Tensor2D& t) {
        auto vals = t.flat();
        in.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(vals.size() * sizeof(double)));
        if (!in) throw Error("weight file truncated: payload");
    });
    model.for_each_tensor([&](const std::string& name, const Tensor2D& t) {
        if (!t.all_finite()) throw Error("non-finite weight in " + name);
    });
    return model;
}

}  // namespace specattn
