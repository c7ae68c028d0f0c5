#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "specattn/attention.hpp"
#include "specattn/model.hpp"

namespace specattn {

enum class ModelRole { draft, verifier };

// Head-averaged attention rows captured from a model, indexed [layer][position]. For
// calibration "position" is a calibration prefix; for a speculative round it is a draft step.
struct AttnTrace {
    ModelRole role = ModelRole::draft;
    std::vector<std::vector<AttnWeights>> layers;

    std::size_t n_layers() const { return layers.size(); }
    std::size_t n_positions() const { return layers.empty() ? 0 : layers.front().size(); }

    static AttnTrace with_layers(ModelRole role, std::size_t n_layers) {
        AttnTrace t;
        t.role = role;
        t.layers.resize(n_layers);
        return t;
    }

    void append(const StepOutput& step) {
        if (step.attentions.size() != layers.size()) throw Error("step attention count does not match trace layers");
        for (std::size_t l = 0; l < layers.size(); ++l) layers[l].push_back(step.attentions[l]);
    }
};

// Monotone map from verifier layer to draft layer.
struct LayerMapping {
    std::vector<std::size_t> verifier_to_draft;
    double total_score = 0.0;

    std::size_t operator()(std::size_t verifier_layer) const { return verifier_to_draft.at(verifier_layer); }
    std::size_t verifier_layers() const { return verifier_to_draft.size(); }

    bool is_monotone() const {
        for (std::size_t j = 1; j < verifier_to_draft.size(); ++j) {
            if (verifier_to_draft[j] < verifier_to_draft[j - 1]) return false;
        }
        return true;
    }

    void validate(std::size_t draft_layers, std::size_t verifier_layers) const {
        if (verifier_to_draft.size() != verifier_layers) {
            throw Error("mapping covers " + std::to_string(verifier_to_draft.size()) + " verifier layers, model has " +
                        std::to_string(verifier_layers));
        }
        for (std::size_t f : verifier_to_draft) {
            if (f >= draft_layers) throw Error("mapping refers to draft layer " + std::to_string(f) + " out of range");
        }
        if (!is_monotone()) throw Error("mapping is not monotone");
    }

    static LayerMapping identity(std::size_t n) {
        LayerMapping m;
        for (std::size_t j = 0; j < n; ++j) m.verifier_to_draft.push_back(j);
        return m;
    }

    friend bool operator==(const LayerMapping&, const LayerMapping&) = default;
};

}  // namespace specattn
