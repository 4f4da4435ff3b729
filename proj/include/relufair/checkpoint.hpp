#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "relufair/error.hpp"
#include "relufair/io.hpp"
#include "relufair/model.hpp"

namespace relufair {

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::string created_by;
    double budget = 1.0;

    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
    GatedNetwork net;
    CheckpointMeta meta;
};

inline nlohmann::json checkpoint_json(const GatedNetwork& net, const CheckpointMeta& meta) {
    const NetworkShape& shape = net.shape();
    nlohmann::json layers = nlohmann::json::array();
    for (const DenseLayer& layer : net.layers()) {
        nlohmann::json w = nlohmann::json::array();
        for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t c = 0; c < layer.weight.cols(); ++c) row.push_back(layer.weight(r, c));
            w.push_back(row);
        }
        layers.push_back({{"weight", w}, {"bias", layer.bias.to_vector()}});
    }
    return {{"format", "relufair-checkpoint/1"},
            {"shape",
             {{"input_dim", shape.input_dim},
              {"hidden_widths", shape.hidden_widths},
              {"num_classes", shape.num_classes},
              {"head", to_string(shape.head)}}},
            {"weights", layers},
            {"gates", net.gates()},
            {"gate_mode", to_string(net.gate_mode())},
            {"metadata", {{"seed", meta.seed}, {"created_by", meta.created_by}, {"budget", meta.budget}}}};
}

// Compact dump; object keys are sorted, so equal checkpoints give equal bytes.
// Checkpoint files hold exactly these bytes, so the file digest is the model id.
inline std::string canonical_text(const nlohmann::json& doc) { return doc.dump(); }

inline Checkpoint checkpoint_from_json(const nlohmann::json& doc) {
    try {
        if (doc.value("format", "") != "relufair-checkpoint/1") throw IoError("checkpoint: unknown or missing format tag");
        const auto& s = doc.at("shape");
        NetworkShape shape{s.at("input_dim").get<std::size_t>(), s.at("hidden_widths").get<std::vector<std::size_t>>(),
                           s.at("num_classes").get<std::size_t>(), parse_output_head(s.at("head").get<std::string>())};
        Checkpoint ck{GatedNetwork(shape), {}};
        const auto& layers = doc.at("weights");
        if (layers.size() != ck.net.layers().size()) throw IoError("checkpoint: layer count disagrees with shape");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            DenseLayer& layer = ck.net.layers()[l];
            const auto& w = layers[l].at("weight");
            if (w.size() != layer.weight.rows()) throw IoError("checkpoint: weight rows disagree with shape");
            for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
                if (w[r].size() != layer.weight.cols()) throw IoError("checkpoint: weight columns disagree with shape");
                for (std::size_t c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = w[r][c].get<double>();
            }
            const auto b = layers[l].at("bias").get<std::vector<double>>();
            if (b.size() != layer.bias.cols()) throw IoError("checkpoint: bias length disagrees with shape");
            for (std::size_t c = 0; c < b.size(); ++c) layer.bias(0, c) = b[c];
        }
        const std::string mode = doc.at("gate_mode").get<std::string>();
        if (mode != "frozen" && mode != "learnable") throw IoError("checkpoint: unknown gate_mode '" + mode + "'");
        ck.net.set_gates(doc.at("gates").get<std::vector<std::vector<double>>>(),
                         mode == "frozen" ? GateMode::frozen : GateMode::learnable);
        const auto& meta = doc.at("metadata");
        ck.meta.seed = meta.at("seed").get<std::uint64_t>();
        ck.meta.created_by = meta.at("created_by").get<std::string>();
        ck.meta.budget = meta.at("budget").get<double>();
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: malformed document: ") + e.what());
    } catch (const ShapeError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    } catch (const PreconditionError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const GatedNetwork& net, const CheckpointMeta& meta) {
    io::atomic_write(path, canonical_text(checkpoint_json(net, meta)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string text = io::read_text(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("checkpoint '" + path.string() + "': " + e.what());
    }
    return checkpoint_from_json(doc);
}

} // namespace relufair
