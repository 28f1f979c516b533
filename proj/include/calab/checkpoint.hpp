#ifndef CALAB_CHECKPOINT_HPP
#define CALAB_CHECKPOINT_HPP

#include <fstream>
#include <string>

#include "json.hpp"

#include "calab/ensemble.hpp"
#include "calab/errors.hpp"

namespace calab {

constexpr int kCheckpointVersion = 1;

inline nlohmann::json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    const auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != m.size()) throw io_error("checkpoint: matrix size mismatch");
    m.data() = data;
    return m;
}

inline nlohmann::json net_to_json(const DenseNet& net) {
    nlohmann::json j;
    j["dropout_rate"] = net.dropout_rate;
    j["layers"] = nlohmann::json::array();
    for (const auto& layer : net.layers)
        j["layers"].push_back({{"weights", matrix_to_json(layer.weights)}, {"bias", layer.bias}});
    return j;
}

inline DenseNet net_from_json(const nlohmann::json& j) {
    DenseNet net;
    net.dropout_rate = j.at("dropout_rate").get<double>();
    for (const auto& lj : j.at("layers")) {
        DenseLayer layer;
        layer.weights = matrix_from_json(lj.at("weights"));
        layer.bias = lj.at("bias").get<std::vector<double>>();
        net.layers.push_back(std::move(layer));
    }
    net.validate();
    return net;
}

inline nlohmann::json checkpoint_to_json(const EnsembleModel& model) {
    nlohmann::json j;
    j["format_version"] = kCheckpointVersion;
    j["mode"] = ensemble_mode_name(model.mode);
    j["ensemble_size"] = model.ensemble_size;
    j["seed"] = model.seed;
    j["members"] = nlohmann::json::array();
    for (const auto& member : model.members) j["members"].push_back(net_to_json(member));
    j["factors"] = nlohmann::json::array();
    for (const auto& member : model.factors) {
        nlohmann::json fj = nlohmann::json::array();
        for (const auto& f : member) fj.push_back({{"r", f.r}, {"s", f.s}});
        j["factors"].push_back(fj);
    }
    return j;
}

inline EnsembleModel checkpoint_from_json(const nlohmann::json& j) {
    if (j.at("format_version").get<int>() != kCheckpointVersion)
        throw io_error("checkpoint: unsupported format version");
    EnsembleModel model;
    model.mode = ensemble_mode_from_name(j.at("mode").get<std::string>());
    model.ensemble_size = j.at("ensemble_size").get<int>();
    model.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& mj : j.at("members")) model.members.push_back(net_from_json(mj));
    for (const auto& fj : j.at("factors")) {
        std::vector<RankOneFactors> member;
        for (const auto& f : fj)
            member.push_back(
                {f.at("r").get<std::vector<double>>(), f.at("s").get<std::vector<double>>()});
        model.factors.push_back(std::move(member));
    }
    model.validate();
    return model;
}

inline void save_checkpoint(const EnsembleModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open checkpoint for writing: " + path);
    out << checkpoint_to_json(model).dump(2) << '\n';
}

inline EnsembleModel load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open checkpoint for reading: " + path);
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

} // namespace calab

#endif // CALAB_CHECKPOINT_HPP
