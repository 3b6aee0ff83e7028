#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cimq/config.hpp"
#include "cimq/error.hpp"
#include "cimq/trainer.hpp"

namespace cimq {

// On-disk layout: <dir>/manifest.json names every entry and its float offset into
// <dir>/params.bin, a flat array of little-endian IEEE-754 binary32 values.

namespace detail {

inline void put_f32(std::vector<unsigned char>& out, double v)
{
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline double get_f32(const unsigned char* p)
{
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return static_cast<double>(std::bit_cast<float>(bits));
}

struct Entry {
    std::string name;
    std::vector<double>* values;
};

inline std::vector<Entry> checkpoint_entries(TrainState& s, std::vector<std::vector<double>>& act_scalars)
{
    std::vector<Entry> e;
    auto params = parameters(s.model);
    for (auto& p : params) e.push_back({p.name, p.values});
    act_scalars.assign(s.model.convs.size(), {0.0});
    for (std::size_t i = 0; i < s.model.convs.size(); ++i) {
        act_scalars[i][0] = s.model.convs[i].scales.act;
        e.push_back({"conv" + std::to_string(i) + ".s_a", &act_scalars[i]});
    }
    for (std::size_t i = 0; i < params.size(); ++i) e.push_back({"momentum." + params[i].name, &s.momentum[i]});
    return e;
}

}  // namespace detail

inline void save_checkpoint(const TrainState& state, const std::string& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    TrainState& s = const_cast<TrainState&>(state);  // entries only read here
    std::vector<std::vector<double>> acts;
    auto entries = detail::checkpoint_entries(s, acts);
    std::vector<std::vector<double>> act_mom(state.act_momentum.size());
    for (std::size_t i = 0; i < act_mom.size(); ++i) {
        act_mom[i] = {state.act_momentum[i]};
        entries.push_back({"momentum.conv" + std::to_string(i) + ".s_a", &act_mom[i]});
    }

    json manifest;
    manifest["format"] = "cimq-checkpoint";
    manifest["version"] = 1;
    manifest["model"] = model_to_json(state.model.spec);
    manifest["quant"] = quant_to_json(state.model.quant);
    manifest["epoch"] = state.epoch;
    manifest["step"] = state.step;
    json ready = json::array();
    for (const auto& l : state.model.convs) ready.push_back({{"act", l.act_ready}, {"psum", l.psum_ready}});
    manifest["scales_ready"] = ready;
    json list = json::array();
    std::vector<unsigned char> blob;
    std::size_t offset = 0;
    for (const auto& e : entries) {
        list.push_back({{"name", e.name}, {"offset", offset}, {"count", e.values->size()}});
        for (double v : *e.values) detail::put_f32(blob, v);
        offset += e.values->size();
    }
    manifest["entries"] = list;

    std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!bin) throw RuntimeError("failed to write checkpoint params to '" + dir + "'");
    std::ofstream man(fs::path(dir) / "manifest.json");
    man << manifest.dump(2) << "\n";
    if (!man) throw RuntimeError("failed to write checkpoint manifest to '" + dir + "'");
}

/// Restore a training state. The checkpoint's model and quantization settings must equal
/// the expected ones when given.
inline TrainState load_checkpoint(const std::string& dir, const ModelSpec* expect_model = nullptr,
                                  const QuantConfig* expect_quant = nullptr)
{
    namespace fs = std::filesystem;
    std::ifstream man(fs::path(dir) / "manifest.json");
    if (!man) throw ValidationError("cannot open checkpoint manifest in '" + dir + "'");
    json manifest;
    try {
        manifest = json::parse(man);
    } catch (const json::exception& e) {
        throw ValidationError("checkpoint manifest in '" + dir + "' is not valid JSON: " + e.what());
    }
    if (manifest.value("format", "") != "cimq-checkpoint" || manifest.value("version", 0) != 1)
        throw ValidationError("'" + dir + "' is not a version 1 cimq checkpoint");

    json cfg = {{"model", manifest.at("model")}, {"quant", manifest.at("quant")}};
    const ExperimentConfig parsed = parse_config(cfg);
    if (expect_model && !(*expect_model == parsed.model))
        throw ValidationError("checkpoint model in '" + dir + "' does not match the config");
    if (expect_quant && !(*expect_quant == parsed.quant))
        throw ValidationError("checkpoint quantization settings in '" + dir + "' do not match the config");

    TrainState s = make_train_state(make_model(parsed.model, parsed.quant, 0));
    s.epoch = manifest.at("epoch").get<int>();
    s.step = manifest.at("step").get<std::size_t>();
    const auto& ready = manifest.at("scales_ready");
    require(ready.size() == s.model.convs.size(), "checkpoint scale flags do not match the model");
    for (std::size_t i = 0; i < ready.size(); ++i) {
        s.model.convs[i].act_ready = ready[i].at("act").get<bool>();
        s.model.convs[i].psum_ready = ready[i].at("psum").get<bool>();
    }

    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw ValidationError("cannot open checkpoint params in '" + dir + "'");
    const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    std::vector<std::vector<double>> acts;
    auto entries = detail::checkpoint_entries(s, acts);
    std::vector<std::vector<double>> act_mom(s.act_momentum.size(), {0.0});
    for (std::size_t i = 0; i < act_mom.size(); ++i)
        entries.push_back({"momentum.conv" + std::to_string(i) + ".s_a", &act_mom[i]});

    const auto& list = manifest.at("entries");
    require(list.size() == entries.size(), "checkpoint entry count does not match the model");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& item = list[i];
        const std::string name = item.at("name").get<std::string>();
        const std::size_t offset = item.at("offset").get<std::size_t>();
        const std::size_t count = item.at("count").get<std::size_t>();
        require(name == entries[i].name, "checkpoint entry '" + name + "' found where '" + entries[i].name +
                                             "' was expected");
        require(count == entries[i].values->size(), "checkpoint entry '" + name + "' has the wrong size");
        require((offset + count) * 4 <= blob.size(), "checkpoint params.bin is truncated at entry '" + name + "'");
        for (std::size_t k = 0; k < count; ++k) (*entries[i].values)[k] = detail::get_f32(blob.data() + 4 * (offset + k));
    }
    for (std::size_t i = 0; i < acts.size(); ++i) s.model.convs[i].scales.act = acts[i][0];
    for (std::size_t i = 0; i < act_mom.size(); ++i) s.act_momentum[i] = act_mom[i][0];
    return s;
}

}  // namespace cimq
