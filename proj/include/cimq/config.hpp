#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cimq/dataset.hpp"
#include "cimq/error.hpp"
#include "cimq/rng.hpp"
#include "cimq/trainer.hpp"
#include "cimq/variation.hpp"

namespace cimq {

using json = nlohmann::json;

struct DatasetConfig {
    std::string source = "synthetic";  // synthetic | cifar10
    std::size_t train_count = 1000;
    std::size_t test_count = 500;
    SyntheticSpec synthetic{};
    std::string train_path;  // cifar10
    std::string test_path;
    std::size_t max_records = 0;

    bool operator==(const DatasetConfig&) const = default;
};

struct VariationConfig {
    double sigma = 0.0;
    VariationLevel level = VariationLevel::Weight;
    int trials = 5;
    bool operator==(const VariationConfig&) const = default;
};

struct SweepConfig {
    std::vector<double> sigmas{0.0, 0.1, 0.2, 0.3, 0.4};
    std::vector<int> p_bits{3, 4, 5, 6};
    bool train = true;  // false: calibrate the initial model and evaluate without training
    bool operator==(const SweepConfig&) const = default;
};

struct HistogramConfig {
    std::size_t layer = 0;
    std::string input = "test";  // test | zeros
    std::size_t images = 64;
    bool operator==(const HistogramConfig&) const = default;
};

struct CheckpointConfig {
    std::string load;    // infer / sweep / histogram: evaluate this checkpoint
    std::string resume;  // train: continue from this checkpoint
    int every = 0;       // train: also keep checkpoint_epochN every N epochs
    bool operator==(const CheckpointConfig&) const = default;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "out";
    DatasetConfig dataset;
    ModelSpec model;
    QuantConfig quant;
    TrainSchedule train;
    VariationConfig variation;
    SweepConfig sweep;
    HistogramConfig histogram;
    CheckpointConfig checkpoint;

    bool operator==(const ExperimentConfig&) const = default;

    void validate() const
    {
        require(dataset.source == "synthetic" || dataset.source == "cifar10",
                "dataset.source must be synthetic or cifar10");
        if (dataset.source == "synthetic") {
            require(dataset.train_count >= 1 && dataset.test_count >= 1, "dataset counts must be >= 1");
            require(dataset.synthetic.size >= 4, "dataset.size must be >= 4");
        } else {
            require(!dataset.train_path.empty() && !dataset.test_path.empty(),
                    "cifar10 dataset needs train_path and test_path");
        }
        model.validate();
        quant.validate();
        train.validate();
        VariationSpec{variation.sigma, variation.level, seed, variation.trials}.validate();
        for (double s : sweep.sigmas) require(s >= 0.0, "sweep.sigmas must be >= 0");
        for (int b : sweep.p_bits) require(b >= 2 && b <= 40, "sweep.p_bits entries must be in [2, 40]");
        require(histogram.layer < model.convs.size(), "histogram.layer out of range");
        require(histogram.input == "test" || histogram.input == "zeros", "histogram.input must be test or zeros");
        require(histogram.images >= 1, "histogram.images must be >= 1");
        require(checkpoint.every >= 0, "checkpoint.every must be >= 0");
        require(!(dataset.source == "cifar10" && model.in_channels != 3), "cifar10 needs model.in_channels = 3");
    }
};

namespace detail {

/// Reads keys out of one JSON object and rejects whatever is left over.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ValidationError("config: '" + where() + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ValidationError("config: '" + where(key) + "' has the wrong type");
        }
    }

    const json* sub(const char* key)
    {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string where(const std::string& key = "") const
    {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ValidationError("config: unknown key '" + where(k) + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline Granularity read_gran(const std::string& s) { return parse_granularity(s); }

}  // namespace detail

inline ExperimentConfig parse_config(const json& j)
{
    ExperimentConfig c;
    detail::ObjectReader root(j, "");
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);

    if (const json* d = root.sub("dataset")) {
        detail::ObjectReader r(*d, "dataset");
        auto& s = c.dataset;
        r.get("source", s.source);
        r.get("train_count", s.train_count);
        r.get("test_count", s.test_count);
        r.get("size", s.synthetic.size);
        r.get("angle_deg", s.synthetic.angle_deg);
        r.get("angle_jitter_deg", s.synthetic.angle_jitter_deg);
        r.get("blob_amplitude", s.synthetic.blob_amplitude);
        r.get("grating_amplitude", s.synthetic.grating_amplitude);
        r.get("pixel_noise", s.synthetic.pixel_noise);
        r.get("background", s.synthetic.background);
        r.get("train_path", s.train_path);
        r.get("test_path", s.test_path);
        r.get("max_records", s.max_records);
        r.finish();
    }
    if (const json* m = root.sub("model")) {
        detail::ObjectReader r(*m, "model");
        r.get("in_channels", c.model.in_channels);
        r.get("num_classes", c.model.num_classes);
        if (const json* convs = r.sub("convs")) {
            if (!convs->is_array()) throw ValidationError("config: 'model.convs' must be an array");
            c.model.convs.clear();
            for (std::size_t i = 0; i < convs->size(); ++i) {
                detail::ObjectReader cr((*convs)[i], "model.convs[" + std::to_string(i) + "]");
                ConvSpec cs;
                cr.get("c_out", cs.c_out);
                cr.get("kernel", cs.kernel);
                cr.get("pad", cs.pad);
                cr.get("pool", cs.pool);
                cr.finish();
                c.model.convs.push_back(cs);
            }
        }
        r.finish();
    }
    if (const json* q = root.sub("quant")) {
        detail::ObjectReader r(*q, "quant");
        auto& s = c.quant;
        r.get("w_bits", s.w_bits);
        r.get("a_bits", s.a_bits);
        r.get("p_bits", s.p_bits);
        r.get("cell_bits", s.cell_bits);
        r.get("array_rows", s.array.rows);
        r.get("array_cols", s.array.cols);
        std::string wg(to_string(s.w_gran)), pg(to_string(s.p_gran));
        std::string wi = s.weight_init == WeightInit::Lsq ? "lsq" : "max";
        r.get("w_gran", wg);
        r.get("p_gran", pg);
        r.get("weight_init", wi);
        s.w_gran = detail::read_gran(wg);
        s.p_gran = detail::read_gran(pg);
        require(wi == "lsq" || wi == "max", "quant.weight_init must be lsq or max");
        s.weight_init = wi == "lsq" ? WeightInit::Lsq : WeightInit::MaxAbs;
        r.finish();
    }
    if (const json* t = root.sub("train")) {
        detail::ObjectReader r(*t, "train");
        auto& s = c.train;
        std::string mode(to_string(s.mode));
        r.get("mode", mode);
        s.mode = parse_schedule_mode(mode);
        r.get("stage1_epochs", s.stage1_epochs);
        r.get("stage2_epochs", s.stage2_epochs);
        r.get("batch_size", s.batch_size);
        r.get("lr", s.lr);
        r.get("lr_scale", s.lr_scale);
        r.get("momentum", s.momentum);
        r.get("weight_decay", s.weight_decay);
        r.get("lr_decay_every", s.lr_decay_every);
        r.get("lr_decay", s.lr_decay);
        r.get("quantize", s.quantize);
        r.finish();
    }
    if (const json* v = root.sub("variation")) {
        detail::ObjectReader r(*v, "variation");
        std::string level(to_string(c.variation.level));
        r.get("sigma", c.variation.sigma);
        r.get("level", level);
        r.get("trials", c.variation.trials);
        c.variation.level = parse_variation_level(level);
        r.finish();
    }
    if (const json* s = root.sub("sweep")) {
        detail::ObjectReader r(*s, "sweep");
        r.get("sigmas", c.sweep.sigmas);
        r.get("p_bits", c.sweep.p_bits);
        r.get("train", c.sweep.train);
        r.finish();
    }
    if (const json* h = root.sub("histogram")) {
        detail::ObjectReader r(*h, "histogram");
        r.get("layer", c.histogram.layer);
        r.get("input", c.histogram.input);
        r.get("images", c.histogram.images);
        r.finish();
    }
    if (const json* k = root.sub("checkpoint")) {
        detail::ObjectReader r(*k, "checkpoint");
        r.get("load", c.checkpoint.load);
        r.get("resume", c.checkpoint.resume);
        r.get("every", c.checkpoint.every);
        r.finish();
    }
    root.finish();
    c.validate();
    return c;
}

inline json model_to_json(const ModelSpec& m)
{
    json convs = json::array();
    for (const auto& c : m.convs)
        convs.push_back({{"c_out", c.c_out}, {"kernel", c.kernel}, {"pad", c.pad}, {"pool", c.pool}});
    return {{"in_channels", m.in_channels}, {"num_classes", m.num_classes}, {"convs", convs}};
}

inline json quant_to_json(const QuantConfig& q)
{
    return {{"w_bits", q.w_bits},
            {"a_bits", q.a_bits},
            {"p_bits", q.p_bits},
            {"cell_bits", q.cell_bits},
            {"array_rows", q.array.rows},
            {"array_cols", q.array.cols},
            {"w_gran", to_string(q.w_gran)},
            {"p_gran", to_string(q.p_gran)},
            {"weight_init", q.weight_init == WeightInit::Lsq ? "lsq" : "max"}};
}

/// Fully resolved config, every field present. parse_config(to_json(c)) == c.
inline json to_json(const ExperimentConfig& c)
{
    const auto& d = c.dataset;
    const auto& t = c.train;
    return {{"seed", c.seed},
            {"output_dir", c.output_dir},
            {"dataset",
             {{"source", d.source},
              {"train_count", d.train_count},
              {"test_count", d.test_count},
              {"size", d.synthetic.size},
              {"angle_deg", d.synthetic.angle_deg},
              {"angle_jitter_deg", d.synthetic.angle_jitter_deg},
              {"blob_amplitude", d.synthetic.blob_amplitude},
              {"grating_amplitude", d.synthetic.grating_amplitude},
              {"pixel_noise", d.synthetic.pixel_noise},
              {"background", d.synthetic.background},
              {"train_path", d.train_path},
              {"test_path", d.test_path},
              {"max_records", d.max_records}}},
            {"model", model_to_json(c.model)},
            {"quant", quant_to_json(c.quant)},
            {"train",
             {{"mode", to_string(t.mode)},
              {"stage1_epochs", t.stage1_epochs},
              {"stage2_epochs", t.stage2_epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"lr_scale", t.lr_scale},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"lr_decay_every", t.lr_decay_every},
              {"lr_decay", t.lr_decay},
              {"quantize", t.quantize}}},
            {"variation",
             {{"sigma", c.variation.sigma}, {"level", to_string(c.variation.level)}, {"trials", c.variation.trials}}},
            {"sweep", {{"sigmas", c.sweep.sigmas}, {"p_bits", c.sweep.p_bits}, {"train", c.sweep.train}}},
            {"histogram",
             {{"layer", c.histogram.layer}, {"input", c.histogram.input}, {"images", c.histogram.images}}},
            {"checkpoint",
             {{"load", c.checkpoint.load}, {"resume", c.checkpoint.resume}, {"every", c.checkpoint.every}}}};
}

/// Set a dotted key ("train.lr") to a value parsed as JSON, or kept as a string when it is
/// not valid JSON. Array elements are addressed by index ("model.convs.0.c_out").
inline void apply_override(json& j, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ValidationError("override '" + assignment + "' must look like key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::string& p = parts[i];
        if (p.empty()) throw ValidationError("override key '" + key + "' has an empty component");
        if (node->is_array()) {
            std::size_t idx = 0;
            try {
                idx = std::stoul(p);
            } catch (const std::exception&) {
                throw ValidationError("override key '" + key + "': '" + p + "' is not an array index");
            }
            if (idx >= node->size()) throw ValidationError("override key '" + key + "': index out of range");
            node = &(*node)[idx];
        } else {
            if (node->is_null()) *node = json::object();
            if (!node->is_object()) throw ValidationError("override key '" + key + "' descends into a scalar");
            node = &(*node)[p];
        }
    }
    *node = value;
}

inline json read_json_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

inline std::string hex64(std::uint64_t v)
{
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return s;
}

/// Stable across runs: FNV-1a of the canonical (sorted-key) dump of the resolved config.
/// Hash of the resolved experiment; the output directory does not take part.
inline std::string config_hash(const ExperimentConfig& c)
{
    json j = to_json(c);
    j.erase("output_dir");
    return hex64(fnv1a64(j.dump()));
}

inline std::pair<Dataset, Dataset> load_dataset(const ExperimentConfig& c)
{
    const auto& d = c.dataset;
    if (d.source == "cifar10")
        return {load_cifar10_binary(d.train_path, d.max_records), load_cifar10_binary(d.test_path, d.max_records)};
    SyntheticSpec s = d.synthetic;
    s.count = d.train_count + d.test_count;
    return split_dataset(make_synthetic(s, derive_seed(c.seed, "data")), d.train_count);
}

}  // namespace cimq
