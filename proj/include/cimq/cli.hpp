#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cimq/checkpoint.hpp"
#include "cimq/config.hpp"
#include "cimq/cost_model.hpp"
#include "cimq/trainer.hpp"
#include "cimq/variation.hpp"

namespace cimq {

struct CliOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> overrides;
};

/// Config file, then --override assignments, then --seed / --out; validated once at the end.
inline ExperimentConfig resolve_config(const CliOptions& o)
{
    require(!o.config_path.empty(), "--config is required");
    json j = read_json_file(o.config_path);
    for (const auto& ov : o.overrides) apply_override(j, ov);
    if (o.seed) j["seed"] = *o.seed;
    if (o.out) j["output_dir"] = *o.out;
    return parse_config(j);
}

inline std::string fmt_num(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// CSV with a fixed header; every row must have the header's arity.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
        : path_(path), out_(path), arity_(header.size())
    {
        if (!out_) throw RuntimeError("cannot write '" + path.string() + "'");
        write(header);
    }

    void row(const std::vector<std::string>& cells)
    {
        require(cells.size() == arity_, "csv row arity mismatch in " + path_.string());
        write(cells);
    }

private:
    void write(const std::vector<std::string>& cells)
    {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
        out_.flush();
    }

    std::filesystem::path path_;
    std::ofstream out_;
    std::size_t arity_;
};

inline std::string utc_timestamp()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// ResultRecords go to records.jsonl, kept apart from the CSVs because they carry timestamps.
inline void append_record(const ExperimentConfig& c, const std::string& metric, double value)
{
    std::ofstream out(std::filesystem::path(c.output_dir) / "records.jsonl", std::ios::app);
    json r = {{"config_hash", config_hash(c)}, {"metric", metric}, {"value", value}, {"seed", c.seed},
              {"timestamp", utc_timestamp()}};
    out << r.dump() << "\n";
}

inline std::filesystem::path prepare_output(const ExperimentConfig& c)
{
    std::filesystem::create_directories(c.output_dir);
    std::ofstream(std::filesystem::path(c.output_dir) / "config.resolved.json") << to_json(c).dump(2) << "\n";
    return c.output_dir;
}

inline QuantMode eval_mode(const ExperimentConfig& c) { return c.train.quantize ? QuantMode::Full : QuantMode::Off; }

inline std::vector<LayerGeometry> model_geometry(const ModelSpec& m, const QuantConfig& q)
{
    std::vector<LayerGeometry> g;
    std::size_t c_in = m.in_channels;
    for (std::size_t i = 0; i < m.convs.size(); ++i) {
        const auto& cs = m.convs[i];
        g.push_back({"conv" + std::to_string(i), c_in, cs.c_out, cs.kernel, q.array, q.w_bits, q.cell_bits,
                     q.w_gran, q.p_gran});
        c_in = cs.c_out;
    }
    return g;
}

/// The model a read-only command operates on: a loaded checkpoint, a freshly trained model,
/// or the seeded initial model with scales calibrated on the first training batch.
inline ToyModel obtain_model(const ExperimentConfig& c, const Dataset& train_set, const Dataset& test_set,
                             bool train_it)
{
    ToyModel m;
    if (!c.checkpoint.load.empty()) {
        m = load_checkpoint(c.checkpoint.load, &c.model, &c.quant).model;
    } else if (train_it) {
        TrainState s = make_train_state(make_model(c.model, c.quant, c.seed));
        train(s, train_set, c.train, c.seed, nullptr);
        m = std::move(s.model);
    } else {
        m = make_model(c.model, c.quant, c.seed);
    }
    (void)test_set;
    if (eval_mode(c) != QuantMode::Off) calibrate(m, train_set, eval_mode(c));
    return m;
}

inline void cmd_infer(const ExperimentConfig& c)
{
    const auto dir = prepare_output(c);
    auto [train_set, test_set] = load_dataset(c);
    ToyModel m = obtain_model(c, train_set, test_set, false);
    const QuantMode mode = eval_mode(c);
    const auto gains = model_gains(m, c.variation.sigma, c.variation.level, trial_seed(c.seed, 0));

    // accumulate per-column trace counters over the whole test set
    std::vector<CimTrace> traces;
    std::size_t correct = 0, clips = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < test_set.size(); start += 100) {
        const std::size_t end = std::min(test_set.size(), start + 100);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        ModelForwardOptions fo;
        fo.mode = mode;
        fo.gains = &gains;
        auto f = model_forward(m, test_set.batch(idx), fo);
        const auto lab = test_set.batch_labels(idx);
        std::size_t hits = 0;
        cross_entropy(f.logits, lab, nullptr, &hits);
        correct += hits;
        clips += f.psum_clips;
        if (traces.empty()) {
            traces = std::move(f.traces);
            continue;
        }
        for (std::size_t l = 0; l < traces.size(); ++l)
            for (std::size_t j = 0; j < traces[l].columns.size(); ++j) {
                traces[l].columns[j].samples += f.traces[l].columns[j].samples;
                traces[l].columns[j].clips += f.traces[l].columns[j].clips;
            }
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(test_set.size());
    const auto overhead = report(model_geometry(c.model, c.quant));

    CsvWriter inf(dir / "infer.csv", {"metric", "value"});
    inf.row({"accuracy", fmt_num(acc)});
    inf.row({"test_images", std::to_string(test_set.size())});
    inf.row({"psum_clips", std::to_string(clips)});
    inf.row({"dequant_mults", std::to_string(overhead.total_dequant_mults)});
    inf.row({"config_hash", config_hash(c)});

    CsvWriter tr(dir / "trace.csv", {"layer", "column_id", "array", "out_channel", "split", "weight_scale",
                                     "psum_scale", "samples", "clips"});
    CsvWriter sum(dir / "trace_summary.csv", {"layer", "w_gran", "p_gran", "n_array", "n_oc", "n_split",
                                              "traced_columns", "predicted_columns", "trace_dequant_mults",
                                              "predicted_dequant_mults"});
    for (std::size_t l = 0; l < traces.size(); ++l) {
        for (const auto& col : traces[l].columns)
            tr.row({std::to_string(l), std::to_string(col.column_id), std::to_string(col.array),
                    std::to_string(col.out_channel), std::to_string(col.split), fmt_num(col.weight_scale),
                    fmt_num(col.psum_scale), std::to_string(col.samples), std::to_string(col.clips)});
        const auto& lo = overhead.layers[l];
        const auto& plan = m.convs[l].layout.plan();
        sum.row({std::to_string(l), std::string(to_string(lo.w_gran)), std::string(to_string(lo.p_gran)),
                 std::to_string(lo.n_array), std::to_string(lo.n_oc), std::to_string(lo.n_split),
                 std::to_string(traces[l].distinct_columns()),
                 std::to_string(scale_groups(Granularity::Column, plan, lo.n_split)),
                 std::to_string(traces[l].dequant_mults), std::to_string(lo.dequant_mults)});
    }
    append_record(c, "accuracy", acc);
    std::cout << "accuracy " << fmt_num(acc) << " on " << test_set.size() << " images\n";
}

inline void write_train_row(CsvWriter& w, const EpochLog& r)
{
    w.row({std::to_string(r.epoch), std::to_string(r.stage), fmt_num(r.loss), fmt_num(r.acc), fmt_num(r.test_acc),
           std::to_string(r.steps), r.psum_quant ? "1" : "0", std::to_string(r.psum_clips)});
}

inline const std::vector<std::string> kTrainLogHeader{"epoch", "stage", "loss", "acc", "test_acc",
                                                      "steps", "psum_quant", "psum_clips"};

inline void cmd_train(const ExperimentConfig& c)
{
    const auto dir = prepare_output(c);
    auto [train_set, test_set] = load_dataset(c);
    TrainState s = c.checkpoint.resume.empty() ? make_train_state(make_model(c.model, c.quant, c.seed))
                                               : load_checkpoint(c.checkpoint.resume, &c.model, &c.quant);
    require(s.epoch <= c.train.total_epochs(), "checkpoint is past the end of the schedule");
    CsvWriter log(dir / "train_log.csv", kTrainLogHeader);
    const auto rows = train(s, train_set, c.train, c.seed, &test_set, [&](const EpochLog& r, const TrainState& st) {
        write_train_row(log, r);
        if (c.checkpoint.every > 0 && r.epoch % c.checkpoint.every == 0)
            save_checkpoint(st, (dir / ("checkpoint_epoch" + std::to_string(r.epoch))).string());
        std::cout << "epoch " << r.epoch << " stage " << r.stage << " loss " << fmt_num(r.loss) << " test_acc "
                  << fmt_num(r.test_acc) << "\n";
    });
    save_checkpoint(s, (dir / "checkpoint").string());
    if (!rows.empty()) {
        append_record(c, "final_loss", rows.back().loss);
        append_record(c, "final_test_acc", rows.back().test_acc);
    }
}

inline double train_and_evaluate(const ExperimentConfig& c, const Dataset& train_set, const Dataset& test_set)
{
    ToyModel m = obtain_model(c, train_set, test_set, c.sweep.train);
    return evaluate(m, test_set, {eval_mode(c)});
}

inline void cmd_sweep(const ExperimentConfig& c, const std::string& axis)
{
    const auto dir = prepare_output(c);
    auto [train_set, test_set] = load_dataset(c);
    if (axis == "granularity") {
        CsvWriter w(dir / "sweep.csv",
                    {"w_gran", "p_gran", "test_acc", "dequant_mults", "stored_w", "stored_p", "stored_fused"});
        for (auto wg : kAllGranularities)
            for (auto pg : kAllGranularities) {
                ExperimentConfig v = c;
                v.quant.w_gran = wg;
                v.quant.p_gran = pg;
                const double acc = train_and_evaluate(v, train_set, test_set);
                const auto o = report(model_geometry(v.model, v.quant));
                w.row({std::string(to_string(wg)), std::string(to_string(pg)), fmt_num(acc),
                       std::to_string(o.total_dequant_mults), std::to_string(o.total_stored_w),
                       std::to_string(o.total_stored_p), std::to_string(o.total_stored_fused)});
                append_record(v, "test_acc", acc);
            }
    } else if (axis == "p_bits") {
        CsvWriter w(dir / "sweep.csv", {"p_bits", "test_acc", "dequant_mults"});
        for (int b : c.sweep.p_bits) {
            ExperimentConfig v = c;
            v.quant.p_bits = b;
            v.validate();
            const double acc = train_and_evaluate(v, train_set, test_set);
            w.row({std::to_string(b), fmt_num(acc),
                   std::to_string(report(model_geometry(v.model, v.quant)).total_dequant_mults)});
            append_record(v, "test_acc", acc);
        }
    } else if (axis == "sigma") {
        const ToyModel m = obtain_model(c, train_set, test_set, c.sweep.train);
        VariationSpec spec{0.0, c.variation.level, c.seed, c.variation.trials};
        const QuantMode mode = eval_mode(c);
        auto eval = [&](double sigma, VariationLevel level, std::uint64_t seed) {
            const auto gains = model_gains(m, sigma, level, seed);
            return evaluate(m, test_set, {mode, 100, &gains});
        };
        const auto rows = variation_sweep(eval, c.sweep.sigmas, spec);
        CsvWriter w(dir / "sweep.csv", {"sigma", "level", "trials", "mean_acc", "std_acc"});
        for (const auto& r : rows) {
            w.row({fmt_num(r.sigma), std::string(to_string(c.variation.level)), std::to_string(c.variation.trials),
                   fmt_num(r.mean_accuracy), fmt_num(r.std_accuracy)});
            append_record(c, "mean_acc@sigma=" + fmt_num(r.sigma), r.mean_accuracy);
        }
    } else {
        throw ValidationError("unknown sweep axis '" + axis + "' (expected granularity, sigma or p_bits)");
    }
}

inline void cmd_histogram(const ExperimentConfig& c)
{
    const auto dir = prepare_output(c);
    auto [train_set, test_set] = load_dataset(c);
    ToyModel m = obtain_model(c, train_set, test_set, false);
    const std::size_t n = std::min(c.histogram.images, test_set.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Tensor<double> x = test_set.batch(idx);
    if (c.histogram.input == "zeros") std::fill(x.vec().begin(), x.vec().end(), 0.0);
    ModelForwardOptions fo;
    fo.mode = QuantMode::Full;
    fo.trace = TraceLevel::Samples;
    fo.keep_state = true;
    const auto f = model_forward(m, x, fo);
    const auto& trace = f.traces.at(c.histogram.layer);
    const ForwardCache& cache = *f.layers.at(c.histogram.layer).cim;
    const CimLayout& layout = cache.layout;
    const std::size_t kk = layout.plan().kernel_area(), e_total = layout.plan().c_in * kk;

    CsvWriter h(dir / "histogram.csv", {"column_id", "bin", "count"});
    CsvWriter s(dir / "histogram_summary.csv",
                {"column_id", "split", "samples", "min", "max", "range", "weight_code_max"});
    for (const auto& col : trace.columns) {
        std::map<long long, std::size_t> bins;
        for (double v : col.values) ++bins[std::llround(v)];
        for (const auto& [b, cnt] : bins) h.row({std::to_string(col.column_id), std::to_string(b), std::to_string(cnt)});
        const long long lo = bins.empty() ? 0 : bins.begin()->first, hi = bins.empty() ? 0 : bins.rbegin()->first;
        // largest |weight code| among the weights stored in this column, before bit-splitting
        const auto& lc = layout.columns()[layout.ordinal_of(col.column_id)];
        const double* wc = cache.weight_codes.data() + lc.split * layout.weight_elements() + lc.oc * e_total;
        double code_max = 0.0;
        for (std::size_t e = lc.ci_begin * kk; e < lc.ci_end * kk; ++e) code_max = std::max(code_max, std::abs(wc[e]));
        s.row({std::to_string(col.column_id), std::to_string(col.split), std::to_string(col.values.size()),
               std::to_string(lo), std::to_string(hi), std::to_string(hi - lo), fmt_num(code_max)});
    }
}

inline void cmd_cost_report(const ExperimentConfig& c)
{
    const auto dir = prepare_output(c);
    CsvWriter w(dir / "cost_report.csv", {"layer", "w_gran", "p_gran", "n_array", "n_oc", "n_split", "dequant_mults",
                                          "stored_fused", "stored_w", "stored_p"});
    for (auto wg : kAllGranularities)
        for (auto pg : kAllGranularities) {
            QuantConfig q = c.quant;
            q.w_gran = wg;
            q.p_gran = pg;
            const auto r = report(model_geometry(c.model, q));
            const std::string ws(to_string(wg)), ps(to_string(pg));
            for (const auto& l : r.layers)
                w.row({l.layer, ws, ps, std::to_string(l.n_array), std::to_string(l.n_oc), std::to_string(l.n_split),
                       std::to_string(l.dequant_mults), std::to_string(l.storage.stored_fused),
                       std::to_string(l.storage.stored_w), std::to_string(l.storage.stored_p)});
            w.row({"total", ws, ps, "", "", "", std::to_string(r.total_dequant_mults),
                   std::to_string(r.total_stored_fused), std::to_string(r.total_stored_w),
                   std::to_string(r.total_stored_p)});
        }
}

/// Entry point of the `cimq` tool. Exit codes: 0 success, 2 validation error, 1 runtime error.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr)
{
    CLI::App app{"Compute-in-memory convolution simulator"};
    app.require_subcommand(1);
    CliOptions opt;
    std::string axis;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "experiment config (JSON)")->required();
        sub->add_option("--seed", opt.seed, "root seed, overrides the config");
        sub->add_option("--out", opt.out, "output directory, overrides the config");
        sub->add_option("--override", opt.overrides, "key=value applied to the config (repeatable)");
    };
    auto* infer = app.add_subcommand("infer", "evaluate a model and export the column trace");
    auto* trn = app.add_subcommand("train", "quantization-aware training");
    auto* sweep = app.add_subcommand("sweep", "sweep granularity, sigma or p_bits");
    auto* hist = app.add_subcommand("histogram", "per-column partial-sum histograms");
    auto* cost = app.add_subcommand("cost-report", "dequantization overhead per layer");
    for (auto* s : {infer, trn, sweep, hist, cost}) add_common(s);
    sweep->add_option("--axis", axis, "granularity | sigma | p_bits")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        const ExperimentConfig c = resolve_config(opt);
        if (infer->parsed()) cmd_infer(c);
        else if (trn->parsed()) cmd_train(c);
        else if (sweep->parsed()) cmd_sweep(c, axis);
        else if (hist->parsed()) cmd_histogram(c);
        else cmd_cost_report(c);
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cimq
