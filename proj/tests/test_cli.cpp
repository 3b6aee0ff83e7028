#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cimq/cli.hpp"

using namespace cimq;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "cimq_test_cli";

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p)
{
    std::vector<std::vector<std::string>> rows;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

json tiny_config()
{
    return json::parse(R"({
        "seed": 3,
        "dataset": {"train_count": 48, "test_count": 24, "size": 8},
        "model": {"convs": [{"c_out": 4, "pool": true}, {"c_out": 6}]},
        "quant": {"array_rows": 16, "array_cols": 16},
        "train": {"stage2_epochs": 1, "batch_size": 16},
        "variation": {"trials": 2},
        "sweep": {"sigmas": [0.0, 0.2], "p_bits": [3, 5], "train": false},
        "histogram": {"images": 4}
    })");
}

fs::path write_config(const std::string& name, const json& j)
{
    fs::create_directories(kRoot);
    const fs::path p = kRoot / (name + ".json");
    std::ofstream(p) << j.dump(2);
    return p;
}

int run(std::vector<std::string> args, std::string* err_out = nullptr)
{
    args.insert(args.begin(), "cimq");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), err);
    if (err_out) *err_out = err.str();
    return code;
}

int run_cmd(const std::string& cmd, const fs::path& cfg, const fs::path& out, std::vector<std::string> extra = {})
{
    std::vector<std::string> args{cmd, "--config", cfg.string(), "--out", out.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
}

}  // namespace

TEST(Cli, MissingConfigFileIsAValidationError)
{
    std::string err;
    EXPECT_EQ(run({"infer", "--config", (kRoot / "does_not_exist.json").string()}, &err), 2);
    EXPECT_NE(err.find("does_not_exist.json"), std::string::npos);
    EXPECT_EQ(run({"infer"}, &err), 2);
    EXPECT_EQ(run({"frobnicate"}, &err), 2);
}

TEST(Cli, InvalidScheduleIsAValidationError)
{
    json j = tiny_config();
    j["train"]["stage1_epochs"] = 2;  // one_stage must not have a first stage
    std::string err;
    EXPECT_EQ(run({"train", "--config", write_config("bad_schedule", j).string()}, &err), 2);
    EXPECT_NE(err.find("one_stage"), std::string::npos);
}

TEST(Cli, RuntimeFailureExitsWithOne)
{
    json j = tiny_config();
    j["dataset"] = {{"source", "cifar10"}, {"train_path", (kRoot / "nope.bin").string()},
                    {"test_path", (kRoot / "nope.bin").string()}};
    j["model"]["in_channels"] = 3;
    j["model"]["num_classes"] = 10;
    EXPECT_EQ(run_cmd("infer", write_config("cifar_missing", j), kRoot / "cifar_missing"), 1);
}

TEST(Cli, InferIsDeterministicAndTraceMatchesCostModel)
{
    const auto cfg = write_config("infer", tiny_config());
    ASSERT_EQ(run_cmd("infer", cfg, kRoot / "infer_a"), 0);
    ASSERT_EQ(run_cmd("infer", cfg, kRoot / "infer_b"), 0);
    for (const char* f : {"infer.csv", "trace.csv", "trace_summary.csv"})
        EXPECT_EQ(slurp(kRoot / "infer_a" / f), slurp(kRoot / "infer_b" / f)) << f;

    const auto summary = read_csv(kRoot / "infer_a" / "trace_summary.csv");
    ASSERT_EQ(summary.size(), 3u);
    for (std::size_t r = 1; r < summary.size(); ++r) {
        EXPECT_EQ(summary[r][6], summary[r][7]);  // traced vs predicted columns
        EXPECT_EQ(summary[r][8], summary[r][9]);  // traced vs predicted dequant multiplies
    }
    const auto c = parse_config(tiny_config());
    const auto report_ = report(model_geometry(c.model, c.quant));
    const auto trace = read_csv(kRoot / "infer_a" / "trace.csv");
    std::size_t expected_rows = 0;
    for (const auto& l : report_.layers) expected_rows += l.n_split * l.n_array * l.n_oc;
    EXPECT_EQ(trace.size(), 1 + expected_rows);
}

TEST(Cli, TrainWritesLogAndResumesExactly)
{
    json j = tiny_config();
    j["train"]["stage2_epochs"] = 3;
    j["checkpoint"]["every"] = 1;
    const auto cfg = write_config("train", j);
    ASSERT_EQ(run_cmd("train", cfg, kRoot / "train_full"), 0);
    const auto log = read_csv(kRoot / "train_full" / "train_log.csv");
    ASSERT_EQ(log.size(), 4u);
    EXPECT_EQ(log[0], (std::vector<std::string>{"epoch", "stage", "loss", "acc", "test_acc", "steps", "psum_quant",
                                                 "psum_clips"}));
    EXPECT_TRUE(fs::exists(kRoot / "train_full" / "checkpoint" / "manifest.json"));
    EXPECT_TRUE(fs::exists(kRoot / "train_full" / "checkpoint_epoch2" / "params.bin"));

    ASSERT_EQ(run_cmd("train", cfg, kRoot / "train_resumed",
                      {"--override", "checkpoint.resume=" + (kRoot / "train_full" / "checkpoint_epoch1").string()}),
              0);
    const auto resumed = read_csv(kRoot / "train_resumed" / "train_log.csv");
    ASSERT_EQ(resumed.size(), 3u);
    EXPECT_EQ(resumed[1], log[2]);
    EXPECT_EQ(resumed[2], log[3]);
    EXPECT_EQ(slurp(kRoot / "train_full" / "checkpoint" / "params.bin"),
              slurp(kRoot / "train_resumed" / "checkpoint" / "params.bin"));

    // a checkpoint trained under different quantization settings is rejected
    EXPECT_EQ(run_cmd("infer", cfg, kRoot / "mismatch",
                      {"--override", "quant.p_bits=6", "--override",
                       "checkpoint.load=" + (kRoot / "train_full" / "checkpoint").string()}),
              2);
}

TEST(Cli, GranularitySweepHasNineRowsWithCostModelOverhead)
{
    const auto cfg = write_config("sweep", tiny_config());
    ASSERT_EQ(run_cmd("sweep", cfg, kRoot / "sweep_g", {"--axis", "granularity"}), 0);
    const auto rows = read_csv(kRoot / "sweep_g" / "sweep.csv");
    ASSERT_EQ(rows.size(), 10u);
    const auto c = parse_config(tiny_config());
    for (std::size_t r = 1; r < rows.size(); ++r) {
        QuantConfig q = c.quant;
        q.w_gran = parse_granularity(rows[r][0]);
        q.p_gran = parse_granularity(rows[r][1]);
        EXPECT_EQ(rows[r][3], std::to_string(report(model_geometry(c.model, q)).total_dequant_mults));
    }
    EXPECT_EQ(run_cmd("sweep", cfg, kRoot / "sweep_x", {"--axis", "depth"}), 2);
}

TEST(Cli, SigmaAndPsumBitSweeps)
{
    const auto cfg = write_config("sweep", tiny_config());
    ASSERT_EQ(run_cmd("sweep", cfg, kRoot / "sweep_s", {"--axis", "sigma"}), 0);
    const auto s = read_csv(kRoot / "sweep_s" / "sweep.csv");
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s[1][4], "0");  // sigma = 0 has no spread across trials

    ASSERT_EQ(run_cmd("infer", cfg, kRoot / "sweep_s_ref"), 0);
    EXPECT_EQ(read_csv(kRoot / "sweep_s_ref" / "infer.csv")[1][1], s[1][3]);

    ASSERT_EQ(run_cmd("sweep", cfg, kRoot / "sweep_p", {"--axis", "p_bits"}), 0);
    const auto p = read_csv(kRoot / "sweep_p" / "sweep.csv");
    ASSERT_EQ(p.size(), 3u);
    EXPECT_EQ(p[1][0], "3");
    EXPECT_EQ(p[2][0], "5");
}

TEST(Cli, HistogramOfZeroInputIsOneBinAtZero)
{
    json j = tiny_config();
    j["histogram"]["input"] = "zeros";
    ASSERT_EQ(run_cmd("histogram", write_config("hist_zero", j), kRoot / "hist_zero"), 0);
    const auto rows = read_csv(kRoot / "hist_zero" / "histogram.csv");
    ASSERT_GT(rows.size(), 1u);
    std::set<std::string> columns;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        EXPECT_EQ(rows[r][1], "0");
        EXPECT_TRUE(columns.insert(rows[r][0]).second) << "column " << rows[r][0] << " has several bins";
    }
}

TEST(Cli, HistogramBinsSumToSampleCount)
{
    const auto cfg = write_config("hist", tiny_config());
    ASSERT_EQ(run_cmd("histogram", cfg, kRoot / "hist_a"), 0);
    ASSERT_EQ(run_cmd("histogram", cfg, kRoot / "hist_b"), 0);
    EXPECT_EQ(slurp(kRoot / "hist_a" / "histogram.csv"), slurp(kRoot / "hist_b" / "histogram.csv"));
    const auto bins = read_csv(kRoot / "hist_a" / "histogram.csv");
    const auto summary = read_csv(kRoot / "hist_a" / "histogram_summary.csv");
    std::map<std::string, std::size_t> totals;
    for (std::size_t r = 1; r < bins.size(); ++r) totals[bins[r][0]] += std::stoull(bins[r][2]);
    // layer 0 sees 4 images of 8×8 outputs per column
    for (std::size_t r = 1; r < summary.size(); ++r) {
        EXPECT_EQ(std::stoull(summary[r][2]), 4u * 8u * 8u);
        EXPECT_EQ(totals[summary[r][0]], 4u * 8u * 8u);
    }
}

TEST(Cli, ColumnWiseWeightsWidenPerColumnCodeRange)
{
    json j = tiny_config();
    j["quant"]["weight_init"] = "max";
    std::map<std::string, std::vector<double>> range;
    for (const char* g : {"column", "layer"}) {
        j["quant"]["w_gran"] = g;
        const auto out = kRoot / (std::string("hg_") + g);
        ASSERT_EQ(run_cmd("histogram", write_config(std::string("hist_") + g, j), out), 0);
        for (const auto& row : read_csv(out / "histogram_summary.csv"))
            if (row[0] != "column_id") range[g].push_back(std::stod(row[6]));
    }
    ASSERT_EQ(range["column"].size(), range["layer"].size());
    ASSERT_FALSE(range["column"].empty());
    for (std::size_t i = 0; i < range["column"].size(); ++i) {
        EXPECT_GE(range["column"][i], range["layer"][i]) << "column " << i;
        EXPECT_EQ(range["column"][i], 7.0);
    }
}

TEST(Cli, CostReportCoversAllNineCombinations)
{
    const auto cfg = write_config("cost", tiny_config());
    ASSERT_EQ(run_cmd("cost-report", cfg, kRoot / "cost"), 0);
    const auto rows = read_csv(kRoot / "cost" / "cost_report.csv");
    ASSERT_EQ(rows.size(), 1u + 9u * 3u);
    std::size_t totals = 0;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r][0] != "total") continue;
        ++totals;
        const auto pg = parse_granularity(rows[r][2]);
        if (pg == Granularity::Layer) EXPECT_EQ(rows[r][6], "2");
    }
    EXPECT_EQ(totals, 9u);
}

TEST(Dataset, SyntheticIsSeeded)
{
    SyntheticSpec s;
    s.count = 20;
    const auto a = make_synthetic(s, 1), b = make_synthetic(s, 1), c = make_synthetic(s, 2);
    EXPECT_EQ(a.images.vec(), b.images.vec());
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.images.vec(), c.images.vec());
    for (double v : a.images.vec()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Dataset, CifarBinaryRecordsAndTruncation)
{
    fs::create_directories(kRoot);
    const fs::path p = kRoot / "cifar.bin";
    std::vector<unsigned char> bytes;
    for (int r = 0; r < 3; ++r) {
        bytes.push_back(static_cast<unsigned char>(r * 4));
        for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<unsigned char>((i + r) % 256));
    }
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    const auto d = load_cifar10_binary(p.string());
    EXPECT_EQ(d.size(), fs::file_size(p) / 3073);
    EXPECT_EQ(d.labels, (std::vector<int>{0, 4, 8}));
    EXPECT_DOUBLE_EQ(d.images.at(1, 0, 0, 0), 1.0 / 255.0);
    EXPECT_DOUBLE_EQ(d.images.at(0, 2, 31, 31), 255.0 / 255.0);  // byte 3071
    EXPECT_EQ(load_cifar10_binary(p.string(), 2).size(), 2u);

    fs::resize_file(p, 2 * 3073 + 100);
    try {
        load_cifar10_binary(p.string());
        FAIL() << "truncated file accepted";
    } catch (const RuntimeError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 6146"), std::string::npos) << e.what();
    }
}

TEST(Config, RoundTripAndUnknownKeys)
{
    const auto c = parse_config(tiny_config());
    EXPECT_EQ(parse_config(to_json(c)), c);
    EXPECT_EQ(to_json(parse_config(to_json(c))), to_json(c));
    EXPECT_EQ(config_hash(c), config_hash(parse_config(tiny_config())));

    json bad = tiny_config();
    bad["quant"]["wbits"] = 4;
    try {
        parse_config(bad);
        FAIL() << "unknown key accepted";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("quant.wbits"), std::string::npos);
    }
    json wrong = tiny_config();
    wrong["seed"] = "one";
    EXPECT_THROW(parse_config(wrong), ValidationError);
    wrong = tiny_config();
    wrong["quant"]["w_gran"] = "row";
    EXPECT_THROW(parse_config(wrong), ValidationError);
}

TEST(Config, OverridesAndHash)
{
    json j = tiny_config();
    apply_override(j, "quant.p_bits=6");
    apply_override(j, "quant.w_gran=layer");
    apply_override(j, "model.convs.1.c_out=12");
    apply_override(j, "sweep.sigmas=[0.5]");
    const auto c = parse_config(j);
    EXPECT_EQ(c.quant.p_bits, 6);
    EXPECT_EQ(c.quant.w_gran, Granularity::Layer);
    EXPECT_EQ(c.model.convs[1].c_out, 12u);
    EXPECT_EQ(c.sweep.sigmas, std::vector<double>{0.5});
    EXPECT_NE(config_hash(c), config_hash(parse_config(tiny_config())));
    EXPECT_THROW(apply_override(j, "no_equals_sign"), ValidationError);
}

TEST(Config, ShippedConfigsParse)
{
    for (const auto& e : fs::directory_iterator(fs::path(CIMQ_SOURCE_DIR) / "configs"))
        if (e.path().extension() == ".json") EXPECT_NO_THROW(parse_config(read_json_file(e.path().string()))) << e.path();
}
