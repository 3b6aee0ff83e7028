#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "cimq/checkpoint.hpp"
#include "cimq/trainer.hpp"

using namespace cimq;

namespace {

ModelSpec small_spec()
{
    ModelSpec s;
    s.convs = {{4, 3, 1, true}, {6, 3, 1, false}};
    return s;
}

QuantConfig small_quant()
{
    QuantConfig q;
    q.array = {16, 16};
    return q;
}

Tensor<double> random_images(std::size_t n, std::size_t hw, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    Tensor<double> x({n, 1, hw, hw});
    for (auto& v : x.vec()) v = d(rng);
    return x;
}

double loss_of(ToyModel& m, const Tensor<double>& x, const std::vector<int>& labels, QuantMode mode)
{
    ModelForwardOptions fo;
    fo.mode = mode;
    return cross_entropy(model_forward(m, x, fo).logits, labels, nullptr, nullptr);
}

Dataset synthetic(std::size_t count, std::uint64_t seed)
{
    SyntheticSpec s;
    s.count = count;
    return make_synthetic(s, seed);
}

}  // namespace

TEST(Trainer, ZeroWeightModelHasUniformLoss)
{
    for (int classes : {2, 5}) {
        ModelSpec spec = small_spec();
        spec.num_classes = classes;
        ToyModel m = make_model(spec, small_quant(), 3);
        std::fill(m.fc_w.vec().begin(), m.fc_w.vec().end(), 0.0);
        std::fill(m.fc_b.begin(), m.fc_b.end(), 0.0);
        const auto x = random_images(4, 8, 1);
        const std::vector<int> labels{0, 1, 1, 0};
        EXPECT_NEAR(loss_of(m, x, labels, QuantMode::Off), std::log(static_cast<double>(classes)), 1e-12);
    }
}

TEST(Trainer, GradientsMatchFiniteDifferencesWithQuantizersOff)
{
    ToyModel m = make_model(small_spec(), small_quant(), 11);
    for (auto& b : m.convs[0].b) b = 0.05;
    const auto x = random_images(3, 8, 2);
    const std::vector<int> labels{1, 0, 1};
    const auto r = forward_backward(m, x, labels, QuantMode::Off);
    auto params = parameters(m);
    std::size_t checked = 0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (params[p].is_scale) {
            for (double g : r.grads.params[p]) EXPECT_EQ(g, 0.0);
            continue;
        }
        auto& v = *params[p].values;
        for (std::size_t i = 0; i < v.size(); i += 1 + v.size() / 12) {
            const double h = 1e-6, orig = v[i];
            v[i] = orig + h;
            const double up = loss_of(m, x, labels, QuantMode::Off);
            v[i] = orig - h;
            const double dn = loss_of(m, x, labels, QuantMode::Off);
            v[i] = orig;
            const double fd = (up - dn) / (2 * h), an = r.grads.params[p][i];
            EXPECT_NEAR(an, fd, 1e-3 * std::max(std::abs(fd), 1e-4)) << params[p].name << "[" << i << "]";
            ++checked;
        }
    }
    EXPECT_GT(checked, 30u);
}

TEST(Trainer, ScaleGradientsComposeFromQuantizerRules)
{
    ToyModel m = make_model(small_spec(), small_quant(), 5);
    const auto x = random_images(4, 8, 9);
    const std::vector<int> labels{0, 1, 0, 1};
    forward_backward(m, x, labels, QuantMode::Full);  // initializes activation and psum scales
    for (QuantMode mode : {QuantMode::WeightAct, QuantMode::Full}) {
        ModelForwardOptions fo;
        fo.mode = mode;
        fo.keep_state = true;
        const auto f = model_forward(m, x, fo);
        Tensor<double> dlogits;
        cross_entropy(f.logits, labels, &dlogits, nullptr);
        const auto g = model_backward(m, f, dlogits, mode);
        for (std::size_t li = 0; li < m.convs.size(); ++li) {
            const auto& l = m.convs[li];
            const auto cg = backward(*f.layers[li].cim, g.conv_grad_out[li]);
            EXPECT_EQ(g.act_scales[li], cg.d_act);
            EXPECT_EQ(g.params[4 * li + 2], cg.d_weight_scales);
            EXPECT_EQ(g.params[4 * li + 3], cg.d_psum_scales);
            if (mode == QuantMode::Full) {
                EXPECT_EQ(g.params[4 * li + 3].size(), l.scales.psum.num_groups());
                continue;
            }
            EXPECT_TRUE(g.params[4 * li + 3].empty() ||
                        std::all_of(g.params[4 * li + 3].begin(), g.params[4 * li + 3].end(),
                                    [](double v) { return v == 0.0; }));
            // with a linear ADC path the activation scale gradient is the LSQ rule on the input quantizer
            const auto& in = f.layers[li].input;
            const auto expect =
                scale_grad(in.vec(), single_scale(l.scales.act, in.size()), l.layout.config().act_spec(),
                           cg.dx_dequant.vec());
            EXPECT_NEAR(g.act_scales[li], expect[0], 1e-9 * std::max(1.0, std::abs(expect[0])));
        }
    }
}

TEST(Trainer, ZeroEpochsLeaveModelUnchanged)
{
    const Dataset d = synthetic(40, 1);
    TrainState s = make_train_state(make_model(small_spec(), small_quant(), 2));
    const ToyModel before = s.model;
    TrainSchedule sched;
    sched.stage2_epochs = 0;
    const auto log = train(s, d, sched, 1);
    EXPECT_TRUE(log.empty());
    auto pa = parameters(s.model);
    ToyModel copy = before;
    auto pb = parameters(copy);
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].values, *pb[i].values) << pa[i].name;
    EXPECT_EQ(s.step, 0u);
}

TEST(Trainer, LossDecreasesOverFirstFiveEpochs)
{
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SyntheticSpec spec;
        spec.count = 1000;
        const Dataset d = make_synthetic(spec, derive_seed(seed, "data"));
        TrainState s = make_train_state(make_model(ModelSpec{}, QuantConfig{}, seed));
        TrainSchedule sched;
        sched.stage2_epochs = 5;
        const auto log = train(s, d, sched, seed);
        ASSERT_EQ(log.size(), 5u);
        EXPECT_LT(log.back().loss, log.front().loss) << "seed " << seed;
    }
}

TEST(Trainer, TwoStageDefersPsumQuantization)
{
    const Dataset d = synthetic(96, 4);
    TrainState s = make_train_state(make_model(small_spec(), small_quant(), 4));
    TrainSchedule sched;
    sched.mode = ScheduleMode::TwoStage;
    sched.stage1_epochs = 2;
    sched.stage2_epochs = 2;
    sched.quantize = true;
    const auto log = train(s, d, sched, 4);
    ASSERT_EQ(log.size(), 4u);
    for (std::size_t e = 0; e < 2; ++e) {
        EXPECT_EQ(log[e].stage, 1);
        EXPECT_FALSE(log[e].psum_quant);
        EXPECT_EQ(log[e].psum_clips, 0u);
    }
    for (std::size_t e = 2; e < 4; ++e) {
        EXPECT_EQ(log[e].stage, 2);
        EXPECT_TRUE(log[e].psum_quant);
    }
    EXPECT_EQ(log.back().steps, 4u * 3u);

    TrainSchedule one;
    one.stage2_epochs = 1;
    TrainState s1 = make_train_state(make_model(small_spec(), small_quant(), 4));
    EXPECT_TRUE(train(s1, d, one, 4).front().psum_quant);
}

TEST(Trainer, ScheduleValidation)
{
    TrainSchedule s;
    s.stage1_epochs = 2;
    EXPECT_THROW(s.validate(), ValidationError);
    s.mode = ScheduleMode::TwoStage;
    s.stage1_epochs = 0;
    EXPECT_THROW(s.validate(), ValidationError);
    s.stage1_epochs = 1;
    EXPECT_NO_THROW(s.validate());
    s.momentum = 1.0;
    EXPECT_THROW(s.validate(), ValidationError);
    EXPECT_THROW(parse_schedule_mode("three_stage"), ValidationError);

    TrainSchedule d;
    d.lr_decay_every = 2;
    d.mode = ScheduleMode::TwoStage;
    d.stage1_epochs = 3;
    EXPECT_EQ(d.lr_factor(0), 1.0);
    EXPECT_NEAR(d.lr_factor(2), 0.1, 1e-15);
    EXPECT_EQ(d.lr_factor(3), 1.0);  // decay restarts with stage 2
    EXPECT_NEAR(d.lr_factor(5), 0.1, 1e-15);
}

TEST(Trainer, TrainingIsDeterministic)
{
    const Dataset d = synthetic(64, 8);
    TrainSchedule sched;
    sched.stage2_epochs = 2;
    TrainState a = make_train_state(make_model(small_spec(), small_quant(), 8));
    TrainState b = make_train_state(make_model(small_spec(), small_quant(), 8));
    const auto la = train(a, d, sched, 8, &d);
    const auto lb = train(b, d, sched, 8, &d);
    ASSERT_EQ(la.size(), lb.size());
    for (std::size_t e = 0; e < la.size(); ++e) {
        EXPECT_EQ(la[e].loss, lb[e].loss);
        EXPECT_EQ(la[e].test_acc, lb[e].test_acc);
    }
    auto pa = parameters(a.model), pb = parameters(b.model);
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].values, *pb[i].values);
}

TEST(Evaluate, RejectsEmptyDataAndIsDeterministic)
{
    ToyModel m = make_model(small_spec(), small_quant(), 1);
    const Dataset d = synthetic(50, 2);
    calibrate(m, d, QuantMode::Full);
    EXPECT_EQ(evaluate(m, d), evaluate(m, d));
    Dataset empty = split_dataset(d, 0).first;
    EXPECT_THROW(evaluate(m, empty), ValidationError);
}

TEST(Evaluate, SeparableDataIsLearned)
{
    SyntheticSpec spec;
    spec.count = 600;
    spec.angle_deg = 45.0;
    spec.angle_jitter_deg = 0.0;
    spec.grating_amplitude = 0.0;
    spec.pixel_noise = 0.0;
    auto [train_set, test_set] = split_dataset(make_synthetic(spec, 21), 400);
    TrainState s = make_train_state(make_model(ModelSpec{}, QuantConfig{}, 21));
    TrainSchedule sched;
    sched.stage2_epochs = 8;
    train(s, train_set, sched, 21);
    EXPECT_GE(evaluate(s.model, test_set), 0.95);
}

TEST(Checkpoint, RoundTripAndExactResume)
{
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "cimq_test_ckpt";
    fs::remove_all(dir);
    const Dataset d = synthetic(64, 6);
    TrainSchedule sched;
    sched.stage2_epochs = 3;

    TrainState full = make_train_state(make_model(small_spec(), small_quant(), 6));
    const auto log_full = train(full, d, sched, 6);

    TrainState part = make_train_state(make_model(small_spec(), small_quant(), 6));
    TrainSchedule first = sched;
    first.stage2_epochs = 1;
    train(part, d, first, 6);
    save_checkpoint(part, dir.string());

    TrainState resumed = load_checkpoint(dir.string(), &part.model.spec, &part.model.quant);
    EXPECT_EQ(resumed.epoch, 1);
    EXPECT_EQ(resumed.step, part.step);
    auto pp = parameters(part.model), pr = parameters(resumed.model);
    for (std::size_t i = 0; i < pp.size(); ++i) EXPECT_EQ(*pp[i].values, *pr[i].values) << pp[i].name;
    EXPECT_EQ(resumed.momentum, part.momentum);

    const auto log_rest = train(resumed, d, sched, 6);
    ASSERT_EQ(log_rest.size(), 2u);
    EXPECT_EQ(log_rest[0].loss, log_full[1].loss);
    EXPECT_EQ(log_rest[1].loss, log_full[2].loss);
    EXPECT_EQ(log_rest[1].steps, log_full[2].steps);

    QuantConfig other = small_quant();
    other.p_bits = 5;
    EXPECT_THROW(load_checkpoint(dir.string(), nullptr, &other), ValidationError);
    fs::resize_file(dir / "params.bin", 8);
    EXPECT_THROW(load_checkpoint(dir.string()), ValidationError);
    EXPECT_THROW(load_checkpoint((dir / "missing").string()), ValidationError);
    fs::remove_all(dir);
}
