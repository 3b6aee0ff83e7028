#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cimq/cim_conv.hpp"
#include "cimq/dataset.hpp"
#include "cimq/error.hpp"
#include "cimq/rng.hpp"
#include "cimq/variation.hpp"

namespace cimq {

/// Off: full-precision convolution. WeightAct: weight and activation quantizers, ideal ADC.
/// Full: weight, activation and partial-sum quantizers.
enum class QuantMode { Off, WeightAct, Full };

inline std::string_view to_string(QuantMode m) noexcept
{
    switch (m) {
    case QuantMode::Off: return "off";
    case QuantMode::WeightAct: return "weight_act";
    case QuantMode::Full: return "full";
    }
    return "off";
}

struct ConvSpec {
    std::size_t c_out = 8;
    std::size_t kernel = 3;
    std::size_t pad = 1;
    bool pool = false;  // 2×2 average pooling after the ReLU

    bool operator==(const ConvSpec&) const = default;
};

/// conv → bias → ReLU (→ avgpool) per block, then global average pooling and a dense classifier.
struct ModelSpec {
    std::size_t in_channels = 1;
    std::vector<ConvSpec> convs{{8, 3, 1, true}, {16, 3, 1, false}};
    int num_classes = 2;

    void validate() const
    {
        require(in_channels >= 1, "model in_channels must be >= 1");
        require(!convs.empty(), "model needs at least one conv layer");
        require(num_classes >= 2, "model num_classes must be >= 2");
        for (const auto& c : convs) {
            require(c.c_out >= 1, "conv c_out must be >= 1");
            require(c.kernel >= 1 && c.kernel % 2 == 1, "conv kernel must be odd");
        }
    }
    bool operator==(const ModelSpec&) const = default;
};

struct QuantConfig {
    int w_bits = 4;
    int a_bits = 4;
    int p_bits = 4;
    int cell_bits = 2;
    ArrayShape array{32, 32};
    Granularity w_gran = Granularity::Column;
    Granularity p_gran = Granularity::Column;
    WeightInit weight_init = WeightInit::Lsq;

    CimLayerConfig layer_config(std::size_t pad, bool psum_quant) const
    {
        CimLayerConfig c;
        c.w_bits = w_bits;
        c.a_bits = a_bits;
        c.p_bits = p_bits;
        c.cell_bits = cell_bits;
        c.array = array;
        c.w_gran = w_gran;
        c.p_gran = p_gran;
        c.pad = pad;
        c.psum_quant = psum_quant;
        return c;
    }
    void validate() const { layer_config(0, true).validate(); }
    bool operator==(const QuantConfig&) const = default;
};

struct ConvLayer {
    ConvSpec spec;
    std::size_t c_in = 0;
    CimLayout layout;       // partial-sum quantization on
    CimLayout layout_ideal; // ADC bypassed
    Tensor<double> w;
    std::vector<double> b;
    CimScales scales;
    bool act_ready = false;
    bool psum_ready = false;
};

struct ToyModel {
    ModelSpec spec;
    QuantConfig quant;
    std::vector<ConvLayer> convs;
    Tensor<double> fc_w;  // [num_classes, C_last]
    std::vector<double> fc_b;
};

inline double to_f32(double v) noexcept { return static_cast<double>(static_cast<float>(v)); }

/// He-normal conv weights, zero biases; weight scales initialized from the weights.
/// Every parameter is float32-representable.
inline ToyModel make_model(const ModelSpec& spec, const QuantConfig& quant, std::uint64_t seed)
{
    spec.validate();
    quant.validate();
    ToyModel m;
    m.spec = spec;
    m.quant = quant;
    Rng rng(derive_seed(seed, "init"));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t c_in = spec.in_channels;
    for (const auto& cs : spec.convs) {
        ConvLayer l;
        l.spec = cs;
        l.c_in = c_in;
        l.layout = CimLayout(c_in, cs.c_out, cs.kernel, quant.layer_config(cs.pad, true));
        l.layout_ideal = CimLayout(c_in, cs.c_out, cs.kernel, quant.layer_config(cs.pad, false));
        l.w = Tensor<double>({cs.c_out, c_in, cs.kernel, cs.kernel});
        const double std_w = std::sqrt(2.0 / static_cast<double>(c_in * cs.kernel * cs.kernel));
        for (auto& v : l.w.vec()) v = to_f32(std_w * normal(rng));
        l.b.assign(cs.c_out, 0.0);
        l.scales.act = 1.0;
        l.scales.weight = init_weight_scales(l.w, l.layout, quant.weight_init);
        for (auto& v : l.scales.weight.values) v = to_f32(v);
        l.scales.psum = uniform_psum_scales(l.layout);
        m.convs.push_back(std::move(l));
        c_in = cs.c_out;
    }
    m.fc_w = Tensor<double>({static_cast<std::size_t>(spec.num_classes), c_in});
    const double std_fc = std::sqrt(1.0 / static_cast<double>(c_in));
    for (auto& v : m.fc_w.vec()) v = to_f32(std_fc * normal(rng));
    m.fc_b.assign(static_cast<std::size_t>(spec.num_classes), 0.0);
    return m;
}

/// Named views over every trainable parameter, in a fixed order.
struct ParamRef {
    std::string name;
    std::vector<double>* values;
    bool is_scale;
};

inline std::vector<ParamRef> parameters(ToyModel& m)
{
    std::vector<ParamRef> p;
    for (std::size_t i = 0; i < m.convs.size(); ++i) {
        auto& l = m.convs[i];
        const std::string pre = "conv" + std::to_string(i) + ".";
        p.push_back({pre + "w", &l.w.vec(), false});
        p.push_back({pre + "b", &l.b, false});
        p.push_back({pre + "s_w", &l.scales.weight.values, true});
        p.push_back({pre + "s_p", &l.scales.psum.values, true});
    }
    p.push_back({"fc.w", &m.fc_w.vec(), false});
    p.push_back({"fc.b", &m.fc_b, false});
    return p;
}

/// Activation scales are scalars; they are exposed separately from parameters().
inline std::vector<double*> activation_scales(ToyModel& m)
{
    std::vector<double*> out;
    for (auto& l : m.convs) out.push_back(&l.scales.act);
    return out;
}

struct LayerState {
    Tensor<double> input;
    std::shared_ptr<const ForwardCache> cim;
    Tensor<double> pre_relu;  // conv output + bias
    Tensor<double> post_relu;
};

struct ModelForwardOptions {
    QuantMode mode = QuantMode::Full;
    bool keep_state = false;
    bool init_missing = false;  // initialize activation / psum scales from this batch
    TraceLevel trace = TraceLevel::Counts;
    const std::vector<std::vector<double>>* gains = nullptr;  // per conv layer, see ForwardOptions
};

struct ModelForward {
    Tensor<double> logits;  // [N, num_classes]
    std::vector<LayerState> layers;
    Tensor<double> features;  // [N, C_last]
    std::vector<CimTrace> traces;
    std::size_t psum_clips = 0;
};

namespace detail {

inline Tensor<double> avgpool2(const Tensor<double>& x)
{
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
    Tensor<double> out({n, c, h, w}, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx)
                    out.at(b, ch, y, xx) = 0.25 * (x.at(b, ch, 2 * y, 2 * xx) + x.at(b, ch, 2 * y, 2 * xx + 1) +
                                                   x.at(b, ch, 2 * y + 1, 2 * xx) + x.at(b, ch, 2 * y + 1, 2 * xx + 1));
    return out;
}

inline Tensor<double> avgpool2_backward(const Tensor<double>& g, const Shape& in_shape)
{
    Tensor<double> out(in_shape, 0.0);
    for (std::size_t b = 0; b < g.dim(0); ++b)
        for (std::size_t ch = 0; ch < g.dim(1); ++ch)
            for (std::size_t y = 0; y < g.dim(2); ++y)
                for (std::size_t xx = 0; xx < g.dim(3); ++xx) {
                    const double v = 0.25 * g.at(b, ch, y, xx);
                    out.at(b, ch, 2 * y, 2 * xx) = v;
                    out.at(b, ch, 2 * y, 2 * xx + 1) = v;
                    out.at(b, ch, 2 * y + 1, 2 * xx) = v;
                    out.at(b, ch, 2 * y + 1, 2 * xx + 1) = v;
                }
    return out;
}

}  // namespace detail

inline void check_input(const ToyModel& m, const Tensor<double>& x)
{
    require(x.rank() == 4 && x.dim(0) >= 1, "batch must be non-empty NCHW");
    require(x.dim(1) == m.spec.in_channels, "input channels " + std::to_string(x.dim(1)) +
                                                " do not match model in_channels " +
                                                std::to_string(m.spec.in_channels));
    std::size_t h = x.dim(2), w = x.dim(3);
    for (const auto& l : m.convs) {
        h = conv_out_size(h, l.spec.kernel, 1, l.spec.pad);
        w = conv_out_size(w, l.spec.kernel, 1, l.spec.pad);
        if (l.spec.pool) {
            require(h % 2 == 0 && w % 2 == 0, "average pooling needs even feature maps");
            h /= 2;
            w /= 2;
        }
    }
}

/// Forward through the whole model. With `init_missing`, scales that are not yet
/// initialized are set from this batch before they are used (hence the mutable model).
inline ModelForward model_forward(ToyModel& m, const Tensor<double>& x, const ModelForwardOptions& opt)
{
    check_input(m, x);
    ModelForward r;
    Tensor<double> h = x;
    for (std::size_t li = 0; li < m.convs.size(); ++li) {
        ConvLayer& l = m.convs[li];
        LayerState st;
        Tensor<double> y;
        if (opt.mode == QuantMode::Off) {
            y = reference_forward(h, l.w, 1, l.spec.pad);
        } else {
            if (!l.act_ready) {
                require(opt.init_missing, "activation scale of conv" + std::to_string(li) + " is not initialized");
                l.scales.act = to_f32(init_scales(h.vec(), l.layout.config().act_spec(),
                                                  std::vector<std::size_t>(h.size(), 0))
                                          .values[0]);
                l.act_ready = true;
            }
            const bool full = opt.mode == QuantMode::Full;
            if (full && !l.psum_ready) {
                require(opt.init_missing, "psum scales of conv" + std::to_string(li) + " are not initialized");
                l.scales.psum = init_psum_scales(observe_psums(h, l.w, l.layout, l.scales), l.layout);
                for (auto& v : l.scales.psum.values) v = to_f32(v);
                l.psum_ready = true;
            }
            ForwardOptions fo;
            fo.trace = opt.trace;
            fo.keep_cache = opt.keep_state;
            if (opt.gains && !(*opt.gains)[li].empty()) fo.cell_gain = (*opt.gains)[li];
            auto fr = forward(h, l.w, full ? l.layout : l.layout_ideal, l.scales, fo);
            y = std::move(fr.out);
            if (full) r.psum_clips += fr.trace.total_clips();
            st.cim = std::move(fr.cache);
            r.traces.push_back(std::move(fr.trace));
        }
        const std::size_t plane = y.dim(2) * y.dim(3);
        for (std::size_t b = 0; b < y.dim(0); ++b)
            for (std::size_t c = 0; c < y.dim(1); ++c) {
                double* p = y.data() + (b * y.dim(1) + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) p[i] += l.b[c];
            }
        Tensor<double> a = y;
        for (auto& v : a.vec()) v = std::max(v, 0.0);
        Tensor<double> next = l.spec.pool ? detail::avgpool2(a) : a;
        if (opt.keep_state) {
            st.input = std::move(h);
            st.pre_relu = std::move(y);
            st.post_relu = std::move(a);
            r.layers.push_back(std::move(st));
        }
        h = std::move(next);
    }
    const std::size_t n = h.dim(0), c = h.dim(1), plane = h.dim(2) * h.dim(3);
    Tensor<double> feat({n, c}, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = h.data() + (b * c + ch) * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            feat[b * c + ch] = s / static_cast<double>(plane);
        }
    const std::size_t k = m.fc_b.size();
    r.logits = Tensor<double>({n, k}, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < k; ++o) {
            double s = m.fc_b[o];
            for (std::size_t ch = 0; ch < c; ++ch) s += m.fc_w[o * c + ch] * feat[b * c + ch];
            r.logits[b * k + o] = s;
        }
    r.features = std::move(feat);
    return r;
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
inline double cross_entropy(const Tensor<double>& logits, std::span<const int> labels, Tensor<double>* grad,
                            std::size_t* correct = nullptr)
{
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    require(labels.size() == n, "label count does not match batch");
    if (grad) *grad = Tensor<double>(logits.shape(), 0.0);
    double loss = 0.0;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const double* z = logits.data() + b * k;
        require(labels[b] >= 0 && static_cast<std::size_t>(labels[b]) < k, "label out of range");
        const std::size_t arg = static_cast<std::size_t>(std::max_element(z, z + k) - z);
        if (arg == static_cast<std::size_t>(labels[b])) ++hits;
        const double zmax = z[arg];
        double sum = 0.0;
        for (std::size_t o = 0; o < k; ++o) sum += std::exp(z[o] - zmax);
        loss += std::log(sum) + zmax - z[labels[b]];
        if (grad)
            for (std::size_t o = 0; o < k; ++o)
                (*grad)[b * k + o] =
                    (std::exp(z[o] - zmax) / sum - (o == static_cast<std::size_t>(labels[b]) ? 1.0 : 0.0)) /
                    static_cast<double>(n);
    }
    if (correct) *correct = hits;
    return loss / static_cast<double>(n);
}

/// Gradients aligned with parameters(): one vector per entry, plus activation scales.
struct ModelGrads {
    std::vector<std::vector<double>> params;
    std::vector<double> act_scales;
    std::vector<Tensor<double>> conv_grad_out;  // ∂L/∂(conv output) per layer
};

inline ModelGrads model_backward(ToyModel& m, const ModelForward& f, const Tensor<double>& dlogits,
                                 QuantMode mode)
{
    require(f.layers.size() == m.convs.size(), "model_backward needs a forward pass with keep_state");
    const std::size_t n = f.features.dim(0), c = f.features.dim(1), k = m.fc_b.size();
    const std::size_t nl = m.convs.size();
    ModelGrads g;
    g.params.resize(4 * nl + 2);
    g.act_scales.assign(nl, 0.0);
    g.conv_grad_out.resize(nl);

    std::vector<double> dfw(k * c, 0.0), dfb(k, 0.0);
    Tensor<double> dfeat({n, c}, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < k; ++o) {
            const double d = dlogits[b * k + o];
            dfb[o] += d;
            for (std::size_t ch = 0; ch < c; ++ch) {
                dfw[o * c + ch] += d * f.features[b * c + ch];
                dfeat[b * c + ch] += d * m.fc_w[o * c + ch];
            }
        }
    g.params[4 * nl] = std::move(dfw);
    g.params[4 * nl + 1] = std::move(dfb);

    // global average pooling
    const LayerState& last = f.layers.back();
    Shape hs = last.post_relu.shape();
    if (m.convs.back().spec.pool) hs = {hs[0], hs[1], hs[2] / 2, hs[3] / 2};
    Tensor<double> dh(hs, 0.0);
    const std::size_t plane = hs[2] * hs[3];
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double v = dfeat[b * c + ch] / static_cast<double>(plane);
            double* p = dh.data() + (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] = v;
        }

    for (std::size_t li = nl; li-- > 0;) {
        ConvLayer& l = m.convs[li];
        const LayerState& st = f.layers[li];
        Tensor<double> da = l.spec.pool ? detail::avgpool2_backward(dh, st.post_relu.shape()) : std::move(dh);
        for (std::size_t i = 0; i < da.size(); ++i)
            if (st.pre_relu[i] <= 0.0) da[i] = 0.0;
        std::vector<double> db(l.b.size(), 0.0);
        const std::size_t pl = da.dim(2) * da.dim(3);
        for (std::size_t b = 0; b < da.dim(0); ++b)
            for (std::size_t ch = 0; ch < da.dim(1); ++ch) {
                const double* p = da.data() + (b * da.dim(1) + ch) * pl;
                for (std::size_t i = 0; i < pl; ++i) db[ch] += p[i];
            }
        g.params[4 * li + 1] = std::move(db);
        if (mode == QuantMode::Off) {
            auto cg = reference_backward(st.input, l.w, da, 1, l.spec.pad);
            g.params[4 * li] = std::move(cg.dw.vec());
            g.params[4 * li + 2].assign(l.scales.weight.values.size(), 0.0);
            g.params[4 * li + 3].assign(l.scales.psum.values.size(), 0.0);
            dh = std::move(cg.dx);
        } else {
            auto cg = backward(*st.cim, da);
            g.params[4 * li] = std::move(cg.dw.vec());
            g.params[4 * li + 2] = std::move(cg.d_weight_scales);
            g.params[4 * li + 3] = std::move(cg.d_psum_scales);
            g.act_scales[li] = cg.d_act;
            dh = std::move(cg.dx);
        }
        g.conv_grad_out[li] = std::move(da);
    }
    return g;
}

struct StepResult {
    double loss = 0.0;
    std::size_t correct = 0;
    std::size_t psum_clips = 0;
    ModelGrads grads;
};

/// Loss and all gradients for one batch. A non-finite loss is an error.
inline StepResult forward_backward(ToyModel& m, const Tensor<double>& x, std::span<const int> labels,
                                   QuantMode mode, bool init_missing = true)
{
    ModelForwardOptions opt;
    opt.mode = mode;
    opt.keep_state = true;
    opt.init_missing = init_missing;
    auto f = model_forward(m, x, opt);
    StepResult r;
    Tensor<double> dlogits;
    r.loss = cross_entropy(f.logits, labels, &dlogits, &r.correct);
    if (!std::isfinite(r.loss)) {
        double zmax = 0.0;
        for (double z : f.logits.vec()) zmax = std::max(zmax, std::abs(z));
        throw RuntimeError("non-finite loss (max |logit| = " + std::to_string(zmax) + ", mode " +
                           std::string(to_string(mode)) + ")");
    }
    r.psum_clips = f.psum_clips;
    r.grads = model_backward(m, f, dlogits, mode);
    return r;
}

enum class ScheduleMode { OneStage, TwoStage };

inline std::string_view to_string(ScheduleMode m) noexcept
{
    return m == ScheduleMode::OneStage ? "one_stage" : "two_stage";
}

inline ScheduleMode parse_schedule_mode(std::string_view s)
{
    if (s == "one_stage") return ScheduleMode::OneStage;
    if (s == "two_stage") return ScheduleMode::TwoStage;
    throw ValidationError("unknown schedule mode '" + std::string(s) + "' (expected one_stage or two_stage)");
}

/// OneStage quantizes weights, activations and partial-sums from step 0 and runs
/// stage2_epochs. TwoStage trains stage1_epochs with an ideal ADC, then stage2_epochs with
/// partial-sum quantization. `quantize = false` trains the full-precision reference.
struct TrainSchedule {
    ScheduleMode mode = ScheduleMode::OneStage;
    int stage1_epochs = 0;
    int stage2_epochs = 15;
    std::size_t batch_size = 32;
    double lr = 0.2;
    double lr_scale = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int lr_decay_every = 10;  // epochs within a stage; 0 disables step decay
    double lr_decay = 0.1;
    bool quantize = true;

    int total_epochs() const noexcept { return stage1_epochs + stage2_epochs; }
    int psum_quant_enabled_from() const noexcept { return mode == ScheduleMode::TwoStage ? stage1_epochs : 0; }
    int stage_of(int epoch) const noexcept { return epoch < stage1_epochs ? 1 : 2; }

    QuantMode quant_mode(int epoch) const noexcept
    {
        if (!quantize) return QuantMode::Off;
        return epoch < psum_quant_enabled_from() ? QuantMode::WeightAct : QuantMode::Full;
    }

    double lr_factor(int epoch) const noexcept
    {
        if (lr_decay_every <= 0) return 1.0;
        const int in_stage = epoch < stage1_epochs ? epoch : epoch - stage1_epochs;
        return std::pow(lr_decay, in_stage / lr_decay_every);
    }

    void validate() const
    {
        require(stage1_epochs >= 0 && stage2_epochs >= 0, "epoch counts must be >= 0");
        if (mode == ScheduleMode::OneStage)
            require(stage1_epochs == 0, "one_stage schedule must have stage1_epochs = 0");
        else
            require(stage1_epochs >= 1 && stage2_epochs >= 1,
                    "two_stage schedule needs stage1_epochs >= 1 and stage2_epochs >= 1");
        require(batch_size >= 1, "batch_size must be >= 1");
        require(lr > 0.0 && lr_scale >= 0.0, "learning rates must be positive");
        require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
        require(weight_decay >= 0.0, "weight_decay must be >= 0");
        require(lr_decay_every >= 0 && lr_decay > 0.0, "invalid learning-rate decay");
    }
    bool operator==(const TrainSchedule&) const = default;
};

/// Model plus optimizer state; everything needed to resume training exactly.
struct TrainState {
    ToyModel model;
    std::vector<std::vector<double>> momentum;  // aligned with parameters()
    std::vector<double> act_momentum;
    int epoch = 0;  // epochs completed
    std::size_t step = 0;
};

inline TrainState make_train_state(ToyModel model)
{
    TrainState s;
    s.model = std::move(model);
    for (const auto& p : parameters(s.model)) s.momentum.emplace_back(p.values->size(), 0.0);
    s.act_momentum.assign(s.model.convs.size(), 0.0);
    return s;
}

inline constexpr double kMinScale = 1e-6;

/// SGD with momentum; parameters and momentum are rounded to float32 after each update.
inline void sgd_step(TrainState& s, const ModelGrads& g, const TrainSchedule& sched, double factor)
{
    auto params = parameters(s.model);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& v = *params[i].values;
        auto& mom = s.momentum[i];
        const auto& gr = g.params[i];
        const bool is_weight = !params[i].is_scale && params[i].name.back() == 'w';
        const double lr = (params[i].is_scale ? sched.lr_scale : sched.lr) * factor;
        for (std::size_t j = 0; j < v.size(); ++j) {
            double d = gr[j];
            if (is_weight) d += sched.weight_decay * v[j];
            mom[j] = to_f32(sched.momentum * mom[j] + d);
            v[j] = to_f32(v[j] - lr * mom[j]);
            if (params[i].is_scale) v[j] = std::max(v[j], kMinScale);
        }
    }
    auto acts = activation_scales(s.model);
    for (std::size_t i = 0; i < acts.size(); ++i) {
        s.act_momentum[i] = to_f32(sched.momentum * s.act_momentum[i] + g.act_scales[i]);
        *acts[i] = std::max(to_f32(*acts[i] - sched.lr_scale * factor * s.act_momentum[i]), kMinScale);
    }
}

struct EpochLog {
    int epoch = 0;  // 1-based
    int stage = 1;
    double loss = 0.0;
    double acc = 0.0;       // training accuracy over the epoch
    double test_acc = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps = 0;  // cumulative optimizer steps
    bool psum_quant = false;
    std::size_t psum_clips = 0;
};

struct EvalOptions {
    QuantMode mode = QuantMode::Full;
    std::size_t batch_size = 100;
    const std::vector<std::vector<double>>* gains = nullptr;
};

/// Top-1 accuracy. Does not modify the model; every scale in use must be initialized.
inline double evaluate(const ToyModel& model, const Dataset& data, const EvalOptions& opt = {})
{
    require(data.size() > 0, "cannot evaluate on an empty dataset");
    ToyModel& m = const_cast<ToyModel&>(model);  // model_forward mutates only when init_missing
    ModelForwardOptions fo;
    fo.mode = opt.mode;
    fo.gains = opt.gains;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += opt.batch_size) {
        const std::size_t end = std::min(data.size(), start + opt.batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto f = model_forward(m, data.batch(idx), fo);
        const auto lab = data.batch_labels(idx);
        const std::size_t k = f.logits.dim(1);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const double* z = f.logits.data() + b * k;
            if (static_cast<int>(std::max_element(z, z + k) - z) == lab[b]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Initialize any missing activation / psum scales for `mode` from the first batch of `data`.
inline void calibrate(ToyModel& m, const Dataset& data, QuantMode mode, std::size_t batch_size = 100)
{
    require(data.size() > 0, "cannot calibrate on an empty dataset");
    std::vector<std::size_t> idx(std::min(batch_size, data.size()));
    std::iota(idx.begin(), idx.end(), 0);
    ModelForwardOptions fo;
    fo.mode = mode;
    fo.init_missing = true;
    model_forward(m, data.batch(idx), fo);
}

/// Per-layer cell gains for one device instance.
inline std::vector<std::vector<double>> model_gains(const ToyModel& m, double sigma, VariationLevel level,
                                                    std::uint64_t seed)
{
    std::vector<std::vector<double>> g;
    for (std::size_t i = 0; i < m.convs.size(); ++i) {
        const auto& l = m.convs[i];
        if (sigma == 0.0) {
            g.emplace_back();
            continue;
        }
        g.push_back(cell_gains(l.w.size(), l.layout.n_split(), sigma, level, derive_seed(seed, i)));
    }
    return g;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(derive_seed(seed, "training"), static_cast<std::uint64_t>(epoch)));
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

using EpochCallback = std::function<void(const EpochLog&, const TrainState&)>;

/// Train from state.epoch up to the schedule's total. Deterministic given the seed and state.
inline std::vector<EpochLog> train(TrainState& state, const Dataset& data, const TrainSchedule& sched,
                                   std::uint64_t seed, const Dataset* eval_data = nullptr,
                                   const EpochCallback& on_epoch = {})
{
    sched.validate();
    require(data.size() > 0, "cannot train on an empty dataset");
    std::vector<EpochLog> log;
    for (int e = state.epoch; e < sched.total_epochs(); ++e) {
        const QuantMode mode = sched.quant_mode(e);
        const double factor = sched.lr_factor(e);
        const auto order = epoch_order(data.size(), seed, e);
        EpochLog row;
        row.epoch = e + 1;
        row.stage = sched.stage_of(e);
        row.psum_quant = mode == QuantMode::Full;
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += sched.batch_size) {
            const std::size_t end = std::min(order.size(), start + sched.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const auto x = data.batch(idx);
            const auto lab = data.batch_labels(idx);
            const auto r = forward_backward(state.model, x, lab, mode);
            loss_sum += r.loss * static_cast<double>(idx.size());
            correct += r.correct;
            row.psum_clips += r.psum_clips;
            sgd_step(state, r.grads, sched, factor);
            ++state.step;
        }
        state.epoch = e + 1;
        row.loss = loss_sum / static_cast<double>(data.size());
        row.acc = static_cast<double>(correct) / static_cast<double>(data.size());
        row.steps = state.step;
        if (eval_data) row.test_acc = evaluate(state.model, *eval_data, {mode});
        log.push_back(row);
        if (on_epoch) on_epoch(row, state);
    }
    return log;
}

}  // namespace cimq
