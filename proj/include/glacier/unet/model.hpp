#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/grid.hpp"
#include "glacier/rng.hpp"
#include "glacier/unet/layers.hpp"

namespace glacier::unet {

/// U-Net architecture. `depth` counts downsampling steps; encoder stage i
/// has base_channels * 2^i channels and the bottleneck base_channels * 2^depth.
struct UNetConfig {
    std::size_t depth = 5;
    std::size_t base_channels = 16;
    std::size_t in_channels = 15;
    std::size_t out_classes = 1;
    double spatial_dropout_rate = 0.3;

    void validate() const {
        if (depth < 1) throw ConfigError("U-Net depth must be at least 1");
        if (base_channels < 1) throw ConfigError("U-Net base_channels must be at least 1");
        if (in_channels < 1) throw ConfigError("U-Net needs at least one input channel");
        if (out_classes < 1) throw ConfigError("U-Net needs at least one output class");
        if (!(spatial_dropout_rate >= 0.0 && spatial_dropout_rate < 1.0))
            throw ConfigError("spatial_dropout_rate must lie in [0, 1)");
    }

    std::size_t width(std::size_t level) const { return base_channels << level; }

    std::vector<std::size_t> encoder_widths() const {
        std::vector<std::size_t> w;
        for (std::size_t i = 0; i < depth; ++i) w.push_back(width(i));
        return w;
    }

    std::size_t bottleneck_width() const { return width(depth); }

    std::size_t divisor() const { return std::size_t{1} << depth; }

    nlohmann::json to_json() const {
        return {{"depth", depth},
                {"base_channels", base_channels},
                {"in_channels", in_channels},
                {"out_classes", out_classes},
                {"spatial_dropout_rate", spatial_dropout_rate},
                {"conv_kernel", 3},
                {"up_kernel", 2},
                {"pool_kernel", 2},
                {"padding", "same"}};
    }

    static UNetConfig from_json(const nlohmann::json& j) {
        UNetConfig c;
        c.depth = j.value("depth", c.depth);
        c.base_channels = j.value("base_channels", c.base_channels);
        c.in_channels = j.value("in_channels", c.in_channels);
        c.out_classes = j.value("out_classes", c.out_classes);
        c.spatial_dropout_rate = j.value("spatial_dropout_rate", c.spatial_dropout_rate);
        c.validate();
        return c;
    }

    bool operator==(const UNetConfig&) const = default;
};

/// Closed-form parameter count for input channels C, classes K, base b, depth D:
///
///   9Cb + 9b^2 + 2b                       first encoder stage
/// + 4.5 b^2 (4^(D+1) - 4) + 2b (2^(D+1) - 2)  encoder stages 1..D-1 and bottleneck
/// + 35 b^2 (4^D - 1) / 3 + 3b (2^D - 1)       decoder stages (up-conv + two convs)
/// + bK + K                                 1x1 output head
inline std::uint64_t closed_form_parameter_count(std::uint64_t c, std::uint64_t k, std::uint64_t b, std::uint64_t d) {
    const std::uint64_t p4d = std::uint64_t{1} << (2 * d), p2d = std::uint64_t{1} << d;
    const std::uint64_t first = 9 * c * b + 9 * b * b + 2 * b;
    const std::uint64_t enc = 9 * b * b * (4 * p4d - 4) / 2 + 2 * b * (2 * p2d - 2);
    const std::uint64_t dec = 35 * b * b * (p4d - 1) / 3 + 3 * b * (p2d - 1);
    return first + enc + dec + b * k + k;
}

enum class LayerKind { conv3, upconv2, conv1 };

/// One layer's parameter block inside the flat parameter vector.
struct ParamSlot {
    std::string name;  // layer path, e.g. "enc0.conv1", "dec2.up", "head"
    LayerKind kind = LayerKind::conv3;
    std::size_t in = 0, out = 0;
    std::size_t weight_offset = 0, weight_count = 0;
    std::size_t bias_offset = 0, bias_count = 0;
};

inline std::vector<ParamSlot> parameter_layout(const UNetConfig& cfg) {
    std::vector<ParamSlot> slots;
    std::size_t off = 0;
    auto add = [&](std::string name, LayerKind kind, std::size_t in, std::size_t out) {
        ParamSlot s{std::move(name), kind, in, out};
        s.weight_count = kind == LayerKind::conv3 ? out * in * 9 : kind == LayerKind::upconv2 ? out * 4 * in : out * in;
        s.weight_offset = off;
        off += s.weight_count;
        s.bias_count = out;
        s.bias_offset = off;
        off += out;
        slots.push_back(s);
    };
    std::size_t in = cfg.in_channels;
    for (std::size_t i = 0; i <= cfg.depth; ++i) {
        const std::string blk = i < cfg.depth ? "enc" + std::to_string(i) : "bottleneck";
        add(blk + ".conv1", LayerKind::conv3, in, cfg.width(i));
        add(blk + ".conv2", LayerKind::conv3, cfg.width(i), cfg.width(i));
        in = cfg.width(i);
    }
    for (std::size_t i = cfg.depth; i-- > 0;) {
        const std::string blk = "dec" + std::to_string(i);
        add(blk + ".up", LayerKind::upconv2, cfg.width(i + 1), cfg.width(i));
        add(blk + ".conv1", LayerKind::conv3, 2 * cfg.width(i), cfg.width(i));
        add(blk + ".conv2", LayerKind::conv3, cfg.width(i), cfg.width(i));
    }
    add("head", LayerKind::conv1, cfg.width(0), cfg.out_classes);
    return slots;
}

template <class T>
struct ModelParams {
    UNetConfig config;
    std::vector<ParamSlot> slots;
    std::vector<T> values;

    std::size_t size() const { return values.size(); }

    const ParamSlot& slot(const std::string& name) const {
        for (const auto& s : slots)
            if (s.name == name) return s;
        throw ConfigError("model has no layer '" + name + "'");
    }

    std::span<T> weights(const ParamSlot& s) { return {values.data() + s.weight_offset, s.weight_count}; }
    std::span<const T> weights(const ParamSlot& s) const { return {values.data() + s.weight_offset, s.weight_count}; }
    std::span<T> biases(const ParamSlot& s) { return {values.data() + s.bias_offset, s.bias_count}; }

    /// Whether flat index i is a weight (subject to the L1 penalty) rather than a bias.
    std::vector<bool> weight_mask() const {
        std::vector<bool> m(values.size(), false);
        for (const auto& s : slots)
            for (std::size_t i = 0; i < s.weight_count; ++i) m[s.weight_offset + i] = true;
        return m;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> o{config, slots, {}};
        o.values.assign(values.begin(), values.end());
        return o;
    }

    bool operator==(const ModelParams&) const = default;
};

/// He-normal initialization (std = sqrt(2 / fan_in)), zero biases. fan_in is
/// in*9 for 3x3 convs and `in` for the up-convs and the 1x1 head.
///
/// Draw order: slots in layout order, weights in flat order, from
/// Rng::derive(seed, {kInitStream}).normal().
inline constexpr std::uint64_t kInitStream = 0x494e4954ULL;

template <class T = float>
ModelParams<T> build_unet(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams<T> p;
    p.config = cfg;
    p.slots = parameter_layout(cfg);
    const auto& last = p.slots.back();
    p.values.assign(last.bias_offset + last.bias_count, T(0));
    Rng rng = Rng::derive(seed, {kInitStream});
    for (const auto& s : p.slots) {
        const double fan_in = s.kind == LayerKind::conv3 ? static_cast<double>(s.in * 9) : static_cast<double>(s.in);
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& w : p.weights(s)) w = static_cast<T>(sd * rng.normal());
    }
    return p;
}

/// Per-block activations kept for the backward pass.
template <class T>
struct BlockCache {
    Tensor3<T> in, a1, a2, out;
    std::vector<T> drop;  // per-channel dropout scale; empty when inactive
};

template <class T>
struct ForwardCache {
    std::vector<BlockCache<T>> enc;  // depth encoder blocks then the bottleneck
    std::vector<Tensor3<T>> pooled;
    std::vector<std::vector<std::uint32_t>> pool_arg;
    std::vector<Tensor3<T>> up;       // decoder up-conv outputs, index = level
    std::vector<BlockCache<T>> dec;   // index = level
    Tensor3<T> logits, probs;
};

namespace detail {

template <class T>
void run_block(const ModelParams<T>& p, const std::string& name, Tensor3<T> in, bool train, double rate, Rng* rng,
               BlockCache<T>& bc) {
    const ParamSlot& c1 = p.slot(name + ".conv1");
    const ParamSlot& c2 = p.slot(name + ".conv2");
    if (in.channels() != c1.in)
        throw ShapeError("layer " + name + ".conv1 expects " + std::to_string(c1.in) + " input channels, got " +
                         std::to_string(in.channels()));
    bc.in = std::move(in);
    conv_forward(bc.in, p.values.data() + c1.weight_offset, p.values.data() + c1.bias_offset, c1.out, 3, bc.a1);
    relu_inplace(bc.a1);
    conv_forward(bc.a1, p.values.data() + c2.weight_offset, p.values.data() + c2.bias_offset, c2.out, 3, bc.a2);
    relu_inplace(bc.a2);
    bc.out = bc.a2;
    bc.drop.clear();
    if (train && rate > 0.0) {
        if (!rng) throw ConfigError("training-mode forward needs a dropout generator");
        bc.drop.resize(c2.out);
        const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
        for (auto& s : bc.drop) s = rng->uniform() < rate ? T(0) : keep_scale;
        scale_channels(bc.out, bc.drop);
    }
}

template <class T>
Tensor3<T> block_backward(const ModelParams<T>& p, const std::string& name, const BlockCache<T>& bc, Tensor3<T> dout,
                          std::vector<T>& grad) {
    const ParamSlot& c1 = p.slot(name + ".conv1");
    const ParamSlot& c2 = p.slot(name + ".conv2");
    if (!bc.drop.empty()) scale_channels(dout, bc.drop);
    relu_backward_inplace(bc.a2, dout);
    Tensor3<T> da1;
    conv_backward(bc.a1, p.values.data() + c2.weight_offset, c2.out, 3, dout, grad.data() + c2.weight_offset,
                  grad.data() + c2.bias_offset, &da1);
    relu_backward_inplace(bc.a1, da1);
    Tensor3<T> din;
    conv_backward(bc.in, p.values.data() + c1.weight_offset, c1.out, 3, da1, grad.data() + c1.weight_offset,
                  grad.data() + c1.bias_offset, &din);
    return din;
}

}  // namespace detail

/// Probabilities K x H x W: sigmoid for K = 1, softmax over planes otherwise.
template <class T>
void output_activation(const Tensor3<T>& logits, Tensor3<T>& probs) {
    probs = Tensor3<T>(logits.channels(), logits.height(), logits.width());
    const std::size_t k = logits.channels(), n = logits.plane_size();
    if (k == 1) {
        for (std::size_t i = 0; i < n; ++i) probs.data()[i] = T(1) / (T(1) + std::exp(-logits.data()[i]));
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        T m = logits.data()[i];
        for (std::size_t c = 1; c < k; ++c) m = std::max(m, logits.data()[c * n + i]);
        T s = 0;
        for (std::size_t c = 0; c < k; ++c) s += (probs.data()[c * n + i] = std::exp(logits.data()[c * n + i] - m));
        for (std::size_t c = 0; c < k; ++c) probs.data()[c * n + i] /= s;
    }
}

/// Forward pass. Dropout is active only when `train_mode`; it then draws one
/// uniform per block output channel from `rng` in forward order.
template <class T>
Tensor3<T> forward(const ModelParams<T>& p, const Tensor3<T>& input, bool train_mode = false, Rng* rng = nullptr,
                   ForwardCache<T>* cache = nullptr) {
    const UNetConfig& cfg = p.config;
    if (input.channels() != cfg.in_channels)
        throw ShapeError("layer enc0.conv1 expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                         std::to_string(input.channels()));
    const std::size_t div = cfg.divisor();
    if (input.height() == 0 || input.width() == 0 || input.height() % div || input.width() % div)
        throw ShapeError("input " + std::to_string(input.width()) + "x" + std::to_string(input.height()) +
                         " is not divisible by " + std::to_string(div) + " (depth " + std::to_string(cfg.depth) +
                         ") at layer enc0");
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    const std::size_t d = cfg.depth;
    c.enc.assign(d + 1, {});
    c.pooled.assign(d, {});
    c.pool_arg.assign(d, {});
    c.up.assign(d, {});
    c.dec.assign(d, {});
    const double rate = cfg.spatial_dropout_rate;

    Tensor3<T> x = input;
    for (std::size_t i = 0; i <= d; ++i) {
        detail::run_block(p, i < d ? "enc" + std::to_string(i) : "bottleneck", std::move(x), train_mode, rate, rng,
                          c.enc[i]);
        if (i < d) {
            maxpool_forward(c.enc[i].out, c.pooled[i], c.pool_arg[i]);
            x = c.pooled[i];
        }
    }
    const Tensor3<T>* below = &c.enc[d].out;
    for (std::size_t i = d; i-- > 0;) {
        const std::string blk = "dec" + std::to_string(i);
        const ParamSlot& up = p.slot(blk + ".up");
        upconv_forward(*below, p.values.data() + up.weight_offset, p.values.data() + up.bias_offset, up.out, c.up[i]);
        detail::run_block(p, blk, concat(c.enc[i].out, c.up[i]), train_mode, rate, rng, c.dec[i]);
        below = &c.dec[i].out;
    }
    const ParamSlot& head = p.slot("head");
    conv_forward(*below, p.values.data() + head.weight_offset, p.values.data() + head.bias_offset, head.out, 1,
                 c.logits);
    output_activation(c.logits, c.probs);
    return c.probs;
}

/// Accumulate d(loss)/d(params) into grad given d(loss)/d(probs).
template <class T>
void backward(const ModelParams<T>& p, const ForwardCache<T>& c, const Tensor3<T>& dprobs, std::vector<T>& grad) {
    const UNetConfig& cfg = p.config;
    const std::size_t d = cfg.depth, k = c.probs.channels(), n = c.probs.plane_size();
    if (grad.size() != p.values.size()) grad.assign(p.values.size(), T(0));
    Tensor3<T> dz(k, c.probs.height(), c.probs.width());
    if (k == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            const T pr = c.probs.data()[i];
            dz.data()[i] = dprobs.data()[i] * pr * (T(1) - pr);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            T dot = 0;
            for (std::size_t q = 0; q < k; ++q) dot += dprobs.data()[q * n + i] * c.probs.data()[q * n + i];
            for (std::size_t q = 0; q < k; ++q)
                dz.data()[q * n + i] = c.probs.data()[q * n + i] * (dprobs.data()[q * n + i] - dot);
        }
    }
    const ParamSlot& head = p.slot("head");
    const Tensor3<T>& top = c.dec[0].out;
    Tensor3<T> dx;
    conv_backward(top, p.values.data() + head.weight_offset, head.out, 1, dz, grad.data() + head.weight_offset,
                  grad.data() + head.bias_offset, &dx);

    // Gradients flowing into each encoder block output through its skip connection.
    std::vector<Tensor3<T>> dskip(d);
    for (std::size_t i = 0; i < d; ++i) {
        const std::string blk = "dec" + std::to_string(i);
        Tensor3<T> dcat = detail::block_backward(p, blk, c.dec[i], std::move(dx), grad);
        const std::size_t cs = c.enc[i].out.channels();
        Tensor3<T> dup(c.up[i].channels(), c.up[i].height(), c.up[i].width());
        dskip[i] = Tensor3<T>(cs, c.enc[i].out.height(), c.enc[i].out.width());
        std::copy(dcat.data(), dcat.data() + dskip[i].size(), dskip[i].data());
        std::copy(dcat.data() + dskip[i].size(), dcat.data() + dcat.size(), dup.data());
        const ParamSlot& up = p.slot(blk + ".up");
        const Tensor3<T>& below = i + 1 < d ? c.dec[i + 1].out : c.enc[d].out;
        upconv_backward(below, p.values.data() + up.weight_offset, up.out, dup, grad.data() + up.weight_offset,
                        grad.data() + up.bias_offset, &dx);
    }
    dx = detail::block_backward(p, "bottleneck", c.enc[d], std::move(dx), grad);
    for (std::size_t i = d; i-- > 0;) {
        Tensor3<T> dout = std::move(dskip[i]);
        maxpool_backward(dx, c.pool_arg[i], dout);
        dx = detail::block_backward(p, "enc" + std::to_string(i), c.enc[i], std::move(dout), grad);
    }
}

/// Smoothing constant of the Dice loss.
inline constexpr double kDiceEpsilon = 1.0;

/// Soft Dice loss 1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps), summed over all planes and pixels.
template <class T>
double dice_loss(std::span<const T> pred, std::span<const T> truth, double eps = kDiceEpsilon) {
    if (pred.size() != truth.size())
        throw ShapeError("dice_loss: prediction has " + std::to_string(pred.size()) + " cells, truth has " +
                         std::to_string(truth.size()));
    double inter = 0.0, sp = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += static_cast<double>(pred[i]) * static_cast<double>(truth[i]);
        sp += static_cast<double>(pred[i]);
        sy += static_cast<double>(truth[i]);
    }
    return 1.0 - (2.0 * inter + eps) / (sp + sy + eps);
}

template <class T>
double dice_loss(const Tensor3<T>& pred, const Tensor3<T>& truth, double eps = kDiceEpsilon) {
    if (pred.channels() != truth.channels() || pred.height() != truth.height() || pred.width() != truth.width())
        throw ShapeError("dice_loss: prediction is " + std::to_string(pred.channels()) + "x" +
                         std::to_string(pred.height()) + "x" + std::to_string(pred.width()) + ", truth is " +
                         std::to_string(truth.channels()) + "x" + std::to_string(truth.height()) + "x" +
                         std::to_string(truth.width()));
    return dice_loss(std::span<const T>(pred.storage()), std::span<const T>(truth.storage()), eps);
}

/// d(dice)/d(pred), scaled by `scale`.
template <class T>
Tensor3<T> dice_gradient(const Tensor3<T>& pred, const Tensor3<T>& truth, double scale = 1.0,
                         double eps = kDiceEpsilon) {
    double inter = 0.0, sp = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += static_cast<double>(pred.data()[i]) * static_cast<double>(truth.data()[i]);
        sp += static_cast<double>(pred.data()[i]);
        sy += static_cast<double>(truth.data()[i]);
    }
    const double num = 2.0 * inter + eps, den = sp + sy + eps;
    Tensor3<T> g(pred.channels(), pred.height(), pred.width());
    for (std::size_t i = 0; i < pred.size(); ++i)
        g.data()[i] = static_cast<T>(-scale * (2.0 * static_cast<double>(truth.data()[i]) * den - num) / (den * den));
    return g;
}

template <class T>
struct Sample {
    Tensor3<T> input;
    Tensor3<T> target;
};

/// lambda * sum |w| over all convolution weights (biases excluded).
template <class T>
double l1_penalty(const ModelParams<T>& p, double lambda) {
    double s = 0.0;
    for (const auto& slot : p.slots)
        for (T w : p.weights(slot)) s += std::fabs(static_cast<double>(w));
    return lambda * s;
}

/// Mean Dice loss over the batch plus the L1 weight penalty. Each sample `i`
/// uses dropout generator rngs[i] when train_mode.
template <class T>
double training_objective(const ModelParams<T>& p, std::span<const Sample<T>> batch, double lambda,
                          bool train_mode = false, std::vector<Rng>* rngs = nullptr) {
    if (batch.empty()) throw ConfigError("training objective needs a nonempty batch");
    double s = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor3<T> probs = forward(p, batch[i].input, train_mode, rngs ? &(*rngs)[i] : nullptr);
        s += dice_loss(probs, batch[i].target);
    }
    return s / static_cast<double>(batch.size()) + l1_penalty(p, lambda);
}

/// Adds lambda * sign(w) to the weight entries of `grad`.
template <class T>
void add_l1_gradient(const ModelParams<T>& p, double lambda, std::vector<T>& grad) {
    if (lambda == 0.0) return;
    for (const auto& slot : p.slots)
        for (std::size_t i = 0; i < slot.weight_count; ++i) {
            const T w = p.values[slot.weight_offset + i];
            grad[slot.weight_offset + i] += static_cast<T>(lambda * ((w > T(0)) - (w < T(0))));
        }
}

/// Objective value and its gradient, accumulated into `grad` (reset first).
template <class T>
double objective_and_gradient(const ModelParams<T>& p, std::span<const Sample<T>> batch, double lambda,
                              std::vector<T>& grad, bool train_mode = false, std::vector<Rng>* rngs = nullptr) {
    if (batch.empty()) throw ConfigError("training objective needs a nonempty batch");
    grad.assign(p.values.size(), T(0));
    const double inv = 1.0 / static_cast<double>(batch.size());
    double s = 0.0;
    ForwardCache<T> cache;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor3<T> probs = forward(p, batch[i].input, train_mode, rngs ? &(*rngs)[i] : nullptr, &cache);
        s += dice_loss(probs, batch[i].target);
        backward(p, cache, dice_gradient(probs, batch[i].target, inv), grad);
    }
    add_l1_gradient(p, lambda, grad);
    return s * inv + l1_penalty(p, lambda);
}

}  // namespace glacier::unet
