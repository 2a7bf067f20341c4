#pragma once

#include <string>
#include <vector>

#include "glacier/channels.hpp"
#include "glacier/pipeline/patch.hpp"
#include "glacier/unet/model.hpp"

namespace glacier::unet {

struct PredictConfig {
    std::size_t window = 512;
    std::size_t overlap = 64;
    bool preprocess = true;  // impute NaN and z-score each window, as for training patches
    NormalizeConfig normalize;

    void validate(const UNetConfig& model) const {
        if (window == 0 || overlap >= window) throw ConfigError("prediction overlap must be smaller than the window");
        if (window % model.divisor())
            throw ConfigError("prediction window " + std::to_string(window) + " is not divisible by " +
                              std::to_string(model.divisor()));
    }
};

/// Number of windows along an axis of length n.
inline std::size_t window_count(std::size_t n, std::size_t window, std::size_t overlap) {
    if (n <= window) return 1;
    const std::size_t stride = window - overlap;
    return (n - window + stride - 1) / stride + 1;
}

/// Reflected index ("reflect" mode, edge not repeated) for i in [0, inf).
inline std::size_t reflect_index(std::size_t i, std::size_t n) {
    if (n == 1) return 0;
    const std::size_t period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
}

/// C x H x W input tensor of a tile's channels in `names` order.
inline Tensor3<float> stack_tensor(const RasterTile& tile, const std::vector<std::string>& names) {
    for (const auto& n : names)
        if (!tile.has_channel(n)) throw ConfigError("tile '" + tile.id + "' has no channel '" + n + "'");
    Tensor3<float> t(names.size(), tile.height, tile.width);
    for (std::size_t c = 0; c < names.size(); ++c) {
        const ChannelGrid& g = tile.channel(names[c]);
        std::copy(g.storage().begin(), g.storage().end(), t.plane(c).begin());
    }
    return t;
}

/// Sliding-window prediction over a C x H x W tensor. The tensor is padded
/// by reflection at the bottom and right to the window grid; window outputs
/// are averaged where they overlap and the result is cropped back.
template <class T>
Tensor3<T> predict_tensor(const ModelParams<T>& p, const Tensor3<T>& input, const PredictConfig& cfg = {}) {
    cfg.validate(p.config);
    if (input.channels() != p.config.in_channels)
        throw ConfigError("model expects " + std::to_string(p.config.in_channels) + " channels, input has " +
                          std::to_string(input.channels()));
    const std::size_t h = input.height(), w = input.width(), c = input.channels(), k = p.config.out_classes;
    const std::size_t stride = cfg.window - cfg.overlap;
    const std::size_t nr = window_count(h, cfg.window, cfg.overlap), nc = window_count(w, cfg.window, cfg.overlap);
    const std::size_t ph = (nr - 1) * stride + cfg.window, pw = (nc - 1) * stride + cfg.window;
    Tensor3<T> sum(k, ph, pw, T(0));
    Grid<std::uint16_t> count(pw, ph, 0);
    Patch win;
    win.data = Tensor3<float>(c, cfg.window, cfg.window);
    ForwardCache<T> cache;
    for (std::size_t wr = 0; wr < nr; ++wr)
        for (std::size_t wc = 0; wc < nc; ++wc) {
            const std::size_t r0 = wr * stride, c0 = wc * stride;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < cfg.window; ++y) {
                    const std::size_t sy = reflect_index(r0 + y, h);
                    for (std::size_t x = 0; x < cfg.window; ++x)
                        win.data(ch, y, x) = static_cast<float>(input(ch, sy, reflect_index(c0 + x, w)));
                }
            Tensor3<T> x(c, cfg.window, cfg.window);
            if (cfg.preprocess) {
                Patch prepared = preprocess_patch(win, cfg.normalize);
                std::copy(prepared.data.storage().begin(), prepared.data.storage().end(), x.storage().begin());
            } else {
                std::copy(win.data.storage().begin(), win.data.storage().end(), x.storage().begin());
            }
            Tensor3<T> probs = forward(p, x, false, nullptr, &cache);
            for (std::size_t q = 0; q < k; ++q)
                for (std::size_t y = 0; y < cfg.window; ++y)
                    for (std::size_t xx = 0; xx < cfg.window; ++xx) sum(q, r0 + y, c0 + xx) += probs(q, y, xx);
            for (std::size_t y = 0; y < cfg.window; ++y)
                for (std::size_t xx = 0; xx < cfg.window; ++xx) ++count(r0 + y, c0 + xx);
        }
    Tensor3<T> out(k, h, w);
    for (std::size_t q = 0; q < k; ++q)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out(q, y, x) = sum(q, y, x) / static_cast<T>(count(y, x));
    return out;
}

/// K x H x W probabilities for a tile, using the tile channels named by `stack` in order.
template <class T>
Tensor3<T> predict_tile(const ModelParams<T>& p, const RasterTile& tile, const std::vector<std::string>& stack,
                        const PredictConfig& cfg = {}) {
    if (stack.size() != p.config.in_channels)
        throw ConfigError("model expects " + std::to_string(p.config.in_channels) + " channels, stack names " +
                          std::to_string(stack.size()));
    Tensor3<float> in = stack_tensor(tile, stack);
    if constexpr (std::is_same_v<T, float>) {
        return predict_tensor(p, in, cfg);
    } else {
        Tensor3<T> t(in.channels(), in.height(), in.width());
        std::copy(in.storage().begin(), in.storage().end(), t.storage().begin());
        return predict_tensor(p, t, cfg);
    }
}

template <class T>
Tensor3<T> predict_tile(const ModelParams<T>& p, const RasterTile& tile, const ChannelStack& stack,
                        const PredictConfig& cfg = {}) {
    return predict_tile(p, tile, stack.names, cfg);
}

}  // namespace glacier::unet
