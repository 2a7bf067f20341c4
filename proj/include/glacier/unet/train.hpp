#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/container.hpp"
#include "glacier/metrics.hpp"
#include "glacier/rng.hpp"
#include "glacier/task.hpp"
#include "glacier/unet/model.hpp"

namespace glacier::unet {

struct TrainConfig {
    double learning_rate = 1e-4;
    double l1_lambda = 5e-4;
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, adam_epsilon = 1e-8;
    std::size_t threads = 1;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be nonnegative");
        if (!(l1_lambda >= 0.0)) throw ConfigError("l1_lambda must be nonnegative");
        if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
        if (threads == 0) throw ConfigError("threads must be at least 1");
    }

    nlohmann::json to_json() const {
        return {{"optimizer", "adam"},   {"learning_rate", learning_rate}, {"l1_lambda", l1_lambda},
                {"loss", "soft_dice"},  {"epochs", epochs},               {"batch_size", batch_size},
                {"seed", seed},         {"beta1", beta1},                 {"beta2", beta2},
                {"adam_epsilon", adam_epsilon}, {"threads", threads}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.l1_lambda = j.value("l1_lambda", c.l1_lambda);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
        c.threads = j.value("threads", c.threads);
        c.validate();
        return c;
    }
};

/// Class codes from model probabilities. K = 1 marks p >= 0.5 with
/// `positive`; K = 3 (clean_ice, debris, background) takes the argmax, ties
/// resolved toward background, then clean_ice.
template <class T>
MaskGrid probs_to_classes(const Tensor3<T>& probs, GlacierClass positive = GlacierClass::clean_ice) {
    MaskGrid g(probs.width(), probs.height(), 0);
    const std::size_t n = probs.plane_size();
    if (probs.channels() == 1) {
        for (std::size_t i = 0; i < n; ++i)
            if (probs.data()[i] >= T(0.5)) g.storage()[i] = static_cast<std::uint8_t>(positive);
        return g;
    }
    if (probs.channels() != 3) throw ShapeError("expected 1 or 3 probability planes, got " + std::to_string(probs.channels()));
    for (std::size_t i = 0; i < n; ++i) {
        const T clean = probs.data()[i], debris = probs.data()[n + i], bg = probs.data()[2 * n + i];
        std::uint8_t c = 0;
        T best = bg;
        if (clean > best) c = 1, best = clean;
        if (debris > best) c = 2;
        g.storage()[i] = c;
    }
    return g;
}

/// Class codes for a task's model output.
template <class T>
MaskGrid task_classes(const Tensor3<T>& probs, TaskMode task) {
    return probs_to_classes(probs, task == TaskMode::binary_debris ? GlacierClass::debris : GlacierClass::clean_ice);
}

/// Per-plane counts of thresholded (K = 1) or argmax (K > 1) predictions
/// against target planes. The last plane is background when K > 1.
template <class T>
std::vector<ConfusionCounts> plane_counts(const Tensor3<T>& probs, const Tensor3<T>& target) {
    const std::size_t k = probs.channels(), n = probs.plane_size();
    std::vector<ConfusionCounts> out(k);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pred = 0;
        if (k == 1) {
            pred = probs.data()[i] >= T(0.5) ? 0 : 1;
        } else {
            // Same tie rule as probs_to_classes: background, then planes in order.
            pred = k - 1;
            T best = probs.data()[(k - 1) * n + i];
            for (std::size_t q = 0; q + 1 < k; ++q)
                if (probs.data()[q * n + i] > best) best = probs.data()[q * n + i], pred = q;
        }
        for (std::size_t q = 0; q < k; ++q) {
            const bool p = pred == q, t = target.data()[q * n + i] > T(0.5);
            out[q].tp += p && t;
            out[q].fp += p && !t;
            out[q].fn += !p && t;
            out[q].tn += !p && !t;
        }
    }
    return out;
}

/// Foreground IoU from summed plane counts: the single plane for K = 1, the
/// mean over non-background planes otherwise.
inline double foreground_iou(const std::vector<ConfusionCounts>& counts) {
    if (counts.size() == 1) return iou(counts[0]).value;
    double s = 0.0;
    for (std::size_t q = 0; q + 1 < counts.size(); ++q) s += iou(counts[q]).value;
    return s / static_cast<double>(counts.size() - 1);
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0, train_iou = 0.0;
    double dev_loss = 0.0, dev_iou = 0.0;
    bool has_dev = false;
};

inline std::string history_csv(const std::vector<EpochRecord>& h) {
    std::ostringstream os;
    os << "epoch,split,dice_loss,iou\n";
    for (const auto& r : h) {
        os << r.epoch << ",train," << glacier::detail::fmt(r.train_loss, 8) << "," << glacier::detail::fmt(r.train_iou, 8) << "\n";
        if (r.has_dev) os << r.epoch << ",dev," << glacier::detail::fmt(r.dev_loss, 8) << "," << glacier::detail::fmt(r.dev_iou, 8) << "\n";
    }
    return os.str();
}

template <class T>
struct FitResult {
    ModelParams<T> params;  // best-dev-IoU checkpoint (last epoch without a dev set)
    ModelParams<T> last;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_dev_iou = -1.0;
};

inline constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
inline constexpr std::uint64_t kDropoutStream = 0x44524f50ULL;

/// Mean Dice loss and foreground IoU of eval-mode predictions over a set.
template <class T>
std::pair<double, double> evaluate_samples(const ModelParams<T>& p, const std::vector<Sample<T>>& set) {
    if (set.empty()) return {0.0, 0.0};
    double loss = 0.0;
    std::vector<ConfusionCounts> counts(p.config.out_classes);
    ForwardCache<T> cache;
    for (const auto& s : set) {
        Tensor3<T> probs = forward(p, s.input, false, nullptr, &cache);
        loss += dice_loss(probs, s.target);
        auto c = plane_counts(probs, s.target);
        for (std::size_t q = 0; q < c.size(); ++q) counts[q] += c[q];
    }
    return {loss / static_cast<double>(set.size()), foreground_iou(counts)};
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on mean Dice + L1. Each epoch shuffles the training order with
/// Rng::derive(seed, {kShuffleStream, epoch}); sample i of the epoch draws its
/// dropout masks from Rng::derive(seed, {kDropoutStream, epoch, i}). Per-sample
/// gradients are reduced in batch order, so results do not depend on `threads`.
template <class T>
FitResult<T> fit(ModelParams<T> params, const std::vector<Sample<T>>& train, const std::vector<Sample<T>>& dev,
                 const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train.empty()) throw ConfigError("training set is empty");
    const std::size_t np = params.values.size();
    std::vector<T> m(np, T(0)), v(np, T(0)), grad(np);
    FitResult<T> result;
    result.params = params;
    std::uint64_t step = 0;
    const std::size_t workers = std::min(cfg.threads, cfg.batch_size);
    std::vector<std::vector<T>> sample_grads(cfg.batch_size);
    std::vector<double> sample_loss(cfg.batch_size);
    std::vector<std::vector<ConfusionCounts>> sample_counts(cfg.batch_size);
    std::vector<ForwardCache<T>> caches(workers);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng::derive(cfg.seed, {kShuffleStream, epoch}).shuffle(std::span<std::size_t>(order));
        double epoch_loss = 0.0;
        std::vector<ConfusionCounts> epoch_counts(params.config.out_classes);
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t bs = std::min(cfg.batch_size, order.size() - start);
            const double inv = 1.0 / static_cast<double>(bs);
            auto work = [&](std::size_t w) {
                for (std::size_t j = w; j < bs; j += workers) {
                    const Sample<T>& s = train[order[start + j]];
                    Rng rng = Rng::derive(cfg.seed, {kDropoutStream, epoch, start + j});
                    Tensor3<T> probs = forward(params, s.input, true, &rng, &caches[w]);
                    sample_loss[j] = dice_loss(probs, s.target);
                    sample_counts[j] = plane_counts(probs, s.target);
                    sample_grads[j].assign(np, T(0));
                    backward(params, caches[w], dice_gradient(probs, s.target, inv), sample_grads[j]);
                }
            };
            if (workers == 1) {
                work(0);
            } else {
                std::vector<std::thread> pool;
                for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
                for (auto& t : pool) t.join();
            }
            std::fill(grad.begin(), grad.end(), T(0));
            double batch_loss = 0.0;
            for (std::size_t j = 0; j < bs; ++j) {
                for (std::size_t i = 0; i < np; ++i) grad[i] += sample_grads[j][i];
                batch_loss += sample_loss[j];
                for (std::size_t q = 0; q < epoch_counts.size(); ++q) epoch_counts[q] += sample_counts[j][q];
            }
            add_l1_gradient(params, cfg.l1_lambda, grad);
            const double objective = batch_loss * inv + l1_penalty(params, cfg.l1_lambda);
            if (!std::isfinite(objective))
                throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(batch_index));
            epoch_loss += batch_loss;

            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
            for (std::size_t i = 0; i < np; ++i) {
                const T g = grad[i];
                if (!std::isfinite(static_cast<double>(g)))
                    throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(batch_index));
                m[i] = b1 * m[i] + (T(1) - b1) * g;
                v[i] = b2 * v[i] + (T(1) - b2) * g * g;
                const double mhat = static_cast<double>(m[i]) / c1, vhat = static_cast<double>(v[i]) / c2;
                params.values[i] -= static_cast<T>(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon));
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(train.size());
        rec.train_iou = foreground_iou(epoch_counts);
        if (!dev.empty()) {
            auto [dl, di] = evaluate_samples(params, dev);
            rec.dev_loss = dl;
            rec.dev_iou = di;
            rec.has_dev = true;
            if (di > result.best_dev_iou) {
                result.best_dev_iou = di;
                result.best_epoch = epoch;
                result.params = params;
            }
        } else {
            result.best_epoch = epoch;
            result.params = params;
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    if (cfg.epochs == 0) result.params = params;
    result.last = std::move(params);
    return result;
}

// ---- checkpoints ----

struct CheckpointInfo {
    std::size_t epoch = 0;
    nlohmann::json metrics = nlohmann::json::object();
    nlohmann::json extra = nlohmann::json::object();  // task, channels, model id
};

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ModelParams<T>& p, const CheckpointInfo& info) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& s : p.slots)
        layers.push_back({{"name", s.name},
                          {"in", s.in},
                          {"out", s.out},
                          {"weight_offset", s.weight_offset},
                          {"weight_count", s.weight_count},
                          {"bias_offset", s.bias_offset},
                          {"bias_count", s.bias_count}});
    container::Document doc;
    doc.header = {{"kind", "unet_checkpoint"},
                  {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                  {"count", p.values.size()},
                  {"config", p.config.to_json()},
                  {"epoch", info.epoch},
                  {"metrics", info.metrics},
                  {"extra", info.extra},
                  {"layers", layers}};
    container::append_le(doc.payload, p.values.data(), p.values.size());
    return container::encode(doc);
}

template <class T = float>
std::pair<ModelParams<T>, CheckpointInfo> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    container::Document doc = container::decode(bytes, [](const nlohmann::json& h) {
        const std::string dt = h.at("dtype").get<std::string>();
        return h.at("count").get<std::size_t>() * (dt == "f64" ? 8 : 4);
    });
    if (doc.header.value("kind", "") != "unet_checkpoint") throw FormatError("container is not a U-Net checkpoint", 8);
    ModelParams<T> p;
    p.config = UNetConfig::from_json(doc.header.at("config"));
    p.slots = parameter_layout(p.config);
    const std::size_t count = doc.header.at("count").get<std::size_t>();
    const auto& last = p.slots.back();
    if (count != last.bias_offset + last.bias_count)
        throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, config needs " +
                              std::to_string(last.bias_offset + last.bias_count),
                          8);
    const auto& layers = doc.header.at("layers");
    for (std::size_t i = 0; i < p.slots.size(); ++i)
        if (layers.at(i).at("name").get<std::string>() != p.slots[i].name ||
            layers.at(i).at("weight_offset").get<std::size_t>() != p.slots[i].weight_offset)
            throw FormatError("checkpoint layer table does not match its config at '" + p.slots[i].name + "'", 8);
    if (doc.header.at("dtype").get<std::string>() == "f64") {
        std::vector<double> v(count);
        container::read_le(doc.payload.data(), v.data(), count);
        p.values.assign(v.begin(), v.end());
    } else {
        std::vector<float> v(count);
        container::read_le(doc.payload.data(), v.data(), count);
        p.values.assign(v.begin(), v.end());
    }
    CheckpointInfo info;
    info.epoch = doc.header.value("epoch", std::size_t{0});
    info.metrics = doc.header.value("metrics", nlohmann::json::object());
    info.extra = doc.header.value("extra", nlohmann::json::object());
    return {std::move(p), std::move(info)};
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& p, const CheckpointInfo& info) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    container::write_file(path, encode_checkpoint(p, info));
}

template <class T = float>
std::pair<ModelParams<T>, CheckpointInfo> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint<T>(container::read_file(path));
}

}  // namespace glacier::unet
