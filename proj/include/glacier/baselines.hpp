#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "glacier/channels.hpp"
#include "glacier/container.hpp"
#include "glacier/error.hpp"
#include "glacier/pipeline/patch.hpp"
#include "glacier/rng.hpp"

namespace glacier::baselines {

inline constexpr std::size_t kClassCount = 3;  // background, clean_ice, debris

// ---- pixel datasets ----

struct PixelDataset {
    std::vector<std::string> feature_names;
    std::size_t n_features = 0;
    std::vector<float> features;        // rows x n_features, row-major
    std::vector<std::uint8_t> labels;   // class codes
    std::vector<std::string> patch_ids;
    std::vector<std::uint32_t> row_patch;  // index into patch_ids
    std::vector<std::uint32_t> row_pixel;  // flat pixel index within the patch

    std::size_t rows() const { return labels.size(); }
    const float* row(std::size_t i) const { return features.data() + i * n_features; }

    std::array<std::size_t, kClassCount> class_counts() const {
        std::array<std::size_t, kClassCount> c{};
        for (auto l : labels) ++c.at(l);
        return c;
    }

    void push(const float* x, std::uint8_t label) {
        features.insert(features.end(), x, x + n_features);
        labels.push_back(label);
    }
};

inline constexpr std::uint64_t kSampleStream = 0x50495853ULL;

/// Uniform sample without replacement of `per_patch` pixels from each patch
/// (all pixels when the patch has fewer). Patch i draws from
/// Rng::derive(seed, {kSampleStream, i}); rows are in ascending pixel order.
inline PixelDataset sample_pixels(const std::vector<const Patch*>& patches, const std::vector<const MaskPatch*>& masks,
                                  std::size_t per_patch, std::uint64_t seed) {
    if (patches.empty()) throw ConfigError("sample_pixels needs at least one patch");
    if (patches.size() != masks.size())
        throw ConfigError("sample_pixels got " + std::to_string(patches.size()) + " patches and " +
                          std::to_string(masks.size()) + " masks");
    PixelDataset ds;
    ds.feature_names = patches[0]->channels;
    ds.n_features = patches[0]->data.channels();
    std::vector<float> x(ds.n_features);
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
        const Patch& p = *patches[pi];
        if (p.data.channels() != ds.n_features)
            throw ConfigError("patch '" + p.meta.patch_id + "' has " + std::to_string(p.data.channels()) +
                              " channels, expected " + std::to_string(ds.n_features));
        const MaskGrid cls = masks[pi]->classes();
        const std::size_t n = p.data.plane_size();
        if (cls.size() != n) throw ShapeError("mask of patch '" + p.meta.patch_id + "' does not match its size");
        std::vector<std::uint32_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        std::size_t k = std::min(per_patch, n);
        if (k < n) {
            Rng rng = Rng::derive(seed, {kSampleStream, pi});
            for (std::size_t j = 0; j < k; ++j) std::swap(idx[j], idx[j + rng.uniform_int(n - j)]);
            idx.resize(k);
            std::sort(idx.begin(), idx.end());
        }
        ds.patch_ids.push_back(p.meta.patch_id);
        for (std::uint32_t i : idx) {
            for (std::size_t f = 0; f < ds.n_features; ++f) {
                x[f] = p.data.data()[f * n + i];
                if (std::isnan(x[f]))
                    throw ValidationError("NaN feature in patch '" + p.meta.patch_id + "'; impute before sampling");
            }
            ds.push(x.data(), cls.storage()[i]);
            ds.row_patch.push_back(static_cast<std::uint32_t>(pi));
            ds.row_pixel.push_back(i);
        }
    }
    return ds;
}

inline PixelDataset sample_pixels(const std::vector<PatchPair>& pairs, std::size_t per_patch, std::uint64_t seed) {
    std::vector<const Patch*> ps;
    std::vector<const MaskPatch*> ms;
    for (const auto& p : pairs) ps.push_back(&p.patch), ms.push_back(&p.mask);
    return sample_pixels(ps, ms, per_patch, seed);
}

// ---- decision trees ----

struct Tree {
    std::vector<std::int32_t> feature;  // -1 marks a leaf
    std::vector<float> threshold;       // x <= threshold goes left
    std::vector<std::int32_t> left, right;
    std::vector<float> value;           // value_dim entries per node (leaves only meaningful)
    std::size_t value_dim = 1;

    std::size_t size() const { return feature.size(); }

    std::size_t leaf(const float* x) const {
        std::size_t n = 0;
        while (feature[n] >= 0) n = static_cast<std::size_t>(x[feature[n]] <= threshold[n] ? left[n] : right[n]);
        return n;
    }
    const float* predict(const float* x) const { return value.data() + leaf(x) * value_dim; }

    std::size_t add_node() {
        feature.push_back(-1);
        threshold.push_back(0.0f);
        left.push_back(-1);
        right.push_back(-1);
        value.resize(value.size() + value_dim, 0.0f);
        return feature.size() - 1;
    }
};

/// Row orders sorted by each feature (ties by row index), shared by all trees of a model.
struct Presorted {
    std::vector<std::vector<std::uint32_t>> order;

    Presorted(const float* x, std::size_t rows, std::size_t f) : order(f) {
        for (std::size_t j = 0; j < f; ++j) {
            auto& o = order[j];
            o.resize(rows);
            std::iota(o.begin(), o.end(), 0u);
            std::stable_sort(o.begin(), o.end(), [&](std::uint32_t a, std::uint32_t b) { return x[a * f + j] < x[b * f + j]; });
        }
    }
};

/// Gini criterion. stats = [W, c_0 .. c_{K-1}]; impurity returned as W * gini.
struct GiniCriterion {
    const std::uint8_t* labels;  // class index 0..K-1
    std::size_t k;

    std::size_t dims() const { return 1 + k; }
    void add(double* s, std::size_t i, double w) const { s[0] += w, s[1 + labels[i]] += w; }
    double impurity(const double* s) const {
        if (s[0] <= 0.0) return 0.0;
        double q = 0.0;
        for (std::size_t c = 0; c < k; ++c) q += s[1 + c] * s[1 + c];
        return s[0] - q / s[0];
    }
    std::size_t value_dim() const { return k; }
    void leaf(const double* s, float* out) const {
        for (std::size_t c = 0; c < k; ++c) out[c] = static_cast<float>(s[1 + c] / s[0]);
    }
};

/// Squared-error criterion with a Newton leaf value sum(w r) / sum(w h) * scale.
/// stats = [W, sum w r, sum w r^2, sum w h].
struct NewtonCriterion {
    const double* residual;
    const double* hessian;
    double scale = 1.0;

    std::size_t dims() const { return 4; }
    void add(double* s, std::size_t i, double w) const {
        s[0] += w, s[1] += w * residual[i], s[2] += w * residual[i] * residual[i], s[3] += w * hessian[i];
    }
    double impurity(const double* s) const { return s[0] <= 0.0 ? 0.0 : std::max(0.0, s[2] - s[1] * s[1] / s[0]); }
    std::size_t value_dim() const { return 1; }
    void leaf(const double* s, float* out) const {
        out[0] = static_cast<float>(s[3] < 1e-150 ? 0.0 : scale * s[1] / s[3]);
    }
};

struct TreeParams {
    std::size_t max_depth = 0;     // 0 = unlimited
    std::size_t max_features = 0;  // features tried per node, 0 = all
    double min_split_weight = 2.0;
};

/// Breadth-first CART growth over presorted features. weight[i] is the
/// multiplicity of row i (0 = excluded). Each level scans every feature's
/// sorted order once, evaluating thresholds halfway between distinct values.
/// `importance` (size F) accumulates the impurity decrease of each split.
template <class Crit>
Tree grow_tree(const float* x, std::size_t rows, std::size_t nf, const Presorted& ps, const std::vector<double>& weight,
               const Crit& crit, const TreeParams& tp, Rng& rng, std::vector<double>& importance) {
    const std::size_t d = crit.dims();
    Tree t;
    t.value_dim = crit.value_dim();
    std::vector<std::int32_t> node_of(rows, -1);
    t.add_node();
    std::vector<double> node_stats(d, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        if (weight[i] > 0) node_of[i] = 0, crit.add(node_stats.data(), i, weight[i]);
    struct Active {
        std::size_t node, depth;
        std::vector<double> stats;
    };
    std::vector<Active> active = {{0, 0, node_stats}};
    const std::size_t mf = tp.max_features == 0 ? nf : std::min(tp.max_features, nf);
    std::vector<std::uint32_t> feats(nf);
    while (!active.empty()) {
        const std::size_t na = active.size();
        std::vector<std::int32_t> slot(t.size(), -1);
        std::vector<char> use(na * nf, 0);
        std::vector<char> splittable(na, 0);
        for (std::size_t a = 0; a < na; ++a) {
            const auto& A = active[a];
            const bool depth_ok = tp.max_depth == 0 || A.depth < tp.max_depth;
            if (!depth_ok || A.stats[0] < tp.min_split_weight || crit.impurity(A.stats.data()) <= 1e-12 * A.stats[0]) continue;
            splittable[a] = 1;
            slot[A.node] = static_cast<std::int32_t>(a);
            std::iota(feats.begin(), feats.end(), 0u);
            for (std::size_t j = 0; j < mf; ++j) std::swap(feats[j], feats[j + rng.uniform_int(nf - j)]);
            for (std::size_t j = 0; j < mf; ++j) use[a * nf + feats[j]] = 1;
        }
        std::vector<double> best_gain(na, 0.0), leftst(na * d), right(d);
        std::vector<std::int32_t> best_f(na, -1);
        std::vector<float> best_thr(na, 0.0f), last(na);
        std::vector<char> has_last(na);
        for (std::size_t f = 0; f < nf; ++f) {
            std::fill(leftst.begin(), leftst.end(), 0.0);
            std::fill(has_last.begin(), has_last.end(), 0);
            for (std::uint32_t i : ps.order[f]) {
                const std::int32_t k = node_of[i];
                if (k < 0) continue;
                const std::int32_t s = slot[static_cast<std::size_t>(k)];
                if (s < 0 || !use[static_cast<std::size_t>(s) * nf + f]) continue;
                const std::size_t a = static_cast<std::size_t>(s);
                const float v = x[i * nf + f];
                double* L = leftst.data() + a * d;
                if (has_last[a] && v > last[a]) {
                    const double* T = active[a].stats.data();
                    for (std::size_t q = 0; q < d; ++q) right[q] = T[q] - L[q];
                    const double gain = crit.impurity(T) - crit.impurity(L) - crit.impurity(right.data());
                    if (gain > best_gain[a] + 1e-12 * T[0]) {
                        best_gain[a] = gain;
                        best_f[a] = static_cast<std::int32_t>(f);
                        float thr = static_cast<float>((static_cast<double>(last[a]) + static_cast<double>(v)) / 2.0);
                        if (!(thr < v)) thr = last[a];
                        best_thr[a] = thr;
                    }
                }
                crit.add(L, i, weight[i]);
                last[a] = v;
                has_last[a] = 1;
            }
        }
        // Split or finalize; children become the next level.
        std::vector<Active> next;
        std::vector<std::int32_t> left_child(na, -1);
        for (std::size_t a = 0; a < na; ++a) {
            const auto& A = active[a];
            if (splittable[a] && best_f[a] >= 0) {
                const std::size_t l = t.add_node(), r = t.add_node();
                t.feature[A.node] = best_f[a];
                t.threshold[A.node] = best_thr[a];
                t.left[A.node] = static_cast<std::int32_t>(l);
                t.right[A.node] = static_cast<std::int32_t>(r);
                importance[static_cast<std::size_t>(best_f[a])] += best_gain[a];
                left_child[a] = static_cast<std::int32_t>(l);
                next.push_back({l, A.depth + 1, std::vector<double>(d, 0.0)});
                next.push_back({r, A.depth + 1, std::vector<double>(d, 0.0)});
            } else {
                crit.leaf(A.stats.data(), t.value.data() + A.node * t.value_dim);
            }
        }
        std::vector<std::int32_t> active_of(t.size(), -1);
        for (std::size_t a = 0; a < na; ++a) active_of[active[a].node] = static_cast<std::int32_t>(a);
        std::vector<std::int32_t> next_of(t.size(), -1);
        for (std::size_t j = 0; j < next.size(); ++j) next_of[next[j].node] = static_cast<std::int32_t>(j);
        for (std::size_t i = 0; i < rows; ++i) {
            const std::int32_t k = node_of[i];
            if (k < 0) continue;
            const std::size_t a = static_cast<std::size_t>(active_of[static_cast<std::size_t>(k)]);
            if (left_child[a] < 0) {
                node_of[i] = -1;
                continue;
            }
            const std::size_t n = static_cast<std::size_t>(k);
            const std::int32_t child = x[i * nf + static_cast<std::size_t>(t.feature[n])] <= t.threshold[n] ? t.left[n] : t.right[n];
            node_of[i] = child;
            crit.add(next[static_cast<std::size_t>(next_of[static_cast<std::size_t>(child)])].stats.data(), i, weight[i]);
        }
        active = std::move(next);
    }
    return t;
}

// ---- models ----

enum class PixelModelKind { random_forest, gradient_boosting, mlp };

inline std::string kind_name(PixelModelKind k) {
    switch (k) {
        case PixelModelKind::random_forest: return "random_forest";
        case PixelModelKind::gradient_boosting: return "gradient_boosting";
        case PixelModelKind::mlp: return "mlp";
    }
    return "?";
}

inline PixelModelKind parse_kind(const std::string& s) {
    if (s == "random_forest" || s == "rf") return PixelModelKind::random_forest;
    if (s == "gradient_boosting" || s == "gbt") return PixelModelKind::gradient_boosting;
    if (s == "mlp") return PixelModelKind::mlp;
    throw ConfigError("unknown pixel classifier '" + s + "' (random_forest, gradient_boosting, mlp)");
}

struct PixelHyperparams {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    // random forest
    std::size_t n_trees = 100;
    std::size_t rf_max_depth = 0;     // unlimited
    std::size_t rf_max_features = 0;  // 0 = floor(sqrt(F))
    // gradient boosting
    std::size_t gbt_rounds = 100;
    std::size_t gbt_max_depth = 3;
    double gbt_learning_rate = 0.1;
    // mlp
    std::vector<std::size_t> mlp_hidden = {64, 64};
    double mlp_learning_rate = 1e-3;
    double mlp_l2 = 1e-4;
    std::size_t mlp_epochs = 50;
    std::size_t mlp_batch = 200;

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"threads", threads},
                {"n_trees", n_trees},
                {"rf_max_depth", rf_max_depth},
                {"rf_max_features", rf_max_features},
                {"criterion", "gini"},
                {"gbt_rounds", gbt_rounds},
                {"gbt_max_depth", gbt_max_depth},
                {"gbt_learning_rate", gbt_learning_rate},
                {"mlp_hidden", mlp_hidden},
                {"mlp_activation", "relu"},
                {"mlp_learning_rate", mlp_learning_rate},
                {"mlp_l2", mlp_l2},
                {"mlp_epochs", mlp_epochs},
                {"mlp_batch", mlp_batch}};
    }

    static PixelHyperparams from_json(const nlohmann::json& j) {
        PixelHyperparams h;
        h.seed = j.value("seed", h.seed);
        h.threads = j.value("threads", h.threads);
        h.n_trees = j.value("n_trees", h.n_trees);
        h.rf_max_depth = j.value("rf_max_depth", h.rf_max_depth);
        h.rf_max_features = j.value("rf_max_features", h.rf_max_features);
        h.gbt_rounds = j.value("gbt_rounds", h.gbt_rounds);
        h.gbt_max_depth = j.value("gbt_max_depth", h.gbt_max_depth);
        h.gbt_learning_rate = j.value("gbt_learning_rate", h.gbt_learning_rate);
        h.mlp_hidden = j.value("mlp_hidden", h.mlp_hidden);
        h.mlp_learning_rate = j.value("mlp_learning_rate", h.mlp_learning_rate);
        h.mlp_l2 = j.value("mlp_l2", h.mlp_l2);
        h.mlp_epochs = j.value("mlp_epochs", h.mlp_epochs);
        h.mlp_batch = j.value("mlp_batch", h.mlp_batch);
        return h;
    }
};

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::Matrix<float, 1, Eigen::Dynamic>;

struct PixelModel {
    PixelModelKind kind = PixelModelKind::random_forest;
    std::vector<std::string> feature_names;
    std::size_t n_features = 0;
    std::vector<std::uint8_t> classes;  // class codes present in training, ascending
    PixelHyperparams hyper;
    std::vector<Tree> trees;            // rf: one per tree; gbt: rounds x classes, class-major within a round
    std::vector<double> init_score;     // gbt
    std::vector<double> importances;    // rf/gbt, one per feature, sums to 1
    std::vector<MatrixF> mlp_w;         // mlp: layer weights (in x out)
    std::vector<VectorF> mlp_b;
    std::vector<float> mlp_mean, mlp_scale;  // mlp input standardization

    /// Probabilities over the three class codes (absent classes get 0).
    std::array<double, kClassCount> predict_proba(const float* x) const {
        std::array<double, kClassCount> out{};
        const std::size_t k = classes.size();
        std::vector<double> p(k, 0.0);
        if (kind == PixelModelKind::random_forest) {
            for (const auto& t : trees) {
                const float* v = t.predict(x);
                for (std::size_t c = 0; c < k; ++c) p[c] += v[c];
            }
            for (auto& v : p) v /= static_cast<double>(trees.size());
        } else if (kind == PixelModelKind::gradient_boosting) {
            std::vector<double> f = init_score;
            for (std::size_t t = 0; t < trees.size(); ++t) f[t % k] += hyper.gbt_learning_rate * trees[t].predict(x)[0];
            softmax(f);
            p = f;
        } else {
            VectorF a(static_cast<Eigen::Index>(n_features));
            for (std::size_t j = 0; j < n_features; ++j) a[static_cast<Eigen::Index>(j)] = (x[j] - mlp_mean[j]) * mlp_scale[j];
            for (std::size_t l = 0; l < mlp_w.size(); ++l) {
                VectorF z = a * mlp_w[l] + mlp_b[l];
                if (l + 1 < mlp_w.size()) z = z.cwiseMax(0.0f);
                a = std::move(z);
            }
            for (std::size_t c = 0; c < k; ++c) p[c] = a[static_cast<Eigen::Index>(c)];
            softmax(p);
        }
        for (std::size_t c = 0; c < k; ++c) out.at(classes[c]) = p[c];
        return out;
    }

    /// Argmax class code; ties go to the lower code (background < clean_ice < debris).
    std::uint8_t predict(const float* x) const {
        const auto p = predict_proba(x);
        std::uint8_t best = 0;
        for (std::uint8_t c = 1; c < kClassCount; ++c)
            if (p[c] > p[best]) best = c;
        return best;
    }

    static void softmax(std::vector<double>& v) {
        const double m = *std::max_element(v.begin(), v.end());
        double s = 0.0;
        for (auto& e : v) s += (e = std::exp(e - m));
        for (auto& e : v) e /= s;
    }
};

namespace detail {

inline std::vector<std::uint8_t> present_classes(const PixelDataset& ds) {
    const auto counts = ds.class_counts();
    std::vector<std::uint8_t> out;
    for (std::uint8_t c = 0; c < kClassCount; ++c)
        if (counts[c] > 0) out.push_back(c);
    if (out.size() < 2)
        throw TrainingError("pixel classifier needs at least two classes; the sample has only " +
                            (out.empty() ? std::string("none") : class_name(static_cast<GlacierClass>(out[0]))));
    return out;
}

inline std::vector<double> normalized(std::vector<double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    if (s > 0.0)
        for (auto& x : v) x /= s;
    return v;
}

inline void finish_importances(PixelModel& m, const std::vector<std::vector<double>>& per_tree) {
    std::vector<double> acc(m.n_features, 0.0);
    // Each tree's importances are normalized before averaging.
    for (const auto& t : per_tree) {
        const auto n = normalized(t);
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += n[j];
    }
    acc = normalized(acc);
    double s = 0.0;
    for (double v : acc) s += v;
    if (s == 0.0) std::fill(acc.begin(), acc.end(), 1.0 / static_cast<double>(acc.size()));
    m.importances = acc;
}

inline constexpr std::uint64_t kForestStream = 0x464f52455354ULL;
inline constexpr std::uint64_t kBoostStream = 0x424f4f5354ULL;
inline constexpr std::uint64_t kMlpStream = 0x4d4c50ULL;

inline void fit_forest(PixelModel& m, const PixelDataset& ds) {
    const std::size_t n = ds.rows(), f = ds.n_features, k = m.classes.size();
    std::vector<std::uint8_t> idx(n);
    for (std::size_t i = 0; i < n; ++i)
        idx[i] = static_cast<std::uint8_t>(std::find(m.classes.begin(), m.classes.end(), ds.labels[i]) - m.classes.begin());
    const Presorted ps(ds.features.data(), n, f);
    GiniCriterion crit{idx.data(), k};
    TreeParams tp;
    tp.max_depth = m.hyper.rf_max_depth;
    tp.max_features = m.hyper.rf_max_features ? m.hyper.rf_max_features
                                              : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(double(f))));
    const std::size_t nt = m.hyper.n_trees;
    if (nt == 0) throw ConfigError("random forest needs at least one tree");
    m.trees.assign(nt, {});
    std::vector<std::vector<double>> imp(nt, std::vector<double>(f, 0.0));
    auto work = [&](std::size_t w, std::size_t workers) {
        for (std::size_t t = w; t < nt; t += workers) {
            Rng rng = Rng::derive(m.hyper.seed, {kForestStream, t});
            std::vector<double> weight(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) weight[rng.uniform_int(n)] += 1.0;
            m.trees[t] = grow_tree(ds.features.data(), n, f, ps, weight, crit, tp, rng, imp[t]);
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(m.hyper.threads, nt));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
        for (auto& th : pool) th.join();
    }
    finish_importances(m, imp);
}

inline void fit_boosting(PixelModel& m, const PixelDataset& ds) {
    const std::size_t n = ds.rows(), f = ds.n_features, k = m.classes.size();
    std::vector<std::size_t> idx(n);
    std::vector<double> prior(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = static_cast<std::size_t>(std::find(m.classes.begin(), m.classes.end(), ds.labels[i]) - m.classes.begin());
        prior[idx[i]] += 1.0;
    }
    m.init_score.resize(k);
    for (std::size_t c = 0; c < k; ++c) m.init_score[c] = std::log(prior[c] / static_cast<double>(n));
    std::vector<double> score(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) score[i * k + c] = m.init_score[c];
    const Presorted ps(ds.features.data(), n, f);
    TreeParams tp;
    tp.max_depth = m.hyper.gbt_max_depth;
    const std::vector<double> weight(n, 1.0);
    std::vector<double> res(n), hess(n), prob(n * k);
    std::vector<std::vector<double>> imp;
    Rng rng = Rng::derive(m.hyper.seed, {kBoostStream});
    for (std::size_t round = 0; round < m.hyper.gbt_rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(score.begin() + static_cast<long>(i * k), score.begin() + static_cast<long>((i + 1) * k));
            PixelModel::softmax(s);
            std::copy(s.begin(), s.end(), prob.begin() + static_cast<long>(i * k));
        }
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                const double p = prob[i * k + c];
                res[i] = (idx[i] == c ? 1.0 : 0.0) - p;
                hess[i] = p * (1.0 - p);
            }
            NewtonCriterion crit{res.data(), hess.data(), static_cast<double>(k - 1) / static_cast<double>(k)};
            imp.emplace_back(f, 0.0);
            Tree t = grow_tree(ds.features.data(), n, f, ps, weight, crit, tp, rng, imp.back());
            for (std::size_t i = 0; i < n; ++i) score[i * k + c] += m.hyper.gbt_learning_rate * t.predict(ds.row(i))[0];
            m.trees.push_back(std::move(t));
        }
    }
    finish_importances(m, imp);
}

inline void fit_mlp(PixelModel& m, const PixelDataset& ds) {
    const std::size_t n = ds.rows(), f = ds.n_features, k = m.classes.size();
    m.mlp_mean.assign(f, 0.0f);
    m.mlp_scale.assign(f, 1.0f);
    for (std::size_t j = 0; j < f; ++j) {
        double s = 0.0, q = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += ds.row(i)[j];
        const double mean = s / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) q += (ds.row(i)[j] - mean) * (ds.row(i)[j] - mean);
        const double sd = std::sqrt(q / static_cast<double>(n));
        m.mlp_mean[j] = static_cast<float>(mean);
        m.mlp_scale[j] = static_cast<float>(sd > 0 ? 1.0 / sd : 1.0);
    }
    std::vector<std::size_t> widths = {f};
    widths.insert(widths.end(), m.hyper.mlp_hidden.begin(), m.hyper.mlp_hidden.end());
    widths.push_back(k);
    Rng rng = Rng::derive(m.hyper.seed, {kMlpStream});
    const std::size_t nl = widths.size() - 1;
    m.mlp_w.clear();
    m.mlp_b.clear();
    for (std::size_t l = 0; l < nl; ++l) {
        const auto in = static_cast<Eigen::Index>(widths[l]), out = static_cast<Eigen::Index>(widths[l + 1]);
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));  // Glorot uniform
        MatrixF w(in, out);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
        m.mlp_w.push_back(std::move(w));
        m.mlp_b.push_back(VectorF::Zero(out));
    }
    MatrixF xs(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j)
            xs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (ds.row(i)[j] - m.mlp_mean[j]) * m.mlp_scale[j];
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i)
        y[i] = static_cast<std::size_t>(std::find(m.classes.begin(), m.classes.end(), ds.labels[i]) - m.classes.begin());

    // Adam state.
    std::vector<MatrixF> mw, vw;
    std::vector<VectorF> mb, vb;
    for (std::size_t l = 0; l < nl; ++l) {
        mw.push_back(MatrixF::Zero(m.mlp_w[l].rows(), m.mlp_w[l].cols()));
        vw.push_back(mw.back());
        mb.push_back(VectorF::Zero(m.mlp_b[l].cols()));
        vb.push_back(mb.back());
    }
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f, lr = static_cast<float>(m.hyper.mlp_learning_rate);
    std::uint64_t step = 0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = std::max<std::size_t>(1, std::min(m.hyper.mlp_batch, n));
    std::vector<MatrixF> acts(nl + 1);
    for (std::size_t epoch = 0; epoch < m.hyper.mlp_epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t s0 = 0; s0 < n; s0 += bs) {
            const std::size_t b = std::min(bs, n - s0);
            MatrixF xb(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(f));
            for (std::size_t r = 0; r < b; ++r) xb.row(static_cast<Eigen::Index>(r)) = xs.row(static_cast<Eigen::Index>(order[s0 + r]));
            acts[0] = std::move(xb);
            for (std::size_t l = 0; l < nl; ++l) {
                MatrixF z = acts[l] * m.mlp_w[l];
                z.rowwise() += m.mlp_b[l];
                if (l + 1 < nl) z = z.cwiseMax(0.0f);
                acts[l + 1] = std::move(z);
            }
            // Softmax cross-entropy gradient.
            MatrixF delta = acts[nl];
            for (Eigen::Index r = 0; r < delta.rows(); ++r) {
                const float mx = delta.row(r).maxCoeff();
                float s = 0.0f;
                for (Eigen::Index c = 0; c < delta.cols(); ++c) s += (delta(r, c) = std::exp(delta(r, c) - mx));
                for (Eigen::Index c = 0; c < delta.cols(); ++c) delta(r, c) /= s;
                delta(r, static_cast<Eigen::Index>(y[order[s0 + static_cast<std::size_t>(r)]])) -= 1.0f;
            }
            delta /= static_cast<float>(b);
            ++step;
            const float c1 = 1.0f - std::pow(b1, static_cast<float>(step)), c2 = 1.0f - std::pow(b2, static_cast<float>(step));
            for (std::size_t l = nl; l-- > 0;) {
                MatrixF gw = acts[l].transpose() * delta;
                gw += static_cast<float>(m.hyper.mlp_l2 / static_cast<double>(b)) * m.mlp_w[l];
                VectorF gb = VectorF::Zero(delta.cols());
                for (Eigen::Index r = 0; r < delta.rows(); ++r) gb += delta.row(r);
                if (l > 0) {
                    MatrixF prev = delta * m.mlp_w[l].transpose();
                    delta = prev.cwiseProduct((acts[l].array() > 0.0f).cast<float>().matrix());
                }
                mw[l] = b1 * mw[l] + (1 - b1) * gw;
                vw[l] = b2 * vw[l] + (1 - b2) * gw.cwiseProduct(gw);
                mb[l] = b1 * mb[l] + (1 - b1) * gb;
                vb[l] = b2 * vb[l] + (1 - b2) * gb.cwiseProduct(gb);
                m.mlp_w[l].array() -= lr * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + eps);
                m.mlp_b[l].array() -= lr * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps);
            }
        }
    }
}

}  // namespace detail

/// Train a pixel classifier. RF: bootstrap CART trees with Gini splits and
/// floor(sqrt(F)) candidate features per node; GBT: softmax boosting with
/// depth-limited Newton trees; MLP: ReLU layers trained by Adam on softmax
/// cross-entropy.
inline PixelModel fit_pixel_classifier(const PixelDataset& ds, PixelModelKind kind, const PixelHyperparams& hyper = {}) {
    if (ds.rows() == 0) throw TrainingError("pixel dataset is empty");
    PixelModel m;
    m.kind = kind;
    m.feature_names = ds.feature_names;
    m.n_features = ds.n_features;
    m.hyper = hyper;
    m.classes = detail::present_classes(ds);
    switch (kind) {
        case PixelModelKind::random_forest: detail::fit_forest(m, ds); break;
        case PixelModelKind::gradient_boosting: detail::fit_boosting(m, ds); break;
        case PixelModelKind::mlp: detail::fit_mlp(m, ds); break;
    }
    return m;
}

inline double accuracy(const PixelModel& m, const PixelDataset& ds) {
    if (ds.rows() == 0) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ds.rows(); ++i) ok += m.predict(ds.row(i)) == ds.labels[i];
    return static_cast<double>(ok) / static_cast<double>(ds.rows());
}

// ---- importances ----

struct ImportanceReport {
    std::vector<std::string> channels;
    std::vector<double> importance;

    void validate() const {
        if (channels.size() != importance.size()) throw ValidationError("importance report has mismatched lengths");
        double s = 0.0;
        for (double v : importance) {
            if (!(v >= 0.0)) throw ValidationError("importance report has a negative or NaN entry");
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-6) throw ValidationError("importances sum to " + std::to_string(s) + ", not 1");
    }

    /// Channel indices by descending importance (stable on ties).
    std::vector<std::size_t> ordering() const {
        std::vector<std::size_t> o(importance.size());
        std::iota(o.begin(), o.end(), 0);
        std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
        return o;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "channel,importance\n";
        char buf[64];
        for (std::size_t i : ordering()) {
            std::snprintf(buf, sizeof buf, "%.8f", importance[i]);
            os << channels[i] << "," << buf << "\n";
        }
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (std::size_t i : ordering()) j.push_back({{"channel", channels[i]}, {"importance", importance[i]}});
        return j;
    }
};

/// Mean-impurity-decrease importances of a tree model.
inline ImportanceReport impurity_importance(const PixelModel& m) {
    if (m.kind == PixelModelKind::mlp) throw ConfigError("impurity importances need a tree model");
    return {m.feature_names, m.importances};
}

/// Permutation importance: accuracy drop on `ds` when one feature column is
/// shuffled, clipped at 0 and normalized to sum 1 (uniform if no drop).
inline ImportanceReport permutation_importance(const PixelModel& m, const PixelDataset& ds, std::uint64_t seed) {
    const double base = accuracy(m, ds);
    std::vector<double> drop(ds.n_features, 0.0);
    std::vector<float> row(ds.n_features);
    for (std::size_t j = 0; j < ds.n_features; ++j) {
        std::vector<std::size_t> perm(ds.rows());
        std::iota(perm.begin(), perm.end(), 0);
        Rng::derive(seed, {0x5045524dULL, j}).shuffle(std::span<std::size_t>(perm));
        std::size_t ok = 0;
        for (std::size_t i = 0; i < ds.rows(); ++i) {
            std::copy(ds.row(i), ds.row(i) + ds.n_features, row.begin());
            row[j] = ds.row(perm[i])[j];
            ok += m.predict(row.data()) == ds.labels[i];
        }
        drop[j] = std::max(0.0, base - static_cast<double>(ok) / static_cast<double>(ds.rows()));
    }
    double s = 0.0;
    for (double v : drop) s += v;
    if (s == 0.0) std::fill(drop.begin(), drop.end(), 1.0 / static_cast<double>(drop.size()));
    else
        for (auto& v : drop) v /= s;
    return {m.feature_names, drop};
}

/// Channels with importance strictly greater than `threshold`, most important first.
inline ChannelSubsetSpec select_by_importance(const ImportanceReport& report, double threshold = 0.05) {
    report.validate();
    ChannelSubsetSpec spec;
    spec.label = "rf_selected";
    for (std::size_t i : report.ordering())
        if (report.importance[i] > threshold) spec.members.push_back(report.channels[i]);
    if (spec.members.empty())
        throw ConfigError("no channel has importance above " + std::to_string(threshold) + "; lower the threshold");
    return spec;
}

// ---- prediction ----

inline MaskGrid predict_classes(const PixelModel& m, const Patch& patch) {
    if (patch.data.channels() != m.n_features)
        throw ConfigError("model expects " + std::to_string(m.n_features) + " features, patch has " +
                          std::to_string(patch.data.channels()) + " channels");
    if (!patch.channels.empty() && !m.feature_names.empty() && patch.channels != m.feature_names)
        throw ConfigError("patch channel order does not match the model's feature order");
    const std::size_t n = patch.data.plane_size();
    MaskGrid out(patch.data.width(), patch.data.height(), 0);
    std::vector<float> x(m.n_features);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m.n_features; ++j) x[j] = patch.data.data()[j * n + i];
        out.storage()[i] = m.predict(x.data());
    }
    return out;
}

inline MaskPatch predict_mask(const PixelModel& m, const Patch& patch) {
    return mask_patch_from_classes(predict_classes(m, patch), patch.meta);
}

// ---- serialization ----

inline std::vector<std::uint8_t> encode_model(const PixelModel& m) {
    container::Document doc;
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : m.trees) {
        trees.push_back({{"nodes", t.size()}, {"value_dim", t.value_dim}});
        container::append_le(doc.payload, t.feature.data(), t.size());
        container::append_le(doc.payload, t.threshold.data(), t.size());
        container::append_le(doc.payload, t.left.data(), t.size());
        container::append_le(doc.payload, t.right.data(), t.size());
        container::append_le(doc.payload, t.value.data(), t.value.size());
    }
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < m.mlp_w.size(); ++l) {
        layers.push_back({{"in", m.mlp_w[l].rows()}, {"out", m.mlp_w[l].cols()}});
        container::append_le(doc.payload, m.mlp_w[l].data(), static_cast<std::size_t>(m.mlp_w[l].size()));
        container::append_le(doc.payload, m.mlp_b[l].data(), static_cast<std::size_t>(m.mlp_b[l].size()));
    }
    std::vector<int> cls(m.classes.begin(), m.classes.end());
    doc.header = {{"kind", "pixel_model"},
                  {"model_kind", kind_name(m.kind)},
                  {"feature_names", m.feature_names},
                  {"n_features", m.n_features},
                  {"classes", cls},
                  {"hyperparams", m.hyper.to_json()},
                  {"trees", trees},
                  {"init_score", m.init_score},
                  {"importances", m.importances},
                  {"mlp_layers", layers},
                  {"mlp_mean", m.mlp_mean},
                  {"mlp_scale", m.mlp_scale}};
    return container::encode(doc);
}

inline PixelModel decode_model(const std::vector<std::uint8_t>& bytes) {
    container::Document doc = container::decode(bytes, [](const nlohmann::json& h) {
        std::size_t n = 0;
        for (const auto& t : h.at("trees")) {
            const std::size_t nodes = t.at("nodes").get<std::size_t>();
            n += nodes * 16 + nodes * t.at("value_dim").get<std::size_t>() * 4;
        }
        for (const auto& l : h.at("mlp_layers"))
            n += (l.at("in").get<std::size_t>() + 1) * l.at("out").get<std::size_t>() * 4;
        return n;
    });
    const auto& h = doc.header;
    if (h.value("kind", "") != "pixel_model") throw FormatError("container is not a pixel model", 8);
    PixelModel m;
    m.kind = parse_kind(h.at("model_kind").get<std::string>());
    m.feature_names = h.at("feature_names").get<std::vector<std::string>>();
    m.n_features = h.at("n_features").get<std::size_t>();
    for (int c : h.at("classes").get<std::vector<int>>()) m.classes.push_back(static_cast<std::uint8_t>(c));
    m.hyper = PixelHyperparams::from_json(h.at("hyperparams"));
    m.init_score = h.at("init_score").get<std::vector<double>>();
    m.importances = h.at("importances").get<std::vector<double>>();
    m.mlp_mean = h.at("mlp_mean").get<std::vector<float>>();
    m.mlp_scale = h.at("mlp_scale").get<std::vector<float>>();
    const std::uint8_t* p = doc.payload.data();
    for (const auto& tj : h.at("trees")) {
        Tree t;
        const std::size_t nodes = tj.at("nodes").get<std::size_t>();
        t.value_dim = tj.at("value_dim").get<std::size_t>();
        t.feature.resize(nodes), t.threshold.resize(nodes), t.left.resize(nodes), t.right.resize(nodes);
        t.value.resize(nodes * t.value_dim);
        container::read_le(p, t.feature.data(), nodes), p += nodes * 4;
        container::read_le(p, t.threshold.data(), nodes), p += nodes * 4;
        container::read_le(p, t.left.data(), nodes), p += nodes * 4;
        container::read_le(p, t.right.data(), nodes), p += nodes * 4;
        container::read_le(p, t.value.data(), t.value.size()), p += t.value.size() * 4;
        for (std::size_t i = 0; i < nodes; ++i)
            if (t.feature[i] >= static_cast<std::int32_t>(m.n_features) ||
                (t.feature[i] >= 0 && (t.left[i] <= static_cast<std::int32_t>(i) || t.right[i] <= static_cast<std::int32_t>(i) ||
                                       t.left[i] >= static_cast<std::int32_t>(nodes) || t.right[i] >= static_cast<std::int32_t>(nodes))))
                throw FormatError("pixel model tree has an invalid node " + std::to_string(i), 8);
        m.trees.push_back(std::move(t));
    }
    for (const auto& l : h.at("mlp_layers")) {
        const auto in = l.at("in").get<Eigen::Index>(), out = l.at("out").get<Eigen::Index>();
        MatrixF w(in, out);
        VectorF b(out);
        container::read_le(p, w.data(), static_cast<std::size_t>(w.size())), p += w.size() * 4;
        container::read_le(p, b.data(), static_cast<std::size_t>(b.size())), p += b.size() * 4;
        m.mlp_w.push_back(std::move(w));
        m.mlp_b.push_back(std::move(b));
    }
    return m;
}

inline void save_model(const std::filesystem::path& path, const PixelModel& m) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    container::write_file(path, encode_model(m));
}

inline PixelModel load_model(const std::filesystem::path& path) { return decode_model(container::read_file(path)); }

}  // namespace glacier::baselines
