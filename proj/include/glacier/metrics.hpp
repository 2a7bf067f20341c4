#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/grid.hpp"

namespace glacier {

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
        return *this;
    }
    std::uint64_t total() const { return tp + fp + fn + tn; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Tally of a binary prediction plane against a binary truth plane (nonzero = positive).
inline ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    if (pred.size() != truth.size())
        throw ShapeError("confusion_counts: prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
                         std::to_string(truth.size()));
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        c.tp += p && t;
        c.fp += p && !t;
        c.fn += !p && t;
        c.tn += !p && !t;
    }
    return c;
}

inline ConfusionCounts confusion_counts(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& truth) {
    if (!pred.same_shape(truth))
        throw ShapeError("confusion_counts: prediction is " + std::to_string(pred.width()) + "x" +
                         std::to_string(pred.height()) + ", truth is " + std::to_string(truth.width()) + "x" +
                         std::to_string(truth.height()));
    return confusion_counts(pred.values(), truth.values());
}

/// A ratio with 0/0 defined as 0 and flagged.
struct Ratio {
    double value = 0.0;
    bool degenerate = false;
    bool operator==(const Ratio&) const = default;
};

inline Ratio safe_ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return {0.0, true};
    return {static_cast<double>(num) / static_cast<double>(den), false};
}

inline Ratio iou(const ConfusionCounts& c) { return safe_ratio(c.tp, c.tp + c.fp + c.fn); }
inline Ratio precision(const ConfusionCounts& c) { return safe_ratio(c.tp, c.tp + c.fp); }
inline Ratio recall(const ConfusionCounts& c) { return safe_ratio(c.tp, c.tp + c.fn); }

/// Probability plane to binary plane: positive where p >= threshold.
template <class T>
Grid<std::uint8_t> binarize(std::span<const T> probs, std::size_t width, std::size_t height, double threshold = 0.5) {
    Grid<std::uint8_t> g(width, height, 0);
    for (std::size_t i = 0; i < probs.size(); ++i) g.storage()[i] = static_cast<double>(probs[i]) >= threshold;
    return g;
}

/// Class-code grid of a binary mask for one class.
inline Grid<std::uint8_t> class_plane(const MaskGrid& classes, GlacierClass c) {
    Grid<std::uint8_t> g(classes.width(), classes.height(), 0);
    for (std::size_t i = 0; i < classes.size(); ++i) g.storage()[i] = classes.storage()[i] == static_cast<std::uint8_t>(c);
    return g;
}

/// Union-glacier plane (clean ice or debris).
inline Grid<std::uint8_t> glacier_plane(const MaskGrid& classes) {
    Grid<std::uint8_t> g(classes.width(), classes.height(), 0);
    for (std::size_t i = 0; i < classes.size(); ++i) g.storage()[i] = classes.storage()[i] != 0;
    return g;
}

struct MetricRow {
    std::string name;
    ConfusionCounts counts;
    Ratio iou, precision, recall;

    static MetricRow from(std::string name, const ConfusionCounts& c) {
        return {std::move(name), c, glacier::iou(c), glacier::precision(c), glacier::recall(c)};
    }
};

/// Set-level metrics for one plane kind: counts are summed over all patches
/// before any ratio is taken.
inline MetricRow evaluate_set(const std::vector<Grid<std::uint8_t>>& preds,
                              const std::vector<Grid<std::uint8_t>>& truths, const std::string& name = "glacier") {
    if (preds.empty()) throw ValidationError("evaluate_set needs at least one patch");
    if (preds.size() != truths.size())
        throw ValidationError("evaluate_set got " + std::to_string(preds.size()) + " predictions and " +
                              std::to_string(truths.size()) + " truths");
    ConfusionCounts c;
    for (std::size_t i = 0; i < preds.size(); ++i) c += confusion_counts(preds[i], truths[i]);
    return MetricRow::from(name, c);
}

struct StratumRow {
    double threshold_percent = 0.0;
    std::size_t patch_count = 0;
    double data_share = 0.0;
    std::vector<std::optional<double>> iou;  // per model; empty stratum -> nullopt
};

inline const std::vector<double> kDebrisThresholds = {0.0, 1.0, 2.0, 5.0, 10.0};

/// Restrict to patches whose debris fraction is strictly greater than each
/// threshold (in percent) and report the data share and the set-level IoU of
/// each model within the stratum. counts[m][i] is model m on patch i.
inline std::vector<StratumRow> stratify_by_debris(const std::vector<std::vector<ConfusionCounts>>& counts,
                                                  const std::vector<double>& debris_fraction,
                                                  const std::vector<double>& thresholds_percent = kDebrisThresholds) {
    for (const auto& m : counts)
        if (m.size() != debris_fraction.size())
            throw ValidationError("stratification got " + std::to_string(m.size()) + " patch counts for " +
                                  std::to_string(debris_fraction.size()) + " patches");
    const std::size_t n = debris_fraction.size();
    std::vector<StratumRow> rows;
    for (double t : thresholds_percent) {
        StratumRow r;
        r.threshold_percent = t;
        const double cut = t / 100.0;
        std::vector<ConfusionCounts> sum(counts.size());
        for (std::size_t i = 0; i < n; ++i)
            if (debris_fraction[i] > cut) {
                ++r.patch_count;
                for (std::size_t m = 0; m < counts.size(); ++m) sum[m] += counts[m][i];
            }
        r.data_share = n == 0 ? 0.0 : static_cast<double>(r.patch_count) / static_cast<double>(n);
        for (const auto& s : sum)
            r.iou.push_back(r.patch_count == 0 ? std::nullopt : std::optional<double>(iou(s).value));
        rows.push_back(std::move(r));
    }
    return rows;
}

/// IoU difference (model b minus model a) in percentage points, rounded to one decimal.
inline std::optional<double> iou_difference_points(const StratumRow& r, std::size_t a = 0, std::size_t b = 1) {
    if (!r.iou.at(a) || !r.iou.at(b)) return std::nullopt;
    return std::round((*r.iou[b] - *r.iou[a]) * 1000.0) / 10.0;
}

namespace detail {

inline std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string opt_fmt(const std::optional<double>& v, int digits = 4) { return v ? fmt(*v, digits) : ""; }

}  // namespace detail

/// Stratification table (CSV or markdown) with columns
/// "% of Debris", "% of Data", one IoU column per model, and "IoU Difference"
/// (last model minus first) when there are exactly two models.
inline std::string stratification_table(const std::vector<StratumRow>& rows, const std::vector<std::string>& models,
                                        bool markdown) {
    std::vector<std::string> head = {"% of Debris", "% of Data"};
    for (const auto& m : models) head.push_back(m + " IoU");
    const bool diff = models.size() == 2;
    if (diff) head.push_back("IoU Difference");
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        if (markdown) {
            os << "|";
            for (const auto& c : cells) os << " " << c << " |";
        } else {
            for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
        }
        os << "\n";
    };
    line(head);
    if (markdown) line(std::vector<std::string>(head.size(), "---"));
    for (const auto& r : rows) {
        std::vector<std::string> cells = {"> " + detail::fmt(r.threshold_percent, 0) + "%",
                                          detail::fmt(100.0 * r.data_share, 0) + "%"};
        for (const auto& v : r.iou) cells.push_back(detail::opt_fmt(v, 3));
        if (diff) {
            auto d = iou_difference_points(r);
            cells.push_back(d ? (*d >= 0 ? "+" : "") + detail::fmt(*d, 1) + "%" : "");
        }
        line(cells);
    }
    return os.str();
}

inline nlohmann::json to_json(const Ratio& r) { return {{"value", r.value}, {"degenerate", r.degenerate}}; }

inline nlohmann::json to_json(const MetricRow& r) {
    return {{"name", r.name},
            {"tp", r.counts.tp},
            {"fp", r.counts.fp},
            {"fn", r.counts.fn},
            {"tn", r.counts.tn},
            {"iou", r.iou.value},
            {"precision", r.precision.value},
            {"recall", r.recall.value},
            {"degenerate", r.iou.degenerate || r.precision.degenerate || r.recall.degenerate}};
}

inline nlohmann::json to_json(const StratumRow& r) {
    nlohmann::json iou = nlohmann::json::array();
    for (const auto& v : r.iou) iou.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    return {{"threshold_percent", r.threshold_percent},
            {"patch_count", r.patch_count},
            {"data_share", r.data_share},
            {"iou", iou}};
}

struct EvalReport {
    std::vector<MetricRow> rows;  // per class plus union
    std::size_t patch_count = 0;
    std::vector<std::string> models;
    std::vector<StratumRow> strata;

    const MetricRow& row(const std::string& name) const {
        for (const auto& r : rows)
            if (r.name == name) return r;
        throw ConfigError("report has no row '" + name + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"patch_count", patch_count}, {"rows", nlohmann::json::array()}};
        for (const auto& r : rows) j["rows"].push_back(glacier::to_json(r));
        if (!strata.empty()) {
            j["models"] = models;
            j["stratification"] = nlohmann::json::array();
            for (const auto& s : strata) j["stratification"].push_back(glacier::to_json(s));
        }
        return j;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "class,tp,fp,fn,tn,iou,precision,recall,degenerate\n";
        for (const auto& r : rows)
            os << r.name << "," << r.counts.tp << "," << r.counts.fp << "," << r.counts.fn << "," << r.counts.tn << ","
               << detail::fmt(r.iou.value, 6) << "," << detail::fmt(r.precision.value, 6) << ","
               << detail::fmt(r.recall.value, 6) << ","
               << (r.iou.degenerate || r.precision.degenerate || r.recall.degenerate ? 1 : 0) << "\n";
        return os.str();
    }
};

/// Report over class-code grids: rows for glacier (union), clean_ice and
/// debris. A binary-union prediction grid uses code 1 for glacier and gets
/// only the glacier row (set `binary`).
inline EvalReport evaluate_classes(const std::vector<MaskGrid>& preds, const std::vector<MaskGrid>& truths,
                                   bool binary = false) {
    if (preds.empty()) throw ValidationError("evaluate_set needs at least one patch");
    if (preds.size() != truths.size())
        throw ValidationError("evaluate_set got " + std::to_string(preds.size()) + " predictions and " +
                              std::to_string(truths.size()) + " truths");
    ConfusionCounts g, c, d;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        g += confusion_counts(glacier_plane(preds[i]), glacier_plane(truths[i]));
        if (!binary) {
            c += confusion_counts(class_plane(preds[i], GlacierClass::clean_ice), class_plane(truths[i], GlacierClass::clean_ice));
            d += confusion_counts(class_plane(preds[i], GlacierClass::debris), class_plane(truths[i], GlacierClass::debris));
        }
    }
    EvalReport r;
    r.patch_count = preds.size();
    r.rows.push_back(MetricRow::from("glacier", g));
    if (!binary) {
        r.rows.push_back(MetricRow::from("clean_ice", c));
        r.rows.push_back(MetricRow::from("debris", d));
    }
    return r;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace glacier
