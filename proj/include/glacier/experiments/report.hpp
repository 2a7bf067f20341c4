#pragma once

#include <charconv>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glacier/error.hpp"
#include "glacier/experiments/harness.hpp"
#include "glacier/metrics.hpp"

namespace glacier::experiments {

/// Report columns, in output order.
inline const std::vector<std::string> kReportColumns = {
    "run_id",        "model",         "task",           "subset",      "seed",          "status",
    "train_patches", "dev_patches",   "test_patches",   "iou_glacier", "precision_glacier", "recall_glacier",
    "iou_clean_ice", "iou_debris",    "history",        "checkpoint",  "error"};

/// One JSON object per run holding exactly the report columns. Metrics a
/// task does not produce are null. Wall-clock time is left out so reports
/// of identical runs are byte-identical; see emit_timings.
inline nlohmann::json report_rows(const std::vector<RunResult>& results) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : results) {
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        auto row_value = [&](const char* row, Ratio MetricRow::*f) -> nlohmann::json {
            if (!r.ok()) return nullptr;
            for (const auto& m : r.report.rows)
                if (m.name == row) return (m.*f).value;
            return nullptr;
        };
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& x : v) s += (s.empty() ? "" : ";") + x;
            return s;
        };
        rows.push_back({{"run_id", r.spec.id},
                        {"model", r.spec.model},
                        {"task", task_name(r.spec.task)},
                        {"subset", r.spec.subset.label},
                        {"seed", r.spec.seed},
                        {"status", r.status},
                        {"train_patches", r.train_patches},
                        {"dev_patches", r.dev_patches},
                        {"test_patches", r.test_patches},
                        {"iou_glacier", opt(r.metric("glacier"))},
                        {"precision_glacier", row_value("glacier", &MetricRow::precision)},
                        {"recall_glacier", row_value("glacier", &MetricRow::recall)},
                        {"iou_clean_ice", opt(r.metric("clean_ice"))},
                        {"iou_debris", opt(r.metric("debris"))},
                        {"history", join(r.histories)},
                        {"checkpoint", join(r.checkpoints)},
                        {"error", r.error}});
    }
    return rows;
}

namespace detail {

/// Shortest text that parses back to the same double.
inline std::string exact(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string csv_cell(const nlohmann::json& v) {
    if (v.is_null()) return "";
    if (v.is_number_float()) return exact(v.get<double>());
    if (v.is_number()) return v.dump();
    std::string s = v.get<std::string>();
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

inline std::string md_cell(const nlohmann::json& v) {
    if (v.is_null()) return "";
    if (v.is_number_float()) return glacier::detail::fmt(v.get<double>(), 4);
    if (v.is_number()) return v.dump();
    std::string s = v.get<std::string>();
    std::string out;
    for (char c : s) out += c == '|' ? std::string("\\|") : c == '\n' ? std::string(" ") : std::string(1, c);
    return out;
}

}  // namespace detail

inline std::string report_csv(const std::vector<RunResult>& results) {
    std::ostringstream os;
    for (std::size_t i = 0; i < kReportColumns.size(); ++i) os << (i ? "," : "") << kReportColumns[i];
    os << "\n";
    for (const auto& row : report_rows(results)) {
        for (std::size_t i = 0; i < kReportColumns.size(); ++i)
            os << (i ? "," : "") << detail::csv_cell(row.at(kReportColumns[i]));
        os << "\n";
    }
    return os.str();
}

inline std::string report_json(const std::vector<RunResult>& results) {
    nlohmann::json j = {{"columns", kReportColumns}, {"rows", report_rows(results)}};
    return j.dump(2) + "\n";
}

inline std::string report_markdown(const std::vector<RunResult>& results) {
    static const std::vector<std::string> cols = {"run_id", "model", "task", "subset", "seed", "status",
                                                  "iou_glacier", "iou_clean_ice", "iou_debris", "checkpoint"};
    std::ostringstream os;
    os << "|";
    for (const auto& c : cols) os << " " << c << " |";
    os << "\n|";
    for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
    os << "\n";
    for (const auto& row : report_rows(results)) {
        os << "|";
        for (const auto& c : cols) os << " " << detail::md_cell(row.at(c)) << " |";
        os << "\n";
    }
    return os.str();
}

/// Write runs.{csv,json,md} under `dir` for one format ("csv", "json",
/// "markdown"). Returns the written path.
inline std::filesystem::path emit_report(const std::vector<RunResult>& results, const std::string& format,
                                         const std::filesystem::path& dir) {
    if (results.empty()) throw ValidationError("report needs at least one run result");
    if (format == "csv") {
        write_text(dir / "runs.csv", report_csv(results));
        return dir / "runs.csv";
    }
    if (format == "json") {
        write_text(dir / "runs.json", report_json(results));
        return dir / "runs.json";
    }
    if (format == "markdown" || format == "md") {
        write_text(dir / "runs.md", report_markdown(results));
        return dir / "runs.md";
    }
    throw ConfigError("unknown report format '" + format + "' (csv, json, markdown)");
}

/// Wall-clock seconds per run, kept apart from the deterministic reports.
inline std::filesystem::path emit_timings(const std::vector<RunResult>& results, const std::filesystem::path& dir) {
    std::ostringstream os;
    os << "run_id,seconds\n";
    for (const auto& r : results) os << detail::csv_cell(r.spec.id) << "," << glacier::detail::fmt(r.seconds, 3) << "\n";
    write_text(dir / "timings.csv", os.str());
    return dir / "timings.csv";
}

/// Parse a runs.csv written by report_csv back into rows keyed by column,
/// typed like report_rows (numbers as numbers, empty cells as null).
inline nlohmann::json parse_report_csv(const std::string& text) {
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> row;
    std::vector<bool> quoted_row;
    std::string cell;
    bool quoted = false, in_quotes = false;
    std::vector<std::vector<bool>> quoted_table;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') cell += '"', ++i;
            else if (c == '"') in_quotes = false;
            else cell += c;
        } else if (c == '"') {
            in_quotes = quoted = true;
        } else if (c == ',' || c == '\n') {
            row.push_back(cell), quoted_row.push_back(quoted);
            cell.clear(), quoted = false;
            if (c == '\n') table.push_back(std::move(row)), quoted_table.push_back(std::move(quoted_row)), row = {}, quoted_row = {};
        } else {
            cell += c;
        }
    }
    if (in_quotes) throw ParseError("unterminated quoted cell in report CSV", text.size());
    if (table.empty()) throw ParseError("report CSV has no header", 0);
    static const std::set<std::string> text_cols = {"run_id", "model", "task",       "subset",
                                                   "status", "history", "checkpoint", "error"};
    nlohmann::json rows = nlohmann::json::array();
    const auto& head = table[0];
    for (std::size_t r = 1; r < table.size(); ++r) {
        if (table[r].size() != head.size()) throw ParseError("report CSV row " + std::to_string(r) + " has the wrong width", 0);
        nlohmann::json o = nlohmann::json::object();
        for (std::size_t k = 0; k < head.size(); ++k) {
            const std::string& v = table[r][k];
            if (text_cols.count(head[k])) o[head[k]] = v;
            else if (v.empty() && !quoted_table[r][k]) o[head[k]] = nullptr;
            else if (v.find_first_of(".eE") == std::string::npos && v.find("inf") == std::string::npos &&
                     v.find("nan") == std::string::npos)
                o[head[k]] = std::stoull(v);
            else {
                double d = 0.0;
                std::from_chars(v.data(), v.data() + v.size(), d);
                o[head[k]] = d;
            }
        }
        rows.push_back(std::move(o));
    }
    return rows;
}

}  // namespace glacier::experiments
