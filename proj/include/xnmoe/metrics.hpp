#pragma once

// Confusion matrix, per-class and macro statistics, text and JSON renderings.

#include "xnmoe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

namespace xnmoe {

/// K×K counts; rows are true classes, columns predicted classes.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t k = 0) : num_classes(k), counts(k * k, 0) {}

    std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * num_classes + p]; }
    std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * num_classes + p]; }

    std::uint64_t total() const
    {
        std::uint64_t n = 0;
        for (auto c : counts) n += c;
        return n;
    }
    std::uint64_t trace() const
    {
        std::uint64_t n = 0;
        for (std::size_t i = 0; i < num_classes; ++i) n += at(i, i);
        return n;
    }
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted,
                                 std::size_t num_classes)
{
    if (truth.size() != predicted.size()) throw ShapeError("confusion: label vectors differ in length");
    ConfusionMatrix cm(num_classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= num_classes || predicted[i] >= num_classes)
            throw DataError("confusion: label out of range at sample " + std::to_string(i));
        ++cm.at(truth[i], predicted[i]);
    }
    return cm;
}

struct ClassStats {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::uint64_t support = 0;
    /// One-vs-rest accuracy (TP + TN) / N.
    double p_acc = 0.0;
};

struct ClassificationReport {
    std::vector<ClassStats> classes;
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::uint64_t total = 0;
};

namespace detail {
inline double ratio(std::uint64_t num, std::uint64_t den)
{
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
} // namespace detail

/// Rates with a zero denominator are 0. Macro values are unweighted class means.
inline ClassificationReport report(const ConfusionMatrix& cm)
{
    const std::size_t K = cm.num_classes;
    const std::uint64_t N = cm.total();
    if (K == 0 || N == 0) throw Error("report: confusion matrix is empty");
    ClassificationReport r;
    r.total = N;
    r.accuracy = detail::ratio(cm.trace(), N);
    for (std::size_t c = 0; c < K; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < K; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::uint64_t tp = cm.at(c, c);
        const std::uint64_t fp = col - tp, fn = row - tp;
        const std::uint64_t tn = N - tp - fp - fn;
        ClassStats s;
        s.precision = detail::ratio(tp, tp + fp);
        s.recall = detail::ratio(tp, tp + fn);
        s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
        s.support = row;
        s.p_acc = detail::ratio(tp + tn, N);
        r.classes.push_back(s);
    }
    for (const auto& s : r.classes) {
        r.macro_precision += s.precision;
        r.macro_recall += s.recall;
        r.macro_f1 += s.f1;
    }
    r.macro_precision /= static_cast<double>(K);
    r.macro_recall /= static_cast<double>(K);
    r.macro_f1 /= static_cast<double>(K);
    return r;
}

inline constexpr const char* kReportFooter = "Rates with a zero denominator are reported as 0.";

namespace detail {
inline void check_names(const ClassificationReport& r, const std::vector<std::string>& names)
{
    if (names.size() != r.classes.size())
        throw Error("report: " + std::to_string(names.size()) + " class names for " + std::to_string(r.classes.size())
                    + " classes");
}
} // namespace detail

/// Fixed-layout table: name, precision, recall, f1-score, support, p-acc; then
/// accuracy and macro-average rows and a footer line.
inline std::string render_text(const ClassificationReport& r, const std::vector<std::string>& names)
{
    detail::check_names(r, names);
    int w = 12;
    for (const auto& n : names) w = std::max(w, static_cast<int>(n.size()));
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%*s %10s %10s %10s %10s %10s\n", w, "", "precision", "recall", "f1-score", "support",
                  "p-acc");
    out += buf;
    out += '\n';
    for (std::size_t c = 0; c < names.size(); ++c) {
        const auto& s = r.classes[c];
        std::snprintf(buf, sizeof buf, "%*s %10.2f %10.2f %10.2f %10llu %10.2f\n", w, names[c].c_str(), s.precision,
                      s.recall, s.f1, static_cast<unsigned long long>(s.support), s.p_acc);
        out += buf;
    }
    out += '\n';
    std::snprintf(buf, sizeof buf, "%*s %10s %10s %10.2f %10llu\n", w, "accuracy", "", "", r.accuracy,
                  static_cast<unsigned long long>(r.total));
    out += buf;
    std::snprintf(buf, sizeof buf, "%*s %10.2f %10.2f %10.2f %10llu\n", w, "macro avg", r.macro_precision,
                  r.macro_recall, r.macro_f1, static_cast<unsigned long long>(r.total));
    out += buf;
    out += '\n';
    out += kReportFooter;
    out += '\n';
    return out;
}

namespace detail {
inline double round4(double v) { return std::round(v * 1e4) / 1e4; }
} // namespace detail

/// JSON schema:
///   {"classes": [{"name", "precision", "recall", "f1", "support", "p_acc"}, ...],
///    "accuracy", "macro": {"precision", "recall", "f1"}, "total"}
/// Rates are rounded to 4 decimals.
inline nlohmann::ordered_json report_json(const ClassificationReport& r, const std::vector<std::string>& names)
{
    detail::check_names(r, names);
    nlohmann::ordered_json j;
    j["classes"] = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < names.size(); ++c) {
        const auto& s = r.classes[c];
        nlohmann::ordered_json e;
        e["name"] = names[c];
        e["precision"] = detail::round4(s.precision);
        e["recall"] = detail::round4(s.recall);
        e["f1"] = detail::round4(s.f1);
        e["support"] = s.support;
        e["p_acc"] = detail::round4(s.p_acc);
        j["classes"].push_back(e);
    }
    j["accuracy"] = detail::round4(r.accuracy);
    j["macro"] = {{"precision", detail::round4(r.macro_precision)},
                  {"recall", detail::round4(r.macro_recall)},
                  {"f1", detail::round4(r.macro_f1)}};
    j["total"] = r.total;
    return j;
}

inline std::string render_json(const ClassificationReport& r, const std::vector<std::string>& names)
{
    return report_json(r, names).dump(2) + "\n";
}

/// Inverse of render_json (values come back at their rounded precision).
inline std::pair<ClassificationReport, std::vector<std::string>> parse_report_json(const std::string& text)
{
    ClassificationReport r;
    std::vector<std::string> names;
    try {
        const auto j = nlohmann::json::parse(text);
        for (const auto& e : j.at("classes")) {
            names.push_back(e.at("name").get<std::string>());
            ClassStats s;
            s.precision = e.at("precision").get<double>();
            s.recall = e.at("recall").get<double>();
            s.f1 = e.at("f1").get<double>();
            s.support = e.at("support").get<std::uint64_t>();
            s.p_acc = e.at("p_acc").get<double>();
            r.classes.push_back(s);
        }
        r.accuracy = j.at("accuracy").get<double>();
        r.macro_precision = j.at("macro").at("precision").get<double>();
        r.macro_recall = j.at("macro").at("recall").get<double>();
        r.macro_f1 = j.at("macro").at("f1").get<double>();
        r.total = j.at("total").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("invalid report JSON: ") + e.what());
    }
    return {r, names};
}

} // namespace xnmoe
