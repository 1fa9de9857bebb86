#pragma once

#include <charconv>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facl/config.hpp"
#include "facl/data.hpp"
#include "facl/encoder.hpp"
#include "facl/error.hpp"
#include "facl/protocol.hpp"

namespace facl {

/// Shortest round-trip text, padded to six significant digits when shorter
/// (28 -> "28.0000"). Both forms parse back to the same double.
inline std::string format_report_number(double v) {
    std::string s = format_double(v);
    std::size_t digits = 0;
    bool leading = true;
    for (char ch : s) {
        if (ch == 'e' || ch == 'E') break;
        if (ch < '0' || ch > '9') continue;
        if (leading && ch == '0') continue;
        leading = false;
        ++digits;
    }
    if (digits >= 6) return s;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%#.6g", v);
    return buf;
}

enum class ReportFormat { Csv, Json };

inline std::string metrics_to_csv(const MetricsReport& m) {
    std::string out = "session,accuracy\n";
    for (std::size_t s = 0; s < m.accuracies.size(); ++s) {
        out += std::to_string(s) + "," + format_report_number(m.accuracies[s]) + "\n";
    }
    return out;
}

inline std::string metrics_to_json(const MetricsReport& m) {
    std::string out = "{\"accuracies\": [";
    for (std::size_t s = 0; s < m.accuracies.size(); ++s) out += (s ? ", " : "") + format_report_number(m.accuracies[s]);
    out += "], \"average_acc\": " + format_report_number(m.average_acc);
    out += ", \"pd\": " + format_report_number(m.pd);
    out += ", \"delta_fi\": " + (m.delta_fi ? format_report_number(*m.delta_fi) : std::string("null"));
    return out + "}\n";
}

inline std::string emit_report(const MetricsReport& m, ReportFormat fmt) {
    return fmt == ReportFormat::Csv ? metrics_to_csv(m) : metrics_to_json(m);
}

inline MetricsReport parse_metrics_json(const std::string& text) {
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        MetricsReport m;
        m.accuracies = j.at("accuracies").get<std::vector<double>>();
        m.average_acc = j.at("average_acc").get<double>();
        m.pd = j.at("pd").get<double>();
        if (!j.at("delta_fi").is_null()) m.delta_fi = j.at("delta_fi").get<double>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("metrics json: ") + e.what(), 0);
    }
}

// Rows are true classes, columns predictions, both in ascending class order.
inline std::string confusion_to_csv(const EvalResult& r) {
    std::string out = "true\\pred";
    for (int y : r.labels) out += "," + std::to_string(y);
    out += "\n";
    for (std::size_t i = 0; i < r.labels.size(); ++i) {
        out += std::to_string(r.labels[i]);
        for (std::size_t v : r.confusion[i]) out += "," + std::to_string(v);
        out += "\n";
    }
    return out;
}

inline std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
    std::string out = "variant,average_acc,pd,final_acc,delta_fi\n";
    for (const AblationRow& r : rows) {
        out += to_string(r.variant) + "," + format_report_number(r.metrics.average_acc) + "," +
               format_report_number(r.metrics.pd) + "," + format_report_number(r.metrics.accuracies.back()) + "," +
               (r.metrics.delta_fi ? format_report_number(*r.metrics.delta_fi) : std::string()) + "\n";
    }
    return out;
}

// One row per delta: mean and sample sd of the final-session accuracy, then
// the per-seed values.
inline std::string sweep_to_csv(const std::vector<SweepRow>& rows, const std::vector<std::uint64_t>& seeds) {
    std::string out = "delta,mean,sd";
    for (std::uint64_t s : seeds) out += ",seed_" + std::to_string(s);
    out += "\n";
    for (const SweepRow& r : rows) {
        out += format_report_number(r.delta) + "," + format_report_number(r.mean) + "," + format_report_number(r.sd);
        for (double a : r.final_acc) out += "," + format_report_number(a);
        out += "\n";
    }
    return out;
}

/// CSV of label,session,f0..f{D-1}, one line per store row in store order.
inline void export_embeddings(const ModelParams& params, const SampleStore& store, const DatasetSpec& spec,
                              std::ostream& out) {
    if (store.input_dim() != params.spec.input_dim) {
        throw ShapeError("export_embeddings: store width " + std::to_string(store.input_dim()) +
                         " differs from checkpoint input_dim " + std::to_string(params.spec.input_dim));
    }
    const Tensor f = forward_features(params, store.rows);
    out << "label,session";
    for (std::size_t k = 0; k < f.cols(); ++k) out << ",f" << k;
    out << "\n";
    for (std::size_t i = 0; i < f.rows(); ++i) {
        out << store.labels[i] << "," << spec.session_of(store.labels[i]);
        for (double v : f.row(i)) out << "," << format_double(v);
        out << "\n";
    }
}

}  // namespace facl
