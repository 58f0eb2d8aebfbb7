#pragma once

// Persistence: flow checkpoints (versioned JSON with a checksum), dataset
// files (one JSON header line followed by a CSV body) and the CSV exports.
//
// Floats are written with 17 significant digits, which round-trips every
// double exactly, so a reloaded model reproduces log_prob bit for bit.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowtame/data.hpp"
#include "flowtame/errors.hpp"
#include "flowtame/flow.hpp"
#include "flowtame/metrics.hpp"
#include "flowtame/tame.hpp"
#include "flowtame/train.hpp"

namespace flowtame {

inline std::string format_double(double v) {
    if (!std::isfinite(v)) throw NonFiniteError("cannot serialise a non-finite value");
    if (v == 0.0) return std::signbit(v) ? "-0.0" : "0";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

// ------------------------------------------------------------ checkpoints

namespace detail {

inline void append_values(std::string& out, const Array& a) {
    // row-major
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            if (out.back() != '[') out += ", ";
            out += format_double(a(i, j));
        }
}

inline std::string net_json(const Mlp& net) {
    std::string s = "[";
    for (const Parameter* p : net.parameters()) append_values(s, p->value);
    return s + "]";
}

inline std::string row_json(const Array& row) {
    std::string s = "[";
    append_values(s, row);
    return s + "]";
}

// Everything but the checksum, in a fixed layout.
inline std::string checkpoint_body(const FlowModel& m) {
    std::string s = "{\n";
    s += "  \"version\": " + std::to_string(m.version) + ",\n";
    s += "  \"dim\": " + std::to_string(m.dim) + ",\n";
    s += "  \"n_layers\": " + std::to_string(m.n_layers()) + ",\n";
    s += "  \"hidden_width\": " + std::to_string(m.hidden_width) + ",\n";
    s += "  \"scale_clamp\": " + format_double(m.scale_clamp) + ",\n";
    s += "  \"prior\": {\"mu\": " + row_json(m.prior.mu.value) +
         ", \"log_sigma\": " + row_json(m.prior.log_sigma.value) + "},\n";
    s += "  \"layers\": [\n";
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        const auto& layer = m.layers[k];
        s += "    {\"mask\": " + row_json(layer.mask.transpose()) +
             ",\n     \"scale_net\": " + net_json(layer.scale_net) +
             ",\n     \"shift_net\": " + net_json(layer.shift_net) + "}";
        s += (k + 1 < m.layers.size()) ? ",\n" : "\n";
    }
    s += "  ]";
    return s;
}

inline std::vector<double> doubles(const nlohmann::json& j, const char* what) {
    if (!j.is_array()) throw CorruptFileError(std::string(what) + " is not an array");
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number()) throw CorruptFileError(std::string(what) + " holds a non-number");
        out.push_back(v.get<double>());
    }
    return out;
}

inline void fill_net(Mlp& net, const std::vector<double>& flat, const char* what) {
    std::size_t expected = 0;
    for (const Parameter* p : net.parameters()) expected += static_cast<std::size_t>(p->value.size());
    if (flat.size() != expected)
        throw CorruptFileError(std::string(what) + ": expected " + std::to_string(expected) +
                               " weights, found " + std::to_string(flat.size()));
    std::size_t pos = 0;
    for (Parameter* p : net.parameters())
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) p->value(i, j) = flat[pos++];
}

}  // namespace detail

inline std::string checkpoint_to_string(const FlowModel& m) {
    const std::string body = detail::checkpoint_body(m);
    return body + ",\n  \"checksum\": \"fnv1a64:" + hex64(fnv1a64(body)) + "\"\n}\n";
}

inline FlowModel checkpoint_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("version") || !j["version"].is_number_integer())
        throw CorruptFileError("checkpoint has no integer version tag");
    if (j["version"].get<int>() != kCheckpointVersion)
        throw SchemaVersionError("unsupported checkpoint version " + j["version"].dump());

    FlowModel m;
    try {
        const int dim = j.at("dim").get<int>();
        const int n_layers = j.at("n_layers").get<int>();
        const int hidden = j.at("hidden_width").get<int>();
        const double clamp = j.at("scale_clamp").get<double>();
        Rng dummy(0);
        m = build_model(dim, n_layers, hidden, dummy, clamp);
        const auto mu = detail::doubles(j.at("prior").at("mu"), "prior.mu");
        const auto ls = detail::doubles(j.at("prior").at("log_sigma"), "prior.log_sigma");
        if (mu.size() != static_cast<std::size_t>(dim) || ls.size() != static_cast<std::size_t>(dim))
            throw CorruptFileError("prior width does not match dim");
        for (int i = 0; i < dim; ++i) {
            m.prior.mu.value(0, i) = mu[static_cast<std::size_t>(i)];
            m.prior.log_sigma.value(0, i) = ls[static_cast<std::size_t>(i)];
        }
        const auto& layers = j.at("layers");
        if (!layers.is_array() || layers.size() != static_cast<std::size_t>(n_layers))
            throw CorruptFileError("layer count does not match n_layers");
        for (int k = 0; k < n_layers; ++k) {
            const auto& lj = layers[static_cast<std::size_t>(k)];
            const auto mask = detail::doubles(lj.at("mask"), "mask");
            if (mask.size() != static_cast<std::size_t>(dim)) throw CorruptFileError("mask width does not match dim");
            for (int i = 0; i < dim; ++i) m.layers[static_cast<std::size_t>(k)].mask(i) = mask[static_cast<std::size_t>(i)];
            detail::fill_net(m.layers[static_cast<std::size_t>(k)].scale_net, detail::doubles(lj.at("scale_net"), "scale_net"), "scale_net");
            detail::fill_net(m.layers[static_cast<std::size_t>(k)].shift_net, detail::doubles(lj.at("shift_net"), "shift_net"), "shift_net");
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("checkpoint is missing fields: ") + e.what());
    } catch (const ConfigError& e) {
        throw CorruptFileError(std::string("checkpoint header is invalid: ") + e.what());
    }

    if (!j.contains("checksum") || !j["checksum"].is_string())
        throw CorruptFileError("checkpoint has no checksum");
    const std::string expected = "fnv1a64:" + hex64(fnv1a64(detail::checkpoint_body(m)));
    if (j["checksum"].get<std::string>() != expected)
        throw CorruptFileError("checksum mismatch (file altered or truncated)");
    return m;
}

inline void save_checkpoint(const FlowModel& m, const std::filesystem::path& path) {
    write_text(path, checkpoint_to_string(m));
}

inline FlowModel load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_string(read_text(path));
}

// ------------------------------------------------------------ CSV

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != columns_) throw ShapeError("CSV row has the wrong number of fields");
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) text_ += ',';
            text_ += csv_field(fields[i]);
        }
        text_ += '\n';
    }

    [[nodiscard]] const std::string& str() const { return text_; }
    void save(const std::filesystem::path& path) const { write_text(path, text_); }

private:
    std::size_t columns_;
    std::string text_;
};

// Minimal reader for the files written above (quoted fields supported).
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline CsvWriter samples_csv(const Batch& points, const std::vector<int>& labels) {
    std::vector<std::string> header;
    for (Eigen::Index j = 0; j < points.cols(); ++j) header.push_back("x" + std::to_string(j));
    header.emplace_back("label");
    CsvWriter w(header);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        std::vector<std::string> f;
        for (Eigen::Index j = 0; j < points.cols(); ++j) f.push_back(format_double(points(i, j)));
        f.push_back(std::to_string(labels[static_cast<std::size_t>(i)]));
        w.row(f);
    }
    return w;
}

inline CsvWriter histogram_csv(const std::vector<HistogramBin>& bins) {
    CsvWriter w({"bin_left", "bin_right", "density"});
    for (const auto& b : bins) w.row({format_double(b.left), format_double(b.right), format_double(b.density)});
    return w;
}

inline CsvWriter trace_csv(const std::vector<TraceRow>& trace) {
    CsvWriter w({"iteration", "loss_forget", "loss_remember", "max_abs_dist", "mu_R", "sigma_R"});
    for (const auto& r : trace)
        w.row({std::to_string(r.iteration), format_double(r.loss_forget), format_double(r.loss_remember),
               format_double(r.max_abs_dist), format_double(r.mu_R), format_double(r.sigma_R)});
    return w;
}

inline CsvWriter quantile_report_csv(const QuantileReport& report) {
    CsvWriter w({"set_name", "q_base", "q_tamed", "quantile_drop"});
    for (const auto& e : report.entries)
        w.row({e.set_name, format_double(e.q_base), format_double(e.q_tamed), format_double(e.quantile_drop)});
    return w;
}

inline CsvWriter curve_csv(const std::vector<CurvePoint>& curve) {
    CsvWriter w({"iteration", "nll"});
    for (const auto& p : curve) w.row({std::to_string(p.iteration), format_double(p.nll)});
    return w;
}

// ------------------------------------------------------------ dataset files

inline constexpr int kDatasetVersion = 1;

inline std::string dataset_to_string(const LabeledDataset& ds) {
    nlohmann::json means = nlohmann::json::array();
    for (Eigen::Index k = 0; k < ds.component_means.rows(); ++k) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < ds.component_means.cols(); ++j) row.push_back(ds.component_means(k, j));
        means.push_back(row);
    }
    std::vector<double> sigmas(ds.component_sigmas.data(), ds.component_sigmas.data() + ds.component_sigmas.size());
    const nlohmann::json header = {{"format", "flowtame-dataset"},
                                   {"version", kDatasetVersion},
                                   {"dim", ds.dim()},
                                   {"n", ds.size()},
                                   {"n_components", ds.n_components()},
                                   {"seed", ds.seed},
                                   {"preset", ds.preset},
                                   {"component_means", means},
                                   {"component_sigmas", sigmas},
                                   {"counts", ds.counts},
                                   {"remember_is_training", ds.remember_is_training}};
    return header.dump() + "\n" + samples_csv(ds.points, ds.labels).str();
}

// strtod rather than stod: stod rejects subnormals.
inline double parse_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw CorruptFileError("malformed number '" + s + "'");
    return v;
}

inline LabeledDataset dataset_from_string(const std::string& text) {
    const auto nl = text.find('\n');
    if (nl == std::string::npos) throw CorruptFileError("dataset file has no header line");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(text.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("dataset header is not JSON: ") + e.what());
    }
    if (h.value("format", "") != "flowtame-dataset") throw CorruptFileError("not a flowtame dataset file");
    if (h.value("version", -1) != kDatasetVersion)
        throw SchemaVersionError("unsupported dataset version " + h["version"].dump());

    LabeledDataset ds;
    try {
        const int dim = h.at("dim").get<int>();
        const auto n = h.at("n").get<Eigen::Index>();
        ds.seed = h.at("seed").get<std::uint64_t>();
        ds.preset = h.value("preset", "");
        ds.remember_is_training = h.value("remember_is_training", true);
        ds.counts = h.at("counts").get<std::vector<int>>();
        const auto& means = h.at("component_means");
        ds.component_means.resize(static_cast<Eigen::Index>(means.size()), dim);
        for (std::size_t k = 0; k < means.size(); ++k)
            for (int j = 0; j < dim; ++j) ds.component_means(static_cast<Eigen::Index>(k), j) = means[k].at(static_cast<std::size_t>(j)).get<double>();
        const auto sig = h.at("component_sigmas").get<std::vector<double>>();
        ds.component_sigmas = Eigen::Map<const Eigen::VectorXd>(sig.data(), static_cast<Eigen::Index>(sig.size()));

        const auto rows = parse_csv(text.substr(nl + 1));
        if (rows.empty() || rows.front().size() != static_cast<std::size_t>(dim + 1))
            throw CorruptFileError("dataset CSV header does not match dim");
        if (static_cast<Eigen::Index>(rows.size()) - 1 != n)
            throw CorruptFileError("dataset row count does not match header");
        ds.points.resize(n, dim);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& r = rows[static_cast<std::size_t>(i + 1)];
            if (r.size() != static_cast<std::size_t>(dim + 1)) throw CorruptFileError("ragged dataset row");
            for (int j = 0; j < dim; ++j) ds.points(i, j) = parse_double(r[static_cast<std::size_t>(j)]);
            ds.labels.push_back(std::stoi(r[static_cast<std::size_t>(dim)]));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("dataset header is missing fields: ") + e.what());
    } catch (const std::logic_error& e) {
        throw CorruptFileError(std::string("dataset body has a malformed number: ") + e.what());
    }
    for (int l : ds.labels)
        if (l < 0 || l >= ds.n_components()) throw CorruptFileError("label out of range");
    return ds;
}

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
    write_text(path, dataset_to_string(ds));
}

inline LabeledDataset load_dataset(const std::filesystem::path& path) {
    return dataset_from_string(read_text(path));
}

}  // namespace flowtame
