// CSV and JSON input/output for models, estimates, datasets and reports.
#pragma once

#include "mixest/backtest.hpp"
#include "mixest/estimator.hpp"
#include "mixest/simulation.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace mixest::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Input that fails validation (bad file, malformed content, missing key).
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw std::runtime_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            out.push_back(trim(cell));
            cell.clear();
        } else {
            cell += c;
        }
    }
    out.push_back(trim(cell));
    return out;
}

/// Comma-delimited with a header row; blank lines are skipped.
inline CsvTable parse_csv(const std::string& text, const std::string& name = "csv") {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (!have_header) {
            t.header = std::move(cells);
            have_header = true;
            continue;
        }
        if (cells.size() != t.header.size())
            throw InputError(name + ": row has " + std::to_string(cells.size()) + " fields, header has " +
                             std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
    }
    if (!have_header) throw InputError(name + ": missing header row");
    return t;
}

inline CsvTable read_csv(const fs::path& path) { return parse_csv(read_file(path), path.string()); }

/// Parses a numeric cell; empty, "NA" or "NaN" cells give NaN.
inline double parse_number(const std::string& cell, const std::string& where) {
    if (cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == "null")
        return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        throw InputError(where + ": not a number: '" + cell + "'");
    return v;
}

inline std::string to_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    const auto join = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += cells[i];
        }
        out += '\n';
    };
    join(header);
    for (const auto& r : rows) join(r);
    return out;
}

/// Date-indexed numeric series from a CSV whose first column is the date.
struct DatedSeries {
    std::vector<std::string> columns;
    std::map<std::string, std::vector<double>> by_date;
};

inline DatedSeries read_dated_series(const fs::path& path) {
    const CsvTable t = read_csv(path);
    if (t.header.size() < 2) throw InputError(path.string() + ": need a date column and at least one value column");
    DatedSeries s;
    s.columns.assign(t.header.begin() + 1, t.header.end());
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = path.string() + " line " + std::to_string(r + 2);
        std::vector<double> values;
        for (std::size_t c = 1; c < row.size(); ++c) values.push_back(parse_number(row[c], where));
        if (!s.by_date.emplace(row[0], std::move(values)).second) throw InputError(where + ": duplicate date " + row[0]);
    }
    return s;
}

struct DatasetFiles {
    fs::path returns;
    fs::path market_caps;
    fs::path vol_index;
    fs::path risk_free;
};

struct LoadedDataset {
    MarketDataset data;
    int dropped_rows = 0;  ///< dates dropped for a missing value in any file
};

/**
 * @brief Joins the four files on their ISO dates.
 *
 * The returns file holds total weekly returns; excess returns subtract the
 * weekly share of the annualized risk-free rate. Dates missing from any
 * file, or with any missing value, are dropped and counted.
 */
inline LoadedDataset load_dataset(const DatasetFiles& files) {
    for (const auto& p : {files.returns, files.market_caps, files.vol_index, files.risk_free})
        if (!fs::exists(p)) throw InputError("missing input file: " + p.string());
    const auto ret = read_dated_series(files.returns);
    const auto caps = read_dated_series(files.market_caps);
    const auto vol = read_dated_series(files.vol_index);
    const auto rf = read_dated_series(files.risk_free);
    if (caps.columns != ret.columns)
        throw InputError(files.market_caps.string() + ": asset columns differ from the returns file");
    if (vol.columns.size() != 1) throw InputError(files.vol_index.string() + ": expected one value column");
    if (rf.columns.size() != 1) throw InputError(files.risk_free.string() + ": expected one value column");

    LoadedDataset out;
    auto& d = out.data;
    d.asset_names = ret.columns;
    std::vector<std::array<const std::vector<double>*, 4>> kept;
    for (const auto& [date, r] : ret.by_date) {
        const auto c = caps.by_date.find(date);
        const auto v = vol.by_date.find(date);
        const auto f = rf.by_date.find(date);
        bool ok = c != caps.by_date.end() && v != vol.by_date.end() && f != rf.by_date.end();
        if (ok) {
            for (const auto* vec : {&r, &c->second, &v->second, &f->second})
                for (double x : *vec) ok = ok && std::isfinite(x);
        }
        if (!ok) {
            ++out.dropped_rows;
            continue;
        }
        d.dates.push_back(date);
        kept.push_back({&r, &c->second, &v->second, &f->second});
    }
    const auto t = static_cast<Eigen::Index>(kept.size());
    const auto n = static_cast<Eigen::Index>(d.asset_names.size());
    d.excess_returns.resize(t, n);
    d.market_caps.resize(t, n);
    d.vol_index.resize(t);
    d.r_f.resize(t);
    for (Eigen::Index i = 0; i < t; ++i) {
        const auto& k = kept[static_cast<std::size_t>(i)];
        d.r_f[i] = (*k[3])[0];
        d.vol_index[i] = (*k[2])[0];
        for (Eigen::Index j = 0; j < n; ++j) {
            d.excess_returns(i, j) = (*k[0])[static_cast<std::size_t>(j)] - d.r_f[i] / d.weeks_per_year;
            d.market_caps(i, j) = (*k[1])[static_cast<std::size_t>(j)];
        }
    }
    d.validate();
    return out;
}

/// Numeric matrix from a CSV with a header; a leading non-numeric column is skipped.
inline Matrix read_matrix_csv(const fs::path& path) {
    const CsvTable t = read_csv(path);
    if (t.rows.empty()) throw InputError(path.string() + ": no data rows");
    std::size_t first = 0;
    {
        double v = 0.0;
        const auto& c = t.rows[0][0];
        if (std::from_chars(c.data(), c.data() + c.size(), v).ec != std::errc()) first = 1;
    }
    Matrix m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(t.header.size() - first));
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        for (std::size_t c = first; c < t.header.size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - first)) =
                parse_number(t.rows[r][c], path.string() + " line " + std::to_string(r + 2));
    if (!all_finite(m)) throw InputError(path.string() + ": missing or non-finite values");
    return m;
}

// ---------------------------------------------------------------------------
// JSON conversions
// ---------------------------------------------------------------------------

inline json to_json(const Vector& v) {
    json a = json::array();
    for (double x : v) a.push_back(x);
    return a;
}

inline json to_json(const Matrix& m) {
    json a = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(to_json(Vector(m.row(r).transpose())));
    return a;
}

inline const json& at(const json& j, const std::string& key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw InputError(where + ": missing key '" + key + "'");
    return j.at(key);
}

inline double number_from_json(const json& j, const std::string& where) {
    if (!j.is_number()) throw InputError(where + ": expected a number");
    return j.get<double>();
}

inline Vector vector_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) throw InputError(where + ": expected an array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number_from_json(j[i], where);
    return v;
}

inline Matrix matrix_from_json(const json& j, const std::string& where) {
    if (!j.is_array() || j.empty()) {
        if (j.is_array()) return Matrix(0, 0);
        throw InputError(where + ": expected an array of rows");
    }
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j[0].is_array() ? j[0].size() : 0);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Vector row = vector_from_json(j[static_cast<std::size_t>(r)], where);
        if (row.size() != cols) throw InputError(where + ": ragged matrix");
        m.row(r) = row.transpose();
    }
    return m;
}

/// {"components": [{"mu": [...], "sigma": [[...]]}, ...]}
inline MixtureModel model_from_json(const json& j) {
    const auto& comps = at(j, "components", "model");
    if (!comps.is_array() || comps.empty()) throw InputError("model: 'components' must be a non-empty array");
    std::vector<GaussianComponent> out;
    for (std::size_t k = 0; k < comps.size(); ++k) {
        const std::string where = "model.components[" + std::to_string(k) + "]";
        out.emplace_back(vector_from_json(at(comps[k], "mu", where), where + ".mu"),
                         matrix_from_json(at(comps[k], "sigma", where), where + ".sigma"));
    }
    return MixtureModel(std::move(out));
}

inline json to_json(const MixtureModel& model) {
    json comps = json::array();
    for (std::size_t k = 0; k < model.size(); ++k)
        comps.push_back({{"mu", to_json(model[k].mu())}, {"sigma", to_json(model[k].sigma())}});
    return {{"components", comps}};
}

inline json to_json(const EstimationResult& r) {
    json active = json::array();
    for (int a : r.active_set) active.push_back(a);
    json j{{"mode", std::string(to_string(r.mode))},
           {"lambda", to_json(r.lambda)},
           {"lambda_minus", to_json(r.lambda_minus)},
           {"objective", r.objective},
           {"converged", r.converged},
           {"active_set", active},
           {"iterations", r.iterations},
           {"ridge_applied", r.ridge_applied}};
    if (r.multipliers.size() > 0) j["multipliers"] = to_json(r.multipliers);
    return j;
}

/// Serializes with a fixed layout so identical inputs give identical bytes.
inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Report tables
// ---------------------------------------------------------------------------

inline std::string experiment_csv(const ExperimentTable& table) {
    std::vector<std::string> header{"grid_value", "eta_B_tp", "eta_C_tp", "eta_F_tp", "eta_B_full", "eta_C_full",
                                    "eta_F_full", "se_B_tp", "se_C_tp", "se_F_tp", "se_B_full", "se_C_full",
                                    "se_F_full", "failures", "not_converged"};
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : table.rows) {
        std::vector<std::string> cells{format_double(r.value)};
        for (double v : r.eta_turning) cells.push_back(format_double(v));
        for (double v : r.eta_full) cells.push_back(format_double(v));
        for (double v : r.se_turning) cells.push_back(format_double(v));
        for (double v : r.se_full) cells.push_back(format_double(v));
        cells.push_back(std::to_string(r.failures));
        cells.push_back(std::to_string(r.not_converged));
        rows.push_back(std::move(cells));
    }
    return to_csv(header, rows);
}

/// Per-date weights of one report, for plotting.
inline json trajectory_json(const ExperimentReport& rep, double grid_value) {
    json j{{"grid_value", grid_value}, {"days", rep.days}, {"turning_rows", rep.turning_rows},
           {"truth", to_json(rep.truth)},   {"shares", to_json(rep.shares)},
           {"returns_seed", rep.returns_seed}, {"noise_seed", rep.noise_seed}};
    for (std::size_t e = 0; e < 3; ++e) j[std::string(to_string(kAllModes[e]))] = to_json(rep.estimates[e]);
    return j;
}

}  // namespace mixest::io
