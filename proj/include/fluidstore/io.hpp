// File formats: wind trace CSV, model artifact JSON, small table helpers.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/errors.hpp"

namespace fluidstore::io {

using Warn = std::function<void(const std::string &)>;

namespace detail {

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n\"");
    if (first == std::string_view::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r\n\"");
    return std::string(s.substr(first, last - first + 1));
}

inline std::vector<std::string> split_row(const std::string &line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ','))
        cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',')
        cells.emplace_back();
    return cells;
}

inline std::optional<double> parse_double(const std::string &s) {
    if (s.empty())
        return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v))
            return std::nullopt;
        return v;
    } catch (const std::exception &) {
        return std::nullopt;
    }
}

/// Timestamp in seconds since 1970-01-01. Accepts `YYYY-MM-DD[ T]HH:MM[:SS]`
/// (optionally with a trailing Z) or a plain number taken as hours. Seconds
/// keep whole-second calendar stamps exact, so their gaps are exact too.
inline std::optional<double> parse_timestamp_seconds(const std::string &s) {
    if (auto v = parse_double(s))
        return *v * 3600.0;
    int y = 0, mo = 0, d = 0, h = 0, mi = 0;
    double sec = 0.0;
    char sep = 0;
    int used = 0;
    const int got = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d%n", &y, &mo, &d, &sep, &h, &mi, &used);
    if (got < 6 || (sep != ' ' && sep != 'T'))
        return std::nullopt;
    std::string rest = s.substr(static_cast<std::size_t>(used));
    if (!rest.empty() && rest.back() == 'Z')
        rest.pop_back();
    if (!rest.empty()) {
        if (rest.front() != ':')
            return std::nullopt;
        auto parsed = parse_double(rest.substr(1));
        if (!parsed)
            return std::nullopt;
        sec = *parsed;
    }
    const std::chrono::year_month_day ymd{std::chrono::year{y},
                                          std::chrono::month{static_cast<unsigned>(mo)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || sec < 0.0 || sec >= 61.0)
        return std::nullopt;
    const auto days = std::chrono::sys_days{ymd}.time_since_epoch().count();
    return static_cast<double>(days) * 86400.0 + h * 3600.0 + mi * 60.0 + sec;
}

inline double median(std::vector<double> v) {
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

} // namespace detail

/// Settings needed to turn a trace file into a per-unit series. Zero means
/// "not supplied".
struct TraceOptions {
    double capacity_mw = 0.0; ///< nameplate power for power_mw columns
    double delta_hours = 0.0; ///< sampling period; wins over timestamps
};

struct LoadedTrace {
    ctmc::WindTrace trace;
    double inferred_delta = 0.0; ///< from timestamps, 0 when unavailable
    std::size_t clipped = 0;     ///< samples clipped into [0, 1]
};

/// Read a trace with a header row and either `timestamp,power_mw` or a
/// `power_pu` column (a timestamp column is optional with power_pu).
inline LoadedTrace read_trace(std::istream &in, const std::string &name, const TraceOptions &opts,
                              const Warn &warn = {}) {
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string &what) {
        throw InputError(name + ":" + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!detail::trim(line).empty())
            break;
    }
    if (detail::trim(line).empty())
        fail("empty trace file (a header row is required)");
    const std::vector<std::string> header = detail::split_row(line);
    auto column = [&](const char *key) -> int {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == key)
                return static_cast<int>(i);
        return -1;
    };
    const int ts_col = column("timestamp");
    const int pu_col = column("power_pu");
    const int mw_col = column("power_mw");
    const bool per_unit = pu_col >= 0;
    const int value_col = per_unit ? pu_col : mw_col;
    if (value_col < 0)
        fail("header must name a power_pu column or timestamp,power_mw columns");
    if (!per_unit && ts_col < 0)
        fail("a power_mw column requires a timestamp column");

    std::vector<double> values, stamps;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty())
            continue;
        const std::vector<std::string> cells = detail::split_row(line);
        if (cells.size() != header.size())
            fail("expected " + std::to_string(header.size()) + " fields, found " +
                 std::to_string(cells.size()));
        const auto v = detail::parse_double(cells[static_cast<std::size_t>(value_col)]);
        if (!v)
            fail("invalid power value '" + cells[static_cast<std::size_t>(value_col)] + "'");
        values.push_back(*v);
        if (ts_col >= 0) {
            const auto t = detail::parse_timestamp_seconds(cells[static_cast<std::size_t>(ts_col)]);
            if (!t)
                fail("invalid timestamp '" + cells[static_cast<std::size_t>(ts_col)] + "'");
            if (!stamps.empty() && !(*t > stamps.back()))
                fail("timestamps must be strictly increasing");
            stamps.push_back(*t);
        }
    }
    if (values.size() < 2)
        throw InputError(name + ": a trace needs at least 2 samples");

    LoadedTrace out;
    if (stamps.size() >= 2) {
        std::vector<double> gaps;
        for (std::size_t i = 1; i < stamps.size(); ++i)
            gaps.push_back((stamps[i] - stamps[i - 1]) / 3600.0);
        out.inferred_delta = detail::median(std::move(gaps));
    }
    double delta = opts.delta_hours;
    if (delta > 0.0) {
        if (out.inferred_delta > 0.0 &&
            std::abs(out.inferred_delta - delta) > 1e-6 * std::max(delta, out.inferred_delta) && warn)
            warn(name + ": timestamps imply delta = " + std::to_string(out.inferred_delta) +
                 " h but the configuration sets " + std::to_string(delta) +
                 " h; using the configured value");
    } else if (out.inferred_delta > 0.0) {
        delta = out.inferred_delta;
    } else {
        throw ConfigError(name + ": sampling period unknown; set model.delta in the configuration");
    }

    double capacity = 1.0;
    if (!per_unit) {
        capacity = opts.capacity_mw;
        if (!(capacity > 0.0))
            throw ConfigError(name + ": power_mw data needs input.capacity_mw in the configuration");
    }
    for (double &v : values) {
        double pu = v / capacity;
        if (pu < 0.0 || pu > 1.0) {
            pu = std::clamp(pu, 0.0, 1.0);
            ++out.clipped;
        }
        v = pu;
    }
    if (out.clipped > 0 && warn)
        warn(name + ": " + std::to_string(out.clipped) + " samples outside [0, capacity] were clipped");

    out.trace.samples = std::move(values);
    out.trace.delta = delta;
    out.trace.capacity = per_unit ? 1.0 : capacity;
    out.trace.validate();
    return out;
}

inline LoadedTrace read_trace_file(const std::string &path, const TraceOptions &opts,
                                   const Warn &warn = {}) {
    std::ifstream in(path);
    if (!in)
        throw InputError("cannot open trace file '" + path + "'");
    return read_trace(in, path, opts, warn);
}

/// Write a per-unit trace as `power_pu` with an hour-offset timestamp column.
inline void write_trace(std::ostream &out, const ctmc::WindTrace &trace) {
    out << "timestamp,power_pu\n";
    char buf[64];
    for (std::size_t i = 0; i < trace.samples.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.10g,%.10g\n", static_cast<double>(i) * trace.delta,
                      trace.samples[i]);
        out << buf;
    }
}

// Model artifact ----------------------------------------------------------

inline constexpr const char *kModelFormat = "fluidstore-ctmc";

inline nlohmann::json model_to_json(const ctmc::CtmcModel &model, double delta_hours = 0.0) {
    nlohmann::json j;
    j["format"] = kModelFormat;
    j["version"] = 1;
    if (delta_hours > 0.0)
        j["delta_hours"] = delta_hours;
    j["state_values"] = model.state_values;
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < model.generator.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(model.generator.cols()));
        for (Eigen::Index k = 0; k < model.generator.cols(); ++k)
            row[static_cast<std::size_t>(k)] = model.generator(i, k);
        rows.push_back(row);
    }
    j["generator"] = rows;
    j["stationary"] = std::vector<double>(model.stationary.begin(), model.stationary.end());
    return j;
}

/// Rebuild a model; the stationary vector is recomputed from the generator.
inline ctmc::CtmcModel model_from_json(const nlohmann::json &j) {
    try {
        if (j.value("format", std::string()) != kModelFormat)
            throw InputError("not a model artifact (format field missing or wrong)");
        auto values = j.at("state_values").get<std::vector<double>>();
        const auto rows = j.at("generator").get<std::vector<std::vector<double>>>();
        const auto n = static_cast<Eigen::Index>(values.size());
        if (static_cast<Eigen::Index>(rows.size()) != n)
            throw InputError("generator row count does not match state_values");
        Eigen::MatrixXd q(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != n)
                throw InputError("generator is not square");
            for (Eigen::Index k = 0; k < n; ++k)
                q(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
        return ctmc::make_model(std::move(values), std::move(q));
    } catch (const nlohmann::json::exception &e) {
        throw InputError(std::string("malformed model artifact: ") + e.what());
    }
}

inline ctmc::CtmcModel read_model_file(const std::string &path) {
    std::ifstream in(path);
    if (!in)
        throw InputError("cannot open model file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw InputError(path + ": " + e.what());
    }
    try {
        return model_from_json(j);
    } catch (const InputError &e) {
        throw InputError(path + ": " + e.what());
    }
}

/// 64-bit FNV-1a, used for configuration fingerprints.
inline std::uint64_t fnv1a(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
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

} // namespace fluidstore::io
