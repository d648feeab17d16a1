// Run configuration for the batch front end: one JSON document with the
// sections input, model, market, storage, search, sweep, curve, simulate,
// validate. Unknown keys are rejected so typos do not silently fall back to
// defaults. Defaults are the reference values kappa = 1.35, kappa' = 0,
// c = 0.005, rho_c = rho_d = 0.95, eta = 0.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/empirical.hpp"
#include "fluidstore/errors.hpp"
#include "fluidstore/fluidq.hpp"
#include "fluidstore/io.hpp"
#include "fluidstore/optimizer.hpp"
#include "fluidstore/profit.hpp"

namespace fluidstore::config {

inline constexpr const char *kVersion = "0.1.0";

struct InputSection {
    std::string trace;        ///< wind trace CSV, resolved against the config directory
    std::string model;        ///< model artifact JSON; when set, estimation is skipped
    double capacity_mw = 0.0; ///< nameplate power for power_mw traces
};

struct ModelSection {
    int n_levels = 15;
    double window_hours = 1.0;
    double delta = 0.0; ///< sampling period [h]; 0 means infer from timestamps
    ctmc::DiscretizeOptions discretize;
};

struct CurveSection {
    std::vector<double> b_values{0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
    double critical_db = 0.05;
    double price_usd_per_mwh = 60.0; ///< for the physical-unit conversion of c_o
};

struct SweepSection {
    std::string axis = "kappa";
    std::vector<double> values{1.0, 1.25, 1.5, 1.75, 2.0};
};

struct SimulateSection {
    std::vector<double> q_grid;
    std::vector<double> b_grid;
    empirical::ExpostOptions options;
};

struct ValidateSection {
    std::vector<double> b_values{0.5, 2.0, 8.0};
    std::vector<double> q_values; ///< empty: mean output of the model
    double horizon_hours = 1e6;
    double sigma = 3.0; ///< Monte Carlo agreement band in standard errors
};

struct RunConfig {
    InputSection input;
    ModelSection model;
    profit::MarketParams market;
    fluidq::StorageParams storage;
    optimizer::SearchConfig search = optimizer::SearchConfig::defaults();
    SweepSection sweep;
    CurveSection curve;
    SimulateSection simulate;
    ValidateSection validate;
    std::string output_dir = "out";
    std::uint64_t seed = 1;
    int workers = 1;
    std::filesystem::path base_dir; ///< directory relative paths resolve against

    /// Effective configuration, every field explicit.
    nlohmann::json to_json() const;

    /// Fingerprint of the effective configuration.
    std::string hash() const { return io::hex64(io::fnv1a(to_json().dump())); }

    std::string resolve(const std::string &path) const {
        if (path.empty())
            return path;
        const std::filesystem::path p(path);
        return p.is_absolute() ? path : (base_dir / p).lexically_normal().string();
    }

    void check() const {
        if (model.n_levels < 2)
            throw ConfigError("model.n_levels must be at least 2");
        if (!(model.window_hours > 0.0))
            throw ConfigError("model.window_hours must be positive");
        if (model.delta < 0.0)
            throw ConfigError("model.delta must be positive");
        if (input.capacity_mw < 0.0)
            throw ConfigError("input.capacity_mw must be positive");
        market.validate();
        storage.validate();
        optimizer::check_policy_region(market, storage);
        search.validate();
        optimizer::parse_axis(sweep.axis);
        for (double b : curve.b_values)
            if (!(b >= 0.0))
                throw ConfigError("curve.b_values must be non-negative");
        if (!(curve.critical_db > 0.0))
            throw ConfigError("curve.critical_db must be positive");
        if (!(validate.horizon_hours >= 1e4))
            throw ConfigError("validate.horizon_hours must be at least 1e4");
        if (workers < 1)
            throw ConfigError("workers must be at least 1");
    }
};

namespace detail {

using nlohmann::json;

inline void allow_keys(const json &obj, const std::string &section,
                       std::initializer_list<const char *> keys) {
    if (!obj.is_object())
        throw ConfigError(section + " must be an object");
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto &item : obj.items())
        if (!allowed.count(item.key()))
            throw ConfigError("unknown key '" + (section.empty() ? "" : section + ".") + item.key() +
                              "'");
}

template <class T> void read(const json &obj, const char *key, T &into, const std::string &section) {
    if (!obj.contains(key))
        return;
    try {
        into = obj.at(key).get<T>();
    } catch (const json::exception &) {
        throw ConfigError("invalid value for " + section + "." + key);
    }
}

/// A grid is either an explicit list or a step on [0, 1].
inline std::vector<double> unit_grid(double step) {
    if (!(step > 0.0 && step <= 1.0))
        throw ConfigError("grid step must lie in (0, 1]");
    std::vector<double> out;
    const auto n = static_cast<int>(std::llround(1.0 / step));
    if (std::abs(n * step - 1.0) > 1e-9)
        throw ConfigError("grid step must divide 1");
    for (int k = 0; k <= n; ++k)
        out.push_back(k == n ? 1.0 : k * step);
    return out;
}

inline void read_q_grid(const json &obj, const char *key, std::vector<double> &into,
                        const std::string &section) {
    if (!obj.contains(key))
        return;
    const json &v = obj.at(key);
    if (v.is_number())
        into = unit_grid(v.get<double>());
    else
        read(obj, key, into, section);
}

inline ctmc::BinEdges parse_bins(const std::string &s) {
    if (s == "uniform")
        return ctmc::BinEdges::uniform;
    if (s == "quantile")
        return ctmc::BinEdges::quantile;
    throw ConfigError("model.bin_edges must be 'uniform' or 'quantile'");
}

inline ctmc::StateValue parse_state_value(const std::string &s) {
    if (s == "midpoint")
        return ctmc::StateValue::midpoint;
    if (s == "conditional_mean")
        return ctmc::StateValue::conditional_mean;
    throw ConfigError("model.state_value must be 'midpoint' or 'conditional_mean'");
}

inline empirical::LossConvention parse_convention(const std::string &s) {
    if (s == "split")
        return empirical::LossConvention::split;
    if (s == "pseudocode")
        return empirical::LossConvention::pseudocode;
    throw ConfigError("simulate.convention must be 'split' or 'pseudocode'");
}

inline empirical::SurplusPricing parse_surplus(const std::string &s) {
    if (s == "external")
        return empirical::SurplusPricing::external;
    if (s == "stored")
        return empirical::SurplusPricing::stored;
    throw ConfigError("simulate.surplus_pricing must be 'external' or 'stored'");
}

} // namespace detail

/// Parse a configuration document. `base_dir` anchors relative paths.
inline RunConfig from_json(const nlohmann::json &j, const std::filesystem::path &base_dir = {}) {
    using detail::allow_keys;
    using detail::read;
    RunConfig cfg;
    cfg.base_dir = base_dir;
    allow_keys(j, "",
               {"input", "model", "market", "storage", "search", "sweep", "curve", "simulate",
                "validate", "output_dir", "seed", "workers"});

    if (j.contains("input")) {
        const auto &s = j.at("input");
        allow_keys(s, "input", {"trace", "model", "capacity_mw"});
        read(s, "trace", cfg.input.trace, "input");
        read(s, "model", cfg.input.model, "input");
        read(s, "capacity_mw", cfg.input.capacity_mw, "input");
    }
    if (j.contains("model")) {
        const auto &s = j.at("model");
        allow_keys(s, "model", {"n_levels", "window_hours", "delta", "bin_edges", "state_value"});
        read(s, "n_levels", cfg.model.n_levels, "model");
        read(s, "window_hours", cfg.model.window_hours, "model");
        read(s, "delta", cfg.model.delta, "model");
        std::string text;
        if (s.contains("bin_edges")) {
            read(s, "bin_edges", text, "model");
            cfg.model.discretize.edges = detail::parse_bins(text);
        }
        if (s.contains("state_value")) {
            read(s, "state_value", text, "model");
            cfg.model.discretize.value = detail::parse_state_value(text);
        }
    }
    if (j.contains("market")) {
        const auto &s = j.at("market");
        allow_keys(s, "market", {"kappa", "kappa_prime", "c", "price"});
        read(s, "kappa", cfg.market.kappa, "market");
        read(s, "kappa_prime", cfg.market.kappa_prime, "market");
        read(s, "c", cfg.market.storage_cost, "market");
        read(s, "price", cfg.market.price, "market");
    }
    if (j.contains("storage")) {
        const auto &s = j.at("storage");
        allow_keys(s, "storage", {"rho_c", "rho_d", "eta", "r_inf"});
        read(s, "rho_c", cfg.storage.rho_c, "storage");
        read(s, "rho_d", cfg.storage.rho_d, "storage");
        read(s, "eta", cfg.storage.eta, "storage");
        read(s, "r_inf", cfg.search.r_inf, "storage");
    }
    if (j.contains("search")) {
        const auto &s = j.at("search");
        allow_keys(s, "search",
                   {"q_grid", "b_grid", "step_q", "step_b", "shrink", "tol_step", "max_iters", "b_max",
                    "include_levels", "profile_refine", "tol", "mantissa_bits", "r_inf_start", "r_inf_factor",
                    "r_inf_max"});
        detail::read_q_grid(s, "q_grid", cfg.search.q_grid, "search");
        read(s, "b_grid", cfg.search.b_grid, "search");
        read(s, "step_q", cfg.search.step_q, "search");
        read(s, "step_b", cfg.search.step_b, "search");
        read(s, "shrink", cfg.search.shrink, "search");
        read(s, "tol_step", cfg.search.tol_step, "search");
        read(s, "max_iters", cfg.search.max_iters, "search");
        read(s, "b_max", cfg.search.b_max, "search");
        read(s, "include_levels", cfg.search.include_levels, "search");
        read(s, "profile_refine", cfg.search.profile_refine, "search");
        read(s, "tol", cfg.search.solver.tol, "search");
        read(s, "mantissa_bits", cfg.search.solver.mantissa_bits, "search");
        read(s, "r_inf_start", cfg.search.solver.r_inf_start, "search");
        read(s, "r_inf_factor", cfg.search.solver.r_inf_factor, "search");
        read(s, "r_inf_max", cfg.search.solver.r_inf_max, "search");
    }
    if (j.contains("sweep")) {
        const auto &s = j.at("sweep");
        allow_keys(s, "sweep", {"axis", "values"});
        read(s, "axis", cfg.sweep.axis, "sweep");
        read(s, "values", cfg.sweep.values, "sweep");
    }
    if (j.contains("curve")) {
        const auto &s = j.at("curve");
        allow_keys(s, "curve", {"b_values", "critical_db", "price_usd_per_mwh"});
        read(s, "b_values", cfg.curve.b_values, "curve");
        read(s, "critical_db", cfg.curve.critical_db, "curve");
        read(s, "price_usd_per_mwh", cfg.curve.price_usd_per_mwh, "curve");
    }
    if (j.contains("simulate")) {
        const auto &s = j.at("simulate");
        allow_keys(s, "simulate", {"q_grid", "b_grid", "convention", "surplus_pricing", "initial_charge"});
        detail::read_q_grid(s, "q_grid", cfg.simulate.q_grid, "simulate");
        read(s, "b_grid", cfg.simulate.b_grid, "simulate");
        std::string text;
        if (s.contains("convention")) {
            read(s, "convention", text, "simulate");
            cfg.simulate.options.convention = detail::parse_convention(text);
        }
        if (s.contains("surplus_pricing")) {
            read(s, "surplus_pricing", text, "simulate");
            cfg.simulate.options.surplus = detail::parse_surplus(text);
        }
        read(s, "initial_charge", cfg.simulate.options.initial_charge, "simulate");
    }
    if (j.contains("validate")) {
        const auto &s = j.at("validate");
        allow_keys(s, "validate", {"b_values", "q_values", "horizon_hours", "sigma"});
        read(s, "b_values", cfg.validate.b_values, "validate");
        read(s, "q_values", cfg.validate.q_values, "validate");
        read(s, "horizon_hours", cfg.validate.horizon_hours, "validate");
        read(s, "sigma", cfg.validate.sigma, "validate");
    }
    read(j, "output_dir", cfg.output_dir, "");
    read(j, "seed", cfg.seed, "");
    read(j, "workers", cfg.workers, "");

    if (cfg.simulate.q_grid.empty())
        cfg.simulate.q_grid = cfg.search.q_grid;
    if (cfg.simulate.b_grid.empty())
        cfg.simulate.b_grid = cfg.search.b_grid;
    cfg.search.workers = cfg.workers;
    cfg.check();
    return cfg;
}

inline RunConfig load(const std::string &path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open configuration file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(path + ": " + e.what());
    }
    return from_json(j, std::filesystem::path(path).parent_path());
}

inline nlohmann::json RunConfig::to_json() const {
    using nlohmann::json;
    json j;
    j["input"] = {{"trace", input.trace}, {"model", input.model}, {"capacity_mw", input.capacity_mw}};
    j["model"] = {{"n_levels", model.n_levels},
                  {"window_hours", model.window_hours},
                  {"delta", model.delta},
                  {"bin_edges", model.discretize.edges == ctmc::BinEdges::uniform ? "uniform" : "quantile"},
                  {"state_value",
                   model.discretize.value == ctmc::StateValue::midpoint ? "midpoint" : "conditional_mean"}};
    j["market"] = {{"kappa", market.kappa},
                   {"kappa_prime", market.kappa_prime},
                   {"c", market.storage_cost},
                   {"price", market.price}};
    j["storage"] = {{"rho_c", storage.rho_c},
                    {"rho_d", storage.rho_d},
                    {"eta", storage.eta},
                    {"r_inf", search.r_inf}};
    j["search"] = {{"q_grid", search.q_grid},
                   {"b_grid", search.b_grid},
                   {"step_q", search.step_q},
                   {"step_b", search.step_b},
                   {"shrink", search.shrink},
                   {"tol_step", search.tol_step},
                   {"max_iters", search.max_iters},
                   {"b_max", search.b_max},
                   {"include_levels", search.include_levels},
                   {"profile_refine", search.profile_refine},
                   {"tol", search.solver.tol},
                   {"mantissa_bits", search.solver.mantissa_bits},
                   {"r_inf_start", search.solver.r_inf_start},
                   {"r_inf_factor", search.solver.r_inf_factor},
                   {"r_inf_max", search.solver.r_inf_max}};
    j["sweep"] = {{"axis", sweep.axis}, {"values", sweep.values}};
    j["curve"] = {{"b_values", curve.b_values},
                  {"critical_db", curve.critical_db},
                  {"price_usd_per_mwh", curve.price_usd_per_mwh}};
    j["simulate"] = {
        {"q_grid", simulate.q_grid},
        {"b_grid", simulate.b_grid},
        {"convention",
         simulate.options.convention == empirical::LossConvention::split ? "split" : "pseudocode"},
        {"surplus_pricing",
         simulate.options.surplus == empirical::SurplusPricing::external ? "external" : "stored"},
        {"initial_charge", simulate.options.initial_charge}};
    j["validate"] = {{"b_values", validate.b_values},
                     {"q_values", validate.q_values},
                     {"horizon_hours", validate.horizon_hours},
                     {"sigma", validate.sigma}};
    j["output_dir"] = output_dir;
    j["seed"] = seed;
    j["workers"] = workers;
    return j;
}

} // namespace fluidstore::config
