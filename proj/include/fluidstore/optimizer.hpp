// Sizing and contracting search over (q, b), plus sensitivity sweeps.
//
// The objective is not convex in general, so the search is a coarse grid
// followed by compass (pattern) search from the best grid point. Results are
// best-found, not certified global optima.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/errors.hpp"
#include "fluidstore/fluidq.hpp"
#include "fluidstore/parallel.hpp"
#include "fluidstore/profit.hpp"

namespace fluidstore::optimizer {

struct SearchConfig {
    std::vector<double> q_grid;
    std::vector<double> b_grid;
    double step_q = 0.0; ///< initial q step; 0 means one q-grid cell
    double step_b = 0.0; ///< initial b step; 0 means one b-grid cell at the seed
    double shrink = 0.5;
    double tol_step = 1e-3;
    int max_iters = 500;
    double b_max = 0.0;         ///< upper bound on b; 0 means the largest grid b
    bool include_levels = true; ///< add the state levels to the q grid
    bool profile_refine = true; ///< finish with a search over b that re-optimizes q
    int workers = 1;
    double r_inf = 0.0; ///< initial drift floor handed to the solver
    fluidq::SolveOptions solver;

    /// q in {0, 0.05, ..., 1}, b in {0, 0.25, 0.5, 1, 2, 4, 8, 16}.
    static SearchConfig defaults() {
        SearchConfig cfg;
        for (int k = 0; k <= 20; ++k)
            cfg.q_grid.push_back(k * 0.05);
        cfg.b_grid = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
        return cfg;
    }

    void validate() const {
        if (q_grid.empty() || b_grid.empty())
            throw ConfigError("search grids must be non-empty");
        for (double q : q_grid)
            if (!(q >= 0.0 && q <= 1.0))
                throw ConfigError("q grid values must lie in [0, 1]");
        for (double b : b_grid)
            if (!(b >= 0.0) || !std::isfinite(b))
                throw ConfigError("b grid values must be non-negative");
        if (!(tol_step > 0.0))
            throw ConfigError("tol_step must be positive");
        if (!(shrink > 0.0 && shrink < 1.0))
            throw ConfigError("shrink must lie in (0, 1)");
        if (max_iters < 0)
            throw ConfigError("max_iters must be non-negative");
        if (step_q < 0.0 || step_b < 0.0 || b_max < 0.0)
            throw ConfigError("steps and b_max must be non-negative");
    }

    double upper_b() const {
        return b_max > 0.0 ? b_max : *std::max_element(b_grid.begin(), b_grid.end());
    }
};

/// One objective evaluation in the search log.
struct EvaluationRecord {
    double q = 0.0;
    double b = 0.0;
    double net = -std::numeric_limits<double>::infinity();
    bool ok = false;
    std::string phase; ///< "grid", "descent" or "profile"
    std::string stage; ///< solver stage or "closed-form"
    double r_inf = 0.0;
    int attempts = 0;
    std::string error;

    bool used_fallback() const {
        return ok && (attempts > 1 || (stage != "double" && stage != "closed-form" &&
                                       stage != "saturated"));
    }
};

struct SizingResult {
    double q_star = 0.0;
    double b_star = 0.0;
    profit::ProfitBreakdown profit;
    Eigen::VectorXd psi;
    std::vector<EvaluationRecord> trace;
    double grid_best = -std::numeric_limits<double>::infinity();
    bool boundary_hit = false; ///< b_star sits on the upper b bound
    int fallback_count = 0;
    int failures = 0;
};

namespace detail {

struct Probe {
    EvaluationRecord record;
    profit::SizingEvaluation eval;
};

inline Probe probe(const ctmc::CtmcModel &model, const profit::MarketParams &market,
                   const fluidq::StorageParams &storage, double q, double b,
                   const SearchConfig &cfg, const char *phase) {
    Probe p;
    p.record.q = q;
    p.record.b = b;
    p.record.phase = phase;
    fluidq::StorageParams at = storage;
    at.b = b;
    try {
        p.eval = profit::evaluate_sizing(model, q, market, at, cfg.solver, cfg.r_inf);
        p.record.ok = true;
        p.record.net = p.eval.profit.net;
        p.record.stage = p.eval.path.stage;
        p.record.r_inf = p.eval.path.r_inf;
        p.record.attempts = p.eval.path.attempts;
    } catch (const SolverError &e) {
        p.record.error = e.what();
    }
    return p;
}

inline std::vector<double> sorted_unique(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

inline double grid_cell(const std::vector<double> &grid, double at, double fallback) {
    if (grid.size() < 2)
        return fallback;
    const auto it = std::lower_bound(grid.begin(), grid.end(), at);
    if (it != grid.end() && std::next(it) != grid.end())
        return *std::next(it) - *it;
    return grid.back() - *std::prev(grid.end(), 2);
}

inline profit::QSearch q_search(const SearchConfig &cfg) {
    const std::vector<double> qs = sorted_unique(cfg.q_grid);
    profit::QSearch search;
    search.grid_step = cfg.step_q > 0.0 ? cfg.step_q : grid_cell(qs, qs.front(), 0.05);
    search.include_levels = cfg.include_levels;
    search.shrink = cfg.shrink;
    search.tol_step = cfg.tol_step;
    search.max_iters = cfg.max_iters;
    search.r_inf = cfg.r_inf;
    search.solver = cfg.solver;
    return search;
}

} // namespace detail

/// Grid search over (q, b), compass descent from the best point, then a
/// search over b with q re-optimized at each probe. Failed probes are logged
/// and treated as -inf.
inline SizingResult optimize(const ctmc::CtmcModel &model, const profit::MarketParams &market,
                             const fluidq::StorageParams &storage, const SearchConfig &cfg) {
    market.validate();
    storage.validate();
    cfg.validate();

    std::vector<double> qs = cfg.q_grid;
    if (cfg.include_levels)
        qs.insert(qs.end(), model.state_values.begin(), model.state_values.end());
    qs = detail::sorted_unique(std::move(qs));
    const std::vector<double> bs = detail::sorted_unique(cfg.b_grid);
    const double b_max = cfg.upper_b();

    std::vector<std::pair<double, double>> points;
    for (double b : bs)
        for (double q : qs)
            points.emplace_back(q, b);

    const auto grid = parallel::map_indexed<detail::Probe>(points.size(), cfg.workers, [&](std::size_t i) {
        return detail::probe(model, market, storage, points[i].first, points[i].second, cfg, "grid");
    });

    SizingResult result;
    std::map<std::pair<double, double>, detail::Probe> seen;
    const detail::Probe *best = nullptr;
    for (const detail::Probe &p : grid) {
        result.trace.push_back(p.record);
        seen.emplace(std::make_pair(p.record.q, p.record.b), p);
        if (p.record.ok && (!best || p.record.net > best->record.net))
            best = &p;
    }
    if (!best)
        throw SolverError("every grid point failed", std::numeric_limits<double>::infinity());
    result.grid_best = best->record.net;

    double q = best->record.q;
    double b = best->record.b;
    detail::Probe current = *best;
    double step_q = cfg.step_q > 0.0 ? cfg.step_q : detail::grid_cell(detail::sorted_unique(cfg.q_grid), q, 0.05);
    double step_b = cfg.step_b > 0.0 ? cfg.step_b : detail::grid_cell(bs, b, 0.25);

    auto evaluate = [&](double pq, double pb) -> const detail::Probe & {
        const auto key = std::make_pair(pq, pb);
        auto it = seen.find(key);
        if (it == seen.end()) {
            detail::Probe p = detail::probe(model, market, storage, pq, pb, cfg, "descent");
            result.trace.push_back(p.record);
            it = seen.emplace(key, std::move(p)).first;
        }
        return it->second;
    };

    for (int it = 0; it < cfg.max_iters && (step_q >= cfg.tol_step || step_b >= cfg.tol_step); ++it) {
        const std::pair<double, double> moves[] = {
            {std::min(1.0, q + step_q), b},
            {std::max(0.0, q - step_q), b},
            {q, std::min(b_max, b + step_b)},
            {q, std::max(0.0, b - step_b)},
        };
        const detail::Probe *winner = nullptr;
        for (const auto &[pq, pb] : moves) {
            if (pq == q && pb == b)
                continue;
            const detail::Probe &p = evaluate(pq, pb);
            if (p.record.ok && p.record.net > (winner ? winner->record.net : current.record.net))
                winner = &p;
        }
        if (winner) {
            current = *winner;
            q = current.record.q;
            b = current.record.b;
        } else {
            step_q *= cfg.shrink;
            step_b *= cfg.shrink;
        }
    }

    if (cfg.profile_refine) {
        // The compass moves one coordinate at a time and can stall at a kink
        // (typically b = 0 with q on a state level) where a gain needs q and
        // b to move together. Re-optimizing q at every probed b removes
        // that coupling.
        const profit::QSearch search = detail::q_search(cfg);
        std::map<double, detail::Probe> profiles;
        auto profile = [&](double pb) -> const detail::Probe & {
            auto it = profiles.find(pb);
            if (it == profiles.end()) {
                detail::Probe p;
                p.record.b = pb;
                p.record.phase = "profile";
                fluidq::StorageParams at = storage;
                at.b = pb;
                try {
                    profit::QOptimum opt = profit::maximize_over_q(model, market, at, search);
                    p.record.q = opt.q;
                    p.record.ok = true;
                    p.record.net = opt.at.profit.net;
                    p.record.stage = opt.at.path.stage;
                    p.record.r_inf = opt.at.path.r_inf;
                    p.record.attempts = opt.at.path.attempts;
                    p.eval = std::move(opt.at);
                } catch (const SolverError &e) {
                    p.record.error = e.what();
                }
                result.trace.push_back(p.record);
                it = profiles.emplace(pb, std::move(p)).first;
            }
            return it->second;
        };
        const detail::Probe &start = profile(b);
        if (start.record.ok && start.record.net > current.record.net) {
            current = start;
            q = current.record.q;
        }
        double step = cfg.step_b > 0.0 ? cfg.step_b : detail::grid_cell(bs, b, 0.25);
        for (int it = 0; it < cfg.max_iters && step >= cfg.tol_step; ++it) {
            const detail::Probe *winner = nullptr;
            for (double pb : {std::min(b_max, b + step), std::max(0.0, b - step)}) {
                if (pb == b)
                    continue;
                const detail::Probe &p = profile(pb);
                if (p.record.ok && p.record.net > (winner ? winner->record.net : current.record.net))
                    winner = &p;
            }
            if (winner) {
                current = *winner;
                q = current.record.q;
                b = current.record.b;
            } else {
                step *= cfg.shrink;
            }
        }
    }

    result.q_star = q;
    result.b_star = b;
    result.profit = current.eval.profit;
    result.psi = current.eval.psi;
    result.boundary_hit = b >= b_max * (1.0 - 1e-12) && b_max > 0.0;
    for (const EvaluationRecord &r : result.trace) {
        result.fallback_count += r.used_fallback() ? 1 : 0;
        result.failures += r.ok ? 0 : 1;
    }
    return result;
}

/// Optimize q alone at a fixed storage size.
inline profit::QOptimum fix_b_optimize_q(const ctmc::CtmcModel &model,
                                         const profit::MarketParams &market,
                                         const fluidq::StorageParams &storage, double b,
                                         const SearchConfig &cfg) {
    market.validate();
    cfg.validate();
    if (!(b >= 0.0))
        throw ConfigError("b must be non-negative");
    fluidq::StorageParams at = storage;
    at.b = b;
    at.validate();
    const profit::QSearch search = detail::q_search(cfg);
    return profit::maximize_over_q(model, market, at, search);
}

enum class SweepAxis { kappa, kappa_prime, rho, eta, c };

inline SweepAxis parse_axis(const std::string &name) {
    if (name == "kappa")
        return SweepAxis::kappa;
    if (name == "kappa_prime")
        return SweepAxis::kappa_prime;
    if (name == "rho")
        return SweepAxis::rho;
    if (name == "eta")
        return SweepAxis::eta;
    if (name == "c")
        return SweepAxis::c;
    throw ConfigError("unknown sweep axis '" + name + "'");
}

inline std::string axis_name(SweepAxis axis) {
    switch (axis) {
    case SweepAxis::kappa:
        return "kappa";
    case SweepAxis::kappa_prime:
        return "kappa_prime";
    case SweepAxis::rho:
        return "rho";
    case SweepAxis::eta:
        return "eta";
    case SweepAxis::c:
        return "c";
    }
    return "?";
}

/// Set one sweep parameter. A round-trip efficiency rho is split evenly,
/// rho_c = rho_d = sqrt(rho).
inline void apply_axis(SweepAxis axis, double value, profit::MarketParams &market,
                       fluidq::StorageParams &storage) {
    switch (axis) {
    case SweepAxis::kappa:
        market.kappa = value;
        break;
    case SweepAxis::kappa_prime:
        market.kappa_prime = value;
        break;
    case SweepAxis::rho:
        if (!(value > 0.0 && value <= 1.0))
            throw ConfigError("round-trip efficiency must lie in (0, 1]");
        storage.rho_c = storage.rho_d = std::sqrt(value);
        break;
    case SweepAxis::eta:
        storage.eta = value;
        break;
    case SweepAxis::c:
        market.storage_cost = value;
        break;
    }
}

/// The balancing policy is only optimal when surplus sales and leakage are
/// not both active.
inline void check_policy_region(const profit::MarketParams &market,
                                const fluidq::StorageParams &storage) {
    if (market.kappa_prime > 0.0 && storage.eta > 0.0)
        throw ConfigError("kappa_prime > 0 together with eta > 0 is outside the region where "
                          "the balancing policy is optimal");
}

struct SweepRow {
    double axis_value = 0.0;
    double q_star = 0.0;
    double b_star = 0.0;
    double net = 0.0;
    double gain = 0.0; ///< net minus the best no-storage profit
    double psi_norm = 0.0;
    int fallback_count = 0;
};

/// One optimize per axis value, run concurrently on cfg.workers threads.
inline std::vector<SweepRow> sweep(const ctmc::CtmcModel &model, const profit::MarketParams &base_market,
                                   const fluidq::StorageParams &base_storage, SweepAxis axis,
                                   const std::vector<double> &values, const SearchConfig &cfg) {
    if (values.empty())
        throw ConfigError("sweep needs at least one value");
    cfg.validate();
    std::vector<std::pair<profit::MarketParams, fluidq::StorageParams>> settings;
    for (double v : values) {
        profit::MarketParams m = base_market;
        fluidq::StorageParams s = base_storage;
        apply_axis(axis, v, m, s);
        m.validate();
        s.validate();
        check_policy_region(m, s);
        settings.emplace_back(m, s);
    }

    SearchConfig inner = cfg;
    inner.workers = 1;
    return parallel::map_indexed<SweepRow>(values.size(), cfg.workers, [&](std::size_t i) {
        const auto &[m, s] = settings[i];
        const SizingResult r = optimize(model, m, s, inner);
        SweepRow row;
        row.axis_value = values[i];
        row.q_star = r.q_star;
        row.b_star = r.b_star;
        row.net = r.profit.net;
        row.gain = r.profit.net - profit::best_no_storage(model, m).second.net;
        row.psi_norm = r.psi.sum();
        row.fallback_count = r.fallback_count;
        return row;
    });
}

inline constexpr const char *kSweepHeader = "axis_value,q_star,b_star,net,gain,psi_norm,fallback_count";

inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline void write_sweep_table(std::ostream &out, const std::vector<SweepRow> &rows) {
    out << kSweepHeader << '\n';
    for (const SweepRow &r : rows) {
        out << format_number(r.axis_value) << ',' << format_number(r.q_star) << ','
            << format_number(r.b_star) << ',' << format_number(r.net) << ',' << format_number(r.gain)
            << ',' << format_number(r.psi_norm) << ',' << r.fallback_count << '\n';
    }
}

} // namespace fluidstore::optimizer
