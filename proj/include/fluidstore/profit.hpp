// Per-unit long-run average profit of a wind producer with storage.
//
//   Pi = sum_s [ q pi_s - kappa psi_s (q - w_s)^+ + kappa' psi_s (w_s - q)^+ ] - c b
//
// with prices normalized to the fixed contract price. psi comes from the
// fluid queue (storage unavailable); with b = 0 storage is never available
// and psi = pi.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/errors.hpp"
#include "fluidstore/fluidq.hpp"

namespace fluidstore::profit {

struct MarketParams {
    double kappa = 1.35;         ///< shortfall purchase factor
    double kappa_prime = 0.0;    ///< surplus sale factor
    double price = 1.0;          ///< normalized contract price
    double storage_cost = 0.005; ///< amortized c, per unit of p_max per (p.u. h)

    void validate() const {
        if (!(kappa >= 1.0))
            throw ConfigError("kappa must be >= 1");
        if (!(kappa_prime >= 0.0 && kappa_prime < 1.0))
            throw ConfigError("kappa_prime must lie in [0, 1)");
        if (!(price > 0.0))
            throw ConfigError("price must be positive");
        if (!(storage_cost >= 0.0) || !std::isfinite(storage_cost))
            throw ConfigError("storage cost must be non-negative");
    }
};

struct ProfitBreakdown {
    double income = 0.0;            ///< q sum(pi), i.e. q
    double shortfall_penalty = 0.0; ///< kappa sum psi (q - w)^+
    double surplus_revenue = 0.0;   ///< kappa' sum psi (w - q)^+
    double gross = 0.0;             ///< income - penalty + revenue
    double storage_charge = 0.0;    ///< c b
    double net = 0.0;               ///< gross - c b
    double expected_shortfall = 0.0;
    double expected_surplus = 0.0;
};

/// Exact evaluation of the per-unit objective for a given psi.
inline ProfitBreakdown evaluate(const ctmc::CtmcModel &model, const Eigen::VectorXd &psi, double q,
                                double b, const MarketParams &market) {
    if (!(q >= 0.0 && q <= 1.0))
        throw ContractError("q must lie in [0, 1]");
    if (!(b >= 0.0))
        throw ContractError("b must be non-negative");
    const auto n = static_cast<Eigen::Index>(model.n_states());
    if (psi.size() != n)
        throw ContractError("psi has the wrong dimension");

    ProfitBreakdown out;
    double mass = 0.0;
    for (Eigen::Index s = 0; s < n; ++s) {
        const double pi = model.stationary[s];
        const double p = psi[s];
        if (!(p >= -1e-12 && p <= pi + 1e-12))
            throw ContractError("psi[" + std::to_string(s) + "] = " + std::to_string(p) +
                                " is outside [0, pi]");
        const double w = model.state_values[static_cast<std::size_t>(s)];
        mass += pi;
        out.expected_shortfall += p * std::max(0.0, q - w);
        out.expected_surplus += p * std::max(0.0, w - q);
    }
    out.income = market.price * q * mass;
    out.shortfall_penalty = market.price * market.kappa * out.expected_shortfall;
    out.surplus_revenue = market.price * market.kappa_prime * out.expected_surplus;
    out.gross = out.income - out.shortfall_penalty + out.surplus_revenue;
    out.storage_charge = market.storage_cost * b;
    out.net = out.gross - out.storage_charge;
    return out;
}

/// Closed form without storage: psi = pi, b = 0.
inline ProfitBreakdown no_storage_profit(const ctmc::CtmcModel &model, double q,
                                         const MarketParams &market) {
    return evaluate(model, model.stationary, q, 0.0, market);
}

/// The no-storage profit is concave and piecewise linear in q with kinks at
/// the state levels, so its maximum is attained on {0, 1, w_s}.
inline std::pair<double, ProfitBreakdown> best_no_storage(const ctmc::CtmcModel &model,
                                                          const MarketParams &market) {
    std::vector<double> candidates = model.state_values;
    candidates.push_back(0.0);
    candidates.push_back(1.0);
    std::sort(candidates.begin(), candidates.end());
    double best_q = 0.0;
    ProfitBreakdown best;
    best.net = -std::numeric_limits<double>::infinity();
    for (double q : candidates) {
        const ProfitBreakdown p = no_storage_profit(model, q, market);
        if (p.net > best.net) {
            best = p;
            best_q = q;
        }
    }
    return {best_q, best};
}

/// Objective at one (q, b) with the fluid-queue solve behind it.
struct SizingEvaluation {
    ProfitBreakdown profit;
    Eigen::VectorXd psi;
    fluidq::SolvePath path;
};

/// Profit at (q, storage.b). b = 0 takes the closed form; otherwise psi
/// comes from the fallback solver. Solver failures propagate.
inline SizingEvaluation evaluate_sizing(const ctmc::CtmcModel &model, double q,
                                        const MarketParams &market,
                                        const fluidq::StorageParams &storage,
                                        const fluidq::SolveOptions &solver = {},
                                        double r_inf = 0.0) {
    SizingEvaluation out;
    if (storage.b == 0.0) {
        out.psi = model.stationary;
        out.path.stage = "closed-form";
    } else {
        fluidq::FluidQueueSpec spec = fluidq::build_drift(model, q, storage);
        spec.r_inf = r_inf;
        fluidq::LimitingDistribution ld = fluidq::solve_with_fallback(spec, solver);
        out.psi = std::move(ld.psi);
        out.path = std::move(ld.path);
    }
    out.profit = evaluate(model, out.psi, q, storage.b, market);
    return out;
}

/// One-dimensional search over q at fixed b: candidate grid (plus state
/// levels), then compass refinement from the best candidate.
struct QSearch {
    double grid_step = 0.05;
    bool include_levels = true;
    double shrink = 0.5;
    double tol_step = 1e-3;
    int max_iters = 500;
    double r_inf = 0.0;
    fluidq::SolveOptions solver;
};

struct QOptimum {
    double q = 0.0;
    SizingEvaluation at;
    int evaluations = 0;
    int failures = 0;
};

inline QOptimum maximize_over_q(const ctmc::CtmcModel &model, const MarketParams &market,
                                const fluidq::StorageParams &storage, const QSearch &search = {}) {
    if (!(search.grid_step > 0.0) || !(search.tol_step > 0.0) ||
        !(search.shrink > 0.0 && search.shrink < 1.0))
        throw ConfigError("invalid q search settings");

    QOptimum best;
    best.at.profit.net = -std::numeric_limits<double>::infinity();
    bool found = false;
    auto probe = [&](double q) {
        ++best.evaluations;
        try {
            SizingEvaluation e = evaluate_sizing(model, q, market, storage, search.solver, search.r_inf);
            if (!found || e.profit.net > best.at.profit.net) {
                best.q = q;
                best.at = std::move(e);
                found = true;
                return true;
            }
        } catch (const SolverError &) {
            ++best.failures;
        }
        return false;
    };

    std::vector<double> candidates;
    const int steps = static_cast<int>(std::ceil(1.0 / search.grid_step - 1e-9));
    for (int k = 0; k <= steps; ++k)
        candidates.push_back(std::min(1.0, k * search.grid_step));
    if (search.include_levels)
        candidates.insert(candidates.end(), model.state_values.begin(), model.state_values.end());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    for (double q : candidates)
        probe(q);
    if (!found)
        throw SolverError("every q candidate failed at b = " + std::to_string(storage.b),
                          std::numeric_limits<double>::infinity());

    double step = search.grid_step;
    for (int it = 0; it < search.max_iters && step >= search.tol_step; ++it) {
        // probe both sides; probe() keeps whichever improves most
        const double centre = best.q;
        const double up = std::min(1.0, centre + step);
        const double down = std::max(0.0, centre - step);
        const bool moved_up = up != centre && probe(up);
        const bool moved_down = down != centre && probe(down);
        if (!moved_up && !moved_down)
            step *= search.shrink;
    }
    return best;
}

/// Marginal value of the first increment of storage: forward difference of
/// the q-optimized gross profit between b = 0 and b = db.
inline double critical_cost(const ctmc::CtmcModel &model, const MarketParams &market,
                            const fluidq::StorageParams &storage, double db = 0.05,
                            QSearch search = {.grid_step = 0.05, .tol_step = 1e-7}) {
    if (!(db > 0.0))
        throw ConfigError("critical cost step db must be positive");
    MarketParams free = market;
    free.storage_cost = 0.0;
    const double base = best_no_storage(model, free).second.gross;
    fluidq::StorageParams small = storage;
    small.b = db;
    const double with = maximize_over_q(model, free, small, search).at.profit.gross;
    return (with - base) / db;
}

/// Per-unit amortized cost to $/kWh-yr at a given energy price [$/MWh].
inline double physical_units(double c_pu, double price_usd_per_mwh) {
    return c_pu * price_usd_per_mwh * 8760.0 / 1000.0;
}

} // namespace fluidstore::profit
