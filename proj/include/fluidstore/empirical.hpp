// Trace-driven ex-post evaluation of a (q, b) pair under the balancing
// policy. Model-free: it replays the sampled wind series step by step and is
// the empirical reference for the fluid-queue results.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <vector>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/errors.hpp"
#include "fluidstore/fluidq.hpp"
#include "fluidstore/parallel.hpp"
#include "fluidstore/profit.hpp"

namespace fluidstore::empirical {

/// How efficiency losses enter the dispatch recursion.
enum class LossConvention {
    /// rho_c on charge, rho_d on discharge; the deficit is converted back to
    /// external energy with rho_d before it is penalized.
    split,
    /// The published recursion: the whole round-trip loss rho_c rho_d is
    /// taken on charge and discharge is lossless.
    pseudocode,
};

/// Which side of the charger the overflow is measured on when sold.
enum class SurplusPricing {
    external, ///< overflow converted back to plant-side energy (divide by the charge efficiency)
    stored,   ///< overflow priced as the energy that would have entered storage
};

struct ExpostOptions {
    LossConvention convention = LossConvention::split;
    SurplusPricing surplus = SurplusPricing::external;
    double initial_charge = 0.0; ///< x_0 in p.u. hours, clipped to [0, b]
};

/// External energy flows of one step [p.u. h]. Sign conventions: every
/// field is non-negative.
struct StepFlows {
    double charge = 0.0;    ///< plant-side energy sent into storage
    double discharge = 0.0; ///< grid-side energy delivered from storage
    double shortfall = 0.0; ///< bought at kappa
    double surplus = 0.0;   ///< sold at kappa' (plant-side overflow)
    double surplus_priced = 0.0; ///< surplus on the side selected for pricing
};

/// Battery state under the balancing policy.
class DispatchState {
  public:
    DispatchState(double b, const fluidq::StorageParams &storage, const ExpostOptions &opts = {})
        : b_(b), x_(std::clamp(opts.initial_charge, 0.0, b)), surplus_side_(opts.surplus) {
        if (opts.convention == LossConvention::split) {
            charge_eff_ = storage.rho_c;
            discharge_eff_ = storage.rho_d;
        } else {
            charge_eff_ = storage.round_trip();
            discharge_eff_ = 1.0;
        }
    }

    /// Advance one step of length `delta` with wind `w` against pledge `q`.
    StepFlows step(double w, double q, double delta) {
        StepFlows f;
        const double gap = (w - q) * delta;
        if (gap > 0.0) {
            const double stored = charge_eff_ * gap;
            const double room = b_ - x_;
            if (stored > room) {
                f.surplus = (stored - room) / charge_eff_;
                x_ = b_;
            } else {
                x_ += stored;
            }
            f.charge = gap - f.surplus;
            f.surplus_priced =
                surplus_side_ == SurplusPricing::external ? f.surplus : f.surplus * charge_eff_;
        } else if (gap < 0.0) {
            const double drawn = -gap / discharge_eff_;
            if (drawn > x_) {
                f.shortfall = (drawn - x_) * discharge_eff_;
                x_ = 0.0;
            } else {
                x_ -= drawn;
            }
            f.discharge = -gap - f.shortfall;
        }
        ++steps_;
        return f;
    }

    /// Step and book the imbalance income at the given market prices.
    StepFlows step(double w, double q, double delta, const profit::MarketParams &market) {
        const StepFlows f = step(w, q, delta);
        income_ += market.price * q * delta;
        penalty_ += market.price * market.kappa * f.shortfall;
        revenue_ += market.price * market.kappa_prime * f.surplus_priced;
        shortfall_ += f.shortfall;
        surplus_ += f.surplus_priced;
        return f;
    }

    double charge_level() const { return x_; }
    std::size_t steps() const { return steps_; }
    double income() const { return income_; }
    double shortfall_penalty() const { return penalty_; }
    double surplus_revenue() const { return revenue_; }
    double total_shortfall() const { return shortfall_; }
    double total_surplus() const { return surplus_; }

  private:
    double b_;
    double x_;
    double charge_eff_ = 1.0;
    double discharge_eff_ = 1.0;
    SurplusPricing surplus_side_;
    std::size_t steps_ = 0;
    double income_ = 0.0;
    double penalty_ = 0.0;
    double revenue_ = 0.0;
    double shortfall_ = 0.0;
    double surplus_ = 0.0;
};

struct ExpostResult {
    double avg_profit = 0.0; ///< gross, per hour
    double net = 0.0;        ///< avg_profit - c b
    double shortfall = 0.0;  ///< average shortfall power
    double surplus = 0.0;    ///< average surplus power
};

/// Average ex-post profit of pledging q with storage b over the trace.
inline ExpostResult expost_profit(const ctmc::WindTrace &trace, double q, double b,
                                  const profit::MarketParams &market,
                                  const fluidq::StorageParams &storage,
                                  const ExpostOptions &opts = {}) {
    if (trace.samples.size() < 2)
        throw InputError("ex-post evaluation needs at least 2 samples");
    if (!(q >= 0.0 && q <= 1.0))
        throw ConfigError("q must lie in [0, 1]");
    if (!(b >= 0.0))
        throw ConfigError("b must be non-negative");
    if (storage.eta != 0.0)
        throw ConfigError("ex-post evaluation does not model leakage; eta must be 0");
    storage.validate();
    market.validate();

    DispatchState state(b, storage, opts);
    for (double w : trace.samples)
        state.step(w, q, trace.delta, market);
    const double hours = static_cast<double>(trace.samples.size()) * trace.delta;
    ExpostResult r;
    r.shortfall = state.total_shortfall() / hours;
    r.surplus = state.total_surplus() / hours;
    r.avg_profit = (state.income() - state.shortfall_penalty() + state.surplus_revenue()) / hours;
    r.net = r.avg_profit - market.storage_cost * b;
    return r;
}

struct SurfacePoint {
    double q = 0.0;
    double b = 0.0;
    ExpostResult result;
};

struct ExpostSurface {
    double q_star = 0.0;
    double b_star = 0.0;
    ExpostResult best;
    std::vector<SurfacePoint> points; ///< b-major, then q, in grid order
};

/// Exhaustive ex-post optimization over a (q, b) grid, maximizing net profit.
inline ExpostSurface expost_optimize(const ctmc::WindTrace &trace, const profit::MarketParams &market,
                                     const fluidq::StorageParams &storage,
                                     const std::vector<double> &q_grid, const std::vector<double> &b_grid,
                                     int workers = 1, const ExpostOptions &opts = {}) {
    if (q_grid.empty() || b_grid.empty())
        throw ConfigError("ex-post grids must be non-empty");
    std::vector<std::pair<double, double>> pts;
    for (double b : b_grid)
        for (double q : q_grid)
            pts.emplace_back(q, b);

    ExpostSurface surface;
    surface.points = parallel::map_indexed<SurfacePoint>(pts.size(), workers, [&](std::size_t i) {
        const auto [q, b] = pts[i];
        return SurfacePoint{q, b, expost_profit(trace, q, b, market, storage, opts)};
    });
    double best = -std::numeric_limits<double>::infinity();
    for (const SurfacePoint &p : surface.points) {
        if (p.result.net > best) {
            best = p.result.net;
            surface.q_star = p.q;
            surface.b_star = p.b;
            surface.best = p.result;
        }
    }
    return surface;
}

inline constexpr const char *kSurfaceHeader = "q,b,avg_profit,shortfall,surplus";

inline void write_surface_table(std::ostream &out, const ExpostSurface &surface) {
    out << kSurfaceHeader << '\n';
    char buf[160];
    for (const SurfacePoint &p : surface.points) {
        std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g,%.10g,%.10g\n", p.q, p.b,
                      p.result.avg_profit, p.result.shortfall, p.result.surplus);
        out << buf;
    }
}

} // namespace fluidstore::empirical
