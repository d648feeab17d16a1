// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fluidstore/config.hpp"
#include "fluidstore/ctmc.hpp"
#include "fluidstore/empirical.hpp"
#include "fluidstore/fluidq.hpp"
#include "fluidstore/io.hpp"
#include "fluidstore/optimizer.hpp"
#include "fluidstore/parallel.hpp"
#include "fluidstore/profit.hpp"
#include "fluidstore/random.hpp"
#include "oracles/bvp.hpp"
#include "oracles/models.hpp"

namespace fs = fluidstore;
namespace stdfs = std::filesystem;
using fs::fluidq::FluidQueueSpec;
using fs::fluidq::LimitingDistribution;

namespace {

const stdfs::path kSourceDir = FLUIDSTORE_SOURCE_DIR;
constexpr double kTol = 1e-8;

struct Outcome {
    bool pass = true;
    std::string detail;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string join(const std::vector<double> &v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i)
        out += (i ? " " : "") + fmt(v[i]);
    return out;
}

// Independent audit of every accepted solve: boundary conditions, monotone
// and enveloped distribution on a 100-point grid, and 0 <= psi <= pi.
class SolveAudit {
  public:
    void check(const FluidQueueSpec &spec, const LimitingDistribution &ld) {
        std::vector<std::string> problems;
        const Eigen::Index n = ld.drift.size();
        const Eigen::VectorXd f0 = ld.cdf(0.0);
        const Eigen::VectorXd fb = ld.left_limit_at_capacity();
        double residual = 0.0;
        for (Eigen::Index s = 0; s < n; ++s) {
            if (ld.drift[s] > 0.0)
                residual = std::max(residual, std::abs(f0[s]));
            if (ld.drift[s] < 0.0)
                residual = std::max(residual, std::abs(fb[s] - spec.stationary[s]));
        }
        if (residual > kTol)
            problems.push_back("boundary residual " + fmt(residual));
        for (Eigen::Index s = 0; s < n; ++s)
            if (ld.psi[s] < -kTol || ld.psi[s] > spec.stationary[s] + kTol)
                problems.push_back("psi outside [0, pi] in state " + std::to_string(s));
        Eigen::VectorXd prev = Eigen::VectorXd::Zero(n);
        for (int k = 0; k < 100; ++k) {
            const Eigen::VectorXd f = (k == 99) ? fb : ld.cdf(spec.capacity * k / 99.0);
            for (Eigen::Index s = 0; s < n; ++s) {
                if (f[s] < -kTol || f[s] > spec.stationary[s] + kTol)
                    problems.push_back("F outside [0, pi] at grid point " + std::to_string(k));
                if (f[s] < prev[s] - kTol)
                    problems.push_back("F decreasing at grid point " + std::to_string(k));
            }
            prev = f;
        }
        std::lock_guard lock(mutex_);
        ++count_;
        if (!problems.empty()) {
            ++failures_;
            if (first_failure_.empty())
                first_failure_ = "b=" + fmt(spec.capacity) + ": " + problems.front();
        }
    }

    fs::fluidq::SolveOptions options() {
        fs::fluidq::SolveOptions o;
        o.on_accept = [this](const FluidQueueSpec &spec, const LimitingDistribution &ld) { check(spec, ld); };
        return o;
    }

    long count() const { return count_; }
    long failures() const { return failures_; }
    const std::string &first_failure() const { return first_failure_; }

  private:
    std::mutex mutex_;
    long count_ = 0;
    long failures_ = 0;
    std::string first_failure_;
};

SolveAudit g_audit;

// 1. Spectral solution against Monte Carlo and a boundary-value integration.
Outcome oracle_equivalence() {
    constexpr int kModels = 24;
    constexpr double kHorizon = 1e6;
    const std::vector<double> buffers{0.5, 2.0, 8.0};
    std::mt19937_64 gen(20261015);
    struct Case {
        fs::ctmc::CtmcModel model;
        Eigen::VectorXd drift;
        double b;
        std::uint64_t seed;
    };
    std::vector<Case> cases;
    for (int m = 0; m < kModels; ++m) {
        const int n = 3 + m % 6;
        const auto model = oracle::random_model(n, gen);
        const Eigen::VectorXd drift = oracle::random_drift(n, gen);
        for (double b : buffers)
            cases.push_back({model, drift, b, fs::rng::derive_seed(77, cases.size())});
    }

    struct Result {
        int comparisons = 0;
        int exceed = 0;
        double worst_z = 0.0;
        std::string worst;
        double bvp_err = -1.0;
        std::string error;
    };
    const fs::fluidq::SolveOptions opts = g_audit.options();
    const auto results = fs::parallel::map_indexed<Result>(cases.size(), 4, [&](std::size_t i) {
        const Case &c = cases[i];
        Result r;
        try {
            const FluidQueueSpec spec = fs::fluidq::make_spec(c.model, c.drift, c.b);
            const LimitingDistribution ld = fs::fluidq::solve_with_fallback(spec, opts);
            const auto mc = fs::fluidq::monte_carlo_psi(spec, kHorizon, c.seed);
            for (Eigen::Index s = 0; s < ld.psi.size(); ++s) {
                // a run of finite length cannot resolve mass below 1/horizon
                const double band = 3.0 * mc.std_err[s] + 1.0 / kHorizon;
                const double diff = std::abs(ld.psi[s] - mc.psi[s]);
                ++r.comparisons;
                if (diff > band)
                    ++r.exceed;
                const double z = mc.std_err[s] > 0.0 ? diff / mc.std_err[s] : 0.0;
                if (z > r.worst_z)
                    r.worst_z = z;
                if (diff > band && r.worst.empty())
                    r.worst = "case " + std::to_string(i) + ": " + std::to_string(c.model.n_states()) +
                              " states, b " + fmt(c.b) + ", state " + std::to_string(s) + ", psi " +
                              fmt(ld.psi[s]) + " vs " + fmt(mc.psi[s]) + " +- " + fmt(mc.std_err[s]);
            }
            if (c.model.n_states() <= 5) {
                const auto bvp = oracle::solve_bvp(c.drift, c.model.generator, c.model.stationary, c.b);
                r.bvp_err = (ld.psi - bvp.psi).cwiseAbs().maxCoeff();
            }
        } catch (const std::exception &e) {
            r.error = e.what();
        }
        return r;
    });

    Outcome out;
    int comparisons = 0, exceed = 0, bvp_cases = 0;
    double worst_z = 0.0, worst_bvp = 0.0;
    std::string worst;
    for (const Result &r : results) {
        if (!r.error.empty()) {
            out.pass = false;
            out.detail = "solver error: " + r.error;
            return out;
        }
        comparisons += r.comparisons;
        exceed += r.exceed;
        worst_z = std::max(worst_z, r.worst_z);
        if (worst.empty())
            worst = r.worst;
        if (r.bvp_err >= 0.0) {
            ++bvp_cases;
            worst_bvp = std::max(worst_bvp, r.bvp_err);
        }
    }
    out.pass = exceed == 0 && worst_bvp <= 1e-6;
    out.detail = std::to_string(kModels) + " models x 3 buffers; Monte Carlo: " + std::to_string(exceed) +
                 " of " + std::to_string(comparisons) + " components outside 3 SE" +
                 (worst.empty() ? "" : " (first " + worst + ")") + ", largest deviation " + fmt(worst_z) +
                 " SE; boundary-value oracle on " + std::to_string(bvp_cases) + " cases, max |dpsi| " +
                 fmt(worst_bvp);
    return out;
}

// 3. Joint scaling of drift and buffer leaves psi unchanged.
Outcome scale_invariance() {
    std::mt19937_64 gen(31);
    double worst = 0.0;
    const fs::fluidq::SolveOptions opts = g_audit.options();
    for (int m = 0; m < 20; ++m) {
        const int n = 3 + m % 6;
        const auto model = oracle::random_model(n, gen);
        const Eigen::VectorXd drift = oracle::random_drift(n, gen);
        for (double b : {0.5, 2.0, 8.0}) {
            const auto base = fs::fluidq::solve_with_fallback(fs::fluidq::make_spec(model, drift, b), opts);
            for (double gamma : {0.1, 10.0}) {
                const auto scaled =
                    fs::fluidq::solve_with_fallback(fs::fluidq::make_spec(model, drift * gamma, b * gamma), opts);
                worst = std::max(worst, (scaled.psi - base.psi).cwiseAbs().maxCoeff());
            }
        }
    }
    return {worst < 1e-9, "20 models x 3 buffers x gamma {0.1, 10}: max |dpsi| " + fmt(worst)};
}

// 4. Ex-post dispatch of a long sampled trajectory against the model.
Outcome synthetic_trace() {
    std::mt19937_64 gen(4);
    const auto model = oracle::random_model(5, gen);
    const fs::ctmc::WindTrace trace = oracle::sampled_trace(model, 1e6, 0.05, 44);
    fs::profit::MarketParams market;
    fs::fluidq::StorageParams storage;
    storage.b = 0.0;
    const std::vector<double> qs{0.1, 0.3, 0.5, 0.7, 0.9};
    const std::vector<double> bs{0.0, 0.5, 1.0, 2.0, 4.0};
    double worst = 0.0;
    fs::optimizer::SearchConfig search = fs::optimizer::SearchConfig::defaults();
    search.solver = g_audit.options();
    const auto grid = fs::parallel::map_indexed<double>(qs.size() * bs.size(), 4, [&](std::size_t i) {
        const double q = qs[i % qs.size()], b = bs[i / qs.size()];
        fs::fluidq::StorageParams at = storage;
        at.b = b;
        const double model_gross = fs::profit::evaluate_sizing(model, q, market, at, search.solver).profit.gross;
        const double expost = fs::empirical::expost_profit(trace, q, b, market, at).avg_profit;
        return std::abs(model_gross - expost);
    });
    for (double d : grid)
        worst = std::max(worst, d);
    return {worst <= 0.01, "5-state model, 1e6 h trace at 0.05 h, 5x5 (q, b) grid: max |model - ex-post| " +
                               fmt(worst)};
}

fs::optimizer::SearchConfig audited_search(int workers) {
    fs::optimizer::SearchConfig cfg = fs::optimizer::SearchConfig::defaults();
    cfg.workers = workers;
    cfg.solver = g_audit.options();
    return cfg;
}

fs::profit::QSearch audited_qsearch() {
    fs::profit::QSearch search{.grid_step = 0.05, .tol_step = 1e-7};
    search.solver = g_audit.options();
    return search;
}

// 5. Optimizer behaviour on either side of the critical cost.
Outcome critical_cost_pipeline() {
    const auto model = fs::io::read_model_file((kSourceDir / "configs/three_state_model.json").string());
    fs::profit::MarketParams market;
    fs::fluidq::StorageParams storage;
    const auto cfg = audited_search(4);
    const double c_o = fs::profit::critical_cost(model, market, storage, 0.05, audited_qsearch());
    market.storage_cost = 1.1 * c_o;
    const auto above = fs::optimizer::optimize(model, market, storage, cfg);
    market.storage_cost = 0.9 * c_o;
    const auto below = fs::optimizer::optimize(model, market, storage, cfg);
    const double phys = fs::profit::physical_units(0.0193, 60.0);
    const double rounded = std::round(phys * 100.0) / 100.0;
    Outcome out;
    out.pass = c_o > 0.0 && above.b_star == 0.0 && below.b_star > 0.0 && rounded == 10.14;
    out.detail = "c_o " + fmt(c_o) + "; b* at 1.1 c_o = " + fmt(above.b_star) + ", at 0.9 c_o = " +
                 fmt(below.b_star) + "; 0.0193 p.u. at 60 $/MWh = " + fmt(phys) + " -> " + fmt(rounded) +
                 " $/kWh-yr";
    return out;
}

struct ReferenceCase {
    fs::config::RunConfig cfg;
    fs::ctmc::CtmcModel model;
};

ReferenceCase reference_case() {
    ReferenceCase rc{fs::config::load((kSourceDir / "configs/reference.json").string()), {}};
    const fs::io::TraceOptions topts{.capacity_mw = rc.cfg.input.capacity_mw, .delta_hours = rc.cfg.model.delta};
    const auto loaded = fs::io::read_trace_file(rc.cfg.resolve(rc.cfg.input.trace), topts);
    rc.model = fs::ctmc::fit(loaded.trace, rc.cfg.model.window_hours, rc.cfg.model.n_levels,
                             rc.cfg.model.discretize);
    rc.cfg.search.solver.on_accept = g_audit.options().on_accept;
    return rc;
}

// 6. Qualitative shapes at the reference settings on the bundled trace.
std::vector<std::pair<std::string, Outcome>> reference_shapes() {
    const ReferenceCase rc = reference_case();
    const auto &model = rc.model;
    const auto &cfg = rc.cfg;
    std::vector<std::pair<std::string, Outcome>> out;

    // (a) value-of-storage curve
    {
        const std::vector<double> bs{0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
        const double base = fs::profit::best_no_storage(model, cfg.market).second.gross;
        auto inner = cfg.search;
        inner.workers = 1;
        const auto gains = fs::parallel::map_indexed<double>(bs.size(), cfg.workers, [&](std::size_t i) {
            if (bs[i] == 0.0)
                return 0.0;
            return fs::optimizer::fix_b_optimize_q(model, cfg.market, cfg.storage, bs[i], inner).at.profit.gross -
                   base;
        });
        bool ok = true;
        std::vector<double> slopes;
        for (std::size_t i = 0; i < bs.size(); ++i) {
            ok = ok && gains[i] >= -1e-12;
            if (i > 0) {
                ok = ok && gains[i] >= gains[i - 1] - 1e-12;
                slopes.push_back((gains[i] - gains[i - 1]) / (bs[i] - bs[i - 1]));
            }
        }
        for (std::size_t i = 1; i < slopes.size(); ++i)
            ok = ok && slopes[i] <= slopes[i - 1] + 1e-12;
        out.push_back({"6a", {ok, "gain " + join(gains) + "; increment per hour of storage " + join(slopes)}});
    }

    // (b) critical cost over kappa
    {
        const std::vector<double> kappas{1.0, 1.25, 1.5, 2.0};
        std::vector<double> c;
        for (double k : kappas) {
            auto market = cfg.market;
            market.kappa = k;
            c.push_back(fs::profit::critical_cost(model, market, cfg.storage, cfg.curve.critical_db, audited_qsearch()));
        }
        bool ok = true;
        for (std::size_t i = 1; i < c.size(); ++i)
            ok = ok && c[i] >= c[i - 1] - 1e-12;
        out.push_back({"6b", {ok, "kappa {1, 1.25, 1.5, 2}: c_o " + join(c)}});
    }

    // (c) optimal size over kappa'
    {
        const std::vector<double> values{0.0, 0.2, 0.4, 0.6, 0.8, 0.9};
        const auto rows = fs::optimizer::sweep(model, cfg.market, cfg.storage, fs::optimizer::SweepAxis::kappa_prime,
                                               values, cfg.search);
        std::vector<double> b;
        for (const auto &r : rows)
            b.push_back(r.b_star);
        const auto peak = static_cast<std::size_t>(std::max_element(b.begin(), b.end()) - b.begin());
        bool ok = b[peak] > b.front() && b[peak] > b.back();
        for (std::size_t i = 1; i < b.size(); ++i)
            ok = ok && (i <= peak ? b[i] >= b[i - 1] : b[i] <= b[i - 1]);
        out.push_back({"6c", {ok, "kappa' {0, 0.2, 0.4, 0.6, 0.8, 0.9}: b* " + join(b) +
                                      (ok ? "" : " (no interior peak on this trace)")}});
    }

    // (d) optimal size over leakage
    {
        const std::vector<double> values{0.0, 0.01, 0.05, 0.1};
        const auto rows =
            fs::optimizer::sweep(model, cfg.market, cfg.storage, fs::optimizer::SweepAxis::eta, values, cfg.search);
        std::vector<double> b;
        for (const auto &r : rows)
            b.push_back(r.b_star);
        bool ok = true;
        for (std::size_t i = 1; i < b.size(); ++i)
            ok = ok && b[i] <= b[i - 1] + 1e-12;
        out.push_back({"6d", {ok, "eta {0, 0.01, 0.05, 0.1}: b* " + join(b)}});
    }

    // soft anchor, reported only
    const double c_o = fs::profit::critical_cost(model, cfg.market, cfg.storage, cfg.curve.critical_db);
    std::cout << "note: reference c_o = " << fmt(c_o) << " p.u. ("
              << fmt(fs::profit::physical_units(c_o, cfg.curve.price_usd_per_mwh))
              << " $/kWh-yr); soft range [0.01, 0.03] " << (c_o >= 0.01 && c_o <= 0.03 ? "met" : "not met")
              << '\n';
    return out;
}

// 7. A near-zero drift entry is handled by the fallback ladder.
Outcome stability_fallback() {
    Eigen::MatrixXd q(3, 3);
    q << -0.6, 0.4, 0.2, 0.3, -0.8, 0.5, 0.1, 0.7, -0.8;
    const auto model = fs::ctmc::make_model({0.1, 0.45, 0.85}, q);
    const Eigen::Vector3d drift(-0.5, 1e-9 * 0.5, 0.4);
    const FluidQueueSpec spec = fs::fluidq::make_spec(model, drift, 1.0);
    try {
        const auto ld = fs::fluidq::solve_with_fallback(spec, g_audit.options());
        const bool ok = ld.boundary_residual <= kTol && std::isfinite(ld.path.r_inf) && ld.path.r_inf >= 0.0;
        return {ok, "stage " + ld.path.stage + ", attempts " + std::to_string(ld.path.attempts) + ", r_inf " +
                        fmt(ld.path.r_inf) + ", residual " + fmt(ld.boundary_residual)};
    } catch (const std::exception &e) {
        return {false, std::string("solver error: ") + e.what()};
    }
}

std::string read_file(const stdfs::path &p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

// 8. Two CLI runs of the same sweep produce identical bytes.
Outcome determinism() {
    const stdfs::path root = stdfs::temp_directory_path() / "fluidstore_acceptance";
    stdfs::remove_all(root);
    stdfs::create_directories(root);
    const std::string config = (kSourceDir / "configs/reference.json").string();
    std::vector<std::string> tables;
    for (const char *run : {"first", "second"}) {
        const stdfs::path dir = root / run;
        const std::string cmd = std::string("\"") + FLUIDSTORE_CLI + "\" sweep --config \"" + config + "\" --out \"" +
                                dir.string() + "\" > \"" + (root / (std::string(run) + ".log")).string() + "\" 2>&1";
        const int rc = std::system(cmd.c_str());
        if (rc != 0)
            return {false, std::string("CLI sweep exited with status ") + std::to_string(rc)};
        tables.push_back(read_file(dir / "sweep_kappa.csv"));
    }
    const bool ok = !tables[0].empty() && tables[0] == tables[1];
    return {ok, "sweep_kappa.csv " + std::to_string(tables[0].size()) + " bytes, runs " +
                    (ok ? "identical" : "differ")};
}

} // namespace

int main() {
    using clock = std::chrono::steady_clock;
    std::vector<std::pair<std::string, Outcome>> results;
    auto timed = [&](const std::string &name, const std::function<Outcome()> &fn) {
        const auto t0 = clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception &e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(clock::now() - t0).count();
        o.detail += " [" + fmt(secs) + " s]";
        if (name == "1" && secs >= 300.0) {
            o.pass = false;
            o.detail += " exceeds the 5 minute budget";
        }
        results.push_back({name, o});
    };

    timed("1", oracle_equivalence);
    timed("3", scale_invariance);
    timed("4", synthetic_trace);
    timed("5", critical_cost_pipeline);
    try {
        for (auto &r : reference_shapes())
            results.push_back(r);
    } catch (const std::exception &e) {
        results.push_back({"6", {false, std::string("exception: ") + e.what()}});
    }
    timed("7", stability_fallback);
    timed("8", determinism);
    results.push_back({"2", {g_audit.failures() == 0 && g_audit.count() > 0,
                             std::to_string(g_audit.count()) + " accepted solves audited, " +
                                 std::to_string(g_audit.failures()) + " failures" +
                                 (g_audit.first_failure().empty() ? "" : " (first: " + g_audit.first_failure() + ")")}});

    std::stable_sort(results.begin(), results.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
    bool all = true;
    for (const auto &[name, o] : results) {
        std::cout << "criterion " << name << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << '\n';
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
