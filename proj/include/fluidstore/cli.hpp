// Batch front end: estimate | curve | optimize | sweep | simulate | validate.
// Each command reads a RunConfig, writes its tables and plots to the output
// directory and leaves a manifest (config hash, seed, version, effective
// configuration) beside them.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fluidstore/config.hpp"
#include "fluidstore/ctmc.hpp"
#include "fluidstore/empirical.hpp"
#include "fluidstore/errors.hpp"
#include "fluidstore/fluidq.hpp"
#include "fluidstore/io.hpp"
#include "fluidstore/optimizer.hpp"
#include "fluidstore/parallel.hpp"
#include "fluidstore/profit.hpp"
#include "fluidstore/random.hpp"
#include "fluidstore/svg.hpp"

namespace fluidstore::cli {

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kConfig = 2,
    kData = 3,
    kSolver = 4,
};

struct Options {
    std::string command;
    std::string config_path;
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    bool diagnostics = false;
};

inline const std::vector<std::string> &commands() {
    static const std::vector<std::string> names{"estimate", "curve",    "optimize",
                                                "sweep",    "simulate", "validate"};
    return names;
}

namespace detail {

using nlohmann::json;
using optimizer::format_number;

/// Shared state of one command invocation.
class Session {
  public:
    Session(config::RunConfig cfg, const Options &opts, std::ostream &out, std::ostream &err)
        : cfg_(std::move(cfg)), opts_(opts), out_(out), err_(err) {
        dir_ = opts.out_dir ? std::filesystem::path(*opts.out_dir)
                            : std::filesystem::path(cfg_.resolve(cfg_.output_dir));
        std::filesystem::create_directories(dir_);
        if (opts.diagnostics) {
            cfg_.search.solver.on_accept = [this](const fluidq::FluidQueueSpec &spec,
                                                  const fluidq::LimitingDistribution &ld) {
                std::ostringstream label;
                label.precision(10);
                label << "b=" << spec.storage_hours << ";drift=";
                for (Eigen::Index s = 0; s < spec.drift.size(); ++s)
                    label << (s ? "|" : "") << spec.drift[s];
                const std::string line = fluidq::diagnostic_line(label.str(), ld);
                std::lock_guard lock(diag_mutex_);
                diagnostics_.push_back(line);
            };
        }
    }

    const config::RunConfig &cfg() const { return cfg_; }
    std::ostream &out() { return out_; }
    void warn(const std::string &msg) { err_ << "warning: " << msg << '\n'; }

    std::string path(const std::string &file) const { return (dir_ / file).string(); }

    std::ofstream open(const std::string &file) {
        std::ofstream f(path(file));
        if (!f)
            throw InputError("cannot write '" + path(file) + "'");
        outputs_.push_back(file);
        return f;
    }

    void plot(const std::string &file, const plot::Chart &chart) {
        if (plot::write_svg(path(file), chart))
            outputs_.push_back(file);
        else
            warn("could not draw " + file);
    }

    bool has_trace() const { return !cfg_.input.trace.empty(); }

    const ctmc::WindTrace &trace() {
        if (!trace_) {
            if (cfg_.input.trace.empty())
                throw ConfigError("this command needs input.trace");
            const std::string file = cfg_.resolve(cfg_.input.trace);
            io::TraceOptions topts{.capacity_mw = cfg_.input.capacity_mw, .delta_hours = cfg_.model.delta};
            trace_ = io::read_trace_file(file, topts, [this](const std::string &m) { warn(m); }).trace;
            inputs_[cfg_.input.trace] = file_hash(file);
        }
        return *trace_;
    }

    const ctmc::CtmcModel &model() {
        if (!model_) {
            if (!cfg_.input.model.empty()) {
                const std::string file = cfg_.resolve(cfg_.input.model);
                model_ = io::read_model_file(file);
                inputs_[cfg_.input.model] = file_hash(file);
            } else if (!cfg_.input.trace.empty()) {
                model_ = ctmc::fit(trace(), cfg_.model.window_hours, cfg_.model.n_levels,
                                   cfg_.model.discretize);
            } else {
                throw ConfigError("configuration needs input.trace or input.model");
            }
        }
        return *model_;
    }

    void finish() {
        if (opts_.diagnostics) {
            std::sort(diagnostics_.begin(), diagnostics_.end());
            std::ofstream f = open("diagnostics.csv");
            f << fluidq::kDiagnosticHeader << '\n';
            for (const std::string &line : diagnostics_)
                f << line << '\n';
        }
        json manifest;
        manifest["command"] = opts_.command;
        manifest["version"] = config::kVersion;
        manifest["config_hash"] = cfg_.hash();
        manifest["seed"] = cfg_.seed;
        manifest["inputs"] = inputs_;
        manifest["outputs"] = outputs_;
        manifest["config"] = cfg_.to_json();
        std::ofstream f(path(opts_.command + ".manifest.json"));
        f << manifest.dump(2) << '\n';
    }

  private:
    static std::string file_hash(const std::string &file) {
        std::ifstream in(file, std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        return io::hex64(io::fnv1a(buf.str()));
    }

    config::RunConfig cfg_;
    Options opts_;
    std::ostream &out_;
    std::ostream &err_;
    std::filesystem::path dir_;
    std::optional<ctmc::WindTrace> trace_;
    std::optional<ctmc::CtmcModel> model_;
    std::vector<std::string> outputs_;
    std::map<std::string, std::string> inputs_;
    std::mutex diag_mutex_;
    std::vector<std::string> diagnostics_;
};

inline double entropy(const Eigen::VectorXd &pi) {
    double h = 0.0;
    for (double p : pi)
        if (p > 0.0)
            h -= p * std::log(p);
    return h;
}

inline int cmd_estimate(Session &s) {
    const config::RunConfig &cfg = s.cfg();
    const ctmc::WindTrace &trace = s.trace();
    const ctmc::CtmcModel model =
        ctmc::fit(trace, cfg.model.window_hours, cfg.model.n_levels, cfg.model.discretize);
    std::ofstream f = s.open("model.json");
    f << io::model_to_json(model, trace.delta).dump(2) << '\n';
    s.out() << "states retained: " << model.n_states() << " of " << s.cfg().model.n_levels << '\n'
            << "stationary entropy: " << format_number(entropy(model.stationary)) << " nats\n"
            << "mean output (model): " << format_number(model.mean_output()) << " p.u.\n"
            << "mean output (trace): " << format_number(trace.mean()) << " p.u.\n"
            << "samples: " << trace.samples.size() << ", delta " << format_number(trace.delta) << " h\n";
    return kOk;
}

/// Best ex-post gross over a q grid at fixed b.
inline double expost_best_gross(const ctmc::WindTrace &trace, const config::RunConfig &cfg, double b) {
    double best = -std::numeric_limits<double>::infinity();
    for (double q : cfg.simulate.q_grid)
        best = std::max(best, empirical::expost_profit(trace, q, b, cfg.market, cfg.storage,
                                                       cfg.simulate.options)
                                  .avg_profit);
    return best;
}

inline int cmd_curve(Session &s) {
    const config::RunConfig &cfg = s.cfg();
    const ctmc::CtmcModel &model = s.model();
    const auto [q0, base] = profit::best_no_storage(model, cfg.market);
    const bool expost = s.has_trace() && cfg.storage.eta == 0.0;
    const ctmc::WindTrace *trace = expost ? &s.trace() : nullptr;
    const double expost_base = expost ? expost_best_gross(*trace, cfg, 0.0) : 0.0;

    struct Row {
        double b = 0.0, q = 0.0, gross = NAN, gain = NAN, shortfall = NAN, surplus = NAN,
               expost_gain = NAN;
        int fallback = 0;
        std::string error;
    };
    optimizer::SearchConfig inner = cfg.search;
    inner.workers = 1;
    const std::vector<double> &bs = cfg.curve.b_values;
    std::vector<Row> rows = parallel::map_indexed<Row>(bs.size(), cfg.workers, [&](std::size_t i) {
        Row r;
        r.b = bs[i];
        try {
            profit::ProfitBreakdown p;
            if (r.b == 0.0) {
                r.q = q0;
                p = base;
            } else {
                const profit::QOptimum opt =
                    optimizer::fix_b_optimize_q(model, cfg.market, cfg.storage, r.b, inner);
                r.q = opt.q;
                p = opt.at.profit;
                r.fallback = (opt.at.path.attempts > 1 || opt.at.path.stage.rfind("extended", 0) == 0);
            }
            r.gross = p.gross;
            r.gain = p.gross - base.gross;
            r.shortfall = p.expected_shortfall;
            r.surplus = p.expected_surplus;
        } catch (const SolverError &e) {
            r.error = e.what();
        }
        if (expost)
            r.expost_gain = expost_best_gross(*trace, cfg, r.b) - expost_base;
        return r;
    });

    const double fit_line = model.mean_output();
    {
        std::ofstream f = s.open("curve.csv");
        f << "b,q_star,gross,gain,expected_shortfall,expected_surplus,feed_in_tariff,fallback"
          << (expost ? ",expost_gain" : "") << '\n';
        for (const Row &r : rows) {
            f << format_number(r.b) << ',' << format_number(r.q) << ',' << format_number(r.gross) << ','
              << format_number(r.gain) << ',' << format_number(r.shortfall) << ','
              << format_number(r.surplus) << ',' << format_number(fit_line) << ',' << r.fallback;
            if (expost)
                f << ',' << format_number(r.expost_gain);
            f << '\n';
        }
    }
    int gaps = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].error.empty()) {
            ++gaps;
            s.warn("b = " + format_number(rows[i].b) + ": " + rows[i].error);
        }
        if (i > 0 && rows[i].b > rows[i - 1].b && rows[i].gain < rows[i - 1].gain - 1e-9)
            s.warn("gain decreases between b = " + format_number(rows[i - 1].b) + " and b = " +
                   format_number(rows[i].b));
    }

    const double c_o = profit::critical_cost(model, cfg.market, cfg.storage, cfg.curve.critical_db);
    const double c_phys = profit::physical_units(c_o, cfg.curve.price_usd_per_mwh);
    {
        json summary;
        summary["critical_cost"] = c_o;
        summary["critical_cost_usd_per_kwh_yr"] = c_phys;
        summary["price_usd_per_mwh"] = cfg.curve.price_usd_per_mwh;
        summary["no_storage_q"] = q0;
        summary["no_storage_gross"] = base.gross;
        summary["feed_in_tariff"] = fit_line;
        summary["gaps"] = gaps;
        std::ofstream f = s.open("curve_summary.json");
        f << summary.dump(2) << '\n';
    }
    plot::Chart chart{"Gross profit gain over no storage", "storage size b [h]", "gain [p.u.]", {}};
    plot::Series model_series{"model", {}, {}, false};
    plot::Series expost_series{"ex-post", {}, {}, true};
    for (const Row &r : rows) {
        model_series.x.push_back(r.b);
        model_series.y.push_back(r.gain);
        expost_series.x.push_back(r.b);
        expost_series.y.push_back(r.expost_gain);
    }
    chart.series.push_back(model_series);
    if (expost)
        chart.series.push_back(expost_series);
    s.plot("curve.svg", chart);

    s.out() << "critical cost c_o = " << format_number(c_o) << " p.u. (" << format_number(c_phys)
            << " $/kWh-yr at " << format_number(cfg.curve.price_usd_per_mwh) << " $/MWh)\n"
            << "feed-in-tariff reference: " << format_number(fit_line) << '\n'
            << "curve points: " << rows.size() << ", gaps: " << gaps << '\n';
    return kOk;
}

inline json breakdown_json(const profit::ProfitBreakdown &p) {
    return json{{"income", p.income},
                {"shortfall_penalty", p.shortfall_penalty},
                {"surplus_revenue", p.surplus_revenue},
                {"gross", p.gross},
                {"storage_charge", p.storage_charge},
                {"net", p.net},
                {"expected_shortfall", p.expected_shortfall},
                {"expected_surplus", p.expected_surplus}};
}

inline int cmd_optimize(Session &s) {
    const config::RunConfig &cfg = s.cfg();
    const ctmc::CtmcModel &model = s.model();
    const optimizer::SizingResult r = optimizer::optimize(model, cfg.market, cfg.storage, cfg.search);
    const auto [q0, base] = profit::best_no_storage(model, cfg.market);

    json j;
    j["q_star"] = r.q_star;
    j["b_star"] = r.b_star;
    j["profit"] = breakdown_json(r.profit);
    j["psi"] = std::vector<double>(r.psi.begin(), r.psi.end());
    j["grid_best"] = r.grid_best;
    j["boundary_hit"] = r.boundary_hit;
    j["fallback_count"] = r.fallback_count;
    j["failures"] = r.failures;
    j["evaluations"] = r.trace.size();
    j["no_storage"] = {{"q", q0}, {"net", base.net}};
    j["gain"] = r.profit.net - base.net;
    {
        std::ofstream f = s.open("sizing.json");
        f << j.dump(2) << '\n';
    }
    {
        std::ofstream f = s.open("search_trace.csv");
        f << "phase,q,b,net,ok,stage,r_inf,attempts,error\n";
        for (const optimizer::EvaluationRecord &e : r.trace)
            f << e.phase << ',' << format_number(e.q) << ',' << format_number(e.b) << ','
              << format_number(e.net) << ',' << (e.ok ? 1 : 0) << ',' << e.stage << ','
              << format_number(e.r_inf) << ',' << e.attempts << ",\"" << e.error << "\"\n";
    }
    s.out() << "q* = " << format_number(r.q_star) << ", b* = " << format_number(r.b_star)
            << " h, net = " << format_number(r.profit.net) << ", gain over no storage = "
            << format_number(r.profit.net - base.net) << '\n';
    if (r.boundary_hit)
        s.warn("b* sits on the upper search bound " + format_number(cfg.search.upper_b()));
    if (r.failures > 0)
        s.warn(std::to_string(r.failures) + " probe points failed and were skipped");
    return kOk;
}

inline int cmd_sweep(Session &s) {
    const config::RunConfig &cfg = s.cfg();
    const ctmc::CtmcModel &model = s.model();
    const optimizer::SweepAxis axis = optimizer::parse_axis(cfg.sweep.axis);
    const std::vector<optimizer::SweepRow> rows =
        optimizer::sweep(model, cfg.market, cfg.storage, axis, cfg.sweep.values, cfg.search);
    const std::string name = "sweep_" + optimizer::axis_name(axis);
    {
        std::ofstream f = s.open(name + ".csv");
        optimizer::write_sweep_table(f, rows);
    }
    plot::Series b_series{"b*", {}, {}, false};
    plot::Series q_series{"q*", {}, {}, true};
    for (const optimizer::SweepRow &r : rows) {
        b_series.x.push_back(r.axis_value);
        b_series.y.push_back(r.b_star);
        q_series.x.push_back(r.axis_value);
        q_series.y.push_back(r.q_star);
    }
    s.plot(name + "_b_star.svg", {"Optimal storage size", cfg.sweep.axis, "b* [h]", {b_series}});
    s.plot(name + "_q_star.svg", {"Optimal contract quantity", cfg.sweep.axis, "q* [p.u.]", {q_series}});
    s.out() << "sweep over " << cfg.sweep.axis << ": " << rows.size() << " points\n";
    for (const optimizer::SweepRow &r : rows)
        s.out() << "  " << cfg.sweep.axis << " = " << format_number(r.axis_value)
                << ": q* = " << format_number(r.q_star) << ", b* = " << format_number(r.b_star)
                << ", gain = " << format_number(r.gain) << '\n';
    return kOk;
}

inline int cmd_simulate(Session &s) {
    const config::RunConfig &cfg = s.cfg();
    const ctmc::WindTrace &trace = s.trace();
    const empirical::ExpostSurface surface = empirical::expost_optimize(
        trace, cfg.market, cfg.storage, cfg.simulate.q_grid, cfg.simulate.b_grid, cfg.workers,
        cfg.simulate.options);
    {
        std::ofstream f = s.open("surface.csv");
        empirical::write_surface_table(f, surface);
    }
    {
        json j{{"q_star", surface.q_star},
               {"b_star", surface.b_star},
               {"avg_profit", surface.best.avg_profit},
               {"net", surface.best.net},
               {"shortfall", surface.best.shortfall},
               {"surplus", surface.best.surplus}};
        std::ofstream f = s.open("expost.json");
        f << j.dump(2) << '\n';
    }
    plot::Series best{"best over q", {}, {}, false};
    for (double b : optimizer::detail::sorted_unique(cfg.simulate.b_grid)) {
        double v = -std::numeric_limits<double>::infinity();
        for (const empirical::SurfacePoint &p : surface.points)
            if (p.b == b)
                v = std::max(v, p.result.net);
        best.x.push_back(b);
        best.y.push_back(v);
    }
    s.plot("surface.svg", {"Ex-post net profit", "storage size b [h]", "net [p.u.]", {best}});
    s.out() << "ex-post optimum: q* = " << format_number(surface.q_star)
            << ", b* = " << format_number(surface.b_star) << " h, net = "
            << format_number(surface.best.net) << '\n';
    return kOk;
}

inline int cmd_validate(Session &s) {
    const config::RunConfig &cfg = s.cfg();
    const ctmc::CtmcModel &model = s.model();
    std::vector<double> qs = cfg.validate.q_values;
    if (qs.empty())
        qs.push_back(model.mean_output());

    struct Check {
        std::string name;
        double q = 0.0, b = 0.0;
        int state = -1;
        double value = 0.0, reference = 0.0, tolerance = 0.0;
        bool pass = false;
    };
    std::vector<std::pair<double, double>> points;
    for (double b : cfg.validate.b_values)
        for (double q : qs)
            points.emplace_back(q, b);

    const auto per_point = parallel::map_indexed<std::vector<Check>>(
        points.size(), cfg.workers, [&](std::size_t i) {
            const auto [q, b] = points[i];
            std::vector<Check> out;
            fluidq::StorageParams storage = cfg.storage;
            storage.b = b;
            if (b == 0.0)
                return out;
            fluidq::FluidQueueSpec spec = fluidq::build_drift(model, q, storage);
            spec.r_inf = cfg.search.r_inf;
            const fluidq::LimitingDistribution ld = fluidq::solve_with_fallback(spec, cfg.search.solver);
            const double tol = cfg.search.solver.tol;
            out.push_back({"boundary_residual", q, b, -1, ld.boundary_residual, 0.0, tol,
                           ld.boundary_residual <= tol});

            // Monte Carlo on the queue that was actually solved.
            fluidq::FluidQueueSpec solved = spec;
            solved.r_inf = ld.path.r_inf;
            const fluidq::MonteCarloEstimate mc = fluidq::monte_carlo_psi(
                solved, cfg.validate.horizon_hours, rng::derive_seed(cfg.seed, i));
            for (Eigen::Index k = 0; k < ld.psi.size(); ++k) {
                // A finite run cannot resolve masses much below 1/horizon; a
                // state never seen near empty has a zero standard error.
                const double band = cfg.validate.sigma * mc.std_err[k] + 1.0 / cfg.validate.horizon_hours;
                out.push_back({"psi_vs_monte_carlo", q, b, static_cast<int>(k), ld.psi[k], mc.psi[k],
                               band, std::abs(ld.psi[k] - mc.psi[k]) <= band});
            }
            for (double gamma : {0.1, 10.0}) {
                fluidq::FluidQueueSpec scaled = solved;
                scaled.r_inf = 0.0;
                scaled.drift = fluidq::apply_drift_floor(solved).drift * gamma;
                scaled.capacity = solved.capacity * gamma;
                fluidq::SolveOptions o = cfg.search.solver;
                o.on_accept = nullptr;
                const fluidq::LimitingDistribution other = fluidq::solve_with_fallback(scaled, o);
                const double diff = (other.psi - ld.psi).cwiseAbs().maxCoeff();
                out.push_back({"scale_invariance_" + format_number(gamma), q, b, -1, diff, 0.0, 1e-9,
                               diff < 1e-9});
            }
            // Model-free check on a trace sampled from the model itself.
            if (cfg.storage.eta == 0.0) {
                rng::Engine eng(rng::derive_seed(cfg.seed, 1000 + i));
                const double delta = 0.1;
                const auto n = static_cast<std::size_t>(cfg.validate.horizon_hours / delta);
                const std::vector<int> path = ctmc::sample_path(model, n, delta, eng);
                ctmc::WindTrace synth;
                synth.delta = delta;
                synth.samples.reserve(n);
                for (int st : path)
                    synth.samples.push_back(model.state_values[static_cast<std::size_t>(st)]);
                const double empirical_gross =
                    empirical::expost_profit(synth, q, b, cfg.market, cfg.storage).avg_profit;
                const double model_gross = profit::evaluate(model, ld.psi, q, b, cfg.market).gross;
                out.push_back({"expost_vs_model_gross", q, b, -1, empirical_gross, model_gross, 0.01,
                               std::abs(empirical_gross - model_gross) <= 0.01});
            }
            return out;
        });

    int failed = 0, total = 0;
    {
        std::ofstream f = s.open("validation.csv");
        f << "check,q,b,state,value,reference,tolerance,pass\n";
        for (const auto &checks : per_point)
            for (const Check &c : checks) {
                ++total;
                failed += c.pass ? 0 : 1;
                f << c.name << ',' << format_number(c.q) << ',' << format_number(c.b) << ',' << c.state
                  << ',' << format_number(c.value) << ',' << format_number(c.reference) << ','
                  << format_number(c.tolerance) << ',' << (c.pass ? 1 : 0) << '\n';
            }
    }
    s.out() << "validation: " << total - failed << " of " << total << " checks passed\n";
    for (const auto &checks : per_point)
        for (const Check &c : checks)
            if (!c.pass)
                s.out() << "  FAIL " << c.name << " q=" << format_number(c.q) << " b=" << format_number(c.b)
                        << " state=" << c.state << " value=" << format_number(c.value)
                        << " reference=" << format_number(c.reference) << '\n';
    return failed == 0 ? kOk : kSolver;
}

} // namespace detail

/// Run one command. Errors are reported on `err` and mapped to exit codes:
/// 2 configuration, 3 data, 4 solver.
inline int run(const Options &opts, std::ostream &out = std::cout, std::ostream &err = std::cerr) {
    try {
        if (std::find(commands().begin(), commands().end(), opts.command) == commands().end())
            throw ConfigError("unknown command '" + opts.command + "'");
        if (opts.config_path.empty())
            throw ConfigError("--config is required");
        config::RunConfig cfg = config::load(opts.config_path);
        if (opts.seed)
            cfg.seed = *opts.seed;
        if (opts.workers) {
            cfg.workers = *opts.workers;
            cfg.search.workers = *opts.workers;
        }
        cfg.check();
        detail::Session session(std::move(cfg), opts, out, err);
        int code = kOk;
        if (opts.command == "estimate")
            code = detail::cmd_estimate(session);
        else if (opts.command == "curve")
            code = detail::cmd_curve(session);
        else if (opts.command == "optimize")
            code = detail::cmd_optimize(session);
        else if (opts.command == "sweep")
            code = detail::cmd_sweep(session);
        else if (opts.command == "simulate")
            code = detail::cmd_simulate(session);
        else
            code = detail::cmd_validate(session);
        session.finish();
        return code;
    } catch (const ConfigError &e) {
        err << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const InputError &e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const ModelError &e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const SolverError &e) {
        err << "solver error: " << e.what() << '\n';
        return kSolver;
    } catch (const ContractError &e) {
        err << "solver error: " << e.what() << '\n';
        return kSolver;
    } catch (const std::filesystem::filesystem_error &e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception &e) {
        err << "error: " << e.what() << '\n';
        return kInternal;
    }
}

} // namespace fluidstore::cli
