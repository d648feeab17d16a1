// Finite-buffer Markov-modulated fluid queue.
//
// A buffer of size B fills or drains at rate r_s while the background chain
// sits in state s. The joint stationary CDF F(x, s) = P(X <= x, S = s) solves
//
//     dF/dx D = F Q,   D = diag(r),
//     F(0, s) = 0      for r_s > 0,
//     F(B-, s) = pi_s  for r_s < 0,
//
// and the probability that the buffer cannot follow the balancing policy is
// psi = F(0) + pi - F(B-). States with zero drift are eliminated first (their
// CDF is a fixed linear combination of the others), the reduced problem is
// solved through the left eigenpairs lambda u D = u Q_hat, and each
// exponential is referenced to the boundary it decays away from so that no
// term exceeds one in magnitude.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/errors.hpp"
#include "fluidstore/random.hpp"

namespace fluidstore::fluidq {

/// Battery parameters in per-unit terms.
struct StorageParams {
    double rho_c = 0.95; ///< charge efficiency
    double rho_d = 0.95; ///< discharge efficiency
    double eta = 0.0;    ///< constant leakage [(p.u. of b)/h]
    double b = 0.0;      ///< size [hours of full plant output]

    double round_trip() const { return rho_c * rho_d; }

    void validate() const {
        if (!(rho_c > 0.0 && rho_c <= 1.0))
            throw ConfigError("rho_c must lie in (0, 1]");
        if (!(rho_d > 0.0 && rho_d <= 1.0))
            throw ConfigError("rho_d must lie in (0, 1]");
        if (!(eta >= 0.0) || !std::isfinite(eta))
            throw ConfigError("eta must be non-negative");
        if (!(b >= 0.0) || !std::isfinite(b))
            throw ConfigError("storage size b must be non-negative");
    }
};

/// Fluid queue: drift per background state, buffer capacity and chain.
///
/// `drift` and `capacity` share one level unit. Queues built from a wind
/// model measure the level in fractions of the battery, so capacity is 1 and
/// `storage_hours` carries b for reporting.
struct FluidQueueSpec {
    Eigen::VectorXd drift;
    double capacity = 1.0;
    double storage_hours = 0.0;
    Eigen::MatrixXd generator;
    Eigen::VectorXd stationary;
    double r_inf = 0.0; ///< relative drift floor

    std::size_t n_states() const { return static_cast<std::size_t>(drift.size()); }

    void validate() const {
        const auto n = drift.size();
        if (n == 0 || generator.rows() != n || generator.cols() != n || stationary.size() != n)
            throw ConfigError("fluid queue dimensions do not match");
        if (!drift.allFinite())
            throw ConfigError("drift vector has non-finite entries");
        if (!(capacity > 0.0) || !std::isfinite(capacity))
            throw ConfigError("fluid queue capacity must be positive");
        if (!(r_inf >= 0.0 && r_inf < 1.0))
            throw ConfigError("r_inf must lie in [0, 1)");
    }
};

/// Queue with an arbitrary drift over a wind model's chain.
inline FluidQueueSpec make_spec(const ctmc::CtmcModel &model, Eigen::VectorXd drift,
                                double capacity) {
    FluidQueueSpec spec{.drift = std::move(drift),
                        .capacity = capacity,
                        .storage_hours = capacity,
                        .generator = model.generator,
                        .stationary = model.stationary,
                        .r_inf = 0.0};
    spec.validate();
    return spec;
}

/// Drift of the battery level under the balancing policy, in (p.u. of b)/h.
inline FluidQueueSpec build_drift(const ctmc::CtmcModel &model, double q,
                                  const StorageParams &storage) {
    storage.validate();
    if (!(q >= 0.0 && q <= 1.0))
        throw ConfigError("contract quantity q must lie in [0, 1]");
    if (storage.b == 0.0)
        throw DegenerateBufferError();

    const auto n = static_cast<Eigen::Index>(model.n_states());
    Eigen::VectorXd drift(n);
    for (Eigen::Index s = 0; s < n; ++s) {
        const double w = model.state_values[static_cast<std::size_t>(s)];
        double r = 0.0;
        if (w > q)
            r = storage.rho_c * (w - q) / storage.b;
        else if (w < q)
            r = (w - q) / (storage.rho_d * storage.b);
        drift[s] = r - storage.eta;
    }
    FluidQueueSpec spec = make_spec(model, std::move(drift), 1.0);
    spec.storage_hours = storage.b;
    return spec;
}

/// Entries smaller than r_inf * max|drift| snap to 0 or to the floor,
/// whichever is closer.
inline FluidQueueSpec apply_drift_floor(const FluidQueueSpec &spec) {
    if (!(spec.r_inf >= 0.0 && spec.r_inf < 1.0))
        throw ConfigError("r_inf must lie in [0, 1)");
    FluidQueueSpec out = spec;
    if (spec.r_inf == 0.0 || spec.drift.size() == 0)
        return out;
    const double floor = spec.r_inf * spec.drift.cwiseAbs().maxCoeff();
    for (Eigen::Index s = 0; s < out.drift.size(); ++s) {
        const double a = std::abs(out.drift[s]);
        if (a < floor)
            out.drift[s] = (a <= 0.5 * floor) ? 0.0 : std::copysign(floor, out.drift[s]);
    }
    return out;
}

enum class Saturation {
    none,         ///< both drift signs present; spectral solution
    always_full,  ///< no negative drift: the buffer fills and stays full
    always_empty, ///< no positive drift: the buffer drains and stays empty
};

enum class Precision { standard, extended };

struct LimitingDistribution;

struct SolveOptions {
    double tol = 1e-8;         ///< boundary residual and invariant tolerance
    int mantissa_bits = 256;   ///< extended-precision mantissa; 0 disables that stage
    double r_inf_start = 0.1;  ///< first floor tried by the fallback ladder
    double r_inf_factor = 2.0; ///< floor escalation factor
    double r_inf_max = 0.5;    ///< ladder gives up beyond this floor
    int grid_points = 100;     ///< grid for the monotonicity and envelope checks
    /// Called with every solution accepted by the fallback ladder. May be
    /// invoked concurrently when solves run in parallel.
    std::function<void(const FluidQueueSpec &, const LimitingDistribution &)> on_accept;
};

/// How an accepted solution was obtained.
struct SolvePath {
    std::string stage = "double"; ///< "double", "extended:<bits>" or "saturated"
    double r_inf = 0.0;           ///< floor in effect for the accepted solve
    int attempts = 1;
    std::vector<std::string> failures; ///< one line per rejected attempt
};

/// Stationary level distribution of a fluid queue.
struct LimitingDistribution {
    Saturation saturation = Saturation::none;
    double capacity = 1.0;
    Eigen::VectorXd drift;      ///< drift actually solved, after flooring
    Eigen::VectorXd stationary; ///< pi
    Eigen::VectorXd psi;        ///< F(0) + pi - F(B-)

    std::vector<int> reduced_states;                ///< states with nonzero drift
    std::vector<std::complex<double>> eigenvalues;  ///< lambda per reduced mode
    Eigen::MatrixXcd eigenvectors;                  ///< columns: left eigenvectors u
    Eigen::VectorXd coefficients;                   ///< real-basis, boundary-referenced
    double boundary_residual = 0.0;
    double ode_residual = 0.0;
    double condition = 1.0; ///< 1-norm condition of the boundary system
    SolvePath path;

    /// CDF F(x) over all states. At x >= capacity this is pi.
    Eigen::VectorXd cdf(double x) const {
        if (x < 0.0)
            return Eigen::VectorXd::Zero(stationary.size());
        if (x >= capacity)
            return stationary;
        return continuous_(x);
    }

    /// F(B-), the continuous solution at the upper boundary.
    Eigen::VectorXd left_limit_at_capacity() const { return continuous_(capacity); }

    std::function<Eigen::VectorXd(double)> continuous_;
};

namespace detail {

template <class Real> using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <class Real> using VecR = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

template <class Real> double to_double(const Real &v) { return static_cast<double>(v); }

template <class Real> Real magnitude(const Real &re, const Real &im) {
    using std::sqrt;
    return sqrt(re * re + im * im);
}

// Real solution basis of the reduced ODE. A real eigenvalue contributes
// u e^{alpha x}; a conjugate pair contributes the real and imaginary parts
// of (p + i q) e^{(alpha + i beta) x}.
template <class Real> struct ModeBasis {
    Real capacity;
    std::vector<Real> alpha;
    std::vector<Real> beta;
    std::vector<char> shifted; // exponent measured from capacity (alpha > 0)
    std::vector<char> sine;    // imaginary part of a conjugate pair
    std::vector<int> pair;     // index of the source eigenpair
    MatR<Real> re;
    MatR<Real> im;
    VecR<Real> coef;

    Eigen::Index size() const { return static_cast<Eigen::Index>(alpha.size()); }

    VecR<Real> mode(Eigen::Index k, const Real &x) const {
        using std::cos;
        using std::exp;
        using std::sin;
        const Real e = exp(alpha[k] * (shifted[k] ? Real(x - capacity) : x));
        if (beta[k] == 0)
            return re.col(k) * e;
        const Real c = cos(beta[k] * x);
        const Real s = sin(beta[k] * x);
        if (!sine[k])
            return (re.col(k) * c - im.col(k) * s) * e;
        return (re.col(k) * s + im.col(k) * c) * e;
    }

    VecR<Real> value(const Real &x) const {
        VecR<Real> out = VecR<Real>::Zero(re.rows());
        for (Eigen::Index k = 0; k < size(); ++k)
            out += mode(k, x) * coef[k];
        return out;
    }
};

// Reduced-system solution plus the map back to all states.
template <class Real> struct ReducedSolution {
    ModeBasis<Real> basis;
    MatR<Real> zero_map; // F_zero = zero_map^T F_reduced
    std::vector<int> reduced;
    std::vector<int> zero;
    Eigen::Index n_states = 0;

    VecR<Real> full(const Real &x) const {
        const VecR<Real> fr = basis.value(x);
        VecR<Real> out(n_states);
        for (std::size_t i = 0; i < reduced.size(); ++i)
            out[reduced[i]] = fr[static_cast<Eigen::Index>(i)];
        if (!zero.empty()) {
            const VecR<Real> fz = zero_map.transpose() * fr;
            for (std::size_t i = 0; i < zero.size(); ++i)
                out[zero[i]] = fz[static_cast<Eigen::Index>(i)];
        }
        return out;
    }
};

template <class Real> Real norm_inf(const MatR<Real> &a) {
    Real best = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        Real row = 0;
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            using std::abs;
            row += abs(a(i, j));
        }
        if (row > best)
            best = row;
    }
    return best;
}

inline LimitingDistribution saturated(const FluidQueueSpec &spec, Saturation kind) {
    LimitingDistribution ld;
    ld.saturation = kind;
    ld.capacity = spec.capacity;
    ld.drift = spec.drift;
    ld.stationary = spec.stationary;
    ld.psi = spec.stationary;
    ld.path.stage = "saturated";
    ld.path.r_inf = spec.r_inf;
    if (kind == Saturation::always_full) {
        const auto n = spec.stationary.size();
        ld.continuous_ = [n](double) { return Eigen::VectorXd::Zero(n); };
    } else {
        Eigen::VectorXd pi = spec.stationary;
        ld.continuous_ = [pi](double) { return pi; };
    }
    return ld;
}

[[noreturn]] inline void fail(const std::string &what, double residual) {
    throw SolverError(what, residual);
}

// Spectral solve in arithmetic type Real on an already-floored spec.
// `strict` rejects near-degenerate spectra so that the caller escalates.
template <class Real>
LimitingDistribution solve_reduced(const FluidQueueSpec &spec, const SolveOptions &opts,
                                   bool strict) {
    using std::abs;
    const Eigen::Index m = spec.drift.size();
    std::vector<int> reduced, zero;
    bool any_pos = false, any_neg = false;
    for (Eigen::Index s = 0; s < m; ++s) {
        const double r = spec.drift[s];
        if (r == 0.0) {
            zero.push_back(static_cast<int>(s));
        } else {
            reduced.push_back(static_cast<int>(s));
            any_pos = any_pos || r > 0.0;
            any_neg = any_neg || r < 0.0;
        }
    }
    if (!any_neg && any_pos)
        return saturated(spec, Saturation::always_full);
    if (!any_pos)
        return saturated(spec, Saturation::always_empty);

    const auto n = static_cast<Eigen::Index>(reduced.size());
    const auto z = static_cast<Eigen::Index>(zero.size());
    const MatR<Real> q = spec.generator.template cast<Real>();
    auto block = [&](const std::vector<int> &rows, const std::vector<int> &cols) {
        MatR<Real> out(static_cast<Eigen::Index>(rows.size()),
                       static_cast<Eigen::Index>(cols.size()));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < cols.size(); ++j)
                out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    q(rows[i], cols[j]);
        return out;
    };

    ReducedSolution<Real> sol;
    sol.reduced = reduced;
    sol.zero = zero;
    sol.n_states = m;

    // Censor the zero-drift states: Q_hat = Q_nn + K Q_zn, K = -Q_nz Q_zz^{-1}.
    MatR<Real> q_hat = block(reduced, reduced);
    if (z > 0) {
        const MatR<Real> q_zz = block(zero, zero);
        Eigen::FullPivLU<MatR<Real>> lu(q_zz);
        if (!lu.isInvertible())
            fail("zero-drift block of the generator is singular", std::numeric_limits<double>::infinity());
        sol.zero_map = -block(reduced, zero) * lu.inverse();
        q_hat += sol.zero_map * block(zero, reduced);
    }

    VecR<Real> r(n), pi_r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        r[i] = Real(spec.drift[reduced[i]]);
        pi_r[i] = Real(spec.stationary[reduced[i]]);
    }

    // lambda u D = u Q_hat  <=>  (D^{-1} Q_hat^T) u^T = lambda u^T
    MatR<Real> a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            a(i, j) = q_hat(j, i) / r[i];
    Eigen::EigenSolver<MatR<Real>> es(a, true);
    if (es.info() != Eigen::Success)
        fail("eigenvalue iteration did not converge", std::numeric_limits<double>::infinity());
    const auto lambda = es.eigenvalues();
    const auto vectors = es.eigenvectors();

    std::vector<Real> modulus(n);
    Real max_mod = 0;
    Eigen::Index k_zero = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
        modulus[k] = magnitude(Real(lambda[k].real()), Real(lambda[k].imag()));
        if (!std::isfinite(to_double(modulus[k])))
            fail("non-finite eigenvalue", std::numeric_limits<double>::infinity());
        if (modulus[k] > max_mod)
            max_mod = modulus[k];
        if (modulus[k] < modulus[k_zero])
            k_zero = k;
    }
    if (lambda[k_zero].imag() != 0)
        fail("smallest eigenvalue is not real", std::numeric_limits<double>::infinity());

    if (strict) {
        const Real zero_tol = Real(1e-12) * max_mod;
        const Real repeat_tol = Real(1e-10) * max_mod;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (k == k_zero)
                continue;
            if (modulus[k] < zero_tol)
                fail("mean drift is numerically zero (repeated zero eigenvalue)", std::numeric_limits<double>::infinity());
            for (Eigen::Index j = k + 1; j < n; ++j) {
                if (j == k_zero)
                    continue;
                const Real d = magnitude(Real(lambda[k].real() - lambda[j].real()),
                                         Real(lambda[k].imag() - lambda[j].imag()));
                if (d < repeat_tol)
                    fail("repeated eigenvalues", std::numeric_limits<double>::infinity());
            }
        }
    }

    // Real mode basis.
    ModeBasis<Real> &basis = sol.basis;
    basis.capacity = Real(spec.capacity);
    basis.re = MatR<Real>::Zero(n, n);
    basis.im = MatR<Real>::Zero(n, n);
    Eigen::Index col = 0;
    auto push_mode = [&](const Real &alpha, const Real &beta, bool sine, int pair,
                         const VecR<Real> &re, const VecR<Real> &im) {
        basis.alpha.push_back(alpha);
        basis.beta.push_back(beta);
        basis.shifted.push_back(alpha > 0 ? 1 : 0);
        basis.sine.push_back(sine ? 1 : 0);
        basis.pair.push_back(pair);
        basis.re.col(col) = re;
        basis.im.col(col) = im;
        ++col;
    };
    for (Eigen::Index k = 0; k < n; ++k) {
        if (k == k_zero) {
            // exact null vector of Q_hat: the censored stationary vector
            push_mode(Real(0), Real(0), false, static_cast<int>(k), pi_r / pi_r.maxCoeff(),
                      VecR<Real>::Zero(n));
            continue;
        }
        const Real im_part = lambda[k].imag();
        if (im_part < 0)
            continue; // conjugate of the preceding mode
        VecR<Real> re(n), im(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            re[i] = vectors(i, k).real();
            im[i] = vectors(i, k).imag();
        }
        Real scale = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Real mod = magnitude(re[i], im[i]);
            if (mod > scale)
                scale = mod;
        }
        if (!(scale > 0))
            fail("zero eigenvector", std::numeric_limits<double>::infinity());
        re /= scale;
        im /= scale;
        const Real alpha = lambda[k].real();
        if (im_part == 0) {
            push_mode(alpha, Real(0), false, static_cast<int>(k), re, VecR<Real>::Zero(n));
        } else {
            push_mode(alpha, im_part, false, static_cast<int>(k), re, im);
            push_mode(alpha, im_part, true, static_cast<int>(k), re, im);
        }
    }
    if (col != n)
        fail("unpaired complex eigenvalue", std::numeric_limits<double>::infinity());

    // Boundary system: rows are reduced states, columns are modes.
    const Real zero_x(0);
    const Real cap_x(spec.capacity);
    MatR<Real> bc(n, n);
    VecR<Real> rhs(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const VecR<Real> at0 = basis.mode(k, zero_x);
        const VecR<Real> at_cap = basis.mode(k, cap_x);
        for (Eigen::Index i = 0; i < n; ++i)
            bc(i, k) = (r[i] > 0) ? at0[i] : at_cap[i];
    }
    for (Eigen::Index i = 0; i < n; ++i)
        rhs[i] = (r[i] > 0) ? Real(0) : pi_r[i];

    Eigen::FullPivLU<MatR<Real>> lu(bc);
    basis.coef = lu.solve(rhs);
    double condition = std::numeric_limits<double>::infinity();
    if (lu.isInvertible()) {
        const MatR<Real> inv = lu.inverse();
        Real n1 = 0, n1_inv = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            Real c1 = 0, c2 = 0;
            for (Eigen::Index i = 0; i < n; ++i) {
                c1 += abs(bc(i, j));
                c2 += abs(inv(i, j));
            }
            if (c1 > n1)
                n1 = c1;
            if (c2 > n1_inv)
                n1_inv = c2;
        }
        condition = to_double(Real(n1 * n1_inv));
    }

    // Boundary residual.
    const VecR<Real> f0 = basis.value(zero_x);
    const VecR<Real> fb = basis.value(cap_x);
    Real bres = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Real e = (r[i] > 0) ? Real(abs(f0[i])) : Real(abs(fb[i] - pi_r[i]));
        if (!(e <= bres))
            bres = e; // also propagates NaN
    }
    const double boundary_residual = to_double(bres);
    if (!std::isfinite(boundary_residual))
        fail("non-finite boundary residual", std::numeric_limits<double>::infinity());

    // ODE residual: sum over modes of |coef| * ||lambda u D - u Q_hat||.
    std::vector<Real> pair_res(n, Real(0));
    for (Eigen::Index k = 0; k < basis.size(); ++k) {
        const int p = basis.pair[k];
        if (basis.sine[k])
            continue;
        const VecR<Real> &re = basis.re.col(k);
        const VecR<Real> &im = basis.im.col(k);
        const Real al = basis.alpha[k], be = basis.beta[k];
        const VecR<Real> qre = q_hat.transpose() * re;
        const VecR<Real> qim = q_hat.transpose() * im;
        Real worst = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Real lre = (al * re[i] - be * im[i]) * r[i] - qre[i];
            const Real lim = (al * im[i] + be * re[i]) * r[i] - qim[i];
            const Real mod = magnitude(lre, lim);
            if (mod > worst)
                worst = mod;
        }
        pair_res[p] = worst;
    }
    Real ores = 0;
    for (Eigen::Index k = 0; k < basis.size(); ++k)
        ores += abs(basis.coef[k]) * pair_res[basis.pair[k]];
    const double ode_residual = to_double(ores);
    const double rate_scale = std::max(1.0, to_double(norm_inf(q_hat)));

    if (!(boundary_residual <= opts.tol))
        fail("boundary residual " + std::to_string(boundary_residual) + " exceeds tolerance",
             boundary_residual);
    if (!(ode_residual <= opts.tol * rate_scale))
        fail("eigenpair residual " + std::to_string(ode_residual) + " exceeds tolerance",
             ode_residual / rate_scale);

    // Envelope and monotonicity on a grid over [0, B-].
    const int grid = std::max(2, opts.grid_points);
    Eigen::VectorXd prev;
    for (int j = 0; j < grid; ++j) {
        const Real x = cap_x * Real(j) / Real(grid - 1);
        const VecR<Real> fr = sol.full(x);
        Eigen::VectorXd f(m);
        for (Eigen::Index s = 0; s < m; ++s)
            f[s] = to_double(fr[s]);
        if (!f.allFinite())
            fail("non-finite distribution value", std::numeric_limits<double>::infinity());
        for (Eigen::Index s = 0; s < m; ++s) {
            if (f[s] < -opts.tol || f[s] > spec.stationary[s] + opts.tol)
                fail("distribution leaves [0, pi] in state " + std::to_string(s),
                     std::max(-f[s], f[s] - spec.stationary[s]));
            if (j > 0 && f[s] < prev[s] - opts.tol)
                fail("distribution decreases in state " + std::to_string(s), prev[s] - f[s]);
        }
        prev = std::move(f);
    }

    // psi = F(0) + pi - F(B-)
    const VecR<Real> full0 = sol.full(zero_x);
    const VecR<Real> full_b = sol.full(cap_x);
    Eigen::VectorXd psi(m);
    for (Eigen::Index s = 0; s < m; ++s) {
        const double v = to_double(Real(full0[s] + Real(spec.stationary[s]) - full_b[s]));
        if (v < -opts.tol || v > spec.stationary[s] + opts.tol || !std::isfinite(v))
            fail("psi leaves [0, pi] in state " + std::to_string(s),
                 std::isfinite(v) ? std::max(-v, v - spec.stationary[s])
                                  : std::numeric_limits<double>::infinity());
        psi[s] = std::clamp(v, 0.0, spec.stationary[s]);
    }

    LimitingDistribution ld;
    ld.saturation = Saturation::none;
    ld.capacity = spec.capacity;
    ld.drift = spec.drift;
    ld.stationary = spec.stationary;
    ld.psi = std::move(psi);
    ld.reduced_states = reduced;
    ld.boundary_residual = boundary_residual;
    ld.ode_residual = ode_residual;
    ld.condition = condition;
    ld.path.r_inf = spec.r_inf;
    ld.eigenvalues.resize(n);
    ld.eigenvectors.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        ld.eigenvalues[k] = (k == k_zero) ? std::complex<double>(0.0, 0.0)
                                          : std::complex<double>(to_double(Real(lambda[k].real())),
                                                                 to_double(Real(lambda[k].imag())));
        for (Eigen::Index i = 0; i < n; ++i)
            ld.eigenvectors(i, k) = std::complex<double>(to_double(Real(vectors(i, k).real())),
                                                         to_double(Real(vectors(i, k).imag())));
    }
    ld.coefficients.resize(n);
    for (Eigen::Index k = 0; k < n; ++k)
        ld.coefficients[k] = to_double(basis.coef[k]);

    auto shared = std::make_shared<const ReducedSolution<Real>>(std::move(sol));
    ld.continuous_ = [shared](double x) {
        const VecR<Real> fr = shared->full(Real(x));
        Eigen::VectorXd out(fr.size());
        for (Eigen::Index s = 0; s < fr.size(); ++s)
            out[s] = to_double(fr[s]);
        return out;
    };
    return ld;
}

// Multiprecision instantiations of solve_reduced live in one compiled unit
// (src/extended_precision.cpp); mantissa_bits selects 128, 256 or 512 bits.
LimitingDistribution solve_extended(const FluidQueueSpec &spec, const SolveOptions &opts);

inline std::string extended_label(int bits) {
    const int used = bits <= 128 ? 128 : bits <= 256 ? 256 : 512;
    return "extended:" + std::to_string(used);
}

} // namespace detail

/// One spectral solve at the requested precision, after applying the drift
/// floor `spec.r_inf`. Throws SolverError when the accepted-solution checks
/// fail (boundary residual, eigenpair residual, envelope, monotonicity).
inline LimitingDistribution spectral_solve(const FluidQueueSpec &spec, const SolveOptions &opts = {},
                                           Precision precision = Precision::standard) {
    spec.validate();
    const FluidQueueSpec floored = apply_drift_floor(spec);
    if (precision == Precision::standard) {
        LimitingDistribution ld = detail::solve_reduced<double>(floored, opts, true);
        if (ld.saturation == Saturation::none)
            ld.path.stage = "double";
        return ld;
    }
    LimitingDistribution ld = detail::solve_extended(floored, opts);
    if (ld.saturation == Saturation::none)
        ld.path.stage = detail::extended_label(opts.mantissa_bits);
    return ld;
}

/// Stability ladder: double precision, then extended precision, then a
/// rising drift floor (r_inf_start, times r_inf_factor each round) until
/// r_inf_max would be exceeded.
inline LimitingDistribution solve_with_fallback(const FluidQueueSpec &spec,
                                                const SolveOptions &opts = {}) {
    if (!(opts.tol > 0.0))
        throw ConfigError("solver tolerance must be positive");
    spec.validate();

    std::vector<std::string> failures;
    double r_inf = spec.r_inf;
    double last_residual = std::numeric_limits<double>::infinity();
    int attempts = 0;
    while (true) {
        FluidQueueSpec trial = spec;
        trial.r_inf = r_inf;
        for (Precision p : {Precision::standard, Precision::extended}) {
            if (p == Precision::extended && opts.mantissa_bits <= 0)
                continue;
            ++attempts;
            try {
                LimitingDistribution ld = spectral_solve(trial, opts, p);
                ld.path.attempts = attempts;
                ld.path.r_inf = r_inf;
                ld.path.failures = std::move(failures);
                if (opts.on_accept)
                    opts.on_accept(trial, ld);
                return ld;
            } catch (const SolverError &e) {
                last_residual = e.residual();
                std::ostringstream line;
                line << (p == Precision::standard ? "double"
                                                  : detail::extended_label(opts.mantissa_bits))
                     << " r_inf=" << r_inf << ": " << e.what();
                failures.push_back(line.str());
            }
        }
        const double next = (r_inf < opts.r_inf_start) ? opts.r_inf_start : r_inf * opts.r_inf_factor;
        if (next > opts.r_inf_max || next <= r_inf) {
            std::ostringstream msg;
            msg << "fluid queue solve unstable after " << attempts << " attempts";
            if (!failures.empty())
                msg << "; last: " << failures.back();
            throw InstabilityError(msg.str(), last_residual);
        }
        r_inf = next;
    }
}

/// Monte Carlo estimate of psi with batch-means standard errors.
struct MonteCarloEstimate {
    Eigen::VectorXd psi;
    Eigen::VectorXd std_err;
    Eigen::VectorXd occupancy; ///< time fraction per state
    double horizon = 0.0;
    int batches = 0;
};

/// Event-driven simulation of the queue: exponential sojourns, piecewise
/// linear level clipped to [0, capacity]. Time spent at 0 with drift <= 0 or
/// at capacity with drift >= 0 counts as unavailable. A warm-up of 1% of the
/// horizon is discarded.
inline MonteCarloEstimate monte_carlo_psi(const FluidQueueSpec &spec, double horizon_hours,
                                          std::uint64_t seed, int batches = 100) {
    spec.validate();
    if (!(horizon_hours >= 1e4))
        throw InputError("Monte Carlo horizon must be at least 1e4 hours");
    if (batches < 2)
        throw InputError("need at least 2 batches");
    const FluidQueueSpec q = apply_drift_floor(spec);
    const Eigen::Index n = q.drift.size();

    std::vector<std::vector<double>> cumulative(n);
    std::vector<double> out_rate(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i)
                acc += q.generator(i, j);
            cumulative[i].push_back(acc);
        }
        out_rate[i] = acc;
    }
    std::vector<double> pi_cum(n);
    std::partial_sum(q.stationary.begin(), q.stationary.end(), pi_cum.begin());

    const double batch_len = horizon_hours / batches;
    Eigen::MatrixXd sat = Eigen::MatrixXd::Zero(batches, n);
    Eigen::VectorXd occ = Eigen::VectorXd::Zero(n);
    auto add = [&](double t0, double t1, Eigen::Index s, bool saturated) {
        t0 = std::max(t0, 0.0);
        t1 = std::min(t1, horizon_hours);
        if (t1 <= t0)
            return;
        if (!saturated) {
            occ[s] += t1 - t0;
            return;
        }
        auto k = static_cast<int>(t0 / batch_len);
        while (t0 < t1 && k < batches) {
            const double end = std::min(t1, (k + 1) * batch_len);
            if (end > t0)
                sat(k, s) += end - t0;
            t0 = end;
            ++k;
        }
    };

    rng::Engine eng(seed);
    const double cap = q.capacity;
    double t = -0.01 * horizon_hours;
    double level = 0.0;
    auto state = static_cast<Eigen::Index>(rng::pick_cumulative(eng, pi_cum));
    while (t < horizon_hours) {
        const double hold = out_rate[state] > 0.0 ? rng::exponential(eng, out_rate[state])
                                                  : std::numeric_limits<double>::infinity();
        const double t_end = std::min(t + hold, horizon_hours);
        const double dt = t_end - t;
        const double r = q.drift[state];
        double t_hit;
        if (r > 0.0)
            t_hit = (cap - level) / r;
        else if (r < 0.0)
            t_hit = level / -r;
        else
            t_hit = (level == 0.0 || level == cap) ? 0.0 : std::numeric_limits<double>::infinity();

        add(t, t_end, state, false);
        if (t_hit < dt)
            add(t + t_hit, t_end, state, true);

        if (r > 0.0)
            level = (t_hit <= dt) ? cap : level + r * dt;
        else if (r < 0.0)
            level = (t_hit <= dt) ? 0.0 : level + r * dt;

        t = t_end;
        if (t < horizon_hours)
            state = static_cast<Eigen::Index>(rng::pick_cumulative(eng, cumulative[state]));
    }

    MonteCarloEstimate est;
    est.horizon = horizon_hours;
    est.batches = batches;
    est.occupancy = occ / horizon_hours;
    est.psi.resize(n);
    est.std_err.resize(n);
    for (Eigen::Index s = 0; s < n; ++s) {
        const Eigen::VectorXd frac = sat.col(s) / batch_len;
        const double mean = frac.mean();
        const double var = (frac.array() - mean).square().sum() / (batches - 1);
        est.psi[s] = mean;
        est.std_err[s] = std::sqrt(var / batches);
    }
    return est;
}

/// Column header of the per-solve diagnostic dump.
inline constexpr const char *kDiagnosticHeader =
    "label,stage,r_inf,attempts,boundary_residual,ode_residual,condition,eigenvalues";

/// One diagnostic line; eigenvalues are `re[+im i]` separated by ';'.
inline std::string diagnostic_line(const std::string &label, const LimitingDistribution &ld) {
    std::ostringstream out;
    out.precision(10);
    out << label << ',' << ld.path.stage << ',' << ld.path.r_inf << ',' << ld.path.attempts << ','
        << ld.boundary_residual << ',' << ld.ode_residual << ',' << ld.condition << ',';
    for (std::size_t k = 0; k < ld.eigenvalues.size(); ++k) {
        if (k > 0)
            out << ';';
        out << ld.eigenvalues[k].real();
        if (ld.eigenvalues[k].imag() != 0.0)
            out << (ld.eigenvalues[k].imag() > 0 ? "+" : "") << ld.eigenvalues[k].imag() << 'i';
    }
    return out.str();
}

} // namespace fluidstore::fluidq
