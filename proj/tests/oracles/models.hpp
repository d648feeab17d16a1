// Test-side model builders and simulation oracles. These deliberately use
// the standard library distributions rather than the library's own sampling
// helpers so the two stay independent.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "fluidstore/ctmc.hpp"
#include "fluidstore/fluidq.hpp"

namespace oracle {

/// Random irreducible generator: a directed ring guarantees irreducibility,
/// the other off-diagonal entries are present with probability 0.6.
inline Eigen::MatrixXd random_generator(int n, std::mt19937_64 &gen, double lo = 0.2, double hi = 2.0) {
    std::uniform_real_distribution<double> rate(lo, hi);
    std::bernoulli_distribution present(0.6);
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j && (j == (i + 1) % n || present(gen)))
                q(i, j) = rate(gen);
    for (int i = 0; i < n; ++i)
        q(i, i) = -q.row(i).sum();
    return q;
}

/// Random wind-like model with strictly increasing levels in (0, 1).
inline fluidstore::ctmc::CtmcModel random_model(int n, std::mt19937_64 &gen) {
    std::uniform_real_distribution<double> u(0.02, 0.98);
    std::vector<double> values;
    while (static_cast<int>(values.size()) < n) {
        values.clear();
        for (int i = 0; i < n; ++i)
            values.push_back(u(gen));
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());
    }
    return fluidstore::ctmc::make_model(values, random_generator(n, gen));
}

/// Random drift with both signs and |r| >= 0.1.
inline Eigen::VectorXd random_drift(int n, std::mt19937_64 &gen) {
    std::uniform_real_distribution<double> mag(0.1, 1.5);
    std::bernoulli_distribution positive(0.5);
    Eigen::VectorXd r(n);
    for (int i = 0; i < n; ++i)
        r[i] = (positive(gen) ? 1.0 : -1.0) * mag(gen);
    r[0] = std::abs(r[0]);
    r[n - 1] = -std::abs(r[n - 1]);
    return r;
}

/// Dense stationary solve by replacing one balance equation with sum = 1.
inline Eigen::VectorXd stationary_dense(const Eigen::MatrixXd &q) {
    const Eigen::Index n = q.rows();
    Eigen::MatrixXd a = q.transpose();
    a.row(n - 1).setOnes();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    rhs[n - 1] = 1.0;
    return a.colPivHouseholderQr().solve(rhs);
}

/// Occupancy of a CTMC trajectory with batch-means standard errors.
struct Occupancy {
    Eigen::VectorXd mean;
    Eigen::VectorXd std_err;
};

inline Occupancy simulate_occupancy(const Eigen::MatrixXd &q, double horizon, std::uint64_t seed,
                                    int batches = 50) {
    const Eigen::Index n = q.rows();
    std::mt19937_64 gen(seed);
    Eigen::MatrixXd occ = Eigen::MatrixXd::Zero(batches, n);
    const double len = horizon / batches;
    Eigen::Index s = 0;
    double t = 0.0;
    while (t < horizon) {
        std::exponential_distribution<double> hold(-q(s, s));
        double end = std::min(horizon, t + hold(gen));
        while (t < end) {
            const int k = std::min(batches - 1, static_cast<int>(t / len));
            const double stop = std::min(end, (k + 1) * len);
            occ(k, s) += stop - t;
            t = stop;
        }
        std::vector<double> w;
        for (Eigen::Index j = 0; j < n; ++j)
            w.push_back(j == s ? 0.0 : q(s, j));
        std::discrete_distribution<Eigen::Index> next(w.begin(), w.end());
        s = next(gen);
    }
    occ /= len;
    Occupancy out;
    out.mean = occ.colwise().mean().transpose();
    out.std_err.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double var = (occ.col(j).array() - out.mean[j]).square().sum() / (batches - 1);
        out.std_err[j] = std::sqrt(var / batches);
    }
    return out;
}

/// Trace of per-unit levels from a model: a continuous-time trajectory read
/// off every `delta` hours.
inline fluidstore::ctmc::WindTrace sampled_trace(const fluidstore::ctmc::CtmcModel &model, double hours,
                                                 double delta, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    const Eigen::MatrixXd &q = model.generator;
    const Eigen::Index n_states = q.rows();
    std::discrete_distribution<Eigen::Index> initial(model.stationary.data(),
                                                     model.stationary.data() + n_states);
    Eigen::Index s = initial(gen);
    auto holding = [&](Eigen::Index state) {
        const double rate = -q(state, state);
        return rate > 0.0 ? std::exponential_distribution<double>(rate)(gen)
                          : std::numeric_limits<double>::infinity();
    };
    double next_jump = holding(s);
    const auto n = static_cast<std::size_t>(hours / delta);
    fluidstore::ctmc::WindTrace trace;
    trace.delta = delta;
    trace.samples.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) * delta;
        while (next_jump <= t) {
            std::vector<double> w;
            for (Eigen::Index j = 0; j < n_states; ++j)
                w.push_back(j == s ? 0.0 : q(s, j));
            std::discrete_distribution<Eigen::Index> pick(w.begin(), w.end());
            s = pick(gen);
            next_jump += holding(s);
        }
        trace.samples.push_back(model.state_values[static_cast<std::size_t>(s)]);
    }
    return trace;
}

} // namespace oracle
