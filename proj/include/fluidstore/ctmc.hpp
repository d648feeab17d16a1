// Continuous-time Markov chain model of per-unit wind output.
//
// Pipeline: raw trace -> rolling mean -> discretization into levels ->
// maximum-likelihood transition counts -> generator Q = (P - I) / delta ->
// stationary distribution.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fluidstore/errors.hpp"
#include "fluidstore/random.hpp"

namespace fluidstore::ctmc {

/// Sampled per-unit wind output.
struct WindTrace {
    std::vector<double> samples; ///< per-unit power, in [0, 1]
    double delta = 1.0;          ///< sampling period [h]
    double capacity = 1.0;       ///< nameplate power [MW] used for normalization

    void validate() const {
        if (samples.size() < 2)
            throw InputError("wind trace needs at least 2 samples, got " +
                             std::to_string(samples.size()));
        if (!(delta > 0.0))
            throw InputError("wind trace sampling period must be positive");
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double w = samples[i];
            if (!(w >= 0.0 && w <= 1.0))
                throw InputError("per-unit sample " + std::to_string(i) + " = " +
                                 std::to_string(w) + " is outside [0, 1]");
        }
    }

    double mean() const {
        return std::accumulate(samples.begin(), samples.end(), 0.0) /
               static_cast<double>(samples.size());
    }
};

/// Normalize raw power [MW] by plant capacity. Values within 1e-9 of the
/// unit interval are clipped; anything further out is an input error.
inline WindTrace normalize(const std::vector<double> &power_mw, double capacity_mw,
                           double delta_hours) {
    if (!(capacity_mw > 0.0))
        throw InputError("capacity must be positive");
    WindTrace trace{.samples = {}, .delta = delta_hours, .capacity = capacity_mw};
    trace.samples.reserve(power_mw.size());
    for (std::size_t i = 0; i < power_mw.size(); ++i) {
        double w = power_mw[i] / capacity_mw;
        if (w < -1e-9 || w > 1.0 + 1e-9 || !std::isfinite(w))
            throw InputError("sample " + std::to_string(i) + " (" + std::to_string(power_mw[i]) +
                             " MW) is outside [0, capacity]");
        trace.samples.push_back(std::clamp(w, 0.0, 1.0));
    }
    trace.validate();
    return trace;
}

/// Centered rolling mean over `window_hours`; edge windows are truncated to
/// the samples available, so the length is preserved.
inline WindTrace preprocess(const WindTrace &trace, double window_hours) {
    if (trace.samples.empty())
        throw InputError("cannot preprocess an empty trace");
    if (!(trace.delta > 0.0))
        throw InputError("wind trace sampling period must be positive");
    if (window_hours < trace.delta * (1.0 - 1e-9))
        throw InputError("averaging window shorter than the sampling period");

    const auto n = static_cast<std::ptrdiff_t>(trace.samples.size());
    const auto width = std::max<std::ptrdiff_t>(
        1, static_cast<std::ptrdiff_t>(std::llround(window_hours / trace.delta)));
    // odd widths are symmetric; even widths lean one sample to the past
    const std::ptrdiff_t before = width / 2;
    const std::ptrdiff_t after = width - 1 - before;

    std::vector<double> prefix(trace.samples.size() + 1, 0.0);
    for (std::ptrdiff_t i = 0; i < n; ++i)
        prefix[i + 1] = prefix[i] + trace.samples[i];

    WindTrace out = trace;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - before);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n - 1, i + after);
        const double mean = (prefix[hi + 1] - prefix[lo]) / static_cast<double>(hi - lo + 1);
        out.samples[i] = std::clamp(mean, 0.0, 1.0);
    }
    return out;
}

enum class BinEdges { uniform, quantile };
enum class StateValue { midpoint, conditional_mean };

struct DiscretizeOptions {
    BinEdges edges = BinEdges::uniform;
    StateValue value = StateValue::midpoint;
};

struct Discretization {
    std::vector<int> labels;
    std::vector<double> state_values;
    std::vector<double> edges; ///< n_levels + 1 bin edges, edges.front() = 0, edges.back() = 1
};

namespace detail {

inline std::vector<double> quantile_edges(const std::vector<double> &samples, int n_levels) {
    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> edges(n_levels + 1);
    edges.front() = 0.0;
    edges.back() = 1.0;
    for (int k = 1; k < n_levels; ++k) {
        const double pos = static_cast<double>(k) / n_levels * static_cast<double>(sorted.size() - 1);
        const auto i = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(i);
        const double v = (i + 1 < sorted.size()) ? sorted[i] + frac * (sorted[i + 1] - sorted[i])
                                                 : sorted[i];
        edges[k] = std::max(v, edges[k - 1]);
    }
    return edges;
}

} // namespace detail

/// Map each sample into one of `n_levels` bins over [0, 1]. A sample lying
/// exactly on an interior edge goes to the upper bin; 1.0 goes to the top bin.
inline Discretization discretize(const WindTrace &trace, int n_levels,
                                 const DiscretizeOptions &opts = {}) {
    if (n_levels < 2)
        throw InputError("discretization needs at least 2 levels");
    trace.validate();

    Discretization out;
    if (opts.edges == BinEdges::uniform) {
        out.edges.resize(n_levels + 1);
        for (int k = 0; k <= n_levels; ++k)
            out.edges[k] = static_cast<double>(k) / n_levels;
    } else {
        out.edges = detail::quantile_edges(trace.samples, n_levels);
    }

    out.labels.reserve(trace.samples.size());
    for (double w : trace.samples) {
        int label;
        if (opts.edges == BinEdges::uniform) {
            label = static_cast<int>(std::floor(w * n_levels));
        } else {
            // first edge strictly greater than w, minus one
            const auto it = std::upper_bound(out.edges.begin() + 1, out.edges.end() - 1, w);
            label = static_cast<int>(it - out.edges.begin()) - 1;
        }
        out.labels.push_back(std::clamp(label, 0, n_levels - 1));
    }

    out.state_values.resize(n_levels);
    for (int k = 0; k < n_levels; ++k)
        out.state_values[k] = 0.5 * (out.edges[k] + out.edges[k + 1]);

    if (opts.value == StateValue::conditional_mean) {
        std::vector<double> sum(n_levels, 0.0);
        std::vector<std::size_t> count(n_levels, 0);
        for (std::size_t i = 0; i < out.labels.size(); ++i) {
            sum[out.labels[i]] += trace.samples[i];
            ++count[out.labels[i]];
        }
        for (int k = 0; k < n_levels; ++k) {
            if (count[k] > 0)
                out.state_values[k] = sum[k] / static_cast<double>(count[k]);
        }
    }
    return out;
}

/// Generator, state levels and stationary distribution of the wind chain.
struct CtmcModel {
    std::vector<double> state_values; ///< per-unit output per state, strictly increasing
    Eigen::MatrixXd generator;        ///< rates [1/h]
    Eigen::VectorXd stationary;       ///< pi

    std::size_t n_states() const { return state_values.size(); }

    double mean_output() const {
        double m = 0.0;
        for (std::size_t s = 0; s < n_states(); ++s)
            m += stationary[static_cast<Eigen::Index>(s)] * state_values[s];
        return m;
    }
};

namespace detail {

inline double rate_scale(const Eigen::MatrixXd &q) {
    return std::max(1.0, q.cwiseAbs().maxCoeff());
}

inline void check_generator(const Eigen::MatrixXd &q) {
    if (q.rows() == 0 || q.rows() != q.cols())
        throw ModelError("generator must be a non-empty square matrix");
    if (!q.allFinite())
        throw ModelError("generator has non-finite entries");
    const double tol = 1e-10 * rate_scale(q);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        for (Eigen::Index j = 0; j < q.cols(); ++j) {
            if (i != j && q(i, j) < 0.0)
                throw ModelError("generator entry (" + std::to_string(i) + "," +
                                 std::to_string(j) + ") is negative");
        }
        if (std::abs(q.row(i).sum()) > tol)
            throw ModelError("generator row " + std::to_string(i) + " does not sum to zero");
    }
}

// Every state reachable from state 0 and state 0 reachable from every state.
inline bool is_irreducible(const Eigen::MatrixXd &q) {
    const Eigen::Index n = q.rows();
    auto reach = [&](bool forward) {
        std::vector<char> seen(n, 0);
        std::vector<Eigen::Index> stack{0};
        seen[0] = 1;
        while (!stack.empty()) {
            const Eigen::Index i = stack.back();
            stack.pop_back();
            for (Eigen::Index j = 0; j < n; ++j) {
                const double rate = forward ? q(i, j) : q(j, i);
                if (j != i && rate > 0.0 && !seen[j]) {
                    seen[j] = 1;
                    stack.push_back(j);
                }
            }
        }
        return std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; });
    };
    return reach(true) && reach(false);
}

} // namespace detail

/// Solve pi Q = 0, sum(pi) = 1 for an irreducible generator.
inline Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd &generator) {
    detail::check_generator(generator);
    const Eigen::Index n = generator.rows();
    if (n == 1)
        return Eigen::VectorXd::Ones(1);
    if (!detail::is_irreducible(generator))
        throw ModelError("generator is reducible; no unique stationary distribution");

    // Q^T pi^T = 0 with the last equation replaced by the normalization.
    Eigen::MatrixXd a = generator.transpose();
    a.row(n - 1).setOnes();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    rhs[n - 1] = 1.0;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
    if (lu.rank() < n)
        throw ModelError("generator is rank-deficient beyond its null direction");
    Eigen::VectorXd pi = lu.solve(rhs);
    // one step of iterative refinement
    pi += lu.solve(rhs - a * pi);

    pi = pi.cwiseMax(0.0);
    pi /= pi.sum();
    return pi;
}

/// Assemble a model from levels and a generator, computing pi.
inline CtmcModel make_model(std::vector<double> state_values, Eigen::MatrixXd generator) {
    if (state_values.size() != static_cast<std::size_t>(generator.rows()))
        throw ModelError("state value count does not match generator size");
    for (std::size_t s = 1; s < state_values.size(); ++s) {
        if (!(state_values[s] > state_values[s - 1]))
            throw ModelError("state values must be strictly increasing");
    }
    for (double w : state_values) {
        if (!(w >= 0.0 && w <= 1.0))
            throw ModelError("state values must lie in [0, 1]");
    }
    Eigen::VectorXd pi = stationary_distribution(generator);
    return CtmcModel{std::move(state_values), std::move(generator), std::move(pi)};
}

/// Transition counts of consecutive label pairs, indexed by raw label.
inline Eigen::MatrixXd transition_counts(const std::vector<int> &labels, int n_states) {
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_states, n_states);
    for (std::size_t t = 0; t + 1 < labels.size(); ++t)
        counts(labels[t], labels[t + 1]) += 1.0;
    return counts;
}

/// Maximum-likelihood chain from a label sequence. Unvisited states are
/// dropped and the remaining indices compacted in increasing order.
inline CtmcModel estimate(const std::vector<int> &labels, const std::vector<double> &state_values,
                          double delta) {
    if (labels.size() < 2)
        throw InputError("need at least two labels to estimate transitions");
    if (!(delta > 0.0))
        throw InputError("sampling period must be positive");
    const int n_all = static_cast<int>(state_values.size());
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (labels[t] < 0 || labels[t] >= n_all)
            throw InputError("label " + std::to_string(labels[t]) + " at position " +
                             std::to_string(t) + " is out of range");
    }

    std::vector<int> compact(n_all, -1);
    std::vector<int> visited;
    {
        std::vector<char> seen(n_all, 0);
        for (int l : labels)
            seen[l] = 1;
        for (int s = 0; s < n_all; ++s) {
            if (seen[s]) {
                compact[s] = static_cast<int>(visited.size());
                visited.push_back(s);
            }
        }
    }
    const int n = static_cast<int>(visited.size());

    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t t = 0; t + 1 < labels.size(); ++t)
        counts(compact[labels[t]], compact[labels[t + 1]]) += 1.0;

    for (int i = 0; i < n; ++i) {
        const double leaving = counts.row(i).sum() - counts(i, i);
        if (leaving <= 0.0)
            throw ModelError("state " + std::to_string(visited[i]) + " (level " +
                             std::to_string(state_values[visited[i]]) +
                             ") is absorbing in the observed sequence");
    }

    Eigen::MatrixXd generator(n, n);
    for (int i = 0; i < n; ++i) {
        const double total = counts.row(i).sum();
        for (int j = 0; j < n; ++j) {
            const double p = counts(i, j) / total;
            generator(i, j) = (p - (i == j ? 1.0 : 0.0)) / delta;
        }
        // exact zero row sum
        generator(i, i) = -(generator.row(i).sum() - generator(i, i));
    }

    std::vector<double> values;
    values.reserve(n);
    for (int s : visited)
        values.push_back(state_values[s]);

    Eigen::VectorXd pi;
    try {
        pi = stationary_distribution(generator);
    } catch (const ModelError &e) {
        throw ModelError(std::string("estimated chain is unusable: ") + e.what());
    }
    return CtmcModel{std::move(values), std::move(generator), std::move(pi)};
}

/// Full pipeline: rolling mean, discretization, estimation.
inline CtmcModel fit(const WindTrace &trace, double window_hours, int n_levels,
                     const DiscretizeOptions &opts = {}) {
    const WindTrace smoothed = preprocess(trace, window_hours);
    const Discretization d = discretize(smoothed, n_levels, opts);
    return estimate(d.labels, d.state_values, trace.delta);
}

/// Sample the chain at multiples of `delta` for `n_samples` points, starting
/// from a state drawn from pi. Returns state indices.
inline std::vector<int> sample_path(const CtmcModel &model, std::size_t n_samples, double delta,
                                    rng::Engine &eng) {
    const auto n = static_cast<Eigen::Index>(model.n_states());
    std::vector<std::vector<double>> cumulative(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i)
                acc += model.generator(i, j);
            cumulative[i].push_back(acc);
        }
    }
    std::vector<double> pi_cum(n);
    std::partial_sum(model.stationary.begin(), model.stationary.end(), pi_cum.begin());

    std::vector<int> path(n_samples);
    auto state = static_cast<Eigen::Index>(rng::pick_cumulative(eng, pi_cum));
    double t = 0.0;
    double next_jump = (n > 1) ? rng::exponential(eng, -model.generator(state, state))
                               : std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n_samples; ++k) {
        const double sample_time = static_cast<double>(k) * delta;
        while (next_jump <= sample_time) {
            t = next_jump;
            state = static_cast<Eigen::Index>(rng::pick_cumulative(eng, cumulative[state]));
            next_jump = t + rng::exponential(eng, -model.generator(state, state));
        }
        path[k] = static_cast<int>(state);
    }
    return path;
}

} // namespace fluidstore::ctmc
