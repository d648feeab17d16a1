// Independent boundary-value oracle for finite-buffer fluid queues.
//
// Solves F'(x) D = F(x) Q on [0, B] by multiple shooting: the interval is cut
// into M segments short enough that ||h Q D^-1|| <= 0.5, each segment map
// exp(h Q D^-1) is summed as a Taylor series, and the node values together
// with the boundary conditions form one sparse linear system. No eigenvalues
// are involved. Requires every drift entry to be nonzero.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace oracle {

struct BvpSolution {
    Eigen::MatrixXd nodes; ///< row k holds F at x_k
    std::vector<double> x;
    Eigen::VectorXd psi;
};

inline Eigen::MatrixXd taylor_exp(const Eigen::MatrixXd &a) {
    const Eigen::Index n = a.rows();
    Eigen::MatrixXd sum = Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd term = Eigen::MatrixXd::Identity(n, n);
    for (int k = 1; k < 60; ++k) {
        term = term * a / static_cast<double>(k);
        sum += term;
        if (term.cwiseAbs().maxCoeff() < 1e-18 * sum.cwiseAbs().maxCoeff())
            break;
    }
    return sum;
}

inline BvpSolution solve_bvp(const Eigen::VectorXd &drift, const Eigen::MatrixXd &generator,
                             const Eigen::VectorXd &pi, double buffer, int min_segments = 64) {
    const Eigen::Index n = drift.size();
    for (Eigen::Index s = 0; s < n; ++s)
        if (drift[s] == 0.0)
            throw std::invalid_argument("BVP oracle needs nonzero drift");
    Eigen::MatrixXd a = generator;
    for (Eigen::Index s = 0; s < n; ++s)
        a.col(s) /= drift[s];
    const double norm = a.cwiseAbs().rowwise().sum().maxCoeff();
    const int segments = std::max(min_segments, static_cast<int>(std::ceil(buffer * norm / 0.5)));
    const double h = buffer / segments;
    const Eigen::MatrixXd phi = taylor_exp(a * h);

    // Unknowns: F_0..F_M, each a row of n entries, stacked.
    const Eigen::Index m = segments;
    const Eigen::Index unknowns = (m + 1) * n;
    std::vector<Eigen::Triplet<double>> t;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(unknowns);
    Eigen::Index row = 0;
    // F_{k+1}(j) - sum_i F_k(i) phi(i, j) = 0
    for (Eigen::Index k = 0; k < m; ++k)
        for (Eigen::Index j = 0; j < n; ++j, ++row) {
            t.emplace_back(row, (k + 1) * n + j, 1.0);
            for (Eigen::Index i = 0; i < n; ++i)
                if (phi(i, j) != 0.0)
                    t.emplace_back(row, k * n + i, -phi(i, j));
        }
    for (Eigen::Index s = 0; s < n; ++s, ++row) {
        if (drift[s] > 0.0) {
            t.emplace_back(row, s, 1.0);
        } else {
            t.emplace_back(row, m * n + s, 1.0);
            rhs[row] = pi[s];
        }
    }
    Eigen::SparseMatrix<double> sys(unknowns, unknowns);
    sys.setFromTriplets(t.begin(), t.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(sys);
    if (lu.info() != Eigen::Success)
        throw std::runtime_error("BVP oracle factorization failed");
    const Eigen::VectorXd sol = lu.solve(rhs);

    BvpSolution out;
    out.nodes.resize(m + 1, n);
    for (Eigen::Index k = 0; k <= m; ++k) {
        out.nodes.row(k) = sol.segment(k * n, n).transpose();
        out.x.push_back(h * static_cast<double>(k));
    }
    out.psi = out.nodes.row(0).transpose() + pi - out.nodes.row(m).transpose();
    return out;
}

} // namespace oracle
