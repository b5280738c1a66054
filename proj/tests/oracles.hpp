#pragma once

// Independent reference implementations used only by tests. These deliberately
// avoid the library's solver paths: the full eigendecomposition is a
// classical (largest-pivot) Jacobi, gradients/Hessians come from plain
// function-value differences, and the least-squares fit solves the normal
// equations directly.

#include <cstdint>
#include <functional>
#include <vector>

#include "hgnp/data.hpp"
#include "hgnp/linalg.hpp"

namespace oracles {

struct EigenDecomposition {
    std::vector<double> values;          // descending by |value|
    std::vector<std::vector<double>> vectors;
};

EigenDecomposition jacobi_full(const hgnp::Matrix& s, double tol = 1e-13,
                               std::size_t max_sweeps = 200);

hgnp::Matrix dense_kron(const hgnp::Matrix& a, const hgnp::Matrix& b);

double naive_quadratic_form(const hgnp::Matrix& s, const std::vector<double>& v);

/// Central finite differences of a scalar function.
std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& at, double step);

/// Dense Hessian from 4-point second differences of function values.
hgnp::Matrix fd_hessian(const std::function<double(const std::vector<double>&)>& f,
                        const std::vector<double>& at, double step);

/// Least squares by normal equations (Gaussian elimination with pivoting).
std::vector<double> ols_fit(const hgnp::Matrix& x, const std::vector<double>& y);

double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Integral of the piecewise-linear interpolant on a dense grid.
double riemann_auc(std::vector<std::pair<double, double>> points, std::size_t grid);

/// Training accuracy of a multinomial logistic regression probe.
double logistic_probe_accuracy(const hgnp::Dataset& data, std::size_t iters, double lr);

/// Random symmetric PSD matrix A^T A with entries from a seeded normal.
hgnp::Matrix random_psd(std::size_t dim, std::uint64_t seed);

}  // namespace oracles
