#pragma once

#include <cstddef>
#include <vector>

namespace hgnp {

/// Dense row-major matrix of 64-bit reals.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    static Matrix identity(std::size_t n);
};

struct EigenPair {
    double value = 0.0;
    std::vector<double> vector;
};

bool all_finite(const Matrix& m);
bool all_finite(const std::vector<double>& v);
double max_abs(const Matrix& m);
double max_abs(const std::vector<double>& v);

std::vector<double> mat_vec(const Matrix& m, const std::vector<double>& v);
/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);

double dot(const std::vector<double>& a, const std::vector<double>& b);
double norm2(const std::vector<double>& v);

/// Eigenpair of largest |eigenvalue| of a symmetric matrix.
///
/// Cyclic Jacobi for dimension <= 64, power iteration on S^2 (deterministic
/// all-ones start) above that. The returned vector is unit norm with its
/// first nonzero component positive. Residual contract:
/// ||S v - lambda v|| <= tol * max(1, |lambda|).
EigenPair sym_top_eigenpair(const Matrix& s, double tol = 1e-10,
                            std::size_t max_iter = 10000);

/// Kronecker product of two vectors: out[i*len(w)+j] = u[i]*w[j].
std::vector<double> kron_vec(const std::vector<double>& u, const std::vector<double>& w);

/// v^T S v.
double quadratic_form(const Matrix& s, const std::vector<double>& v);

}  // namespace hgnp
