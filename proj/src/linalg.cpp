#include "hgnp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hgnp/util.hpp"

namespace hgnp {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool all_finite(const Matrix& m) {
    for (double x : m.data)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double max_abs(const Matrix& m) {
    double r = 0.0;
    for (double x : m.data) r = std::max(r, std::fabs(x));
    return r;
}

double max_abs(const std::vector<double>& v) {
    double r = 0.0;
    for (double x : v) r = std::max(r, std::fabs(x));
    return r;
}

std::vector<double> mat_vec(const Matrix& m, const std::vector<double>& v) {
    if (m.cols != v.size()) throw Error("mat_vec: dimension mismatch");
    std::vector<double> out(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* r = m.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += r[j] * v[j];
        out[i] = acc;
    }
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw Error("matmul: dimension mismatch");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw Error("matmul_nt: dimension mismatch");
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
            c(i, j) = acc;
        }
    }
    return c;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

namespace {

void check_symmetric_input(const Matrix& s) {
    if (s.rows == 0 || s.rows != s.cols)
        throw Error("sym_top_eigenpair: matrix must be square and nonempty");
    if (!all_finite(s)) throw Error("sym_top_eigenpair: NaN/Inf in input");
    const double scale = std::max(1.0, max_abs(s));
    for (std::size_t i = 0; i < s.rows; ++i)
        for (std::size_t j = i + 1; j < s.cols; ++j)
            if (std::fabs(s(i, j) - s(j, i)) > 1e-8 * scale)
                throw Error("sym_top_eigenpair: matrix is not symmetric");
}

// First component whose magnitude exceeds a relative floor decides the sign.
void fix_sign(std::vector<double>& v) {
    const double floor = 1e-12 * std::max(1.0, max_abs(v));
    for (double x : v) {
        if (std::fabs(x) > floor) {
            if (x < 0.0)
                for (double& y : v) y = -y;
            return;
        }
    }
}

double residual_norm(const Matrix& s, const std::vector<double>& v, double lambda) {
    std::vector<double> sv = mat_vec(s, v);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double r = sv[i] - lambda * v[i];
        acc += r * r;
    }
    return std::sqrt(acc);
}

EigenPair jacobi_top(const Matrix& s, double tol, std::size_t max_sweeps) {
    const std::size_t n = s.rows;
    Matrix a = s;
    Matrix vecs = Matrix::identity(n);

    double frob = 0.0;
    for (double x : s.data) frob += x * x;
    frob = std::sqrt(frob);
    const double off_target = 1e-15 * (frob + 1e-300);

    bool converged = false;
    for (std::size_t sweep = 0; sweep < std::max<std::size_t>(max_sweeps, 1); ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(off) <= off_target) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::fabs(apq) <= off_target / (double(n) * double(n) + 1.0)) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                double t = 1.0 / (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                if (theta < 0.0) t = -t;
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vecs(k, p), vkq = vecs(k, q);
                    vecs(k, p) = c * vkp - sn * vkq;
                    vecs(k, q) = sn * vkp + c * vkq;
                }
            }
        }
    }

    std::size_t top = 0;
    for (std::size_t k = 1; k < n; ++k)
        if (std::fabs(a(k, k)) > std::fabs(a(top, top))) top = k;

    EigenPair pair;
    pair.value = a(top, top);
    pair.vector.resize(n);
    for (std::size_t k = 0; k < n; ++k) pair.vector[k] = vecs(k, top);
    const double nrm = norm2(pair.vector);
    for (double& x : pair.vector) x /= nrm;
    fix_sign(pair.vector);

    const double resid = residual_norm(s, pair.vector, pair.value);
    if (!converged || resid > tol * std::max(1.0, std::fabs(pair.value)))
        throw Error("sym_top_eigenpair: Jacobi did not converge, residual " +
                    format_double(resid));
    return pair;
}

// Power iteration applying S twice per step so the dominant |eigenvalue|
// wins even when it is negative; lambda read off the Rayleigh quotient.
EigenPair power_top(const Matrix& s, double tol, std::size_t max_iter) {
    const std::size_t n = s.rows;
    std::vector<double> x(n, 1.0 / std::sqrt(double(n)));

    double lambda = 0.0;
    double resid = 0.0;
    for (std::size_t it = 0; it <= max_iter; ++it) {
        std::vector<double> y = mat_vec(s, x);
        lambda = dot(x, y);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = y[i] - lambda * x[i];
            acc += r * r;
        }
        resid = std::sqrt(acc);
        if (resid <= tol * std::max(1.0, std::fabs(lambda))) {
            fix_sign(x);
            // sign fix may flip x; lambda is sign-invariant
            EigenPair pair;
            pair.value = lambda;
            pair.vector = std::move(x);
            return pair;
        }
        std::vector<double> z = mat_vec(s, y);
        const double zn = norm2(z);
        if (zn < 1e-290)
            throw Error("sym_top_eigenpair: power iteration collapsed to zero vector");
        for (std::size_t i = 0; i < n; ++i) x[i] = z[i] / zn;
    }
    throw Error("sym_top_eigenpair: no convergence after " + std::to_string(max_iter) +
                " iterations, residual " + format_double(resid));
}

}  // namespace

EigenPair sym_top_eigenpair(const Matrix& s, double tol, std::size_t max_iter) {
    check_symmetric_input(s);
    if (s.rows <= 64) return jacobi_top(s, tol, max_iter);
    return power_top(s, tol, max_iter);
}

std::vector<double> kron_vec(const std::vector<double>& u, const std::vector<double>& w) {
    if (u.empty() || w.empty()) throw Error("kron_vec: empty input");
    std::vector<double> out(u.size() * w.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < w.size(); ++j) out[i * w.size() + j] = u[i] * w[j];
    return out;
}

double quadratic_form(const Matrix& s, const std::vector<double>& v) {
    if (s.rows != v.size() || s.cols != v.size())
        throw Error("quadratic_form: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < s.rows; ++i) {
        const double* r = s.row(i);
        double rowdot = 0.0;
        for (std::size_t j = 0; j < s.cols; ++j) rowdot += r[j] * v[j];
        acc += v[i] * rowdot;
    }
    return acc;
}

}  // namespace hgnp
