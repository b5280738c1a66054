#include "hgnp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "hgnp/util.hpp"

namespace hgnp {

double auc(std::vector<CurvePoint> curve) {
    if (curve.size() < 2) throw Error("auc: need at least 2 points");
    std::sort(curve.begin(), curve.end(),
              [](const CurvePoint& a, const CurvePoint& b) { return a.kappa < b.kappa; });
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (curve[i].kappa == curve[i - 1].kappa)
            throw Error("auc: duplicate kappa " + format_double(curve[i].kappa));
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += 0.5 * (curve[i].accuracy + curve[i - 1].accuracy) *
                (curve[i].kappa - curve[i - 1].kappa);
    return area;
}

StandardizedColumns standardize_columns(const Matrix& x) {
    if (x.rows == 0 || x.cols == 0) throw Error("standardize_columns: empty matrix");
    StandardizedColumns out;
    out.mean.resize(x.cols);
    out.stdev.resize(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) m += x(i, j);
        m /= double(x.rows);
        double v = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) v += (x(i, j) - m) * (x(i, j) - m);
        const double s = std::sqrt(v / double(x.rows));
        out.mean[j] = m;
        out.stdev[j] = s;
        if (s > 0.0) out.kept.push_back(j);
    }
    if (out.kept.empty()) throw Error("standardize_columns: all columns constant");
    out.x = Matrix(x.rows, out.kept.size());
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < out.kept.size(); ++j)
            out.x(i, j) = (x(i, out.kept[j]) - out.mean[out.kept[j]]) / out.stdev[out.kept[j]];
    return out;
}

namespace {

double soft_threshold(double v, double t) {
    if (v > t) return v - t;
    if (v < -t) return v + t;
    return 0.0;
}

double lasso_objective(const Matrix& x, const std::vector<double>& y,
                       const std::vector<double>& beta, double intercept, double lambda) {
    const double n = double(x.rows);
    double sse = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        double pred = intercept;
        const double* r = x.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) pred += r[j] * beta[j];
        sse += (y[i] - pred) * (y[i] - pred);
    }
    double l1 = 0.0;
    for (double b : beta) l1 += std::fabs(b);
    return sse / (2.0 * n) + lambda * l1;
}

}  // namespace

LassoModel fit_lasso(const Matrix& x, const std::vector<double>& y, double lambda_reg,
                     double tol, std::size_t max_sweeps,
                     std::vector<double>* objective_trace) {
    if (x.rows == 0 || x.cols == 0) throw Error("fit_lasso: empty design matrix");
    if (x.rows != y.size()) throw Error("fit_lasso: X/y size mismatch");
    if (!all_finite(x) || !all_finite(y)) throw Error("fit_lasso: non-finite entries");
    if (lambda_reg < 0.0) throw Error("fit_lasso: lambda must be >= 0");

    const std::size_t n = x.rows, p = x.cols;
    LassoModel model;
    model.coef.assign(p, 0.0);
    double ymean = 0.0;
    for (double v : y) ymean += v;
    model.intercept = ymean / double(n);

    std::vector<double> residual(n);
    for (std::size_t i = 0; i < n; ++i) residual[i] = y[i] - model.intercept;

    std::vector<double> col_sq(p, 0.0);  // (x_j . x_j) / n
    for (std::size_t j = 0; j < p; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += x(i, j) * x(i, j);
        col_sq[j] = acc / double(n);
        if (col_sq[j] == 0.0) throw Error("fit_lasso: column " + std::to_string(j) +
                                          " is zero; standardize and drop constants first");
    }

    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_change = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            const double old = model.coef[j];
            double rho = 0.0;
            for (std::size_t i = 0; i < n; ++i) rho += x(i, j) * residual[i];
            rho = rho / double(n) + col_sq[j] * old;
            const double next = soft_threshold(rho, lambda_reg) / col_sq[j];
            if (next != old) {
                const double delta = next - old;
                for (std::size_t i = 0; i < n; ++i) residual[i] -= delta * x(i, j);
                model.coef[j] = next;
            }
            max_change = std::max(max_change, std::fabs(next - old));
        }
        if (objective_trace)
            objective_trace->push_back(
                lasso_objective(x, y, model.coef, model.intercept, lambda_reg));
        if (max_change < tol) return model;
    }
    return model;
}

double predict_threshold(const LassoModel& model, const std::vector<double>& features) {
    if (features.size() != model.coef.size())
        throw Error("predict_threshold: feature vector length mismatch");
    double pred = model.intercept;
    for (std::size_t j = 0; j < features.size(); ++j) pred += model.coef[j] * features[j];
    return std::clamp(pred, 0.01, 0.99);
}

const std::vector<ReferenceThreshold>& reference_thresholds() {
    static const std::vector<ReferenceThreshold> table = {
        {"alexnet", "flowers102", 0.910},
        {"resnet18", "birds200", 0.480},
        {"vgg16", "cifar10", 0.878},
        {"resnet18", "cifar10", 0.878},
    };
    return table;
}

std::vector<EpochMetrics> read_metrics_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError(path + ": cannot open");
    std::string line;
    std::vector<EpochMetrics> rows;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("epoch,", 0) == 0) continue;  // header
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 8)
            throw IoError(path + ": row " + std::to_string(lineno) + " has " +
                          std::to_string(cells.size()) + " columns, expected 8");
        try {
            EpochMetrics m;
            m.epoch = std::stoul(cells[0]);
            m.train_loss = std::stod(cells[1]);
            m.penalty_value = std::stod(cells[2]);
            m.rho = std::stod(cells[3]);
            m.val_accuracy = std::stod(cells[4]);
            m.kappa = std::stod(cells[5]);
            m.alive_neurons = std::stoul(cells[6]);
            m.prune_event = cells[7] == "1";
            rows.push_back(m);
        } catch (const std::exception&) {
            throw IoError(path + ": row " + std::to_string(lineno) + " is malformed");
        }
    }
    if (rows.empty()) throw IoError(path + ": no metric rows");
    return rows;
}

std::vector<CurvePoint> metrics_to_curve(const std::vector<EpochMetrics>& rows) {
    std::map<double, double> last_at;  // kappa -> accuracy of the latest epoch
    for (const auto& r : rows)
        if (std::isfinite(r.val_accuracy)) last_at[r.kappa] = r.val_accuracy;
    std::vector<CurvePoint> curve;
    for (const auto& [k, a] : last_at) curve.push_back({k, a});
    return curve;
}

HybridCurve hybrid_curve(const std::vector<CurvePoint>& primary,
                         const std::vector<CurvePoint>& baseline, double threshold) {
    HybridCurve out;
    for (const auto& p : baseline)
        if (p.kappa > threshold) {
            out.points.push_back(p);
            out.source.push_back("baseline");
        }
    for (const auto& p : primary)
        if (p.kappa <= threshold) {
            out.points.push_back(p);
            out.source.push_back("primary");
        }
    std::vector<std::size_t> order(out.points.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return out.points[a].kappa < out.points[b].kappa;
    });
    HybridCurve sorted;
    for (std::size_t i : order) {
        sorted.points.push_back(out.points[i]);
        sorted.source.push_back(out.source[i]);
    }
    return sorted;
}

}  // namespace hgnp
