#pragma once

#include <string>
#include <vector>

#include "hgnp/linalg.hpp"
#include "hgnp/trainer.hpp"

namespace hgnp {

struct CurvePoint {
    double kappa = 0.0;     // sparsity level, in (0, 1]
    double accuracy = 0.0;  // in [0, 1]
};

/// Trapezoidal area under the accuracy-vs-sparsity curve; sorts by kappa,
/// rejects duplicate kappa values.
double auc(std::vector<CurvePoint> curve);

/// Lasso fit in standardized feature space: coordinate-descent minimizer of
/// (1/2n)||y - X b - c||^2 + lambda ||b||_1.
struct LassoModel {
    std::vector<double> coef;
    double intercept = 0.0;
};

/// Requires zero-mean, unit-variance columns (see standardize_columns).
/// Convergence: max coefficient change < tol. `objective_trace`, when given,
/// records the objective after each sweep.
LassoModel fit_lasso(const Matrix& x, const std::vector<double>& y, double lambda_reg,
                     double tol = 1e-9, std::size_t max_sweeps = 100000,
                     std::vector<double>* objective_trace = nullptr);

struct StandardizedColumns {
    Matrix x;                        // kept, standardized columns
    std::vector<double> mean;        // per original column
    std::vector<double> stdev;
    std::vector<std::size_t> kept;   // original indices of surviving columns
};

/// Centers and scales each column; constant columns are dropped.
StandardizedColumns standardize_columns(const Matrix& x);

/// Linear prediction clamped to (0.01, 0.99).
double predict_threshold(const LassoModel& model, const std::vector<double>& features);

/// One training run summarized for the switch-threshold regression.
struct ExperimentRecord {
    double train_samples = 0, val_samples = 0, input_dim = 0, class_count = 0;
    double conv_layers = 0, linear_layers = 0, trainable_params = 0;
    double mean_kernel_size = 0, kernel_count = 0;
    double threshold = 0;  // response: sparsity level where method dominance switches

    std::vector<double> features() const {
        return {train_samples, val_samples,     input_dim,        class_count, conv_layers,
                linear_layers, trainable_params, mean_kernel_size, kernel_count};
    }
};

struct ReferenceThreshold {
    std::string model;
    std::string dataset;
    double threshold;
};

/// Published switch thresholds for the architecture/dataset pairs shipped as
/// defaults; used by the report tool when no numeric threshold is given.
const std::vector<ReferenceThreshold>& reference_thresholds();

// metrics.csv post-processing

std::vector<EpochMetrics> read_metrics_csv(const std::string& path);

/// Accuracy-vs-sparsity curve from a metrics series: the last (most trained)
/// accuracy at each distinct sparsity level, ascending in kappa.
std::vector<CurvePoint> metrics_to_curve(const std::vector<EpochMetrics>& rows);

struct HybridCurve {
    std::vector<CurvePoint> points;
    std::vector<std::string> source;  // "baseline" above the threshold, "primary" below
};

/// Splices two curves at a sparsity threshold: the baseline curve is used for
/// kappa > threshold, the primary curve at or below it.
HybridCurve hybrid_curve(const std::vector<CurvePoint>& primary,
                         const std::vector<CurvePoint>& baseline, double threshold);

}  // namespace hgnp
