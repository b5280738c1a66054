#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "hgnp/network.hpp"

namespace hgnp {

/// Kronecker factor pair of one layer's curvature block.
///
/// psi is the second moment of the layer's input activations over alive
/// coordinates, with a trailing homogeneous coordinate absorbing the bias;
/// gamma the second moment of per-sample pre-activation gradients over alive
/// units. For conv layers psi averages im2col patches over batch and spatial
/// positions while gamma sums per-position gradient vectors over positions.
struct KfacBlock {
    std::size_t layer = 0;        // ordinal among parameterized layers
    std::size_t stack_index = 0;  // position in the layer stack
    Matrix psi;
    Matrix gamma;
    EigenPair eig_psi, eig_gamma, eig_block;
    std::size_t sample_count = 0;
    std::vector<std::size_t> in_index;   // weight-column indices behind psi (minus homog.)
    std::vector<std::size_t> out_index;  // unit indices behind gamma
};

struct SpectralEstimate {
    double rho = 0.0;
    std::size_t argmax_layer = 0;   // block ordinal
    std::size_t stack_index = 0;
    double lambda_psi = 0.0;
    double lambda_gamma = 0.0;
    std::vector<double> v_psi;
    std::vector<double> v_gamma;
    std::vector<double> v_global;   // kron(v_psi, v_gamma); unit norm
    std::vector<std::size_t> in_index;
    std::vector<std::size_t> out_index;
};

/// One curvature block per parameterized layer; expectations are batch means
/// of per-sample quantities. Requires a completed backward trace. A fully
/// masked layer is an error unless `skip_empty` drops its block instead.
std::vector<KfacBlock> accumulate_factors(const MaskedNetwork& net, const BatchTrace& trace,
                                          bool skip_empty = false);

/// Fills every block's eigenpairs and selects the block of largest
/// |eigenvalue| (ties to the lowest layer). A ridge of `damping` is added to
/// both factors before eigensolving.
SpectralEstimate block_spectrum(std::vector<KfacBlock>& blocks, double tol = 1e-10,
                                std::size_t max_iter = 10000, double damping = 1e-8);

/// max(0, rho - bound).
double hinge_penalty(double rho, double bound);

/// Gradient of w -> v^T H(w) v with v held fixed, via the second-order
/// central difference of the gradient along v:
///   [grad(w + eps v) - 2 grad(w) + grad(w - eps v)] / eps^2.
std::vector<double> second_directional_gradient(
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    const std::vector<double>& at, const std::vector<double>& direction, double eps);

/// Parameter gradient of v^T H v for the data loss on one batch, with v (from
/// the spectral estimate) held fixed. Caller checks the hinge is active.
///
/// v lives on a single layer's parameter block, so on piecewise-linear
/// networks v^T H v reduces exactly to the Gauss-Newton form
/// (J_l v)^T H_z (J_l v); this computes its gradient analytically via a
/// tangent forward pass and two reverse passes, which keeps the result exact
/// inside the current activation region. (A central-difference scheme is
/// unusable here: any ReLU crossing inside the step makes the gradient jump,
/// and the second difference amplifies the jump by 1/eps^2.)
std::vector<LayerGrads> penalty_gradient(const MaskedNetwork& net, const BatchTrace& trace,
                                         LossKind kind, const SpectralEstimate& est);

/// Activation-gradient seed of the hinge term: differentiates the argmax
/// block's psi eigenvalue through its explicit dependence on the activations
/// feeding that layer (eigenvectors and gamma held fixed). Returns nothing
/// when the argmax layer is fed by the network input.
std::optional<OutputSeed> hinge_activation_seed(const MaskedNetwork& net,
                                                const BatchTrace& trace,
                                                const SpectralEstimate& est, double mu);

/// C + mu * max(0, rho - bound) on one batch under the current mask.
double penalized_loss(const MaskedNetwork& net, const Matrix& batch,
                      const std::vector<int>& labels, LossKind kind, double mu, double bound,
                      double eig_tol = 1e-10, std::size_t eig_max_iter = 10000);

}  // namespace hgnp
