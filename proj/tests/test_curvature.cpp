#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "hgnp/curvature.hpp"
#include "hgnp/util.hpp"
#include "oracles.hpp"

using namespace hgnp;

namespace {

// dense(in->out) network with fixed weights for factor arithmetic checks
MaskedNetwork tiny_dense(std::size_t in, std::size_t out, std::uint64_t seed) {
    ModelSpec spec;
    spec.input = TensorShape{in, 1, 1, false};
    spec.layers.push_back({LayerKind::Dense, in, out});
    return init_network(spec, seed);
}

}  // namespace

TEST_CASE("psi of a single sample is the homogeneous outer product") {
    MaskedNetwork net = tiny_dense(2, 2, 1);
    Matrix x(1, 2);
    x(0, 0) = 1.0;
    x(0, 1) = 2.0;
    BatchTrace t = forward(net, x);
    backward(net, t, {0}, LossKind::Mse);
    auto blocks = accumulate_factors(net, t);
    REQUIRE(blocks.size() == 1);
    const Matrix& psi = blocks[0].psi;
    REQUIRE(psi.rows == 3);
    const double expected[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(psi(i, j) == doctest::Approx(expected[i][j]).epsilon(1e-14));
}

TEST_CASE("zero pre-activation gradients give a zero gamma block") {
    MaskedNetwork net = tiny_dense(2, 1, 2);
    net.layers[0].weight(0, 0) = 1.0;
    net.layers[0].weight(0, 1) = 0.0;
    net.layers[0].bias[0] = 0.0;
    Matrix x(1, 2);
    x(0, 0) = 1.0;  // prediction = 1.0, target one-hot class 0 -> perfect fit
    BatchTrace t = forward(net, x);
    backward(net, t, {0}, LossKind::Mse);
    auto blocks = accumulate_factors(net, t);
    CHECK(max_abs(blocks[0].gamma) == 0.0);
    SpectralEstimate est = block_spectrum(blocks);
    CHECK(est.rho <= 1e-6);
}

TEST_CASE("two-sample factors equal the hand-computed mean of outer products") {
    MaskedNetwork net = tiny_dense(2, 2, 3);
    Matrix x(2, 2);
    x(0, 0) = 0.5;
    x(0, 1) = -1.0;
    x(1, 0) = 2.0;
    x(1, 1) = 0.25;
    BatchTrace t = forward(net, x);
    backward(net, t, {0, 1}, LossKind::CrossEntropy);
    auto blocks = accumulate_factors(net, t);

    const double a0[3] = {0.5, -1.0, 1.0};
    const double a1[3] = {2.0, 0.25, 1.0};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(blocks[0].psi(i, j) ==
                  doctest::Approx(0.5 * (a0[i] * a0[j] + a1[i] * a1[j])).epsilon(1e-12));

    // gamma from per-sample gradients (trace holds batch-mean gradients)
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            const double g0i = t.grad_pre[0](0, i) * 2.0, g0j = t.grad_pre[0](0, j) * 2.0;
            const double g1i = t.grad_pre[0](1, i) * 2.0, g1j = t.grad_pre[0](1, j) * 2.0;
            CHECK(blocks[0].gamma(i, j) ==
                  doctest::Approx(0.5 * (g0i * g0j + g1i * g1j)).epsilon(1e-12));
        }
}

TEST_CASE("factors are symmetric and PSD") {
    MaskedNetwork net = init_network(fixtures::mlp(5, {6, 4}, 3), 40);
    Matrix x = fixtures::random_batch(6, 5, 41);
    BatchTrace t = forward(net, x);
    backward(net, t, fixtures::random_labels(6, 3, 42), LossKind::CrossEntropy);
    auto blocks = accumulate_factors(net, t);
    for (const auto& b : blocks) {
        for (std::size_t i = 0; i < b.psi.rows; ++i)
            for (std::size_t j = 0; j < b.psi.cols; ++j)
                CHECK(std::fabs(b.psi(i, j) - b.psi(j, i)) <= 1e-12);
        auto psi_eig = oracles::jacobi_full(b.psi);
        auto gamma_eig = oracles::jacobi_full(b.gamma);
        for (double v : psi_eig.values) CHECK(v >= -1e-8);
        for (double v : gamma_eig.values) CHECK(v >= -1e-8);
    }
}

TEST_CASE("masking removes the right factor rows") {
    MaskedNetwork net = init_network(fixtures::mlp(5, {6, 4}, 3), 44);
    net.layers[0].mask[1] = 0;
    net.layers[0].mask[4] = 0;
    Matrix x = fixtures::random_batch(4, 5, 45);
    BatchTrace t = forward(net, x);
    backward(net, t, fixtures::random_labels(4, 3, 46), LossKind::CrossEntropy);
    auto blocks = accumulate_factors(net, t);
    // layer 0: gamma over 4 alive units; next layer's psi over 4 alive inputs + 1
    CHECK(blocks[0].gamma.rows == 4);
    CHECK(blocks[1].psi.rows == 5);
    CHECK(blocks[0].psi.rows == 6);  // network input is never masked
}

TEST_CASE("diagonal factors compose into the expected block spectrum") {
    MaskedNetwork net = tiny_dense(2, 2, 5);
    Matrix x(1, 2);
    BatchTrace t = forward(net, x);
    backward(net, t, {0}, LossKind::Mse);
    auto blocks = accumulate_factors(net, t);
    blocks[0].psi = Matrix(2, 2);
    blocks[0].psi(0, 0) = 2.0;
    blocks[0].psi(1, 1) = 1.0;
    blocks[0].gamma = Matrix(2, 2);
    blocks[0].gamma(0, 0) = 3.0;
    blocks[0].gamma(1, 1) = 1.0;
    SpectralEstimate est = block_spectrum(blocks, 1e-10, 1000, 0.0);
    CHECK(est.rho == doctest::Approx(6.0).epsilon(1e-10));
    REQUIRE(est.v_global.size() == 4);
    CHECK(est.v_global[0] == doctest::Approx(1.0));
    for (std::size_t i = 1; i < 4; ++i) CHECK(std::fabs(est.v_global[i]) < 1e-8);
}

TEST_CASE("argmax block wins and ties break to the lowest layer") {
    MaskedNetwork net = init_network(fixtures::mlp(3, {3}, 2), 6);
    Matrix x = fixtures::random_batch(2, 3, 7);
    BatchTrace t = forward(net, x);
    backward(net, t, {0, 1}, LossKind::CrossEntropy);
    auto blocks = accumulate_factors(net, t);
    REQUIRE(blocks.size() == 2);
    blocks[0].psi = Matrix::identity(2);
    blocks[0].gamma = Matrix::identity(2);
    for (std::size_t i = 0; i < 2; ++i) {
        blocks[0].psi(i, i) = 3.0;    // lambda = 6
        blocks[0].gamma(i, i) = 2.0;
        blocks[1].psi(i, i) = 2.0;    // lambda = 4
        blocks[1].gamma(i, i) = 2.0;
    }
    blocks[1].psi = Matrix(2, 2);
    blocks[1].gamma = Matrix(2, 2);
    blocks[1].psi(0, 0) = blocks[1].psi(1, 1) = 2.0;
    blocks[1].gamma(0, 0) = blocks[1].gamma(1, 1) = 2.0;
    blocks[1].in_index = {0, 1};
    blocks[1].out_index = {0, 1};
    blocks[0].in_index = {0, 1};
    blocks[0].out_index = {0, 1};
    SpectralEstimate est = block_spectrum(blocks, 1e-10, 1000, 0.0);
    CHECK(est.rho == doctest::Approx(6.0));
    CHECK(est.argmax_layer == 0);

    // exact tie: both blocks now have lambda 6
    blocks[1].psi(0, 0) = blocks[1].psi(1, 1) = 3.0;
    SpectralEstimate tie = block_spectrum(blocks, 1e-10, 1000, 0.0);
    CHECK(tie.argmax_layer == 0);
}

TEST_CASE("random factors match a densely materialized kronecker product") {
    for (std::uint64_t seed = 60; seed < 64; ++seed) {
        MaskedNetwork net = tiny_dense(2, 4, seed);  // psi dim 3, gamma dim 4
        Matrix x = fixtures::random_batch(5, 2, seed + 1);
        BatchTrace t = forward(net, x);
        backward(net, t, fixtures::random_labels(5, 4, seed + 2), LossKind::CrossEntropy);
        auto blocks = accumulate_factors(net, t);
        SpectralEstimate est = block_spectrum(blocks, 1e-12, 2000, 0.0);

        Matrix dense = oracles::dense_kron(blocks[0].psi, blocks[0].gamma);
        auto full = oracles::jacobi_full(dense);
        CHECK(std::fabs(est.rho - std::fabs(full.values[0])) <=
              1e-8 * std::max(1.0, std::fabs(full.values[0])));
        // composed vector is a top eigenvector of the dense product
        auto kv = mat_vec(dense, est.v_global);
        double resid = 0.0;
        for (std::size_t i = 0; i < kv.size(); ++i) {
            const double r = kv[i] - blocks[0].eig_block.value * est.v_global[i];
            resid += r * r;
        }
        CHECK(std::sqrt(resid) <= 1e-6 * std::max(1.0, est.rho));
    }
}

TEST_CASE("hinge penalty") {
    CHECK(hinge_penalty(0.4, 0.5) == 0.0);
    CHECK(hinge_penalty(1.5, 0.5) == doctest::Approx(1.0));
    CHECK(hinge_penalty(0.5, 0.5) == 0.0);  // inactive at the boundary
    CHECK_THROWS_AS(hinge_penalty(1.0, -0.1), Error);
}

TEST_CASE("second directional gradient recovers an analytic third derivative") {
    // C(w) = w^4 / 12: H = w^2, v = [1], d/dw (v^T H v) = 2w
    auto grad = [](const std::vector<double>& w) {
        return std::vector<double>{w[0] * w[0] * w[0] / 3.0};
    };
    const double eps = std::pow(2.2e-16, 0.25);
    auto g = second_directional_gradient(grad, {1.0}, {1.0}, eps);
    CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("penalty gradient vanishes on a quadratic loss") {
    // single dense layer + MSE: the loss is quadratic in the weights
    MaskedNetwork net = tiny_dense(3, 2, 70);
    Matrix x = fixtures::random_batch(4, 3, 71);
    auto y = fixtures::random_labels(4, 2, 72);
    BatchTrace t = forward(net, x);
    backward(net, t, y, LossKind::Mse);
    auto blocks = accumulate_factors(net, t);
    SpectralEstimate est = block_spectrum(blocks);
    auto pg = penalty_gradient(net, t, LossKind::Mse, est);
    double norm = 0.0;
    for (const auto& g : pg) {
        for (double v : g.weight.data) norm += v * v;
        for (double v : g.bias) norm += v * v;
    }
    CHECK(std::sqrt(norm) <= 1e-6);
}

TEST_CASE("penalty gradient matches the dense finite-difference Hessian oracle") {
    for (std::uint64_t seed = 80; seed < 83; ++seed) {
        MaskedNetwork net = init_network(fixtures::mlp(3, {4}, 2), seed);  // 26 params
        Matrix x = fixtures::random_batch(4, 3, seed + 1);
        auto y = fixtures::random_labels(4, 2, seed + 2);

        BatchTrace t = forward(net, x);
        backward(net, t, y, LossKind::CrossEntropy);
        auto blocks = accumulate_factors(net, t);
        SpectralEstimate est = block_spectrum(blocks);

        auto impl = penalty_gradient(net, t, LossKind::CrossEntropy, est);
        const std::vector<double> impl_flat = flatten_grads(net, impl);

        // embed v into flat parameter space via a unit perturbation probe
        std::vector<double> v_flat(impl_flat.size(), 0.0);
        {
            // direction = d(params)/d(offset) of the embedded eigenvector
            MaskedNetwork probe = net;
            const std::vector<double> base = get_parameters(probe);
            const std::size_t nin = est.in_index.size(), nout = est.out_index.size();
            Layer& layer = probe.layers[est.stack_index];
            for (std::size_t i = 0; i <= nin; ++i)
                for (std::size_t j = 0; j < nout; ++j) {
                    const double val = est.v_global[i * nout + j];
                    if (i < nin)
                        layer.weight(est.out_index[j], est.in_index[i]) += val;
                    else
                        layer.bias[est.out_index[j]] += val;
                }
            const std::vector<double> shifted = get_parameters(probe);
            for (std::size_t i = 0; i < v_flat.size(); ++i) v_flat[i] = shifted[i] - base[i];
        }

        MaskedNetwork scratch = net;
        auto loss_at = [&](const std::vector<double>& w) {
            set_parameters(scratch, w);
            return loss(forward(scratch, x).outputs.back(), y, LossKind::CrossEntropy);
        };
        const std::vector<double> at = get_parameters(net);
        auto phi = [&](const std::vector<double>& w) {
            Matrix h = oracles::fd_hessian(loss_at, w, 1e-4);
            return oracles::naive_quadratic_form(h, v_flat);
        };
        const std::vector<double> oracle = oracles::fd_gradient(phi, at, 1e-3);

        double scale = 0.0, worst = 0.0;
        for (std::size_t i = 0; i < oracle.size(); ++i) {
            scale = std::max(scale, std::fabs(oracle[i]));
            worst = std::max(worst, std::fabs(oracle[i] - impl_flat[i]));
        }
        REQUIRE(scale > 1e-4);  // fixture must exercise a nonzero third derivative
        CHECK(worst / scale <= 1e-3);
    }
}

TEST_CASE("penalized loss adds the hinge to the data loss") {
    MaskedNetwork net = init_network(fixtures::mlp(3, {4}, 2), 90);
    Matrix x = fixtures::random_batch(4, 3, 91);
    auto y = fixtures::random_labels(4, 2, 92);
    BatchTrace t = forward(net, x);
    backward(net, t, y, LossKind::CrossEntropy);
    auto blocks = accumulate_factors(net, t);
    SpectralEstimate est = block_spectrum(blocks);

    const double c = t.loss_value;
    const double with_penalty = penalized_loss(net, x, y, LossKind::CrossEntropy, 0.01, 0.0);
    CHECK(with_penalty == doctest::Approx(c + 0.01 * est.rho).epsilon(1e-10));
    const double inactive = penalized_loss(net, x, y, LossKind::CrossEntropy, 0.01, 1e9);
    CHECK(inactive == doctest::Approx(c).epsilon(1e-12));
}

TEST_CASE("hinge activation seed matches finite differences of the frozen psi path") {
    MaskedNetwork net = init_network(fixtures::mlp(3, {4, 3}, 2), 110);
    Matrix x = fixtures::random_batch(3, 3, 111);
    auto y = fixtures::random_labels(3, 2, 112);
    BatchTrace t = forward(net, x);
    backward(net, t, y, LossKind::CrossEntropy);
    auto blocks = accumulate_factors(net, t);
    SpectralEstimate est = block_spectrum(blocks);
    REQUIRE(est.stack_index > 0);  // seed attaches to the feeding layer
    const double mu = 0.01;
    auto seed = hinge_activation_seed(net, t, est, mu);
    REQUIRE(seed.has_value());
    CHECK(seed->layer == int(est.stack_index) - 1);

    // frozen-path value: mu * lambda_gamma * v_psi' Psi(a) v_psi where a is
    // the activation feeding the argmax layer
    const Matrix& a0 = t.outputs[std::size_t(seed->layer)];
    auto frozen = [&](const Matrix& a) {
        const std::size_t nin = est.in_index.size();
        double lam = 0.0;
        for (std::size_t b = 0; b < a.rows; ++b) {
            double dotv = est.v_psi[nin];
            for (std::size_t i = 0; i < nin; ++i)
                dotv += est.v_psi[i] * a(b, est.in_index[i]);
            lam += dotv * dotv / double(a.rows);
        }
        return mu * est.lambda_gamma * lam;
    };
    const double h = 1e-6;
    for (std::size_t b = 0; b < a0.rows; ++b) {
        for (std::size_t f = 0; f < a0.cols; ++f) {
            Matrix ap = a0, am = a0;
            ap(b, f) += h;
            am(b, f) -= h;
            const double fd = (frozen(ap) - frozen(am)) / (2.0 * h);
            CHECK(seed->grad(b, f) == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}
