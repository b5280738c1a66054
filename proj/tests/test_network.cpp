#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "hgnp/network.hpp"
#include "hgnp/util.hpp"
#include "oracles.hpp"

using namespace hgnp;

TEST_CASE("init_network counts neurons and parameters") {
    MaskedNetwork net = init_network(fixtures::mlp(4, {3}, 2), 7);
    CHECK(net.total_neurons() == 5);
    CHECK(net.param_count() == 23);
    CHECK(net.original_param_count == 23);

    MaskedNetwork again = init_network(fixtures::mlp(4, {3}, 2), 7);
    CHECK(net.layers[0].weight.data == again.layers[0].weight.data);
    CHECK(net.layers[2].weight.data == again.layers[2].weight.data);

    CHECK_THROWS_AS(init_network(ModelSpec{TensorShape{4, 1, 1, false}, {}}, 1), Error);
    // incompatible chain
    ModelSpec bad = fixtures::mlp(4, {3}, 2);
    bad.layers[2].fan_in = 5;
    CHECK_THROWS_AS(init_network(bad, 1), Error);
}

TEST_CASE("single dense layer computes y = Wx") {
    ModelSpec spec;
    spec.input = TensorShape{2, 1, 1, false};
    spec.layers.push_back({LayerKind::Dense, 2, 2});
    MaskedNetwork net = init_network(spec, 0);
    net.layers[0].weight = Matrix::identity(2);
    net.layers[0].bias = {0.0, 0.0};

    Matrix x(1, 2);
    x(0, 0) = 1.0;
    x(0, 1) = 2.0;
    BatchTrace t = forward(net, x);
    CHECK(t.outputs.back()(0, 0) == 1.0);
    CHECK(t.outputs.back()(0, 1) == 2.0);
}

TEST_CASE("forward rejects bad input") {
    MaskedNetwork net = init_network(fixtures::mlp(4, {3}, 2), 7);
    CHECK_THROWS_AS(forward(net, Matrix(1, 3)), Error);
    Matrix bad(1, 4);
    bad(0, 2) = std::nan("");
    CHECK_THROWS_AS(forward(net, bad), Error);
}

TEST_CASE("a masked neuron is dead: its outgoing weights do not matter") {
    MaskedNetwork net = init_network(fixtures::mlp(4, {3}, 2), 11);
    Matrix x = fixtures::random_batch(5, 4, 1);
    net.layers[0].mask[1] = 0;
    const Matrix base = forward(net, x).outputs.back();

    net.layers[2].weight(0, 1) += 100.0;  // outgoing weight of the dead neuron
    net.layers[2].weight(1, 1) -= 42.0;
    const Matrix perturbed = forward(net, x).outputs.back();
    CHECK(base.data == perturbed.data);
}

TEST_CASE("all-ones mask equals a hand-computed reference forward") {
    MaskedNetwork net = init_network(fixtures::mlp(3, {4}, 2), 3);
    Matrix x = fixtures::random_batch(2, 3, 9);
    BatchTrace t = forward(net, x);
    for (std::size_t b = 0; b < 2; ++b) {
        std::vector<double> h(4);
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = net.layers[0].bias[j];
            for (std::size_t i = 0; i < 3; ++i) acc += net.layers[0].weight(j, i) * x(b, i);
            h[j] = std::max(0.0, acc);
        }
        for (std::size_t k = 0; k < 2; ++k) {
            double acc = net.layers[2].bias[k];
            for (std::size_t j = 0; j < 4; ++j) acc += net.layers[2].weight(k, j) * h[j];
            CHECK(t.outputs.back()(b, k) == doctest::Approx(acc).epsilon(1e-14));
        }
    }
}

TEST_CASE("loss values") {
    Matrix logits(1, 4);  // uniform logits
    std::vector<int> y{2};
    CHECK(loss(logits, y, LossKind::CrossEntropy) == doctest::Approx(std::log(4.0)));

    // loss decreases monotonically as the true-class margin grows
    double prev = 1e300;
    for (double margin : {1.0, 10.0, 100.0}) {
        Matrix z(1, 3);
        z(0, 1) = margin;
        const double l = loss(z, {1}, LossKind::CrossEntropy);
        CHECK(l < prev);
        prev = l;
    }

    Matrix perfect(2, 3);
    perfect(0, 0) = 1.0;
    perfect(1, 2) = 1.0;
    CHECK(loss(perfect, {0, 2}, LossKind::Mse) == 0.0);

    CHECK_THROWS_AS(loss(Matrix(0, 3), {}, LossKind::Mse), Error);
    CHECK_THROWS_AS(loss(perfect, {0, 5}, LossKind::Mse), Error);
}

TEST_CASE("MSE gradient matches the closed form on one sample") {
    ModelSpec spec;
    spec.input = TensorShape{2, 1, 1, false};
    spec.layers.push_back({LayerKind::Dense, 2, 1});
    MaskedNetwork net = init_network(spec, 5);
    Matrix x(1, 2);
    x(0, 0) = 0.7;
    x(0, 1) = -1.2;
    BatchTrace t = forward(net, x);
    backward(net, t, {0}, LossKind::Mse);
    const double yhat = t.outputs.back()(0, 0);
    // d/dw of (yhat - 1)^2 = 2 (yhat - 1) x
    CHECK(t.param_grads[0].weight(0, 0) ==
          doctest::Approx(2.0 * (yhat - 1.0) * 0.7).epsilon(1e-12));
    CHECK(t.param_grads[0].weight(0, 1) ==
          doctest::Approx(2.0 * (yhat - 1.0) * -1.2).epsilon(1e-12));
    CHECK(t.param_grads[0].bias[0] == doctest::Approx(2.0 * (yhat - 1.0)).epsilon(1e-12));
}

TEST_CASE("uniform logits give softmax-minus-onehot gradient") {
    ModelSpec spec;
    spec.input = TensorShape{3, 1, 1, false};
    spec.layers.push_back({LayerKind::Dense, 3, 4});
    MaskedNetwork net = init_network(spec, 5);
    for (double& w : net.layers[0].weight.data) w = 0.0;  // logits all zero
    Matrix x = fixtures::random_batch(1, 3, 2);
    BatchTrace t = forward(net, x);
    backward(net, t, {1}, LossKind::CrossEntropy);
    const Matrix& g = t.grad_output.back();
    for (std::size_t k = 0; k < 4; ++k) {
        const double expected = 0.25 - (k == 1 ? 1.0 : 0.0);
        CHECK(g(0, k) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("gradients match finite differences on mixed tiny networks") {
    struct Case {
        ModelSpec spec;
        LossKind kind;
        std::uint64_t seed;
    };
    std::vector<Case> cases = {
        {fixtures::mlp(4, {5}, 3), LossKind::CrossEntropy, 100},
        {fixtures::mlp(3, {4, 4}, 2), LossKind::Mse, 101},
        {fixtures::residual_conv(2, 3, 4, 2), LossKind::CrossEntropy, 102},
    };
    // pooled conv net
    {
        ModelSpec spec;
        spec.input = TensorShape{1, 4, 4, true};
        LayerSpec conv{LayerKind::Conv2d, 1, 2, 3, 3, Padding::Same};
        conv.fused_pool = true;
        spec.layers.push_back(conv);
        spec.layers.push_back({LayerKind::Relu});
        spec.layers.push_back({LayerKind::Flatten});
        spec.layers.push_back({LayerKind::Dense, 2 * 2 * 2, 2});
        cases.push_back({spec, LossKind::CrossEntropy, 103});
    }

    for (const auto& c : cases) {
        MaskedNetwork net = init_network(c.spec, c.seed);
        fixtures::randomize_biases(net, c.seed + 7);
        Matrix x = fixtures::random_batch(3, net.input_shape.flat(), c.seed + 1);
        auto labels =
            fixtures::random_labels(3, net.layers.back().spec.fan_out, c.seed + 2);

        BatchTrace t = forward(net, x);
        REQUIRE(fixtures::kink_distance(net, t) > 2e-4);  // 20x the FD step
        backward(net, t, labels, c.kind);
        const std::vector<double> grad = flatten_grads(net, t.param_grads);

        MaskedNetwork probe = net;
        auto loss_at = [&](const std::vector<double>& w) {
            set_parameters(probe, w);
            return loss(forward(probe, x).outputs.back(), labels, c.kind);
        };
        const std::vector<double> fd =
            oracles::fd_gradient(loss_at, get_parameters(net), 1e-5);

        double scale = 1e-8;
        for (double g : fd) scale = std::max(scale, std::fabs(g));
        double worst = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i)
            worst = std::max(worst, std::fabs(grad[i] - fd[i]));
        CHECK(worst / scale <= 1e-5);
    }
}

TEST_CASE("masked neurons receive zero gradient") {
    MaskedNetwork net = init_network(fixtures::mlp(4, {4, 3}, 2), 17);
    net.layers[0].mask[2] = 0;
    net.layers[2].mask[0] = 0;
    Matrix x = fixtures::random_batch(4, 4, 3);
    BatchTrace t = forward(net, x);
    backward(net, t, fixtures::random_labels(4, 2, 5), LossKind::CrossEntropy);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(t.param_grads[0].weight(2, i) == 0.0);
    CHECK(t.param_grads[0].bias[2] == 0.0);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(t.param_grads[2].weight(0, i) == 0.0);
    CHECK(t.param_grads[2].bias[0] == 0.0);
}

TEST_CASE("identical seeds give bit-identical traces") {
    MaskedNetwork a = init_network(fixtures::mlp(6, {8, 5}, 3), 123);
    MaskedNetwork b = init_network(fixtures::mlp(6, {8, 5}, 3), 123);
    Matrix x = fixtures::random_batch(4, 6, 9);
    auto y = fixtures::random_labels(4, 3, 10);
    BatchTrace ta = forward(a, x), tb = forward(b, x);
    backward(a, ta, y, LossKind::CrossEntropy);
    backward(b, tb, y, LossKind::CrossEntropy);
    CHECK(ta.outputs.back().data == tb.outputs.back().data);
    CHECK(ta.param_grads[0].weight.data == tb.param_grads[0].weight.data);
}

TEST_CASE("compact on an unmasked network is a structural copy") {
    MaskedNetwork net = init_network(fixtures::mlp(4, {3}, 2), 7);
    MaskedNetwork c = compact(net);
    CHECK(c.layers.size() == net.layers.size());
    CHECK(c.layers[0].weight.data == net.layers[0].weight.data);
    CHECK(c.layers[2].weight.data == net.layers[2].weight.data);
    CHECK(c.original_param_count == net.original_param_count);
}

TEST_CASE("compact removes a dense neuron and preserves the function") {
    // dense(2->2) + dense(2->1), second hidden neuron masked
    ModelSpec spec;
    spec.input = TensorShape{2, 1, 1, false};
    spec.layers.push_back({LayerKind::Dense, 2, 2});
    spec.layers.push_back({LayerKind::Dense, 2, 1});
    MaskedNetwork net = init_network(spec, 21);
    net.layers[0].mask[1] = 0;
    MaskedNetwork c = compact(net);
    CHECK(c.layers[0].weight.rows == 1);
    CHECK(c.layers[1].weight.cols == 1);
    for (int i = 0; i < 100; ++i) {
        Matrix x = fixtures::random_batch(1, 2, 1000 + std::uint64_t(i));
        const double a = forward(net, x).outputs.back()(0, 0);
        const double b = forward(c, x).outputs.back()(0, 0);
        CHECK(std::fabs(a - b) <= 1e-12);
    }
}

TEST_CASE("compact shrinks the successor's input channels") {
    ModelSpec spec;
    spec.input = TensorShape{1, 5, 5, true};
    spec.layers.push_back({LayerKind::Conv2d, 1, 3, 3, 3, Padding::Same});
    spec.layers.push_back({LayerKind::Relu});
    spec.layers.push_back({LayerKind::Conv2d, 3, 2, 3, 3, Padding::Valid});
    spec.layers.push_back({LayerKind::Flatten});
    spec.layers.push_back({LayerKind::Dense, 2 * 3 * 3, 2});
    MaskedNetwork net = init_network(spec, 33);
    net.layers[0].mask[1] = 0;
    MaskedNetwork c = compact(net);
    CHECK(c.layers[0].spec.fan_out == 2);
    CHECK(c.layers[2].spec.fan_in == 2);
    CHECK(c.layers[2].weight.cols == 2 * 3 * 3);

    Matrix x = fixtures::random_batch(2, 25, 8);
    const Matrix a = forward(net, x).outputs.back();
    const Matrix b = forward(c, x).outputs.back();
    for (std::size_t i = 0; i < a.data.size(); ++i)
        CHECK(std::fabs(a.data[i] - b.data[i]) <= 1e-12);
}

TEST_CASE("compact rejects a fully masked layer") {
    MaskedNetwork net = init_network(fixtures::mlp(4, {2}, 2), 7);
    net.layers[0].mask[0] = 0;
    net.layers[0].mask[1] = 0;
    CHECK_THROWS_AS(compact(net), Error);
}

TEST_CASE("mask equivalence holds across random nets, masks and inputs") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        MaskedNetwork net =
            seed % 3 == 2 ? init_network(fixtures::residual_conv(2, 4, 4, 3), seed)
                          : init_network(fixtures::mlp(5, {6, 4}, 3), seed);
        fixtures::random_mask(net, seed + 500);
        MaskedNetwork c = compact(net);
        Matrix x = fixtures::random_batch(3, net.input_shape.flat(), seed + 900);
        const Matrix a = forward(net, x).outputs.back();
        const Matrix b = forward(c, x).outputs.back();
        REQUIRE(a.data.size() == b.data.size());
        for (std::size_t i = 0; i < a.data.size(); ++i)
            CHECK(std::fabs(a.data[i] - b.data[i]) <= 1e-12);
    }
}

TEST_CASE("residual add requires matching alive counts") {
    MaskedNetwork net = init_network(fixtures::residual_conv(2, 4, 4, 3, /*group=*/-1), 3);
    net.layers[0].mask[0] = 0;  // conv A loses a channel, conv B does not
    Matrix x = fixtures::random_batch(1, net.input_shape.flat(), 4);
    CHECK_THROWS_AS(forward(net, x), Error);
}
