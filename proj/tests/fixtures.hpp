#pragma once

// Shared test fixtures: small network specs, random batches, and
// group-consistent random masks.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "hgnp/network.hpp"

namespace fixtures {

inline hgnp::ModelSpec mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t out) {
    hgnp::ModelSpec spec;
    spec.input = hgnp::TensorShape{in, 1, 1, false};
    std::size_t cur = in;
    for (std::size_t h : hidden) {
        spec.layers.push_back({hgnp::LayerKind::Dense, cur, h});
        spec.layers.push_back({hgnp::LayerKind::Relu});
        cur = h;
    }
    spec.layers.push_back({hgnp::LayerKind::Dense, cur, out});
    return spec;
}

/// conv(3x3 same) -> relu -> conv(3x3 same) -> relu -> residual -> flatten -> dense
inline hgnp::ModelSpec residual_conv(std::size_t in_c, std::size_t channels, std::size_t hw,
                                     std::size_t classes, int group = 1) {
    hgnp::ModelSpec spec;
    spec.input = hgnp::TensorShape{in_c, hw, hw, true};
    hgnp::LayerSpec a{hgnp::LayerKind::Conv2d, in_c, channels, 3, 3, hgnp::Padding::Same};
    a.group_id = group;
    spec.layers.push_back(a);
    spec.layers.push_back({hgnp::LayerKind::Relu});
    hgnp::LayerSpec b{hgnp::LayerKind::Conv2d, channels, channels, 3, 3, hgnp::Padding::Same};
    b.group_id = group;
    spec.layers.push_back(b);
    hgnp::LayerSpec res{hgnp::LayerKind::ResidualAdd};
    res.source_layer = 1;  // the first relu output
    spec.layers.push_back(res);
    spec.layers.push_back({hgnp::LayerKind::Relu});
    spec.layers.push_back({hgnp::LayerKind::Flatten});
    spec.layers.push_back(
        {hgnp::LayerKind::Dense, channels * hw * hw, classes});
    return spec;
}

/// Zero-initialized biases can park a whole layer exactly on the ReLU kink
/// (a dead upstream sample makes s = b = 0), where finite differences of the
/// loss are not a valid oracle. Gradient-check fixtures randomize biases.
inline void randomize_biases(hgnp::MaskedNetwork& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-0.3, 0.3);
    for (auto& layer : net.layers)
        if (layer.parameterized())
            for (double& b : layer.bias) b = dist(rng);
}

/// Smallest |pre-activation| feeding any relu; the FD step must stay well
/// below this for the oracle to see a differentiable function.
inline double kink_distance(const hgnp::MaskedNetwork& net, const hgnp::BatchTrace& trace) {
    double dist = 1e300;
    for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
        if (net.layers[l + 1].spec.kind != hgnp::LayerKind::Relu) continue;
        for (double v : trace.outputs[l].data)
            dist = std::min(dist, std::fabs(v));
    }
    return dist;
}

inline hgnp::Matrix random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    hgnp::Matrix m(rows, cols);
    for (double& x : m.data) x = gauss(rng);
    return m;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dist(0, int(classes) - 1);
    std::vector<int> out(n);
    for (int& x : out) x = dist(rng);
    return out;
}

/// Masks a random subset per maskable layer (keeps >= 1 alive); residual
/// groups receive equal alive counts.
inline void random_mask(hgnp::MaskedNetwork& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int last = net.last_parameterized();
    std::map<int, std::size_t> group_drop;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        hgnp::Layer& layer = net.layers[l];
        if (!layer.parameterized() || int(l) == last) continue;
        const std::size_t n = layer.unit_count();
        std::uniform_int_distribution<std::size_t> howmany(0, n - 1);
        std::size_t drop = howmany(rng);
        const int g = layer.spec.group_id;
        if (g >= 0) {
            if (group_drop.count(g))
                drop = group_drop[g];
            else
                group_drop[g] = drop;
        }
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < drop; ++i) layer.mask[idx[i]] = 0;
    }
}

}  // namespace fixtures
