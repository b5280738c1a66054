#include "hgnp/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "hgnp/util.hpp"

namespace hgnp {

std::size_t Layer::alive_count() const {
    std::size_t n = 0;
    for (auto b : mask) n += b;
    return n;
}

std::size_t Layer::params_per_unit() const { return weight.cols + 1; }

std::size_t MaskedNetwork::total_neurons() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (l.parameterized()) n += l.unit_count();
    return n;
}

std::size_t MaskedNetwork::alive_neurons() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (l.parameterized()) n += l.alive_count();
    return n;
}

std::size_t MaskedNetwork::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (l.parameterized()) n += l.weight.data.size() + l.bias.size();
    return n;
}

std::vector<std::size_t> MaskedNetwork::parameterized_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].parameterized()) out.push_back(i);
    return out;
}

int MaskedNetwork::last_parameterized() const {
    for (int i = int(layers.size()) - 1; i >= 0; --i)
        if (layers[std::size_t(i)].parameterized()) return i;
    return -1;
}

namespace {

struct AliveDesc {
    const std::vector<std::uint8_t>* mask = nullptr;  // null = all alive
    std::size_t channels = 0;
    std::size_t feats_per_channel = 1;
};

AliveDesc output_desc(const MaskedNetwork& net, std::size_t l) {
    const Layer& layer = net.layers[l];
    switch (layer.spec.kind) {
        case LayerKind::Dense:
            return {&layer.mask, layer.spec.fan_out, 1};
        case LayerKind::Conv2d:
            return {&layer.mask, layer.spec.fan_out,
                    layer.out_shape.height * layer.out_shape.width};
        case LayerKind::Flatten: {
            if (l == 0) return {nullptr, net.input_shape.flat(), 1};
            AliveDesc d = output_desc(net, l - 1);
            d.feats_per_channel = layer.in_shape.height * layer.in_shape.width;
            return d;
        }
        case LayerKind::Relu:
        case LayerKind::ResidualAdd: {
            if (l == 0) return {nullptr, net.input_shape.flat(), 1};
            return output_desc(net, l - 1);
        }
    }
    throw Error("output_desc: unreachable");
}

AliveDesc input_desc(const MaskedNetwork& net, std::size_t l) {
    if (l == 0) return {nullptr, net.input_shape.channels,
                        net.input_shape.height * net.input_shape.width};
    return output_desc(net, l - 1);
}

std::vector<std::size_t> alive_channels(const AliveDesc& d) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < d.channels; ++c)
        if (!d.mask || (*d.mask)[c]) out.push_back(c);
    return out;
}

std::size_t conv_pad_top(const LayerSpec& s) {
    return s.padding == Padding::Same ? (s.kernel_h - 1) / 2 : 0;
}
std::size_t conv_pad_left(const LayerSpec& s) {
    return s.padding == Padding::Same ? (s.kernel_w - 1) / 2 : 0;
}

// Shape resolution shared by init and compact. Throws on invalid chains.
void resolve_shapes(const ModelSpec& spec, std::vector<Layer>& layers) {
    if (spec.layers.empty()) throw Error("init_network: empty layer list");
    if (spec.input.flat() == 0) throw Error("init_network: empty input shape");

    layers.clear();
    layers.reserve(spec.layers.size());
    TensorShape cur = spec.input;

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        Layer layer;
        layer.spec = spec.layers[i];
        layer.in_shape = cur;
        const LayerSpec& ls = layer.spec;
        const std::string at = "layer " + std::to_string(i);

        switch (ls.kind) {
            case LayerKind::Dense: {
                if (ls.fan_in != cur.flat())
                    throw Error("init_network: " + at + " dense fan_in " +
                                std::to_string(ls.fan_in) + " != incoming features " +
                                std::to_string(cur.flat()));
                if (ls.fan_out == 0) throw Error("init_network: " + at + " fan_out is 0");
                cur = TensorShape{ls.fan_out, 1, 1, false};
                break;
            }
            case LayerKind::Conv2d: {
                if (!cur.image)
                    throw Error("init_network: " + at + " conv2d needs an image input");
                if (ls.fan_in != cur.channels)
                    throw Error("init_network: " + at + " conv2d fan_in " +
                                std::to_string(ls.fan_in) + " != incoming channels " +
                                std::to_string(cur.channels));
                if (ls.kernel_h == 0 || ls.kernel_w == 0)
                    throw Error("init_network: " + at + " kernel must be >= 1x1");
                std::size_t oh, ow;
                if (ls.padding == Padding::Same) {
                    oh = cur.height;
                    ow = cur.width;
                } else {
                    if (cur.height < ls.kernel_h || cur.width < ls.kernel_w)
                        throw Error("init_network: " + at + " kernel larger than input");
                    oh = cur.height - ls.kernel_h + 1;
                    ow = cur.width - ls.kernel_w + 1;
                }
                layer.pre_pool_h = oh;
                layer.pre_pool_w = ow;
                if (ls.fused_pool) {
                    if (oh < 2 || ow < 2)
                        throw Error("init_network: " + at + " output too small for 2x2 pool");
                    oh /= 2;
                    ow /= 2;
                }
                cur = TensorShape{ls.fan_out, oh, ow, true};
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::Flatten:
                cur = TensorShape{cur.flat(), 1, 1, false};
                break;
            case LayerKind::ResidualAdd: {
                if (ls.source_layer < 0 || std::size_t(ls.source_layer) >= i)
                    throw Error("init_network: " + at +
                                " residual_add must reference an earlier layer");
                const TensorShape& src = layers[std::size_t(ls.source_layer)].out_shape;
                if (!(src == cur))
                    throw Error("init_network: " + at + " residual_add shape mismatch");
                break;
            }
        }
        layer.out_shape = cur;
        layers.push_back(std::move(layer));
    }

    // mask-owner wiring
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Layer& layer = layers[i];
        switch (layer.spec.kind) {
            case LayerKind::Dense:
            case LayerKind::Conv2d:
                layer.mask_owner = int(i);
                break;
            default:
                layer.mask_owner = (i == 0) ? -1 : layers[i - 1].mask_owner;
                break;
        }
    }
}

std::size_t weight_cols(const LayerSpec& s) {
    return s.kind == LayerKind::Conv2d ? s.fan_in * s.kernel_h * s.kernel_w : s.fan_in;
}

void apply_channel_mask(Matrix& m, const std::vector<std::uint8_t>& mask,
                        std::size_t feats_per_channel) {
    for (std::size_t b = 0; b < m.rows; ++b) {
        double* r = m.row(b);
        for (std::size_t c = 0; c < mask.size(); ++c) {
            if (mask[c]) continue;
            double* dst = r + c * feats_per_channel;
            std::fill(dst, dst + feats_per_channel, 0.0);
        }
    }
}

// patches: positions x (in_c*kh*kw), positions row-major over (oy, ox)
void im2col(const double* img, const TensorShape& in, const LayerSpec& s,
            std::size_t oh, std::size_t ow, Matrix& patches) {
    const std::size_t kh = s.kernel_h, kw = s.kernel_w;
    const std::size_t pt = conv_pad_top(s), pl = conv_pad_left(s);
    const std::size_t plane = in.height * in.width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double* prow = patches.row(oy * ow + ox);
            for (std::size_t ic = 0; ic < in.channels; ++ic) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = long(oy + ky) - long(pt);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = long(ox + kx) - long(pl);
                        double v = 0.0;
                        if (iy >= 0 && iy < long(in.height) && ix >= 0 && ix < long(in.width))
                            v = img[ic * plane + std::size_t(iy) * in.width + std::size_t(ix)];
                        prow[(ic * kh + ky) * kw + kx] = v;
                    }
                }
            }
        }
    }
}

void col2im_add(const Matrix& patches, const TensorShape& in, const LayerSpec& s,
                std::size_t oh, std::size_t ow, double* img) {
    const std::size_t kh = s.kernel_h, kw = s.kernel_w;
    const std::size_t pt = conv_pad_top(s), pl = conv_pad_left(s);
    const std::size_t plane = in.height * in.width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* prow = patches.row(oy * ow + ox);
            for (std::size_t ic = 0; ic < in.channels; ++ic) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = long(oy + ky) - long(pt);
                    if (iy < 0 || iy >= long(in.height)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = long(ox + kx) - long(pl);
                        if (ix < 0 || ix >= long(in.width)) continue;
                        img[ic * plane + std::size_t(iy) * in.width + std::size_t(ix)] +=
                            prow[(ic * kh + ky) * kw + kx];
                    }
                }
            }
        }
    }
}

std::vector<int> residual_pairing_impl(const MaskedNetwork& net, std::size_t l) {
    // Maps each channel of the incoming value to the source channel added to
    // it: k-th alive input channel pairs with k-th alive source channel.
    // Dead input channels map to -1.
    const Layer& layer = net.layers[l];
    AliveDesc in_d = input_desc(net, l);
    AliveDesc src_d = output_desc(net, std::size_t(layer.spec.source_layer));
    const auto in_alive = alive_channels(in_d);
    const auto src_alive = alive_channels(src_d);
    if (in_alive.size() != src_alive.size())
        throw Error("residual_add: alive channel count mismatch (" +
                    std::to_string(in_alive.size()) + " vs " +
                    std::to_string(src_alive.size()) + ")");
    std::vector<int> pair(in_d.channels, -1);
    for (std::size_t k = 0; k < in_alive.size(); ++k)
        pair[in_alive[k]] = int(src_alive[k]);
    return pair;
}

}  // namespace

MaskedNetwork init_network(const ModelSpec& spec, std::uint64_t seed) {
    MaskedNetwork net;
    net.input_shape = spec.input;
    resolve_shapes(spec, net.layers);

    std::mt19937_64 rng(seed);
    for (auto& layer : net.layers) {
        if (!layer.parameterized()) continue;
        const std::size_t cols = weight_cols(layer.spec);
        layer.weight = Matrix(layer.spec.fan_out, cols);
        layer.bias.assign(layer.spec.fan_out, 0.0);
        layer.mask.assign(layer.spec.fan_out, 1);
        const double limit = std::sqrt(6.0 / double(cols));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (double& w : layer.weight.data) w = dist(rng);
    }
    net.original_param_count = net.param_count();
    return net;
}

BatchTrace forward(const MaskedNetwork& net, const Matrix& batch) {
    if (batch.cols != net.input_shape.flat())
        throw Error("forward: batch has " + std::to_string(batch.cols) +
                    " features, network expects " + std::to_string(net.input_shape.flat()));
    if (batch.rows == 0) throw Error("forward: empty batch");
    if (!all_finite(batch)) throw Error("forward: non-finite input");

    BatchTrace trace;
    trace.input = batch;
    trace.outputs.resize(net.layers.size());
    trace.pre_pool.resize(net.layers.size());
    trace.pool_argmax.resize(net.layers.size());

    const std::size_t B = batch.rows;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        const Matrix& x = trace.layer_input(l);
        switch (layer.spec.kind) {
            case LayerKind::Dense: {
                Matrix y = matmul_nt(x, layer.weight);
                for (std::size_t b = 0; b < B; ++b) {
                    double* r = y.row(b);
                    for (std::size_t j = 0; j < layer.spec.fan_out; ++j)
                        r[j] = layer.mask[j] ? r[j] + layer.bias[j] : 0.0;
                }
                trace.outputs[l] = std::move(y);
                break;
            }
            case LayerKind::Conv2d: {
                const LayerSpec& s = layer.spec;
                const std::size_t oh = layer.pre_pool_h, ow = layer.pre_pool_w;
                const std::size_t P = oh * ow;
                Matrix y(B, s.fan_out * P);
                Matrix patches(P, weight_cols(s));
                for (std::size_t b = 0; b < B; ++b) {
                    im2col(x.row(b), layer.in_shape, s, oh, ow, patches);
                    Matrix out_pos = matmul_nt(patches, layer.weight);  // P x out_c
                    double* yr = y.row(b);
                    for (std::size_t c = 0; c < s.fan_out; ++c) {
                        if (!layer.mask[c]) continue;  // row already zero
                        for (std::size_t p = 0; p < P; ++p)
                            yr[c * P + p] = out_pos(p, c) + layer.bias[c];
                    }
                }
                if (!s.fused_pool) {
                    trace.outputs[l] = std::move(y);
                } else {
                    const std::size_t ph = layer.out_shape.height, pw = layer.out_shape.width;
                    const std::size_t PP = ph * pw;
                    Matrix pooled(B, s.fan_out * PP);
                    auto& argmax = trace.pool_argmax[l];
                    argmax.assign(B * s.fan_out * PP, 0);
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* yr = y.row(b);
                        double* pr = pooled.row(b);
                        for (std::size_t c = 0; c < s.fan_out; ++c) {
                            for (std::size_t py = 0; py < ph; ++py) {
                                for (std::size_t px = 0; px < pw; ++px) {
                                    std::size_t best = c * P + (2 * py) * ow + 2 * px;
                                    double bv = yr[best];
                                    const std::size_t cand[3] = {
                                        c * P + (2 * py) * ow + 2 * px + 1,
                                        c * P + (2 * py + 1) * ow + 2 * px,
                                        c * P + (2 * py + 1) * ow + 2 * px + 1};
                                    for (std::size_t q : cand) {
                                        if (yr[q] > bv) {
                                            bv = yr[q];
                                            best = q;
                                        }
                                    }
                                    const std::size_t o = c * PP + py * pw + px;
                                    pr[o] = bv;
                                    argmax[b * s.fan_out * PP + o] = std::uint32_t(best);
                                }
                            }
                        }
                    }
                    trace.pre_pool[l] = std::move(y);
                    trace.outputs[l] = std::move(pooled);
                }
                break;
            }
            case LayerKind::Relu: {
                Matrix y = x;
                for (double& v : y.data) v = v > 0.0 ? v : 0.0;
                trace.outputs[l] = std::move(y);
                break;
            }
            case LayerKind::Flatten:
                trace.outputs[l] = x;
                break;
            case LayerKind::ResidualAdd: {
                const auto pair = residual_pairing_impl(net, l);
                const Matrix& src = trace.outputs[std::size_t(layer.spec.source_layer)];
                const std::size_t fpc = layer.out_shape.image
                                            ? layer.out_shape.height * layer.out_shape.width
                                            : 1;
                Matrix y = x;
                for (std::size_t b = 0; b < B; ++b) {
                    double* yr = y.row(b);
                    const double* sr = src.row(b);
                    for (std::size_t c = 0; c < pair.size(); ++c) {
                        if (pair[c] < 0) continue;
                        const std::size_t so = std::size_t(pair[c]) * fpc;
                        for (std::size_t f = 0; f < fpc; ++f)
                            yr[c * fpc + f] += sr[so + f];
                    }
                }
                trace.outputs[l] = std::move(y);
                break;
            }
        }
    }
    return trace;
}

double loss(const Matrix& logits, const std::vector<int>& labels, LossKind kind) {
    if (logits.rows == 0) throw Error("loss: empty batch");
    if (logits.rows != labels.size()) throw Error("loss: logits/labels size mismatch");
    const std::size_t B = logits.rows, K = logits.cols;
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] < 0 || std::size_t(labels[b]) >= K)
            throw Error("loss: label " + std::to_string(labels[b]) + " out of range");
        const double* z = logits.row(b);
        if (kind == LossKind::CrossEntropy) {
            double m = z[0];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - m);
            total += m + std::log(sum) - z[std::size_t(labels[b])];
        } else {
            for (std::size_t k = 0; k < K; ++k) {
                const double t = (std::size_t(labels[b]) == k) ? 1.0 : 0.0;
                const double d = z[k] - t;
                total += d * d;
            }
        }
    }
    return total / double(B);
}

namespace {

// Shared reverse walk: callers pre-seed grad_output, this fills param_grads
// and (optionally) the pre-activation gradients.
void reverse_walk(const MaskedNetwork& net, const BatchTrace& trace,
                  std::vector<Matrix>& grad_output, Matrix& grad_input,
                  std::vector<Matrix>* grad_pre, std::vector<LayerGrads>& param_grads) {
    const std::size_t L = net.layers.size();
    const std::size_t B = trace.input.rows;
    (void)B;
    for (std::size_t li = L; li-- > 0;) {
        const Layer& layer = net.layers[li];
        const Matrix& gout = grad_output[li];
        Matrix* below = li == 0 ? &grad_input : &grad_output[li - 1];
        const Matrix& x = trace.layer_input(li);

        switch (layer.spec.kind) {
            case LayerKind::Dense: {
                Matrix gs = gout;
                apply_channel_mask(gs, layer.mask, 1);
                // dW = gs^T x, db = colsum gs, dX = gs W
                LayerGrads& pg = param_grads[li];
                pg.weight = Matrix(layer.weight.rows, layer.weight.cols);
                pg.bias.assign(layer.bias.size(), 0.0);
                for (std::size_t b = 0; b < B; ++b) {
                    const double* gr = gs.row(b);
                    const double* xr = x.row(b);
                    for (std::size_t j = 0; j < layer.weight.rows; ++j) {
                        const double gj = gr[j];
                        if (gj == 0.0) continue;
                        double* wr = pg.weight.row(j);
                        for (std::size_t i = 0; i < layer.weight.cols; ++i)
                            wr[i] += gj * xr[i];
                        pg.bias[j] += gj;
                    }
                }
                Matrix dx = matmul(gs, layer.weight);
                for (std::size_t i = 0; i < below->data.size(); ++i)
                    below->data[i] += dx.data[i];
                if (grad_pre) (*grad_pre)[li] = std::move(gs);
                break;
            }
            case LayerKind::Conv2d: {
                const LayerSpec& s = layer.spec;
                const std::size_t oh = layer.pre_pool_h, ow = layer.pre_pool_w;
                const std::size_t P = oh * ow;
                Matrix gs(B, s.fan_out * P);
                if (s.fused_pool) {
                    const std::size_t PP = layer.out_shape.height * layer.out_shape.width;
                    const auto& argmax = trace.pool_argmax[li];
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* gr = gout.row(b);
                        double* tr = gs.row(b);
                        for (std::size_t o = 0; o < s.fan_out * PP; ++o)
                            tr[argmax[b * s.fan_out * PP + o]] += gr[o];
                    }
                } else {
                    gs = gout;
                }
                apply_channel_mask(gs, layer.mask, P);

                LayerGrads& pg = param_grads[li];
                pg.weight = Matrix(layer.weight.rows, layer.weight.cols);
                pg.bias.assign(layer.bias.size(), 0.0);
                Matrix patches(P, weight_cols(s));
                Matrix dpatch(P, weight_cols(s));
                for (std::size_t b = 0; b < B; ++b) {
                    im2col(x.row(b), layer.in_shape, s, oh, ow, patches);
                    const double* gr = gs.row(b);
                    std::fill(dpatch.data.begin(), dpatch.data.end(), 0.0);
                    for (std::size_t c = 0; c < s.fan_out; ++c) {
                        double gsum = 0.0;
                        double* wr = pg.weight.row(c);
                        const double* kw_ = layer.weight.row(c);
                        for (std::size_t p = 0; p < P; ++p) {
                            const double g = gr[c * P + p];
                            if (g == 0.0) continue;
                            gsum += g;
                            const double* pr = patches.row(p);
                            double* dpr = dpatch.row(p);
                            for (std::size_t k = 0; k < patches.cols; ++k) {
                                wr[k] += g * pr[k];
                                dpr[k] += g * kw_[k];
                            }
                        }
                        pg.bias[c] += gsum;
                    }
                    col2im_add(dpatch, layer.in_shape, s, oh, ow, below->row(b));
                }
                if (grad_pre) (*grad_pre)[li] = std::move(gs);
                break;
            }
            case LayerKind::Relu: {
                const Matrix& y = trace.outputs[li];
                for (std::size_t i = 0; i < y.data.size(); ++i)
                    if (y.data[i] > 0.0) below->data[i] += gout.data[i];
                break;
            }
            case LayerKind::Flatten: {
                for (std::size_t i = 0; i < gout.data.size(); ++i)
                    below->data[i] += gout.data[i];
                break;
            }
            case LayerKind::ResidualAdd: {
                const auto pair = residual_pairing_impl(net, li);
                Matrix& gsrc = grad_output[std::size_t(layer.spec.source_layer)];
                const std::size_t fpc = layer.out_shape.image
                                            ? layer.out_shape.height * layer.out_shape.width
                                            : 1;
                for (std::size_t b = 0; b < B; ++b) {
                    const double* gr = gout.row(b);
                    double* br = below->row(b);
                    double* sr = gsrc.row(b);
                    for (std::size_t c = 0; c < pair.size(); ++c) {
                        for (std::size_t f = 0; f < fpc; ++f) br[c * fpc + f] += gr[c * fpc + f];
                        if (pair[c] < 0) continue;
                        const std::size_t so = std::size_t(pair[c]) * fpc;
                        for (std::size_t f = 0; f < fpc; ++f) sr[so + f] += gr[c * fpc + f];
                    }
                }
                break;
            }
        }
    }
}

}  // namespace

void backward(const MaskedNetwork& net, BatchTrace& trace, const std::vector<int>& labels,
              LossKind kind, const std::vector<OutputSeed>& seeds) {
    if (trace.outputs.empty() || trace.outputs.size() != net.layers.size())
        throw Error("backward: missing forward trace");
    const std::size_t L = net.layers.size();
    const Matrix& logits = trace.outputs[L - 1];
    const std::size_t B = logits.rows, K = logits.cols;

    trace.loss_value = loss(logits, labels, kind);

    trace.grad_output.assign(L, Matrix());
    trace.grad_pre.assign(L, Matrix());
    trace.param_grads.assign(L, LayerGrads{});
    for (std::size_t l = 0; l < L; ++l)
        trace.grad_output[l] = Matrix(B, trace.outputs[l].cols);
    Matrix grad_input(B, trace.input.cols);

    // dLoss/dlogits
    Matrix& gl = trace.grad_output[L - 1];
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = logits.row(b);
        double* g = gl.row(b);
        if (kind == LossKind::CrossEntropy) {
            double m = z[0];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - m);
            for (std::size_t k = 0; k < K; ++k) g[k] = std::exp(z[k] - m) / sum / double(B);
            g[std::size_t(labels[b])] -= 1.0 / double(B);
        } else {
            for (std::size_t k = 0; k < K; ++k) {
                const double t = (std::size_t(labels[b]) == k) ? 1.0 : 0.0;
                g[k] = 2.0 * (z[k] - t) / double(B);
            }
        }
    }

    for (const auto& seed : seeds) {
        Matrix& dst = seed.layer < 0 ? grad_input : trace.grad_output[std::size_t(seed.layer)];
        if (seed.grad.rows != dst.rows || seed.grad.cols != dst.cols)
            throw Error("backward: seed shape mismatch");
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += seed.grad.data[i];
    }

    reverse_walk(net, trace, trace.grad_output, grad_input, &trace.grad_pre, trace.param_grads);
    trace.has_backward = true;
}

std::vector<LayerGrads> reverse_from_seeds(const MaskedNetwork& net, const BatchTrace& trace,
                                           const std::vector<OutputSeed>& seeds) {
    if (trace.outputs.empty() || trace.outputs.size() != net.layers.size())
        throw Error("reverse_from_seeds: missing forward trace");
    const std::size_t L = net.layers.size();
    const std::size_t B = trace.input.rows;

    std::vector<Matrix> grad_output(L);
    for (std::size_t l = 0; l < L; ++l) grad_output[l] = Matrix(B, trace.outputs[l].cols);
    Matrix grad_input(B, trace.input.cols);
    std::vector<LayerGrads> param_grads(L);

    for (const auto& seed : seeds) {
        Matrix& dst = seed.layer < 0 ? grad_input : grad_output[std::size_t(seed.layer)];
        if (seed.grad.rows != dst.rows || seed.grad.cols != dst.cols)
            throw Error("reverse_from_seeds: seed shape mismatch");
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += seed.grad.data[i];
    }
    reverse_walk(net, trace, grad_output, grad_input, nullptr, param_grads);
    return param_grads;
}

std::vector<int> residual_pairing(const MaskedNetwork& net, std::size_t l) {
    return residual_pairing_impl(net, l);
}

void im2col_layer(const Layer& layer, const double* sample, Matrix& patches) {
    im2col(sample, layer.in_shape, layer.spec, layer.pre_pool_h, layer.pre_pool_w, patches);
}

void col2im_layer_add(const Layer& layer, const Matrix& dpatches, double* sample) {
    col2im_add(dpatches, layer.in_shape, layer.spec, layer.pre_pool_h, layer.pre_pool_w, sample);
}

std::vector<std::size_t> alive_units(const Layer& layer) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < layer.mask.size(); ++j)
        if (layer.mask[j]) out.push_back(j);
    return out;
}

std::vector<std::size_t> alive_input_features(const MaskedNetwork& net, std::size_t l) {
    AliveDesc d = input_desc(net, l);
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < d.channels; ++c) {
        if (d.mask && !(*d.mask)[c]) continue;
        for (std::size_t f = 0; f < d.feats_per_channel; ++f)
            out.push_back(c * d.feats_per_channel + f);
    }
    return out;
}

MaskedNetwork compact(const MaskedNetwork& net, CompactMap* map) {
    ModelSpec spec;
    spec.input = net.input_shape;
    if (map) {
        map->kept_out.clear();
        map->kept_in.clear();
    }

    // Weight-column subsets, gathered before dims change.
    std::vector<std::vector<std::size_t>> col_keep(net.layers.size());
    std::vector<std::vector<std::size_t>> row_keep(net.layers.size());

    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        LayerSpec s = layer.spec;
        if (layer.parameterized()) {
            row_keep[l] = alive_units(layer);
            if (row_keep[l].empty())
                throw Error("compact: layer " + std::to_string(l) + " has no alive units");
            if (s.kind == LayerKind::Dense) {
                col_keep[l] = alive_input_features(net, l);
                s.fan_in = col_keep[l].size();
            } else {
                AliveDesc d = input_desc(net, l);
                const auto ch = alive_channels(d);
                const std::size_t kk = s.kernel_h * s.kernel_w;
                for (std::size_t c : ch)
                    for (std::size_t k = 0; k < kk; ++k) col_keep[l].push_back(c * kk + k);
                s.fan_in = ch.size();
            }
            s.fan_out = row_keep[l].size();
        } else if (s.kind == LayerKind::Dense || s.kind == LayerKind::Conv2d) {
            // unreachable
        }
        spec.layers.push_back(s);
    }

    MaskedNetwork out;
    out.input_shape = spec.input;
    resolve_shapes(spec, out.layers);
    out.original_param_count = net.original_param_count;

    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& src = net.layers[l];
        Layer& dst = out.layers[l];
        if (!src.parameterized()) continue;
        dst.weight = Matrix(row_keep[l].size(), col_keep[l].size());
        dst.bias.resize(row_keep[l].size());
        dst.mask.assign(row_keep[l].size(), 1);
        for (std::size_t r = 0; r < row_keep[l].size(); ++r) {
            const double* srow = src.weight.row(row_keep[l][r]);
            double* drow = dst.weight.row(r);
            for (std::size_t c = 0; c < col_keep[l].size(); ++c)
                drow[c] = srow[col_keep[l][c]];
            dst.bias[r] = src.bias[row_keep[l][r]];
        }
        if (map) {
            map->kept_out.push_back(row_keep[l]);
            map->kept_in.push_back(col_keep[l]);
        }
    }
    return out;
}

std::vector<double> get_parameters(const MaskedNetwork& net) {
    std::vector<double> out;
    out.reserve(net.param_count());
    for (const auto& l : net.layers) {
        if (!l.parameterized()) continue;
        out.insert(out.end(), l.weight.data.begin(), l.weight.data.end());
        out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
}

void set_parameters(MaskedNetwork& net, const std::vector<double>& params) {
    std::size_t pos = 0;
    for (auto& l : net.layers) {
        if (!l.parameterized()) continue;
        if (pos + l.weight.data.size() + l.bias.size() > params.size())
            throw Error("set_parameters: vector too short");
        std::copy(params.begin() + long(pos), params.begin() + long(pos + l.weight.data.size()),
                  l.weight.data.begin());
        pos += l.weight.data.size();
        std::copy(params.begin() + long(pos), params.begin() + long(pos + l.bias.size()),
                  l.bias.begin());
        pos += l.bias.size();
    }
    if (pos != params.size()) throw Error("set_parameters: vector size mismatch");
}

std::vector<double> flatten_grads(const MaskedNetwork& net,
                                  const std::vector<LayerGrads>& grads) {
    std::vector<double> out;
    out.reserve(net.param_count());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (!net.layers[l].parameterized()) continue;
        const LayerGrads& g = grads[l];
        out.insert(out.end(), g.weight.data.begin(), g.weight.data.end());
        out.insert(out.end(), g.bias.begin(), g.bias.end());
    }
    return out;
}

}  // namespace hgnp
