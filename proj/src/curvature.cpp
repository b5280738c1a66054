#include "hgnp/curvature.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hgnp/util.hpp"

namespace hgnp {

namespace {

void zero_dead_channels(Matrix& m, const std::vector<std::uint8_t>& mask,
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

void rank1_update(Matrix& m, const std::vector<double>& v, double scale) {
    const std::size_t n = v.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double vi = v[i] * scale;
        if (vi == 0.0) continue;
        double* r = m.row(i);
        for (std::size_t j = 0; j < n; ++j) r[j] += vi * v[j];
    }
}

}  // namespace

std::vector<KfacBlock> accumulate_factors(const MaskedNetwork& net, const BatchTrace& trace,
                                          bool skip_empty) {
    if (!trace.has_backward) throw Error("accumulate_factors: backward trace required");
    const std::size_t B = trace.input.rows;
    if (B == 0) throw Error("accumulate_factors: empty batch");

    std::vector<KfacBlock> blocks;
    std::size_t ordinal = 0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        if (!layer.parameterized()) continue;

        KfacBlock blk;
        blk.layer = ordinal++;
        blk.stack_index = l;
        blk.sample_count = B;
        blk.out_index = alive_units(layer);
        if (blk.out_index.empty()) {
            if (skip_empty) continue;
            throw Error("accumulate_factors: layer " + std::to_string(l) +
                        " has no alive units");
        }

        const Matrix& x = trace.layer_input(l);
        const Matrix& gs = trace.grad_pre[l];
        const std::size_t nout = blk.out_index.size();
        blk.gamma = Matrix(nout, nout);
        std::vector<double> gv(nout);

        if (layer.spec.kind == LayerKind::Dense) {
            blk.in_index = alive_input_features(net, l);
            const std::size_t nin = blk.in_index.size();
            blk.psi = Matrix(nin + 1, nin + 1);
            std::vector<double> av(nin + 1);
            for (std::size_t b = 0; b < B; ++b) {
                const double* xr = x.row(b);
                for (std::size_t i = 0; i < nin; ++i) av[i] = xr[blk.in_index[i]];
                av[nin] = 1.0;
                rank1_update(blk.psi, av, 1.0 / double(B));

                const double* gr = gs.row(b);
                // per-sample gradient: the trace holds gradients of the
                // batch-mean loss, so scale by B
                for (std::size_t j = 0; j < nout; ++j)
                    gv[j] = gr[blk.out_index[j]] * double(B);
                rank1_update(blk.gamma, gv, 1.0 / double(B));
            }
        } else {
            const std::size_t kk = layer.spec.kernel_h * layer.spec.kernel_w;
            // alive input channels expand to patch columns
            std::vector<std::size_t> cols;
            {
                std::vector<std::size_t> feats = alive_input_features(net, l);
                // feats are feature indices of the input map; channels are
                // recovered from the map geometry
                const std::size_t plane = layer.in_shape.height * layer.in_shape.width;
                std::vector<std::size_t> chans;
                for (std::size_t f : feats)
                    if (f % plane == 0) chans.push_back(f / plane);
                for (std::size_t c : chans)
                    for (std::size_t k = 0; k < kk; ++k) cols.push_back(c * kk + k);
            }
            blk.in_index = cols;
            const std::size_t nin = cols.size();
            const std::size_t P = layer.pre_pool_h * layer.pre_pool_w;
            blk.psi = Matrix(nin + 1, nin + 1);
            std::vector<double> av(nin + 1);
            Matrix patches(P, layer.weight.cols);
            for (std::size_t b = 0; b < B; ++b) {
                im2col_layer(layer, x.row(b), patches);
                for (std::size_t p = 0; p < P; ++p) {
                    const double* pr = patches.row(p);
                    for (std::size_t i = 0; i < nin; ++i) av[i] = pr[cols[i]];
                    av[nin] = 1.0;
                    rank1_update(blk.psi, av, 1.0 / double(B * P));
                }
                const double* gr = gs.row(b);
                for (std::size_t p = 0; p < P; ++p) {
                    for (std::size_t j = 0; j < nout; ++j)
                        gv[j] = gr[blk.out_index[j] * P + p] * double(B);
                    rank1_update(blk.gamma, gv, 1.0 / double(B));
                }
            }
        }
        blocks.push_back(std::move(blk));
    }
    return blocks;
}

SpectralEstimate block_spectrum(std::vector<KfacBlock>& blocks, double tol,
                                std::size_t max_iter, double damping) {
    if (blocks.empty()) throw Error("block_spectrum: no blocks");
    for (auto& blk : blocks) {
        Matrix psi_d = blk.psi;
        Matrix gamma_d = blk.gamma;
        for (std::size_t i = 0; i < psi_d.rows; ++i) psi_d(i, i) += damping;
        for (std::size_t i = 0; i < gamma_d.rows; ++i) gamma_d(i, i) += damping;
        blk.eig_psi = sym_top_eigenpair(psi_d, tol, max_iter);
        blk.eig_gamma = sym_top_eigenpair(gamma_d, tol, max_iter);
        blk.eig_block.value = blk.eig_psi.value * blk.eig_gamma.value;
        blk.eig_block.vector = kron_vec(blk.eig_psi.vector, blk.eig_gamma.vector);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < blocks.size(); ++i)
        if (std::fabs(blocks[i].eig_block.value) > std::fabs(blocks[best].eig_block.value))
            best = i;

    const KfacBlock& b = blocks[best];
    SpectralEstimate est;
    est.rho = std::fabs(b.eig_block.value);
    est.argmax_layer = b.layer;
    est.stack_index = b.stack_index;
    est.lambda_psi = b.eig_psi.value;
    est.lambda_gamma = b.eig_gamma.value;
    est.v_psi = b.eig_psi.vector;
    est.v_gamma = b.eig_gamma.vector;
    est.v_global = b.eig_block.vector;
    est.in_index = b.in_index;
    est.out_index = b.out_index;
    return est;
}

double hinge_penalty(double rho, double bound) {
    if (bound < 0.0) throw Error("hinge_penalty: bound must be >= 0");
    return std::max(0.0, rho - bound);
}

std::vector<double> second_directional_gradient(
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    const std::vector<double>& at, const std::vector<double>& direction, double eps) {
    if (at.size() != direction.size())
        throw Error("second_directional_gradient: dimension mismatch");
    if (!(eps > 0.0)) throw Error("second_directional_gradient: step underflow");

    std::vector<double> wp(at), wm(at);
    for (std::size_t i = 0; i < at.size(); ++i) {
        wp[i] += eps * direction[i];
        wm[i] -= eps * direction[i];
    }
    const std::vector<double> gp = grad_fn(wp);
    const std::vector<double> g0 = grad_fn(at);
    const std::vector<double> gm = grad_fn(wm);

    std::vector<double> out(at.size());
    for (std::size_t i = 0; i < at.size(); ++i) {
        out[i] = (gp[i] - 2.0 * g0[i] + gm[i]) / (eps * eps);
        if (!std::isfinite(out[i]))
            throw Error("second_directional_gradient: non-finite result");
    }
    return out;
}

namespace {

// Embeds the kron-structured block eigenvector into the argmax layer's
// weight/bias coordinates. Kron index (i, j) pairs psi coordinate i with
// gamma coordinate j; the last psi coordinate is the bias.
void embed_direction(const SpectralEstimate& est, const Layer& layer, Matrix& dw,
                     std::vector<double>& db) {
    dw = Matrix(layer.weight.rows, layer.weight.cols);
    db.assign(layer.bias.size(), 0.0);
    const std::size_t nin = est.in_index.size();
    const std::size_t nout = est.out_index.size();
    for (std::size_t i = 0; i <= nin; ++i) {
        for (std::size_t j = 0; j < nout; ++j) {
            const double v = est.v_global[i * nout + j];
            if (i < nin)
                dw(est.out_index[j], est.in_index[i]) = v;
            else
                db[est.out_index[j]] = v;
        }
    }
}

}  // namespace

std::vector<LayerGrads> penalty_gradient(const MaskedNetwork& net, const BatchTrace& trace,
                                         LossKind kind, const SpectralEstimate& est) {
    if (trace.outputs.empty()) throw Error("penalty_gradient: forward trace required");
    const std::size_t L = net.layers.size();
    const std::size_t B = trace.input.rows;
    const std::size_t inject = est.stack_index;
    const Layer& inj_layer = net.layers[inject];

    Matrix dir_w;
    std::vector<double> dir_b;
    embed_direction(est, inj_layer, dir_w, dir_b);

    // tangent forward pass: t = J_l v, nonzero from the injection layer on
    std::vector<Matrix> tangent(L);
    for (std::size_t l = 0; l < L; ++l) tangent[l] = Matrix(B, trace.outputs[l].cols);

    auto pool_route = [&](const Layer& layer, std::size_t li, const Matrix& pre) {
        const std::size_t PP = layer.out_shape.height * layer.out_shape.width;
        const auto& argmax = trace.pool_argmax[li];
        Matrix out(B, layer.spec.fan_out * PP);
        for (std::size_t b = 0; b < B; ++b) {
            const double* pr = pre.row(b);
            double* orow = out.row(b);
            for (std::size_t o = 0; o < layer.spec.fan_out * PP; ++o)
                orow[o] = pr[argmax[b * layer.spec.fan_out * PP + o]];
        }
        return out;
    };

    for (std::size_t l = inject; l < L; ++l) {
        const Layer& layer = net.layers[l];
        const Matrix& x_primal = trace.layer_input(l);
        const Matrix* t_in = l > 0 ? &tangent[l - 1] : nullptr;
        switch (layer.spec.kind) {
            case LayerKind::Dense: {
                Matrix t;
                if (l == inject) {
                    t = matmul_nt(x_primal, dir_w);
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t j = 0; j < layer.spec.fan_out; ++j)
                            t(b, j) += dir_b[j];
                } else {
                    t = matmul_nt(*t_in, layer.weight);
                }
                zero_dead_channels(t, layer.mask, 1);
                tangent[l] = std::move(t);
                break;
            }
            case LayerKind::Conv2d: {
                const std::size_t P = layer.pre_pool_h * layer.pre_pool_w;
                const Matrix& kernel = l == inject ? dir_w : layer.weight;
                const Matrix& source = l == inject ? x_primal : *t_in;
                Matrix pre(B, layer.spec.fan_out * P);
                Matrix patches(P, layer.weight.cols);
                for (std::size_t b = 0; b < B; ++b) {
                    im2col_layer(layer, source.row(b), patches);
                    Matrix out_pos = matmul_nt(patches, kernel);
                    double* yr = pre.row(b);
                    for (std::size_t c = 0; c < layer.spec.fan_out; ++c) {
                        if (!layer.mask[c]) continue;
                        for (std::size_t p = 0; p < P; ++p) {
                            yr[c * P + p] = out_pos(p, c);
                            if (l == inject) yr[c * P + p] += dir_b[c];
                        }
                    }
                }
                tangent[l] = layer.spec.fused_pool ? pool_route(layer, l, pre) : std::move(pre);
                break;
            }
            case LayerKind::Relu: {
                Matrix t = *t_in;
                const Matrix& y = trace.outputs[l];
                for (std::size_t i = 0; i < t.data.size(); ++i)
                    if (!(y.data[i] > 0.0)) t.data[i] = 0.0;
                tangent[l] = std::move(t);
                break;
            }
            case LayerKind::Flatten:
                tangent[l] = *t_in;
                break;
            case LayerKind::ResidualAdd: {
                Matrix t = *t_in;
                const Matrix& t_src = tangent[std::size_t(layer.spec.source_layer)];
                const auto pair = residual_pairing(net, l);
                const std::size_t fpc = layer.out_shape.image
                                            ? layer.out_shape.height * layer.out_shape.width
                                            : 1;
                for (std::size_t b = 0; b < B; ++b) {
                    double* tr = t.row(b);
                    const double* sr = t_src.row(b);
                    for (std::size_t c2 = 0; c2 < pair.size(); ++c2) {
                        if (pair[c2] < 0) continue;
                        const std::size_t so = std::size_t(pair[c2]) * fpc;
                        for (std::size_t f = 0; f < fpc; ++f) tr[c2 * fpc + f] += sr[so + f];
                    }
                }
                tangent[l] = std::move(t);
                break;
            }
        }
    }

    // curvature of the loss in logit space contracted with the tangent,
    // plus the adjoint seeds for both reverse passes
    const Matrix& logits = trace.outputs[L - 1];
    const Matrix& t_out = tangent[L - 1];
    const std::size_t K = logits.cols;
    Matrix tau(B, K);      // dphi/dt at the output
    Matrix seed_z(B, K);   // dphi/dz through the softmax (cross-entropy only)
    if (kind == LossKind::CrossEntropy) {
        std::vector<double> p(K);
        for (std::size_t b = 0; b < B; ++b) {
            const double* z = logits.row(b);
            double zmax = z[0];
            for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                p[k] = std::exp(z[k] - zmax);
                sum += p[k];
            }
            for (std::size_t k = 0; k < K; ++k) p[k] /= sum;
            const double* tb = t_out.row(b);
            double s1 = 0.0;
            for (std::size_t k = 0; k < K; ++k) s1 += p[k] * tb[k];
            double* taur = tau.row(b);
            for (std::size_t k = 0; k < K; ++k)
                taur[k] = 2.0 / double(B) * (p[k] * tb[k] - s1 * p[k]);
            // dphi/dp_k = (t_k^2 - 2 s1 t_k) / B, pulled back through softmax
            double inner = 0.0;
            std::vector<double> dp(K);
            for (std::size_t k = 0; k < K; ++k) {
                dp[k] = (tb[k] * tb[k] - 2.0 * s1 * tb[k]) / double(B);
                inner += p[k] * dp[k];
            }
            double* sz = seed_z.row(b);
            for (std::size_t k = 0; k < K; ++k) sz[k] = p[k] * (dp[k] - inner);
        }
    } else {
        for (std::size_t b = 0; b < B; ++b) {
            const double* tb = t_out.row(b);
            double* taur = tau.row(b);
            for (std::size_t k = 0; k < K; ++k) taur[k] = 4.0 / double(B) * tb[k];
        }
    }

    // reverse pass through the tangent graph
    std::vector<LayerGrads> grads(L);
    for (std::size_t l = 0; l < L; ++l) {
        if (!net.layers[l].parameterized()) continue;
        grads[l].weight = Matrix(net.layers[l].weight.rows, net.layers[l].weight.cols);
        grads[l].bias.assign(net.layers[l].bias.size(), 0.0);
    }
    std::vector<Matrix> tau_acc(L);
    for (std::size_t l = inject; l < L; ++l) tau_acc[l] = Matrix(B, trace.outputs[l].cols);
    tau_acc[L - 1] = std::move(tau);

    Matrix input_seed;  // dphi w.r.t. the injection layer's primal input
    for (std::size_t li = L; li-- > inject;) {
        const Layer& layer = net.layers[li];
        const Matrix& gout = tau_acc[li];
        Matrix* below = li > inject ? &tau_acc[li - 1] : nullptr;
        switch (layer.spec.kind) {
            case LayerKind::Dense: {
                Matrix gs = gout;
                zero_dead_channels(gs, layer.mask, 1);
                if (li == inject) {
                    input_seed = matmul(gs, dir_w);
                } else {
                    const Matrix& t_in = tangent[li - 1];
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* gr = gs.row(b);
                        const double* tr = t_in.row(b);
                        for (std::size_t j = 0; j < layer.weight.rows; ++j) {
                            const double gj = gr[j];
                            if (gj == 0.0) continue;
                            double* wr = grads[li].weight.row(j);
                            for (std::size_t i = 0; i < layer.weight.cols; ++i)
                                wr[i] += gj * tr[i];
                        }
                    }
                    Matrix dx = matmul(gs, layer.weight);
                    for (std::size_t i = 0; i < below->data.size(); ++i)
                        below->data[i] += dx.data[i];
                }
                break;
            }
            case LayerKind::Conv2d: {
                const std::size_t P = layer.pre_pool_h * layer.pre_pool_w;
                Matrix gs(B, layer.spec.fan_out * P);
                if (layer.spec.fused_pool) {
                    const std::size_t PP = layer.out_shape.height * layer.out_shape.width;
                    const auto& argmax = trace.pool_argmax[li];
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* gr = gout.row(b);
                        double* tr = gs.row(b);
                        for (std::size_t o = 0; o < layer.spec.fan_out * PP; ++o)
                            tr[argmax[b * layer.spec.fan_out * PP + o]] += gr[o];
                    }
                } else {
                    gs = gout;
                }
                zero_dead_channels(gs, layer.mask, P);

                const Matrix& kernel = li == inject ? dir_w : layer.weight;
                const Matrix& source = li == inject ? trace.layer_input(li) : tangent[li - 1];
                Matrix target(B, source.cols);
                Matrix patches(P, layer.weight.cols);
                Matrix dpatch(P, layer.weight.cols);
                for (std::size_t b = 0; b < B; ++b) {
                    im2col_layer(layer, source.row(b), patches);
                    const double* gr = gs.row(b);
                    std::fill(dpatch.data.begin(), dpatch.data.end(), 0.0);
                    for (std::size_t c = 0; c < layer.spec.fan_out; ++c) {
                        const double* kw = kernel.row(c);
                        double* wr = li == inject ? nullptr : grads[li].weight.row(c);
                        for (std::size_t p = 0; p < P; ++p) {
                            const double g = gr[c * P + p];
                            if (g == 0.0) continue;
                            const double* pr = patches.row(p);
                            double* dpr = dpatch.row(p);
                            for (std::size_t k = 0; k < patches.cols; ++k) {
                                if (wr) wr[k] += g * pr[k];
                                dpr[k] += g * kw[k];
                            }
                        }
                    }
                    col2im_layer_add(layer, dpatch, target.row(b));
                }
                if (li == inject)
                    input_seed = std::move(target);
                else
                    for (std::size_t i = 0; i < below->data.size(); ++i)
                        below->data[i] += target.data[i];
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
                const int src = layer.spec.source_layer;
                const auto pair = residual_pairing(net, li);
                const std::size_t fpc = layer.out_shape.image
                                            ? layer.out_shape.height * layer.out_shape.width
                                            : 1;
                for (std::size_t i = 0; i < gout.data.size(); ++i)
                    below->data[i] += gout.data[i];
                if (std::size_t(src) >= inject) {
                    Matrix& gsrc = tau_acc[std::size_t(src)];
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* gr = gout.row(b);
                        double* sr = gsrc.row(b);
                        for (std::size_t c2 = 0; c2 < pair.size(); ++c2) {
                            if (pair[c2] < 0) continue;
                            const std::size_t so = std::size_t(pair[c2]) * fpc;
                            for (std::size_t f = 0; f < fpc; ++f)
                                sr[so + f] += gr[c2 * fpc + f];
                        }
                    }
                }
                break;
            }
        }
    }

    // reverse pass through the primal graph: the injection layer's input and
    // (for cross-entropy) the softmax both depend on the weights
    std::vector<OutputSeed> seeds;
    if (kind == LossKind::CrossEntropy) seeds.push_back({int(L) - 1, std::move(seed_z)});
    if (inject > 0 && input_seed.rows == B)
        seeds.push_back({int(inject) - 1, std::move(input_seed)});
    if (!seeds.empty()) {
        std::vector<LayerGrads> primal = reverse_from_seeds(net, trace, seeds);
        for (std::size_t l = 0; l < L; ++l) {
            if (!net.layers[l].parameterized()) continue;
            for (std::size_t i = 0; i < grads[l].weight.data.size(); ++i)
                grads[l].weight.data[i] += primal[l].weight.data[i];
            for (std::size_t i = 0; i < grads[l].bias.size(); ++i)
                grads[l].bias[i] += primal[l].bias[i];
        }
    }
    for (const auto& g : grads) {
        if (!all_finite(g.weight) || !all_finite(g.bias))
            throw Error("penalty_gradient: non-finite result");
    }
    return grads;
}

std::optional<OutputSeed> hinge_activation_seed(const MaskedNetwork& net,
                                                const BatchTrace& trace,
                                                const SpectralEstimate& est, double mu) {
    if (est.stack_index == 0) return std::nullopt;  // fed by the network input
    const Layer& layer = net.layers[est.stack_index];
    const Matrix& x = trace.layer_input(est.stack_index);
    const std::size_t B = x.rows;

    OutputSeed seed;
    seed.layer = int(est.stack_index) - 1;
    seed.grad = Matrix(B, x.cols);

    const std::size_t nin = est.in_index.size();
    if (layer.spec.kind == LayerKind::Dense) {
        const double scale = mu * est.lambda_gamma * 2.0 / double(B);
        for (std::size_t b = 0; b < B; ++b) {
            const double* xr = x.row(b);
            double t = est.v_psi[nin];  // homogeneous coordinate
            for (std::size_t i = 0; i < nin; ++i) t += est.v_psi[i] * xr[est.in_index[i]];
            double* sr = seed.grad.row(b);
            for (std::size_t i = 0; i < nin; ++i)
                sr[est.in_index[i]] += scale * t * est.v_psi[i];
        }
    } else {
        const std::size_t P = layer.pre_pool_h * layer.pre_pool_w;
        const double scale = mu * est.lambda_gamma * 2.0 / double(B * P);
        Matrix patches(P, layer.weight.cols);
        Matrix dpatch(P, layer.weight.cols);
        for (std::size_t b = 0; b < B; ++b) {
            im2col_layer(layer, x.row(b), patches);
            std::fill(dpatch.data.begin(), dpatch.data.end(), 0.0);
            for (std::size_t p = 0; p < P; ++p) {
                const double* pr = patches.row(p);
                double t = est.v_psi[nin];
                for (std::size_t i = 0; i < nin; ++i) t += est.v_psi[i] * pr[est.in_index[i]];
                double* dr = dpatch.row(p);
                for (std::size_t i = 0; i < nin; ++i)
                    dr[est.in_index[i]] += scale * t * est.v_psi[i];
            }
            col2im_layer_add(layer, dpatch, seed.grad.row(b));
        }
    }
    return seed;
}

double penalized_loss(const MaskedNetwork& net, const Matrix& batch,
                      const std::vector<int>& labels, LossKind kind, double mu, double bound,
                      double eig_tol, std::size_t eig_max_iter) {
    BatchTrace t = forward(net, batch);
    if (mu == 0.0) return loss(t.outputs.back(), labels, kind);
    backward(net, t, labels, kind);
    std::vector<KfacBlock> blocks = accumulate_factors(net, t);
    SpectralEstimate est = block_spectrum(blocks, eig_tol, eig_max_iter);
    return t.loss_value + mu * hinge_penalty(est.rho, bound);
}

}  // namespace hgnp
