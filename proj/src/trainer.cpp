#include "hgnp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hgnp/util.hpp"

namespace hgnp {

namespace {

constexpr std::uint64_t kHflipTag = 0x48464c50;   // batch augmentation stream
constexpr std::uint64_t kPruneTag = 0x5052554e;   // prune-batch selection stream

double effective_lr(const RunConfig& cfg, std::size_t epoch) {
    double lr = cfg.lr;
    for (std::size_t e : cfg.lr_decay_epochs)
        if (epoch >= e) lr *= cfg.lr_decay_factor;
    return lr;
}

void add_scaled(std::vector<LayerGrads>& acc, const std::vector<LayerGrads>& g, double scale) {
    for (std::size_t l = 0; l < acc.size(); ++l) {
        if (g[l].weight.data.empty()) continue;
        for (std::size_t i = 0; i < acc[l].weight.data.size(); ++i)
            acc[l].weight.data[i] += scale * g[l].weight.data[i];
        for (std::size_t i = 0; i < acc[l].bias.size(); ++i)
            acc[l].bias[i] += scale * g[l].bias[i];
    }
}

// Blends fresh factors into the EMA state; dimensions change at prune
// events, which reset the state before this is reached.
void blend_ema(TrainState& state, std::vector<KfacBlock>& blocks, double decay) {
    if (!state.has_ema) {
        state.ema_blocks = blocks;
        state.has_ema = true;
        return;
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        KfacBlock& e = state.ema_blocks[i];
        const KfacBlock& b = blocks[i];
        for (std::size_t k = 0; k < e.psi.data.size(); ++k)
            e.psi.data[k] = decay * e.psi.data[k] + (1.0 - decay) * b.psi.data[k];
        for (std::size_t k = 0; k < e.gamma.data.size(); ++k)
            e.gamma.data[k] = decay * e.gamma.data[k] + (1.0 - decay) * b.gamma.data[k];
    }
    blocks = state.ema_blocks;
}

struct ProbeResult {
    double rho = 0.0;
    std::vector<KfacBlock> blocks;
    SpectralEstimate est;
};

// Diagnostic curvature reading on one batch; keeps baseline runs free of
// per-step factor work while still reporting rho.
ProbeResult probe_spectrum(const MaskedNetwork& net, const Dataset& train,
                           const RunConfig& cfg, std::size_t epoch) {
    const auto order = batches(train.size(), cfg.batch_size, cfg.seed, epoch);
    const auto& idx = order.front();
    Matrix x = gather_rows(train.inputs, idx);
    std::vector<int> y = gather_labels(train.labels, idx);
    BatchTrace trace = forward(net, x);
    backward(net, trace, y, cfg.loss);
    ProbeResult p;
    p.blocks = accumulate_factors(net, trace);
    p.est = block_spectrum(p.blocks, cfg.eig_tol, cfg.eig_max_iter);
    p.rho = p.est.rho;
    return p;
}

}  // namespace

void RunConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be > 0");
    };
    positive(lr, "lr");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (mu < 0.0) throw ConfigError("mu must be >= 0");
    if (bound < 0.0) throw ConfigError("bound must be >= 0");
    if (prune_n == 0) throw ConfigError("prune_n must be >= 1");
    if (e2 == 0) throw ConfigError("e2 must be >= 1");
    if (!(target_sparsity > 0.0) || target_sparsity > 1.0)
        throw ConfigError("target_sparsity must be in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    positive(eig_tol, "eig_tol");
    if (eig_max_iter == 0) throw ConfigError("eig_max_iter must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (lr_decay_factor <= 0.0) throw ConfigError("lr_decay_factor must be > 0");
    if (factor_ema < 0.0 || factor_ema >= 1.0)
        throw ConfigError("factor_ema must be in [0, 1)");
    if (sensitivity_batches == 0) throw ConfigError("sensitivity_batches must be >= 1");
    if (hflip < 0.0 || hflip > 1.0) throw ConfigError("hflip must be in [0, 1]");
}

TrainState make_state(const MaskedNetwork& net) {
    TrainState state;
    state.velocity.resize(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        if (!layer.parameterized()) continue;
        state.velocity[l].weight = Matrix(layer.weight.rows, layer.weight.cols);
        state.velocity[l].bias.assign(layer.bias.size(), 0.0);
    }
    return state;
}

EpochMetrics train_epoch(MaskedNetwork& net, const Dataset& train, const Dataset* val,
                         const RunConfig& cfg, std::size_t epoch, TrainState& state,
                         const TrainHooks* hooks) {
    if (train.size() == 0) throw Error("train_epoch: empty dataset");
    const double lr = effective_lr(cfg, epoch);
    const bool with_penalty = cfg.penalty_in_training();

    double loss_sum = 0.0;
    std::size_t batch_count = 0;
    const auto order = batches(train.size(), cfg.batch_size, cfg.seed, epoch);
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
        Matrix x = gather_rows(train.inputs, order[bi]);
        std::vector<int> y = gather_labels(train.labels, order[bi]);
        if (cfg.hflip > 0.0 && train.shape.image)
            augment_hflip(x, train.shape, cfg.hflip, mix_seed(cfg.seed, kHflipTag, epoch * 131071 + bi));

        BatchTrace trace = forward(net, x);
        backward(net, trace, y, cfg.loss);
        if (!std::isfinite(trace.loss_value) || trace.loss_value > 1e6)
            throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                  " batch " + std::to_string(bi) + ": loss " +
                                  format_double(trace.loss_value));
        loss_sum += trace.loss_value;
        ++batch_count;

        std::vector<LayerGrads> grads = std::move(trace.param_grads);
        if (with_penalty) {
            std::vector<KfacBlock> blocks = accumulate_factors(net, trace);
            if (cfg.factor_ema > 0.0) blend_ema(state, blocks, cfg.factor_ema);
            SpectralEstimate est = block_spectrum(blocks, cfg.eig_tol, cfg.eig_max_iter);
            if (est.rho > cfg.bound) {
                std::vector<LayerGrads> pg = penalty_gradient(net, trace, cfg.loss, est);
                add_scaled(grads, pg, cfg.mu);
            }
        }

        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            Layer& layer = net.layers[l];
            if (!layer.parameterized()) continue;
            LayerGrads& g = grads[l];
            LayerGrads& v = state.velocity[l];
            if (cfg.weight_decay > 0.0) {
                for (std::size_t j = 0; j < layer.weight.rows; ++j) {
                    if (!layer.mask[j]) continue;
                    const double* wr = layer.weight.row(j);
                    double* gr = g.weight.row(j);
                    for (std::size_t i = 0; i < layer.weight.cols; ++i)
                        gr[i] += cfg.weight_decay * wr[i];
                    g.bias[j] += cfg.weight_decay * layer.bias[j];
                }
            }
            for (std::size_t i = 0; i < layer.weight.data.size(); ++i) {
                v.weight.data[i] = cfg.momentum * v.weight.data[i] + g.weight.data[i];
                layer.weight.data[i] -= lr * v.weight.data[i];
            }
            for (std::size_t i = 0; i < layer.bias.size(); ++i) {
                v.bias[i] = cfg.momentum * v.bias[i] + g.bias[i];
                layer.bias[i] -= lr * v.bias[i];
            }
        }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / double(batch_count);
    ProbeResult probe = probe_spectrum(net, train, cfg, epoch);
    m.rho = probe.rho;
    m.penalty_value = hinge_penalty(probe.rho, cfg.bound);
    if (hooks && hooks->on_curvature)
        hooks->on_curvature(epoch, probe.blocks, probe.est, m.penalty_value);
    if (val && val->size() > 0)
        m.val_accuracy = evaluate(net, *val, cfg.loss).first;
    else
        m.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    m.kappa = sparsity(net);
    m.alive_neurons = net.alive_neurons();
    return m;
}

namespace {

struct PruneOutcome {
    SensitivityTable table;
    PruneDecision decision;
};

PruneOutcome prune_step(MaskedNetwork& net, const Dataset& train, const RunConfig& cfg,
                        std::size_t epoch) {
    const auto order =
        batches(train.size(), cfg.batch_size, mix_seed(cfg.seed, kPruneTag, epoch), 0);
    const std::size_t k = std::min(cfg.sensitivity_batches, order.size());

    SensitivityTable table;
    for (std::size_t t = 0; t < k; ++t) {
        Matrix x = gather_rows(train.inputs, order[t]);
        std::vector<int> y = gather_labels(train.labels, order[t]);
        BatchTrace trace = forward(net, x);
        backward(net, trace, y, cfg.loss);

        if (cfg.penalty_in_pruning()) {
            std::vector<KfacBlock> blocks = accumulate_factors(net, trace);
            SpectralEstimate est = block_spectrum(blocks, cfg.eig_tol, cfg.eig_max_iter);
            if (est.rho > cfg.bound) {
                // score the penalized objective: rerun backprop with the
                // hinge's activation-gradient seed added
                auto seed = hinge_activation_seed(net, trace, est, cfg.mu);
                if (seed)
                    backward(net, trace, y, cfg.loss, {*seed});
            }
        }
        SensitivityTable part = taylor_scores(net, trace);
        if (table.entries.empty()) {
            table = std::move(part);
        } else {
            for (std::size_t i = 0; i < table.entries.size(); ++i)
                table.entries[i].raw += part.entries[i].raw;
        }
    }
    if (k > 1)
        for (auto& e : table.entries) e.raw /= double(k);

    normalize_per_layer(table);
    PruneOutcome out;
    out.decision = select_prune(table, cfg.prune_n, net);
    out.table = std::move(table);
    return out;
}

}  // namespace

RunResult hgnp_run(MaskedNetwork net, const Dataset& train, const Dataset* val,
                   const RunConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    RunResult result;
    TrainState state = make_state(net);
    double kappa = sparsity(net);
    std::size_t epoch = 0;
    bool stalled = false;

    while (epoch < cfg.e1 || kappa > cfg.target_sparsity) {
        bool pruned_now = false;
        if (epoch >= cfg.e1 && epoch % cfg.e2 == 0) {
            PruneOutcome outcome = prune_step(net, train, cfg, epoch);
            if (outcome.decision.to_mask.empty()) {
                result.sparsity_infeasible = true;
                stalled = true;
            } else {
                apply_prune(net, outcome.decision);
                if (hooks.on_prune) hooks.on_prune(epoch, outcome.table, outcome.decision);
                if (cfg.compact_on_prune) {
                    CompactMap map;
                    net = compact(net, &map);
                    TrainState next = make_state(net);
                    std::size_t p = 0;
                    for (std::size_t l = 0; l < net.layers.size(); ++l) {
                        if (!net.layers[l].parameterized()) continue;
                        const auto& keep_out = map.kept_out[p];
                        const auto& keep_in = map.kept_in[p];
                        ++p;
                        LayerGrads& dst = next.velocity[l];
                        const LayerGrads& src = state.velocity[l];
                        for (std::size_t r = 0; r < keep_out.size(); ++r) {
                            for (std::size_t c = 0; c < keep_in.size(); ++c)
                                dst.weight(r, c) = src.weight(keep_out[r], keep_in[c]);
                            dst.bias[r] = src.bias[keep_out[r]];
                        }
                    }
                    state = std::move(next);
                } else {
                    // discard momentum of the pruned units
                    for (const auto& [l, j] : outcome.decision.to_mask) {
                        LayerGrads& v = state.velocity[l];
                        std::fill(v.weight.row(j), v.weight.row(j) + v.weight.cols, 0.0);
                        v.bias[j] = 0.0;
                    }
                }
                state.has_ema = false;
                state.ema_blocks.clear();
                kappa = sparsity(net);
                pruned_now = true;
                if (hooks.on_checkpoint) hooks.on_checkpoint(net, epoch);
            }
        }

        EpochMetrics m = train_epoch(net, train, val, cfg, epoch, state, &hooks);
        m.prune_event = pruned_now;
        if (hooks.on_epoch) hooks.on_epoch(m);
        result.metrics.push_back(m);
        ++epoch;
        if (stalled) break;
    }

    for (std::size_t i = 0; i < cfg.e3; ++i) {
        EpochMetrics m = train_epoch(net, train, val, cfg, epoch, state, &hooks);
        if (hooks.on_epoch) hooks.on_epoch(m);
        result.metrics.push_back(m);
        ++epoch;
    }

    result.net = compact(net);
    if (hooks.on_checkpoint) hooks.on_checkpoint(result.net, epoch);
    return result;
}

std::pair<double, double> evaluate(const MaskedNetwork& net, const Dataset& data,
                                   LossKind kind) {
    if (data.size() == 0) throw Error("evaluate: empty dataset");
    const std::size_t chunk = 256;
    std::size_t correct = 0;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(data.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Matrix x = gather_rows(data.inputs, idx);
        std::vector<int> y = gather_labels(data.labels, idx);
        BatchTrace trace = forward(net, x);
        const Matrix& logits = trace.outputs.back();
        loss_sum += loss(logits, y, kind) * double(idx.size());
        for (std::size_t b = 0; b < logits.rows; ++b) {
            const double* z = logits.row(b);
            std::size_t best = 0;
            for (std::size_t k = 1; k < logits.cols; ++k)
                if (z[k] > z[best]) best = k;
            if (int(best) == y[b]) ++correct;
        }
    }
    return {double(correct) / double(data.size()), loss_sum / double(data.size())};
}

}  // namespace hgnp
