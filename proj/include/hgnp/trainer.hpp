#pragma once

#include <functional>
#include <vector>

#include "hgnp/curvature.hpp"
#include "hgnp/data.hpp"
#include "hgnp/network.hpp"
#include "hgnp/sensitivity.hpp"

namespace hgnp {

enum class Ablation : std::uint8_t {
    Full,              // penalty in training and in pruning scores
    PenaltyTrainOnly,  // penalty while training; plain-loss pruning scores
    PenaltyPruneOnly,  // plain training; penalized pruning scores
    BaselineMu0,       // no penalty anywhere
};

struct RunConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double mu = 0.001;
    double bound = 0.5;
    std::size_t prune_n = 100;
    std::size_t e1 = 5;
    std::size_t e2 = 5;
    std::size_t e3 = 50;
    double target_sparsity = 0.5;  // in (0, 1]; 1 disables pruning
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    LossKind loss = LossKind::CrossEntropy;
    Ablation ablation = Ablation::Full;
    double eig_tol = 1e-10;
    std::size_t eig_max_iter = 10000;
    double weight_decay = 0.0;
    std::vector<std::size_t> lr_decay_epochs;
    double lr_decay_factor = 0.1;
    double factor_ema = 0.0;  // 0 = fresh factors each batch; else EMA decay
    std::size_t sensitivity_batches = 1;
    bool compact_on_prune = true;
    double hflip = 0.0;

    bool penalty_in_training() const {
        return mu > 0.0 &&
               (ablation == Ablation::Full || ablation == Ablation::PenaltyTrainOnly);
    }
    bool penalty_in_pruning() const {
        return mu > 0.0 &&
               (ablation == Ablation::Full || ablation == Ablation::PenaltyPruneOnly);
    }
    void validate() const;  // throws ConfigError naming the field
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double penalty_value = 0.0;
    double rho = 0.0;
    double val_accuracy = 0.0;  // NaN when no validation split
    double kappa = 1.0;
    std::size_t alive_neurons = 0;
    bool prune_event = false;
};

/// Momentum buffers plus optional curvature-factor EMA; reset at prune events.
struct TrainState {
    std::vector<LayerGrads> velocity;  // indexed by stack layer
    std::vector<KfacBlock> ema_blocks;
    bool has_ema = false;
};

TrainState make_state(const MaskedNetwork& net);

struct TrainHooks {
    std::function<void(const EpochMetrics&)> on_epoch;
    std::function<void(const MaskedNetwork&, std::size_t epoch)> on_checkpoint;
    std::function<void(std::size_t epoch, const SensitivityTable&, const PruneDecision&)>
        on_prune;
    std::function<void(std::size_t epoch, const std::vector<KfacBlock>&,
                       const SpectralEstimate&, double penalty)>
        on_curvature;
};

/// One pass over the training data with the mask held fixed: per batch,
/// gradient step on the data loss plus, when the hinge is active,
/// mu * gradient of the spectral-radius term.
EpochMetrics train_epoch(MaskedNetwork& net, const Dataset& train, const Dataset* val,
                         const RunConfig& cfg, std::size_t epoch, TrainState& state,
                         const TrainHooks* hooks = nullptr);

struct RunResult {
    MaskedNetwork net;
    std::vector<EpochMetrics> metrics;
    bool sparsity_infeasible = false;  // min-keep stopped pruning early
};

/// The full alternating schedule: e1 warm-up epochs, a prune event every e2
/// epochs until the sparsity target is reached, then e3 fine-tuning epochs.
/// The returned network is compacted.
RunResult hgnp_run(MaskedNetwork net, const Dataset& train, const Dataset* val,
                   const RunConfig& cfg, const TrainHooks& hooks = {});

/// Top-1 accuracy and mean loss.
std::pair<double, double> evaluate(const MaskedNetwork& net, const Dataset& data,
                                   LossKind kind);

}  // namespace hgnp
