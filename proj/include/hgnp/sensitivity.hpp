#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "hgnp/network.hpp"

namespace hgnp {

/// Per-neuron importance scores over the maskable layers (every
/// parameterized layer except the final output layer).
struct SensitivityTable {
    struct Entry {
        std::size_t stack_index = 0;  // layer position in the stack
        std::size_t unit = 0;
        double raw = 0.0;             // >= 0
        double normalized = 0.0;
    };
    std::vector<Entry> entries;
    std::map<std::size_t, int> group_of_layer;  // stack index -> residual group id
};

/// First-order scores |sum over batch and positions of g_s * s| per alive
/// neuron, from a completed backward trace. The trace's gradients define the
/// objective being scored (plain or penalized).
SensitivityTable taylor_scores(const MaskedNetwork& net, const BatchTrace& trace);

/// Reference scores: re-evaluates the penalized loss with each alive neuron's
/// mask bit flipped to zero, one forward (plus curvature when mu > 0) per
/// neuron. Deterministic regardless of `threads`.
SensitivityTable exact_scores(const MaskedNetwork& net, const Matrix& batch,
                              const std::vector<int>& labels, LossKind kind, double mu,
                              double bound, double eig_tol = 1e-10,
                              std::size_t eig_max_iter = 10000, std::size_t threads = 1);

/// L2-normalizes raw scores within each layer; all-zero layers stay zero.
void normalize_per_layer(SensitivityTable& table);

struct PruneDecision {
    std::vector<std::pair<std::size_t, std::size_t>> to_mask;  // (stack_index, unit)
    std::map<int, std::size_t> group_counts;                   // per-layer count by group id
    double kappa_after = 1.0;
    std::size_t requested = 0;
    bool truncated = false;  // fewer than requested were feasible
};

/// Picks the N smallest normalized scores subject to keeping one alive unit
/// per layer; residual groups prune the rounded-mean count from every member,
/// with members chosen by their own smallest scores. Ties break on
/// (layer, unit).
PruneDecision select_prune(const SensitivityTable& table, std::size_t n,
                           const MaskedNetwork& net);

void apply_prune(MaskedNetwork& net, const PruneDecision& decision);

/// Fraction of the original parameters still alive. A parameter counts as
/// alive only when both its owning unit and the unit feeding it are alive.
double sparsity(const MaskedNetwork& net);

}  // namespace hgnp
