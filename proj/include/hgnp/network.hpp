#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "hgnp/linalg.hpp"

namespace hgnp {

enum class LayerKind : std::uint8_t { Dense, Conv2d, Relu, Flatten, ResidualAdd };
enum class Padding : std::uint8_t { Valid, Same };
enum class LossKind : std::uint8_t { CrossEntropy, Mse };

/// Geometry of the value flowing between layers. Flat vectors use
/// channels = feature count with height = width = 1.
struct TensorShape {
    std::size_t channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    bool image = false;

    std::size_t flat() const { return channels * height * width; }
    bool operator==(const TensorShape&) const = default;
};

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    std::size_t fan_in = 0;    // dense: input features; conv: input channels
    std::size_t fan_out = 0;   // dense: output units;   conv: output channels
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    Padding padding = Padding::Valid;
    bool fused_pool = false;   // 2x2 max pool, stride 2, applied to the conv output
    int group_id = -1;         // residual pruning group; -1 = ungrouped
    int source_layer = -1;     // residual_add: index of the layer whose output is added
};

struct ModelSpec {
    TensorShape input;
    std::vector<LayerSpec> layers;
};

struct Layer {
    LayerSpec spec;
    TensorShape in_shape;
    TensorShape out_shape;
    // conv only: grid before the fused pool
    std::size_t pre_pool_h = 0;
    std::size_t pre_pool_w = 0;

    Matrix weight;             // dense: out x in; conv: out_c x (in_c*kh*kw)
    std::vector<double> bias;
    std::vector<std::uint8_t> mask;  // one bit per output unit/channel; empty otherwise

    // Index of the parameterized layer whose mask governs this output's
    // channels; -1 means all channels are always alive (e.g. network input
    // passed through). Flat (flattened) outputs keep the owner for feature
    // aliveness bookkeeping.
    int mask_owner = -1;

    bool parameterized() const {
        return spec.kind == LayerKind::Dense || spec.kind == LayerKind::Conv2d;
    }
    std::size_t unit_count() const { return spec.fan_out; }
    std::size_t alive_count() const;
    std::size_t params_per_unit() const;  // weights + bias of one unit/channel
};

struct MaskedNetwork {
    TensorShape input_shape;
    std::vector<Layer> layers;
    std::uint64_t original_param_count = 0;  // denominator of the sparsity ratio

    std::size_t total_neurons() const;               // units of all parameterized layers
    std::size_t alive_neurons() const;
    std::size_t param_count() const;                 // current physical parameter count
    std::vector<std::size_t> parameterized_layers() const;  // stack indices, in order
    int last_parameterized() const;                  // stack index; output layer, never pruned
};

struct LayerGrads {
    Matrix weight;
    std::vector<double> bias;
};

/// Everything one forward/backward over a mini-batch records.
struct BatchTrace {
    Matrix input;                       // B x in_flat
    std::vector<Matrix> outputs;        // per layer, B x out_flat (masked, post-pool)
    std::vector<Matrix> pre_pool;       // pooled conv layers: masked conv output before the pool
    std::vector<std::vector<std::uint32_t>> pool_argmax;  // pooled conv: B*(c*outP) source indices

    bool has_backward = false;
    double loss_value = 0.0;
    std::vector<Matrix> grad_output;    // dLoss/d outputs[l]
    std::vector<Matrix> grad_pre;       // g_l = dLoss/d s_l for parameterized layers
    std::vector<LayerGrads> param_grads;

    const Matrix& layer_input(std::size_t l) const {
        return l == 0 ? input : outputs[l - 1];
    }
    /// Masked pre-activation s_l of a parameterized layer.
    const Matrix& pre_activation(std::size_t l) const {
        return pre_pool[l].data.empty() ? outputs[l] : pre_pool[l];
    }
};

/// Extra gradient seeds added to chosen layer outputs during backprop;
/// used to differentiate objectives with terms beyond the data loss.
struct OutputSeed {
    int layer = -1;   // -1 seeds the network input (no effect upstream)
    Matrix grad;      // B x out_flat(layer)
};

MaskedNetwork init_network(const ModelSpec& spec, std::uint64_t seed);

BatchTrace forward(const MaskedNetwork& net, const Matrix& batch);

double loss(const Matrix& logits, const std::vector<int>& labels, LossKind kind);

void backward(const MaskedNetwork& net, BatchTrace& trace, const std::vector<int>& labels,
              LossKind kind, const std::vector<OutputSeed>& seeds = {});

/// Backpropagates only the given output seeds (no loss term); the trace is
/// read, not modified. Returns per-layer parameter gradients.
std::vector<LayerGrads> reverse_from_seeds(const MaskedNetwork& net, const BatchTrace& trace,
                                           const std::vector<OutputSeed>& seeds);

/// Kept indices per parameterized layer after physical removal.
struct CompactMap {
    std::vector<std::vector<std::size_t>> kept_out;
    std::vector<std::vector<std::size_t>> kept_in;  // input feature indices
};

/// Physically removes masked units (rows, columns, channels). The result has
/// all mask bits set and computes the same function as the masked original.
MaskedNetwork compact(const MaskedNetwork& net, CompactMap* map = nullptr);

/// Alive-feature indices of the value feeding stack layer l (after upstream
/// masks), and the alive output units of layer l itself.
std::vector<std::size_t> alive_input_features(const MaskedNetwork& net, std::size_t l);
std::vector<std::size_t> alive_units(const Layer& layer);

/// Channel pairing of a residual_add layer: entry c is the source channel
/// added onto incoming channel c (k-th alive onto k-th alive), -1 for dead.
std::vector<int> residual_pairing(const MaskedNetwork& net, std::size_t layer);

/// Patch matrix (positions x in_c*kh*kw) of one sample for a conv layer.
void im2col_layer(const Layer& layer, const double* sample, Matrix& patches);
/// Scatter-add of a patch-shaped gradient back onto one sample's input map.
void col2im_layer_add(const Layer& layer, const Matrix& dpatches, double* sample);

// Flat parameter-vector view, layer order: weights row-major then biases.
std::vector<double> get_parameters(const MaskedNetwork& net);
void set_parameters(MaskedNetwork& net, const std::vector<double>& params);
std::vector<double> flatten_grads(const MaskedNetwork& net,
                                  const std::vector<LayerGrads>& grads);

}  // namespace hgnp
