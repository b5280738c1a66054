#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hgnp/network.hpp"

namespace hgnp {

struct Dataset {
    Matrix inputs;  // samples x flat features
    TensorShape shape;
    std::vector<int> labels;
    std::size_t class_count = 0;
    std::string split = "train";

    std::size_t size() const { return inputs.rows; }
};

/// IDX image/label pair (big-endian dims, magic 0x803 / 0x801); pixel values
/// scaled to [0, 1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// CSV rows of the form: label, feature_1, ..., feature_n.
Dataset load_csv(const std::string& path, std::size_t feature_count);

/// k Gaussian clusters with unit covariance and mean spacing ~separation.
Dataset synth_gaussian_blobs(std::size_t classes, std::size_t dim, std::size_t samples,
                             double separation, std::uint64_t seed);

/// Mirrors each image along its width independently with probability p.
void augment_hflip(Matrix& batch, const TensorShape& shape, double p, std::uint64_t seed);

/// Epoch-seeded shuffled partition into mini-batches; the last partial batch
/// is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::size_t epoch);

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx);
std::vector<int> gather_labels(const std::vector<int>& labels,
                               const std::vector<std::size_t>& idx);

/// Per-channel standardization (flat data: per feature), in place.
void standardize(Dataset& d);

/// Head/tail split preserving the generator's sample order.
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t train_count);

}  // namespace hgnp
