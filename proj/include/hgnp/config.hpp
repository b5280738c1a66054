#pragma once

#include <optional>
#include <string>

#include "hgnp/data.hpp"
#include "hgnp/trainer.hpp"

namespace hgnp {

enum class DataKind : std::uint8_t { Synthetic, Idx, Csv };

struct DataConfig {
    DataKind kind = DataKind::Synthetic;
    // synthetic blobs
    std::size_t classes = 10;
    std::size_t dim = 16;
    std::size_t train_samples = 1000;
    std::size_t val_samples = 200;
    double separation = 6.0;
    std::uint64_t data_seed = 0;  // 0 = derive from the training seed
    // idx pairs
    std::string train_images, train_labels, val_images, val_labels;
    // csv
    std::string train_csv, val_csv;
    std::size_t features = 0;
    bool standardize_inputs = false;
};

struct OutputConfig {
    std::string dir;
    bool curvature_csv = true;
};

struct FullConfig {
    ModelSpec model;
    RunConfig train;
    DataConfig data;
    OutputConfig output;
};

/// Sectioned key=value config file; unknown sections or keys are errors.
/// The [model] section uses a one-line layer DSL, e.g.
///   spec = dense 16 128; relu; dense 128 10
/// with conv entries `conv IN OUT KH KW [same|valid] [pool]`, `residual N`,
/// `flatten`, and an optional `@gN` residual-group tag per entry.
FullConfig parse_config_file(const std::string& path);
FullConfig parse_config_text(const std::string& text, const std::string& source_name);

/// Canonical round-trip form: parsing the echo reproduces the configuration.
std::string render_config(const FullConfig& cfg);

/// Materializes the configured datasets (train, optional validation).
std::pair<Dataset, std::optional<Dataset>> load_data(const DataConfig& data,
                                                     std::uint64_t train_seed);

std::string ablation_name(Ablation a);
std::string loss_name(LossKind k);

}  // namespace hgnp
