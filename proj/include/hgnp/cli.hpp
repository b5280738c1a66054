#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hgnp/config.hpp"

namespace hgnp {

// Subcommand entry points. Each returns a process exit code: 0 success,
// 1 configuration/input error, 2 diverged run. Errors are printed to stderr.

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed_override,
              std::size_t threads);

int cmd_eval(const std::string& checkpoint_path, const DataConfig& data,
             const std::string& split, LossKind loss_kind, std::uint64_t data_seed_base);

struct ReportArgs {
    std::string metrics_path;            // primary run
    std::string baseline_path;           // optional second run
    std::optional<double> threshold;     // splice point for the hybrid curve
    std::string threshold_ref;           // "model/dataset" lookup into the reference table
    std::string out_dir;
};
int cmd_report(const ReportArgs& args);

struct SensitivityArgs {
    std::string checkpoint_path;
    DataConfig data;
    double mu = 0.001;
    double bound = 0.5;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    LossKind loss_kind = LossKind::CrossEntropy;
    std::string out_path;
    std::size_t threads = 1;
};
int cmd_sensitivity(const SensitivityArgs& args);

}  // namespace hgnp
