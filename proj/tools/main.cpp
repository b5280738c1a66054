#include <CLI11.hpp>

#include <optional>
#include <string>

#include "hgnp/cli.hpp"

namespace {

// Shared --data-* flags used by eval and sensitivity.
void add_data_flags(CLI::App* app, hgnp::DataConfig& data, std::string& kind) {
    app->add_option("--data-kind", kind, "synthetic | idx | csv")->default_val("synthetic");
    app->add_option("--data-classes", data.classes, "synthetic: class count");
    app->add_option("--data-dim", data.dim, "synthetic: feature dimension");
    app->add_option("--data-train-samples", data.train_samples, "synthetic: training samples");
    app->add_option("--data-val-samples", data.val_samples, "synthetic: validation samples");
    app->add_option("--data-separation", data.separation, "synthetic: cluster separation");
    app->add_option("--data-seed", data.data_seed, "synthetic: generator seed");
    app->add_option("--data-train-images", data.train_images, "idx: training image file");
    app->add_option("--data-train-labels", data.train_labels, "idx: training label file");
    app->add_option("--data-val-images", data.val_images, "idx: validation image file");
    app->add_option("--data-val-labels", data.val_labels, "idx: validation label file");
    app->add_option("--data-train-csv", data.train_csv, "csv: training file");
    app->add_option("--data-val-csv", data.val_csv, "csv: validation file");
    app->add_option("--data-features", data.features, "csv: feature count");
    app->add_flag("--data-standardize", data.standardize_inputs, "standardize inputs");
}

int resolve_kind(const std::string& kind, hgnp::DataConfig& data) {
    if (kind == "synthetic") data.kind = hgnp::DataKind::Synthetic;
    else if (kind == "idx") data.kind = hgnp::DataKind::Idx;
    else if (kind == "csv") data.kind = hgnp::DataKind::Csv;
    else {
        std::fprintf(stderr, "error: unknown --data-kind '%s'\n", kind.c_str());
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train-and-prune engine for small feed-forward networks"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "Run the train/prune schedule from a config file");
    std::string config_path;
    std::uint64_t seed_override = 0;
    bool has_seed_override = false;
    std::size_t threads = 1;
    train->add_option("--config", config_path, "configuration file")->required();
    train->add_option("--seed-override", seed_override, "replace the configured seed")
        ->each([&](const std::string&) { has_seed_override = true; });
    train->add_option("--threads", threads, "worker thread cap");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ckpt_path, eval_split = "validation", eval_loss = "cross_entropy";
    std::string eval_kind;
    std::uint64_t eval_seed = 1;
    hgnp::DataConfig eval_data;
    eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval->add_option("--split", eval_split, "train | validation");
    eval->add_option("--loss", eval_loss, "cross_entropy | mse");
    eval->add_option("--seed", eval_seed, "base seed for synthetic data");
    add_data_flags(eval, eval_data, eval_kind);

    // report
    auto* report = app.add_subcommand("report", "AUC and hybrid-curve reports from metrics files");
    hgnp::ReportArgs rargs;
    double threshold_val = -1.0;
    bool has_threshold = false;
    report->add_option("--metrics", rargs.metrics_path, "primary metrics.csv")->required();
    report->add_option("--baseline", rargs.baseline_path, "baseline metrics.csv");
    report->add_option("--threshold", threshold_val, "sparsity level splice point")
        ->each([&](const std::string&) { has_threshold = true; });
    report->add_option("--threshold-ref", rargs.threshold_ref,
                       "MODEL/DATASET reference threshold lookup");
    report->add_option("--out", rargs.out_dir, "output directory")->required();

    // sensitivity
    auto* sens = app.add_subcommand("sensitivity", "Exact vs first-order neuron scores");
    hgnp::SensitivityArgs sargs;
    std::string sens_kind, sens_loss = "cross_entropy";
    sens->add_option("--checkpoint", sargs.checkpoint_path, "checkpoint file")->required();
    sens->add_option("--mu", sargs.mu, "penalty coefficient");
    sens->add_option("--bound", sargs.bound, "spectral radius bound");
    sens->add_option("--batch-size", sargs.batch_size, "scoring batch size");
    sens->add_option("--seed", sargs.seed, "batch selection seed");
    sens->add_option("--loss", sens_loss, "cross_entropy | mse");
    sens->add_option("--out", sargs.out_path, "output CSV (default: stdout)");
    sens->add_option("--threads", sargs.threads, "parallel exact-score workers");
    add_data_flags(sens, sargs.data, sens_kind);

    CLI11_PARSE(app, argc, argv);

    if (train->parsed())
        return hgnp::cmd_train(config_path,
                               has_seed_override ? std::optional<std::uint64_t>(seed_override)
                                                 : std::nullopt,
                               threads);
    if (eval->parsed()) {
        if (int rc = resolve_kind(eval_kind, eval_data)) return rc;
        const auto kind = eval_loss == "mse" ? hgnp::LossKind::Mse : hgnp::LossKind::CrossEntropy;
        return hgnp::cmd_eval(ckpt_path, eval_data, eval_split, kind, eval_seed);
    }
    if (report->parsed()) {
        if (has_threshold) rargs.threshold = threshold_val;
        return hgnp::cmd_report(rargs);
    }
    if (sens->parsed()) {
        if (int rc = resolve_kind(sens_kind, sargs.data)) return rc;
        sargs.loss_kind = sens_loss == "mse" ? hgnp::LossKind::Mse : hgnp::LossKind::CrossEntropy;
        return hgnp::cmd_sensitivity(sargs);
    }
    return 1;
}
