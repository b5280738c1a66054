#include "hgnp/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "hgnp/analysis.hpp"
#include "hgnp/checkpoint.hpp"
#include "hgnp/sensitivity.hpp"
#include "hgnp/util.hpp"

namespace hgnp {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError(path.string() + ": cannot open for writing");
    return f;
}

void write_metrics_row(std::ofstream& f, const EpochMetrics& m) {
    f << m.epoch << ',' << format_double(m.train_loss) << ',' << format_double(m.penalty_value)
      << ',' << format_double(m.rho) << ',' << format_double(m.val_accuracy) << ','
      << format_double(m.kappa) << ',' << m.alive_neurons << ',' << (m.prune_event ? 1 : 0)
      << '\n';
}

int report_error(const std::exception& e, int code) {
    std::cerr << "error: " << e.what() << "\n";
    return code;
}

}  // namespace

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed_override,
              std::size_t threads) {
    (void)threads;  // training is single-threaded; kept for interface parity
    const auto t0 = std::chrono::steady_clock::now();
    try {
        FullConfig cfg = parse_config_file(config_path);
        if (seed_override) cfg.train.seed = *seed_override;
        if (cfg.output.dir.empty())
            throw ConfigError(config_path + ": [output] dir is required for train");

        fs::create_directories(cfg.output.dir);
        const fs::path out(cfg.output.dir);
        {
            std::ofstream echo = open_out(out / "config.echo");
            echo << render_config(cfg);
        }

        auto [train_data, val_data] = load_data(cfg.data, cfg.train.seed);
        if (!(train_data.shape == cfg.model.input))
            throw ConfigError("dataset shape does not match [model] input");

        MaskedNetwork net = init_network(cfg.model, cfg.train.seed);

        std::ofstream metrics = open_out(out / "metrics.csv");
        metrics << "epoch,train_loss,penalty,rho,val_accuracy,kappa,alive_neurons,prune_event\n";
        std::ofstream curvature;
        if (cfg.output.curvature_csv) {
            curvature = open_out(out / "curvature.csv");
            curvature << "epoch,layer,lambda_psi,lambda_gamma,lambda_block,rho,penalty\n";
        }
        std::ofstream sens = open_out(out / "sensitivity.csv");
        sens << "epoch,layer,neuron,raw,normalized,pruned\n";

        TrainHooks hooks;
        hooks.on_epoch = [&](const EpochMetrics& m) { write_metrics_row(metrics, m); };
        hooks.on_checkpoint = [&](const MaskedNetwork& n, std::size_t epoch) {
            save_checkpoint(n, (out / ("ckpt_" + std::to_string(epoch) + ".hgnp")).string());
        };
        hooks.on_prune = [&](std::size_t epoch, const SensitivityTable& table,
                             const PruneDecision& decision) {
            std::set<std::pair<std::size_t, std::size_t>> pruned(decision.to_mask.begin(),
                                                                 decision.to_mask.end());
            for (const auto& e : table.entries)
                sens << epoch << ',' << e.stack_index << ',' << e.unit << ','
                     << format_double(e.raw) << ',' << format_double(e.normalized) << ','
                     << (pruned.count({e.stack_index, e.unit}) ? 1 : 0) << '\n';
        };
        if (cfg.output.curvature_csv) {
            hooks.on_curvature = [&](std::size_t epoch, const std::vector<KfacBlock>& blocks,
                                     const SpectralEstimate& est, double penalty) {
                for (const auto& b : blocks)
                    curvature << epoch << ',' << b.stack_index << ','
                              << format_double(b.eig_psi.value) << ','
                              << format_double(b.eig_gamma.value) << ','
                              << format_double(b.eig_block.value) << ','
                              << format_double(est.rho) << ',' << format_double(penalty)
                              << '\n';
            };
        }

        RunResult result = hgnp_run(std::move(net), train_data,
                                    val_data ? &*val_data : nullptr, cfg.train, hooks);

        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const EpochMetrics& last = result.metrics.back();
        std::ofstream summary = open_out(out / "run_summary.txt");
        summary << "epochs = " << result.metrics.size() << "\n";
        summary << "final_kappa = " << format_double(last.kappa) << "\n";
        summary << "final_accuracy = " << format_double(last.val_accuracy) << "\n";
        summary << "final_rho = " << format_double(last.rho) << "\n";
        summary << "sparsity_infeasible = " << (result.sparsity_infeasible ? "true" : "false")
                << "\n";
        summary << "wall_seconds = " << format_double(wall) << "\n";

        std::cout << "run complete: kappa " << format_double(last.kappa) << ", accuracy "
                  << format_double(last.val_accuracy) << ", rho " << format_double(last.rho)
                  << "\n";
        return 0;
    } catch (const ConfigError& e) {
        return report_error(e, 1);
    } catch (const DivergenceError& e) {
        return report_error(e, 2);
    } catch (const std::exception& e) {
        return report_error(e, 1);
    }
}

int cmd_eval(const std::string& checkpoint_path, const DataConfig& data,
             const std::string& split, LossKind loss_kind, std::uint64_t data_seed_base) {
    try {
        MaskedNetwork net = load_checkpoint(checkpoint_path);
        auto [train_data, val_data] = load_data(data, data_seed_base);
        const Dataset* target = &train_data;
        if (split == "validation") {
            if (!val_data) throw ConfigError("no validation split configured");
            target = &*val_data;
        } else if (split != "train") {
            throw ConfigError("split must be 'train' or 'validation'");
        }
        auto [acc, mean_loss] = evaluate(net, *target, loss_kind);
        std::cout << "accuracy=" << format_double(acc) << " loss=" << format_double(mean_loss)
                  << " samples=" << target->size() << "\n";
        return 0;
    } catch (const std::exception& e) {
        return report_error(e, 1);
    }
}

int cmd_report(const ReportArgs& args) {
    try {
        if (args.out_dir.empty()) throw ConfigError("--out directory is required");
        fs::create_directories(args.out_dir);
        const fs::path out(args.out_dir);

        const auto primary_rows = read_metrics_csv(args.metrics_path);
        const auto primary = metrics_to_curve(primary_rows);
        if (primary.size() < 2)
            throw IoError(args.metrics_path + ": not enough distinct sparsity levels");

        std::ofstream auc_report = open_out(out / "auc_report.csv");
        auc_report << "curve,auc\n";
        auc_report << "primary," << format_double(auc(primary)) << '\n';

        if (!args.baseline_path.empty()) {
            const auto baseline = metrics_to_curve(read_metrics_csv(args.baseline_path));
            if (baseline.size() < 2)
                throw IoError(args.baseline_path + ": not enough distinct sparsity levels");
            auc_report << "baseline," << format_double(auc(baseline)) << '\n';

            double threshold;
            if (args.threshold) {
                threshold = *args.threshold;
            } else if (!args.threshold_ref.empty()) {
                const auto slash = args.threshold_ref.find('/');
                if (slash == std::string::npos)
                    throw ConfigError("--threshold-ref expects MODEL/DATASET");
                const std::string model = args.threshold_ref.substr(0, slash);
                const std::string dataset = args.threshold_ref.substr(slash + 1);
                threshold = -1.0;
                for (const auto& r : reference_thresholds())
                    if (r.model == model && r.dataset == dataset) threshold = r.threshold;
                if (threshold < 0.0)
                    throw ConfigError("no reference threshold for " + args.threshold_ref);
            } else {
                throw ConfigError("--threshold or --threshold-ref is required with --baseline");
            }

            HybridCurve hybrid = hybrid_curve(primary, baseline, threshold);
            std::ofstream hc = open_out(out / "hybrid_curve.csv");
            hc << "kappa,accuracy,source\n";
            for (std::size_t i = 0; i < hybrid.points.size(); ++i)
                hc << format_double(hybrid.points[i].kappa) << ','
                   << format_double(hybrid.points[i].accuracy) << ',' << hybrid.source[i]
                   << '\n';
            if (hybrid.points.size() >= 2)
                auc_report << "hybrid," << format_double(auc(hybrid.points)) << '\n';
        }
        return 0;
    } catch (const std::exception& e) {
        return report_error(e, 1);
    }
}

int cmd_sensitivity(const SensitivityArgs& args) {
    try {
        MaskedNetwork net = load_checkpoint(args.checkpoint_path);
        auto [train_data, val_data] = load_data(args.data, args.seed);
        (void)val_data;

        const auto order =
            batches(train_data.size(), args.batch_size, mix_seed(args.seed, 0x5e5eULL), 0);
        Matrix x = gather_rows(train_data.inputs, order.front());
        std::vector<int> y = gather_labels(train_data.labels, order.front());

        BatchTrace trace = forward(net, x);
        backward(net, trace, y, args.loss_kind);
        if (args.mu > 0.0) {
            std::vector<KfacBlock> blocks = accumulate_factors(net, trace);
            SpectralEstimate est = block_spectrum(blocks);
            if (est.rho > args.bound) {
                auto seed = hinge_activation_seed(net, trace, est, args.mu);
                if (seed) backward(net, trace, y, args.loss_kind, {*seed});
            }
        }
        SensitivityTable taylor = taylor_scores(net, trace);
        normalize_per_layer(taylor);
        SensitivityTable exact = exact_scores(net, x, y, args.loss_kind, args.mu, args.bound,
                                              1e-10, 10000, args.threads);
        normalize_per_layer(exact);

        std::ostream* os = &std::cout;
        std::ofstream file;
        if (!args.out_path.empty()) {
            file = open_out(args.out_path);
            os = &file;
        }
        *os << "layer,neuron,taylor_raw,taylor_normalized,exact_raw,exact_normalized\n";
        for (std::size_t i = 0; i < taylor.entries.size(); ++i) {
            const auto& t = taylor.entries[i];
            const auto& e = exact.entries[i];
            *os << t.stack_index << ',' << t.unit << ',' << format_double(t.raw) << ','
                << format_double(t.normalized) << ',' << format_double(e.raw) << ','
                << format_double(e.normalized) << '\n';
        }
        return 0;
    } catch (const std::exception& e) {
        return report_error(e, 1);
    }
}

}  // namespace hgnp
