#include "hgnp/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "hgnp/util.hpp"

namespace hgnp {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not a number");
    }
}

std::uint64_t parse_count(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size() || x < 0) throw std::invalid_argument(v);
        return std::uint64_t(x);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + v + "' is not a non-negative integer");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

TensorShape parse_input_shape(const std::string& v) {
    const auto parts = split(v, 'x');
    TensorShape shape;
    if (parts.size() == 1) {
        shape = TensorShape{std::size_t(parse_count("input", parts[0])), 1, 1, false};
    } else if (parts.size() == 3) {
        shape = TensorShape{std::size_t(parse_count("input", parts[0])),
                            std::size_t(parse_count("input", parts[1])),
                            std::size_t(parse_count("input", parts[2])), true};
    } else {
        throw ConfigError("key 'input': expected FEATURES or CxHxW, got '" + v + "'");
    }
    if (shape.flat() == 0) throw ConfigError("key 'input': shape has zero size");
    return shape;
}

std::vector<LayerSpec> parse_layer_dsl(const std::string& v) {
    std::vector<LayerSpec> out;
    for (const std::string& entry : split(v, ';')) {
        if (entry.empty()) continue;
        std::vector<std::string> tok;
        std::stringstream ss(entry);
        std::string t;
        while (ss >> t) tok.push_back(t);

        LayerSpec s;
        int group = -1;
        if (!tok.empty() && tok.back().rfind("@g", 0) == 0) {
            group = int(parse_count("spec", tok.back().substr(2)));
            tok.pop_back();
        }
        if (tok.empty()) throw ConfigError("key 'spec': empty layer entry");

        const std::string& kind = tok[0];
        if (kind == "dense") {
            if (tok.size() != 3)
                throw ConfigError("key 'spec': dense expects IN OUT, got '" + entry + "'");
            s.kind = LayerKind::Dense;
            s.fan_in = parse_count("spec", tok[1]);
            s.fan_out = parse_count("spec", tok[2]);
        } else if (kind == "conv") {
            if (tok.size() < 5 || tok.size() > 7)
                throw ConfigError("key 'spec': conv expects IN OUT KH KW [same|valid] [pool]");
            s.kind = LayerKind::Conv2d;
            s.fan_in = parse_count("spec", tok[1]);
            s.fan_out = parse_count("spec", tok[2]);
            s.kernel_h = parse_count("spec", tok[3]);
            s.kernel_w = parse_count("spec", tok[4]);
            for (std::size_t i = 5; i < tok.size(); ++i) {
                if (tok[i] == "same")
                    s.padding = Padding::Same;
                else if (tok[i] == "valid")
                    s.padding = Padding::Valid;
                else if (tok[i] == "pool")
                    s.fused_pool = true;
                else
                    throw ConfigError("key 'spec': unknown conv option '" + tok[i] + "'");
            }
        } else if (kind == "relu") {
            s.kind = LayerKind::Relu;
        } else if (kind == "flatten") {
            s.kind = LayerKind::Flatten;
        } else if (kind == "residual") {
            if (tok.size() != 2)
                throw ConfigError("key 'spec': residual expects a source layer index");
            s.kind = LayerKind::ResidualAdd;
            s.source_layer = int(parse_count("spec", tok[1]));
        } else {
            throw ConfigError("key 'spec': unknown layer kind '" + kind + "'");
        }
        s.group_id = group;
        out.push_back(s);
    }
    if (out.empty()) throw ConfigError("key 'spec': no layers given");
    return out;
}

std::string layer_dsl(const ModelSpec& model) {
    std::string out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& s = model.layers[i];
        if (i) out += "; ";
        switch (s.kind) {
            case LayerKind::Dense:
                out += "dense " + std::to_string(s.fan_in) + " " + std::to_string(s.fan_out);
                break;
            case LayerKind::Conv2d:
                out += "conv " + std::to_string(s.fan_in) + " " + std::to_string(s.fan_out) +
                       " " + std::to_string(s.kernel_h) + " " + std::to_string(s.kernel_w) +
                       (s.padding == Padding::Same ? " same" : " valid") +
                       (s.fused_pool ? " pool" : "");
                break;
            case LayerKind::Relu:
                out += "relu";
                break;
            case LayerKind::Flatten:
                out += "flatten";
                break;
            case LayerKind::ResidualAdd:
                out += "residual " + std::to_string(s.source_layer);
                break;
        }
        if (s.group_id >= 0) out += " @g" + std::to_string(s.group_id);
    }
    return out;
}

Ablation parse_ablation(const std::string& v) {
    if (v == "full") return Ablation::Full;
    if (v == "penalty_train_only") return Ablation::PenaltyTrainOnly;
    if (v == "penalty_prune_only") return Ablation::PenaltyPruneOnly;
    if (v == "baseline_mu0") return Ablation::BaselineMu0;
    throw ConfigError("key 'ablation': unknown value '" + v + "'");
}

LossKind parse_loss(const std::string& v) {
    if (v == "cross_entropy") return LossKind::CrossEntropy;
    if (v == "mse") return LossKind::Mse;
    throw ConfigError("key 'loss': unknown value '" + v + "'");
}

DataKind parse_kind(const std::string& v) {
    if (v == "synthetic") return DataKind::Synthetic;
    if (v == "idx") return DataKind::Idx;
    if (v == "csv") return DataKind::Csv;
    throw ConfigError("key 'kind': unknown value '" + v + "'");
}

}  // namespace

std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::Full: return "full";
        case Ablation::PenaltyTrainOnly: return "penalty_train_only";
        case Ablation::PenaltyPruneOnly: return "penalty_prune_only";
        case Ablation::BaselineMu0: return "baseline_mu0";
    }
    return "full";
}

std::string loss_name(LossKind k) {
    return k == LossKind::CrossEntropy ? "cross_entropy" : "mse";
}

FullConfig parse_config_text(const std::string& text, const std::string& source_name) {
    FullConfig cfg;
    std::string section;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool has_model = false;

    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = source_name + ":" + std::to_string(lineno);

        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = line.substr(1, line.size() - 2);
            if (section != "model" && section != "train" && section != "data" &&
                section != "output")
                throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError(where + ": key outside any section");

        try {
            if (section == "model") {
                if (key == "input")
                    cfg.model.input = parse_input_shape(value);
                else if (key == "spec") {
                    cfg.model.layers = parse_layer_dsl(value);
                    has_model = true;
                } else
                    throw ConfigError("unknown key '" + key + "' in [model]");
            } else if (section == "train") {
                RunConfig& t = cfg.train;
                if (key == "lr") t.lr = parse_real(key, value);
                else if (key == "momentum") t.momentum = parse_real(key, value);
                else if (key == "mu") t.mu = parse_real(key, value);
                else if (key == "bound") t.bound = parse_real(key, value);
                else if (key == "prune_n") t.prune_n = parse_count(key, value);
                else if (key == "e1") t.e1 = parse_count(key, value);
                else if (key == "e2") t.e2 = parse_count(key, value);
                else if (key == "e3") t.e3 = parse_count(key, value);
                else if (key == "target_sparsity") t.target_sparsity = parse_real(key, value);
                else if (key == "batch_size") t.batch_size = parse_count(key, value);
                else if (key == "seed") t.seed = parse_count(key, value);
                else if (key == "loss") t.loss = parse_loss(value);
                else if (key == "ablation") t.ablation = parse_ablation(value);
                else if (key == "eig_tol") t.eig_tol = parse_real(key, value);
                else if (key == "eig_max_iter") t.eig_max_iter = parse_count(key, value);
                else if (key == "weight_decay") t.weight_decay = parse_real(key, value);
                else if (key == "lr_decay_epochs") {
                    t.lr_decay_epochs.clear();
                    if (!value.empty())
                        for (const auto& e : split(value, ','))
                            if (!e.empty()) t.lr_decay_epochs.push_back(parse_count(key, e));
                } else if (key == "lr_decay_factor") t.lr_decay_factor = parse_real(key, value);
                else if (key == "factor_ema") t.factor_ema = parse_real(key, value);
                else if (key == "sensitivity_batches")
                    t.sensitivity_batches = parse_count(key, value);
                else if (key == "compact_on_prune") t.compact_on_prune = parse_bool(key, value);
                else if (key == "hflip") t.hflip = parse_real(key, value);
                else throw ConfigError("unknown key '" + key + "' in [train]");
            } else if (section == "data") {
                DataConfig& d = cfg.data;
                if (key == "kind") d.kind = parse_kind(value);
                else if (key == "classes") d.classes = parse_count(key, value);
                else if (key == "dim") d.dim = parse_count(key, value);
                else if (key == "train_samples") d.train_samples = parse_count(key, value);
                else if (key == "val_samples") d.val_samples = parse_count(key, value);
                else if (key == "separation") d.separation = parse_real(key, value);
                else if (key == "data_seed") d.data_seed = parse_count(key, value);
                else if (key == "train_images") d.train_images = value;
                else if (key == "train_labels") d.train_labels = value;
                else if (key == "val_images") d.val_images = value;
                else if (key == "val_labels") d.val_labels = value;
                else if (key == "train_csv") d.train_csv = value;
                else if (key == "val_csv") d.val_csv = value;
                else if (key == "features") d.features = parse_count(key, value);
                else if (key == "standardize") d.standardize_inputs = parse_bool(key, value);
                else throw ConfigError("unknown key '" + key + "' in [data]");
            } else {  // output
                if (key == "dir") cfg.output.dir = value;
                else if (key == "curvature_csv") cfg.output.curvature_csv = parse_bool(key, value);
                else throw ConfigError("unknown key '" + key + "' in [output]");
            }
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }

    if (!has_model) throw ConfigError(source_name + ": [model] spec is required");
    cfg.train.validate();
    try {
        init_network(cfg.model, 0);  // validates the layer chain
    } catch (const Error& e) {
        throw ConfigError(source_name + ": " + e.what());
    }
    if (cfg.data.kind == DataKind::Synthetic && cfg.data.classes < 2)
        throw ConfigError(source_name + ": key 'classes' must be >= 2");
    if (cfg.data.kind == DataKind::Idx &&
        (cfg.data.train_images.empty() || cfg.data.train_labels.empty()))
        throw ConfigError(source_name + ": keys 'train_images'/'train_labels' are required");
    if (cfg.data.kind == DataKind::Csv && (cfg.data.train_csv.empty() || cfg.data.features == 0))
        throw ConfigError(source_name + ": keys 'train_csv' and 'features' are required");
    return cfg;
}

FullConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path + ": cannot open config file");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string render_config(const FullConfig& cfg) {
    std::ostringstream out;
    const RunConfig& t = cfg.train;
    out << "[model]\n";
    out << "input = " << (cfg.model.input.image
                              ? std::to_string(cfg.model.input.channels) + "x" +
                                    std::to_string(cfg.model.input.height) + "x" +
                                    std::to_string(cfg.model.input.width)
                              : std::to_string(cfg.model.input.channels))
        << "\n";
    out << "spec = " << layer_dsl(cfg.model) << "\n\n";

    out << "[train]\n";
    out << "lr = " << format_double(t.lr) << "\n";
    out << "momentum = " << format_double(t.momentum) << "\n";
    out << "mu = " << format_double(t.mu) << "\n";
    out << "bound = " << format_double(t.bound) << "\n";
    out << "prune_n = " << t.prune_n << "\n";
    out << "e1 = " << t.e1 << "\n";
    out << "e2 = " << t.e2 << "\n";
    out << "e3 = " << t.e3 << "\n";
    out << "target_sparsity = " << format_double(t.target_sparsity) << "\n";
    out << "batch_size = " << t.batch_size << "\n";
    out << "seed = " << t.seed << "\n";
    out << "loss = " << loss_name(t.loss) << "\n";
    out << "ablation = " << ablation_name(t.ablation) << "\n";
    out << "eig_tol = " << format_double(t.eig_tol) << "\n";
    out << "eig_max_iter = " << t.eig_max_iter << "\n";
    out << "weight_decay = " << format_double(t.weight_decay) << "\n";
    out << "lr_decay_epochs = ";
    for (std::size_t i = 0; i < t.lr_decay_epochs.size(); ++i)
        out << (i ? "," : "") << t.lr_decay_epochs[i];
    out << "\n";
    out << "lr_decay_factor = " << format_double(t.lr_decay_factor) << "\n";
    out << "factor_ema = " << format_double(t.factor_ema) << "\n";
    out << "sensitivity_batches = " << t.sensitivity_batches << "\n";
    out << "compact_on_prune = " << (t.compact_on_prune ? "true" : "false") << "\n";
    out << "hflip = " << format_double(t.hflip) << "\n\n";

    const DataConfig& d = cfg.data;
    out << "[data]\n";
    if (d.kind == DataKind::Synthetic) {
        out << "kind = synthetic\n";
        out << "classes = " << d.classes << "\n";
        out << "dim = " << d.dim << "\n";
        out << "train_samples = " << d.train_samples << "\n";
        out << "val_samples = " << d.val_samples << "\n";
        out << "separation = " << format_double(d.separation) << "\n";
        out << "data_seed = " << d.data_seed << "\n";
    } else if (d.kind == DataKind::Idx) {
        out << "kind = idx\n";
        out << "train_images = " << d.train_images << "\n";
        out << "train_labels = " << d.train_labels << "\n";
        if (!d.val_images.empty()) {
            out << "val_images = " << d.val_images << "\n";
            out << "val_labels = " << d.val_labels << "\n";
        }
    } else {
        out << "kind = csv\n";
        out << "train_csv = " << d.train_csv << "\n";
        if (!d.val_csv.empty()) out << "val_csv = " << d.val_csv << "\n";
        out << "features = " << d.features << "\n";
    }
    out << "standardize = " << (d.standardize_inputs ? "true" : "false") << "\n\n";

    out << "[output]\n";
    out << "dir = " << cfg.output.dir << "\n";
    out << "curvature_csv = " << (cfg.output.curvature_csv ? "true" : "false") << "\n";
    return out.str();
}

std::pair<Dataset, std::optional<Dataset>> load_data(const DataConfig& data,
                                                     std::uint64_t train_seed) {
    const std::uint64_t seed =
        data.data_seed != 0 ? data.data_seed : mix_seed(train_seed, 0xda7a5eedULL);
    Dataset train;
    std::optional<Dataset> val;
    switch (data.kind) {
        case DataKind::Synthetic: {
            Dataset all = synth_gaussian_blobs(data.classes, data.dim,
                                               data.train_samples + data.val_samples,
                                               data.separation, seed);
            auto [tr, va] = split_dataset(all, data.train_samples);
            train = std::move(tr);
            if (va.size() > 0) val = std::move(va);
            break;
        }
        case DataKind::Idx: {
            train = load_idx(data.train_images, data.train_labels);
            if (!data.val_images.empty()) val = load_idx(data.val_images, data.val_labels);
            break;
        }
        case DataKind::Csv: {
            train = load_csv(data.train_csv, data.features);
            if (!data.val_csv.empty()) val = load_csv(data.val_csv, data.features);
            break;
        }
    }
    if (data.standardize_inputs) {
        standardize(train);
        if (val) standardize(*val);
    }
    train.split = "train";
    if (val) val->split = "validation";
    return {std::move(train), std::move(val)};
}

}  // namespace hgnp
