// consolidator: budget, training, consolidation, verification and benchmarks
// for grouped-connected adapters on a toy ViT.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "consolidator/bench.hpp"
#include "consolidator/budget.hpp"
#include "consolidator/errors.hpp"
#include "consolidator/storage.hpp"
#include "consolidator/trainer.hpp"
#include "consolidator/verify.hpp"

using namespace consolidator;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

class Report {
public:
    template <typename V>
    void add(const std::string& key, const V& value) {
        std::ostringstream os;
        if constexpr (std::is_floating_point_v<V>) {
            os << std::setprecision(10) << value;
        } else if constexpr (std::is_same_v<V, bool>) {
            os << (value ? "true" : "false");
        } else {
            os << value;
        }
        lines_.emplace_back(key, os.str());
    }

    void emit(const std::string& path) const {
        std::ostringstream os;
        for (const auto& [k, v] : lines_) os << k << '=' << v << '\n';
        std::cout << os.str();
        if (!path.empty()) {
            std::ofstream out(path, std::ios::binary);
            if (!out) throw std::runtime_error("cannot write report '" + path + "'");
            out << os.str();
        }
    }

private:
    std::vector<std::pair<std::string, std::string>> lines_;
};

std::string join(const std::vector<std::size_t>& v, char sep = ',') {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
    return s;
}

std::vector<std::size_t> parse_groups(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(item, &pos);
        if (pos != item.size() || v == 0) throw std::invalid_argument("bad group value '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

std::uint64_t seed_override(std::uint64_t fallback) {
    if (const char* env = std::getenv("CONSOLIDATOR_SEED"); env && *env) {
        std::size_t pos = 0;
        const std::string s(env);
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("CONSOLIDATOR_SEED is not an integer: '" + s + "'");
        return v;
    }
    return fallback;
}

ViTConfig preset(const std::string& name) {
    if (name == "vit-mini") return ViTConfig::mini();
    if (name == "vit-b16") return ViTConfig::vit_b16();
    throw std::invalid_argument("unknown preset '" + name + "'");
}

bool is_f64(const Checkpoint& ckpt) {
    return ckpt.at("patch_embed.weight").dtype() == DType::F64;
}

// Plain "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

struct TrainSettings {
    TrainConfig train;
    SynthTaskSpec data;
    std::optional<std::vector<std::size_t>> groups;
    LayerOptions options;
};

TrainSettings parse_train_settings(const std::map<std::string, std::string>& kv) {
    TrainSettings s;
    auto as_bool = [](const std::string& k, const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("key '" + k + "' expects true/false, got '" + v + "'");
    };
    auto as_size = [](const std::string& k, const std::string& v) {
        std::size_t pos = 0;
        const auto r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("key '" + k + "' expects an integer, got '" + v + "'");
        return static_cast<std::size_t>(r);
    };
    auto as_double = [](const std::string& k, const std::string& v) {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("key '" + k + "' expects a number, got '" + v + "'");
        return r;
    };
    for (const auto& [k, v] : kv) {
        try {
            if (k == "lr") s.train.lr = as_double(k, v);
            else if (k == "momentum") s.train.momentum = as_double(k, v);
            else if (k == "weight_decay") s.train.weight_decay = as_double(k, v);
            else if (k == "epochs") s.train.epochs = as_size(k, v);
            else if (k == "batch_size") s.train.batch_size = as_size(k, v);
            else if (k == "droppath") s.train.droppath_p = as_double(k, v);
            else if (k == "seed") s.train.seed = as_size(k, v);
            else if (k == "head_only") s.train.head_only = as_bool(k, v);
            else if (k == "data_seed") s.data.seed = as_size(k, v);
            else if (k == "train_samples") s.data.train_samples = as_size(k, v);
            else if (k == "test_samples") s.data.test_samples = as_size(k, v);
            else if (k == "noise_sigma") s.data.noise_sigma = as_double(k, v);
            else if (k == "groups") s.groups = parse_groups(v);
            else if (k == "reorder") s.options.reorder = as_bool(k, v);
            else if (k == "branch_bias") s.options.branch_bias = as_bool(k, v);
            else if (k == "tune_base_bias") s.options.tune_base_bias = as_bool(k, v);
            else throw std::invalid_argument("unknown config key '" + k + "'");
        } catch (const std::logic_error& e) {
            if (dynamic_cast<const std::invalid_argument*>(&e) && std::string(e.what()).find(k) != std::string::npos) throw;
            throw std::invalid_argument("bad value for '" + k + "': '" + v + "'");
        }
    }
    if (const char* env = std::getenv("CONSOLIDATOR_SEED"); env && *env) {
        s.train.seed = seed_override(s.train.seed);
        s.data.seed = s.train.seed;
    }
    s.train.validate();
    return s;
}

// ---------------------------------------------------------------- budget

int cmd_budget(const std::string& preset_name, const std::string& groups_text, const BudgetOptions& opts,
               const std::string& report_path) {
    const ViTConfig cfg = preset(preset_name);
    const auto groups = parse_groups(groups_text);
    const auto b = compute_budget(cfg, groups, opts);
    Report r;
    r.add("preset", preset_name);
    r.add("groups", join(groups));
    r.add("include_head", opts.include_head);
    r.add("include_layernorm", opts.include_layernorm);
    r.add("tuned_weights", b.tuned_weights);
    r.add("tuned_biases", b.tuned_biases);
    r.add("tuned_total", b.tuned_total());
    r.add("stored_weights_per_block", b.stored_weights_per_block);
    r.add("stored_biases_per_block", b.stored_biases_per_block);
    r.add("stored_weights", b.stored_weights);
    r.add("stored_biases", b.stored_biases);
    r.add("layernorm", b.layernorm);
    r.add("head", b.head);
    r.add("stored_total", b.stored_total());
    r.add("backbone_total", b.backbone_total);
    r.add("tuned_percent", b.tuned_percent());
    r.add("stored_percent", b.stored_percent());
    r.add("status", "pass");
    r.emit(report_path);
    return kOk;
}

// ---------------------------------------------------------------- init-backbone

int cmd_init_backbone(const std::string& preset_name, std::uint64_t seed, const std::string& precision,
                      const std::string& out, const std::string& report_path) {
    ViTConfig cfg = preset(preset_name);
    seed = seed_override(seed);
    Checkpoint ckpt;
    if (precision == "f32") ckpt = backbone_checkpoint(init_backbone<float>(cfg, seed));
    else if (precision == "f64") ckpt = backbone_checkpoint(init_backbone<double>(cfg, seed));
    else throw std::invalid_argument("precision must be f32 or f64");
    save_checkpoint(ckpt, out);
    Report r;
    r.add("preset", preset_name);
    r.add("seed", seed);
    r.add("precision", precision);
    r.add("tensors", ckpt.size());
    r.add("parameters", ckpt.parameter_count());
    r.add("output", out);
    r.add("status", "pass");
    r.emit(report_path);
    return kOk;
}

// ---------------------------------------------------------------- train

template <typename T>
int run_train(const Checkpoint& backbone, const TrainSettings& s, const std::string& out,
              const std::string& metrics_path, const std::string& report_path) {
    ViTConfig cfg = config_from_checkpoint(backbone);
    cfg.groups = s.groups.value_or(ViTConfig::mini().groups);
    cfg.layer_options = s.options;
    cfg.droppath_p = s.train.droppath_p;
    ViTModel<T> model = attach_consolidators<T>(backbone, cfg);

    SynthTaskSpec data = s.data;
    data.classes = cfg.classes;
    data.image_size = cfg.image_size;
    data.channels = cfg.channels;
    const auto [train_set, test_set] = make_synth_dataset<T>(data);

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path, std::ios::binary);
        if (!metrics) throw std::runtime_error("cannot write metrics '" + metrics_path + "'");
    }
    const auto history = train(model, train_set, test_set, s.train, [&](const EpochMetrics& m) {
        std::ostringstream line;
        line << std::setprecision(10) << "epoch=" << m.epoch << " loss=" << m.loss << " accuracy=" << m.accuracy;
        std::cout << line.str() << " seconds=" << std::setprecision(4) << m.seconds << std::endl;
        if (metrics) metrics << line.str() << '\n';
    });
    save_checkpoint(model_checkpoint(model), out);

    Report r;
    r.add("groups", join(cfg.groups));
    r.add("epochs", s.train.epochs);
    r.add("initial_loss", history.front().loss);
    r.add("final_loss", history.back().loss);
    r.add("final_accuracy", history.back().accuracy);
    bool frozen_ok = true;
    for (const auto& m : history) frozen_ok = frozen_ok && m.frozen_fingerprint == history.front().frozen_fingerprint;
    r.add("frozen_unchanged", frozen_ok);
    r.add("output", out);
    r.add("status", frozen_ok ? "pass" : "fail");
    r.emit(report_path);
    return frozen_ok ? kOk : kFailed;
}

int cmd_train(const std::string& config_path, const std::string& backbone_path, const std::string& out,
              const std::string& metrics_path, const std::string& report_path) {
    const TrainSettings s = parse_train_settings(read_config(config_path));
    const Checkpoint backbone = load_checkpoint(backbone_path);
    return is_f64(backbone) ? run_train<double>(backbone, s, out, metrics_path, report_path)
                            : run_train<float>(backbone, s, out, metrics_path, report_path);
}

// ---------------------------------------------------------------- consolidate / apply

int cmd_consolidate(const std::string& model_path, const std::string& out, const std::string& report_path) {
    const Checkpoint ckpt = load_checkpoint(model_path);
    const TaskDelta delta = is_f64(ckpt) ? make_task_delta(model_from_checkpoint<double>(ckpt))
                                         : make_task_delta(model_from_checkpoint<float>(ckpt));
    save_delta(delta, out);
    std::size_t nnz = 0;
    for (const auto& l : delta.layers) nnz += l.weight.nnz();
    std::ostringstream fp;
    fp << std::hex << std::setw(16) << std::setfill('0') << delta.backbone_fingerprint;
    Report r;
    r.add("layers", delta.layers.size());
    r.add("weight_nnz", nnz);
    r.add("stored_parameters", delta.stored_parameter_count());
    r.add("backbone_fingerprint", fp.str());
    r.add("output", out);
    r.add("status", "pass");
    r.emit(report_path);
    return kOk;
}

int cmd_apply(const std::string& backbone_path, const std::string& delta_path, const std::string& out,
              const std::string& report_path) {
    const Checkpoint backbone = load_checkpoint(backbone_path);
    const TaskDelta delta = load_delta(delta_path);
    Checkpoint merged;
    try {
        merged = apply_delta(backbone, delta);
    } catch (const FingerprintMismatch& e) {
        std::cerr << "error: " << e.what() << "; refusing to merge, nothing written\n";
        Report r;
        r.add("status", "fail");
        r.add("reason", "fingerprint_mismatch");
        r.emit(report_path);
        return kFailed;
    }
    save_checkpoint(merged, out);
    Report r;
    r.add("tensors", merged.size());
    r.add("parameters", merged.parameter_count());
    r.add("backbone_parameters", backbone.parameter_count());
    r.add("output", out);
    r.add("status", "pass");
    r.emit(report_path);
    return kOk;
}

// ---------------------------------------------------------------- verify

template <typename T>
int run_verify(const Checkpoint& model_ckpt, const Checkpoint& merged, double tol, std::size_t samples,
               std::uint64_t seed, const std::string& report_path) {
    const ViTModel<T> model = model_from_checkpoint<T>(model_ckpt);
    const auto rep = verify_equivalence(model, merged, samples, tol, seed);
    Report r;
    r.add("samples", rep.samples);
    r.add("tolerance", rep.tolerance);
    double worst = 0.0;
    for (const auto& l : rep.layers) worst = std::max(worst, l.deviation.max_rel);
    r.add("layers", rep.layers.size());
    r.add("layer_max_rel", worst);
    r.add("logits_max_abs", rep.logits.max_abs);
    r.add("logits_max_rel", rep.logits.max_rel);
    r.add("status", rep.pass ? "pass" : "fail");
    r.emit(report_path);
    return rep.pass ? kOk : kFailed;
}

int cmd_verify(const std::string& model_path, const std::string& merged_path, double tol, std::size_t samples,
               std::uint64_t seed, const std::string& report_path) {
    const Checkpoint model = load_checkpoint(model_path);
    const Checkpoint merged = load_checkpoint(merged_path);
    seed = seed_override(seed);
    return is_f64(model) ? run_verify<double>(model, merged, tol, samples, seed, report_path)
                         : run_verify<float>(model, merged, tol, samples, seed, report_path);
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& preset_name, const std::string& groups_text, double droppath, double eps,
                  std::size_t per_kind, std::size_t batch, std::uint64_t seed, const std::string& report_path) {
    ViTConfig cfg = preset(preset_name);
    cfg.groups = parse_groups(groups_text);
    cfg.droppath_p = droppath;
    seed = seed_override(seed);
    ViTModel<double> model = attach_consolidators<double>(backbone_checkpoint(init_backbone<double>(cfg, seed)), cfg);
    // Branches start at zero; give them values so every path carries signal.
    Rng rng(seed + 1);
    std::normal_distribution<double> n(0.0, 0.05);
    for (auto* l : model.layers()) {
        for (auto& b : l->branches) {
            for (auto& v : b.weight.data()) v = n(rng);
            for (auto& v : b.bias.data()) v = n(rng);
        }
    }
    SynthTaskSpec spec;
    spec.seed = seed;
    spec.classes = cfg.classes;
    spec.image_size = cfg.image_size;
    spec.channels = cfg.channels;
    spec.train_samples = batch;
    spec.test_samples = 1;
    const auto data = make_synth_dataset<double>(spec).first;
    const auto rep = finite_diff_gradcheck(model, data.images, data.labels, eps, per_kind, seed);
    const bool pass = rep.max_rel_error < 1e-4 && rep.frozen_all_zero;
    Report r;
    r.add("coordinates", rep.coordinates);
    for (const auto& [kind, count] : rep.per_kind) r.add("coordinates." + kind, count);
    r.add("max_rel_error", rep.max_rel_error);
    r.add("worst", rep.worst);
    r.add("frozen_checked", rep.frozen_checked);
    r.add("frozen_all_zero", rep.frozen_all_zero);
    r.add("status", pass ? "pass" : "fail");
    r.emit(report_path);
    return pass ? kOk : kFailed;
}

// ---------------------------------------------------------------- bench

template <typename T>
int run_bench(const Checkpoint& backbone, const Checkpoint& merged, const Checkpoint& model_ckpt,
              const BenchOptions& opts, const std::string& report_path) {
    const ViTModel<T> plain = model_from_checkpoint<T>(backbone);
    const ViTModel<T> flat = model_from_checkpoint<T>(merged);
    const ViTModel<T> live = model_from_checkpoint<T>(model_ckpt);
    if (!plain.config.same_architecture(flat.config) || !plain.config.same_architecture(live.config)) {
        throw StructuralError("bench: the three checkpoints do not share one architecture");
    }
    const auto res = bench_throughput<T>({&plain, &flat, &live}, {"plain", "merged", "unmerged"}, opts);
    const double merged_ratio = median_ratio(res[1], res[0]);
    const double unmerged_ratio = median_ratio(res[2], res[0]);
    const bool asserted = opts.reps >= 3;
    const bool pass = !asserted || (merged_ratio >= 0.98 && merged_ratio <= 1.02 && unmerged_ratio < 1.0);
    Report r;
    r.add("batch", opts.batch);
    r.add("reps", opts.reps);
    for (const auto& x : res) r.add("images_per_second." + x.label, x.images_per_second);
    r.add("ratio.merged_vs_plain", merged_ratio);
    r.add("ratio.unmerged_vs_plain", unmerged_ratio);
    r.add("asserted", asserted);
    r.add("status", pass ? "pass" : "fail");
    r.emit(report_path);
    return pass ? kOk : kFailed;
}

int cmd_bench(const std::string& backbone_path, const std::string& merged_path, const std::string& model_path,
              BenchOptions opts, const std::string& report_path) {
    const Checkpoint backbone = load_checkpoint(backbone_path);
    const Checkpoint merged = load_checkpoint(merged_path);
    const Checkpoint model = load_checkpoint(model_path);
    opts.seed = seed_override(opts.seed);
    if (is_f64(backbone) != is_f64(merged) || is_f64(backbone) != is_f64(model)) {
        throw StructuralError("bench: checkpoints differ in precision");
    }
    return is_f64(backbone) ? run_bench<double>(backbone, merged, model, opts, report_path)
                            : run_bench<float>(backbone, merged, model, opts, report_path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grouped-connected adapters for a toy ViT: train, consolidate, merge, verify."};
    app.require_subcommand(1);
    std::string report;
    app.add_option("--report", report, "Also write the key=value report to this file");

    auto* budget = app.add_subcommand("budget", "Tuned and stored parameter counts");
    std::string b_preset = "vit-mini", b_groups = "8,16";
    BudgetOptions b_opts;
    bool no_reorder = false, no_branch_bias = false, no_base_bias = false;
    budget->add_option("--preset", b_preset, "vit-mini or vit-b16")->capture_default_str();
    budget->add_option("--groups", b_groups, "Comma separated branch groups")->capture_default_str();
    budget->add_flag("--head,!--no-head", b_opts.include_head, "Count the classification head");
    budget->add_flag("--layernorm,!--no-layernorm", b_opts.include_layernorm, "Count LayerNorm parameters");
    budget->add_flag("--no-reorder", no_reorder, "Ablation: branches without channel reorder");
    budget->add_flag("--no-branch-bias", no_branch_bias, "Ablation: branches carry no bias");
    budget->add_flag("--no-base-bias", no_base_bias, "Ablation: base biases stay frozen");

    auto* init = app.add_subcommand("init-backbone", "Write a random stand-in backbone checkpoint");
    std::string i_preset = "vit-mini", i_precision = "f32", i_out;
    std::uint64_t i_seed = 0;
    init->add_option("--preset", i_preset)->capture_default_str();
    init->add_option("--seed", i_seed)->capture_default_str();
    init->add_option("--precision", i_precision, "f32 or f64")->capture_default_str();
    init->add_option("--out", i_out)->required();

    auto* trn = app.add_subcommand("train", "Train consolidators on the synthetic task");
    std::string t_config, t_backbone, t_out, t_metrics;
    trn->add_option("--config", t_config, "key = value training config")->required();
    trn->add_option("--backbone", t_backbone)->required()->check(CLI::ExistingFile);
    trn->add_option("--out", t_out, "Model checkpoint with branches")->required();
    trn->add_option("--metrics", t_metrics, "Per-epoch metrics file");

    auto* cons = app.add_subcommand("consolidate", "Merge trained branches into a sparse task delta");
    std::string c_model, c_out;
    cons->add_option("--model", c_model)->required()->check(CLI::ExistingFile);
    cons->add_option("--out", c_out)->required();

    auto* apply = app.add_subcommand("apply", "Add a task delta back into the backbone");
    std::string a_backbone, a_delta, a_out;
    apply->add_option("--backbone", a_backbone)->required()->check(CLI::ExistingFile);
    apply->add_option("--delta", a_delta)->required()->check(CLI::ExistingFile);
    apply->add_option("--out", a_out)->required();

    auto* ver = app.add_subcommand("verify", "Compare the unmerged model with a merged checkpoint");
    std::string v_model, v_merged;
    double v_tol = 1e-4;
    std::size_t v_samples = 100;
    std::uint64_t v_seed = 0;
    ver->add_option("--model", v_model)->required()->check(CLI::ExistingFile);
    ver->add_option("--merged", v_merged)->required()->check(CLI::ExistingFile);
    ver->add_option("--tol", v_tol)->capture_default_str();
    ver->add_option("--samples", v_samples)->capture_default_str();
    ver->add_option("--seed", v_seed)->capture_default_str();

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check at 64-bit");
    std::string g_preset = "vit-mini", g_groups = "8,16";
    double g_droppath = 0.2, g_eps = 1e-5;
    std::size_t g_per_kind = 48, g_batch = 4;
    std::uint64_t g_seed = 0;
    gc->add_option("--preset", g_preset)->capture_default_str();
    gc->add_option("--groups", g_groups)->capture_default_str();
    gc->add_option("--droppath", g_droppath)->capture_default_str();
    gc->add_option("--eps", g_eps)->capture_default_str();
    gc->add_option("--per-kind", g_per_kind, "Coordinates sampled per tensor kind")->capture_default_str();
    gc->add_option("--batch", g_batch)->capture_default_str();
    gc->add_option("--seed", g_seed)->capture_default_str();

    auto* bench = app.add_subcommand("bench", "Eval throughput of plain, merged and unmerged models");
    std::string bn_backbone, bn_merged, bn_model;
    BenchOptions bn_opts;
    bench->add_option("--backbone", bn_backbone)->required()->check(CLI::ExistingFile);
    bench->add_option("--merged", bn_merged)->required()->check(CLI::ExistingFile);
    bench->add_option("--model", bn_model, "Unmerged model checkpoint")->required()->check(CLI::ExistingFile);
    bench->add_option("--batch", bn_opts.batch)->capture_default_str();
    bench->add_option("--reps", bn_opts.reps)->capture_default_str();
    bench->add_option("--warmup", bn_opts.warmup)->capture_default_str();
    bench->add_option("--iterations", bn_opts.iterations, "Forwards per timed rep")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*budget) {
            b_opts.reorder = !no_reorder;
            b_opts.branch_bias = !no_branch_bias;
            b_opts.tune_base_bias = !no_base_bias;
            return cmd_budget(b_preset, b_groups, b_opts, report);
        }
        if (*init) return cmd_init_backbone(i_preset, i_seed, i_precision, i_out, report);
        if (*trn) return cmd_train(t_config, t_backbone, t_out, t_metrics, report);
        if (*cons) return cmd_consolidate(c_model, c_out, report);
        if (*apply) return cmd_apply(a_backbone, a_delta, a_out, report);
        if (*ver) return cmd_verify(v_model, v_merged, v_tol, v_samples, v_seed, report);
        if (*gc) return cmd_gradcheck(g_preset, g_groups, g_droppath, g_eps, g_per_kind, g_batch, g_seed, report);
        if (*bench) return cmd_bench(bn_backbone, bn_merged, bn_model, bn_opts, report);
    } catch (const FingerprintMismatch& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kUsage;
    } catch (const StructuralError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::logic_error& e) {
        // DimensionError, GroupDivisibilityError, IndexError and bad arguments
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    }
    return kUsage;
}
