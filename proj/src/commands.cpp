#include "dmpnet/commands.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dmpnet/dataset.hpp"
#include "dmpnet/gradsuite.hpp"
#include "dmpnet/metrics.hpp"
#include "dmpnet/netpbm.hpp"
#include "dmpnet/serialize.hpp"

namespace dmpnet {

namespace fs = std::filesystem;

namespace {

ConfigMap load_config_map(const CommandContext& ctx) {
    return ctx.config_path.empty() ? ConfigMap{} : parse_config_file(ctx.config_path);
}

// One config file is usable across commands: every command accepts the full
// key union and type-checks it, each uses the part it needs, and any leftover
// key is a typo caught by finish().
struct ParsedRunConfig {
    NetworkConfig network;
    SynthConfig synth;
    TrainOptions train;
};

ParsedRunConfig parse_run_config(const CommandContext& ctx, const ConfigMap& map) {
    ConfigReader reader(map, ctx.config_path.empty() ? "config" : ctx.config_path);
    ParsedRunConfig out;
    out.network = parse_network_config(reader);
    out.synth = parse_synth_config(reader, ctx.seed);
    out.train = parse_train_options(reader);
    reader.finish();
    return out;
}

void print_header(const CommandContext& ctx, const char* command, const ConfigMap& map) {
    std::printf("dmpnet %s command=%s seed=%" PRIu64 " config=%016" PRIx64 "\n",
                kVersionString, command, ctx.seed, config_hash(map));
    std::fflush(stdout);
}

int require_six(std::vector<int> v, const char* key, std::array<int, 6>& out) {
    require(v.size() == 6, std::string("config: '") + key + "' needs exactly 6 values");
    std::copy(v.begin(), v.end(), out.begin());
    return 0;
}

}  // namespace

NetworkConfig parse_network_config(ConfigReader& reader) {
    NetworkConfig cfg;
    cfg.input_size = reader.get_int("input_size", cfg.input_size);
    if (reader.has("encoder_widths"))
        require_six(reader.get_int_list("encoder_widths", {}), "encoder_widths",
                    cfg.encoder_widths);
    cfg.fcc_channels = reader.get_int("fcc_channels", cfg.fcc_channels);
    cfg.dmp_levels = reader.get_int_list("dmp_levels", cfg.dmp_levels);
    cfg.dmp.depth_levels = reader.get_int_list("dmp_depth_levels", cfg.dmp.depth_levels);
    cfg.dmp.group_count = reader.get_int("dmp_group_count", cfg.dmp.group_count);
    cfg.dmp.iterations = reader.get_int("dmp_iterations", cfg.dmp.iterations);
    cfg.dmp.level_weights = reader.get_float_list("dmp_level_weights", cfg.dmp.level_weights);
    cfg.dmp.softmax_affinity = reader.get_bool("dmp_softmax", cfg.dmp.softmax_affinity);

    const std::string fuse = reader.get_string("dmp_fuse", "residual");
    if (fuse == "residual")
        cfg.dmp.fuse_mode = DmpConfig::Fuse::residual;
    else if (fuse == "concat")
        cfg.dmp.fuse_mode = DmpConfig::Fuse::concat;
    else
        fail("config: dmp_fuse must be 'residual' or 'concat', got '" + fuse + "'");

    const std::string lambda = reader.get_string("lambda_mode", "auto");
    if (lambda == "auto")
        cfg.lambda_mode = NetworkConfig::Lambda::automatic;
    else if (lambda == "fixed")
        cfg.lambda_mode = NetworkConfig::Lambda::fixed;
    else
        fail("config: lambda_mode must be 'auto' or 'fixed', got '" + lambda + "'");
    cfg.lambda_fixed = reader.get_float("lambda_fixed", cfg.lambda_fixed);

    const std::string modality = reader.get_string("modality", "both");
    if (modality == "both")
        cfg.modality = NetworkConfig::Modality::both;
    else if (modality == "rgb")
        cfg.modality = NetworkConfig::Modality::rgb_only;
    else if (modality == "depth")
        cfg.modality = NetworkConfig::Modality::depth_only;
    else
        fail("config: modality must be 'both', 'rgb' or 'depth', got '" + modality + "'");

    cfg.validate();
    return cfg;
}

SynthConfig parse_synth_config(ConfigReader& reader, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.image_size = reader.get_int("image_size", cfg.image_size);
    cfg.n_train = reader.get_int("n_train", cfg.n_train);
    cfg.n_test = reader.get_int("n_test", cfg.n_test);
    cfg.shapes_min = reader.get_int("shapes_min", cfg.shapes_min);
    cfg.shapes_max = reader.get_int("shapes_max", cfg.shapes_max);
    cfg.depth_contrast = reader.get_float("depth_contrast", cfg.depth_contrast);
    cfg.rgb_contrast = reader.get_float("rgb_contrast", cfg.rgb_contrast);
    cfg.clutter = reader.get_float("clutter", cfg.clutter);
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

TrainOptions parse_train_options(ConfigReader& reader) {
    TrainOptions opt;
    opt.lr = reader.get_float("lr", opt.lr);
    opt.weight_decay = reader.get_float("weight_decay", opt.weight_decay);
    opt.epochs = reader.get_int("epochs", opt.epochs);
    require(opt.epochs >= 0, "config: epochs must be non-negative");
    require(opt.lr >= 0.f, "config: lr must be non-negative");
    return opt;
}

void cmd_gen_data(const CommandContext& ctx) {
    require(!ctx.out.empty(), "gen-data: --out directory required");
    const ConfigMap map = load_config_map(ctx);
    print_header(ctx, "gen-data", map);
    const SynthConfig cfg = parse_run_config(ctx, map).synth;
    synth_generate(cfg, ctx.out);
    std::printf("wrote %d train and %d test scenes of size %d to %s\n", cfg.n_train,
                cfg.n_test, cfg.image_size, ctx.out.c_str());
}

namespace {

std::vector<Sample> load_sized_dataset(const std::string& dir, int input_size, bool need_gt) {
    std::vector<Sample> samples = load_dataset(dir, need_gt);
    for (const Sample& s : samples)
        require(s.rgb.shape().h == input_size && s.rgb.shape().w == input_size,
                "dataset: sample " + s.id + " is " + std::to_string(s.rgb.shape().h) + "x" +
                    std::to_string(s.rgb.shape().w) + " but input_size is " +
                    std::to_string(input_size));
    return samples;
}

double validation_mae(const std::vector<Sample>& val, const NetworkParamsF& params,
                      const NetworkConfig& cfg) {
    double sum = 0;
    for (const Sample& s : val) {
        PredictionT<float> pred = predict(s.rgb, replicate3(s.depth), params, cfg);
        sum += mae(pred.s_final, s.gt);
    }
    return sum / static_cast<double>(val.size());
}

}  // namespace

void cmd_train(const CommandContext& ctx, const std::string& train_dir,
               const std::string& val_dir) {
    require(!ctx.out.empty(), "train: --out checkpoint path required");
    const ConfigMap map = load_config_map(ctx);
    print_header(ctx, "train", map);
    const ParsedRunConfig run = parse_run_config(ctx, map);
    const NetworkConfig& cfg = run.network;
    const TrainOptions& opt = run.train;

    std::vector<Sample> train = load_sized_dataset(train_dir, cfg.input_size, true);
    std::vector<Sample> val =
        val_dir.empty() ? train : load_sized_dataset(val_dir, cfg.input_size, true);

    NetworkParamsF params = make_network_params<float>(cfg);
    init_network_params(params, cfg, ctx.seed);

    AdamConfig adam_cfg;
    adam_cfg.lr = opt.lr;
    adam_cfg.weight_decay = opt.weight_decay;
    Adam optimizer(adam_cfg);

    const std::string log_path = ctx.out + ".log";
    std::ofstream log(log_path, std::ios::trunc);
    require(log.good(), "train: cannot write " + log_path);

    Rng aug_rng(ctx.seed ^ 0xA076'1D64'78BD'642Full);
    Rng order_rng(ctx.seed ^ 0xE703'7ED1'A0B4'28DBull);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[order_rng.uniform_int(0, static_cast<int>(i))]);
        double sum_total = 0, sum_final = 0, sum_global = 0;
        for (std::size_t idx : order) {
            const Sample s = augment_sample(train[idx], aug_rng);
            const StepStats stats =
                train_step(s.rgb, replicate3(s.depth), s.gt, params, cfg, optimizer);
            sum_total += stats.loss_total;
            sum_final += stats.loss_final;
            sum_global += stats.loss_global;
        }
        const double n = static_cast<double>(order.size());
        const double vmae = validation_mae(val, params, cfg);
        char line[160];
        std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.6f", epoch, sum_total / n,
                      sum_final / n, sum_global / n, vmae);
        log << line << "\n";
        log.flush();
        std::printf("%s\n", line);
        std::fflush(stdout);
    }
    save_checkpoint(ctx.out, params, cfg);
    std::printf("checkpoint written to %s (log: %s)\n", ctx.out.c_str(), log_path.c_str());
}

void cmd_infer(const CommandContext& ctx, const std::string& checkpoint_path,
               const std::string& data_dir) {
    require(!ctx.out.empty(), "infer: --out directory required");
    const ConfigMap map = load_config_map(ctx);
    print_header(ctx, "infer", map);
    const NetworkConfig cfg = parse_run_config(ctx, map).network;

    NetworkParamsF params = make_network_params<float>(cfg);
    load_checkpoint(checkpoint_path, params, cfg);
    std::vector<Sample> samples = load_sized_dataset(data_dir, cfg.input_size, false);

    fs::create_directories(ctx.out);
    for (const Sample& s : samples) {
        const PredictionT<float> pred = predict(s.rgb, replicate3(s.depth), params, cfg);
        save_pgm((fs::path(ctx.out) / (s.id + ".pgm")).string(), pred.s_final);
    }
    std::printf("wrote %zu saliency maps to %s\n", samples.size(), ctx.out.c_str());
}

void cmd_eval(const CommandContext& ctx, const std::string& pred_dir,
              const std::string& gt_dir) {
    const ConfigMap map = load_config_map(ctx);
    print_header(ctx, "eval", map);
    parse_run_config(ctx, map);

    const MetricsReport report = evaluate_dir(pred_dir, gt_dir);
    std::fputs(format_report(report).c_str(), stdout);
    if (!ctx.out.empty()) {
        write_report(ctx.out, report);
        std::printf("report written to %s\n", ctx.out.c_str());
    }
}

int cmd_gradcheck(const CommandContext& ctx, const std::string& scope) {
    const ConfigMap map = load_config_map(ctx);
    print_header(ctx, "gradcheck", map);
    parse_run_config(ctx, map);

    constexpr double kTol = 1e-4;
    constexpr int kSeedsPerCheck = 10;
    const std::vector<GradSuiteEntry> entries =
        run_grad_suite(scope, ctx.seed, kSeedsPerCheck, kTol);
    std::printf("%-24s %-14s %s\n", "check", "max_rel_err", "status");
    int failures = 0;
    for (const GradSuiteEntry& e : entries) {
        std::printf("%-24s %-14.3e %s\n", e.name.c_str(), e.max_rel_err,
                    e.passed ? "pass" : "FAIL");
        if (!e.passed && !e.worst.empty())
            std::printf("    worst deviation: %s\n", e.worst.c_str());
        failures += !e.passed;
    }
    std::printf("%d/%zu checks passed (tolerance %.0e, %d seeds each)\n",
                static_cast<int>(entries.size()) - failures, entries.size(), kTol,
                kSeedsPerCheck);
    return failures;
}

}  // namespace dmpnet
