// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: train / tune / sample / eval / flops.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "maskdit/config.hpp"
#include "maskdit/flops.hpp"
#include "maskdit/frechet.hpp"
#include "maskdit/ppm.hpp"
#include "maskdit/sampler.hpp"
#include "maskdit/trainer.hpp"

namespace {

using namespace maskdit;

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

/// Config for checkpoint-driven commands: an explicit --config wins, otherwise
/// the copy embedded in the checkpoint manifest is used.
RunConfig config_for_checkpoint(const CheckpointData& ck, const std::optional<std::string>& path) {
    if (path) return load_config(*path);
    if (ck.config_json.empty())
        throw ConfigError("checkpoint carries no config; pass --config");
    return parse_config(ck.config_json);
}

int cmd_train(const std::string& config_path, const std::optional<std::string>& resume,
              const std::optional<std::uint64_t>& seed) {
    RunConfig cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    Trainer trainer(cfg);
    if (resume)
        trainer.load_file(*resume);
    else
        trainer.init();
    std::filesystem::create_directories(cfg.out_dir);
    MetricsWriter metrics;
    metrics.open((std::filesystem::path(cfg.out_dir) / "metrics.csv").string(),
                 /*append=*/resume.has_value());
    trainer.run_all(&metrics);
    std::cout << "trained to step " << trainer.step() << "; checkpoints in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_tune(const std::string& config_path, const std::string& ckpt_path,
             const std::string& schedule, long steps, const std::optional<double>& lr,
             const std::optional<std::uint64_t>& seed) {
    RunConfig cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    Trainer trainer(cfg);
    trainer.load_file(ckpt_path);
    std::filesystem::create_directories(cfg.out_dir);
    MetricsWriter metrics;
    metrics.open((std::filesystem::path(cfg.out_dir) / "metrics_tune.csv").string(),
                 /*append=*/false);
    trainer.run_tune(steps, schedule, lr.value_or(cfg.train.tune_lr), cfg.train.tune_batch_size,
                     &metrics);
    std::cout << "tuned for " << steps << " steps (schedule=" << schedule << "); checkpoints in "
              << cfg.out_dir << "\n";
    return 0;
}

int cmd_sample(const std::string& ckpt_path, const std::optional<std::string>& config_path,
               int class_label, long count, std::optional<double> guidance,
               std::optional<long> steps, const std::string& out_dir, std::uint64_t seed,
               bool no_ema) {
    const CheckpointData ck = load_checkpoint(ckpt_path);
    RunConfig cfg = config_for_checkpoint(ck, config_path);
    require(class_label >= 0 && class_label < cfg.backbone.num_classes,
            "sample: class out of range");
    require(count > 0, "sample: count must be positive");

    Backbone<float> net(cfg.backbone, cfg.dataset.height / cfg.backbone.patch_size,
                        cfg.dataset.width / cfg.backbone.patch_size, cfg.dataset.channels);
    load_weights_into(net, ck, !no_ema);

    SamplerConfig sampler_cfg = cfg.sampler;
    if (guidance) sampler_cfg.guidance_scale = *guidance;
    if (steps) sampler_cfg.num_steps = *steps;

    Rng rng(seed);
    const std::vector<int> labels(static_cast<std::size_t>(count), class_label);
    SampleStats stats;
    ImageBatch<float> images = sample(net, cfg.edm, labels, sampler_cfg, rng, &stats);

    std::filesystem::create_directories(out_dir);
    const std::string out_path = (std::filesystem::path(out_dir) / "samples.ppm").string();
    write_ppm_grid(out_path, images, cfg.dataset);
    std::cout << "wrote " << count << " samples (class " << class_label << ", guidance "
              << sampler_cfg.guidance_scale << ", " << sampler_cfg.num_steps << " steps, "
              << stats.denoiser_evals << " denoiser evals) to " << out_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::optional<std::string>& config_path,
             const std::string& metric, std::uint64_t real_seed, long count,
             std::optional<double> guidance, std::optional<long> steps, std::uint64_t seed,
             bool no_ema) {
    require(metric == "frechet", "eval: only the 'frechet' metric is available");
    const CheckpointData ck = load_checkpoint(ckpt_path);
    RunConfig cfg = config_for_checkpoint(ck, config_path);

    Backbone<float> net(cfg.backbone, cfg.dataset.height / cfg.backbone.patch_size,
                        cfg.dataset.width / cfg.backbone.patch_size, cfg.dataset.channels);
    load_weights_into(net, ck, !no_ema);

    SamplerConfig sampler_cfg = cfg.sampler;
    if (guidance) sampler_cfg.guidance_scale = *guidance;
    if (steps) sampler_cfg.num_steps = *steps;

    Rng real_rng(real_seed);
    auto [real, real_labels] = make_batch<float>(cfg.dataset, count, real_rng);

    std::vector<int> labels(static_cast<std::size_t>(count));
    for (long i = 0; i < count; ++i)
        labels[static_cast<std::size_t>(i)] =
            static_cast<int>(i % cfg.backbone.num_classes);
    Rng rng(seed);
    ImageBatch<float> generated = sample(net, cfg.edm, labels, sampler_cfg, rng);

    const double value = pixel_frechet(real, generated);
    nlohmann::json out = {{"metric", "frechet"},
                          {"value", value},
                          {"count", count},
                          {"guidance", sampler_cfg.guidance_scale},
                          {"real_seed", real_seed},
                          {"ema", !no_ema}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_flops(const std::optional<std::string>& config_path, double ratio) {
    RunConfig cfg;
    if (config_path) cfg = load_config(*config_path);
    const long n_tokens = (cfg.dataset.height / cfg.backbone.patch_size) *
                          (cfg.dataset.width / cfg.backbone.patch_size);
    const CostReport report = flops_count(cfg.backbone, n_tokens, ratio, cfg.dataset.channels);
    nlohmann::json out = {{"encoder_flops", report.encoder_flops},
                          {"decoder_flops", report.decoder_flops},
                          {"head_flops", report.head_flops},
                          {"total_flops", report.total_flops},
                          {"visible_tokens", report.visible_tokens},
                          {"ratio_vs_unmasked", report.ratio_vs_unmasked}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked diffusion transformer: training, tuning, sampling and cost accounting"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, schedule = "zero", out_dir = "samples";
    std::string metric = "frechet";
    std::optional<std::string> opt_config, resume;
    std::optional<double> tune_lr, guidance;
    std::optional<long> sample_steps;
    std::optional<std::uint64_t> seed_override;
    std::uint64_t seed = 0, real_seed = 1;
    int class_label = 0;
    long count = 16, tune_steps = 500;
    double ratio = 0.5;
    bool no_ema = false;

    auto* train = app.add_subcommand("train", "Run masked training (and tuning, if configured)");
    train->add_option("--config", config_path, "JSON run configuration")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_option("--seed", seed_override, "override the config seed");

    auto* tune = app.add_subcommand("tune", "Unmasking tuning from a checkpoint");
    tune->add_option("--config", config_path, "JSON run configuration")->required();
    tune->add_option("--ckpt", ckpt_path, "checkpoint to start from")->required();
    tune->add_option("--schedule", schedule, "masking-ratio schedule: zero | cosine")
        ->check(CLI::IsMember({"zero", "cosine"}));
    tune->add_option("--steps", tune_steps, "number of tuning steps");
    tune->add_option("--lr", tune_lr, "tuning learning rate");
    tune->add_option("--seed", seed_override, "override the config seed");

    auto* sample_cmd = app.add_subcommand("sample", "Generate images from a checkpoint");
    sample_cmd->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
    sample_cmd->add_option("--config", opt_config, "config override (default: embedded)");
    sample_cmd->add_option("--class", class_label, "class label to condition on")->required();
    sample_cmd->add_option("--count", count, "number of images");
    sample_cmd->add_option("--guidance", guidance, "classifier-free guidance scale (>= 1)");
    sample_cmd->add_option("--steps", sample_steps, "ODE steps (default from config)");
    sample_cmd->add_option("--out", out_dir, "output directory")->required();
    sample_cmd->add_option("--seed", seed, "sampling seed");
    sample_cmd->add_flag("--no-ema", no_ema, "sample with raw weights instead of the EMA");

    auto* eval_cmd = app.add_subcommand("eval", "Pixel-space Frechet distance against real data");
    eval_cmd->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
    eval_cmd->add_option("--config", opt_config, "config override (default: embedded)");
    eval_cmd->add_option("--metric", metric, "metric name (frechet)");
    eval_cmd->add_option("--real-seed", real_seed, "seed for the real reference set");
    eval_cmd->add_option("--count", count, "samples per set")->default_val(256);

    eval_cmd->add_option("--guidance", guidance, "guidance scale for generation");
    eval_cmd->add_option("--steps", sample_steps, "ODE steps (default from config)");
    eval_cmd->add_option("--seed", seed, "generation seed");
    eval_cmd->add_flag("--no-ema", no_ema, "evaluate raw weights instead of the EMA");

    auto* flops_cmd = app.add_subcommand("flops", "Analytic per-forward cost report (JSON)");
    flops_cmd->add_option("--config", opt_config, "JSON run configuration (default: built-in)");
    flops_cmd->add_option("--ratio", ratio, "masking ratio");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, resume, seed_override);
        if (tune->parsed())
            return cmd_tune(config_path, ckpt_path, schedule, tune_steps, tune_lr, seed_override);
        if (sample_cmd->parsed())
            return cmd_sample(ckpt_path, opt_config, class_label, count, guidance, sample_steps,
                              out_dir, seed, no_ema);
        if (eval_cmd->parsed())
            return cmd_eval(ckpt_path, opt_config, metric, real_seed, count, guidance,
                            sample_steps, seed, no_ema);
        if (flops_cmd->parsed()) return cmd_flops(opt_config, ratio);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
