// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskdit/backbone.hpp"
#include "maskdit/checkpoint.hpp"
#include "maskdit/common.hpp"
#include "maskdit/dataset.hpp"
#include "maskdit/edm.hpp"
#include "maskdit/objective.hpp"
#include "maskdit/sampler.hpp"

namespace maskdit {

struct TrainConfig {
    double mask_ratio = 0.5;
    double lambda_mae = 0.1;
    std::string dsm_mode = "unmasked";  // "unmasked" | "full"
    double p_uncond = 0.1;
    double lr = 1e-4;
    long batch_size = 64;
    long steps_phase1 = 3000;
    long steps_phase2 = 500;
    std::string tune_schedule = "zero";  // "zero" | "cosine"
    double tune_lr = 5e-5;
    long tune_batch_size = 64;
    double ema_decay = 0.9999;
    bool ema_warmup = true;
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    long checkpoint_every = 500;
    bool mae_sigma_weighted = false;

    DsmMode dsm_mode_enum() const {
        if (dsm_mode == "unmasked") return DsmMode::kUnmaskedOnly;
        if (dsm_mode == "full") return DsmMode::kFullTokens;
        throw ConfigError("train.dsm_mode must be 'unmasked' or 'full'");
    }

    void validate() const {
        require(mask_ratio >= 0.0 && mask_ratio < 1.0, "train.mask_ratio must lie in [0, 1)");
        require(lambda_mae >= 0.0, "train.lambda_mae must be non-negative");
        require(p_uncond >= 0.0 && p_uncond <= 1.0, "train.p_uncond must lie in [0, 1]");
        require(lr > 0.0 && tune_lr > 0.0, "learning rates must be positive");
        require(batch_size > 0 && tune_batch_size > 0, "batch sizes must be positive");
        require(steps_phase1 >= 0 && steps_phase2 >= 0, "step counts must be non-negative");
        require(ema_decay >= 0.0 && ema_decay < 1.0, "train.ema_decay must lie in [0, 1)");
        require(checkpoint_every > 0, "train.checkpoint_every must be positive");
        (void)dsm_mode_enum();
        if (tune_schedule != "zero" && tune_schedule != "cosine")
            throw ConfigError("train.tune_schedule must be 'zero' or 'cosine'");
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    EdmConstants edm;
    BackboneConfig backbone;
    DatasetSpec dataset;
    TrainConfig train;
    SamplerConfig sampler;

    void validate() const {
        edm.validate();
        backbone.validate();
        dataset.validate();
        train.validate();
        sampler.validate();
        require(dataset.num_classes == backbone.num_classes,
                "dataset and backbone disagree on the class count");
        require(dataset.height % backbone.patch_size == 0 &&
                    dataset.width % backbone.patch_size == 0,
                "patch size must divide the image dimensions");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& section) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in section '" + section + "'");
}

template <class V>
void read(const nlohmann::json& obj, const char* key, V& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<V>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
        }
    }
}

}  // namespace detail

inline nlohmann::json to_json(const EdmConstants& c) {
    return {{"sigma_data", c.sigma_data}, {"p_mean", c.p_mean}, {"p_std", c.p_std}};
}

inline nlohmann::json to_json(const BackboneConfig& c) {
    return {{"encoder_depth", c.encoder_depth}, {"encoder_width", c.encoder_width},
            {"encoder_heads", c.encoder_heads}, {"decoder_depth", c.decoder_depth},
            {"decoder_width", c.decoder_width}, {"decoder_heads", c.decoder_heads},
            {"patch_size", c.patch_size},       {"num_classes", c.num_classes},
            {"mlp_ratio", c.mlp_ratio}};
}

inline nlohmann::json to_json(const DatasetSpec& c) {
    nlohmann::json centers = nlohmann::json::array();
    for (const auto& m : c.centers) centers.push_back({m[0], m[1]});
    return {{"height", c.height},           {"width", c.width},
            {"channels", c.channels},       {"num_classes", c.num_classes},
            {"centers", centers},           {"blob_sigma", c.blob_sigma},
            {"pixel_noise", c.pixel_noise}, {"jitter", c.jitter},
            {"pixel_mean", c.pixel_mean},   {"pixel_scale", c.pixel_scale}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"mask_ratio", c.mask_ratio},
            {"lambda_mae", c.lambda_mae},
            {"dsm_mode", c.dsm_mode},
            {"p_uncond", c.p_uncond},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"steps_phase1", c.steps_phase1},
            {"steps_phase2", c.steps_phase2},
            {"tune_schedule", c.tune_schedule},
            {"tune_lr", c.tune_lr},
            {"tune_batch_size", c.tune_batch_size},
            {"ema_decay", c.ema_decay},
            {"ema_warmup", c.ema_warmup},
            {"weight_decay", c.weight_decay},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"checkpoint_every", c.checkpoint_every},
            {"mae_sigma_weighted", c.mae_sigma_weighted}};
}

inline nlohmann::json to_json(const SamplerConfig& c) {
    return {{"num_steps", c.num_steps},
            {"t_min", c.t_min},
            {"t_max", c.t_max},
            {"rho", c.rho},
            {"guidance_scale", c.guidance_scale}};
}

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"seed", c.seed},           {"out_dir", c.out_dir}, {"edm", to_json(c.edm)},
            {"backbone", to_json(c.backbone)}, {"dataset", to_json(c.dataset)},
            {"train", to_json(c.train)},       {"sampler", to_json(c.sampler)}};
}

inline EdmConstants edm_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"sigma_data", "p_mean", "p_std"}, "edm");
    EdmConstants c;
    detail::read(j, "sigma_data", c.sigma_data);
    detail::read(j, "p_mean", c.p_mean);
    detail::read(j, "p_std", c.p_std);
    return c;
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"encoder_depth", "encoder_width", "encoder_heads", "decoder_depth",
                                 "decoder_width", "decoder_heads", "patch_size", "num_classes",
                                 "mlp_ratio"},
                                "backbone");
    BackboneConfig c;
    detail::read(j, "encoder_depth", c.encoder_depth);
    detail::read(j, "encoder_width", c.encoder_width);
    detail::read(j, "encoder_heads", c.encoder_heads);
    detail::read(j, "decoder_depth", c.decoder_depth);
    detail::read(j, "decoder_width", c.decoder_width);
    detail::read(j, "decoder_heads", c.decoder_heads);
    detail::read(j, "patch_size", c.patch_size);
    detail::read(j, "num_classes", c.num_classes);
    detail::read(j, "mlp_ratio", c.mlp_ratio);
    return c;
}

inline DatasetSpec dataset_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"height", "width", "channels", "num_classes", "centers",
                                 "blob_sigma", "pixel_noise", "jitter", "pixel_mean", "pixel_scale"},
                                "dataset");
    DatasetSpec c;
    detail::read(j, "height", c.height);
    detail::read(j, "width", c.width);
    detail::read(j, "channels", c.channels);
    detail::read(j, "num_classes", c.num_classes);
    if (j.contains("centers")) {
        c.centers.clear();
        for (const auto& m : j.at("centers")) {
            if (!m.is_array() || m.size() != 2) throw ConfigError("dataset.centers entries must be [y, x]");
            c.centers.push_back({m[0].get<double>(), m[1].get<double>()});
        }
    }
    detail::read(j, "blob_sigma", c.blob_sigma);
    detail::read(j, "pixel_noise", c.pixel_noise);
    detail::read(j, "jitter", c.jitter);
    detail::read(j, "pixel_mean", c.pixel_mean);
    detail::read(j, "pixel_scale", c.pixel_scale);
    return c;
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j,
        {"mask_ratio", "lambda_mae", "dsm_mode", "p_uncond", "lr", "batch_size", "steps_phase1",
         "steps_phase2", "tune_schedule", "tune_lr", "tune_batch_size", "ema_decay", "ema_warmup",
         "weight_decay", "adam_beta1", "adam_beta2", "adam_eps", "checkpoint_every",
         "mae_sigma_weighted"},
        "train");
    TrainConfig c;
    detail::read(j, "mask_ratio", c.mask_ratio);
    detail::read(j, "lambda_mae", c.lambda_mae);
    detail::read(j, "dsm_mode", c.dsm_mode);
    detail::read(j, "p_uncond", c.p_uncond);
    detail::read(j, "lr", c.lr);
    detail::read(j, "batch_size", c.batch_size);
    detail::read(j, "steps_phase1", c.steps_phase1);
    detail::read(j, "steps_phase2", c.steps_phase2);
    detail::read(j, "tune_schedule", c.tune_schedule);
    detail::read(j, "tune_lr", c.tune_lr);
    detail::read(j, "tune_batch_size", c.tune_batch_size);
    detail::read(j, "ema_decay", c.ema_decay);
    detail::read(j, "ema_warmup", c.ema_warmup);
    detail::read(j, "weight_decay", c.weight_decay);
    detail::read(j, "adam_beta1", c.adam_beta1);
    detail::read(j, "adam_beta2", c.adam_beta2);
    detail::read(j, "adam_eps", c.adam_eps);
    detail::read(j, "checkpoint_every", c.checkpoint_every);
    detail::read(j, "mae_sigma_weighted", c.mae_sigma_weighted);
    return c;
}

inline SamplerConfig sampler_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"num_steps", "t_min", "t_max", "rho", "guidance_scale"},
                                "sampler");
    SamplerConfig c;
    detail::read(j, "num_steps", c.num_steps);
    detail::read(j, "t_min", c.t_min);
    detail::read(j, "t_max", c.t_max);
    detail::read(j, "rho", c.rho);
    detail::read(j, "guidance_scale", c.guidance_scale);
    return c;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j, {"seed", "out_dir", "edm", "backbone", "dataset", "train", "sampler"}, "root");
    RunConfig c;
    detail::read(j, "seed", c.seed);
    detail::read(j, "out_dir", c.out_dir);
    if (j.contains("edm")) c.edm = edm_from_json(j.at("edm"));
    if (j.contains("backbone")) c.backbone = backbone_from_json(j.at("backbone"));
    if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
    if (j.contains("sampler")) c.sampler = sampler_from_json(j.at("sampler"));
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("JSON parse error: ") + e.what());
    }
    return config_from_json(j);
}

/// Hash over everything that determines parameter shapes; stored in
/// checkpoints so a mismatched architecture is rejected on load.
inline std::uint64_t config_hash(const RunConfig& c) {
    nlohmann::json j = {{"backbone", to_json(c.backbone)},
                        {"geometry",
                         {{"height", c.dataset.height},
                          {"width", c.dataset.width},
                          {"channels", c.dataset.channels}}}};
    const std::string s = j.dump();
    return fnv1a64(s.data(), s.size());
}

}  // namespace maskdit
