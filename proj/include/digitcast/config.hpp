#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "digitcast/common.hpp"
#include "digitcast/data.hpp"
#include "digitcast/model.hpp"
#include "digitcast/tokenizer.hpp"
#include "digitcast/training.hpp"

namespace digitcast {

using json = nlohmann::json;

namespace detail {

// Unknown keys are config errors: typos in ablation sweeps must not pass
// silently.
inline void check_keys(const json& obj, const std::vector<std::string>& allowed,
                       const std::string& section) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("config: unknown key \"" + it.key() + "\" in " + section);
    }
}

template <typename T>
void read_into(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

/// Where the data comes from: a CSV file or a seeded synthetic generator.
struct DatasetSpec {
    std::string kind = "csv";  // csv | sine | uniform | ar1
    std::string path;
    std::optional<std::string> timestamp_column;
    std::vector<std::string> value_columns;
    SyntheticSpec synth;

    bool is_synthetic() const { return kind != "csv"; }
};

struct WindowSpec {
    long window_len = 8760;
    long horizon = 24;
    int count = 100;
    long stride = 24;
};

struct SamplingSpec {
    int simulations = 1024;
    long horizon = 0;  // 0 = windows.horizon
    bool shuffle_context = false;
};

struct EvalSpec {
    std::vector<double> levels = {0.5, 0.75, 0.95};
    double gamma = 0.05;
    int crps_levels = 20;
    int bootstrap_resamples = 1000;
    double ci_level = 0.90;
};

struct RunConfig {
    DatasetSpec dataset;
    TokenizerConfig tokenizer;
    bool quantile_msd = false;  // fit msd_bins per window from training data
    ModelConfig model;
    TrainConfig train;
    WindowSpec windows;
    SamplingSpec sampling;
    EvalSpec evaluation;
    std::string output_dir = "out";
    uint64_t seed = 0;
    int jobs = 0;

    long sampling_horizon() const {
        return sampling.horizon > 0 ? sampling.horizon : windows.horizon;
    }
    /// Raw context length at inference: T - H.
    int context_len_infer() const {
        return train.context_len - static_cast<int>(sampling_horizon());
    }

    void validate() const {
        tokenizer.validate();
        model.validate();
        train.validate();
        if (model.vocab_size != tokenizer.base)
            throw ConfigError("config: model.vocab_size must equal tokenizer.base");
        if (model.per_position_embedding && model.embed_phases != tokenizer.precision)
            throw ConfigError("config: per-position embedding phases must equal precision");
        if (static_cast<long>(tokenizer.precision) * train.context_len > model.max_seq_len)
            throw ConfigError("config: precision * context_len exceeds model.max_seq_len");
        if (context_len_infer() < 1)
            throw ConfigError("config: sampling horizon leaves no inference context (need T > H)");
        if (windows.window_len < train.context_len)
            throw ConfigError("config: window_len shorter than train.context_len");
        for (double lvl : evaluation.levels)
            if (!(lvl > 0.0 && lvl < 1.0))
                throw ConfigError("config: evaluation levels must lie in (0,1)");
        if (!(evaluation.gamma > 0.0 && evaluation.gamma < 1.0))
            throw ConfigError("config: gamma must lie in (0,1)");
        if (sampling.simulations < 1) throw ConfigError("config: simulations must be positive");
        if (output_dir.empty()) throw ConfigError("config: output_dir must not be empty");
    }
};

// --- JSON (de)serialization -------------------------------------------------

inline std::string to_string(SquashMode m) { return m == SquashMode::kClip ? "clip" : "sigmoid"; }
inline std::string to_string(ScaleMode m) {
    return m == ScaleMode::kContextMean ? "context_mean" : "causal_mean";
}

inline SquashMode squash_mode_from(const std::string& s) {
    if (s == "clip") return SquashMode::kClip;
    if (s == "sigmoid") return SquashMode::kSigmoid;
    throw ConfigError("config: squash_mode must be \"clip\" or \"sigmoid\", got \"" + s + "\"");
}

inline ScaleMode scale_mode_from(const std::string& s) {
    if (s == "context_mean") return ScaleMode::kContextMean;
    if (s == "causal_mean") return ScaleMode::kCausalMean;
    throw ConfigError("config: scale_mode must be \"context_mean\" or \"causal_mean\", got \"" +
                      s + "\"");
}

inline json tokenizer_to_json(const TokenizerConfig& cfg) {
    json j;
    j["precision"] = cfg.precision;
    j["base"] = cfg.base;
    j["squash_low"] = cfg.squash_low;
    j["squash_high"] = cfg.squash_high;
    j["squash_mode"] = to_string(cfg.squash_mode);
    j["scale_mode"] = to_string(cfg.scale_mode);
    j["scale_offset"] = cfg.scale_offset;
    if (!cfg.msd_bins.empty()) j["msd_bins"] = cfg.msd_bins;
    return j;
}

inline TokenizerConfig tokenizer_from_json(const json& j) {
    detail::check_keys(j,
                       {"precision", "base", "squash_low", "squash_high", "squash_mode",
                        "scale_mode", "scale_offset", "msd_bins"},
                       "tokenizer");
    TokenizerConfig cfg;
    detail::read_into(j, "precision", cfg.precision);
    detail::read_into(j, "base", cfg.base);
    detail::read_into(j, "squash_low", cfg.squash_low);
    detail::read_into(j, "squash_high", cfg.squash_high);
    detail::read_into(j, "scale_offset", cfg.scale_offset);
    if (j.contains("squash_mode")) cfg.squash_mode = squash_mode_from(j.at("squash_mode"));
    if (j.contains("scale_mode")) cfg.scale_mode = scale_mode_from(j.at("scale_mode"));
    detail::read_into(j, "msd_bins", cfg.msd_bins);
    cfg.validate();
    return cfg;
}

inline json model_to_json(const ModelConfig& cfg) {
    json j;
    j["d_model"] = cfg.d_model;
    j["d_ff"] = cfg.d_ff;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["dropout"] = cfg.dropout;
    j["embedding_mode"] = cfg.per_position_embedding ? "per_position" : "shared";
    j["embed_phases"] = cfg.embed_phases;
    return j;
}

inline ModelConfig model_from_json(const json& j) {
    detail::check_keys(j,
                       {"d_model", "d_ff", "n_layers", "n_heads", "vocab_size", "max_seq_len",
                        "dropout", "embedding_mode", "embed_phases"},
                       "model");
    ModelConfig cfg;
    detail::read_into(j, "d_model", cfg.d_model);
    detail::read_into(j, "d_ff", cfg.d_ff);
    detail::read_into(j, "n_layers", cfg.n_layers);
    detail::read_into(j, "n_heads", cfg.n_heads);
    detail::read_into(j, "vocab_size", cfg.vocab_size);
    detail::read_into(j, "max_seq_len", cfg.max_seq_len);
    detail::read_into(j, "dropout", cfg.dropout);
    detail::read_into(j, "embed_phases", cfg.embed_phases);
    if (j.contains("embedding_mode")) {
        std::string mode = j.at("embedding_mode");
        if (mode == "per_position")
            cfg.per_position_embedding = true;
        else if (mode == "shared")
            cfg.per_position_embedding = false;
        else
            throw ConfigError("config: embedding_mode must be \"shared\" or \"per_position\"");
    }
    cfg.validate();
    return cfg;
}

inline json train_to_json(const TrainConfig& cfg) {
    json j;
    j["batch_size"] = cfg.batch_size;
    j["train_steps"] = cfg.train_steps;
    j["beta"] = cfg.beta;
    j["lr_constant"] = cfg.lr_constant;
    j["warmup_steps"] = cfg.warmup_steps;
    j["weight_decay"] = cfg.weight_decay;
    j["context_len"] = cfg.context_len;
    j["log_every"] = cfg.log_every;
    return j;
}

inline TrainConfig train_from_json(const json& j) {
    detail::check_keys(j,
                       {"batch_size", "train_steps", "beta", "lr_constant", "warmup_steps",
                        "weight_decay", "context_len", "log_every"},
                       "train");
    TrainConfig cfg;
    detail::read_into(j, "batch_size", cfg.batch_size);
    detail::read_into(j, "train_steps", cfg.train_steps);
    detail::read_into(j, "beta", cfg.beta);
    detail::read_into(j, "lr_constant", cfg.lr_constant);
    detail::read_into(j, "warmup_steps", cfg.warmup_steps);
    detail::read_into(j, "weight_decay", cfg.weight_decay);
    detail::read_into(j, "context_len", cfg.context_len);
    detail::read_into(j, "log_every", cfg.log_every);
    cfg.validate();
    return cfg;
}

inline DatasetSpec dataset_from_json(const json& j) {
    detail::check_keys(j,
                       {"kind", "path", "timestamp_column", "value_columns", "length", "series",
                        "seed", "amplitude", "level", "period", "noise", "low", "high", "phi"},
                       "dataset");
    DatasetSpec spec;
    detail::read_into(j, "kind", spec.kind);
    if (spec.kind == "csv") {
        if (!j.contains("path")) throw ConfigError("config: dataset.path required for kind csv");
        spec.path = j.at("path");
        if (j.contains("timestamp_column"))
            spec.timestamp_column = j.at("timestamp_column").get<std::string>();
        detail::read_into(j, "value_columns", spec.value_columns);
        return spec;
    }
    if (spec.kind == "sine")
        spec.synth.kind = SyntheticKind::kSine;
    else if (spec.kind == "uniform")
        spec.synth.kind = SyntheticKind::kUniform;
    else if (spec.kind == "ar1")
        spec.synth.kind = SyntheticKind::kAr1;
    else
        throw ConfigError("config: dataset.kind must be csv, sine, uniform, or ar1");
    detail::read_into(j, "length", spec.synth.length);
    detail::read_into(j, "series", spec.synth.series);
    detail::read_into(j, "seed", spec.synth.seed);
    detail::read_into(j, "amplitude", spec.synth.amplitude);
    detail::read_into(j, "level", spec.synth.level);
    detail::read_into(j, "period", spec.synth.period);
    detail::read_into(j, "noise", spec.synth.noise);
    detail::read_into(j, "low", spec.synth.low);
    detail::read_into(j, "high", spec.synth.high);
    detail::read_into(j, "phi", spec.synth.phi);
    return spec;
}

inline json dataset_to_json(const DatasetSpec& spec) {
    json j;
    j["kind"] = spec.kind;
    if (spec.kind == "csv") {
        j["path"] = spec.path;
        if (spec.timestamp_column) j["timestamp_column"] = *spec.timestamp_column;
        if (!spec.value_columns.empty()) j["value_columns"] = spec.value_columns;
        return j;
    }
    j["length"] = spec.synth.length;
    j["series"] = spec.synth.series;
    j["seed"] = spec.synth.seed;
    switch (spec.synth.kind) {
        case SyntheticKind::kSine:
            j["amplitude"] = spec.synth.amplitude;
            j["level"] = spec.synth.level;
            j["period"] = spec.synth.period;
            j["noise"] = spec.synth.noise;
            break;
        case SyntheticKind::kUniform:
            j["low"] = spec.synth.low;
            j["high"] = spec.synth.high;
            break;
        case SyntheticKind::kAr1:
            j["level"] = spec.synth.level;
            j["phi"] = spec.synth.phi;
            j["noise"] = spec.synth.noise;
            break;
    }
    return j;
}

inline json run_config_to_json(const RunConfig& cfg) {
    json j;
    j["dataset"] = dataset_to_json(cfg.dataset);
    j["tokenizer"] = tokenizer_to_json(cfg.tokenizer);
    j["quantile_msd"] = cfg.quantile_msd;
    j["model"] = model_to_json(cfg.model);
    j["train"] = train_to_json(cfg.train);
    j["windows"] = {{"window_len", cfg.windows.window_len},
                    {"horizon", cfg.windows.horizon},
                    {"count", cfg.windows.count},
                    {"stride", cfg.windows.stride}};
    j["sampling"] = {{"simulations", cfg.sampling.simulations},
                     {"horizon", cfg.sampling.horizon},
                     {"shuffle_context", cfg.sampling.shuffle_context}};
    j["evaluation"] = {{"levels", cfg.evaluation.levels},
                       {"gamma", cfg.evaluation.gamma},
                       {"crps_levels", cfg.evaluation.crps_levels},
                       {"bootstrap_resamples", cfg.evaluation.bootstrap_resamples},
                       {"ci_level", cfg.evaluation.ci_level}};
    j["output_dir"] = cfg.output_dir;
    j["seed"] = cfg.seed;
    j["jobs"] = cfg.jobs;
    return j;
}

inline RunConfig run_config_from_json(const json& j) {
    detail::check_keys(j,
                       {"dataset", "tokenizer", "quantile_msd", "model", "train", "windows",
                        "sampling", "evaluation", "output_dir", "seed", "jobs"},
                       "top level");
    RunConfig cfg;
    if (j.contains("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("tokenizer")) cfg.tokenizer = tokenizer_from_json(j.at("tokenizer"));
    detail::read_into(j, "quantile_msd", cfg.quantile_msd);
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    if (j.contains("windows")) {
        const auto& w = j.at("windows");
        detail::check_keys(w, {"window_len", "horizon", "count", "stride"}, "windows");
        detail::read_into(w, "window_len", cfg.windows.window_len);
        detail::read_into(w, "horizon", cfg.windows.horizon);
        detail::read_into(w, "count", cfg.windows.count);
        detail::read_into(w, "stride", cfg.windows.stride);
    }
    if (j.contains("sampling")) {
        const auto& s = j.at("sampling");
        detail::check_keys(s, {"simulations", "horizon", "shuffle_context"}, "sampling");
        detail::read_into(s, "simulations", cfg.sampling.simulations);
        detail::read_into(s, "horizon", cfg.sampling.horizon);
        detail::read_into(s, "shuffle_context", cfg.sampling.shuffle_context);
    }
    if (j.contains("evaluation")) {
        const auto& e = j.at("evaluation");
        detail::check_keys(e, {"levels", "gamma", "crps_levels", "bootstrap_resamples", "ci_level"},
                           "evaluation");
        detail::read_into(e, "levels", cfg.evaluation.levels);
        detail::read_into(e, "gamma", cfg.evaluation.gamma);
        detail::read_into(e, "crps_levels", cfg.evaluation.crps_levels);
        detail::read_into(e, "bootstrap_resamples", cfg.evaluation.bootstrap_resamples);
        detail::read_into(e, "ci_level", cfg.evaluation.ci_level);
    }
    detail::read_into(j, "output_dir", cfg.output_dir);
    detail::read_into(j, "seed", cfg.seed);
    detail::read_into(j, "jobs", cfg.jobs);

    // keep nested copies coherent with the globals
    cfg.train.seed = cfg.seed;
    cfg.train.jobs = cfg.jobs;
    if (cfg.model.per_position_embedding) cfg.model.embed_phases = cfg.tokenizer.precision;
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// FNV-1a over the canonical JSON dump; stamps every output file so stale
/// intermediates are detectable.
inline std::string config_hash(const RunConfig& cfg) {
    std::string dump = run_config_to_json(cfg).dump();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace digitcast
