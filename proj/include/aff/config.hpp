#pragma once

// Flat key = value run configuration. One file fully determines a run; the
// resolved form is written back out as a diff-able manifest.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "aff/data.hpp"
#include "aff/errors.hpp"
#include "aff/fusion.hpp"
#include "aff/network.hpp"
#include "aff/optim.hpp"

namespace aff {

enum class Task { classify, segment };

inline const char* task_name(Task t) { return t == Task::classify ? "classify" : "segment"; }

inline Task parse_task(const std::string& s) {
    if (s == "classify") return Task::classify;
    if (s == "segment") return Task::segment;
    throw ConfigError("unknown task '" + s + "' (expected classify|segment)");
}

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision '" + s + "' (expected f32|f64)");
}

enum class DataSource { synthetic, cifar };

struct RunConfig {
    Task task = Task::classify;
    Scenario scenario = Scenario::short_skip;
    FusionKind fusion = FusionKind::aff;
    int b = 1;
    int r = 4;
    int base_channels = 16;
    int stages = 3;
    ReplacePolicy policy = ReplacePolicy::all_blocks;

    int epochs = 30;       // desk-scale default (full-scale 400 stays legal)
    int batch_size = 32;   // desk-scale default (full-scale 128 stays legal)
    OptimKind optimizer = OptimKind::nesterov_sgd;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    ScheduleKind schedule = ScheduleKind::step;
    std::vector<int> milestones = {20, 25};
    double gamma = 0.1;
    double power = 0.9;
    bool augment = true;

    unsigned long long seed = 0;
    Precision precision = Precision::f64;
    std::string out = "run_out";

    // dataset source
    DataSource source = DataSource::synthetic;
    CifarVariant cifar_variant = CifarVariant::cifar10;
    std::string data_path;  // cifar train file
    std::string val_path;   // cifar val/test file
    // synthetic generator knobs
    int image_size = 16;
    int channels = 3;
    int classes = 3;
    int train_count = 512;
    int val_count = 128;
    double scale_min = 0.05;
    double scale_max = 0.40;
    double noise = 0.10;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline long long to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        long long r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean (true|false|on|off|1|0)");
}

inline std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(static_cast<int>(to_int(key, trim(cur))));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty()) out.push_back(static_cast<int>(to_int(key, trim(cur))));
    return out;
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// Applies one `key = value` pair. Throws ConfigError naming the key on any
// unknown key, malformed value, or deliberately unsupported option.
inline void config_apply(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::to_bool;
    using detail::to_double;
    using detail::to_int;

    auto as_int = [&](int lo) {
        long long v = to_int(key, value);
        if (v < lo) throw ConfigError("config key '" + key + "': " + value + " is below minimum " + std::to_string(lo));
        return static_cast<int>(v);
    };

    try {
        if (key == "task") cfg.task = parse_task(value);
        else if (key == "scenario") cfg.scenario = parse_scenario(value);
        else if (key == "fusion") cfg.fusion = parse_fusion_kind(value);
        else if (key == "b") cfg.b = as_int(1);
        else if (key == "r") cfg.r = as_int(1);
        else if (key == "base_channels") cfg.base_channels = as_int(1);
        else if (key == "stages") cfg.stages = as_int(1);
        else if (key == "policy") cfg.policy = parse_policy(value);
        else if (key == "epochs") cfg.epochs = as_int(1);
        else if (key == "batch_size") cfg.batch_size = as_int(1);
        else if (key == "optimizer") cfg.optimizer = parse_optim_kind(value);
        else if (key == "lr") cfg.lr = to_double(key, value);
        else if (key == "momentum") cfg.momentum = to_double(key, value);
        else if (key == "weight_decay") cfg.weight_decay = to_double(key, value);
        else if (key == "schedule") cfg.schedule = parse_schedule_kind(value);
        else if (key == "milestones") cfg.milestones = detail::to_int_list(key, value);
        else if (key == "gamma") cfg.gamma = to_double(key, value);
        else if (key == "power") cfg.power = to_double(key, value);
        else if (key == "augment") cfg.augment = to_bool(key, value);
        else if (key == "seed") cfg.seed = static_cast<unsigned long long>(to_int(key, value));
        else if (key == "precision") cfg.precision = parse_precision(value);
        else if (key == "out") cfg.out = value;
        else if (key == "dataset") {
            if (value == "synthetic") cfg.source = DataSource::synthetic;
            else {
                cfg.source = DataSource::cifar;
                cfg.cifar_variant = parse_cifar_variant(value);
            }
        } else if (key == "data_path") cfg.data_path = value;
        else if (key == "val_path") cfg.val_path = value;
        else if (key == "image_size") cfg.image_size = as_int(2);
        else if (key == "channels") cfg.channels = as_int(1);
        else if (key == "classes") cfg.classes = as_int(2);
        else if (key == "train_count") cfg.train_count = as_int(1);
        else if (key == "val_count") cfg.val_count = as_int(1);
        else if (key == "scale_min") cfg.scale_min = to_double(key, value);
        else if (key == "scale_max") cfg.scale_max = to_double(key, value);
        else if (key == "noise") cfg.noise = to_double(key, value);
        else if (key == "mixup" || key == "label_smoothing")
            throw ConfigError("config key '" + key + "' is not supported by this build; remove it from the config");
        else
            throw ConfigError("unknown config key '" + key + "'");
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

// Parses `key = value` text with `#` comments. Blank lines are skipped.
inline void config_parse_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
    std::size_t pos = 0;
    int line_no = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = (nl == std::string::npos) ? text.size() + 1 : nl + 1;
        ++line_no;

        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;

        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
        try {
            config_apply(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

// Applies a --set style override of the form key=value.
inline void config_apply_override(RunConfig& cfg, const std::string& kv) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
    config_apply(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline int config_num_classes(const RunConfig& cfg) {
    if (cfg.source == DataSource::cifar) return cifar_num_classes(cfg.cifar_variant);
    // Segmentation adds a background class; mask ids are 0 = background,
    // 1..classes = shapes.
    return cfg.task == Task::segment ? cfg.classes + 1 : cfg.classes;
}

inline int config_in_channels(const RunConfig& cfg) {
    return cfg.source == DataSource::cifar ? 3 : cfg.channels;
}

inline int config_image_size(const RunConfig& cfg) {
    return cfg.source == DataSource::cifar ? 32 : cfg.image_size;
}

// Cross-field validation beyond per-key range checks.
inline void config_validate(const RunConfig& cfg) {
    if (cfg.task == Task::segment && cfg.scenario != Scenario::long_skip)
        throw ConfigError("task segment requires scenario long_skip");
    if (cfg.task == Task::classify && cfg.scenario == Scenario::long_skip)
        throw ConfigError("task classify cannot use scenario long_skip (per-pixel head)");
    if (cfg.task == Task::segment && cfg.source == DataSource::cifar)
        throw ConfigError("cifar datasets carry no masks; task segment requires dataset synthetic");
    if (cfg.lr < 0) throw ConfigError("config key 'lr': must be >= 0");
    if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError("config key 'momentum': must be in [0, 1)");
    if (cfg.weight_decay < 0) throw ConfigError("config key 'weight_decay': must be >= 0");
    if (cfg.source == DataSource::cifar && cfg.data_path.empty())
        throw ConfigError("config key 'data_path': required for cifar datasets");
    if (cfg.source == DataSource::synthetic) {
        SyntheticConfig sc;
        sc.image_size = cfg.image_size;
        sc.channels = cfg.channels;
        sc.num_classes = cfg.classes;
        sc.scale_min = cfg.scale_min;
        sc.scale_max = cfg.scale_max;
        sc.noise = cfg.noise;
        sc.count = cfg.train_count;
        sc.validate();
    }
    if (cfg.scenario == Scenario::long_skip) {
        int need = 1 << (cfg.stages - 1);
        if (config_image_size(cfg) % need != 0)
            throw ConfigError("image_size " + std::to_string(config_image_size(cfg)) +
                              " is not divisible by the top-down stride " + std::to_string(need));
    }
    NetworkSpec spec;
    spec.scenario = cfg.scenario;
    spec.b = cfg.b;
    spec.in_channels = config_in_channels(cfg);
    spec.base_channels = cfg.base_channels;
    spec.stages = cfg.stages;
    spec.fusion = cfg.fusion;
    spec.ratio = cfg.r;
    spec.num_classes = config_num_classes(cfg);
    spec.policy = cfg.policy;
    spec.validate();
}

inline NetworkSpec config_network_spec(const RunConfig& cfg) {
    config_validate(cfg);
    NetworkSpec spec;
    spec.scenario = cfg.scenario;
    spec.b = cfg.b;
    spec.in_channels = config_in_channels(cfg);
    spec.base_channels = cfg.base_channels;
    spec.stages = cfg.stages;
    spec.fusion = cfg.fusion;
    spec.ratio = cfg.r;
    spec.num_classes = config_num_classes(cfg);
    spec.policy = cfg.policy;
    return spec;
}

inline SyntheticConfig config_synthetic(const RunConfig& cfg, bool train_split) {
    SyntheticConfig sc;
    sc.image_size = cfg.image_size;
    sc.channels = cfg.channels;
    sc.num_classes = cfg.classes;
    sc.scale_min = cfg.scale_min;
    sc.scale_max = cfg.scale_max;
    sc.noise = cfg.noise;
    sc.count = train_split ? cfg.train_count : cfg.val_count;
    // Disjoint deterministic streams for the two splits.
    sc.seed = cfg.seed * 2 + (train_split ? 0 : 1);
    return sc;
}

// Resolved manifest: every key in fixed order, reparseable by config_parse_text.
inline std::string config_manifest(const RunConfig& cfg) {
    using detail::fmt_double;
    std::string s;
    auto kv = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };

    kv("task", task_name(cfg.task));
    kv("scenario", scenario_name(cfg.scenario));
    kv("fusion", fusion_kind_name(cfg.fusion));
    kv("b", std::to_string(cfg.b));
    kv("r", std::to_string(cfg.r));
    kv("base_channels", std::to_string(cfg.base_channels));
    kv("stages", std::to_string(cfg.stages));
    kv("policy", policy_name(cfg.policy));
    kv("epochs", std::to_string(cfg.epochs));
    kv("batch_size", std::to_string(cfg.batch_size));
    kv("optimizer", optim_kind_name(cfg.optimizer));
    kv("lr", fmt_double(cfg.lr));
    kv("momentum", fmt_double(cfg.momentum));
    kv("weight_decay", fmt_double(cfg.weight_decay));
    kv("schedule", schedule_kind_name(cfg.schedule));
    {
        std::string ms;
        for (std::size_t i = 0; i < cfg.milestones.size(); ++i)
            ms += (i ? "," : "") + std::to_string(cfg.milestones[i]);
        kv("milestones", ms);
    }
    kv("gamma", fmt_double(cfg.gamma));
    kv("power", fmt_double(cfg.power));
    kv("augment", cfg.augment ? "true" : "false");
    kv("seed", std::to_string(cfg.seed));
    kv("precision", precision_name(cfg.precision));
    kv("out", cfg.out);
    kv("dataset", cfg.source == DataSource::synthetic ? "synthetic" : cifar_variant_name(cfg.cifar_variant));
    if (!cfg.data_path.empty()) kv("data_path", cfg.data_path);
    if (!cfg.val_path.empty()) kv("val_path", cfg.val_path);
    if (cfg.source == DataSource::synthetic) {
        kv("image_size", std::to_string(cfg.image_size));
        kv("channels", std::to_string(cfg.channels));
        kv("classes", std::to_string(cfg.classes));
        kv("train_count", std::to_string(cfg.train_count));
        kv("val_count", std::to_string(cfg.val_count));
        kv("scale_min", fmt_double(cfg.scale_min));
        kv("scale_max", fmt_double(cfg.scale_max));
        kv("noise", fmt_double(cfg.noise));
    }
    return s;
}

}  // namespace aff
