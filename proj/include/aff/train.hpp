#pragma once

// Run pipeline: dataset loading, batch assembly, the epoch loop, metrics
// emission, and checkpoint save/load. Everything is a pure function of
// (RunConfig, dataset bytes): in double precision two identical runs produce
// byte-identical metrics.jsonl files.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "aff/analysis.hpp"
#include "aff/autodiff.hpp"
#include "aff/config.hpp"
#include "aff/data.hpp"
#include "aff/network.hpp"
#include "aff/optim.hpp"
#include "aff/serialize.hpp"

namespace aff {

struct MetricsRecord {
    int epoch = 0;
    double train_loss = 0;
    double val_metric = 0;  // accuracy (classify) or mIoU (segment)
    double lr = 0;
    double wall_time_sec = 0;
};

namespace detail {

inline std::string json_num(double v) {
    if (!std::isfinite(v)) return "null";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// One JSON object per line. The on-disk metrics file omits wall time so that
// repeated runs of the same config are byte-identical; the stdout echo keeps it.
inline std::string metrics_json_line(const MetricsRecord& m, Task task, bool include_wall) {
    std::string s = "{\"epoch\":" + std::to_string(m.epoch);
    s += ",\"train_loss\":" + detail::json_num(m.train_loss);
    s += std::string(",\"") + (task == Task::segment ? "val_miou" : "val_accuracy") +
         "\":" + detail::json_num(m.val_metric);
    s += ",\"lr\":" + detail::json_num(m.lr);
    if (include_wall) s += ",\"wall_time_sec\":" + detail::json_num(m.wall_time_sec);
    s += "}";
    return s;
}

// ---- model wrapper ---------------------------------------------------------

// Unifies the two host-network families behind one forward/parameters surface.
template <std::floating_point T>
struct Model {
    NetworkSpec spec;
    bool is_fpn = false;
    ClassifierNet<T> cls;
    FpnNet<T> fpn;

    static Model build(const NetworkSpec& spec, Rng& rng) {
        Model m;
        m.spec = spec;
        m.is_fpn = spec.scenario == Scenario::long_skip;
        if (m.is_fpn)
            m.fpn = build_fpn_segmenter<T>(spec, rng);
        else
            m.cls = build_classifier<T>(spec, rng);
        return m;
    }

    Var<T> forward(Tape<T>& t, Var<T> x, Mode mode, WeightProbe<T>* probe = nullptr) {
        return is_fpn ? fpn.forward(t, x, mode, probe) : cls.forward(t, x, mode, probe);
    }

    std::vector<Parameter<T>*> parameters() { return is_fpn ? fpn.parameters() : cls.parameters(); }

    std::vector<std::pair<std::string, std::vector<T>*>> state() {
        return is_fpn ? fpn.state() : cls.state();
    }
};

// ---- dataset plumbing ------------------------------------------------------

template <std::floating_point T>
void load_datasets(const RunConfig& cfg, Dataset<T>& train, Dataset<T>& val) {
    if (cfg.source == DataSource::synthetic) {
        if (cfg.task == Task::segment) {
            train = gen_synthetic_segmentation<T>(config_synthetic(cfg, true));
            val = gen_synthetic_segmentation<T>(config_synthetic(cfg, false));
        } else {
            train = gen_synthetic_classification<T>(config_synthetic(cfg, true));
            val = gen_synthetic_classification<T>(config_synthetic(cfg, false));
        }
    } else {
        train = load_cifar_binary<T>(cfg.data_path, cfg.cifar_variant);
        val = load_cifar_binary<T>(cfg.val_path, cfg.cifar_variant);
    }
}

// Stacks ds[order[lo..hi)] into one normalized N x C x H x W batch.
// Augmentation (pad-crop-flip) is applied before normalization, train split
// of classification tasks only — geometric augmentation would desync masks.
template <std::floating_point T>
Tensor<T> make_batch(const Dataset<T>& ds, const std::vector<int>& order, std::size_t lo,
                     std::size_t hi, const ChannelStats<T>& st, bool augment, Rng* rng,
                     std::vector<int>* labels, std::vector<int>* pixel_labels) {
    const Shape s0 = ds[static_cast<std::size_t>(order[lo])].pixels.shape();
    Tensor<T> batch(Shape{static_cast<int>(hi - lo), s0.c, s0.h, s0.w});
    const std::size_t chw = static_cast<std::size_t>(s0.c) * s0.h * s0.w;
    for (std::size_t i = lo; i < hi; ++i) {
        const auto& img = ds[static_cast<std::size_t>(order[i])];
        Tensor<T> px = augment ? augment_crop_flip(img.pixels, *rng) : img.pixels;
        normalize_inplace(px, st);
        std::copy(px.data(), px.data() + chw, batch.data() + (i - lo) * chw);
        if (labels) labels->push_back(img.label);
        if (pixel_labels) pixel_labels->insert(pixel_labels->end(), img.mask.begin(), img.mask.end());
    }
    return batch;
}

// Eval-mode metric over a whole dataset: accuracy for classification, mIoU
// (accumulated globally, hence order-invariant) for segmentation.
template <std::floating_point T>
double evaluate(Model<T>& model, const Dataset<T>& ds, const ChannelStats<T>& st, int batch_size,
                Task task, int num_classes) {
    if (ds.empty()) throw InputError("evaluate: empty dataset");
    std::vector<int> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> pred_all, truth_all;
    for (std::size_t lo = 0; lo < ds.size(); lo += static_cast<std::size_t>(batch_size)) {
        const std::size_t hi = std::min(ds.size(), lo + static_cast<std::size_t>(batch_size));
        std::vector<int> labels, pixel_labels;
        Tensor<T> batch = make_batch(ds, order, lo, hi, st, /*augment=*/false, nullptr, &labels,
                                     &pixel_labels);
        Tape<T> t;
        Var<T> out = model.forward(t, t.input(batch, /*requires_grad=*/false, "batch"), Mode::eval);
        const Tensor<T>& logits = t.value(out);
        if (task == Task::segment) {
            auto pred = argmax_pixels(logits);
            pred_all.insert(pred_all.end(), pred.begin(), pred.end());
            truth_all.insert(truth_all.end(), pixel_labels.begin(), pixel_labels.end());
        } else {
            auto pred = argmax_classes(logits);
            pred_all.insert(pred_all.end(), pred.begin(), pred.end());
            truth_all.insert(truth_all.end(), labels.begin(), labels.end());
        }
    }
    return task == Task::segment ? metric_miou(pred_all, truth_all, num_classes)
                                 : metric_accuracy(pred_all, truth_all);
}

// ---- checkpoints -------------------------------------------------------------

inline constexpr const char* kMetaBlobName = "__meta__";
inline constexpr const char* kNormMeanBlobName = "__norm__.mean";
inline constexpr const char* kNormStdBlobName = "__norm__.stddev";

template <std::floating_point T>
std::vector<Blob> model_to_blobs(Model<T>& model, const ChannelStats<T>& st, Task task,
                                 int image_size) {
    const NetworkSpec& spec = model.spec;
    std::vector<Blob> blobs;

    Blob meta(kMetaBlobName, Shape{1, 1, 1, 12});
    meta.data = {1.0,  // meta format version
                 static_cast<double>(static_cast<int>(task)),
                 static_cast<double>(static_cast<int>(spec.scenario)),
                 static_cast<double>(static_cast<int>(spec.fusion)),
                 static_cast<double>(spec.b),
                 static_cast<double>(spec.ratio),
                 static_cast<double>(spec.base_channels),
                 static_cast<double>(spec.stages),
                 static_cast<double>(static_cast<int>(spec.policy)),
                 static_cast<double>(spec.num_classes),
                 static_cast<double>(spec.in_channels),
                 static_cast<double>(image_size)};
    blobs.push_back(std::move(meta));

    Blob mean(kNormMeanBlobName, Shape{1, static_cast<int>(st.mean.size()), 1, 1});
    for (std::size_t i = 0; i < st.mean.size(); ++i) mean.data[i] = static_cast<double>(st.mean[i]);
    blobs.push_back(std::move(mean));
    Blob stddev(kNormStdBlobName, Shape{1, static_cast<int>(st.stddev.size()), 1, 1});
    for (std::size_t i = 0; i < st.stddev.size(); ++i)
        stddev.data[i] = static_cast<double>(st.stddev[i]);
    blobs.push_back(std::move(stddev));

    for (Parameter<T>* p : model.parameters()) blobs.push_back(Blob::from_tensor(p->name, p->value));
    for (auto& [name, vec] : model.state()) {
        Blob b(name, Shape{1, static_cast<int>(vec->size()), 1, 1});
        for (std::size_t i = 0; i < vec->size(); ++i) b.data[i] = static_cast<double>((*vec)[i]);
        blobs.push_back(std::move(b));
    }
    return blobs;
}

template <std::floating_point T>
struct LoadedModel {
    Model<T> model;
    Task task = Task::classify;
    int image_size = 0;
    ChannelStats<T> stats;
};

template <std::floating_point T>
LoadedModel<T> model_from_blobs(const std::vector<Blob>& blobs) {
    const Blob* meta = find_blob(blobs, kMetaBlobName);
    if (!meta) throw FormatError("checkpoint is missing its '__meta__' blob");
    if (meta->data.size() != 12 || meta->data[0] != 1.0)
        throw FormatError("checkpoint meta blob has unsupported layout");

    LoadedModel<T> lm;
    lm.task = static_cast<Task>(static_cast<int>(meta->data[1]));
    NetworkSpec spec;
    spec.scenario = static_cast<Scenario>(static_cast<int>(meta->data[2]));
    spec.fusion = static_cast<FusionKind>(static_cast<int>(meta->data[3]));
    spec.b = static_cast<int>(meta->data[4]);
    spec.ratio = static_cast<int>(meta->data[5]);
    spec.base_channels = static_cast<int>(meta->data[6]);
    spec.stages = static_cast<int>(meta->data[7]);
    spec.policy = static_cast<ReplacePolicy>(static_cast<int>(meta->data[8]));
    spec.num_classes = static_cast<int>(meta->data[9]);
    spec.in_channels = static_cast<int>(meta->data[10]);
    lm.image_size = static_cast<int>(meta->data[11]);
    spec.validate();

    Rng rng(0);  // initialization is overwritten below
    lm.model = Model<T>::build(spec, rng);

    for (Parameter<T>* p : lm.model.parameters()) {
        const Blob* b = find_blob(blobs, p->name);
        if (!b) throw FormatError("checkpoint is missing parameter '" + p->name + "'");
        if (b->shape.numel() != p->value.size())
            throw FormatError("checkpoint parameter '" + p->name + "' has " +
                              std::to_string(b->shape.numel()) + " values, expected " +
                              std::to_string(p->value.size()));
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<T>(b->data[i]);
    }
    for (auto& [name, vec] : lm.model.state()) {
        const Blob* b = find_blob(blobs, name);
        if (!b) throw FormatError("checkpoint is missing state '" + name + "'");
        if (b->data.size() != vec->size())
            throw FormatError("checkpoint state '" + name + "' has " +
                              std::to_string(b->data.size()) + " values, expected " +
                              std::to_string(vec->size()));
        for (std::size_t i = 0; i < vec->size(); ++i) (*vec)[i] = static_cast<T>(b->data[i]);
    }

    const Blob* mean = find_blob(blobs, kNormMeanBlobName);
    const Blob* stddev = find_blob(blobs, kNormStdBlobName);
    if (!mean || !stddev) throw FormatError("checkpoint is missing normalization statistics");
    lm.stats.mean.assign(mean->data.begin(), mean->data.end());
    lm.stats.stddev.assign(stddev->data.begin(), stddev->data.end());
    return lm;
}

// ---- training loop -----------------------------------------------------------

template <std::floating_point T>
struct TrainResult {
    std::vector<MetricsRecord> history;
    MetricsRecord final;
    std::string checkpoint_path;
};

inline Schedule config_schedule(const RunConfig& cfg) {
    switch (cfg.schedule) {
        case ScheduleKind::constant: return Schedule::constant();
        case ScheduleKind::step: return Schedule::step(cfg.milestones, cfg.gamma);
        case ScheduleKind::poly: return Schedule::poly(cfg.power, cfg.epochs);
        case ScheduleKind::cosine: return Schedule::cosine(cfg.epochs);
    }
    throw ConfigError("unknown schedule kind");
}

// Trains per the config and writes metrics.jsonl, config.resolved and
// checkpoint.fsds under cfg.out. `echo` (optional) receives the same metrics
// lines plus wall time. All randomness flows from one generator seeded with
// cfg.seed; a zero learning rate is an explicit no-op run, so it freezes
// everything including batch-norm running statistics.
template <std::floating_point T>
TrainResult<T> run_training(const RunConfig& cfg, const Dataset<T>& train, const Dataset<T>& val,
                            std::ostream* echo = nullptr) {
    config_validate(cfg);
    if (train.empty() || val.empty()) throw InputError("training needs non-empty train and val sets");

    Rng rng(cfg.seed);
    const ChannelStats<T> stats = channel_stats(train);
    const NetworkSpec spec = config_network_spec(cfg);
    Model<T> model = Model<T>::build(spec, rng);

    Optimizer<T> opt(cfg.optimizer, model.parameters(), static_cast<T>(cfg.lr),
                     static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay),
                     config_schedule(cfg));
    const bool frozen = cfg.lr == 0.0;
    const bool augment = cfg.augment && cfg.task == Task::classify;
    const int num_classes = config_num_classes(cfg);

    std::filesystem::create_directories(cfg.out);
    const std::string metrics_path = (std::filesystem::path(cfg.out) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw FormatError("cannot open '" + metrics_path + "' for writing");

    TrainResult<T> result;
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.set_epoch(epoch);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0;
        std::size_t seen = 0;
        for (std::size_t lo = 0; lo < train.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi =
                std::min(train.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            std::vector<int> labels, pixel_labels;
            Tensor<T> batch =
                make_batch(train, order, lo, hi, stats, augment, &rng, &labels, &pixel_labels);

            Tape<T> t;
            Var<T> out =
                model.forward(t, t.input(batch, /*requires_grad=*/false, "batch"),
                              frozen ? Mode::eval : Mode::train);
            Var<T> loss = t.softmax_cross_entropy(
                out, cfg.task == Task::segment ? pixel_labels : labels, "loss");
            const double lval = static_cast<double>(t.value(loss)[0]);
            if (!std::isfinite(lval))
                throw NumericError("training diverged (non-finite loss) at epoch " +
                                   std::to_string(epoch));
            loss_sum += lval * static_cast<double>(hi - lo);
            seen += hi - lo;

            if (!frozen) {
                opt.zero_grad();
                t.backward(loss);
                opt.step();
            }
        }

        MetricsRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.val_metric = evaluate(model, val, stats, cfg.batch_size, cfg.task, num_classes);
        rec.lr = static_cast<double>(opt.lr());
        rec.wall_time_sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        metrics << metrics_json_line(rec, cfg.task, /*include_wall=*/false) << "\n";
        metrics.flush();
        if (echo) *echo << metrics_json_line(rec, cfg.task, /*include_wall=*/true) << std::endl;
        result.history.push_back(rec);
    }

    result.final = result.history.back();
    const std::string ckpt_path = (std::filesystem::path(cfg.out) / "checkpoint.fsds").string();
    write_blobs(ckpt_path, model_to_blobs(model, stats, cfg.task, config_image_size(cfg)));
    result.checkpoint_path = ckpt_path;

    const std::string manifest_path = (std::filesystem::path(cfg.out) / "config.resolved").string();
    std::ofstream manifest(manifest_path, std::ios::trunc);
    manifest << config_manifest(cfg);
    // Normalization statistics ride along as comments: reproducibility record
    // without becoming config keys.
    manifest << "# norm.mean =";
    for (const T v : stats.mean) manifest << " " << detail::json_num(static_cast<double>(v));
    manifest << "\n# norm.stddev =";
    for (const T v : stats.stddev) manifest << " " << detail::json_num(static_cast<double>(v));
    manifest << "\n";
    return result;
}

// ---- dry-run inventory -------------------------------------------------------

inline std::string network_inventory(const RunConfig& cfg) {
    const NetworkSpec spec = config_network_spec(cfg);
    std::string s;
    s += "network: scenario=" + std::string(scenario_name(spec.scenario)) +
         " fusion=" + fusion_kind_name(spec.fusion) + " b=" + std::to_string(spec.b) +
         " r=" + std::to_string(spec.ratio) + " base_channels=" +
         std::to_string(spec.base_channels) + " stages=" + std::to_string(spec.stages) +
         " classes=" + std::to_string(spec.num_classes) + " policy=" + policy_name(spec.policy) +
         "\n";
    s += "input: " + std::to_string(spec.in_channels) + " x " +
         std::to_string(config_image_size(cfg)) + " x " + std::to_string(config_image_size(cfg)) +
         "\n";
    s += "sites:\n";
    for (const auto& bi : count_blocks(spec)) {
        char line[160];
        std::snprintf(line, sizeof(line), "  %-18s %3d -> %-3d stride %d  %s\n", bi.name.c_str(),
                      bi.in_channels, bi.out_channels, bi.stride,
                      !bi.fusion_site      ? "fixed add"
                      : !bi.strategy_applies ? "add (policy-exempt)"
                                             : fusion_kind_name(spec.fusion));
        s += line;
    }
    const ParamReport pr = count_params(spec);
    s += "fusion sites: " + std::to_string(count_fusion_sites(spec)) + "\n";
    s += "params: total=" + std::to_string(pr.total) + " attention=" + std::to_string(pr.attention) +
         " host=" + std::to_string(pr.host) + "\n";
    return s;
}

}  // namespace aff
