#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "aff/tensor.hpp"
#include "aff/errors.hpp"

namespace aff {

template <std::floating_point T>
struct LabeledImage {
    Tensor<T> pixels;      // 1 x C x H x W, values in [0,1]
    int label = 0;
    std::vector<int> mask; // empty, or H*W class ids (row-major)
};

template <std::floating_point T>
using Dataset = std::vector<LabeledImage<T>>;

// ---- CIFAR binary ingestion ----

enum class CifarVariant { cifar10, cifar100_coarse, cifar100_fine };

inline const char* cifar_variant_name(CifarVariant v) {
    switch (v) {
        case CifarVariant::cifar10: return "cifar10";
        case CifarVariant::cifar100_coarse: return "cifar100_coarse";
        case CifarVariant::cifar100_fine: return "cifar100_fine";
    }
    return "?";
}

inline CifarVariant parse_cifar_variant(const std::string& s) {
    if (s == "cifar10") return CifarVariant::cifar10;
    if (s == "cifar100_coarse") return CifarVariant::cifar100_coarse;
    if (s == "cifar100_fine") return CifarVariant::cifar100_fine;
    throw ConfigError("unknown cifar variant '" + s + "'");
}

inline int cifar_record_size(CifarVariant v) {
    return v == CifarVariant::cifar10 ? 3073 : 3074;
}

inline int cifar_num_classes(CifarVariant v) {
    switch (v) {
        case CifarVariant::cifar10: return 10;
        case CifarVariant::cifar100_coarse: return 20;
        case CifarVariant::cifar100_fine: return 100;
    }
    return 0;
}

// One 32x32 RGB record: label byte(s), then 3072 pixel bytes as full R, G, B
// planes, each row-major.
template <std::floating_point T>
LabeledImage<T> decode_cifar_record(const unsigned char* rec, CifarVariant v,
                                    std::size_t file_offset) {
    LabeledImage<T> img;
    int label = 0;
    const unsigned char* px = nullptr;
    if (v == CifarVariant::cifar10) {
        label = rec[0];
        px = rec + 1;
    } else {
        label = (v == CifarVariant::cifar100_coarse) ? rec[0] : rec[1];
        px = rec + 2;
    }
    if (label >= cifar_num_classes(v))
        throw FormatError("label " + std::to_string(label) + " out of range for " +
                          cifar_variant_name(v) + " at byte offset " +
                          std::to_string(file_offset));
    img.label = label;
    img.pixels = Tensor<T>({1, 3, 32, 32});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 1024; ++i)
            img.pixels[c * 1024 + i] = static_cast<T>(px[c * 1024 + i]) / T(255);
    return img;
}

template <std::floating_point T>
Dataset<T> load_cifar_binary(const std::string& path, CifarVariant v) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    const std::size_t rec = static_cast<std::size_t>(cifar_record_size(v));
    if (bytes.size() % rec != 0)
        throw FormatError("'" + path + "' truncated: " + std::to_string(bytes.size()) +
                          " bytes is not a multiple of the " + std::to_string(rec) +
                          "-byte record; partial record starts at byte offset " +
                          std::to_string(bytes.size() - bytes.size() % rec));
    Dataset<T> out;
    out.reserve(bytes.size() / rec);
    for (std::size_t off = 0; off < bytes.size(); off += rec)
        out.push_back(decode_cifar_record<T>(bytes.data() + off, v, off));
    return out;
}

template <std::floating_point T>
std::vector<unsigned char> encode_cifar_record(const LabeledImage<T>& img, CifarVariant v) {
    const Shape s = img.pixels.shape();
    if (s.c != 3 || s.h != 32 || s.w != 32)
        throw DimensionError("cifar record needs 1x3x32x32 pixels, got " + s.str());
    std::vector<unsigned char> rec(static_cast<std::size_t>(cifar_record_size(v)), 0);
    unsigned char* px = nullptr;
    if (v == CifarVariant::cifar10) {
        rec[0] = static_cast<unsigned char>(img.label);
        px = rec.data() + 1;
    } else {
        rec[v == CifarVariant::cifar100_coarse ? 0 : 1] = static_cast<unsigned char>(img.label);
        px = rec.data() + 2;
    }
    for (int i = 0; i < 3072; ++i)
        px[i] = static_cast<unsigned char>(std::lround(double(img.pixels[i]) * 255.0));
    return rec;
}

template <std::floating_point T>
void write_cifar_binary(const std::string& path, const Dataset<T>& data, CifarVariant v) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path + "'");
    for (const auto& img : data) {
        auto rec = encode_cifar_record(img, v);
        out.write(reinterpret_cast<const char*>(rec.data()),
                  static_cast<std::streamsize>(rec.size()));
    }
}

// ---- synthetic scenes ----

// One shape per image; class = shape type, sampled scale = fraction of image
// area covered by the shape (not its bounding box).
struct SyntheticConfig {
    int image_size = 16;
    int channels = 3;
    int num_classes = 3; // shape kinds: square, disk, cross, ring, triangle
    double scale_min = 0.05;
    double scale_max = 0.40;
    double noise = 0.10;
    int count = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size < 4) throw ConfigError("synthetic image size must be >= 4");
        if (channels < 1) throw ConfigError("synthetic channels must be >= 1");
        if (num_classes < 2 || num_classes > 5)
            throw ConfigError("synthetic classes must be in [2,5]");
        if (scale_min < 0 || scale_max > 1.0 || scale_min > scale_max)
            throw ConfigError("scale range must satisfy 0 <= min <= max <= 1");
        if (noise < 0 || noise > 1) throw ConfigError("noise level must be in [0,1]");
        if (count < 0) throw ConfigError("sample count must be non-negative");
    }
};

namespace detail {

// Fraction of the unit bounding box each shape kind covers.
inline double shape_coverage(int kind) {
    switch (kind) {
        case 0: return 1.0;       // filled square
        case 1: return 0.25 * 3.14159265358979323846; // inscribed disk
        case 2: return 5.0 / 9.0; // plus sign, arm width 1/3
        case 3: return 0.75;      // square ring, border 1/4
        default: return 0.5;      // triangle, apex at top
    }
}

// Pixel-center membership test in unit bbox coordinates u,v (in [0,1]).
inline bool shape_contains(int kind, double u, double v) {
    switch (kind) {
        case 0: return true;
        case 1: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
        case 2: return std::abs(u - 0.5) <= 1.0 / 6.0 || std::abs(v - 0.5) <= 1.0 / 6.0;
        case 3: return std::abs(u - 0.5) > 0.25 || std::abs(v - 0.5) > 0.25;
        default: return std::abs(u - 0.5) <= v / 2.0;
    }
}

template <std::floating_point T>
LabeledImage<T> render_scene(const SyntheticConfig& cfg, Rng& rng, bool with_mask) {
    const int s = cfg.image_size;
    std::uniform_int_distribution<int> cls(0, cfg.num_classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    LabeledImage<T> img;
    img.label = cls(rng);
    img.pixels = Tensor<T>({1, cfg.channels, s, s});
    if (with_mask) img.mask.assign(static_cast<std::size_t>(s) * s, 0);

    const double area = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
    // Bounding box sized so the shape covers `area` of the image; clamped to
    // the frame when the requested coverage is unreachable for this kind.
    const double side = std::min(double(s), s * std::sqrt(area / shape_coverage(img.label)));
    const double x0 = unit(rng) * (s - side);
    const double y0 = unit(rng) * (s - side);

    std::vector<T> color(static_cast<std::size_t>(cfg.channels));
    for (auto& c : color) c = static_cast<T>(0.6 + 0.4 * unit(rng));

    for (int ch = 0; ch < cfg.channels; ++ch)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                img.pixels.at(0, ch, y, x) = static_cast<T>(cfg.noise * unit(rng));

    if (side > 0) {  // scale 0 is a legal empty scene
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const double u = (x + 0.5 - x0) / side;
                const double v = (y + 0.5 - y0) / side;
                if (u < 0 || u >= 1 || v < 0 || v >= 1) continue;
                if (!shape_contains(img.label, u, v)) continue;
                for (int ch = 0; ch < cfg.channels; ++ch) img.pixels.at(0, ch, y, x) = color[ch];
                if (with_mask) img.mask[static_cast<std::size_t>(y) * s + x] = img.label + 1;
            }
        }
    }
    return img;
}

} // namespace detail

template <std::floating_point T>
Dataset<T> gen_synthetic_classification(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Dataset<T> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i)
        out.push_back(detail::render_scene<T>(cfg, rng, /*with_mask=*/false));
    return out;
}

// Masks use 0 for background and shape class + 1 for interiors, so a
// segmentation head needs num_classes + 1 outputs.
template <std::floating_point T>
Dataset<T> gen_synthetic_segmentation(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Dataset<T> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i)
        out.push_back(detail::render_scene<T>(cfg, rng, /*with_mask=*/true));
    return out;
}

// ---- normalization & augmentation ----

template <std::floating_point T>
struct ChannelStats {
    std::vector<T> mean, stddev;
};

template <std::floating_point T>
ChannelStats<T> channel_stats(const Dataset<T>& data) {
    if (data.empty()) throw InputError("cannot compute statistics of an empty dataset");
    const int channels = data.front().pixels.shape().c;
    std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(channels), 0.0);
    std::int64_t per_channel = 0;
    for (const auto& img : data) {
        const Shape s = img.pixels.shape();
        if (s.c != channels) throw DimensionError("mixed channel counts in dataset");
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    const double v = img.pixels.at(0, c, y, x);
                    sum[static_cast<std::size_t>(c)] += v;
                    sumsq[static_cast<std::size_t>(c)] += v * v;
                }
        per_channel += std::int64_t(s.h) * s.w;
    }
    ChannelStats<T> st;
    st.mean.resize(static_cast<std::size_t>(channels));
    st.stddev.resize(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
        const double m = sum[static_cast<std::size_t>(c)] / static_cast<double>(per_channel);
        const double var =
            sumsq[static_cast<std::size_t>(c)] / static_cast<double>(per_channel) - m * m;
        st.mean[static_cast<std::size_t>(c)] = static_cast<T>(m);
        st.stddev[static_cast<std::size_t>(c)] =
            static_cast<T>(var > 0 ? std::sqrt(var) : 1.0);
    }
    return st;
}

template <std::floating_point T>
void normalize_inplace(Tensor<T>& img, const ChannelStats<T>& st) {
    const Shape s = img.shape();
    if (s.c != static_cast<int>(st.mean.size()))
        throw DimensionError("normalization stats cover " + std::to_string(st.mean.size()) +
                             " channels, image has " + std::to_string(s.c));
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const T m = st.mean[static_cast<std::size_t>(c)];
            const T sd = st.stddev[static_cast<std::size_t>(c)];
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) img.at(n, c, y, x) = (img.at(n, c, y, x) - m) / sd;
        }
}

// Random crop from a zero-padded frame plus horizontal flip — the standard
// small-image training augmentation. Eval paths skip this entirely.
template <std::floating_point T>
Tensor<T> augment_crop_flip(const Tensor<T>& img, Rng& rng, int pad = 4) {
    const Shape s = img.shape();
    std::uniform_int_distribution<int> off(0, 2 * pad);
    std::uniform_int_distribution<int> coin(0, 1);
    const int dy = off(rng), dx = off(rng);
    const bool flip = coin(rng) == 1;
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    const int sy = y + dy - pad;
                    const int sx = (flip ? s.w - 1 - x : x) + dx - pad;
                    out.at(n, c, y, x) = (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w)
                                             ? img.at(n, c, sy, sx)
                                             : T(0);
                }
    return out;
}

// ---- metrics ----

inline double metric_accuracy(const std::vector<int>& predictions,
                              const std::vector<int>& labels) {
    if (predictions.empty()) throw InputError("accuracy of empty prediction set");
    if (predictions.size() != labels.size())
        throw InputError("accuracy needs equal-length predictions and labels");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

// Mean over classes of |pred ∩ truth| / |pred ∪ truth|; classes present in
// neither are excluded from the mean.
inline double metric_miou(const std::vector<int>& pred, const std::vector<int>& truth,
                          int num_classes) {
    if (pred.empty()) throw InputError("mIoU of empty masks");
    if (pred.size() != truth.size()) throw InputError("mIoU needs equal-length masks");
    std::vector<std::int64_t> inter(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> uni(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], t = truth[i];
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
            throw InputError("mask class id out of range");
        if (p == t) {
            ++inter[static_cast<std::size_t>(p)];
            ++uni[static_cast<std::size_t>(p)];
        } else {
            ++uni[static_cast<std::size_t>(p)];
            ++uni[static_cast<std::size_t>(t)];
        }
    }
    double total = 0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (uni[static_cast<std::size_t>(c)] == 0) continue;
        total += static_cast<double>(inter[static_cast<std::size_t>(c)]) /
                 static_cast<double>(uni[static_cast<std::size_t>(c)]);
        ++counted;
    }
    return counted == 0 ? 0.0 : total / counted;
}

// Per-sample argmax over channels of N x K x 1 x 1 logits.
template <std::floating_point T>
std::vector<int> argmax_classes(const Tensor<T>& logits) {
    const Shape s = logits.shape();
    std::vector<int> out(static_cast<std::size_t>(s.n));
    for (int n = 0; n < s.n; ++n) {
        int best = 0;
        for (int k = 1; k < s.c; ++k)
            if (logits.at(n, k, 0, 0) > logits.at(n, best, 0, 0)) best = k;
        out[static_cast<std::size_t>(n)] = best;
    }
    return out;
}

// Per-pixel argmax of N x K x H x W logits, row-major over (n, y, x).
template <std::floating_point T>
std::vector<int> argmax_pixels(const Tensor<T>& logits) {
    const Shape s = logits.shape();
    std::vector<int> out(static_cast<std::size_t>(s.n) * s.h * s.w);
    std::size_t i = 0;
    for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                int best = 0;
                for (int k = 1; k < s.c; ++k)
                    if (logits.at(n, k, y, x) > logits.at(n, best, y, x)) best = k;
                out[i++] = best;
            }
    return out;
}

} // namespace aff
