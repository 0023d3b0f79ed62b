#pragma once

// Binary container used for datasets, checkpoints and attention-map dumps.
//
// Layout, all integers little-endian:
//   header (16 bytes): magic "FSDS", version u32, count u32, record_len u32
//   dataset records:   label u16, optional mask u8[h*w], pixels u8[c*h*w]
//   blob records:      name_len u32, name bytes, shape 4xu32, f64 data
//
// Dataset records are fixed-size (record_len in the header); blob containers
// carry variable-length records and set record_len to 0. The header does not
// store image geometry, so dataset readers take the expected dimensions and
// validate record_len against them.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "aff/data.hpp"
#include "aff/errors.hpp"
#include "aff/tensor.hpp"

namespace aff {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'F', 'S', 'D', 'S'};

namespace detail {

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

inline void require_bytes(const std::vector<unsigned char>& buf, std::size_t off, std::size_t need,
                          const std::string& what) {
    if (off + need > buf.size())
        throw FormatError(what + " truncated at byte offset " + std::to_string(off) + " (file has " +
                          std::to_string(buf.size()) + " bytes)");
}

inline std::uint16_t get_u16(const std::vector<unsigned char>& buf, std::size_t& off) {
    std::uint16_t v = static_cast<std::uint16_t>(buf[off] | (buf[off + 1] << 8));
    off += 2;
    return v;
}

inline std::uint32_t get_u32(const std::vector<unsigned char>& buf, std::size_t& off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[off + i]) << (8 * i);
    off += 4;
    return v;
}

inline double get_f64(const std::vector<unsigned char>& buf, std::size_t& off) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[off + i]) << (8 * i);
    off += 8;
    return std::bit_cast<double>(bits);
}

inline unsigned char quantize_unit(double v) {
    if (v <= 0.0) return 0;
    if (v >= 1.0) return 255;
    return static_cast<unsigned char>(std::lround(v * 255.0));
}

}  // namespace detail

struct ContainerHeader {
    std::uint32_t version = kContainerVersion;
    std::uint32_t count = 0;
    std::uint32_t record_len = 0;
};

inline void encode_header(std::vector<unsigned char>& out, const ContainerHeader& h) {
    for (char c : kContainerMagic) out.push_back(static_cast<unsigned char>(c));
    detail::put_u32(out, h.version);
    detail::put_u32(out, h.count);
    detail::put_u32(out, h.record_len);
}

inline ContainerHeader decode_header(const std::vector<unsigned char>& buf, std::size_t& off,
                                     const std::string& what) {
    detail::require_bytes(buf, off, 16, what + " header");
    for (char c : kContainerMagic) {
        if (buf[off] != static_cast<unsigned char>(c))
            throw FormatError(what + ": bad magic at byte offset " + std::to_string(off) +
                              " (not an FSDS container)");
        ++off;
    }
    ContainerHeader h;
    h.version = detail::get_u32(buf, off);
    h.count = detail::get_u32(buf, off);
    h.record_len = detail::get_u32(buf, off);
    if (h.version != kContainerVersion)
        throw FormatError(what + ": unsupported container version " + std::to_string(h.version));
    return h;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "' for reading");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("short write to '" + path + "'");
}

// ---- dataset container ----------------------------------------------------

template <typename T>
std::vector<unsigned char> encode_dataset(const Dataset<T>& ds, bool with_mask) {
    std::size_t c = 0, h = 0, w = 0;
    if (!ds.empty()) {
        c = static_cast<std::size_t>(ds[0].pixels.shape().c);
        h = static_cast<std::size_t>(ds[0].pixels.shape().h);
        w = static_cast<std::size_t>(ds[0].pixels.shape().w);
    }
    ContainerHeader hd;
    hd.count = static_cast<std::uint32_t>(ds.size());
    hd.record_len = static_cast<std::uint32_t>(2 + (with_mask ? h * w : 0) + c * h * w);

    std::vector<unsigned char> out;
    out.reserve(16 + ds.size() * hd.record_len);
    encode_header(out, hd);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& img = ds[i];
        if (static_cast<std::size_t>(img.pixels.shape().c) != c ||
            static_cast<std::size_t>(img.pixels.shape().h) != h ||
            static_cast<std::size_t>(img.pixels.shape().w) != w)
            throw InputError("dataset image " + std::to_string(i) + " shape " + img.pixels.shape().str() +
                             " differs from first image");
        if (img.label < 0 || img.label > 0xffff)
            throw InputError("dataset image " + std::to_string(i) + " label " + std::to_string(img.label) +
                             " does not fit in u16");
        detail::put_u16(out, static_cast<std::uint16_t>(img.label));
        if (with_mask) {
            if (img.mask.size() != h * w)
                throw InputError("dataset image " + std::to_string(i) + " mask has " +
                                 std::to_string(img.mask.size()) + " entries, expected " + std::to_string(h * w));
            for (int id : img.mask) {
                if (id < 0 || id > 255)
                    throw InputError("mask id " + std::to_string(id) + " does not fit in u8");
                out.push_back(static_cast<unsigned char>(id));
            }
        }
        for (std::size_t k = 0; k < img.pixels.size(); ++k)
            out.push_back(detail::quantize_unit(static_cast<double>(img.pixels[k])));
    }
    return out;
}

template <typename T>
Dataset<T> decode_dataset(const std::vector<unsigned char>& buf, int channels, int height, int width,
                          bool with_mask, const std::string& what = "dataset") {
    std::size_t off = 0;
    const ContainerHeader hd = decode_header(buf, off, what);
    const std::size_t plane = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    const std::size_t expect_len = 2 + (with_mask ? plane : 0) + static_cast<std::size_t>(channels) * plane;
    if (hd.count > 0 && hd.record_len != expect_len)
        throw FormatError(what + ": record_len " + std::to_string(hd.record_len) + " does not match expected " +
                          std::to_string(expect_len) + " for " + std::to_string(channels) + "x" +
                          std::to_string(height) + "x" + std::to_string(width) +
                          (with_mask ? " with mask" : ""));
    detail::require_bytes(buf, off, static_cast<std::size_t>(hd.count) * hd.record_len, what + " records");
    if (off + static_cast<std::size_t>(hd.count) * hd.record_len != buf.size())
        throw FormatError(what + ": trailing bytes after record " + std::to_string(hd.count) +
                          " at byte offset " + std::to_string(off + std::size_t(hd.count) * hd.record_len));

    Dataset<T> ds;
    ds.reserve(hd.count);
    for (std::uint32_t i = 0; i < hd.count; ++i) {
        LabeledImage<T> img;
        img.label = detail::get_u16(buf, off);
        if (with_mask) {
            img.mask.resize(plane);
            for (std::size_t k = 0; k < plane; ++k) img.mask[k] = buf[off + k];
            off += plane;
        }
        img.pixels = Tensor<T>(Shape{1, channels, height, width});
        for (std::size_t k = 0; k < img.pixels.size(); ++k)
            img.pixels[k] = static_cast<T>(buf[off + k] / 255.0);
        off += static_cast<std::size_t>(channels) * plane;
        ds.push_back(std::move(img));
    }
    return ds;
}

template <typename T>
void write_dataset(const std::string& path, const Dataset<T>& ds, bool with_mask) {
    write_file_bytes(path, encode_dataset(ds, with_mask));
}

template <typename T>
Dataset<T> read_dataset(const std::string& path, int channels, int height, int width, bool with_mask) {
    return decode_dataset<T>(read_file_bytes(path), channels, height, width, with_mask, path);
}

// ---- named-blob container (checkpoints, attention-map dumps) --------------

struct Blob {
    std::string name;
    Shape shape;
    std::vector<double> data;

    Blob() = default;
    Blob(std::string n, Shape s) : name(std::move(n)), shape(s), data(s.numel()) {}

    template <typename T>
    static Blob from_tensor(std::string n, const Tensor<T>& t) {
        Blob b(std::move(n), t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) b.data[i] = static_cast<double>(t[i]);
        return b;
    }

    template <typename T>
    Tensor<T> to_tensor() const {
        Tensor<T> t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(data[i]);
        return t;
    }
};

inline std::vector<unsigned char> encode_blobs(const std::vector<Blob>& blobs) {
    ContainerHeader hd;
    hd.count = static_cast<std::uint32_t>(blobs.size());
    hd.record_len = 0;  // variable-length records

    std::vector<unsigned char> out;
    encode_header(out, hd);
    for (const auto& b : blobs) {
        if (b.data.size() != b.shape.numel())
            throw InputError("blob '" + b.name + "' carries " + std::to_string(b.data.size()) +
                             " values for shape " + b.shape.str());
        detail::put_u32(out, static_cast<std::uint32_t>(b.name.size()));
        out.insert(out.end(), b.name.begin(), b.name.end());
        detail::put_u32(out, static_cast<std::uint32_t>(b.shape.n));
        detail::put_u32(out, static_cast<std::uint32_t>(b.shape.c));
        detail::put_u32(out, static_cast<std::uint32_t>(b.shape.h));
        detail::put_u32(out, static_cast<std::uint32_t>(b.shape.w));
        for (double v : b.data) detail::put_f64(out, v);
    }
    return out;
}

inline std::vector<Blob> decode_blobs(const std::vector<unsigned char>& buf,
                                      const std::string& what = "checkpoint") {
    std::size_t off = 0;
    const ContainerHeader hd = decode_header(buf, off, what);
    std::vector<Blob> blobs;
    blobs.reserve(hd.count);
    for (std::uint32_t i = 0; i < hd.count; ++i) {
        const std::string tag = what + " blob " + std::to_string(i);
        detail::require_bytes(buf, off, 4, tag);
        const std::uint32_t name_len = detail::get_u32(buf, off);
        if (name_len > 4096) throw FormatError(tag + ": implausible name length " + std::to_string(name_len));
        detail::require_bytes(buf, off, name_len, tag + " name");
        Blob b;
        b.name.assign(reinterpret_cast<const char*>(buf.data() + off), name_len);
        off += name_len;
        detail::require_bytes(buf, off, 16, tag + " shape");
        b.shape.n = static_cast<int>(detail::get_u32(buf, off));
        b.shape.c = static_cast<int>(detail::get_u32(buf, off));
        b.shape.h = static_cast<int>(detail::get_u32(buf, off));
        b.shape.w = static_cast<int>(detail::get_u32(buf, off));
        const std::size_t n = b.shape.numel();
        detail::require_bytes(buf, off, n * 8, tag + " data");
        b.data.resize(n);
        for (std::size_t k = 0; k < n; ++k) b.data[k] = detail::get_f64(buf, off);
        blobs.push_back(std::move(b));
    }
    if (off != buf.size())
        throw FormatError(what + ": trailing bytes at byte offset " + std::to_string(off));
    return blobs;
}

inline void write_blobs(const std::string& path, const std::vector<Blob>& blobs) {
    write_file_bytes(path, encode_blobs(blobs));
}

inline std::vector<Blob> read_blobs(const std::string& path) {
    return decode_blobs(read_file_bytes(path), path);
}

inline const Blob* find_blob(const std::vector<Blob>& blobs, const std::string& name) {
    for (const auto& b : blobs)
        if (b.name == name) return &b;
    return nullptr;
}

}  // namespace aff
