#pragma once
// Dataset ingestion: CIFAR-10/100 binary batches, the Tiny ImageNet
// directory layout (JPEG via libjpeg, PPM for lossless fixtures), synthetic
// class-separable sets, and deterministic batching.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>

#include <jpeglib.h>

#include "lisard/core.hpp"

namespace lisard {

namespace fs = std::filesystem;

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

// Immutable after load; pixels live in [0,1].
struct DatasetHandle {
    std::string name;
    Split split = Split::train;
    long num_classes = 0;
    std::array<long, 3> image_spec = {0, 0, 0};  // C,H,W
    std::vector<float> pixels;                   // N * C*H*W
    std::vector<int> labels;

    long length() const { return static_cast<long>(labels.size()); }
    long image_size() const { return image_spec[0] * image_spec[1] * image_spec[2]; }

    const float* image(long i) const { return pixels.data() + i * image_size(); }

    void validate() const {
        require(length() > 0, "dataset is empty");
        require(pixels.size() == static_cast<std::size_t>(length() * image_size()),
                "dataset pixel buffer size mismatch");
        for (int l : labels) {
            require(l >= 0 && l < num_classes, "dataset label out of range");
        }
    }
};

enum class CifarVariant { c10, c100 };

// ---------------------------------------------------------------------------
// CIFAR binary batches.
//
// Record: 1 label byte (CIFAR-10) or coarse+fine label bytes (CIFAR-100,
// fine is used), then 3072 pixel bytes in channel-major R,G,B planes,
// row-major within a plane. Files are fixed-length record concatenations.

namespace detail {

constexpr long kCifarPixelBytes = 3 * 32 * 32;

inline void load_cifar_file(const fs::path& file, CifarVariant variant, DatasetHandle& out) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IngestionError("missing CIFAR batch file: " + file.string());
    is.seekg(0, std::ios::end);
    const long size = static_cast<long>(is.tellg());
    is.seekg(0);
    const long label_bytes = variant == CifarVariant::c10 ? 1 : 2;
    const long record = label_bytes + kCifarPixelBytes;
    if (size == 0) throw IngestionError("empty CIFAR batch file: " + file.string());
    if (size % record != 0) {
        throw IngestionError("truncated CIFAR batch file (size " + std::to_string(size) +
                             " not a multiple of " + std::to_string(record) +
                             "): " + file.string());
    }
    const long n = size / record;
    const int k = variant == CifarVariant::c10 ? 10 : 100;
    std::vector<unsigned char> buf(static_cast<std::size_t>(record));
    out.pixels.reserve(out.pixels.size() + static_cast<std::size_t>(n * kCifarPixelBytes));
    out.labels.reserve(out.labels.size() + static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
        is.read(reinterpret_cast<char*>(buf.data()), record);
        if (!is) throw IngestionError("short read in CIFAR batch file: " + file.string());
        const int label = buf[static_cast<std::size_t>(label_bytes - 1)];  // fine label
        if (label >= k) {
            throw IngestionError("corrupt CIFAR record " + std::to_string(i) + " (label byte " +
                                 std::to_string(label) + " >= " + std::to_string(k) +
                                 "): " + file.string());
        }
        out.labels.push_back(label);
        for (long p = 0; p < kCifarPixelBytes; ++p) {
            out.pixels.push_back(static_cast<float>(buf[static_cast<std::size_t>(label_bytes + p)]) /
                                 255.0f);
        }
    }
}

}  // namespace detail

// path may be the standard dataset directory or a single .bin record file.
inline DatasetHandle load_cifar(const fs::path& path, CifarVariant variant, Split split) {
    DatasetHandle out;
    out.name = variant == CifarVariant::c10 ? "cifar10" : "cifar100";
    out.split = split;
    out.num_classes = variant == CifarVariant::c10 ? 10 : 100;
    out.image_spec = {3, 32, 32};
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        if (variant == CifarVariant::c10) {
            if (split == Split::train) {
                for (int i = 1; i <= 5; ++i)
                    files.push_back(path / ("data_batch_" + std::to_string(i) + ".bin"));
            } else {
                files.push_back(path / "test_batch.bin");
            }
        } else {
            files.push_back(path / (split == Split::train ? "train.bin" : "test.bin"));
        }
        for (auto& f : files) detail::load_cifar_file(f, variant, out);
    } else {
        detail::load_cifar_file(path, variant, out);
    }
    out.validate();
    return out;
}

// Serialize to the CIFAR binary record layout. Pixels are rounded to the
// byte grid; datasets already on that grid (anything loaded, or synthetic
// sets, which are quantized at creation) round-trip exactly.
inline void save_cifar(const DatasetHandle& ds, const fs::path& file, CifarVariant variant) {
    require(ds.image_spec == std::array<long, 3>({3, 32, 32}),
            "save_cifar requires 3x32x32 images");
    const int k = variant == CifarVariant::c10 ? 10 : 100;
    require(ds.num_classes <= k, "save_cifar: labels exceed variant class count");
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open CIFAR file for writing: " + file.string());
    for (long i = 0; i < ds.length(); ++i) {
        const int label = ds.labels[static_cast<std::size_t>(i)];
        if (variant == CifarVariant::c100) {
            os.put(static_cast<char>(label / 5));  // placeholder coarse label
        }
        os.put(static_cast<char>(label));
        const float* img = ds.image(i);
        for (long p = 0; p < ds.image_size(); ++p) {
            int v = static_cast<int>(std::lround(img[p] * 255.0f));
            os.put(static_cast<char>(std::clamp(v, 0, 255)));
        }
    }
}

// ---------------------------------------------------------------------------
// Tiny ImageNet directory layout

namespace detail {

struct RawImage {
    long width = 0, height = 0;
    std::vector<unsigned char> rgb;  // interleaved
};

inline RawImage read_jpeg_rgb(const fs::path& file) {
    FILE* fp = std::fopen(file.c_str(), "rb");
    if (!fp) throw IngestionError("cannot open image: " + file.string());
    jpeg_decompress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    RawImage img;
    img.width = cinfo.output_width;
    img.height = cinfo.output_height;
    img.rgb.resize(static_cast<std::size_t>(img.width * img.height * 3));
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = img.rgb.data() + cinfo.output_scanline * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    return img;
}

inline void write_jpeg_rgb(const fs::path& file, const RawImage& img, int quality = 95) {
    FILE* fp = std::fopen(file.c_str(), "wb");
    if (!fp) throw IoError("cannot open image for writing: " + file.string());
    jpeg_compress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, fp);
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        const unsigned char* row = img.rgb.data() + cinfo.next_scanline * img.width * 3;
        jpeg_write_scanlines(&cinfo, const_cast<unsigned char**>(&row), 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::fclose(fp);
}

inline RawImage read_ppm_rgb(const fs::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IngestionError("cannot open image: " + file.string());
    std::string magic;
    long w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) {
        throw IngestionError("unsupported PPM (want P6 maxval 255): " + file.string());
    }
    is.get();  // single whitespace after header
    RawImage img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<std::size_t>(w * h * 3));
    is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!is) throw IngestionError("truncated PPM: " + file.string());
    return img;
}

inline void write_ppm_rgb(const fs::path& file, const RawImage& img) {
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open image for writing: " + file.string());
    os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
}

inline RawImage read_image_rgb(const fs::path& file) {
    std::string ext = file.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) {
        return static_cast<char>(std::tolower(c));
    });
    if (ext == ".ppm") return read_ppm_rgb(file);
    return read_jpeg_rgb(file);
}

inline bool is_image_file(const fs::path& file) {
    std::string ext = file.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) {
        return static_cast<char>(std::tolower(c));
    });
    return ext == ".jpeg" || ext == ".jpg" || ext == ".ppm";
}

// Interleaved HWC bytes -> planar CHW floats in [0,1].
inline void append_chw(const RawImage& img, std::vector<float>& pixels) {
    const long h = img.height, w = img.width;
    for (long c = 0; c < 3; ++c) {
        for (long y = 0; y < h; ++y) {
            for (long x = 0; x < w; ++x) {
                pixels.push_back(static_cast<float>(img.rgb[(y * w + x) * 3 + c]) / 255.0f);
            }
        }
    }
}

}  // namespace detail

// Standard layout: wnids.txt, train/<wnid>/images/*.JPEG, val/images/*.JPEG
// with val/val_annotations.txt. The validation split serves as the test set;
// images are used at their native 64x64.
inline DatasetHandle load_tiny_imagenet(const fs::path& root, Split split) {
    DatasetHandle out;
    out.name = "tiny-imagenet";
    out.split = split;
    out.image_spec = {3, 64, 64};

    std::vector<std::string> wnids;
    {
        std::ifstream is(root / "wnids.txt");
        if (is) {
            std::string line;
            while (std::getline(is, line)) {
                while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
                if (!line.empty()) wnids.push_back(line);
            }
        } else {
            // Fall back to sorted train subdirectories.
            fs::path train_dir = root / "train";
            if (!fs::is_directory(train_dir))
                throw IngestionError("tiny-imagenet: missing wnids.txt and train/ under " +
                                     root.string());
            for (auto& e : fs::directory_iterator(train_dir)) {
                if (e.is_directory()) wnids.push_back(e.path().filename().string());
            }
            std::sort(wnids.begin(), wnids.end());
        }
    }
    if (wnids.empty()) throw IngestionError("tiny-imagenet: no classes found under " + root.string());
    out.num_classes = static_cast<long>(wnids.size());
    std::map<std::string, int> class_of;
    for (std::size_t i = 0; i < wnids.size(); ++i) class_of[wnids[i]] = static_cast<int>(i);

    auto push_image = [&](const fs::path& file, int label) {
        detail::RawImage img = detail::read_image_rgb(file);
        if (img.width != 64 || img.height != 64) {
            throw IngestionError("tiny-imagenet image is not 64x64: " + file.string());
        }
        detail::append_chw(img, out.pixels);
        out.labels.push_back(label);
    };

    if (split == Split::train) {
        fs::path train_dir = root / "train";
        if (!fs::is_directory(train_dir))
            throw IngestionError("tiny-imagenet: missing train/ under " + root.string());
        std::vector<std::string> dirs;
        for (auto& e : fs::directory_iterator(train_dir)) {
            if (e.is_directory()) dirs.push_back(e.path().filename().string());
        }
        std::sort(dirs.begin(), dirs.end());
        for (auto& d : dirs) {
            auto it = class_of.find(d);
            if (it == class_of.end()) {
                throw IngestionError("tiny-imagenet: unknown class directory '" + d + "'");
            }
            fs::path img_dir = train_dir / d / "images";
            if (!fs::is_directory(img_dir)) img_dir = train_dir / d;
            std::vector<fs::path> files;
            for (auto& e : fs::directory_iterator(img_dir)) {
                if (e.is_regular_file() && detail::is_image_file(e.path())) files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            for (auto& f : files) push_image(f, it->second);
        }
    } else {
        fs::path ann = root / "val" / "val_annotations.txt";
        std::ifstream is(ann);
        if (!is) throw IngestionError("tiny-imagenet: missing annotation file " + ann.string());
        std::string line;
        std::vector<std::pair<std::string, int>> entries;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string fname, wnid;
            ls >> fname >> wnid;
            auto it = class_of.find(wnid);
            if (it == class_of.end()) {
                throw IngestionError("tiny-imagenet: annotation references unknown class '" +
                                     wnid + "'");
            }
            entries.emplace_back(fname, it->second);
        }
        std::sort(entries.begin(), entries.end());
        for (auto& [fname, label] : entries) push_image(root / "val" / "images" / fname, label);
    }
    out.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic class-separable data

// Per-class smooth sinusoid pattern plus Gaussian pixel noise, quantized to
// the byte grid so CIFAR-layout round-trips are exact. Labels are assigned
// round-robin, so counts are balanced within one. index_offset shifts the
// per-sample noise streams, letting a test split share class patterns with a
// train split without sharing any samples.
inline DatasetHandle make_synthetic(long n, long k, std::array<long, 3> spec, std::uint64_t seed,
                                    double pattern_amp = 0.12, double noise_std = 0.06,
                                    long index_offset = 0) {
    require(k >= 2, "make_synthetic: need at least 2 classes");
    require(n >= k, "make_synthetic: need n >= k so every class appears");
    const long c = spec[0], h = spec[1], w = spec[2];
    require(c >= 1 && h >= 1 && w >= 1, "make_synthetic: bad image spec");

    // Class pattern banks.
    std::vector<float> patterns(static_cast<std::size_t>(k * c * h * w));
    for (long cls = 0; cls < k; ++cls) {
        RngStream rng(mix_seed(seed, stream::synth, static_cast<std::uint64_t>(cls)));
        for (long ch = 0; ch < c; ++ch) {
            double fy = 1.0 + std::floor(rng.uniform01() * 3.0);
            double fx = 1.0 + std::floor(rng.uniform01() * 3.0);
            double py = rng.uniform01() * 6.283185307179586;
            double px = rng.uniform01() * 6.283185307179586;
            double sgn = rng.uniform01() < 0.5 ? -1.0 : 1.0;
            for (long y = 0; y < h; ++y) {
                for (long x = 0; x < w; ++x) {
                    double v = sgn * std::sin(6.283185307179586 * fy * y / h + py) *
                               std::cos(6.283185307179586 * fx * x / w + px);
                    patterns[static_cast<std::size_t>(((cls * c + ch) * h + y) * w + x)] =
                        static_cast<float>(v);
                }
            }
        }
    }

    DatasetHandle out;
    out.name = "synthetic";
    out.split = Split::train;
    out.num_classes = k;
    out.image_spec = spec;
    out.pixels.reserve(static_cast<std::size_t>(n * c * h * w));
    out.labels.reserve(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
        const long cls = i % k;
        out.labels.push_back(static_cast<int>(cls));
        RngStream rng(mix_seed(seed, stream::synth,
                               0x100 + static_cast<std::uint64_t>(index_offset + i)));
        const float* pat = patterns.data() + cls * c * h * w;
        for (long p = 0; p < c * h * w; ++p) {
            double v = 0.5 + pattern_amp * pat[p] + noise_std * rng.normal();
            v = std::clamp(v, 0.0, 1.0);
            // Quantize to the byte grid for exact binary round-trips.
            int q = static_cast<int>(std::lround(v * 255.0));
            out.pixels.push_back(static_cast<float>(q) / 255.0f);
        }
    }
    out.validate();
    return out;
}

// First count samples in stored order.
inline DatasetHandle subset(const DatasetHandle& ds, long count) {
    require(count >= 1 && count <= ds.length(), "subset: bad count");
    DatasetHandle out;
    out.name = ds.name;
    out.split = ds.split;
    out.num_classes = ds.num_classes;
    out.image_spec = ds.image_spec;
    out.pixels.assign(ds.pixels.begin(), ds.pixels.begin() + count * ds.image_size());
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + count);
    return out;
}

// ---------------------------------------------------------------------------
// Batching

struct BatchPlan {
    long batch_size = 1;
    std::uint64_t shuffle_seed = 0;
    bool drop_last = false;
};

// Permutation of sample indices, a pure function of (seed, epoch).
inline std::vector<long> epoch_order(long n, const BatchPlan& plan, long epoch) {
    std::vector<long> order(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    RngStream rng(mix_seed(plan.shuffle_seed, stream::shuffle, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

inline ImageBatch gather_images(const DatasetHandle& ds, const long* idx, long count) {
    Tensor t({count, ds.image_spec[0], ds.image_spec[1], ds.image_spec[2]});
    const long sz = ds.image_size();
    for (long b = 0; b < count; ++b) {
        std::memcpy(t.data() + b * sz, ds.image(idx[b]), sizeof(float) * static_cast<std::size_t>(sz));
    }
    return ImageBatch(std::move(t));
}

inline LabelBatch gather_labels(const DatasetHandle& ds, const long* idx, long count) {
    LabelBatch lb;
    lb.labels.resize(static_cast<std::size_t>(count));
    for (long b = 0; b < count; ++b) lb.labels[static_cast<std::size_t>(b)] =
        ds.labels[static_cast<std::size_t>(idx[b])];
    return lb;
}

// Visits each sample exactly once per epoch (minus a final partial batch
// when drop_last); order is a pure function of shuffle_seed and epoch.
template <typename Fn>
void for_each_batch(const DatasetHandle& ds, const BatchPlan& plan, long epoch, Fn&& fn) {
    require(plan.batch_size >= 1, "BatchPlan: batch_size must be >= 1");
    std::vector<long> order = epoch_order(ds.length(), plan, epoch);
    for (long start = 0; start < ds.length(); start += plan.batch_size) {
        const long count = std::min(plan.batch_size, ds.length() - start);
        if (plan.drop_last && count < plan.batch_size) break;
        fn(gather_images(ds, order.data() + start, count),
           gather_labels(ds, order.data() + start, count));
    }
}

inline std::vector<std::pair<ImageBatch, LabelBatch>> iterate_batches(const DatasetHandle& ds,
                                                                      const BatchPlan& plan,
                                                                      long epoch = 1) {
    std::vector<std::pair<ImageBatch, LabelBatch>> out;
    for_each_batch(ds, plan, epoch, [&](ImageBatch xb, LabelBatch yb) {
        out.emplace_back(std::move(xb), std::move(yb));
    });
    return out;
}

// Unshuffled fixed-order batches for evaluation and artifact generation.
template <typename Fn>
void for_each_sequential_batch(const DatasetHandle& ds, long batch_size, Fn&& fn) {
    require(batch_size >= 1, "batch_size must be >= 1");
    std::vector<long> order(static_cast<std::size_t>(ds.length()));
    for (long i = 0; i < ds.length(); ++i) order[static_cast<std::size_t>(i)] = i;
    for (long start = 0; start < ds.length(); start += batch_size) {
        const long count = std::min(batch_size, ds.length() - start);
        fn(start, gather_images(ds, order.data() + start, count),
           gather_labels(ds, order.data() + start, count));
    }
}

inline LabelBatch all_labels(const DatasetHandle& ds) {
    LabelBatch lb;
    lb.labels = ds.labels;
    return lb;
}

// Pad-4 random crop plus horizontal flip, per sample. Off by default in the
// pipeline; the trainer applies it only when explicitly configured.
inline ImageBatch augment_batch(const ImageBatch& x, RngStream& rng, long pad = 4) {
    const long batch = x.batch(), c = x.channels(), h = x.height(), w = x.width();
    Tensor out(x.data.shape());
    for (long b = 0; b < batch; ++b) {
        const long dy = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        const long dx = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        const bool flip = rng.uniform01() < 0.5;
        for (long ch = 0; ch < c; ++ch) {
            for (long y = 0; y < h; ++y) {
                for (long xx = 0; xx < w; ++xx) {
                    long sy = y + dy;
                    long sx = (flip ? w - 1 - xx : xx) + dx;
                    float v = 0.0f;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w) v = x.data.at(b, ch, sy, sx);
                    out.at(b, ch, y, xx) = v;
                }
            }
        }
    }
    return ImageBatch(std::move(out));
}

}  // namespace lisard
