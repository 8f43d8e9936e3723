#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaeloc/image_io.hpp"
#include "vaeloc/rng.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

// ---------------------------------------------------------------- synthesis

enum class TextureKind { gaussian_blobs, sinusoidal, smooth_noise };

inline const char* to_string(TextureKind k) {
    switch (k) {
        case TextureKind::gaussian_blobs: return "gaussian_blobs";
        case TextureKind::sinusoidal: return "sinusoidal";
        default: return "smooth_noise";
    }
}

inline TextureKind texture_from_string(const std::string& name) {
    if (name == "gaussian_blobs") return TextureKind::gaussian_blobs;
    if (name == "sinusoidal") return TextureKind::sinusoidal;
    if (name == "smooth_noise") return TextureKind::smooth_noise;
    throw ConfigError("unknown texture '" + name +
                      "' (valid: gaussian_blobs, sinusoidal, smooth_noise)");
}

/// Each family is driven by at most 8 per-image factors so a small-latent
/// model can capture the manifold.
struct TextureParams {
    int blob_count = 3;               // gaussian_blobs: 2 + 2*count factors
    double blob_sigma_min = 0.08;     // as a fraction of image size
    double blob_sigma_max = 0.20;
    double blob_amp_min = 0.8;
    double blob_amp_max = 1.4;
    double freq_min = 0.25;           // sinusoidal, radians per pixel
    double freq_max = 0.90;
    double amp_min = 0.8;
    double amp_max = 1.2;
    double smooth_amp = 1.0;          // smooth_noise coefficient scale
};

struct SyntheticConfig {
    int n_images = 1;
    int image_size = 64;
    TextureKind texture = TextureKind::sinusoidal;
    TextureParams params;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_images < 1) throw ConfigError("synthetic: n_images must be >= 1");
        if (image_size < 4) throw ConfigError("synthetic: image_size must be >= 4");
        const auto& p = params;
        if (p.blob_count < 1 || p.blob_count > 3)
            throw ConfigError("synthetic: blob_count must be in [1,3]");
        if (p.blob_sigma_min <= 0 || p.blob_sigma_max < p.blob_sigma_min)
            throw ConfigError("synthetic: bad blob sigma range");
        if (p.freq_min <= 0 || p.freq_max < p.freq_min)
            throw ConfigError("synthetic: bad frequency range");
        if (p.amp_max < p.amp_min || p.blob_amp_max < p.blob_amp_min)
            throw ConfigError("synthetic: bad amplitude range");
        if (p.smooth_amp <= 0) throw ConfigError("synthetic: smooth_amp must be > 0");
    }
};

namespace detail {

inline void fill_sinusoidal(double* img, int s, const TextureParams& p, Rng& rng) {
    const double a = rng.uniform(p.amp_min, p.amp_max);
    const double fx = rng.uniform(p.freq_min, p.freq_max);
    const double fy = rng.uniform(p.freq_min, p.freq_max);
    const double phx = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double phy = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            img[y * s + x] = a * std::sin(fx * x + phx) * std::cos(fy * y + phy);
}

inline void fill_gaussian_blobs(double* img, int s, const TextureParams& p, Rng& rng) {
    const double sigma = rng.uniform(p.blob_sigma_min, p.blob_sigma_max) * s;
    const double amp = rng.uniform(p.blob_amp_min, p.blob_amp_max);
    std::vector<std::pair<double, double>> centers;
    for (int k = 0; k < p.blob_count; ++k)
        centers.emplace_back(rng.uniform(0.15 * s, 0.85 * s), rng.uniform(0.15 * s, 0.85 * s));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double v = 0.0;
            for (const auto& [cx, cy] : centers) {
                const double dx = x - cx, dy = y - cy;
                v += std::exp(-(dx * dx + dy * dy) * inv);
            }
            img[y * s + x] = amp * v;
        }
}

inline void fill_smooth_noise(double* img, int s, const TextureParams& p, Rng& rng) {
    // 8 fixed low-frequency cosine modes with random coefficients
    static constexpr int modes[8][2] = {{0, 1}, {1, 0}, {1, 1}, {0, 2},
                                        {2, 0}, {1, 2}, {2, 1}, {2, 2}};
    double coeff[8];
    for (double& c : coeff) c = p.smooth_amp * rng.normal();
    const double inv = 1.0 / (s - 1);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double v = 0.0;
            for (int k = 0; k < 8; ++k)
                v += coeff[k] * std::cos(std::numbers::pi * modes[k][0] * x * inv) *
                     std::cos(std::numbers::pi * modes[k][1] * y * inv);
            img[y * s + x] = v;
        }
}

}  // namespace detail

template <typename T>
Tensor<T> generate_synthetic_normal(const SyntheticConfig& cfg) {
    cfg.validate();
    const int s = cfg.image_size;
    Tensor<T> out(cfg.n_images, 1, s, s);
    std::vector<double> plane(static_cast<std::size_t>(s) * s);
    for (int b = 0; b < cfg.n_images; ++b) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(b)));
        switch (cfg.texture) {
            case TextureKind::sinusoidal:
                detail::fill_sinusoidal(plane.data(), s, cfg.params, rng);
                break;
            case TextureKind::gaussian_blobs:
                detail::fill_gaussian_blobs(plane.data(), s, cfg.params, rng);
                break;
            default: detail::fill_smooth_noise(plane.data(), s, cfg.params, rng);
        }
        T* dst = out.image(b);
        for (std::size_t i = 0; i < plane.size(); ++i) dst[i] = static_cast<T>(plane[i]);
    }
    return out;
}

// ---------------------------------------------------------------- anomalies

enum class AnomalyShape { disk, square, irregular_blob };

inline const char* to_string(AnomalyShape s) {
    switch (s) {
        case AnomalyShape::disk: return "disk";
        case AnomalyShape::square: return "square";
        default: return "irregular_blob";
    }
}

inline AnomalyShape anomaly_shape_from_string(const std::string& name) {
    if (name == "disk") return AnomalyShape::disk;
    if (name == "square") return AnomalyShape::square;
    if (name == "irregular_blob") return AnomalyShape::irregular_blob;
    throw ConfigError("unknown anomaly shape '" + name +
                      "' (valid: disk, square, irregular_blob)");
}

struct AnomalySpec {
    AnomalyShape shape = AnomalyShape::disk;
    int radius_min = 3;
    int radius_max = 7;
    double shift_min = 1.0;   // every modified pixel moves at least this far
    double shift_max = 2.0;
    int count_min = 1;
    int count_max = 1;
    bool bipolar = false;     // random sign on the shift
    std::uint64_t seed = 0;

    void validate() const {
        if (radius_min < 1 || radius_max < radius_min)
            throw ConfigError("anomaly: radius range must satisfy 1 <= min <= max");
        if (shift_min <= 0 || shift_max < shift_min)
            throw ConfigError("anomaly: shift range must satisfy 0 < min <= max");
        if (count_min < 0 || count_max < count_min)
            throw ConfigError("anomaly: count range must satisfy 0 <= min <= max");
    }
};

template <typename T>
struct Injection {
    Tensor<T> image;  // (1,1,S,S)
    MaskBatch mask;   // nonzero where pixels were modified
};

namespace detail {

template <typename T>
void stamp_disk(Tensor<T>& img, MaskBatch& mask, int cx, int cy, int r, double shift) {
    for (int y = std::max(0, cy - r); y <= std::min(img.h - 1, cy + r); ++y)
        for (int x = std::max(0, cx - r); x <= std::min(img.w - 1, cx + r); ++x) {
            const int dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy > r * r) continue;
            const std::size_t i = static_cast<std::size_t>(y) * img.w + x;
            if (mask.v[i]) continue;  // one shift per pixel keeps the contract exact
            img.v[i] += static_cast<T>(shift);
            mask.v[i] = 1;
        }
}

template <typename T>
void stamp_square(Tensor<T>& img, MaskBatch& mask, int cx, int cy, int r, double shift) {
    for (int y = std::max(0, cy - r); y <= std::min(img.h - 1, cy + r); ++y)
        for (int x = std::max(0, cx - r); x <= std::min(img.w - 1, cx + r); ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * img.w + x;
            if (mask.v[i]) continue;
            img.v[i] += static_cast<T>(shift);
            mask.v[i] = 1;
        }
}

}  // namespace detail

/// Adds seeded anomalies to a single image. The mask marks exactly the
/// modified pixels and every marked pixel moves by at least shift_min.
template <typename T>
Injection<T> inject_anomaly(const Tensor<T>& image, const AnomalySpec& spec) {
    spec.validate();
    if (image.n != 1 || image.c != 1)
        throw ConfigError("inject_anomaly expects a single-image batch");
    const int s = image.h;
    if (image.w != s) throw ConfigError("inject_anomaly expects square images");
    if (2 * spec.radius_max + 1 > s)
        throw ConfigError("anomaly radius " + std::to_string(spec.radius_max) +
                          " does not fit into a " + std::to_string(s) + "px image");

    Injection<T> out;
    out.image = image;
    out.mask = MaskBatch(1, 1, s, s);
    Rng rng(derive_seed(spec.seed, 0xA70));

    const long count = rng.uniform_int(spec.count_min, spec.count_max);
    for (long a = 0; a < count; ++a) {
        const int r = static_cast<int>(rng.uniform_int(spec.radius_min, spec.radius_max));
        const int cx = static_cast<int>(rng.uniform_int(r, s - 1 - r));
        const int cy = static_cast<int>(rng.uniform_int(r, s - 1 - r));
        double shift = rng.uniform(spec.shift_min, spec.shift_max);
        if (spec.bipolar && rng.uniform() < 0.5) shift = -shift;

        switch (spec.shape) {
            case AnomalyShape::disk:
                detail::stamp_disk(out.image, out.mask, cx, cy, r, shift);
                break;
            case AnomalyShape::square:
                detail::stamp_square(out.image, out.mask, cx, cy, r, shift);
                break;
            case AnomalyShape::irregular_blob: {
                // a big core disk plus two offset satellites of the same shift
                detail::stamp_disk(out.image, out.mask, cx, cy, std::max(1, 2 * r / 3), shift);
                for (int j = 0; j < 2; ++j) {
                    const int ox = static_cast<int>(rng.uniform_int(-r / 2, r / 2));
                    const int oy = static_cast<int>(rng.uniform_int(-r / 2, r / 2));
                    const int rr = static_cast<int>(
                        rng.uniform_int(std::max(1L, r / 3L), std::max(1L, 2L * r / 3)));
                    detail::stamp_disk(out.image, out.mask, cx + ox, cy + oy, rr, shift);
                }
                break;
            }
        }
    }
    return out;
}

/// Batch version; image b uses seed derive_seed(spec.seed, b).
template <typename T>
std::pair<Tensor<T>, MaskBatch> inject_batch(const Tensor<T>& images, const AnomalySpec& spec) {
    spec.validate();
    if (images.n < 1 || images.c != 1) throw ConfigError("inject_batch: bad batch shape");
    Tensor<T> out = images;
    MaskBatch masks(images.n, 1, images.h, images.w);
    for (int b = 0; b < images.n; ++b) {
        Tensor<T> one(1, 1, images.h, images.w);
        std::copy(images.image(b), images.image(b) + images.per_image(), one.image(0));
        AnomalySpec per = spec;
        per.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(b));
        auto inj = inject_anomaly(one, per);
        std::copy(inj.image.image(0), inj.image.image(0) + out.per_image(), out.image(b));
        std::copy(inj.mask.image(0), inj.mask.image(0) + masks.per_image(), masks.image(b));
    }
    return {std::move(out), std::move(masks)};
}

// ------------------------------------------------------------ normalization

/// Population mean/std over every pixel of the batch.
template <typename T>
NormStats compute_stats(const Tensor<T>& x) {
    if (x.size() == 0) throw ConfigError("normalize: empty dataset");
    double sum = 0.0;
    for (const T& v : x.v) sum += static_cast<double>(v);
    const double mean = sum / static_cast<double>(x.size());
    double ss = 0.0;
    for (const T& v : x.v) {
        const double d = static_cast<double>(v) - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(x.size());
    const double std_ = std::sqrt(var);
    if (std_ < 1e-12 * std::max(1.0, std::abs(mean)))
        throw ConfigError("normalize: dataset has zero variance");
    return {mean, std_};
}

template <typename T>
Tensor<T> apply_stats(const Tensor<T>& x, const NormStats& stats) {
    if (stats.std <= 0) throw ConfigError("apply_stats: std must be > 0");
    Tensor<T> out = x;
    for (auto& v : out.v)
        v = static_cast<T>((static_cast<double>(v) - stats.mean) / stats.std);
    return out;
}

template <typename T>
std::pair<Tensor<T>, NormStats> normalize_dataset(const Tensor<T>& x) {
    const NormStats stats = compute_stats(x);
    return {apply_stats(x, stats), stats};
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& x, const NormStats& stats) {
    if (stats.std <= 0) throw ConfigError("denormalize: std must be > 0");
    Tensor<T> out = x;
    for (auto& v : out.v)
        v = static_cast<T>(static_cast<double>(v) * stats.std + stats.mean);
    return out;
}

// ------------------------------------------------------------- augmentation

struct AugmentConfig {
    double noise_std = 0.0;
    double rotation_degrees_max = 0.0;
    double intensity_jitter = 0.0;  // gain in [1-j, 1+j], bias in [-j, j]
    std::uint64_t seed = 0;

    void validate() const {
        if (noise_std < 0 || rotation_degrees_max < 0 || intensity_jitter < 0)
            throw ConfigError("augment: all strengths must be >= 0");
    }
};

namespace detail {

// bilinear sample with clamp-to-edge
template <typename T>
double sample_bilinear(const T* img, int h, int w, double sy, double sx) {
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = sy - y0, fx = sx - x0;
    const double top = (1 - fx) * static_cast<double>(img[y0 * w + x0]) +
                       fx * static_cast<double>(img[y0 * w + x1]);
    const double bot = (1 - fx) * static_cast<double>(img[y1 * w + x0]) +
                       fx * static_cast<double>(img[y1 * w + x1]);
    return (1 - fy) * top + fy * bot;
}

}  // namespace detail

/// Rotation about the image center, then intensity jitter, then noise.
/// A zero rotation draw skips resampling entirely.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, const AugmentConfig& cfg) {
    cfg.validate();
    if (image.n != 1 || image.c != 1) throw ConfigError("augment expects a single-image batch");
    Rng rng(derive_seed(cfg.seed, 0xA06));
    const double angle =
        rng.uniform(-cfg.rotation_degrees_max, cfg.rotation_degrees_max) * std::numbers::pi / 180.0;
    const double gain = rng.uniform(1.0 - cfg.intensity_jitter, 1.0 + cfg.intensity_jitter);
    const double bias = rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter);

    Tensor<T> out = image;
    if (angle != 0.0) {
        const double c = std::cos(angle), s = std::sin(angle);
        const double cy = 0.5 * (image.h - 1), cx = 0.5 * (image.w - 1);
        for (int y = 0; y < image.h; ++y)
            for (int x = 0; x < image.w; ++x) {
                const double dy = y - cy, dx = x - cx;
                const double sx = c * dx + s * dy + cx;
                const double sy = -s * dx + c * dy + cy;
                out.v[static_cast<std::size_t>(y) * image.w + x] = static_cast<T>(
                    detail::sample_bilinear(image.image(0), image.h, image.w, sy, sx));
            }
    }
    if (gain != 1.0 || bias != 0.0)
        for (auto& v : out.v) v = static_cast<T>(gain * static_cast<double>(v) + bias);
    if (cfg.noise_std > 0)
        for (auto& v : out.v) v += static_cast<T>(cfg.noise_std * rng.normal());
    return out;
}

/// In-place batch augmentation; image b uses derive_seed(round_seed, b).
template <typename T>
void augment_batch(Tensor<T>& batch, const AugmentConfig& cfg, std::uint64_t round_seed) {
    cfg.validate();
    Tensor<T> one(1, 1, batch.h, batch.w);
    for (int b = 0; b < batch.n; ++b) {
        std::copy(batch.image(b), batch.image(b) + batch.per_image(), one.image(0));
        AugmentConfig per = cfg;
        per.seed = derive_seed(round_seed, static_cast<std::uint64_t>(b));
        const auto aug = augment(one, per);
        std::copy(aug.image(0), aug.image(0) + batch.per_image(), batch.image(b));
    }
}

// ------------------------------------------------------------------ loading

/// Half-pixel-center bilinear resize (src = (dst + 0.5) * in/out - 0.5).
inline Grid<double> resize_bilinear(const Grid<double>& in, int oh, int ow) {
    if (oh < 1 || ow < 1) throw ConfigError("resize: target must be positive");
    Grid<double> out(oh, ow);
    const double ry = static_cast<double>(in.h) / oh;
    const double rx = static_cast<double>(in.w) / ow;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            out.at(y, x) = detail::sample_bilinear(in.v.data(), in.h, in.w,
                                                   (y + 0.5) * ry - 0.5, (x + 0.5) * rx - 0.5);
    return out;
}

inline Grid<double> resize_nearest(const Grid<double>& in, int oh, int ow) {
    if (oh < 1 || ow < 1) throw ConfigError("resize: target must be positive");
    Grid<double> out(oh, ow);
    const double ry = static_cast<double>(in.h) / oh;
    const double rx = static_cast<double>(in.w) / ow;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const int sy = std::clamp(static_cast<int>(std::floor((y + 0.5) * ry)), 0, in.h - 1);
            const int sx = std::clamp(static_cast<int>(std::floor((x + 0.5) * rx)), 0, in.w - 1);
            out.at(y, x) = in.at(sy, sx);
        }
    return out;
}

template <typename T>
struct LoadedDataset {
    Tensor<T> images;                    // (n,1,S,S), normalized
    MaskBatch masks;                     // all-zero rows where no mask file exists
    bool has_masks = false;
    NormStats stats;                     // fitted or reused, per the call
    std::vector<std::string> files;      // loaded filenames, sorted
    std::vector<std::string> with_mask;  // subset of files that had a mask
    std::vector<std::string> skipped;    // "name: reason" for everything else
};

/// Loads PNG / raw-grid images from a directory (masks from masks/<stem>.png,
/// nonzero = anomalous), resizes to target_size, and normalizes: with stats
/// fitted on the loaded set, or with caller-provided stats when reuse != null.
template <typename T>
LoadedDataset<T> load_image_dir(const std::filesystem::path& dir, int target_size,
                                const NormStats* reuse = nullptr) {
    if (target_size < 1) throw ConfigError("load_image_dir: target size must be >= 1");
    if (!std::filesystem::is_directory(dir))
        throw IoError("not a directory: " + dir.string());

    std::vector<std::string> names;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());

    LoadedDataset<T> out;
    std::vector<Grid<double>> planes;
    std::vector<Grid<double>> mask_planes;  // empty grid = no mask
    const auto lower_ext = [](const std::string& n) {
        const auto dot = n.rfind('.');
        std::string e = dot == std::string::npos ? "" : n.substr(dot);
        for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return e;
    };

    for (const auto& name : names) {
        // our own sidecar files are expected next to the images, not worth a warning
        if (name == "manifest.json" || name == "config_resolved.txt") continue;
        const std::string ext = lower_ext(name);
        if (ext != ".png" && ext != ".amap") {
            out.skipped.push_back(name + ": unsupported extension");
            std::cerr << "warning: skipping " << name << " (unsupported extension)\n";
            continue;
        }
        Grid<double> img;
        try {
            img = ext == ".png" ? read_png_gray(dir / name) : read_amap(dir / name);
        } catch (const Error& e) {
            out.skipped.push_back(name + ": " + e.what());
            std::cerr << "warning: skipping " << name << " (" << e.what() << ")\n";
            continue;
        }
        planes.push_back(resize_bilinear(img, target_size, target_size));
        out.files.push_back(name);

        const std::string stem = name.substr(0, name.rfind('.'));
        const auto mask_path = dir / "masks" / (stem + ".png");
        Grid<double> mask;
        if (std::filesystem::exists(mask_path)) {
            try {
                mask = resize_nearest(read_png_gray(mask_path), target_size, target_size);
                out.with_mask.push_back(name);
            } catch (const Error& e) {
                out.skipped.push_back("masks/" + stem + ".png: " + e.what());
                std::cerr << "warning: skipping mask for " << name << " (" << e.what() << ")\n";
                mask = Grid<double>();
            }
        }
        mask_planes.push_back(std::move(mask));
    }
    if (planes.empty()) throw IoError("no loadable images in " + dir.string());

    const int n = static_cast<int>(planes.size());
    out.images = Tensor<T>(n, 1, target_size, target_size);
    out.masks = MaskBatch(n, 1, target_size, target_size);
    for (int b = 0; b < n; ++b) {
        T* dst = out.images.image(b);
        for (std::size_t i = 0; i < planes[static_cast<std::size_t>(b)].size(); ++i)
            dst[i] = static_cast<T>(planes[static_cast<std::size_t>(b)].v[i]);
        const auto& m = mask_planes[static_cast<std::size_t>(b)];
        if (m.size() > 0) {
            out.has_masks = true;
            std::uint8_t* md = out.masks.image(b);
            for (std::size_t i = 0; i < m.size(); ++i) md[i] = m.v[i] > 0.0 ? 1 : 0;
        }
    }

    if (reuse) {
        out.stats = *reuse;
        out.images = apply_stats(out.images, out.stats);
    } else {
        auto [normed, stats] = normalize_dataset(out.images);
        out.images = std::move(normed);
        out.stats = stats;
    }
    return out;
}

template <typename T>
nlohmann::json manifest_json(const LoadedDataset<T>& ds) {
    nlohmann::json j;
    j["files"] = ds.files;
    j["with_mask"] = ds.with_mask;
    j["skipped"] = ds.skipped;
    j["count"] = ds.files.size();
    j["image_size"] = ds.images.h;
    j["stats"] = {{"mean", ds.stats.mean}, {"std", ds.stats.std}};
    return j;
}

}  // namespace vaeloc
