#pragma once

#include <png.h>

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "vaeloc/common.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Grayscale PNG -> values in [0,1]. 8- and 16-bit inputs keep their full
/// precision; color inputs are converted with BT.709 luma weights.
inline Grid<double> read_png_gray(const std::filesystem::path& path) {
    detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
    if (!f) throw IoError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
        throw FormatError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed");
    }
    // declared before setjmp so longjmp cannot skip their destructors
    std::vector<std::vector<png_byte>> rows;
    std::vector<png_bytep> rowptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);
    const int channels = png_get_channels(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);

    rows.assign(h, std::vector<png_byte>(rowbytes));
    rowptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rowptrs[y] = rows[y].data();
    png_read_image(png, rowptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Grid<double> out(static_cast<int>(h), static_cast<int>(w));
    const double scale = depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
    for (png_uint_32 y = 0; y < h; ++y) {
        const png_byte* row = rows[y].data();
        for (png_uint_32 x = 0; x < w; ++x) {
            double px[4] = {0, 0, 0, 0};
            for (int c = 0; c < channels; ++c) {
                // PNG stores 16-bit samples big-endian
                if (depth == 16) {
                    const std::size_t i = (x * channels + c) * 2;
                    px[c] = static_cast<double>((row[i] << 8) | row[i + 1]);
                } else {
                    px[c] = static_cast<double>(row[x * channels + c]);
                }
            }
            double v = channels >= 3 ? 0.2126 * px[0] + 0.7152 * px[1] + 0.0722 * px[2] : px[0];
            out.at(static_cast<int>(y), static_cast<int>(x)) = v * scale;
        }
    }
    return out;
}

/// Values are clamped to [0,1] and quantized to the requested depth.
inline void write_png_gray(const std::filesystem::path& path, const Grid<double>& img,
                           int bit_depth = 16) {
    if (bit_depth != 8 && bit_depth != 16)
        throw ConfigError("write_png_gray: bit depth must be 8 or 16");
    if (img.h < 1 || img.w < 1) throw ConfigError("write_png_gray: empty image");
    detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
    if (!f) throw IoError("cannot open " + path.string() + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<png_byte> row(static_cast<std::size_t>(img.w) * (bit_depth / 8));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h),
                 bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const double top = bit_depth == 16 ? 65535.0 : 255.0;
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            double v = std::clamp(img.at(y, x), 0.0, 1.0);
            const auto q = static_cast<unsigned>(std::lround(v * top));
            if (bit_depth == 16) {
                row[static_cast<std::size_t>(x) * 2] = static_cast<png_byte>(q >> 8);
                row[static_cast<std::size_t>(x) * 2 + 1] = static_cast<png_byte>(q & 0xff);
            } else {
                row[static_cast<std::size_t>(x)] = static_cast<png_byte>(q);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Raw float grid: "AMAP", u16 height, u16 width (little-endian), then
// height*width float32 little-endian values in row-major order.
inline constexpr char kAmapMagic[4] = {'A', 'M', 'A', 'P'};

inline void write_amap(const std::filesystem::path& path, const Grid<double>& g) {
    if (g.h < 1 || g.w < 1) throw ConfigError("write_amap: empty grid");
    if (g.h > 0xffff || g.w > 0xffff) throw ConfigError("write_amap: grid too large");
    std::FILE* raw = std::fopen(path.string().c_str(), "wb");
    detail::FilePtr f(raw);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    const auto u16 = [&](std::uint16_t v) {
        const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                    static_cast<unsigned char>(v >> 8)};
        return std::fwrite(b, 1, 2, raw) == 2;
    };
    bool ok = std::fwrite(kAmapMagic, 1, 4, raw) == 4;
    ok = ok && u16(static_cast<std::uint16_t>(g.h)) && u16(static_cast<std::uint16_t>(g.w));
    std::vector<float> vals(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) vals[i] = static_cast<float>(g.v[i]);
    static_assert(sizeof(float) == 4);
    ok = ok && std::fwrite(vals.data(), 4, vals.size(), raw) == vals.size();
    if (!ok) throw IoError("short write: " + path.string());
}

inline Grid<double> read_amap(const std::filesystem::path& path) {
    std::FILE* raw = std::fopen(path.string().c_str(), "rb");
    detail::FilePtr f(raw);
    if (!f) throw IoError("cannot open " + path.string());
    unsigned char head[8];
    if (std::fread(head, 1, 8, raw) != 8)
        throw FormatError("truncated grid header: " + path.string());
    if (std::memcmp(head, kAmapMagic, 4) != 0)
        throw FormatError("bad grid magic: " + path.string());
    const int h = head[4] | (head[5] << 8);
    const int w = head[6] | (head[7] << 8);
    if (h < 1 || w < 1) throw FormatError("empty grid: " + path.string());
    Grid<double> g(h, w);
    std::vector<float> vals(g.size());
    if (std::fread(vals.data(), 4, vals.size(), raw) != vals.size())
        throw FormatError("truncated grid data: " + path.string());
    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] = static_cast<double>(vals[i]);
    return g;
}

namespace detail {

// fixed 6-anchor colormap, dark blue -> yellow, linear between anchors
inline std::array<unsigned char, 3> heat_rgb(double t) {
    static constexpr double anchors[6][3] = {
        {13, 8, 135},  {84, 2, 163},   {156, 23, 158},
        {205, 55, 120}, {246, 147, 34}, {240, 249, 33}};
    t = std::clamp(t, 0.0, 1.0) * 5.0;
    const int k = std::min(4, static_cast<int>(t));
    const double u = t - k;
    std::array<unsigned char, 3> rgb{};
    for (int c = 0; c < 3; ++c)
        rgb[static_cast<std::size_t>(c)] = static_cast<unsigned char>(
            std::lround(anchors[k][c] + u * (anchors[k + 1][c] - anchors[k][c])));
    return rgb;
}

}  // namespace detail

/// RGB heatmap of a score map, scaled per image to [min, max]. The scaling
/// is recorded in a tEXt chunk ("scaling") so maps remain comparable.
inline void write_heatmap_png(const std::filesystem::path& path, const Grid<double>& scores) {
    if (scores.h < 1 || scores.w < 1) throw ConfigError("write_heatmap_png: empty map");
    double lo = scores.v[0], hi = scores.v[0];
    for (double v : scores.v) {
        if (!std::isfinite(v)) throw NumericError("write_heatmap_png: non-finite score");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;

    detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<png_byte> row(static_cast<std::size_t>(scores.w) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(scores.w),
                 static_cast<png_uint_32>(scores.h), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);

    char key[] = "scaling";
    char buf[96];
    std::snprintf(buf, sizeof(buf), "minmax min=%.9g max=%.9g", lo, hi);
    png_text text;
    std::memset(&text, 0, sizeof(text));
    text.compression = PNG_TEXT_COMPRESSION_NONE;
    text.key = key;
    text.text = buf;
    text.text_length = std::strlen(buf);
    png_set_text(png, info, &text, 1);
    png_write_info(png, info);

    for (int y = 0; y < scores.h; ++y) {
        for (int x = 0; x < scores.w; ++x) {
            const auto rgb = detail::heat_rgb((scores.at(y, x) - lo) / span);
            row[static_cast<std::size_t>(x) * 3] = rgb[0];
            row[static_cast<std::size_t>(x) * 3 + 1] = rgb[1];
            row[static_cast<std::size_t>(x) * 3 + 2] = rgb[2];
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace vaeloc
