// Dense rank-4 tensors (batch, channel, height, width) and single-image grids.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vaeloc/common.hpp"

namespace vaeloc {

template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

    std::size_t size() const { return v.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t per_image() const { return static_cast<std::size_t>(c) * h * w; }

    T& at(int b, int ch, int y, int x) {
        return v[((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x];
    }
    const T& at(int b, int ch, int y, int x) const {
        return v[((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x];
    }

    T* image(int b) { return v.data() + static_cast<std::size_t>(b) * per_image(); }
    const T* image(int b) const { return v.data() + static_cast<std::size_t>(b) * per_image(); }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }
};

/// Single-channel image or score grid.
template <typename T>
struct Grid {
    int h = 0, w = 0;
    std::vector<T> v;

    Grid() = default;
    Grid(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, T(0)) {}

    std::size_t size() const { return v.size(); }
    T& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    const T& at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

template <typename T>
Grid<T> grid_from_image(const Tensor<T>& t, int b) {
    if (t.c != 1) throw ConfigError("grid_from_image expects a single-channel tensor");
    Grid<T> g(t.h, t.w);
    const T* src = t.image(b);
    std::copy(src, src + g.size(), g.v.begin());
    return g;
}

/// Population mean/std of the dataset an image batch was normalized against.
struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

/// Rank-4 batch of grayscale images plus the normalization it carries.
template <typename T>
struct ImageBatch {
    Tensor<T> data;          // (batch, 1, H, W)
    NormStats stats;         // source-dataset statistics
    bool normalized = false; // true once normalize_dataset/apply_normalization ran
};

using MaskBatch = Tensor<std::uint8_t>;  // nonzero = anomalous

}  // namespace vaeloc
