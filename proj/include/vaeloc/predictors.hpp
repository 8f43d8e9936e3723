// The five pixel-wise anomaly maps: squared reconstruction error, magnitudes
// of the loss gradients with respect to the input (full loss, KL term,
// reconstruction term), and the combination map kl_grad .* rec_error.
// Inference uses the deterministic latent z = mu.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vaeloc/common.hpp"
#include "vaeloc/losses.hpp"
#include "vaeloc/model.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

enum class PredictorKind { rec_error, elbo_grad, kl_grad, rec_grad, combi };

inline constexpr PredictorKind kAllPredictors[] = {
    PredictorKind::rec_error, PredictorKind::elbo_grad, PredictorKind::kl_grad,
    PredictorKind::rec_grad, PredictorKind::combi};

inline const char* to_string(PredictorKind k) {
    switch (k) {
        case PredictorKind::rec_error: return "rec_error";
        case PredictorKind::elbo_grad: return "elbo_grad";
        case PredictorKind::kl_grad: return "kl_grad";
        case PredictorKind::rec_grad: return "rec_grad";
        default: return "combi";
    }
}

inline PredictorKind predictor_from_string(const std::string& name) {
    for (PredictorKind k : kAllPredictors)
        if (name == to_string(k)) return k;
    throw ConfigError("unknown predictor '" + name +
                      "' (valid: rec_error, elbo_grad, kl_grad, rec_grad, combi)");
}

template <typename T>
struct AnomalyMap {
    Grid<T> scores;
    PredictorKind kind = PredictorKind::rec_error;
    std::string model_fingerprint;
};

struct PredictorOptions {
    // The reconstruction-term gradient is listed without an absolute value;
    // a signed map cannot be thresholded one-sided, so magnitude is the default.
    bool abs_rec_grad = true;
};

namespace detail {

template <typename T>
Grid<T> abs_grid(const Tensor<T>& g, int b) {
    Grid<T> out = grid_from_image(g, b);
    for (T& v : out.v) v = std::abs(v);
    return out;
}

/// All requested maps for one image from a shared deterministic forward pass.
template <typename T>
std::vector<AnomalyMap<T>> score_image(const Vae<T>& model, const Tensor<T>& x, int b,
                                       const std::vector<PredictorKind>& kinds,
                                       const PredictorOptions& opts,
                                       const std::string& fingerprint) {
    Tensor<T> xi(1, 1, x.h, x.w);
    std::copy(x.image(b), x.image(b) + x.per_image(), xi.image(0));
    const auto cache = model.forward_cached(xi, nullptr);

    Grid<T> rec_map;
    auto ensure_rec = [&] {
        if (rec_map.v.empty()) {
            auto [scalar, map] = reconstruction_nll(xi, cache.recon());
            rec_map = grid_from_image(map, 0);
        }
    };

    std::vector<AnomalyMap<T>> out;
    out.reserve(kinds.size());
    for (PredictorKind kind : kinds) {
        AnomalyMap<T> m;
        m.kind = kind;
        m.model_fingerprint = fingerprint;
        switch (kind) {
            case PredictorKind::rec_error:
                ensure_rec();
                m.scores = rec_map;
                break;
            case PredictorKind::elbo_grad:
                m.scores = abs_grid(model.input_gradient_cached(LossSelector::elbo, cache), 0);
                break;
            case PredictorKind::kl_grad:
                m.scores = abs_grid(model.input_gradient_cached(LossSelector::kl, cache), 0);
                break;
            case PredictorKind::rec_grad: {
                const auto g = model.input_gradient_cached(LossSelector::rec, cache);
                m.scores = opts.abs_rec_grad ? abs_grid(g, 0) : grid_from_image(g, 0);
                break;
            }
            case PredictorKind::combi: {
                ensure_rec();
                m.scores = abs_grid(model.input_gradient_cached(LossSelector::kl, cache), 0);
                for (std::size_t i = 0; i < m.scores.v.size(); ++i)
                    m.scores.v[i] *= rec_map.v[i];
                break;
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace detail

/// One map per image per requested kind; maps_per_image[b][j] answers kinds[j].
template <typename T>
std::vector<std::vector<AnomalyMap<T>>> score_many(const Vae<T>& model, const Tensor<T>& x,
                                                   const std::vector<PredictorKind>& kinds,
                                                   const PredictorOptions& opts = {},
                                                   int workers = 1) {
    if (x.n < 1) throw ConfigError("score: empty batch");
    if (x.h != model.config().image_size || x.w != model.config().image_size || x.c != 1)
        throw ConfigError("score: batch shape " + x.shape_str() + " does not match model");
    const std::string fingerprint = model.fingerprint();
    std::vector<std::vector<AnomalyMap<T>>> out(x.n);
    parallel_chunks(static_cast<std::size_t>(x.n), 1, workers,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t b = begin; b < end; ++b)
                            out[b] = detail::score_image(model, x, static_cast<int>(b), kinds,
                                                         opts, fingerprint);
                    });
    return out;
}

template <typename T>
std::vector<AnomalyMap<T>> score(const Vae<T>& model, const Tensor<T>& x, PredictorKind kind,
                                 const PredictorOptions& opts = {}, int workers = 1) {
    auto per_image = score_many(model, x, {kind}, opts, workers);
    std::vector<AnomalyMap<T>> out;
    out.reserve(per_image.size());
    for (auto& maps : per_image) out.push_back(std::move(maps[0]));
    return out;
}

template <typename T>
std::vector<AnomalyMap<T>> rec_error_map(const Vae<T>& model, const Tensor<T>& x,
                                         int workers = 1) {
    return score(model, x, PredictorKind::rec_error, {}, workers);
}

template <typename T>
std::vector<AnomalyMap<T>> grad_map(const Vae<T>& model, const Tensor<T>& x, LossSelector which,
                                    const PredictorOptions& opts = {}, int workers = 1) {
    switch (which) {
        case LossSelector::elbo: return score(model, x, PredictorKind::elbo_grad, opts, workers);
        case LossSelector::kl: return score(model, x, PredictorKind::kl_grad, opts, workers);
        default: return score(model, x, PredictorKind::rec_grad, opts, workers);
    }
}

template <typename T>
std::vector<AnomalyMap<T>> combi_map(const Vae<T>& model, const Tensor<T>& x, int workers = 1) {
    return score(model, x, PredictorKind::combi, {}, workers);
}

}  // namespace vaeloc
