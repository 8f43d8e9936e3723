// ELBO decomposition: Gaussian reconstruction negative log-likelihood (with
// additive constants dropped), closed-form KL against the standard-normal
// prior, and the beta-weighted total. Scalars are per-sample pixel/dim sums,
// averaged over the batch; pixel maps are never batch-averaged.
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "vaeloc/common.hpp"
#include "vaeloc/model.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

template <typename T>
struct LossBreakdown {
    double rec_nll = 0.0;       // mean over batch of 0.5 * sum((x - r)^2)
    double kl = 0.0;            // mean over batch of per-sample KL sums
    double total = 0.0;         // rec_nll + beta * kl
    double beta = 1.0;
    Tensor<T> rec_pixel_map;    // (B,1,H,W), entries (x - r)^2
};

/// Squared-error pixel map and the 0.5-weighted per-sample sum (batch mean).
template <typename T>
std::pair<double, Tensor<T>> reconstruction_nll(const Tensor<T>& x, const Tensor<T>& recon) {
    if (!x.same_shape(recon))
        throw ConfigError("reconstruction_nll: shape mismatch " + x.shape_str() + " vs " +
                          recon.shape_str());
    Tensor<T> map(x.n, x.c, x.h, x.w);
    double total = 0.0;
    for (int b = 0; b < x.n; ++b) {
        const T* xi = x.image(b);
        const T* ri = recon.image(b);
        T* mi = map.image(b);
        double s = 0.0;
        for (std::size_t i = 0; i < x.per_image(); ++i) {
            const double d = static_cast<double>(xi[i]) - static_cast<double>(ri[i]);
            mi[i] = static_cast<T>(d * d);
            s += d * d;
        }
        total += 0.5 * s;
    }
    return {total / x.n, std::move(map)};
}

template <typename T>
struct KlResult {
    double scalar = 0.0;          // batch mean of per-sample sums
    std::vector<double> per_dim;  // (batch * dim): 0.5(mu^2 + s^2 - 2 log s - 1)
};

template <typename T>
KlResult<T> kl_divergence(const GaussianLatent<T>& latent) {
    KlResult<T> out;
    out.per_dim.resize(latent.mu.size());
    for (std::size_t i = 0; i < latent.mu.size(); ++i) {
        const double mu = static_cast<double>(latent.mu[i]);
        const double ls = static_cast<double>(latent.log_sigma[i]);
        if (!std::isfinite(mu) || !std::isfinite(ls))
            throw NumericError("kl_divergence: non-finite latent entry");
        const double s2 = std::exp(2.0 * ls);
        out.per_dim[i] = 0.5 * (mu * mu + s2 - 2.0 * ls - 1.0);
    }
    double total = 0.0;
    for (double d : out.per_dim) total += d;
    out.scalar = latent.batch > 0 ? total / latent.batch : 0.0;
    return out;
}

/// beta = 1 reproduces the plain VAE loss exactly.
template <typename T>
LossBreakdown<T> beta_elbo_loss(const Tensor<T>& x, const VAEOutput<T>& output, double beta) {
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    LossBreakdown<T> out;
    auto [rec, map] = reconstruction_nll(x, output.reconstruction);
    out.rec_nll = rec;
    out.rec_pixel_map = std::move(map);
    out.kl = kl_divergence(output.latent).scalar;
    out.beta = beta;
    out.total = out.rec_nll + beta * out.kl;
    return out;
}

}  // namespace vaeloc
