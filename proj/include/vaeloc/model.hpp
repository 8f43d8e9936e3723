// Convolutional VAE: strided-conv encoder to a diagonal-Gaussian latent,
// mirrored transposed-conv decoder, reparameterized sampling, and reverse-mode
// differentiation of the ELBO terms with respect to parameters or input pixels.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "vaeloc/common.hpp"
#include "vaeloc/layers.hpp"
#include "vaeloc/rng.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

struct ModelConfig {
    int image_size = 64;
    int latent_dim = 32;                              // presets 32, 64, 256
    std::vector<int> encoder_channels = {16, 32, 64, 256};
    double leaky_slope = 0.01;
    double sigma_log_min = -6.0;
    double sigma_log_max = 4.0;
    bool grad_through_noise = false;  // single-sample reparameterized input gradients

    int stages() const { return static_cast<int>(encoder_channels.size()); }

    /// Spatial extent after all strided stages.
    int bottleneck() const { return image_size >> stages(); }

    void validate() const {
        if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
        if (encoder_channels.empty()) throw ConfigError("encoder_channels must be non-empty");
        for (int c : encoder_channels)
            if (c < 1) throw ConfigError("encoder_channels must be strictly positive");
        if (image_size < 1 || image_size % (1 << stages()) != 0)
            throw ConfigError("image_size must be divisible by 2^stages (size " +
                              std::to_string(image_size) + ", stages " +
                              std::to_string(stages()) + ")");
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
            throw ConfigError("leaky_slope must lie in (0,1)");
        if (!(sigma_log_min < sigma_log_max))
            throw ConfigError("sigma_log_clamp must satisfy min < max");
    }

    std::string canonical() const {
        std::ostringstream os;
        os << "image_size=" << image_size << ";latent_dim=" << latent_dim << ";channels=";
        for (std::size_t i = 0; i < encoder_channels.size(); ++i)
            os << (i ? "," : "") << encoder_channels[i];
        os << ";leaky_slope=" << leaky_slope << ";sigma_log_clamp=" << sigma_log_min << ","
           << sigma_log_max << ";grad_through_noise=" << grad_through_noise;
        return os.str();
    }
};

/// Per-sample diagonal-Gaussian posterior parameters, one row per sample.
template <typename T>
struct GaussianLatent {
    int batch = 0, dim = 0;
    std::vector<T> mu, log_sigma;  // each (batch * dim), row-major

    GaussianLatent() = default;
    GaussianLatent(int b, int d)
        : batch(b), dim(d), mu(static_cast<std::size_t>(b) * d, T(0)),
          log_sigma(static_cast<std::size_t>(b) * d, T(0)) {}

    T* mu_row(int b) { return mu.data() + static_cast<std::size_t>(b) * dim; }
    const T* mu_row(int b) const { return mu.data() + static_cast<std::size_t>(b) * dim; }
    T* ls_row(int b) { return log_sigma.data() + static_cast<std::size_t>(b) * dim; }
    const T* ls_row(int b) const { return log_sigma.data() + static_cast<std::size_t>(b) * dim; }
};

enum class ForwardMode { deterministic, sample };

enum class LossSelector { elbo, kl, rec };

inline const char* to_string(LossSelector s) {
    switch (s) {
        case LossSelector::elbo: return "elbo";
        case LossSelector::kl: return "kl";
        default: return "rec";
    }
}

template <typename T>
struct VAEOutput {
    GaussianLatent<T> latent;
    std::vector<T> z;      // (batch * latent_dim)
    Tensor<T> reconstruction;  // decoder mean, input-shaped
};

template <typename T>
struct ParamRef {
    T* data;
    std::size_t size;
    std::string name;
};

template <typename T>
using ParamGrads = std::vector<std::vector<T>>;

/// Intermediate activations kept for one reverse pass.
template <typename T>
struct ForwardCache {
    Tensor<T> x;
    std::vector<Tensor<T>> enc_pre, enc_act;
    GaussianLatent<T> latent;
    std::vector<T> log_sigma_raw;  // pre-clamp head output
    std::vector<T> z, noise;       // noise empty => deterministic z = mu
    Tensor<T> z_tensor;            // z reshaped to (B, l, 1, 1)
    std::vector<Tensor<T>> dec_pre, dec_act;  // dec_pre has stages()+1 entries

    const Tensor<T>& recon() const { return dec_pre.back(); }
};

template <typename T>
class Vae {
public:
    Vae() = default;

    Vae(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
        Rng rng(derive_seed(init_seed, 0x11ull));
        for (auto& c : enc_) c.init(rng);
        head_.init(rng);
        for (auto& d : dec_) d.init(rng);
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<ParamRef<T>> params() {
        std::vector<ParamRef<T>> out;
        auto add = [&](std::vector<T>& v, const std::string& name) {
            out.push_back({v.data(), v.size(), name});
        };
        for (std::size_t i = 0; i < enc_.size(); ++i) {
            add(enc_[i].w, "enc" + std::to_string(i) + ".w");
            add(enc_[i].b, "enc" + std::to_string(i) + ".b");
        }
        add(head_.w, "head.w");
        add(head_.b, "head.b");
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            add(dec_[i].w, "dec" + std::to_string(i) + ".w");
            add(dec_[i].b, "dec" + std::to_string(i) + ".b");
        }
        return out;
    }

    std::vector<ParamRef<const T>> params() const {
        auto& self = const_cast<Vae&>(*this);
        std::vector<ParamRef<const T>> out;
        for (auto& p : self.params()) out.push_back({p.data, p.size, p.name});
        return out;
    }

    ParamGrads<T> make_param_grads() const {
        ParamGrads<T> g;
        for (const auto& p : params()) g.emplace_back(p.size, T(0));
        return g;
    }

    /// Hash of the architecture plus current parameter bytes.
    std::string fingerprint() const {
        std::uint64_t h = fnv1a64(cfg_.canonical());
        for (const auto& p : params()) h = fnv1a64(p.data, p.size * sizeof(T), h);
        return hex64(h);
    }

    GaussianLatent<T> encode(const Tensor<T>& x) const {
        ForwardCache<T> cache;
        encode_cached(x, cache);
        return cache.latent;
    }

    /// z is (batch * latent_dim) row-major.
    Tensor<T> decode(const std::vector<T>& z, int batch = 1) const {
        if (z.size() != static_cast<std::size_t>(batch) * cfg_.latent_dim)
            throw ConfigError("decode: z length " + std::to_string(z.size()) +
                              " does not match batch * latent_dim " +
                              std::to_string(static_cast<std::size_t>(batch) * cfg_.latent_dim));
        ForwardCache<T> cache;
        decode_cached(z, batch, cache);
        return cache.recon();
    }

    VAEOutput<T> forward(const Tensor<T>& x, ForwardMode mode, std::uint64_t seed = 0) const {
        ForwardCache<T> cache;
        if (mode == ForwardMode::deterministic) {
            cache = forward_cached(x, nullptr);
        } else {
            std::vector<T> noise(static_cast<std::size_t>(x.n) * cfg_.latent_dim);
            Rng rng(derive_seed(seed, 0x5eedull));
            for (T& e : noise) e = static_cast<T>(rng.normal());
            cache = forward_cached(x, &noise);
        }
        return {cache.latent, cache.z, cache.recon()};
    }

    /// z = mu + exp(log_sigma) .* noise
    static std::vector<T> reparameterize(const GaussianLatent<T>& lat, const std::vector<T>& noise) {
        if (noise.size() != lat.mu.size())
            throw ConfigError("reparameterize: noise length does not match latent size");
        std::vector<T> z(lat.mu.size());
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = lat.mu[i] + std::exp(lat.log_sigma[i]) * noise[i];
        return z;
    }

    ForwardCache<T> forward_cached(const Tensor<T>& x, const std::vector<T>* noise) const {
        ForwardCache<T> cache;
        encode_cached(x, cache);
        const std::size_t zb = static_cast<std::size_t>(x.n) * cfg_.latent_dim;
        if (noise) {
            if (noise->size() != zb)
                throw ConfigError("forward: noise length does not match batch * latent_dim");
            cache.noise = *noise;
            cache.z.resize(zb);
            for (std::size_t i = 0; i < zb; ++i)
                cache.z[i] = cache.latent.mu[i] +
                             std::exp(cache.latent.log_sigma[i]) * cache.noise[i];
        } else {
            cache.z = cache.latent.mu;
        }
        decode_cached(cache.z, x.n, cache);
        return cache;
    }

    /// Reverse pass. grad_recon/grad_mu/grad_logsig seed the adjoints of the
    /// reconstruction, mu, and (clamped) log_sigma; null means zero. Fills
    /// parameter gradients (accumulating) and/or the input-pixel gradient.
    void backward(const ForwardCache<T>& cache, const Tensor<T>* grad_recon,
                  const std::vector<T>* grad_mu, const std::vector<T>* grad_logsig,
                  ParamGrads<T>* pg, Tensor<T>* gx) const {
        const int B = cache.x.n;
        const int l = cfg_.latent_dim;
        const std::size_t zb = static_cast<std::size_t>(B) * l;
        const int m = cfg_.stages();

        std::vector<T> dmu(zb, T(0)), dls(zb, T(0));
        if (grad_mu)
            for (std::size_t i = 0; i < zb; ++i) dmu[i] = (*grad_mu)[i];
        if (grad_logsig)
            for (std::size_t i = 0; i < zb; ++i) dls[i] = (*grad_logsig)[i];

        // Parameter gradient slots, in params() order.
        auto grad_slot = [&](std::size_t i) -> std::vector<T>* {
            return pg ? &(*pg)[i] : nullptr;
        };
        const std::size_t enc_base = 0;
        const std::size_t head_base = 2 * static_cast<std::size_t>(m);
        const std::size_t dec_base = head_base + 2;

        if (grad_recon) {
            // Decoder: final conv has no activation, earlier ones do.
            Tensor<T> g = *grad_recon;
            for (int i = m; i >= 0; --i) {
                const Tensor<T>& input =
                    (i == 0) ? cache.z_tensor : cache.dec_act[static_cast<std::size_t>(i) - 1];
                Tensor<T> gin;
                dec_[static_cast<std::size_t>(i)].backward(
                    input, g, &gin,
                    grad_slot(dec_base + 2 * static_cast<std::size_t>(i)),
                    grad_slot(dec_base + 2 * static_cast<std::size_t>(i) + 1));
                if (i > 0) {
                    leaky_relu_backward(gin, cache.dec_pre[static_cast<std::size_t>(i) - 1],
                                        static_cast<T>(cfg_.leaky_slope));
                }
                g = std::move(gin);
            }
            // g is now (B, l, 1, 1): the adjoint of z.
            for (std::size_t i = 0; i < zb; ++i) {
                dmu[i] += g.v[i];
                if (!cache.noise.empty())
                    dls[i] += g.v[i] * cache.noise[i] * std::exp(cache.latent.log_sigma[i]);
            }
        }

        // Clamp passes gradient only strictly inside the interval.
        for (std::size_t i = 0; i < zb; ++i) {
            const double raw = static_cast<double>(cache.log_sigma_raw[i]);
            if (!(raw > cfg_.sigma_log_min && raw < cfg_.sigma_log_max)) dls[i] = T(0);
        }

        // Head: channels [0,l) are mu, [l,2l) are log_sigma.
        Tensor<T> ghead(B, 2 * l, 1, 1);
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < l; ++j) {
                ghead.at(b, j, 0, 0) = dmu[static_cast<std::size_t>(b) * l + j];
                ghead.at(b, j + l, 0, 0) = dls[static_cast<std::size_t>(b) * l + j];
            }
        Tensor<T> g;
        head_.backward(cache.enc_act.back(), ghead, &g, grad_slot(head_base),
                       grad_slot(head_base + 1));

        for (int i = m - 1; i >= 0; --i) {
            leaky_relu_backward(g, cache.enc_pre[static_cast<std::size_t>(i)],
                                static_cast<T>(cfg_.leaky_slope));
            const Tensor<T>& input =
                (i == 0) ? cache.x : cache.enc_act[static_cast<std::size_t>(i) - 1];
            const bool want_gx = gx || i > 0;
            Tensor<T> gin;
            enc_[static_cast<std::size_t>(i)].backward(
                input, g, want_gx ? &gin : nullptr,
                grad_slot(enc_base + 2 * static_cast<std::size_t>(i)),
                grad_slot(enc_base + 2 * static_cast<std::size_t>(i) + 1));
            g = std::move(gin);
        }
        if (gx) *gx = std::move(g);
    }

    /// d(selected loss)/d(pixel) for every image in the batch, holding
    /// parameters fixed. Reconstruction and ELBO losses use the per-sample
    /// pixel-sum convention; the ELBO selector weights KL by 1 (Eq.-1 loss).
    Tensor<T> input_gradient(LossSelector sel, const Tensor<T>& x, std::uint64_t seed = 0) const {
        ForwardCache<T> cache;
        if (cfg_.grad_through_noise) {
            std::vector<T> noise(static_cast<std::size_t>(x.n) * cfg_.latent_dim);
            Rng rng(derive_seed(seed, 0x5eedull));
            for (T& e : noise) e = static_cast<T>(rng.normal());
            cache = forward_cached(x, &noise);
        } else {
            cache = forward_cached(x, nullptr);
        }
        return input_gradient_cached(sel, cache);
    }

    /// Same as input_gradient but reuses an existing forward cache.
    Tensor<T> input_gradient_cached(LossSelector sel, const ForwardCache<T>& cache) const {
        const Tensor<T>& x = cache.x;
        const std::size_t zb = cache.latent.mu.size();

        Tensor<T> grad_recon;
        std::vector<T> grad_mu, grad_ls;
        const bool want_rec = sel == LossSelector::rec || sel == LossSelector::elbo;
        const bool want_kl = sel == LossSelector::kl || sel == LossSelector::elbo;
        if (want_rec) {
            grad_recon = Tensor<T>(x.n, x.c, x.h, x.w);
            const Tensor<T>& r = cache.recon();
            for (std::size_t i = 0; i < x.size(); ++i) grad_recon.v[i] = r.v[i] - x.v[i];
        }
        if (want_kl) {
            grad_mu.assign(zb, T(0));
            grad_ls.assign(zb, T(0));
            for (std::size_t i = 0; i < zb; ++i) {
                grad_mu[i] = cache.latent.mu[i];
                const double s2 = std::exp(2.0 * static_cast<double>(cache.latent.log_sigma[i]));
                grad_ls[i] = static_cast<T>(s2 - 1.0);
            }
        }

        Tensor<T> gx;
        backward(cache, want_rec ? &grad_recon : nullptr, want_kl ? &grad_mu : nullptr,
                 want_kl ? &grad_ls : nullptr, nullptr, &gx);
        if (want_rec) {
            // Direct dependence of 0.5*sum((x - r)^2) on x.
            const Tensor<T>& r = cache.recon();
            for (std::size_t i = 0; i < gx.size(); ++i) gx.v[i] += x.v[i] - r.v[i];
        }

        std::size_t bad = 0;
        for (const T& g : gx.v)
            if (!std::isfinite(static_cast<double>(g))) ++bad;
        if (bad > 0)
            throw NumericError("input_gradient(" + std::string(to_string(sel)) + "): " +
                               std::to_string(bad) + " non-finite pixel gradients");
        return gx;
    }

private:
    void build() {
        const int m = cfg_.stages();
        int in_ch = 1;
        for (int i = 0; i < m; ++i) {
            enc_.emplace_back(in_ch, cfg_.encoder_channels[static_cast<std::size_t>(i)], 4, 2, 1);
            in_ch = cfg_.encoder_channels[static_cast<std::size_t>(i)];
        }
        const int S = cfg_.bottleneck();
        if (S < 1) throw ConfigError("bottleneck collapsed below 1 pixel");
        head_ = Conv2d<T>(in_ch, 2 * cfg_.latent_dim, S, 1, 0);
        dec_.emplace_back(cfg_.latent_dim, in_ch, S, 1, 0);
        for (int i = m - 1; i >= 1; --i)
            dec_.emplace_back(cfg_.encoder_channels[static_cast<std::size_t>(i)],
                              cfg_.encoder_channels[static_cast<std::size_t>(i) - 1], 4, 2, 1);
        dec_.emplace_back(cfg_.encoder_channels[0], 1, 4, 2, 1);
    }

    void check_input(const Tensor<T>& x) const {
        if (x.c != 1 || x.h != cfg_.image_size || x.w != cfg_.image_size || x.n < 1)
            throw ConfigError("input shape " + x.shape_str() + " does not match (B,1," +
                              std::to_string(cfg_.image_size) + "," +
                              std::to_string(cfg_.image_size) + ")");
    }

    void encode_cached(const Tensor<T>& x, ForwardCache<T>& cache) const {
        check_input(x);
        const int m = cfg_.stages();
        cache.x = x;
        cache.enc_pre.resize(static_cast<std::size_t>(m));
        cache.enc_act.resize(static_cast<std::size_t>(m));
        const Tensor<T>* cur = &x;
        for (int i = 0; i < m; ++i) {
            enc_[static_cast<std::size_t>(i)].forward(*cur, cache.enc_pre[static_cast<std::size_t>(i)]);
            leaky_relu_forward(cache.enc_pre[static_cast<std::size_t>(i)],
                               static_cast<T>(cfg_.leaky_slope),
                               cache.enc_act[static_cast<std::size_t>(i)]);
            cur = &cache.enc_act[static_cast<std::size_t>(i)];
        }
        Tensor<T> head_out;
        head_.forward(*cur, head_out);

        const int l = cfg_.latent_dim;
        cache.latent = GaussianLatent<T>(x.n, l);
        cache.log_sigma_raw.resize(static_cast<std::size_t>(x.n) * l);
        for (int b = 0; b < x.n; ++b)
            for (int j = 0; j < l; ++j) {
                cache.latent.mu[static_cast<std::size_t>(b) * l + j] = head_out.at(b, j, 0, 0);
                const T raw = head_out.at(b, j + l, 0, 0);
                cache.log_sigma_raw[static_cast<std::size_t>(b) * l + j] = raw;
                cache.latent.log_sigma[static_cast<std::size_t>(b) * l + j] =
                    std::clamp(raw, static_cast<T>(cfg_.sigma_log_min),
                               static_cast<T>(cfg_.sigma_log_max));
            }
    }

    void decode_cached(const std::vector<T>& z, int batch, ForwardCache<T>& cache) const {
        const int m = cfg_.stages();
        cache.dec_pre.resize(static_cast<std::size_t>(m) + 1);
        cache.dec_act.resize(static_cast<std::size_t>(m));
        Tensor<T> zt(batch, cfg_.latent_dim, 1, 1);
        std::copy(z.begin(), z.end(), zt.v.begin());
        cache.z_tensor = std::move(zt);
        const Tensor<T>* cur = &cache.z_tensor;
        for (int i = 0; i <= m; ++i) {
            dec_[static_cast<std::size_t>(i)].forward(*cur, cache.dec_pre[static_cast<std::size_t>(i)]);
            if (i < m) {
                leaky_relu_forward(cache.dec_pre[static_cast<std::size_t>(i)],
                                   static_cast<T>(cfg_.leaky_slope),
                                   cache.dec_act[static_cast<std::size_t>(i)]);
                cur = &cache.dec_act[static_cast<std::size_t>(i)];
            }
        }
    }

    ModelConfig cfg_;
    std::vector<Conv2d<T>> enc_;
    Conv2d<T> head_;
    std::vector<ConvTranspose2d<T>> dec_;
};

}  // namespace vaeloc
