// Training loop: Adam over the beta-weighted ELBO with reparameterized
// sampling, per-epoch shuffling, optional batch augmentation, loss-curve
// logging and checkpointing. All randomness is derived from the config seed,
// so identical configs and data reproduce identical histories.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "vaeloc/checkpoint.hpp"
#include "vaeloc/common.hpp"
#include "vaeloc/losses.hpp"
#include "vaeloc/model.hpp"
#include "vaeloc/rng.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

struct TrainConfig {
    int epochs = 500;
    int batch_size = 64;
    double lr = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double beta = 1.0;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0: final checkpoint only

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
        if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    }
};

struct EpochStats {
    int epoch = 0;  // 1-based
    double rec_nll = 0.0;
    double kl = 0.0;
    double total = 0.0;
    double beta = 1.0;
};

template <typename T>
struct TrainResult {
    Vae<T> model;  // final parameters, or last-good ones after an abort
    std::vector<EpochStats> history;
    bool aborted = false;
    std::string abort_reason;
};

/// Mutates a batch in place; the seed is unique per (epoch, batch).
template <typename T>
using BatchHook = std::function<void(Tensor<T>&, std::uint64_t)>;

/// Runs after each completed epoch, e.g. for periodic checkpoints.
template <typename T>
using EpochHook = std::function<void(const Vae<T>&, const EpochStats&)>;

inline void write_loss_csv(const std::filesystem::path& path,
                           const std::vector<EpochStats>& history) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open loss log for writing: " + path.string());
    f << "epoch,rec_nll,kl,total,beta\n";
    char buf[128];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.rec_nll,
                      e.kl, e.total, e.beta);
        f << buf;
    }
    if (!f) throw IoError("short write on loss log: " + path.string());
}

template <typename T>
TrainResult<T> train(const ModelConfig& mcfg, const Tensor<T>& data, const TrainConfig& cfg,
                     const BatchHook<T>& augment = nullptr,
                     const EpochHook<T>& on_epoch = nullptr) {
    cfg.validate();
    mcfg.validate();
    if (data.n < 1) throw ConfigError("train: empty dataset");
    if (data.h != mcfg.image_size || data.w != mcfg.image_size || data.c != 1)
        throw ConfigError("train: dataset shape " + data.shape_str() + " does not match model");

    TrainResult<T> out;
    out.model = Vae<T>(mcfg, derive_seed(cfg.seed, 0x1417ull));
    Vae<T>& model = out.model;

    Adam<T> opt;
    opt.lr = cfg.lr;
    opt.beta1 = cfg.adam_beta1;
    opt.beta2 = cfg.adam_beta2;

    auto params = model.params();
    std::vector<T*> pdata;
    std::vector<std::size_t> psizes;
    for (auto& p : params) {
        pdata.push_back(p.data);
        psizes.push_back(p.size);
    }

    auto snapshot = [&] {
        std::vector<std::vector<T>> s;
        for (auto& p : params) s.emplace_back(p.data, p.data + p.size);
        return s;
    };
    auto restore = [&](const std::vector<std::vector<T>>& s) {
        for (std::size_t i = 0; i < params.size(); ++i)
            std::copy(s[i].begin(), s[i].end(), params[i].data);
    };
    std::vector<std::vector<T>> last_good = snapshot();

    const int N = data.n;
    const int l = mcfg.latent_dim;
    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);

    ParamGrads<T> grads = model.make_param_grads();
    std::vector<const T*> gptrs(grads.size());

    for (int epoch = 1; epoch <= cfg.epochs && !out.aborted; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0xE0000ull + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double acc_rec = 0.0, acc_kl = 0.0;
        const std::uint64_t epoch_seed =
            derive_seed(cfg.seed, 0xA0000ull + static_cast<std::uint64_t>(epoch));

        for (int start = 0, batch_idx = 0; start < N; start += cfg.batch_size, ++batch_idx) {
            const int bn = std::min(cfg.batch_size, N - start);
            Tensor<T> batch(bn, 1, data.h, data.w);
            for (int i = 0; i < bn; ++i)
                std::copy(data.image(order[start + i]), data.image(order[start + i]) + data.per_image(),
                          batch.image(i));
            if (augment)
                augment(batch, derive_seed(epoch_seed, 0xB0000ull + static_cast<std::uint64_t>(batch_idx)));

            std::vector<T> noise(static_cast<std::size_t>(bn) * l);
            Rng noise_rng(derive_seed(epoch_seed, static_cast<std::uint64_t>(batch_idx)));
            for (T& e : noise) e = static_cast<T>(noise_rng.normal());

            bool bad = false;
            std::string why;
            try {
                const auto cache = model.forward_cached(batch, &noise);
                const auto [rec, map] = reconstruction_nll(batch, cache.recon());
                const double kl = kl_divergence(cache.latent).scalar;
                const double total = rec + cfg.beta * kl;
                if (!std::isfinite(total)) {
                    bad = true;
                    why = "non-finite loss at epoch " + std::to_string(epoch);
                } else {
                    acc_rec += rec * bn;
                    acc_kl += kl * bn;

                    // d(total)/d(recon), d/d(mu), d/d(log_sigma); the 1/bn is
                    // the batch-mean factor in the scalar loss
                    Tensor<T> grad_recon(bn, 1, data.h, data.w);
                    const Tensor<T>& r = cache.recon();
                    for (std::size_t i = 0; i < grad_recon.size(); ++i)
                        grad_recon.v[i] = (r.v[i] - batch.v[i]) / static_cast<T>(bn);
                    std::vector<T> grad_mu(cache.latent.mu.size()), grad_ls(cache.latent.mu.size());
                    for (std::size_t i = 0; i < grad_mu.size(); ++i) {
                        const T mu = cache.latent.mu[i];
                        const T ls = cache.latent.log_sigma[i];
                        grad_mu[i] = static_cast<T>(cfg.beta) * mu / static_cast<T>(bn);
                        grad_ls[i] = static_cast<T>(cfg.beta) *
                                     (std::exp(T(2) * ls) - T(1)) / static_cast<T>(bn);
                    }

                    for (auto& g : grads) std::fill(g.begin(), g.end(), T(0));
                    model.backward(cache, &grad_recon, &grad_mu, &grad_ls, &grads, nullptr);
                    for (std::size_t i = 0; i < grads.size(); ++i) gptrs[i] = grads[i].data();
                    opt.step(pdata, psizes, gptrs);
                }
            } catch (const NumericError& e) {
                bad = true;
                why = std::string(e.what()) + " at epoch " + std::to_string(epoch);
            }
            if (bad) {
                restore(last_good);
                out.aborted = true;
                out.abort_reason = why;
                break;
            }
        }
        if (out.aborted) break;

        EpochStats st;
        st.epoch = epoch;
        st.rec_nll = acc_rec / N;
        st.kl = acc_kl / N;
        st.beta = cfg.beta;
        st.total = st.rec_nll + cfg.beta * st.kl;
        out.history.push_back(st);
        last_good = snapshot();
        if (on_epoch) on_epoch(model, st);
    }
    return out;
}

/// train() plus artifacts: loss.csv and checkpoint.bin under `dir`. On abort
/// the checkpoint still holds the last parameters that produced finite losses.
template <typename T>
TrainResult<T> train_to_dir(const ModelConfig& mcfg, const Tensor<T>& data,
                            const TrainConfig& cfg, const std::filesystem::path& dir,
                            const NormStats& stats, const BatchHook<T>& augment = nullptr) {
    std::filesystem::create_directories(dir);
    EpochHook<T> periodic;
    if (cfg.checkpoint_every > 0)
        periodic = [&](const Vae<T>& m, const EpochStats& st) {
            if (st.epoch % cfg.checkpoint_every == 0)
                save_checkpoint(dir / ("checkpoint_epoch_" + std::to_string(st.epoch) + ".bin"),
                                m, stats);
        };
    auto result = train(mcfg, data, cfg, augment, periodic);
    write_loss_csv(dir / "loss.csv", result.history);
    save_checkpoint(dir / "checkpoint.bin", result.model, stats);
    return result;
}

}  // namespace vaeloc
