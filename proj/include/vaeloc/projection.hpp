// Iterative projection of an input image onto the learned normal manifold by
// Adam descent on E(x_t) = L_r(x_t) + lambda*||x_t - x_0||_1, plus the anomaly
// map built from the best-energy iterate. The L1 subgradient at zero is 0, so
// untouched pixels contribute nothing to the proximity pull.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vaeloc/common.hpp"
#include "vaeloc/losses.hpp"
#include "vaeloc/model.hpp"
#include "vaeloc/predictors.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

enum class ProjMapMode { displacement, residual };

struct ProjectionConfig {
    double alpha = 0.03;          // Adam learning rate on the input
    double lambda = 1.0;          // L1 proximity weight
    int max_iters = 100;
    int early_stop_patience = 20; // iterations without a new best energy
    std::uint64_t seed = 0;
    bool record_iterates = false;
    ProjMapMode map_mode = ProjMapMode::displacement;

    void validate() const {
        if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
        if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
        if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
        if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
    }
};

template <typename T>
struct ProjectionTrace {
    std::vector<double> energies;   // E(x_0) .. E(x_t_last)
    std::vector<double> rec_terms;  // L_r component per iterate
    std::vector<double> l1_terms;   // lambda * L1 component per iterate
    std::vector<Tensor<T>> iterates;  // populated when record_iterates
    Tensor<T> best_iterate;
    double best_energy = 0.0;
    int best_index = 0;
    bool warning = false;  // non-finite energy cut the run short
    std::string warning_text;
};

namespace detail {

template <typename T>
double l1_distance(const Tensor<T>& a, const Tensor<T>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
    return s;
}

}  // namespace detail

/// E(x_t) for a single image (batch dimension must be 1).
template <typename T>
double energy(const Vae<T>& model, const Tensor<T>& x_t, const Tensor<T>& x_0, double lambda) {
    if (!x_t.same_shape(x_0))
        throw ConfigError("energy: iterate shape " + x_t.shape_str() + " vs origin " +
                          x_0.shape_str());
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    const auto out = model.forward(x_t, ForwardMode::deterministic);
    const double rec = reconstruction_nll(x_t, out.reconstruction).first;
    const double e = rec + lambda * detail::l1_distance(x_t, x_0);
    if (!std::isfinite(e)) throw NumericError("energy: non-finite value");
    return e;
}

/// Adam descent on the input with best-iterate tracking; the fresh optimizer
/// state makes each call independent of any other image.
/// dE/dx at x_t; the L1 subgradient is defined as 0 where x_t == x_0.
template <typename T>
Tensor<T> energy_gradient(const Vae<T>& model, const Tensor<T>& x_t, const Tensor<T>& x_0,
                          double lambda) {
    if (!x_t.same_shape(x_0))
        throw ConfigError("energy_gradient: iterate shape " + x_t.shape_str() +
                          " does not match origin " + x_0.shape_str());
    if (lambda < 0) throw ConfigError("energy_gradient: lambda must be >= 0");
    Tensor<T> g = model.input_gradient(LossSelector::rec, x_t);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = x_t.v[i] - x_0.v[i];
        if (d > T(0)) g.v[i] += static_cast<T>(lambda);
        else if (d < T(0)) g.v[i] -= static_cast<T>(lambda);
    }
    return g;
}

template <typename T>
ProjectionTrace<T> project(const Vae<T>& model, const Tensor<T>& x_0,
                           const ProjectionConfig& cfg) {
    cfg.validate();
    if (x_0.n != 1 || x_0.c != 1) throw ConfigError("project expects a single-image batch");

    ProjectionTrace<T> trace;
    Tensor<T> x = x_0;

    Adam<T> opt;
    opt.lr = cfg.alpha;
    std::vector<T*> pdata = {x.v.data()};
    std::vector<std::size_t> psizes = {x.v.size()};

    trace.best_iterate = x_0;
    trace.best_energy = std::numeric_limits<double>::infinity();
    trace.best_index = 0;

    for (int t = 0; t <= cfg.max_iters; ++t) {
        bool bad = false;
        double rec = 0.0;
        Tensor<T> grad;
        try {
            const auto cache = model.forward_cached(x, nullptr);
            rec = reconstruction_nll(x, cache.recon()).first;
            if (!std::isfinite(rec)) throw NumericError("non-finite reconstruction term");
            if (t < cfg.max_iters)
                grad = model.input_gradient_cached(LossSelector::rec, cache);
        } catch (const NumericError& e) {
            bad = true;
            trace.warning = true;
            trace.warning_text = std::string(e.what()) + " at iteration " + std::to_string(t);
        }
        if (bad) break;

        const double l1 = cfg.lambda * detail::l1_distance(x, x_0);
        const double e = rec + l1;
        trace.energies.push_back(e);
        trace.rec_terms.push_back(rec);
        trace.l1_terms.push_back(l1);
        if (cfg.record_iterates) trace.iterates.push_back(x);
        if (e < trace.best_energy) {
            trace.best_energy = e;
            trace.best_iterate = x;
            trace.best_index = t;
        }

        if (t == cfg.max_iters) break;
        if (t - trace.best_index >= cfg.early_stop_patience) break;

        // dE/dx: reconstruction-term gradient plus the L1 subgradient
        // (defined as 0 where x == x_0)
        for (std::size_t i = 0; i < x.size(); ++i) {
            const T d = x.v[i] - x_0.v[i];
            if (d > T(0)) grad.v[i] += static_cast<T>(cfg.lambda);
            else if (d < T(0)) grad.v[i] -= static_cast<T>(cfg.lambda);
        }
        std::vector<const T*> gptrs = {grad.v.data()};
        opt.step(pdata, psizes, gptrs);
    }
    return trace;
}

/// Per-image traces; Adam state and early stopping are independent per image.
template <typename T>
std::vector<ProjectionTrace<T>> project_batch(const Vae<T>& model, const Tensor<T>& x,
                                              const ProjectionConfig& cfg, int workers = 1) {
    std::vector<ProjectionTrace<T>> out(static_cast<std::size_t>(x.n));
    parallel_chunks(static_cast<std::size_t>(x.n), 1, workers,
                    [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t b = begin; b < end; ++b) {
                            Tensor<T> xi(1, 1, x.h, x.w);
                            std::copy(x.image(static_cast<int>(b)),
                                      x.image(static_cast<int>(b)) + x.per_image(), xi.image(0));
                            out[b] = project(model, xi, cfg);
                        }
                    });
    return out;
}

/// Anomaly map from a finished projection.
template <typename T>
AnomalyMap<T> proj_map_from_trace(const Vae<T>& model, const Tensor<T>& x_0,
                                  const ProjectionTrace<T>& trace, ProjMapMode mode) {
    AnomalyMap<T> m;
    m.kind = PredictorKind::rec_error;  // same family: squared per-pixel error
    m.model_fingerprint = model.fingerprint();
    m.scores = Grid<T>(x_0.h, x_0.w);
    if (mode == ProjMapMode::displacement) {
        for (std::size_t i = 0; i < x_0.size(); ++i) {
            const T d = x_0.v[i] - trace.best_iterate.v[i];
            m.scores.v[i] = d * d;
        }
    } else {
        const auto out = model.forward(trace.best_iterate, ForwardMode::deterministic);
        auto [scalar, map] = reconstruction_nll(trace.best_iterate, out.reconstruction);
        m.scores = grid_from_image(map, 0);
    }
    return m;
}

template <typename T>
AnomalyMap<T> proj_rec_error_map(const Vae<T>& model, const Tensor<T>& x_0,
                                 const ProjectionConfig& cfg) {
    const auto trace = project(model, x_0, cfg);
    return proj_map_from_trace(model, x_0, trace, cfg.map_mode);
}

template <typename T>
void write_projection_csv(const std::filesystem::path& path, const ProjectionTrace<T>& trace) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open projection trace for writing: " + path.string());
    f << "iteration,energy,L1_term,rec_term\n";
    char buf[128];
    for (std::size_t t = 0; t < trace.energies.size(); ++t) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", t, trace.energies[t],
                      trace.l1_terms[t], trace.rec_terms[t]);
        f << buf;
    }
    if (!f) throw IoError("short write on projection trace: " + path.string());
}

}  // namespace vaeloc
