// Logistic-regression combiner over predictor maps. A small labeled split
// (whole images by default, to avoid pixel leakage) provides the training
// pixels; the fitted weights then score any image. Optimization always runs
// on internally standardized features for conditioning; unless standardized
// output is requested the weights are mapped back to raw feature scale, so
// the L2 penalty is defined on the standardized parameterization.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaeloc/common.hpp"
#include "vaeloc/layers.hpp"
#include "vaeloc/predictors.hpp"
#include "vaeloc/rng.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

struct SplitSpec {
    double labeled_fraction = 0.10;
    std::uint64_t seed = 0;
    bool stratify_by_image = true;  // false: split at pixel granularity

    void validate() const {
        if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0))
            throw ConfigError("labeled_fraction must lie in (0,1)");
    }
};

struct Split {
    std::vector<int> labeled, heldout;
};

/// Deterministic shuffle-split of n items (images or pixels).
inline Split split_indices(int n, const SplitSpec& spec) {
    spec.validate();
    if (n < 2) throw ConfigError("split needs at least 2 items");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(spec.seed, 0x51ABull));
    rng.shuffle(order);
    int k = static_cast<int>(std::lround(spec.labeled_fraction * n));
    k = std::max(1, std::min(k, n - 1));
    Split s;
    s.labeled.assign(order.begin(), order.begin() + k);
    s.heldout.assign(order.begin() + k, order.end());
    return s;
}

struct EnsembleConfig {
    // elbo_grad stays out: it is the sum of the kl and rec gradients
    std::vector<PredictorKind> features = {PredictorKind::rec_error, PredictorKind::kl_grad,
                                           PredictorKind::rec_grad};
    double l2 = 1e-4;
    long max_iters = 10000;
    double tol = 1e-6;          // gradient-norm stop
    bool standardize = false;   // report standardized weights + stats

    void validate() const {
        if (features.empty()) throw ConfigError("ensemble needs at least one feature");
        if (!(l2 >= 0.0)) throw ConfigError("l2 must be >= 0");
        if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
        if (!(tol > 0.0)) throw ConfigError("tol must be > 0");
    }
};

struct EnsembleWeights {
    std::vector<std::string> features;
    std::vector<double> weights;
    double bias = 0.0;
    bool standardized = false;
    std::vector<double> feature_mean, feature_std;  // populated when standardized
    std::uint64_t seed = 0;
    double final_grad_norm = 0.0;  // of the standardized problem
    long iters = 0;
};

struct FeatureMatrix {
    MatRM<double> X;  // pixels x features
    std::vector<std::uint8_t> y;
    std::vector<std::string> feature_names;
};

namespace detail {

template <typename T>
const Grid<T>& find_map(const std::vector<AnomalyMap<T>>& maps, PredictorKind kind) {
    const Grid<T>* found = nullptr;
    for (const auto& m : maps)
        if (m.kind == kind) {
            if (found)
                throw ConfigError(std::string("duplicate map for feature ") + to_string(kind));
            found = &m.scores;
        }
    if (!found) throw ConfigError(std::string("missing map for feature ") + to_string(kind));
    return *found;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace detail

/// One row per pixel of each selected image, one column per feature; labels
/// come from the matching mask pixels.
template <typename T>
FeatureMatrix build_feature_matrix(const std::vector<std::vector<AnomalyMap<T>>>& maps_per_image,
                                   const MaskBatch& masks, const std::vector<int>& image_ids,
                                   const std::vector<PredictorKind>& features) {
    if (maps_per_image.size() != static_cast<std::size_t>(masks.n))
        throw ConfigError("feature matrix: " + std::to_string(maps_per_image.size()) +
                          " map sets vs " + std::to_string(masks.n) + " masks");
    if (image_ids.empty()) throw ConfigError("feature matrix: no images selected");
    if (features.empty()) throw ConfigError("feature matrix: no features selected");

    const std::size_t px = masks.plane();
    FeatureMatrix fm;
    for (PredictorKind k : features) fm.feature_names.push_back(to_string(k));
    fm.X.resize(static_cast<Eigen::Index>(image_ids.size() * px),
                static_cast<Eigen::Index>(features.size()));
    fm.y.resize(image_ids.size() * px);

    std::size_t row0 = 0;
    for (int id : image_ids) {
        if (id < 0 || id >= masks.n) throw ConfigError("feature matrix: image id out of range");
        for (std::size_t j = 0; j < features.size(); ++j) {
            const auto& g = detail::find_map(maps_per_image[static_cast<std::size_t>(id)],
                                             features[j]);
            if (g.size() != px)
                throw ConfigError("feature matrix: map size does not match mask size");
            for (std::size_t i = 0; i < px; ++i)
                fm.X(static_cast<Eigen::Index>(row0 + i), static_cast<Eigen::Index>(j)) =
                    static_cast<double>(g.v[i]);
        }
        const std::uint8_t* m = masks.image(id);
        for (std::size_t i = 0; i < px; ++i) fm.y[row0 + i] = m[i] ? 1 : 0;
        row0 += px;
    }
    return fm;
}

/// Gradient descent with Armijo backtracking on mean BCE + 0.5*l2*|w|^2
/// (bias unpenalized), over standardized features.
inline EnsembleWeights fit_logistic(const FeatureMatrix& fm, const EnsembleConfig& cfg,
                                    std::uint64_t seed = 0) {
    cfg.validate();
    const Eigen::Index n = fm.X.rows(), d = fm.X.cols();
    if (n < 2) throw ConfigError("fit_logistic: need at least 2 pixels");
    std::size_t pos = 0;
    for (auto v : fm.y) pos += v;
    if (pos == 0 || pos == static_cast<std::size_t>(n))
        throw ConfigError("fit_logistic: labels contain a single class");

    // standardize for optimization; zero-variance columns pass through
    Eigen::VectorXd mean(d), stdev(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        mean[j] = fm.X.col(j).mean();
        const double var = (fm.X.col(j).array() - mean[j]).square().mean();
        stdev[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    MatRM<double> Xs(n, d);
    for (Eigen::Index j = 0; j < d; ++j)
        Xs.col(j) = (fm.X.col(j).array() - mean[j]) / stdev[j];
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y[i] = fm.y[static_cast<std::size_t>(i)];

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    double b = 0.0;

    auto objective = [&](const Eigen::VectorXd& wv, double bv) {
        Eigen::VectorXd z = Xs * wv;
        z.array() += bv;
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            s += detail::softplus(z[i]) - y[i] * z[i];
        return s / static_cast<double>(n) + 0.5 * cfg.l2 * wv.squaredNorm();
    };

    double obj = objective(w, b);
    double step = 1.0;
    long it = 0;
    double gnorm = 0.0;
    for (; it < cfg.max_iters; ++it) {
        Eigen::VectorXd z = Xs * w;
        z.array() += b;
        Eigen::VectorXd r(n);
        for (Eigen::Index i = 0; i < n; ++i) r[i] = detail::sigmoid(z[i]) - y[i];
        Eigen::VectorXd gw = Xs.transpose() * r / static_cast<double>(n) + cfg.l2 * w;
        const double gb = r.mean();
        gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
        if (gnorm < cfg.tol) break;

        step *= 2.0;  // let the accepted step grow back after shrinks
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            const Eigen::VectorXd wn = w - step * gw;
            const double bn = b - step * gb;
            const double on = objective(wn, bn);
            if (on <= obj - 1e-4 * step * gnorm * gnorm) {
                w = wn;
                b = bn;
                obj = on;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // step underflow: numerically converged
    }

    EnsembleWeights out;
    out.features = fm.feature_names;
    out.seed = seed;
    out.final_grad_norm = gnorm;
    out.iters = it;
    out.standardized = cfg.standardize;
    if (cfg.standardize) {
        out.weights.assign(w.data(), w.data() + d);
        out.bias = b;
        out.feature_mean.assign(mean.data(), mean.data() + d);
        out.feature_std.assign(stdev.data(), stdev.data() + d);
    } else {
        // fold the affine standardization into the weights
        out.weights.resize(static_cast<std::size_t>(d));
        double shift = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            out.weights[static_cast<std::size_t>(j)] = w[j] / stdev[j];
            shift += w[j] * mean[j] / stdev[j];
        }
        out.bias = b - shift;
    }
    for (double v : out.weights)
        if (!std::isfinite(v)) throw NumericError("fit_logistic: non-finite weight");
    if (!std::isfinite(out.bias)) throw NumericError("fit_logistic: non-finite bias");
    return out;
}

/// Per-pixel probability map for one image's predictor maps.
template <typename T>
Grid<double> predict_map(const EnsembleWeights& weights,
                         const std::vector<AnomalyMap<T>>& maps) {
    if (weights.features.empty() || weights.features.size() != weights.weights.size())
        throw ConfigError("predict_map: malformed weights");
    std::vector<const Grid<T>*> cols;
    for (const auto& name : weights.features)
        cols.push_back(&detail::find_map(maps, predictor_from_string(name)));
    const std::size_t px = cols[0]->size();
    for (const auto* g : cols)
        if (g->size() != px) throw ConfigError("predict_map: feature maps disagree on shape");

    Grid<double> out(cols[0]->h, cols[0]->w);
    for (std::size_t i = 0; i < px; ++i) {
        double z = weights.bias;
        for (std::size_t j = 0; j < cols.size(); ++j) {
            double f = static_cast<double>(cols[j]->v[i]);
            if (weights.standardized)
                f = (f - weights.feature_mean[j]) / weights.feature_std[j];
            z += weights.weights[j] * f;
        }
        out.v[i] = detail::sigmoid(z);
    }
    return out;
}

inline nlohmann::json to_json(const EnsembleWeights& w) {
    nlohmann::json j;
    j["features"] = w.features;
    j["weights"] = w.weights;
    j["bias"] = w.bias;
    j["standardized"] = w.standardized;
    if (w.standardized) {
        j["feature_stats"] = nlohmann::json::array();
        for (std::size_t i = 0; i < w.feature_mean.size(); ++i)
            j["feature_stats"].push_back({{"mean", w.feature_mean[i]}, {"std", w.feature_std[i]}});
    }
    j["seed"] = w.seed;
    j["final_grad_norm"] = w.final_grad_norm;
    j["iters"] = w.iters;
    return j;
}

inline EnsembleWeights ensemble_weights_from_json(const nlohmann::json& j) {
    EnsembleWeights w;
    try {
        w.features = j.at("features").get<std::vector<std::string>>();
        w.weights = j.at("weights").get<std::vector<double>>();
        w.bias = j.at("bias").get<double>();
        w.standardized = j.at("standardized").get<bool>();
        if (w.standardized)
            for (const auto& fs : j.at("feature_stats")) {
                w.feature_mean.push_back(fs.at("mean").get<double>());
                w.feature_std.push_back(fs.at("std").get<double>());
            }
        w.seed = j.value("seed", 0ull);
        w.final_grad_norm = j.value("final_grad_norm", 0.0);
        w.iters = j.value("iters", 0l);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("ensemble weights malformed: " + std::string(e.what()));
    }
    if (w.features.size() != w.weights.size())
        throw FormatError("ensemble weights: feature/weight count mismatch");
    return w;
}

inline void save_ensemble_weights(const std::filesystem::path& path, const EnsembleWeights& w) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open weights file for writing: " + path.string());
    f << to_json(w).dump(2) << "\n";
    if (!f) throw IoError("short write on weights file: " + path.string());
}

inline EnsembleWeights load_ensemble_weights(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open weights file: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("weights file is not valid JSON: " + std::string(e.what()));
    }
    return ensemble_weights_from_json(j);
}

}  // namespace vaeloc
