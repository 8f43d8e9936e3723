// Pixel-wise AUROC via the Mann-Whitney rank statistic with midrank ties,
// an O(P*N) pairwise oracle for cross-checking, and whole-dataset evaluation:
// every predictor is scored over the globally pooled pixels of the test set
// (one ROC curve, not a per-image average).
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaeloc/common.hpp"
#include "vaeloc/ensemble.hpp"
#include "vaeloc/model.hpp"
#include "vaeloc/predictors.hpp"
#include "vaeloc/projection.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

template <typename T>
double pixel_auroc(const std::vector<T>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size())
        throw ConfigError("pixel_auroc: " + std::to_string(scores.size()) + " scores vs " +
                          std::to_string(labels.size()) + " labels");
    if (scores.empty()) throw ConfigError("pixel_auroc: empty input");
    std::size_t P = 0;
    for (auto v : labels) P += v ? 1 : 0;
    const std::size_t N = scores.size() - P;
    if (P == 0 || N == 0)
        throw ConfigError("pixel_auroc: labels contain a single class");
    for (const T& s : scores)
        if (!std::isfinite(static_cast<double>(s)))
            throw NumericError("pixel_auroc: non-finite score");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // midranks: every member of a tie group gets the group's average rank
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && !(scores[idx[i]] < scores[idx[j + 1]])) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (labels[idx[k]]) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double U = rank_sum_pos - 0.5 * static_cast<double>(P) * static_cast<double>(P + 1);
    return U / (static_cast<double>(P) * static_cast<double>(N));
}

/// Pairwise counting, quadratic; the independent oracle for pixel_auroc.
template <typename T>
double auroc_bruteforce_oracle(const std::vector<T>& scores,
                               const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size())
        throw ConfigError("auroc oracle: length mismatch");
    std::vector<T> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i)
        (labels[i] ? pos : neg).push_back(scores[i]);
    if (pos.empty() || neg.empty())
        throw ConfigError("auroc oracle: labels contain a single class");
    double wins = 0.0, ties = 0.0;
    for (const T& p : pos)
        for (const T& n : neg) {
            if (p > n) wins += 1.0;
            else if (p == n) ties += 1.0;
        }
    return (wins + 0.5 * ties) / (static_cast<double>(pos.size()) * neg.size());
}

struct EvalConfig {
    std::vector<PredictorKind> predictors = {PredictorKind::rec_error, PredictorKind::elbo_grad,
                                             PredictorKind::kl_grad, PredictorKind::rec_grad,
                                             PredictorKind::combi};
    PredictorOptions pred_opts;
    bool with_projection = false;
    ProjectionConfig projection;
    bool with_ensemble = false;
    EnsembleConfig ensemble;
    SplitSpec split;
    std::uint64_t seed = 0;
    int workers = 1;

    std::string canonical() const {
        std::string s = "predictors=";
        for (std::size_t i = 0; i < predictors.size(); ++i)
            s += std::string(i ? "," : "") + to_string(predictors[i]);
        s += ";abs_rec_grad=" + std::to_string(pred_opts.abs_rec_grad);
        if (with_projection)
            s += ";proj(alpha=" + std::to_string(projection.alpha) +
                 ",lambda=" + std::to_string(projection.lambda) +
                 ",iters=" + std::to_string(projection.max_iters) +
                 ",mode=" + (projection.map_mode == ProjMapMode::displacement ? "disp" : "resid") +
                 ")";
        if (with_ensemble) {
            s += ";ens(features=";
            for (std::size_t i = 0; i < ensemble.features.size(); ++i)
                s += std::string(i ? "," : "") + to_string(ensemble.features[i]);
            s += ",l2=" + std::to_string(ensemble.l2) +
                 ",frac=" + std::to_string(split.labeled_fraction) +
                 ",by_image=" + std::to_string(split.stratify_by_image) +
                 ",split_seed=" + std::to_string(split.seed) + ")";
        }
        s += ";seed=" + std::to_string(seed);
        return s;
    }
};

struct EvalReport {
    std::vector<std::pair<std::string, double>> per_predictor_auroc;  // globally pooled
    std::vector<std::pair<std::string, double>> heldout_auroc;  // set when the ensemble runs
    EnsembleWeights ensemble_weights;
    bool has_ensemble = false;
    std::size_t pixel_count = 0;
    double positive_fraction = 0.0;
    std::string config_fingerprint;
    std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
void append_grid(std::vector<double>& out, const Grid<T>& g) {
    for (const T& v : g.v) out.push_back(static_cast<double>(v));
}

inline void append_mask(std::vector<std::uint8_t>& out, const MaskBatch& masks, int b) {
    const std::uint8_t* m = masks.image(b);
    for (std::size_t i = 0; i < masks.plane(); ++i) out.push_back(m[i] ? 1 : 0);
}

}  // namespace detail

/// Scores every requested predictor over the whole test set. When the
/// ensemble is enabled, a labeled split is fitted and everything is also
/// reported on the held-out pool for a like-for-like comparison.
template <typename T>
EvalReport evaluate_dataset(const Vae<T>& model, const Tensor<T>& images, const MaskBatch& masks,
                            const EvalConfig& cfg) {
    if (images.n < 1) throw ConfigError("evaluate: empty test set");
    if (masks.n != images.n || masks.h != images.h || masks.w != images.w)
        throw ConfigError("evaluate: masks missing or misshapen (" + masks.shape_str() + " vs " +
                          images.shape_str() + ")");
    if (cfg.predictors.empty()) throw ConfigError("evaluate: no predictors requested");

    // one forward per image covers every requested map
    std::vector<PredictorKind> kinds = cfg.predictors;
    if (cfg.with_ensemble)
        for (PredictorKind k : cfg.ensemble.features)
            if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
    const auto maps = score_many(model, images, kinds, cfg.pred_opts, cfg.workers);

    EvalReport report;
    report.seed = cfg.seed;
    report.config_fingerprint = hex64(fnv1a64(model.fingerprint() + "|" + cfg.canonical()));

    std::vector<std::uint8_t> all_labels;
    all_labels.reserve(images.size());
    for (int b = 0; b < images.n; ++b) detail::append_mask(all_labels, masks, b);
    report.pixel_count = all_labels.size();
    std::size_t pos = 0;
    for (auto v : all_labels) pos += v;
    report.positive_fraction = static_cast<double>(pos) / all_labels.size();
    if (pos == 0 || pos == all_labels.size())
        throw ConfigError("evaluate: masks contain a single class over the pooled test set");

    std::vector<double> scores;
    scores.reserve(all_labels.size());
    for (PredictorKind kind : cfg.predictors) {
        scores.clear();
        for (int b = 0; b < images.n; ++b)
            detail::append_grid(scores, detail::find_map(maps[static_cast<std::size_t>(b)], kind));
        report.per_predictor_auroc.emplace_back(to_string(kind), pixel_auroc(scores, all_labels));
    }

    std::vector<Grid<T>> proj_maps;
    if (cfg.with_projection) {
        const auto traces = project_batch(model, images, cfg.projection, cfg.workers);
        proj_maps.resize(traces.size());
        scores.clear();
        for (int b = 0; b < images.n; ++b) {
            Tensor<T> xi(1, 1, images.h, images.w);
            std::copy(images.image(b), images.image(b) + images.per_image(), xi.image(0));
            proj_maps[static_cast<std::size_t>(b)] =
                proj_map_from_trace(model, xi, traces[static_cast<std::size_t>(b)],
                                    cfg.projection.map_mode)
                    .scores;
            detail::append_grid(scores, proj_maps[static_cast<std::size_t>(b)]);
        }
        report.per_predictor_auroc.emplace_back("proj_rec_error",
                                                pixel_auroc(scores, all_labels));
    }

    if (cfg.with_ensemble) {
        report.has_ensemble = true;
        const std::size_t px = images.per_image();
        std::vector<int> heldout_images;

        if (cfg.split.stratify_by_image) {
            const Split split = split_indices(images.n, cfg.split);
            const auto fm =
                build_feature_matrix(maps, masks, split.labeled, cfg.ensemble.features);
            report.ensemble_weights = fit_logistic(fm, cfg.ensemble, cfg.split.seed);
            heldout_images = split.heldout;
        } else {
            // pixel-granularity split: fit on a random subset of pooled rows
            const Split split =
                split_indices(static_cast<int>(images.n * px), cfg.split);
            std::vector<int> all_images(static_cast<std::size_t>(images.n));
            std::iota(all_images.begin(), all_images.end(), 0);
            auto fm = build_feature_matrix(maps, masks, all_images, cfg.ensemble.features);
            FeatureMatrix sub;
            sub.feature_names = fm.feature_names;
            sub.X.resize(static_cast<Eigen::Index>(split.labeled.size()), fm.X.cols());
            sub.y.resize(split.labeled.size());
            for (std::size_t r = 0; r < split.labeled.size(); ++r) {
                sub.X.row(static_cast<Eigen::Index>(r)) = fm.X.row(split.labeled[r]);
                sub.y[r] = fm.y[static_cast<std::size_t>(split.labeled[r])];
            }
            report.ensemble_weights = fit_logistic(sub, cfg.ensemble, cfg.split.seed);
            heldout_images = all_images;  // heldout AUROCs below use whole images
        }

        std::vector<std::uint8_t> ho_labels;
        for (int b : heldout_images) detail::append_mask(ho_labels, masks, b);
        std::size_t ho_pos = 0;
        for (auto v : ho_labels) ho_pos += v;
        if (ho_pos == 0 || ho_pos == ho_labels.size())
            throw ConfigError("evaluate: held-out pool contains a single class");

        for (PredictorKind kind : cfg.predictors) {
            scores.clear();
            for (int b : heldout_images)
                detail::append_grid(scores,
                                    detail::find_map(maps[static_cast<std::size_t>(b)], kind));
            report.heldout_auroc.emplace_back(to_string(kind), pixel_auroc(scores, ho_labels));
        }
        if (cfg.with_projection) {
            scores.clear();
            for (int b : heldout_images)
                detail::append_grid(scores, proj_maps[static_cast<std::size_t>(b)]);
            report.heldout_auroc.emplace_back("proj_rec_error", pixel_auroc(scores, ho_labels));
        }
        scores.clear();
        for (int b : heldout_images) {
            const auto prob =
                predict_map(report.ensemble_weights, maps[static_cast<std::size_t>(b)]);
            for (double v : prob.v) scores.push_back(v);
        }
        report.heldout_auroc.emplace_back("ensemble", pixel_auroc(scores, ho_labels));
    }
    return report;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["per_predictor_auroc"] = nlohmann::json::object();
    for (const auto& [name, v] : r.per_predictor_auroc) j["per_predictor_auroc"][name] = v;
    if (r.has_ensemble) {
        j["heldout_auroc"] = nlohmann::json::object();
        for (const auto& [name, v] : r.heldout_auroc) j["heldout_auroc"][name] = v;
        j["ensemble_weights"] = to_json(r.ensemble_weights);
    }
    j["pixel_count"] = r.pixel_count;
    j["positive_fraction"] = r.positive_fraction;
    j["config_fingerprint"] = r.config_fingerprint;
    j["seed"] = r.seed;
    return j;
}

inline std::string report_markdown(const EvalReport& r) {
    std::string md = "| predictor | AUROC |\n|---|---|\n";
    char buf[64];
    for (const auto& [name, v] : r.per_predictor_auroc) {
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        md += "| " + name + " | " + buf + " |\n";
    }
    if (r.has_ensemble) {
        md += "\nheld-out pool:\n\n| predictor | AUROC |\n|---|---|\n";
        for (const auto& [name, v] : r.heldout_auroc) {
            std::snprintf(buf, sizeof(buf), "%.4f", v);
            md += "| " + name + " | " + buf + " |\n";
        }
    }
    std::snprintf(buf, sizeof(buf), "%.6f", r.positive_fraction);
    md += "\npixels: " + std::to_string(r.pixel_count) + ", positive fraction: " + buf +
          ", config: " + r.config_fingerprint + ", seed: " + std::to_string(r.seed) + "\n";
    return md;
}

}  // namespace vaeloc
