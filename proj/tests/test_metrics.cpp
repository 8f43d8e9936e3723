#include <catch2/catch_amalgamated.hpp>

#include "vaeloc/metrics.hpp"

using namespace vaeloc;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.latent_dim = 4;
    cfg.encoder_channels = {8, 16};
    return cfg;
}

}  // namespace

TEST_CASE("auroc hand cases") {
    using V = std::vector<double>;
    using L = std::vector<std::uint8_t>;

    SECTION("scores equal to labels rank perfectly") {
        REQUIRE(pixel_auroc<double>(V{0, 1, 0, 1}, L{0, 1, 0, 1}) == 1.0);
    }
    SECTION("inverted scores rank perfectly badly") {
        REQUIRE(pixel_auroc<double>(V{1, 0, 1, 0}, L{0, 1, 0, 1}) == 0.0);
    }
    SECTION("constant scores are chance level") {
        REQUIRE(pixel_auroc<double>(V{0.3, 0.3, 0.3, 0.3}, L{0, 1, 0, 1}) == 0.5);
    }
    SECTION("one crossed pair out of four costs a quarter") {
        REQUIRE(pixel_auroc<double>(V{0.1, 0.4, 0.35, 0.8}, L{0, 0, 1, 1}) == 0.75);
    }
    SECTION("ties get half credit") {
        // pairs: (0.5 vs 0.5) tie, (0.5 vs 0) win, (1 vs 0.5) win, (1 vs 0) win
        REQUIRE(pixel_auroc<double>(V{0.5, 0.5, 1.0, 0.0}, L{1, 0, 1, 0}) == 0.875);
    }
}

TEST_CASE("auroc input validation") {
    using V = std::vector<double>;
    using L = std::vector<std::uint8_t>;
    REQUIRE_THROWS_AS(pixel_auroc<double>(V{1, 2}, L{0}), ConfigError);
    REQUIRE_THROWS_AS(pixel_auroc<double>(V{}, L{}), ConfigError);
    REQUIRE_THROWS_AS(pixel_auroc<double>(V{1, 2}, L{1, 1}), ConfigError);
    REQUIRE_THROWS_AS(pixel_auroc<double>(V{1, 2}, L{0, 0}), ConfigError);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(pixel_auroc<double>(V{1, nan}, L{0, 1}), NumericError);
    REQUIRE_THROWS_AS(
        pixel_auroc<double>(V{1, std::numeric_limits<double>::infinity()}, L{0, 1}),
        NumericError);
}

TEST_CASE("rank-based auroc matches the quadratic oracle on tied data") {
    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 20 + static_cast<std::size_t>(rng.uniform_int(0, 580));
        std::vector<double> scores(n);
        std::vector<std::uint8_t> labels(n);
        bool both = false;
        // quantized scores force heavy ties
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = std::floor(rng.uniform(0.0, 8.0)) / 8.0;
            labels[i] = rng.uniform() < 0.3 ? 1 : 0;
        }
        labels[0] = 0;
        labels[1] = 1;
        both = true;
        REQUIRE(both);
        const double fast = pixel_auroc(scores, labels);
        const double slow = auroc_bruteforce_oracle(scores, labels);
        REQUIRE_THAT(fast, Catch::Matchers::WithinAbs(slow, 1e-12));
    }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(22);
    std::vector<double> scores(300);
    std::vector<std::uint8_t> labels(300);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = std::floor(rng.uniform(0.0, 64.0)) / 64.0;  // exact dyadics
        labels[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    labels[0] = 0;
    labels[1] = 1;
    const double base = pixel_auroc(scores, labels);

    std::vector<double> affine(scores);
    for (auto& v : affine) v = 2.0 * v + 1.0;  // exact on dyadic inputs
    REQUIRE(pixel_auroc(affine, labels) == base);

    std::vector<double> cubed(scores);
    for (auto& v : cubed) v = v * v * v;  // monotone on [0,1)
    REQUIRE(pixel_auroc(cubed, labels) == base);
}

TEST_CASE("negating tie-free scores flips the auroc") {
    Rng rng(23);
    std::vector<double> scores(257);
    std::vector<std::uint8_t> labels(257);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.normal();  // ties have probability zero
        labels[i] = rng.uniform() < 0.5 ? 1 : 0;
    }
    labels[0] = 0;
    labels[1] = 1;
    std::vector<double> neg(scores);
    for (auto& v : neg) v = -v;
    REQUIRE_THAT(pixel_auroc(neg, labels),
                 Catch::Matchers::WithinAbs(1.0 - pixel_auroc(scores, labels), 1e-12));
}

TEST_CASE("dataset evaluation reports every requested predictor once") {
    Vae<double> model(tiny_config(), 24);
    Tensor<double> images(4, 1, 8, 8);
    MaskBatch masks(4, 1, 8, 8);
    Rng rng(25);
    for (auto& v : images.v) v = rng.normal();
    for (int b = 0; b < 4; ++b)
        for (int i = 0; i < 64; ++i) masks.image(b)[i] = rng.uniform() < 0.2 ? 1 : 0;
    masks.image(0)[0] = 1;
    masks.image(1)[0] = 0;

    EvalConfig cfg;
    const auto report = evaluate_dataset(model, images, masks, cfg);
    REQUIRE(report.per_predictor_auroc.size() == 5);
    const std::vector<std::string> expect = {"rec_error", "elbo_grad", "kl_grad", "rec_grad",
                                             "combi"};
    for (std::size_t i = 0; i < expect.size(); ++i) {
        REQUIRE(report.per_predictor_auroc[i].first == expect[i]);
        REQUIRE(report.per_predictor_auroc[i].second >= 0.0);
        REQUIRE(report.per_predictor_auroc[i].second <= 1.0);
    }
    REQUIRE(report.pixel_count == 4 * 64);
    std::size_t pos = 0;
    for (int b = 0; b < 4; ++b)
        for (int i = 0; i < 64; ++i) pos += masks.image(b)[i];
    REQUIRE(report.positive_fraction == static_cast<double>(pos) / (4 * 64));
    REQUIRE(!report.has_ensemble);

    SECTION("a rerun is bit-identical") {
        const auto again = evaluate_dataset(model, images, masks, cfg);
        REQUIRE(to_json(again).dump() == to_json(report).dump());
    }
    SECTION("a subset of predictors narrows the report") {
        EvalConfig two;
        two.predictors = {PredictorKind::kl_grad, PredictorKind::rec_error};
        const auto r = evaluate_dataset(model, images, masks, two);
        REQUIRE(r.per_predictor_auroc.size() == 2);
        REQUIRE(r.per_predictor_auroc[0].first == "kl_grad");
        REQUIRE(r.per_predictor_auroc[1].first == "rec_error");
        REQUIRE(r.per_predictor_auroc[1].second ==
                report.per_predictor_auroc[0].second);
        REQUIRE(r.config_fingerprint != report.config_fingerprint);
    }
    SECTION("projection adds its own row") {
        EvalConfig pcfg;
        pcfg.predictors = {PredictorKind::rec_error};
        pcfg.with_projection = true;
        pcfg.projection.max_iters = 4;
        const auto r = evaluate_dataset(model, images, masks, pcfg);
        REQUIRE(r.per_predictor_auroc.size() == 2);
        REQUIRE(r.per_predictor_auroc[1].first == "proj_rec_error");
    }
    SECTION("the ensemble adds a held-out comparison table") {
        EvalConfig ecfg;
        ecfg.predictors = {PredictorKind::rec_error, PredictorKind::kl_grad};
        ecfg.with_ensemble = true;
        ecfg.ensemble.features = {PredictorKind::rec_error, PredictorKind::kl_grad};
        ecfg.split.labeled_fraction = 0.5;
        const auto r = evaluate_dataset(model, images, masks, ecfg);
        REQUIRE(r.has_ensemble);
        REQUIRE(r.heldout_auroc.size() == 3);
        REQUIRE(r.heldout_auroc.back().first == "ensemble");
        for (const auto& [name, v] : r.heldout_auroc) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        REQUIRE(r.ensemble_weights.features ==
                std::vector<std::string>{"rec_error", "kl_grad"});
        const auto markdown = report_markdown(r);
        REQUIRE(markdown.find("| predictor | AUROC |") != std::string::npos);
        REQUIRE(markdown.find("held-out pool") != std::string::npos);
        REQUIRE(markdown.find("ensemble") != std::string::npos);
        const auto j = to_json(r);
        REQUIRE(j.contains("heldout_auroc"));
        REQUIRE(j["heldout_auroc"].contains("ensemble"));
        REQUIRE(j["per_predictor_auroc"].contains("rec_error"));
    }
    SECTION("pixel-granularity split also fits and reports") {
        EvalConfig ecfg;
        ecfg.predictors = {PredictorKind::rec_error};
        ecfg.with_ensemble = true;
        ecfg.ensemble.features = {PredictorKind::rec_error};
        ecfg.split.stratify_by_image = false;
        ecfg.split.labeled_fraction = 0.25;
        const auto r = evaluate_dataset(model, images, masks, ecfg);
        REQUIRE(r.has_ensemble);
        REQUIRE(r.heldout_auroc.back().first == "ensemble");
    }
}

TEST_CASE("dataset evaluation rejects malformed inputs") {
    Vae<double> model(tiny_config(), 26);
    Tensor<double> images(2, 1, 8, 8);
    MaskBatch masks(2, 1, 8, 8);
    Rng rng(27);
    for (auto& v : images.v) v = rng.normal();
    masks.image(0)[3] = 1;

    REQUIRE_NOTHROW(evaluate_dataset(model, images, masks, EvalConfig{}));
    REQUIRE_THROWS_AS(evaluate_dataset(model, Tensor<double>(0, 1, 8, 8), MaskBatch(0, 1, 8, 8),
                                       EvalConfig{}),
                      ConfigError);
    REQUIRE_THROWS_AS(evaluate_dataset(model, images, MaskBatch(1, 1, 8, 8), EvalConfig{}),
                      ConfigError);
    EvalConfig none;
    none.predictors = {};
    REQUIRE_THROWS_AS(evaluate_dataset(model, images, masks, none), ConfigError);
    MaskBatch empty_masks(2, 1, 8, 8);
    REQUIRE_THROWS_AS(evaluate_dataset(model, images, empty_masks, EvalConfig{}), ConfigError);
}
