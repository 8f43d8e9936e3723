// Acceptance gate: twelve numbered checks, one PASS/FAIL line each, exit 0
// only when all pass. Checks 1-8 are fast properties with independent
// oracles (Monte Carlo, finite differences, brute-force ranking). Checks
// 9-12 train a 64x64 model on 2,000 synthetic normals and verify the
// localization quality and trend behavior on 200 injected-anomaly images.
#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <string>
#include <vector>

#include "vaeloc/data.hpp"
#include "vaeloc/metrics.hpp"
#include "vaeloc/projection.hpp"
#include "vaeloc/trainer.hpp"

using namespace vaeloc;

namespace {

struct Gate {
    int failures = 0;
    void check(int num, const char* what, bool ok, const std::string& detail) {
        std::printf("%s %2d: %s (%s)\n", ok ? "PASS" : "FAIL", num, what, detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
};

std::string fmt(const char* f, ...) {
    char buf[256];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof(buf), f, args);
    va_end(args);
    return buf;
}

Tensor<double> random_image(int size, Rng& rng) {
    Tensor<double> x(1, 1, size, size);
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
    return x;
}

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.image_size = 8;
    mc.latent_dim = 4;
    mc.encoder_channels = {8, 16};
    return mc;
}

double loss_value(const Vae<double>& model, LossSelector sel, const Tensor<double>& x) {
    const auto out = model.forward(x, ForwardMode::deterministic);
    const double rec = reconstruction_nll(x, out.reconstruction).first;
    const double kl = kl_divergence(out.latent).scalar;
    switch (sel) {
        case LossSelector::rec: return rec;
        case LossSelector::kl: return kl;
        default: return rec + kl;
    }
}

// ------------------------------------------------------------------ 1

void check_kl_monte_carlo(Gate& gate) {
    Rng rng(101);
    const int dim = 6, draws = 1'000'000;
    double worst = 0.0, smallest_kl = 1e300;
    for (int trial = 0; trial < 20; ++trial) {
        GaussianLatent<double> lat(1, dim);
        double closed = 0.0;
        do {
            for (int d = 0; d < dim; ++d) {
                lat.mu[d] = rng.uniform(-2.0, 2.0);
                lat.log_sigma[d] = rng.uniform(-1.2, 0.8);
            }
            closed = kl_divergence(lat).scalar;
        } while (closed <= 0.1);
        smallest_kl = std::min(smallest_kl, closed);

        double acc = 0.0;
        for (int i = 0; i < draws; ++i) {
            double s = 0.0;
            for (int d = 0; d < dim; ++d) {
                const double eps = rng.normal();
                const double z = lat.mu[d] + std::exp(lat.log_sigma[d]) * eps;
                s += -lat.log_sigma[d] - 0.5 * eps * eps + 0.5 * z * z;
            }
            acc += s;
        }
        const double mc = acc / draws;
        worst = std::max(worst, std::abs(mc - closed) / closed);
    }
    gate.check(1, "closed-form KL matches 1e6-draw Monte Carlo on 20 latents", worst < 0.01,
               fmt("max rel err %.2e, smallest KL %.3f", worst, smallest_kl));
}

// ------------------------------------------------------------------ 2

void check_input_gradient_fd(Gate& gate) {
    Vae<double> model(tiny_config(), 3);
    Rng rng(7);
    Tensor<double> x = random_image(8, rng);
    const double h = 1e-4;
    bool ok = true;
    double worst_rel = 0.0;
    std::string where;
    for (LossSelector sel : {LossSelector::elbo, LossSelector::kl, LossSelector::rec}) {
        const Tensor<double> g = model.input_gradient(sel, x);
        for (std::size_t i = 0; i < x.size(); ++i) {
            Tensor<double> xp = x, xm = x;
            xp.v[i] += h;
            xm.v[i] -= h;
            const double fd = (loss_value(model, sel, xp) - loss_value(model, sel, xm)) / (2 * h);
            const double diff = std::abs(g.v[i] - fd);
            const double rel = diff / std::max(std::abs(fd), 1e-300);
            if (rel > worst_rel && diff > 1e-8) worst_rel = rel;
            if (rel > 1e-3 && diff > 1e-8) {
                ok = false;
                where = fmt("selector %d pixel %zu rel %.2e abs %.2e", static_cast<int>(sel), i,
                            rel, diff);
            }
        }
    }
    gate.check(2, "input gradients match central differences on all 64 pixels x 3 losses", ok,
               ok ? fmt("max rel err %.2e", worst_rel) : where);
}

// ------------------------------------------------------------------ 3

void check_gradient_additivity(Gate& gate) {
    Vae<double> model(tiny_config(), 5);
    Rng rng(11);
    Tensor<double> x = random_image(8, rng);
    const Tensor<double> ge = model.input_gradient(LossSelector::elbo, x);
    const Tensor<double> gk = model.input_gradient(LossSelector::kl, x);
    const Tensor<double> gr = model.input_gradient(LossSelector::rec, x);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double sum = gk.v[i] + gr.v[i];
        const double diff = std::abs(ge.v[i] - sum);
        const double rel = diff / std::max({std::abs(ge.v[i]), std::abs(sum), 1e-12});
        worst = std::max(worst, rel);
    }
    gate.check(3, "full-loss gradient equals KL gradient plus reconstruction gradient",
               worst <= 1e-5, fmt("max elementwise rel diff %.2e", worst));
}

// ------------------------------------------------------------------ 4

void check_beta_affine(Gate& gate) {
    Vae<double> model(tiny_config(), 9);
    Rng rng(13);
    const Tensor<double> x = random_image(8, rng);
    const auto out = model.forward(x, ForwardMode::deterministic);
    const double rec = reconstruction_nll(x, out.reconstruction).first;
    const double kl = kl_divergence(out.latent).scalar;

    const auto at1 = beta_elbo_loss(x, out, 1.0);
    bool ok = at1.total == rec + kl && at1.rec_nll == rec && at1.kl == kl;
    for (double beta : {0.1, 0.5, 2.0, 10.0}) {
        const auto b = beta_elbo_loss(x, out, beta);
        ok = ok && b.rec_nll == rec && b.kl == kl && b.total == rec + beta * kl;
    }
    gate.check(4, "beta=1 reproduces the plain loss bit for bit; total is affine in beta", ok,
               fmt("rec %.6f kl %.6f", rec, kl));
}

// ------------------------------------------------------------------ 5

double brute_force_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
    double wins = 0.0, ties = 0.0;
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!y[i]) continue;
        ++pos;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j]) continue;
            if (s[i] > s[j]) wins += 1.0;
            else if (s[i] == s[j]) ties += 1.0;
        }
    }
    neg = s.size() - pos;
    return (wins + 0.5 * ties) / (static_cast<double>(pos) * static_cast<double>(neg));
}

void check_auroc_oracle(Gate& gate) {
    const double exact =
        pixel_auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<std::uint8_t>{0, 0, 1, 1});
    bool ok = exact == 0.75;
    std::string detail = fmt("fixed case %.4f", exact);

    Rng rng(17);
    double worst = 0.0;
    for (int trial = 0; trial < 200 && ok; ++trial) {
        const int n = 10 + static_cast<int>(rng.uniform() * 1990);
        std::vector<double> s(n);
        std::vector<std::uint8_t> y(n);
        bool has0 = false, has1 = false;
        while (!(has0 && has1)) {
            has0 = has1 = false;
            for (int i = 0; i < n; ++i) {
                s[i] = std::floor(rng.uniform() * 8.0) / 8.0;  // heavy ties
                y[i] = rng.uniform() < 0.3 ? 1 : 0;
                (y[i] ? has1 : has0) = true;
            }
        }
        const double fast = pixel_auroc(s, y);
        const double brute = brute_force_auroc(s, y);
        worst = std::max(worst, std::abs(fast - brute));
        if (worst > 1e-12) {
            ok = false;
            detail = fmt("trial %d n %d diff %.2e", trial, n, worst);
        }
    }
    if (ok) detail += fmt(", max |rank - brute| %.2e over 200 tied instances", worst);
    gate.check(5, "rank-based AUROC matches the brute-force pair count", ok, detail);
}

// ------------------------------------------------------------------ 6

void check_projection_properties(Gate& gate) {
    Rng rng(23);
    bool ok = true;
    std::string detail;

    {  // zero iterations leave the input untouched
        Vae<double> model(tiny_config(), 31);
        const Tensor<double> x = random_image(8, rng);
        ProjectionConfig pc;
        pc.max_iters = 0;
        const auto tr = project(model, x, pc);
        if (tr.best_iterate.v != x.v || tr.energies.size() != 1) {
            ok = false;
            detail = "zero-iteration projection moved the input";
        }
    }

    double worst_gap = 0.0;
    for (int trial = 0; trial < 20 && ok; ++trial) {  // best energy never above the start
        Vae<double> model(tiny_config(), 100 + trial);
        const Tensor<double> x = random_image(8, rng);
        ProjectionConfig pc;
        pc.max_iters = 30;
        pc.lambda = (trial % 3 == 0) ? 0.0 : (trial % 3 == 1 ? 0.5 : 5.0);
        const auto tr = project(model, x, pc);
        worst_gap = std::max(worst_gap, tr.best_energy - tr.energies.front());
        if (tr.best_energy > tr.energies.front()) {
            ok = false;
            detail = fmt("trial %d best %.6f above start %.6f", trial, tr.best_energy,
                         tr.energies.front());
        }
    }

    double linf = -1.0;
    if (ok) {  // huge lambda pins the iterate to the input on a trained model
        SyntheticConfig sc;
        sc.n_images = 16;
        sc.image_size = 8;
        sc.texture = TextureKind::sinusoidal;
        sc.seed = 41;
        auto imgs = generate_synthetic_normal<double>(sc);
        const auto stats = compute_stats(imgs);
        apply_stats(imgs, stats);
        TrainConfig tc;
        tc.epochs = 10;
        tc.batch_size = 8;
        tc.lr = 3e-4;
        tc.seed = 43;
        auto trained = train(tiny_config(), imgs, tc);

        Tensor<double> x0(1, 1, 8, 8);
        std::copy(imgs.image(0), imgs.image(0) + imgs.per_image(), x0.image(0));
        ProjectionConfig pc;
        pc.lambda = 1e6;
        pc.max_iters = 50;
        pc.early_stop_patience = 60;  // ensure all 50 steps run
        const auto tr = project(trained.model, x0, pc);
        linf = 0.0;
        for (std::size_t i = 0; i < x0.size(); ++i)
            linf = std::max(linf, std::abs(tr.best_iterate.v[i] - x0.v[i]));
        if (linf >= 1e-3) {
            ok = false;
            detail = fmt("lambda=1e6 displacement Linf %.2e", linf);
        }
    }
    gate.check(6, "projection: 0 iters is identity, best energy <= start, lambda=1e6 pins", ok,
               ok ? fmt("max best-start gap %.1e, pinned Linf %.1e", worst_gap, linf) : detail);
}

// ------------------------------------------------------------------ 7

void check_combi_and_nonnegativity(Gate& gate) {
    Vae<double> model(tiny_config(), 53);
    Rng rng(59);
    Tensor<double> x(3, 1, 8, 8);
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
    const auto maps = score_many(model, x,
                                 {PredictorKind::rec_error, PredictorKind::elbo_grad,
                                  PredictorKind::kl_grad, PredictorKind::rec_grad,
                                  PredictorKind::combi},
                                 PredictorOptions{}, 1);
    bool ok = true;
    std::string detail = "all maps nonnegative, combi exact";
    for (const auto& per_image : maps) {
        const auto& rec = per_image[0].scores;
        const auto& kl = per_image[2].scores;
        const auto& combi = per_image[4].scores;
        for (std::size_t i = 0; i < rec.size() && ok; ++i) {
            for (const auto& m : per_image)
                if (m.scores.v[i] < 0.0) {
                    ok = false;
                    detail = fmt("negative score in %s", to_string(m.kind));
                }
            if (ok && combi.v[i] != kl.v[i] * rec.v[i]) {
                ok = false;
                detail = fmt("combi mismatch at pixel %zu", i);
            }
        }
    }
    gate.check(7, "combi equals kl_grad*rec_error exactly; magnitude maps nonnegative", ok,
               detail);
}

// ------------------------------------------------------------------ 8

template <typename T>
bool same_params(Vae<T>& a, Vae<T>& b) {
    auto pa = a.params(), pb = b.params();
    if (pa.size() != pb.size()) return false;
    for (std::size_t k = 0; k < pa.size(); ++k)
        if (!std::equal(pa[k].data, pa[k].data + pa[k].size, pb[k].data)) return false;
    return true;
}

void check_determinism(Gate& gate) {
    bool ok = true;
    std::string stage = "all stages byte-identical on rerun";

    SyntheticConfig sc;
    sc.n_images = 12;
    sc.image_size = 8;
    sc.texture = TextureKind::gaussian_blobs;
    sc.seed = 61;
    const auto gen_a = generate_synthetic_normal<double>(sc);
    const auto gen_b = generate_synthetic_normal<double>(sc);
    if (gen_a.v != gen_b.v) {
        ok = false;
        stage = "synthesis differs";
    }

    AnomalySpec spec;
    spec.radius_min = spec.radius_max = 2;
    spec.seed = 67;
    const auto inj_a = inject_batch(gen_a, spec);
    const auto inj_b = inject_batch(gen_a, spec);
    if (ok && (inj_a.first.v != inj_b.first.v || inj_a.second.v != inj_b.second.v)) {
        ok = false;
        stage = "injection differs";
    }

    auto imgs = gen_a;
    const auto stats = compute_stats(imgs);
    apply_stats(imgs, stats);
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 4;
    tc.seed = 71;
    auto run_a = train(tiny_config(), imgs, tc);
    auto run_b = train(tiny_config(), imgs, tc);
    if (ok && !same_params(run_a.model, run_b.model)) {
        ok = false;
        stage = "training differs";
    }

    const auto& model = run_a.model;
    const std::vector<PredictorKind> kinds(std::begin(kAllPredictors), std::end(kAllPredictors));
    const auto sc_a = score_many(model, imgs, kinds, PredictorOptions{}, 1);
    const auto sc_b = score_many(model, imgs, kinds, PredictorOptions{}, 3);
    for (std::size_t b = 0; ok && b < sc_a.size(); ++b)
        for (std::size_t k = 0; k < kinds.size(); ++k)
            if (sc_a[b][k].scores.v != sc_b[b][k].scores.v) {
                ok = false;
                stage = "scoring differs across worker counts";
            }

    ProjectionConfig pc;
    pc.max_iters = 15;
    const auto pr_a = project_batch(model, imgs, pc, 1);
    const auto pr_b = project_batch(model, imgs, pc, 2);
    for (std::size_t b = 0; ok && b < pr_a.size(); ++b)
        if (pr_a[b].best_iterate.v != pr_b[b].best_iterate.v ||
            pr_a[b].energies != pr_b[b].energies) {
            ok = false;
            stage = "projection differs across worker counts";
        }

    if (ok) {
        const auto test_pair = inject_batch(imgs, spec);
        EvalConfig ec;
        ec.with_ensemble = true;
        ec.split.labeled_fraction = 0.25;
        ec.seed = 73;
        const auto rep_a = evaluate_dataset(model, test_pair.first, test_pair.second, ec);
        const auto rep_b = evaluate_dataset(model, test_pair.first, test_pair.second, ec);
        if (to_json(rep_a).dump() != to_json(rep_b).dump()) {
            ok = false;
            stage = "evaluation report differs";
        }
    }
    gate.check(8, "seeded stages reproduce byte-identical outputs", ok, stage);
}

// ------------------------------------------------------ 9-12 benchmark

struct Benchmark {
    Tensor<float> train_imgs;
    Tensor<float> test_imgs;
    MaskBatch masks;
    ModelConfig mc;
    TrainConfig tc;
    TrainResult<float> main_run;
};

Benchmark build_benchmark() {
    Benchmark b;
    SyntheticConfig sc;
    sc.n_images = 2000;
    sc.image_size = 64;
    sc.texture = TextureKind::gaussian_blobs;  // localized structure; keeps the KL-gradient map spatially informative
    sc.seed = 1001;
    b.train_imgs = generate_synthetic_normal<float>(sc);
    const auto stats = compute_stats(b.train_imgs);
    apply_stats(b.train_imgs, stats);

    sc.n_images = 200;
    sc.seed = 2002;
    auto normals = generate_synthetic_normal<float>(sc);
    apply_stats(normals, stats);  // test shares the training normalization

    AnomalySpec spec;  // disks, radius 3..7; shift is in dataset stds after normalization
    spec.shift_min = 2.0;
    spec.shift_max = 3.0;
    spec.bipolar = false;
    spec.seed = 3003;
    auto injected = inject_batch(normals, spec);
    b.test_imgs = std::move(injected.first);
    b.masks = std::move(injected.second);

    b.mc = ModelConfig{};  // 64x64, latent 32, channels 16,32,64,256
    b.tc.epochs = 30;
    b.tc.batch_size = 64;
    b.tc.lr = 3e-4;
    b.tc.beta = 1.0;
    b.tc.seed = 4004;
    std::printf("-- benchmark: training latent-32 model, 30 epochs on 2000 images\n");
    std::fflush(stdout);
    b.main_run = train(b.mc, b.train_imgs, b.tc);
    std::printf("-- benchmark: final rec %.3f kl %.3f\n", b.main_run.history.back().rec_nll,
                b.main_run.history.back().kl);
    std::fflush(stdout);
    return b;
}

void check_benchmark(Gate& gate) {
    Benchmark b = build_benchmark();
    const auto& model = b.main_run.model;

    EvalConfig ec;
    ec.with_ensemble = true;  // labeled 10%, held-out 90%
    ec.split.labeled_fraction = 0.10;
    ec.split.seed = 5005;
    ec.seed = 5005;
    const EvalReport rep = evaluate_dataset(model, b.test_imgs, b.masks, ec);

    auto full = [&](const char* name) {
        for (const auto& [n, a] : rep.per_predictor_auroc)
            if (n == name) return a;
        return -1.0;
    };

    {  // 9: every gradient/error predictor localizes well, combi above chance
        const double rec = full("rec_error"), elbo = full("elbo_grad"), kl = full("kl_grad"),
                     rg = full("rec_grad"), combi = full("combi");
        const bool ok = rec > 0.70 && elbo > 0.70 && kl > 0.70 && rg > 0.70 && combi > 0.60;
        gate.check(9, "pooled AUROC: four main predictors > 0.70, combi > 0.60", ok,
                   fmt("rec %.3f elbo %.3f kl %.3f rec_grad %.3f combi %.3f", rec, elbo, kl, rg,
                       combi));
    }

    {  // 10: projection at the best lambda does not trail plain reconstruction error
        std::vector<std::uint8_t> labels;
        labels.reserve(static_cast<std::size_t>(b.masks.n) * b.masks.plane());
        for (int i = 0; i < b.masks.n; ++i)
            for (std::size_t p = 0; p < b.masks.plane(); ++p)
                labels.push_back(b.masks.image(i)[p] ? 1 : 0);

        double best = -1.0, best_lambda = 0.0;
        for (const double lambda : {0.1, 1.0, 10.0}) {
            ProjectionConfig pc;
            pc.lambda = lambda;
            const auto traces = project_batch(model, b.test_imgs, pc, 1);
            std::vector<float> scores;
            scores.reserve(labels.size());
            for (std::size_t i = 0; i < traces.size(); ++i) {
                Tensor<float> xi(1, 1, b.test_imgs.h, b.test_imgs.w);
                std::copy(b.test_imgs.image(static_cast<int>(i)),
                          b.test_imgs.image(static_cast<int>(i)) + b.test_imgs.per_image(),
                          xi.image(0));
                const auto m = proj_map_from_trace(model, xi, traces[i], pc.map_mode);
                scores.insert(scores.end(), m.scores.v.begin(), m.scores.v.end());
            }
            const double a = pixel_auroc(scores, labels);
            std::printf("-- benchmark: projection lambda %.1f AUROC %.4f\n", lambda, a);
            std::fflush(stdout);
            if (a > best) {
                best = a;
                best_lambda = lambda;
            }
        }
        const double rec = full("rec_error");
        gate.check(10, "projected reconstruction error keeps up with plain rec_error",
                   best >= rec - 0.01,
                   fmt("best lambda %.1f AUROC %.4f vs rec_error %.4f", best_lambda, best, rec));
    }

    {  // 11: the fused map holds its own against the best single on held-out images
        double best_single = -1.0;
        std::string best_name;
        double fused = -1.0;
        for (const auto& [n, a] : rep.heldout_auroc) {
            if (n == "ensemble") {
                fused = a;
            } else if (a > best_single) {
                best_single = a;
                best_name = n;
            }
        }
        gate.check(11, "held-out ensemble AUROC within 0.02 of the best single predictor",
                   fused >= best_single - 0.02,
                   fmt("ensemble %.4f vs %s %.4f", fused, best_name.c_str(), best_single));
    }

    {  // 12: heavier KL weight shrinks the final KL term
        double kls[3];
        const double betas[3] = {0.1, 1.0, 10.0};
        kls[1] = b.main_run.history.back().kl;
        for (int i : {0, 2}) {
            TrainConfig tc = b.tc;
            tc.beta = betas[i];
            std::printf("-- benchmark: beta sweep, training beta %.1f\n", betas[i]);
            std::fflush(stdout);
            kls[i] = train(b.mc, b.train_imgs, tc).history.back().kl;
        }
        gate.check(12, "final KL is monotone nonincreasing across beta 0.1, 1, 10",
                   kls[0] >= kls[1] && kls[1] >= kls[2],
                   fmt("KL %.4f -> %.4f -> %.4f", kls[0], kls[1], kls[2]));
    }
}

}  // namespace

int main() {
    Gate gate;
    try {
        check_kl_monte_carlo(gate);
        check_input_gradient_fd(gate);
        check_gradient_additivity(gate);
        check_beta_affine(gate);
        check_auroc_oracle(gate);
        check_projection_properties(gate);
        check_combi_and_nonnegativity(gate);
        check_determinism(gate);
        check_benchmark(gate);
    } catch (const std::exception& e) {
        std::printf("FAIL --: unhandled error: %s\n", e.what());
        return 1;
    }
    if (gate.failures == 0) {
        std::printf("all 12 checks passed\n");
        return 0;
    }
    std::printf("%d check(s) failed\n", gate.failures);
    return 1;
}
