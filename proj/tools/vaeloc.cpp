// Command-line front end: synth | train | score | project | ensemble | evaluate.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
// subcommand writes a resolved-config snapshot beside its outputs so a run
// can be repeated exactly.
#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "vaeloc/checkpoint.hpp"
#include "vaeloc/data.hpp"
#include "vaeloc/metrics.hpp"
#include "vaeloc/trainer.hpp"

namespace fs = std::filesystem;
using namespace vaeloc;

namespace {

std::vector<std::string> split_csv(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : csv) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<PredictorKind> parse_predictors(const std::string& csv) {
    std::vector<PredictorKind> kinds;
    for (const auto& name : split_csv(csv)) kinds.push_back(predictor_from_string(name));
    if (kinds.empty()) throw ConfigError("no predictors given");
    return kinds;
}

std::vector<int> parse_channels(const std::string& csv) {
    std::vector<int> ch;
    for (const auto& tok : split_csv(csv)) {
        try {
            ch.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("bad channel list entry '" + tok + "'");
        }
    }
    if (ch.empty()) throw ConfigError("channel list is empty");
    return ch;
}

std::string stem_of(const std::string& filename) {
    const auto dot = filename.rfind('.');
    return dot == std::string::npos ? filename : filename.substr(0, dot);
}

void write_text_file(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    f << s;
    if (!f) throw IoError("short write on " + p.string());
}

void write_json_file(const fs::path& p, const nlohmann::json& j) {
    write_text_file(p, j.dump(2) + "\n");
}

fs::path make_out_dir(const std::string& out) {
    if (out.empty()) throw ConfigError("missing --out");
    const fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
        throw IoError("cannot create output directory " + dir.string());
    return dir;
}

void require_value(const std::string& v, const char* flag) {
    if (v.empty()) throw ConfigError(std::string("missing ") + flag);
}

// CLI11 only consults config files attached to the top-level app, so the
// per-subcommand --config is applied by hand: flat key=value lines, and any
// flag given on the command line keeps its value. Runs inside the subcommand
// callback, before the option values are used.
void apply_config_file(CLI::App& sub) {
    auto* copt = sub.get_option_no_throw("--config");
    if (copt == nullptr || copt->count() == 0) return;
    const auto path = copt->as<std::string>();
    std::vector<CLI::ConfigItem> items;
    try {
        items = sub.get_config_formatter()->from_file(path);
    } catch (const CLI::Error& e) {
        throw IoError("config file " + path + ": " + e.what());
    }
    for (const auto& item : items) {
        if (!item.parents.empty())
            throw ConfigError("config file: sections are not supported (got [" +
                              item.parents.front() + "])");
        if (item.name == "config") throw ConfigError("config file cannot set --config");
        CLI::Option* op = sub.get_option_no_throw("--" + item.name);
        if (op == nullptr) throw ConfigError("config file: unknown key '" + item.name + "'");
        if (!op->empty()) continue;  // command line wins
        try {
            if (op->get_expected_min() == 0) {
                if (item.inputs.size() > 1)
                    throw ConfigError("config file: '" + item.name + "' takes one value");
                const std::string res = item.inputs.empty() ? "{}" : item.inputs[0];
                op->add_result(op->get_flag_value(item.name, res));
            } else {
                op->add_result(item.inputs);
            }
            op->run_callback();
        } catch (const CLI::Error& e) {
            throw ConfigError("config file: key '" + item.name + "': " + e.what());
        }
    }
}

void write_resolved_config(const CLI::App& sub, const fs::path& out_dir) {
    write_text_file(out_dir / "config_resolved.txt", sub.config_to_str(true, true));
}

// ----------------------------------------------------------------- synth

struct SynthOpts {
    std::string out;
    std::uint64_t seed = 0;
    int count = 100;
    int size = 64;
    std::string texture = "sinusoidal";
    std::string format = "amap";
    int anomalies = 0;  // anomalies per image; 0 writes a clean set
    std::string shape = "disk";
    int radius_min = 3, radius_max = 7;
    double shift_min = 1.0, shift_max = 2.0;
    bool bipolar = false;
};

void run_synth(const SynthOpts& o, CLI::App& sub) {
    apply_config_file(sub);
    if (o.format != "amap" && o.format != "png")
        throw ConfigError("format must be amap or png");
    const fs::path dir = make_out_dir(o.out);

    SyntheticConfig cfg;
    cfg.n_images = o.count;
    cfg.image_size = o.size;
    cfg.texture = texture_from_string(o.texture);
    cfg.seed = o.seed;
    Tensor<double> images = generate_synthetic_normal<double>(cfg);

    MaskBatch masks;
    if (o.anomalies > 0) {
        AnomalySpec spec;
        spec.shape = anomaly_shape_from_string(o.shape);
        spec.radius_min = o.radius_min;
        spec.radius_max = o.radius_max;
        spec.shift_min = o.shift_min;
        spec.shift_max = o.shift_max;
        spec.count_min = spec.count_max = o.anomalies;
        spec.bipolar = o.bipolar;
        spec.seed = derive_seed(o.seed, 0x0A11);
        auto [shifted, m] = inject_batch(images, spec);
        images = std::move(shifted);
        masks = std::move(m);
        fs::create_directories(dir / "masks");
    }

    // png output squashes the dataset into [0,1]; the scale goes into the manifest
    double lo = images.v[0], hi = images.v[0];
    if (o.format == "png")
        for (double v : images.v) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double span = hi > lo ? hi - lo : 1.0;

    nlohmann::json manifest;
    std::vector<std::string> files;
    char name[32];
    for (int b = 0; b < images.n; ++b) {
        Grid<double> g = grid_from_image(images, b);
        std::snprintf(name, sizeof(name), "t%05d.%s", b, o.format.c_str());
        if (o.format == "amap") {
            write_amap(dir / name, g);
        } else {
            for (auto& v : g.v) v = (v - lo) / span;
            write_png_gray(dir / name, g, 16);
        }
        files.emplace_back(name);
        if (o.anomalies > 0) {
            Grid<double> m(images.h, images.w);
            for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = masks.image(b)[i];
            std::snprintf(name, sizeof(name), "t%05d.png", b);
            write_png_gray(dir / "masks" / name, m, 8);
        }
    }

    manifest["files"] = files;
    manifest["count"] = o.count;
    manifest["image_size"] = o.size;
    manifest["texture"] = o.texture;
    manifest["seed"] = o.seed;
    manifest["format"] = o.format;
    if (o.format == "png") manifest["png_scale"] = {{"min", lo}, {"max", hi}};
    if (o.anomalies > 0)
        manifest["anomalies"] = {{"per_image", o.anomalies}, {"shape", o.shape},
                                 {"radius", {o.radius_min, o.radius_max}},
                                 {"shift", {o.shift_min, o.shift_max}},
                                 {"bipolar", o.bipolar}};
    write_json_file(dir / "manifest.json", manifest);
    write_resolved_config(sub, dir);
    std::cout << "wrote " << files.size() << " images to " << dir.string() << "\n";
}

// ----------------------------------------------------------------- train

struct TrainOpts {
    std::string input, out;
    std::uint64_t seed = 0;
    int epochs = 500;
    int batch_size = 64;
    double lr = 1e-4;
    double beta = 1.0;
    int latent_dim = 32;
    int size = 64;
    std::string channels = "16,32,64,256";
    int checkpoint_every = 0;
    double aug_noise = 0.0, aug_rotation = 0.0, aug_jitter = 0.0;
};

void run_train(const TrainOpts& o, CLI::App& sub) {
    apply_config_file(sub);
    require_value(o.input, "--input");
    const fs::path dir = make_out_dir(o.out);
    const auto ds = load_image_dir<double>(o.input, o.size);

    ModelConfig mcfg;
    mcfg.image_size = o.size;
    mcfg.latent_dim = o.latent_dim;
    mcfg.encoder_channels = parse_channels(o.channels);

    TrainConfig tcfg;
    tcfg.epochs = o.epochs;
    tcfg.batch_size = o.batch_size;
    tcfg.lr = o.lr;
    tcfg.beta = o.beta;
    tcfg.seed = o.seed;
    tcfg.checkpoint_every = o.checkpoint_every;

    BatchHook<double> hook;
    if (o.aug_noise > 0 || o.aug_rotation > 0 || o.aug_jitter > 0) {
        AugmentConfig aug;
        aug.noise_std = o.aug_noise;
        aug.rotation_degrees_max = o.aug_rotation;
        aug.intensity_jitter = o.aug_jitter;
        hook = [aug](Tensor<double>& batch, std::uint64_t seed) {
            augment_batch(batch, aug, seed);
        };
    }

    write_resolved_config(sub, dir);
    auto manifest = manifest_json(ds);
    manifest["seed"] = o.seed;
    write_json_file(dir / "manifest.json", manifest);

    const auto result = train_to_dir<double>(mcfg, ds.images, tcfg, dir, ds.stats, hook);
    if (result.aborted)
        throw NumericError("training aborted (" + result.abort_reason +
                           "); last stable checkpoint kept");
    const auto& last = result.history.back();
    std::cout << "trained " << result.history.size() << " epochs, final total "
              << last.total << " (rec " << last.rec_nll << ", kl " << last.kl << ")\n"
              << "checkpoint: " << (dir / "checkpoint.bin").string() << "\n";
}

// ----------------------------------------------------------------- score

struct ScoreOpts {
    std::string checkpoint, input, out;
    std::string predictors = "rec_error,elbo_grad,kl_grad,rec_grad,combi";
    int workers = 1;
    bool signed_rec_grad = false;
};

void run_score(const ScoreOpts& o, CLI::App& sub) {
    apply_config_file(sub);
    require_value(o.checkpoint, "--checkpoint");
    require_value(o.input, "--input");
    const auto kinds = parse_predictors(o.predictors);
    const fs::path dir = make_out_dir(o.out);
    const auto ckpt = load_checkpoint<double>(o.checkpoint);
    const auto ds =
        load_image_dir<double>(o.input, ckpt.model.config().image_size, &ckpt.stats);

    PredictorOptions opts;
    opts.abs_rec_grad = !o.signed_rec_grad;
    const auto maps = score_many(ckpt.model, ds.images, kinds, opts, o.workers);

    nlohmann::json manifest;
    manifest["checkpoint_fingerprint"] = ckpt.fingerprint;
    manifest["predictors"] = split_csv(o.predictors);
    nlohmann::json outputs = nlohmann::json::array();
    for (std::size_t b = 0; b < maps.size(); ++b) {
        const std::string stem = stem_of(ds.files[b]);
        for (const auto& m : maps[b]) {
            const std::string base = stem + "_" + to_string(m.kind);
            write_amap(dir / (base + ".amap"), m.scores);
            write_heatmap_png(dir / (base + ".png"), m.scores);
            outputs.push_back(base + ".amap");
        }
    }
    manifest["outputs"] = outputs;
    write_json_file(dir / "manifest.json", manifest);
    write_resolved_config(sub, dir);
    std::cout << "scored " << maps.size() << " images with " << kinds.size()
              << " predictors into " << dir.string() << "\n";
}

// ----------------------------------------------------------------- project

struct ProjectOpts {
    std::string checkpoint, input, out;
    double lambda = 1.0;
    double alpha = 0.03;
    int iters = 100;
    int patience = 20;
    std::string map_mode = "displacement";
    int workers = 1;
};

void run_project(const ProjectOpts& o, CLI::App& sub) {
    apply_config_file(sub);
    require_value(o.checkpoint, "--checkpoint");
    require_value(o.input, "--input");
    ProjMapMode mode;
    if (o.map_mode == "displacement") mode = ProjMapMode::displacement;
    else if (o.map_mode == "residual") mode = ProjMapMode::residual;
    else throw ConfigError("map mode must be displacement or residual");

    const fs::path dir = make_out_dir(o.out);
    const auto ckpt = load_checkpoint<double>(o.checkpoint);
    const auto ds =
        load_image_dir<double>(o.input, ckpt.model.config().image_size, &ckpt.stats);

    ProjectionConfig pcfg;
    pcfg.lambda = o.lambda;
    pcfg.alpha = o.alpha;
    pcfg.max_iters = o.iters;
    pcfg.early_stop_patience = o.patience;
    pcfg.map_mode = mode;
    pcfg.validate();

    const auto traces = project_batch(ckpt.model, ds.images, pcfg, o.workers);

    nlohmann::json manifest;
    manifest["checkpoint_fingerprint"] = ckpt.fingerprint;
    manifest["lambda"] = o.lambda;
    manifest["alpha"] = o.alpha;
    manifest["max_iters"] = o.iters;
    manifest["map_mode"] = o.map_mode;
    nlohmann::json per_image = nlohmann::json::array();
    for (std::size_t b = 0; b < traces.size(); ++b) {
        const std::string stem = stem_of(ds.files[b]);
        Tensor<double> xi(1, 1, ds.images.h, ds.images.w);
        std::copy(ds.images.image(static_cast<int>(b)),
                  ds.images.image(static_cast<int>(b)) + ds.images.per_image(), xi.image(0));
        const auto map = proj_map_from_trace(ckpt.model, xi, traces[b], mode);
        write_amap(dir / (stem + "_proj.amap"), map.scores);
        write_heatmap_png(dir / (stem + "_proj.png"), map.scores);
        write_amap(dir / (stem + "_projected.amap"),
                   grid_from_image(traces[b].best_iterate, 0));
        write_projection_csv(dir / (stem + "_trace.csv"), traces[b]);
        per_image.push_back({{"file", ds.files[b]},
                             {"best_energy", traces[b].best_energy},
                             {"best_index", traces[b].best_index},
                             {"iterations", traces[b].energies.size()},
                             {"warning", traces[b].warning},
                             {"warning_text", traces[b].warning_text}});
        if (traces[b].warning)
            std::cerr << "warning: " << ds.files[b] << ": " << traces[b].warning_text << "\n";
    }
    manifest["images"] = per_image;
    write_json_file(dir / "manifest.json", manifest);
    write_resolved_config(sub, dir);
    std::cout << "projected " << traces.size() << " images into " << dir.string() << "\n";
}

// ----------------------------------------------------------------- ensemble

struct EnsembleOpts {
    std::string maps, masks, out;
    std::string features = "rec_error,kl_grad,rec_grad";
    double labeled_fraction = 0.10;
    std::uint64_t seed = 0;
    double l2 = 1e-4;
    bool standardize = false;
    bool pixel_split = false;
};

void run_ensemble(const EnsembleOpts& o, CLI::App& sub) {
    apply_config_file(sub);
    require_value(o.maps, "--maps");
    require_value(o.masks, "--masks");
    const auto feature_kinds = parse_predictors(o.features);
    const fs::path dir = make_out_dir(o.out);
    if (!fs::is_directory(o.masks)) throw IoError("not a directory: " + o.masks);
    if (!fs::is_directory(o.maps)) throw IoError("not a directory: " + o.maps);

    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(o.masks))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            stems.push_back(stem_of(entry.path().filename().string()));
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) throw IoError("no mask pngs in " + o.masks);

    std::vector<std::vector<AnomalyMap<double>>> maps_per_image;
    MaskBatch masks;
    for (std::size_t s = 0; s < stems.size(); ++s) {
        std::vector<AnomalyMap<double>> per;
        for (PredictorKind k : feature_kinds) {
            const fs::path p = fs::path(o.maps) / (stems[s] + "_" + to_string(k) + ".amap");
            if (!fs::exists(p)) throw ConfigError("missing feature map " + p.string());
            AnomalyMap<double> m;
            m.scores = read_amap(p);
            m.kind = k;
            per.push_back(std::move(m));
        }
        const auto mg = read_png_gray(fs::path(o.masks) / (stems[s] + ".png"));
        if (mg.h != per[0].scores.h || mg.w != per[0].scores.w)
            throw ConfigError("mask " + stems[s] + ".png does not match its maps");
        if (s == 0) masks = MaskBatch(static_cast<int>(stems.size()), 1, mg.h, mg.w);
        std::uint8_t* md = masks.image(static_cast<int>(s));
        for (std::size_t i = 0; i < mg.size(); ++i) md[i] = mg.v[i] > 0.0 ? 1 : 0;
        maps_per_image.push_back(std::move(per));
    }

    SplitSpec split;
    split.labeled_fraction = o.labeled_fraction;
    split.seed = o.seed;
    split.stratify_by_image = !o.pixel_split;

    EnsembleConfig ecfg;
    ecfg.features = feature_kinds;
    ecfg.l2 = o.l2;
    ecfg.standardize = o.standardize;

    const int n = static_cast<int>(stems.size());
    EnsembleWeights weights;
    std::vector<int> heldout_images;
    if (split.stratify_by_image) {
        const Split sp = split_indices(n, split);
        const auto fm = build_feature_matrix(maps_per_image, masks, sp.labeled, feature_kinds);
        weights = fit_logistic(fm, ecfg, o.seed);
        heldout_images = sp.heldout;
    } else {
        const std::size_t px = masks.plane();
        const Split sp = split_indices(static_cast<int>(n * px), split);
        std::vector<int> all(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), 0);
        const auto fm = build_feature_matrix(maps_per_image, masks, all, feature_kinds);
        FeatureMatrix subm;
        subm.feature_names = fm.feature_names;
        subm.X.resize(static_cast<Eigen::Index>(sp.labeled.size()), fm.X.cols());
        subm.y.resize(sp.labeled.size());
        for (std::size_t r = 0; r < sp.labeled.size(); ++r) {
            subm.X.row(static_cast<Eigen::Index>(r)) = fm.X.row(sp.labeled[r]);
            subm.y[r] = fm.y[static_cast<std::size_t>(sp.labeled[r])];
        }
        weights = fit_logistic(subm, ecfg, o.seed);
        heldout_images = all;
    }
    save_ensemble_weights(dir / "weights.json", weights);

    // held-out comparison: the fused map against each input feature
    std::vector<std::uint8_t> labels;
    for (int b : heldout_images)
        for (std::size_t i = 0; i < masks.plane(); ++i)
            labels.push_back(masks.image(b)[i] ? 1 : 0);

    nlohmann::json report;
    report["heldout_images"] = heldout_images.size();
    report["labeled_fraction"] = o.labeled_fraction;
    report["seed"] = o.seed;
    nlohmann::json auroc = nlohmann::json::object();
    std::vector<double> scores;
    for (std::size_t j = 0; j < feature_kinds.size(); ++j) {
        scores.clear();
        for (int b : heldout_images)
            for (double v : maps_per_image[static_cast<std::size_t>(b)][j].scores.v)
                scores.push_back(v);
        auroc[to_string(feature_kinds[j])] = pixel_auroc(scores, labels);
    }
    scores.clear();
    for (int b : heldout_images) {
        const auto prob = predict_map(weights, maps_per_image[static_cast<std::size_t>(b)]);
        for (double v : prob.v) scores.push_back(v);
    }
    auroc["ensemble"] = pixel_auroc(scores, labels);
    report["heldout_auroc"] = auroc;
    write_json_file(dir / "report.json", report);
    write_resolved_config(sub, dir);
    std::cout << "ensemble AUROC " << auroc["ensemble"].dump() << " on "
              << heldout_images.size() << " held-out images\n";
}

// ----------------------------------------------------------------- evaluate

struct EvaluateOpts {
    std::string checkpoint, input, out;
    std::string predictors = "rec_error,elbo_grad,kl_grad,rec_grad,combi";
    std::uint64_t seed = 0;
    int workers = 1;
    bool with_projection = false;
    double lambda = 1.0;
    double alpha = 0.03;
    int iters = 100;
    int patience = 20;
    std::string map_mode = "displacement";
    bool with_ensemble = false;
    std::string features = "rec_error,kl_grad,rec_grad";
    double labeled_fraction = 0.10;
    double l2 = 1e-4;
    bool standardize = false;
    bool pixel_split = false;
};

void run_evaluate(const EvaluateOpts& o, CLI::App& sub) {
    apply_config_file(sub);
    require_value(o.checkpoint, "--checkpoint");
    require_value(o.input, "--input");
    EvalConfig cfg;
    cfg.predictors = parse_predictors(o.predictors);
    cfg.seed = o.seed;
    cfg.workers = o.workers;
    cfg.with_projection = o.with_projection;
    if (o.with_projection) {
        cfg.projection.lambda = o.lambda;
        cfg.projection.alpha = o.alpha;
        cfg.projection.max_iters = o.iters;
        cfg.projection.early_stop_patience = o.patience;
        if (o.map_mode == "displacement") cfg.projection.map_mode = ProjMapMode::displacement;
        else if (o.map_mode == "residual") cfg.projection.map_mode = ProjMapMode::residual;
        else throw ConfigError("map mode must be displacement or residual");
        cfg.projection.validate();
    }
    cfg.with_ensemble = o.with_ensemble;
    if (o.with_ensemble) {
        cfg.ensemble.features = parse_predictors(o.features);
        cfg.ensemble.l2 = o.l2;
        cfg.ensemble.standardize = o.standardize;
        cfg.split.labeled_fraction = o.labeled_fraction;
        cfg.split.seed = derive_seed(o.seed, 0x5117);
        cfg.split.stratify_by_image = !o.pixel_split;
    }

    const fs::path dir = make_out_dir(o.out);
    const auto ckpt = load_checkpoint<double>(o.checkpoint);
    const auto ds =
        load_image_dir<double>(o.input, ckpt.model.config().image_size, &ckpt.stats);
    if (!ds.has_masks)
        throw ConfigError("evaluation needs masks/<stem>.png files in the input directory");

    const auto report = evaluate_dataset(ckpt.model, ds.images, ds.masks, cfg);
    write_json_file(dir / "report.json", to_json(report));
    const std::string md = report_markdown(report);
    write_text_file(dir / "report.md", md);
    write_resolved_config(sub, dir);
    std::cout << md;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixel-wise anomaly localization with variational autoencoders"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    SynthOpts so;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
    synth->add_option("--config", "flat key=value file; command-line flags win")->configurable(false);
    synth->add_option("--out", so.out, "output directory");
    synth->add_option("--seed", so.seed, "generation seed");
    synth->add_option("--count", so.count, "number of images");
    synth->add_option("--size", so.size, "image side length");
    synth->add_option("--texture", so.texture,
                      "gaussian_blobs | sinusoidal | smooth_noise");
    synth->add_option("--format", so.format, "amap (exact) or png (16-bit, rescaled)");
    synth->add_option("--anomalies", so.anomalies, "anomalies per image (0 = clean set)");
    synth->add_option("--shape", so.shape, "disk | square | irregular_blob");
    synth->add_option("--radius-min", so.radius_min, "anomaly radius lower bound");
    synth->add_option("--radius-max", so.radius_max, "anomaly radius upper bound");
    synth->add_option("--shift-min", so.shift_min, "anomaly intensity shift lower bound");
    synth->add_option("--shift-max", so.shift_max, "anomaly intensity shift upper bound");
    synth->add_flag("--bipolar", so.bipolar, "random sign on the intensity shift");
    synth->callback([&] { run_synth(so, *synth); });

    TrainOpts to;
    auto* train_cmd = app.add_subcommand("train", "fit a model on a directory of normals");
    train_cmd->add_option("--config", "flat key=value file; command-line flags win")->configurable(false);
    train_cmd->add_option("--input", to.input, "directory of training images");
    train_cmd->add_option("--out", to.out, "output directory");
    train_cmd->add_option("--seed", to.seed, "training seed");
    train_cmd->add_option("--epochs", to.epochs, "training epochs");
    train_cmd->add_option("--batch-size", to.batch_size, "mini-batch size");
    train_cmd->add_option("--lr", to.lr, "Adam learning rate");
    train_cmd->add_option("--beta", to.beta, "KL weight");
    train_cmd->add_option("--latent-dim", to.latent_dim, "latent dimensionality");
    train_cmd->add_option("--size", to.size, "image side length after resize");
    train_cmd->add_option("--channels", to.channels, "encoder channel list");
    train_cmd->add_option("--checkpoint-every", to.checkpoint_every,
                          "periodic checkpoint cadence (0 = final only)");
    train_cmd->add_option("--aug-noise", to.aug_noise, "augmentation noise std");
    train_cmd->add_option("--aug-rotation", to.aug_rotation, "augmentation max rotation (deg)");
    train_cmd->add_option("--aug-jitter", to.aug_jitter, "augmentation intensity jitter");
    train_cmd->callback([&] { run_train(to, *train_cmd); });

    ScoreOpts sc;
    auto* score_cmd = app.add_subcommand("score", "write anomaly maps for a directory");
    score_cmd->add_option("--config", "flat key=value file; command-line flags win")->configurable(false);
    score_cmd->add_option("--checkpoint", sc.checkpoint, "model checkpoint");
    score_cmd->add_option("--input", sc.input, "directory of images");
    score_cmd->add_option("--out", sc.out, "output directory");
    score_cmd->add_option("--predictors", sc.predictors, "comma list of predictors");
    score_cmd->add_option("--workers", sc.workers, "image-level parallelism");
    score_cmd->add_flag("--signed-rec-grad", sc.signed_rec_grad,
                        "keep the sign of the reconstruction gradient");
    score_cmd->callback([&] { run_score(sc, *score_cmd); });

    ProjectOpts po;
    auto* project_cmd =
        app.add_subcommand("project", "descend test inputs onto the learned manifold");
    project_cmd->add_option("--config", "flat key=value file; command-line flags win")->configurable(false);
    project_cmd->add_option("--checkpoint", po.checkpoint, "model checkpoint");
    project_cmd->add_option("--input", po.input, "directory of images");
    project_cmd->add_option("--out", po.out, "output directory");
    project_cmd->add_option("--lambda", po.lambda, "L1 proximity weight");
    project_cmd->add_option("--alpha", po.alpha, "Adam step size on the input");
    project_cmd->add_option("--iters", po.iters, "maximum descent iterations");
    project_cmd->add_option("--patience", po.patience, "early-stop patience");
    project_cmd->add_option("--map-mode", po.map_mode, "displacement | residual");
    project_cmd->add_option("--workers", po.workers, "image-level parallelism");
    project_cmd->callback([&] { run_project(po, *project_cmd); });

    EnsembleOpts eo;
    auto* ensemble_cmd =
        app.add_subcommand("ensemble", "fit a pixel fusion from saved maps and masks");
    ensemble_cmd->add_option("--config", "flat key=value file; command-line flags win")->configurable(false);
    ensemble_cmd->add_option("--maps", eo.maps, "directory of <stem>_<predictor>.amap files")
        ;
    ensemble_cmd->add_option("--masks", eo.masks, "directory of <stem>.png masks");
    ensemble_cmd->add_option("--out", eo.out, "output directory");
    ensemble_cmd->add_option("--features", eo.features, "comma list of feature predictors");
    ensemble_cmd->add_option("--labeled-fraction", eo.labeled_fraction,
                             "fraction fitted on, rest held out");
    ensemble_cmd->add_option("--seed", eo.seed, "split seed");
    ensemble_cmd->add_option("--l2", eo.l2, "ridge penalty on the weights");
    ensemble_cmd->add_flag("--standardize", eo.standardize,
                           "report weights for standardized features");
    ensemble_cmd->add_flag("--pixel-split", eo.pixel_split,
                           "split labeled pixels instead of whole images");
    ensemble_cmd->callback([&] { run_ensemble(eo, *ensemble_cmd); });

    EvaluateOpts ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "AUROC report on a masked test set");
    eval_cmd->add_option("--config", "flat key=value file; command-line flags win")->configurable(false);
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
    eval_cmd->add_option("--input", ev.input, "test directory with masks/");
    eval_cmd->add_option("--out", ev.out, "output directory");
    eval_cmd->add_option("--predictors", ev.predictors, "comma list of predictors");
    eval_cmd->add_option("--seed", ev.seed, "evaluation seed");
    eval_cmd->add_option("--workers", ev.workers, "image-level parallelism");
    eval_cmd->add_flag("--with-projection", ev.with_projection, "also score by projection");
    eval_cmd->add_option("--lambda", ev.lambda, "projection L1 weight");
    eval_cmd->add_option("--alpha", ev.alpha, "projection step size");
    eval_cmd->add_option("--iters", ev.iters, "projection iterations");
    eval_cmd->add_option("--patience", ev.patience, "projection early-stop patience");
    eval_cmd->add_option("--map-mode", ev.map_mode, "displacement | residual");
    eval_cmd->add_flag("--with-ensemble", ev.with_ensemble,
                       "fit a fusion on a labeled split and report held-out AUROC");
    eval_cmd->add_option("--features", ev.features, "ensemble feature predictors");
    eval_cmd->add_option("--labeled-fraction", ev.labeled_fraction, "ensemble split fraction");
    eval_cmd->add_option("--l2", ev.l2, "ensemble ridge penalty");
    eval_cmd->add_flag("--standardize", ev.standardize, "standardized ensemble weights");
    eval_cmd->add_flag("--pixel-split", ev.pixel_split, "pixel-granularity ensemble split");
    eval_cmd->callback([&] { run_evaluate(ev, *eval_cmd); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
