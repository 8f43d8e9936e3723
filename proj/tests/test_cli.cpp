// End-to-end drive of the command-line tool: synth -> train -> score ->
// project -> ensemble -> evaluate on a tiny dataset, plus exit-code checks.
// The binary path comes in through VAELOC_CLI_PATH at compile time.
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = VAELOC_CLI_PATH;

int run(const std::string& args) {
    const std::string cmd = kCli + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

int run_capture(const std::string& args, const fs::path& err_file, std::string& err_out) {
    const std::string cmd = kCli + " " + args + " > /dev/null 2> " + err_file.string();
    const int status = std::system(cmd.c_str());
    std::ifstream f(err_file);
    std::ostringstream ss;
    ss << f.rdbuf();
    err_out = ss.str();
    return WEXITSTATUS(status);
}

fs::path work_root() {
    const fs::path p = fs::temp_directory_path() / "vaeloc_cli_test";
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("full pipeline: synth, train, score, project, ensemble, evaluate") {
    const fs::path root = work_root();
    fs::remove_all(root);
    fs::create_directories(root);
    const auto p = [&](const char* name) { return (root / name).string(); };

    REQUIRE(run("synth --out " + p("train") +
                " --count 16 --size 32 --texture sinusoidal --seed 11") == 0);
    REQUIRE(run("synth --out " + p("test") +
                " --count 6 --size 32 --texture sinusoidal --seed 99"
                " --anomalies 1 --radius-min 4 --radius-max 6"
                " --shift-min 1.5 --shift-max 2.5") == 0);
    REQUIRE(fs::exists(root / "train" / "t00015.amap"));
    REQUIRE(fs::exists(root / "test" / "masks" / "t00005.png"));
    REQUIRE(fs::exists(root / "train" / "manifest.json"));

    REQUIRE(run("train --input " + p("train") + " --out " + p("model") +
                " --size 32 --epochs 8 --batch-size 8 --latent-dim 8"
                " --channels 8,16,32 --lr 3e-4 --seed 7") == 0);
    const fs::path ckpt = root / "model" / "checkpoint.bin";
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(root / "model" / "loss.csv"));
    REQUIRE(fs::exists(root / "model" / "config_resolved.txt"));

    REQUIRE(run("score --checkpoint " + ckpt.string() + " --input " + p("test") +
                " --out " + p("maps")) == 0);
    for (const char* pred : {"rec_error", "elbo_grad", "kl_grad", "rec_grad", "combi"}) {
        REQUIRE(fs::exists(root / "maps" / (std::string("t00000_") + pred + ".amap")));
        REQUIRE(fs::exists(root / "maps" / (std::string("t00000_") + pred + ".png")));
    }

    REQUIRE(run("project --checkpoint " + ckpt.string() + " --input " + p("test") +
                " --out " + p("proj") + " --iters 15") == 0);
    REQUIRE(fs::exists(root / "proj" / "t00000_proj.amap"));
    REQUIRE(fs::exists(root / "proj" / "t00000_projected.amap"));
    {
        const std::string csv = slurp(root / "proj" / "t00000_trace.csv");
        REQUIRE(csv.rfind("iteration,energy,L1_term,rec_term", 0) == 0);
    }

    REQUIRE(run("ensemble --maps " + p("maps") + " --masks " + p("test") + "/masks" +
                " --out " + p("ens") + " --labeled-fraction 0.34 --seed 3") == 0);
    {
        const auto w = nlohmann::json::parse(slurp(root / "ens" / "weights.json"));
        REQUIRE(w.at("weights").size() == 3);
        const auto r = nlohmann::json::parse(slurp(root / "ens" / "report.json"));
        REQUIRE(r.at("heldout_auroc").contains("ensemble"));
    }

    REQUIRE(run("evaluate --checkpoint " + ckpt.string() + " --input " + p("test") +
                " --out " + p("eval") + " --with-ensemble --labeled-fraction 0.34"
                " --seed 5") == 0);
    const auto report = nlohmann::json::parse(slurp(root / "eval" / "report.json"));
    REQUIRE(report.at("per_predictor_auroc").size() == 5);
    for (const auto& [name, a] : report.at("per_predictor_auroc").items()) {
        REQUIRE(a.get<double>() >= 0.0);
        REQUIRE(a.get<double>() <= 1.0);
    }
    REQUIRE(slurp(root / "eval" / "report.md").find("| predictor | AUROC |") !=
            std::string::npos);

    // an identical invocation reproduces the report byte for byte
    REQUIRE(run("evaluate --checkpoint " + ckpt.string() + " --input " + p("test") +
                " --out " + p("eval2") + " --with-ensemble --labeled-fraction 0.34"
                " --seed 5") == 0);
    REQUIRE(slurp(root / "eval" / "report.json") == slurp(root / "eval2" / "report.json"));

    // config file round trip: the resolved snapshot reproduces the same dataset
    REQUIRE(run("synth --config " + (root / "train" / "config_resolved.txt").string() +
                " --out " + p("train_again")) == 0);
    REQUIRE(slurp(root / "train" / "t00003.amap") ==
            slurp(root / "train_again" / "t00003.amap"));

    fs::remove_all(root);
}

TEST_CASE("exit codes distinguish usage errors from runtime failures") {
    const fs::path root = work_root() / "codes";
    fs::remove_all(root);
    fs::create_directories(root);

    std::string err;
    const int bad_pred = run_capture(
        "score --checkpoint x.bin --input y --out z --predictors bogus", root / "e1", err);
    REQUIRE(bad_pred == 2);
    REQUIRE(err.find("bogus") != std::string::npos);
    REQUIRE(err.find("rec_error") != std::string::npos);
    REQUIRE(err.find("combi") != std::string::npos);

    REQUIRE(run("score --checkpoint " + (root / "missing.bin").string() +
                " --input " + root.string() + " --out " + (root / "o").string()) == 1);
    REQUIRE(run("") == 2);                       // a subcommand is required
    REQUIRE(run("synth --out " + (root / "s").string() + " --count 0") == 2);
    REQUIRE(run("--help") == 0);
    REQUIRE(run("synth --help") == 0);

    const int missing_out = run_capture("synth --count 2", root / "e2", err);
    REQUIRE(missing_out == 2);
    REQUIRE(err.find("--out") != std::string::npos);

    fs::remove_all(root);
}
