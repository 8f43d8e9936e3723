#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vaeloc/trainer.hpp"

using namespace vaeloc;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.latent_dim = 4;
    cfg.encoder_channels = {8, 16};
    return cfg;
}

// Smooth low-amplitude images the tiny model can actually learn.
Tensor<double> easy_dataset(int n, int size, std::uint64_t seed) {
    Tensor<double> data(n, 1, size, size);
    Rng rng(seed);
    for (int b = 0; b < n; ++b) {
        const double ph = rng.uniform(0.0, 6.28);
        const double amp = rng.uniform(0.5, 1.0);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                data.at(b, 0, y, x) =
                    amp * std::sin(2.0 * 3.14159265 * (x + y) / size + ph) + 0.05 * rng.normal();
    }
    return data;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("vaeloc_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("config validation rejects bad hyperparameters") {
    TrainConfig cfg;
    cfg.epochs = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.lr = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.beta = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training rejects empty or mismatched datasets") {
    TrainConfig cfg;
    cfg.epochs = 1;
    REQUIRE_THROWS_AS(train(tiny_config(), Tensor<double>(0, 1, 8, 8), cfg), ConfigError);
    REQUIRE_THROWS_AS(train(tiny_config(), easy_dataset(4, 16, 1), cfg), ConfigError);
}

TEST_CASE("two epochs on sixteen images writes artifacts") {
    const auto dir = fresh_dir("smoke");
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 42;
    const auto result = train_to_dir(tiny_config(), easy_dataset(16, 8, 7), cfg, dir, NormStats{});
    REQUIRE_FALSE(result.aborted);
    REQUIRE(result.history.size() == 2);
    REQUIRE(fs::exists(dir / "checkpoint.bin"));
    REQUIRE(fs::exists(dir / "loss.csv"));

    std::ifstream csv(dir / "loss.csv");
    std::string line;
    std::getline(csv, line);
    REQUIRE(line == "epoch,rec_nll,kl,total,beta");
    int rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    REQUIRE(rows == 2);
}

TEST_CASE("losses stay finite and the total eventually drops") {
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 16;
    cfg.lr = 1e-3;
    cfg.seed = 3;
    const auto result = train(tiny_config(), easy_dataset(16, 8, 9), cfg);
    REQUIRE_FALSE(result.aborted);
    REQUIRE(result.history.size() == 30);
    for (const auto& e : result.history) {
        REQUIRE(std::isfinite(e.total));
        REQUIRE(e.rec_nll >= 0.0);
        REQUIRE(e.kl >= 0.0);
        REQUIRE(e.total == e.rec_nll + e.beta * e.kl);
    }
    REQUIRE(result.history.back().total < result.history.front().total);
}

TEST_CASE("identical seeds reproduce identical histories and parameters") {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = 11;
    const auto data = easy_dataset(16, 8, 13);
    const auto a = train(tiny_config(), data, cfg);
    const auto b = train(tiny_config(), data, cfg);
    REQUIRE(a.model.fingerprint() == b.model.fingerprint());
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        REQUIRE(a.history[i].rec_nll == b.history[i].rec_nll);
        REQUIRE(a.history[i].kl == b.history[i].kl);
        REQUIRE(a.history[i].total == b.history[i].total);
    }
    cfg.seed = 12;
    const auto c = train(tiny_config(), data, cfg);
    REQUIRE(a.model.fingerprint() != c.model.fingerprint());
}

TEST_CASE("larger beta suppresses the final KL term") {
    const auto data = easy_dataset(32, 8, 17);
    TrainConfig lo;
    lo.epochs = 40;
    lo.batch_size = 16;
    lo.lr = 1e-3;
    lo.seed = 5;
    lo.beta = 0.1;
    TrainConfig hi = lo;
    hi.beta = 10.0;
    const auto rlo = train(tiny_config(), data, lo);
    const auto rhi = train(tiny_config(), data, hi);
    REQUIRE_FALSE(rlo.aborted);
    REQUIRE_FALSE(rhi.aborted);
    REQUIRE(rhi.history.back().kl < rlo.history.back().kl);
}

TEST_CASE("non-finite loss aborts and keeps the last finite-epoch parameters") {
    const auto data = easy_dataset(16, 8, 19);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 16;  // one batch per epoch
    cfg.seed = 23;

    int calls = 0;
    BatchHook<double> poison = [&](Tensor<double>& batch, std::uint64_t) {
        if (++calls == 3) batch.v[0] = std::numeric_limits<double>::quiet_NaN();
    };
    const auto broken = train(tiny_config(), data, cfg, poison);
    REQUIRE(broken.aborted);
    REQUIRE(broken.history.size() == 2);
    REQUIRE_FALSE(broken.abort_reason.empty());

    TrainConfig two = cfg;
    two.epochs = 2;
    const auto clean = train(tiny_config(), data, two);
    REQUIRE(broken.model.fingerprint() == clean.model.fingerprint());
}

TEST_CASE("aborted run still writes a loadable last-good checkpoint") {
    const auto dir = fresh_dir("abort");
    const auto data = easy_dataset(16, 8, 19);
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 16;
    cfg.seed = 23;
    int calls = 0;
    BatchHook<double> poison = [&](Tensor<double>& batch, std::uint64_t) {
        if (++calls == 2) batch.v[5] = std::numeric_limits<double>::infinity();
    };
    const auto result = train_to_dir(tiny_config(), data, cfg, dir, NormStats{}, poison);
    REQUIRE(result.aborted);
    const auto loaded = load_checkpoint<double>(dir / "checkpoint.bin");
    REQUIRE(loaded.model.fingerprint() == result.model.fingerprint());
}

TEST_CASE("periodic checkpoints appear at the configured cadence") {
    const auto dir = fresh_dir("periodic");
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.checkpoint_every = 2;
    train_to_dir(tiny_config(), easy_dataset(8, 8, 29), cfg, dir, NormStats{});
    REQUIRE(fs::exists(dir / "checkpoint_epoch_2.bin"));
    REQUIRE(fs::exists(dir / "checkpoint_epoch_4.bin"));
    REQUIRE_FALSE(fs::exists(dir / "checkpoint_epoch_3.bin"));
}

TEST_CASE("checkpoint round-trip reproduces forward outputs bit for bit") {
    const auto dir = fresh_dir("roundtrip");
    Vae<double> model(tiny_config(), 31);
    NormStats stats{1.25, 2.5};
    save_checkpoint(dir / "model.bin", model, stats);
    const auto loaded = load_checkpoint<double>(dir / "model.bin");
    REQUIRE(loaded.stats.mean == 1.25);
    REQUIRE(loaded.stats.std == 2.5);
    REQUIRE(loaded.model.fingerprint() == model.fingerprint());

    const auto x = easy_dataset(2, 8, 33);
    const auto a = model.forward(x, ForwardMode::deterministic);
    const auto b = loaded.model.forward(x, ForwardMode::deterministic);
    REQUIRE(a.reconstruction.v == b.reconstruction.v);
}

TEST_CASE("checkpoint loading fails loudly on damage") {
    const auto dir = fresh_dir("damage");
    Vae<double> model(tiny_config(), 37);
    const auto path = dir / "model.bin";
    save_checkpoint(path, model, NormStats{});
    const auto good = slurp(path);

    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_checkpoint<double>(dir / "nope.bin"), IoError);
    }
    SECTION("bad magic") {
        auto bytes = good;
        bytes[0] = 'X';
        dump(path, bytes);
        REQUIRE_THROWS_WITH(load_checkpoint<double>(path),
                            Catch::Matchers::ContainsSubstring("bad magic"));
    }
    SECTION("unsupported version") {
        auto bytes = good;
        bytes[8] = 99;
        dump(path, bytes);
        REQUIRE_THROWS_WITH(load_checkpoint<double>(path),
                            Catch::Matchers::ContainsSubstring("unsupported checkpoint version"));
    }
    SECTION("scalar width mismatch") {
        REQUIRE_THROWS_WITH(load_checkpoint<float>(path),
                            Catch::Matchers::ContainsSubstring("8-byte scalars"));
    }
    SECTION("truncated parameters") {
        auto bytes = good;
        bytes.resize(bytes.size() - 64);
        dump(path, bytes);
        REQUIRE_THROWS_WITH(load_checkpoint<double>(path),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("flipped parameter byte trips the fingerprint") {
        auto bytes = good;
        bytes[bytes.size() - 9] ^= 0x40;
        dump(path, bytes);
        REQUIRE_THROWS_WITH(load_checkpoint<double>(path),
                            Catch::Matchers::ContainsSubstring("fingerprint mismatch"));
    }
    SECTION("garbled JSON header") {
        auto bytes = good;
        bytes[24] = 'X';  // stomp the header's opening brace
        dump(path, bytes);
        REQUIRE_THROWS_AS(load_checkpoint<double>(path), FormatError);
    }
    SECTION("implausible header length") {
        auto bytes = good;
        const std::uint64_t huge = ~0ull / 2;
        std::memcpy(bytes.data() + 16, &huge, sizeof(huge));
        dump(path, bytes);
        REQUIRE_THROWS_AS(load_checkpoint<double>(path), FormatError);
    }
}

TEST_CASE("checkpoint without normalization stats names the missing field") {
    const auto dir = fresh_dir("nostats");
    Vae<double> model(tiny_config(), 41);
    const auto path = dir / "model.bin";
    save_checkpoint(path, model, NormStats{});
    auto bytes = slurp(path);

    // surgically rewrite the JSON header without normalization_stats
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 16, sizeof(header_len));
    const std::size_t header_off = 24;
    nlohmann::json header =
        nlohmann::json::parse(std::string(bytes.data() + header_off, header_len));
    header.erase("normalization_stats");
    const std::string hs = header.dump();
    std::vector<char> rebuilt(bytes.begin(), bytes.begin() + header_off);
    const std::uint64_t new_len = hs.size();
    std::memcpy(rebuilt.data() + 16, &new_len, sizeof(new_len));
    rebuilt.insert(rebuilt.end(), hs.begin(), hs.end());
    rebuilt.insert(rebuilt.end(), bytes.begin() + header_off + header_len, bytes.end());
    dump(path, rebuilt);

    REQUIRE_THROWS_WITH(load_checkpoint<double>(path),
                        Catch::Matchers::ContainsSubstring("normalization_stats"));
}
