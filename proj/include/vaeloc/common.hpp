// Shared plumbing: error categories, hashing, deterministic parallel loops.
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vaeloc {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments (maps to CLI exit code 2).
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config: " + m) {}
};

/// Non-finite values or failed numerical contracts.
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error("numeric: " + m) {}
};

/// Filesystem-level failures.
struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io: " + m) {}
};

/// Malformed or unsupported file contents.
struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error("format: " + m) {}
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return out;
}

/// Runs fn(begin, end) over [0, n) split into fixed-size chunks. The chunking
/// is independent of the worker count, so callers that keep per-chunk buffers
/// and reduce them in chunk order get results that do not depend on --workers.
inline void parallel_chunks(std::size_t n, std::size_t chunk_size, int workers,
                            const std::function<void(std::size_t chunk_idx,
                                                     std::size_t begin,
                                                     std::size_t end)>& fn) {
    if (n == 0) return;
    if (chunk_size == 0) chunk_size = 1;
    const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
    auto run_chunk = [&](std::size_t ci) {
        const std::size_t b = ci * chunk_size;
        const std::size_t e = std::min(n, b + chunk_size);
        fn(ci, b, e);
    };
    if (workers <= 1 || n_chunks == 1) {
        for (std::size_t ci = 0; ci < n_chunks; ++ci) run_chunk(ci);
        return;
    }
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(workers), n_chunks);
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t ci = t; ci < n_chunks; ci += n_threads) run_chunk(ci);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace vaeloc
