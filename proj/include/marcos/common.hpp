#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace marcos {

// Error taxonomy shared by the library and the CLI. The CLI maps kinds to
// process exit codes (usage=1, precondition=2, everything else=3).
enum class ErrorKind {
    invalid_argument,
    precondition,
    parse,
    io,
    numeric,
    usage,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

// FNV-1a, used for content hashes of files, configs and checkpoints.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

std::string hex64(std::uint64_t v);

// Wall-clock stopwatch for the timing reports.
class Stopwatch {
public:
    Stopwatch() : start_(clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(clock::now() - start_).count();
    }
    void reset() { start_ = clock::now(); }

private:
    using clock = std::chrono::steady_clock;
    clock::time_point start_;
};

// Static-partition parallel loop. Each worker owns a contiguous index range,
// so any per-worker accumulation that is later reduced in worker order is
// deterministic for a fixed worker count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, int)>& body);

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace marcos
