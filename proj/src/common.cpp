#include "marcos/common.hpp"

#include <algorithm>
#include <cstdio>
#include <mutex>

namespace marcos {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, int)>& body) {
    int workers = resolve_threads(threads);
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i, 0);
        return;
    }
    if (static_cast<std::size_t>(workers) > n) workers = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    std::size_t chunk = (n + static_cast<std::size_t>(workers) - 1) / static_cast<std::size_t>(workers);
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (int w = 0; w < workers; ++w) {
        std::size_t lo = static_cast<std::size_t>(w) * chunk;
        std::size_t hi = std::min(n, lo + chunk);
        pool.emplace_back([&, lo, hi, w] {
            try {
                for (std::size_t i = lo; i < hi; ++i) body(i, w);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace marcos
