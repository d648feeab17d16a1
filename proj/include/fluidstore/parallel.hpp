// Minimal index-parallel map over a fixed worker count.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fluidstore::parallel {

/// Evaluate fn(i) for i in [0, n) on `workers` threads. Results are stored by
/// index, so the output does not depend on scheduling. The first exception
/// thrown by any task is rethrown after all workers finish.
template <class Result, class Fn>
std::vector<Result> map_indexed(std::size_t n, int workers, Fn &&fn) {
    std::vector<Result> out(n);
    const auto threads = static_cast<std::size_t>(std::clamp<int>(workers, 1, 256));
    if (threads == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = fn(i);
        return out;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                out[i] = fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error)
                    error = std::current_exception();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < std::min(threads, n); ++t)
            pool.emplace_back(run);
    }
    if (error)
        std::rethrow_exception(error);
    return out;
}

} // namespace fluidstore::parallel
