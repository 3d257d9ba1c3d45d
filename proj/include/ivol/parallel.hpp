#ifndef IVOL_PARALLEL_HPP
#define IVOL_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace ivol {

// Runs fn(i) for i in [0, count) across up to n_threads workers in contiguous
// chunks.  Each index must write only to its own output slot; under that
// discipline the result is identical for every thread count.  The first
// exception thrown by a worker is rethrown on the calling thread.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t n_threads, Fn&& fn) {
    if (n_threads == 0) throw std::invalid_argument("parallel_for: thread count must be positive");
    const std::size_t workers = std::min(n_threads, count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }

    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn, &first_error, &error_mutex] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                const std::lock_guard<std::mutex> hold(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace ivol

#endif
