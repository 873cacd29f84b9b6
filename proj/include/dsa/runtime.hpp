#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dsa {

/// Keeps large freed blocks in the heap instead of returning them to the OS. Activation tensors of
/// tens of megabytes are allocated and dropped every step; without this each one page-faults afresh.
inline void tune_allocator()
{
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written to per-index slots.
/// After all workers finish, the exception of the lowest failing index (if any) is rethrown.
template <typename F>
void parallel_for(int n, int jobs, F&& fn)
{
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(n, 0)));
    auto guarded = [&](int i) {
        try {
            fn(i);
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    };
    if (jobs <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) guarded(i);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < std::min(jobs, n); ++w)
            pool.emplace_back([&] {
                for (int i = next++; i < n; i = next++) guarded(i);
            });
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace dsa
