#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace teocc {

/// Per-thread worker budget for the compute kernels. Kernels partition work
/// into disjoint output ranges, so results are bit-identical for any setting.
inline int& thread_count_ref() {
    thread_local int n = 1;
    return n;
}

inline void set_thread_count(int n) {
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    thread_count_ref() = n;
}

inline int thread_count() { return thread_count_ref(); }

/// Run fn(begin, end) over [0, n) split into contiguous chunks.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 1024) {
    const int workers = thread_count();
    if (workers <= 1 || n <= grain) {
        if (n > 0) fn(std::int64_t(0), n);
        return;
    }
    const int chunks = static_cast<int>(std::min<std::int64_t>(workers, (n + grain - 1) / grain));
    const std::int64_t step = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(chunks - 1));
    for (int c = 1; c < chunks; ++c) {
        const std::int64_t b = c * step;
        const std::int64_t e = std::min<std::int64_t>(n, b + step);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(std::int64_t(0), std::min<std::int64_t>(n, step));
    for (auto& t : pool) t.join();
}

}  // namespace teocc
