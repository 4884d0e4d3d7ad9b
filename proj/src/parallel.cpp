#include "sca/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace sca {

namespace {

int initial_threads() {
    if (const char* env = std::getenv("SCA_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

std::atomic<int> g_max_threads{initial_threads()};

}  // namespace

int max_threads() { return g_max_threads.load(std::memory_order_relaxed); }

void set_max_threads(int n) {
    g_max_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed);
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    const std::int64_t count = end - begin;
    if (count <= 0) return;
    const int threads = std::min<std::int64_t>(max_threads(), count);
    if (threads <= 1 || count < 4) {
        fn(begin, end);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(threads) - 1);
    const std::int64_t chunk = (count + threads - 1) / threads;
    for (int t = 1; t < threads; ++t) {
        std::int64_t lo = begin + chunk * t;
        std::int64_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(fn, lo, hi);
    }
    fn(begin, std::min(end, begin + chunk));
    for (auto& th : pool) th.join();
}

}  // namespace sca
