#include "caps/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace caps {

namespace {

std::atomic<int> g_max_workers{0};

int env_workers() {
    const char* s = std::getenv("CAPS_THREADS");
    if (s == nullptr || *s == '\0') return 0;
    const int n = std::atoi(s);
    return n > 0 ? n : 0;
}

}  // namespace

void set_max_workers(int n) { g_max_workers.store(n < 0 ? 0 : n); }

int max_workers() {
    int n = g_max_workers.load();
    if (n == 0) n = env_workers();
    if (n == 0) n = static_cast<int>(std::thread::hardware_concurrency());
    return std::max(1, n);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& chunk_fn) {
    if (n == 0) return;
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(max_workers()), n);
    if (workers <= 1) {
        chunk_fn(0, n);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    const std::size_t base = n / workers;
    const std::size_t rem = n % workers;
    std::size_t begin = 0;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t len = base + (w < rem ? 1 : 0);
        const std::size_t end = begin + len;
        threads.emplace_back([&chunk_fn, begin, end] { chunk_fn(begin, end); });
        begin = end;
    }
    for (auto& t : threads) t.join();
}

}  // namespace caps
