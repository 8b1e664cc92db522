#include "blockdiff/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace blockdiff {

int thread_count_from_env() {
    const char* env = std::getenv("BLOCKDIFF_THREADS");
    if (!env) {
        return 1;
    }
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

void parallel_for(int n, int threads, const std::function<void(int)>& f) {
    threads = threads < n ? threads : n;
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                f(i);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

}  // namespace blockdiff
