#include "iwm/threadpool.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace iwm {

int num_workers() {
    static int n = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("IWM_NUM_WORKERS")) {
            int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn_range) {
    if (n <= 0) return;
    int workers = num_workers();
    if (workers <= 1 || n == 1) {
        fn_range(0, n);
        return;
    }
    // chunk geometry is a function of n only, never of the worker count
    int64_t chunk = std::max<int64_t>(1, n / (4 * workers));
    std::atomic<int64_t> next{0};
    auto run = [&] {
        for (;;) {
            int64_t begin = next.fetch_add(chunk);
            if (begin >= n) break;
            fn_range(begin, std::min(begin + chunk, n));
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(workers - 1));
    for (int i = 0; i < workers - 1; ++i) threads.emplace_back(run);
    run();
    for (auto& t : threads) t.join();
}

} // namespace iwm
