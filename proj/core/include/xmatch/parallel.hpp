#pragma once

#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace xmatch {

// Data-parallel width: min(hardware, XMATCH_THREADS). Used only for
// independent per-item work (encoding, pair scoring); results are written to
// disjoint slots so the outcome is identical at any width.
inline std::size_t parallel_width() {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("XMATCH_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) hw = std::min<std::size_t>(hw, static_cast<std::size_t>(v));
    }
    return hw;
}

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    std::size_t width = std::min(parallel_width(), count);
    if (width <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(width);
    std::size_t chunk = (count + width - 1) / width;
    for (std::size_t w = 0; w < width; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        workers.emplace_back([begin, end, &fn]() {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (std::thread& t : workers) t.join();
}

}  // namespace xmatch
