#pragma once

#include <atomic>
#include <cstdint>

namespace repq {

// Global multiply/divide counter for the numeric kernels. Each kernel adds
// its exact multiply count once per call, so the counter stays cheap and
// deterministic regardless of thread count.
inline std::atomic<uint64_t>& mul_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

inline void mul_count_add(uint64_t n) { mul_counter().fetch_add(n, std::memory_order_relaxed); }
inline uint64_t mul_count() { return mul_counter().load(std::memory_order_relaxed); }
inline void mul_count_reset() { mul_counter().store(0, std::memory_order_relaxed); }

// Measures the multiplies issued between construction and elapsed().
struct MulCountScope {
    uint64_t start;
    MulCountScope() : start(mul_count()) {}
    uint64_t elapsed() const { return mul_count() - start; }
};

}  // namespace repq
