#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace repq {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Rounds halfway cases to the nearest even integer, independent of the
// floating-point environment.
template <typename T>
inline T round_half_even(T x) {
    T f = std::floor(x);
    T r = x - f;
    if (r > T(0.5)) return f + T(1);
    if (r < T(0.5)) return f;
    // tie: pick the even neighbour
    T lo = f, hi = f + T(1);
    return std::fmod(lo, T(2)) == T(0) ? lo : hi;
}

}  // namespace repq
