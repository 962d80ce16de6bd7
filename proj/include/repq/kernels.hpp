#pragma once

#include <cstdint>

#include "repq/common.hpp"

namespace repq {

enum class Padding { Valid, Same };

// Stride is fixed to 1; the merge algebra relies on dense stride-1 windows.
struct ConvSpec {
    int64_t kernel_h = 1;
    int64_t kernel_w = 1;
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    Padding padding = Padding::Valid;
    int64_t stride = 1;
};

namespace kernels {

// Resolved geometry for one conv2d call.
struct ConvDims {
    int64_t B, H, D, IN;    // input  [B,H,D,IN]
    int64_t Kh, Kw, OUT;    // weight [Kh,Kw,IN,OUT]
    int64_t OH, OW;         // output spatial dims
    int64_t pad_top, pad_left;
};

ConvDims conv_dims(const Shape& x, const Shape& w, const ConvSpec& spec);

// Serial reference implementations (kept for parity tests and benchmarks)
// and OpenMP variants. Both walk each output element with the identical
// inner accumulation order, so results are bitwise equal and run-to-run
// deterministic at any thread count.
template <typename T>
void conv2d_forward_serial(const T* x, const T* w, T* y, const ConvDims& d);
template <typename T>
void conv2d_forward(const T* x, const T* w, T* y, const ConvDims& d);

template <typename T>
void conv2d_backward_input_serial(const T* gy, const T* w, T* gx, const ConvDims& d);
template <typename T>
void conv2d_backward_input(const T* gy, const T* w, T* gx, const ConvDims& d);

template <typename T>
void conv2d_backward_weight_serial(const T* x, const T* gy, T* gw, const ConvDims& d);
template <typename T>
void conv2d_backward_weight(const T* x, const T* gy, T* gw, const ConvDims& d);

template <typename T>
void matmul_serial(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N);
template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N);

// Runtime switch between the serial and OpenMP paths (default: parallel
// when compiled with OpenMP).
bool parallel_enabled();
void set_parallel(bool on);

}  // namespace kernels
}  // namespace repq
