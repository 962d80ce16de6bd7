#pragma once

#include "repq/counter.hpp"
#include "repq/kernels.hpp"
#include "repq/tensor.hpp"

namespace repq {

// Alternate route for valid-padding convolution: slice the input once per
// kernel cell, flatten batch/height/width, multiply by that cell's [IN,OUT]
// matrix and accumulate:
//
//   (X*W)^F = sum_{i<Kh, j<Kw} X[:, i:H-Kh+1+i, j:D-Kw+1+j, :]^F . W[i,j]
//
// Used as an equivalence oracle against conv2d; no gradient support.
template <typename T>
Tensor<T> conv_as_matmul_sum(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec) {
    if (spec.padding != Padding::Valid)
        throw std::invalid_argument("conv_as_matmul_sum: only valid padding is supported");
    check_finite(x, "conv_as_matmul_sum");
    check_finite(w, "conv_as_matmul_sum");
    auto d = kernels::conv_dims(x.shape(), w.shape(), spec);
    const int64_t rows = d.B * d.OH * d.OW;
    std::vector<T> acc(rows * d.OUT, T(0));
    std::vector<T> slice(rows * d.IN);
    for (int64_t i = 0; i < d.Kh; ++i) {
        for (int64_t j = 0; j < d.Kw; ++j) {
            // X[:, i:OH+i, j:OW+j, :] flattened row-major to [rows, IN]
            int64_t r = 0;
            for (int64_t b = 0; b < d.B; ++b)
                for (int64_t h = 0; h < d.OH; ++h)
                    for (int64_t v = 0; v < d.OW; ++v, ++r)
                        for (int64_t c = 0; c < d.IN; ++c)
                            slice[r * d.IN + c] =
                                x.data()[((b * d.H + h + i) * d.D + v + j) * d.IN + c];
            const T* wij = w.data().data() + (i * d.Kw + j) * d.IN * d.OUT;
            mul_count_add(uint64_t(rows * d.IN * d.OUT));
            for (int64_t rr = 0; rr < rows; ++rr)
                for (int64_t c = 0; c < d.IN; ++c) {
                    const T xv = slice[rr * d.IN + c];
                    for (int64_t o = 0; o < d.OUT; ++o)
                        acc[rr * d.OUT + o] += xv * wij[c * d.OUT + o];
                }
        }
    }
    return Tensor<T>({d.B, d.OH, d.OW, d.OUT}, std::move(acc));
}

}  // namespace repq
