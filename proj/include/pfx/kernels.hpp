#pragma once

#include <span>

// Dense building blocks of the transformer. Every kernel exists twice:
// `pfx::kernels` is the production path (Eigen GEMM plus OpenMP over rows or
// heads, each thread owning disjoint outputs so results never depend on the
// thread count), `pfx::kernels::reference` is a plain serial loop version kept
// for testing and benchmarking. Both take identical arguments.
//
// Layout conventions: matrices are row-major; a linear layer's weight is
// stored [in_dim x out_dim] so that out = in * W + b.
//
// Attention: `q` holds n query rows with row stride `q_stride` (queries live
// inside a fused qkv buffer). `k`/`v` hold key_len rows of width E. Query i
// sits at absolute key index key_len - n + i and attends to keys 0..that index
// inclusive, so prepended prefix rows are visible to every query.

namespace pfx::kernels {

template <class T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> w, std::span<const T> b,
                    int rows, int in_dim, int out_dim);

/// d_in is overwritten; d_w and d_b are accumulated and may be empty.
template <class T>
void linear_backward(std::span<T> d_in, std::span<T> d_w, std::span<T> d_b, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> w, int rows, int in_dim, int out_dim);

template <class T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int rows, int dim);

/// d_in is accumulated (residual stream); d_gamma/d_beta accumulated, may be empty.
template <class T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int rows, int dim);

template <class T>
void gelu_forward(std::span<T> out, std::span<const T> in);

/// d_in is overwritten.
template <class T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in);

template <class T>
void attention_forward(std::span<T> out, std::span<T> probs, std::span<const T> q, int q_stride,
                       std::span<const T> k, std::span<const T> v, int n, int key_len, int dim, int heads);

/// d_q rows use q_stride and are overwritten; d_k/d_v are accumulated.
template <class T>
void attention_backward(std::span<T> d_q, std::span<T> d_k, std::span<T> d_v, std::span<const T> d_out,
                        std::span<const T> probs, std::span<const T> q, int q_stride, std::span<const T> k,
                        std::span<const T> v, int n, int key_len, int dim, int heads);

/// Row-wise log-softmax.
template <class T>
void log_softmax_rows(std::span<T> out, std::span<const T> in, int rows, int cols);

namespace reference {

template <class T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> w, std::span<const T> b,
                    int rows, int in_dim, int out_dim);
template <class T>
void linear_backward(std::span<T> d_in, std::span<T> d_w, std::span<T> d_b, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> w, int rows, int in_dim, int out_dim);
template <class T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int rows, int dim);
template <class T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int rows, int dim);
template <class T>
void gelu_forward(std::span<T> out, std::span<const T> in);
template <class T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in);
template <class T>
void attention_forward(std::span<T> out, std::span<T> probs, std::span<const T> q, int q_stride,
                       std::span<const T> k, std::span<const T> v, int n, int key_len, int dim, int heads);
template <class T>
void attention_backward(std::span<T> d_q, std::span<T> d_k, std::span<T> d_v, std::span<const T> d_out,
                        std::span<const T> probs, std::span<const T> q, int q_stride, std::span<const T> k,
                        std::span<const T> v, int n, int key_len, int dim, int heads);
template <class T>
void log_softmax_rows(std::span<T> out, std::span<const T> in, int rows, int cols);

}  // namespace reference
}  // namespace pfx::kernels
