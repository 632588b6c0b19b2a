#include "pfx/kernels.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace pfx::kernels {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <class T>
T gelu_value(T x) {
  const T u = T(kGeluC) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_grad(T x) {
  const T u = T(kGeluC) * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = T(kGeluC) * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace

template <class T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> w, std::span<const T> b,
                    int rows, int in_dim, int out_dim) {
  MMap<T> y(out.data(), rows, out_dim);
  y.noalias() = CMap<T>(in.data(), rows, in_dim) * CMap<T>(w.data(), in_dim, out_dim);
  if (!b.empty()) y.rowwise() += Eigen::Map<const RowVec<T>>(b.data(), out_dim);
}

template <class T>
void linear_backward(std::span<T> d_in, std::span<T> d_w, std::span<T> d_b, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> w, int rows, int in_dim, int out_dim) {
  CMap<T> dy(d_out.data(), rows, out_dim);
  if (!d_in.empty()) MMap<T>(d_in.data(), rows, in_dim).noalias() = dy * CMap<T>(w.data(), in_dim, out_dim).transpose();
  if (!d_w.empty())
    MMap<T>(d_w.data(), in_dim, out_dim).noalias() += CMap<T>(in.data(), rows, in_dim).transpose() * dy;
  if (!d_b.empty()) Eigen::Map<RowVec<T>>(d_b.data(), out_dim) += dy.colwise().sum();
}

template <class T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int rows, int dim) {
#pragma omp parallel for schedule(static) if (rows * dim > 16384)
  for (int r = 0; r < rows; ++r) {
    const T* x = in.data() + static_cast<std::size_t>(r) * dim;
    T m = 0;
    for (int i = 0; i < dim; ++i) m += x[i];
    m /= dim;
    T var = 0;
    for (int i = 0; i < dim; ++i) var += (x[i] - m) * (x[i] - m);
    var /= dim;
    const T s = T(1) / std::sqrt(var + T(kLnEps));
    T* y = out.data() + static_cast<std::size_t>(r) * dim;
    for (int i = 0; i < dim; ++i) y[i] = (x[i] - m) * s * gamma[i] + beta[i];
    mean[r] = m;
    rstd[r] = s;
  }
}

template <class T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int rows, int dim) {
#pragma omp parallel for schedule(static) if (rows * dim > 16384)
  for (int r = 0; r < rows; ++r) {
    const T* x = in.data() + static_cast<std::size_t>(r) * dim;
    const T* dy = d_out.data() + static_cast<std::size_t>(r) * dim;
    T* dx = d_in.data() + static_cast<std::size_t>(r) * dim;
    const T m = mean[r], s = rstd[r];
    T sum_g = 0, sum_gx = 0;
    for (int i = 0; i < dim; ++i) {
      const T g = dy[i] * gamma[i];
      sum_g += g;
      sum_gx += g * (x[i] - m) * s;
    }
    sum_g /= dim;
    sum_gx /= dim;
    for (int i = 0; i < dim; ++i) {
      const T xhat = (x[i] - m) * s;
      dx[i] += s * (dy[i] * gamma[i] - sum_g - xhat * sum_gx);
    }
  }
  if (d_gamma.empty() && d_beta.empty()) return;
  for (int r = 0; r < rows; ++r) {
    const T* x = in.data() + static_cast<std::size_t>(r) * dim;
    const T* dy = d_out.data() + static_cast<std::size_t>(r) * dim;
    for (int i = 0; i < dim; ++i) {
      if (!d_gamma.empty()) d_gamma[i] += dy[i] * (x[i] - mean[r]) * rstd[r];
      if (!d_beta.empty()) d_beta[i] += dy[i];
    }
  }
}

template <class T>
void gelu_forward(std::span<T> out, std::span<const T> in) {
  const auto n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static) if (n > 65536)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = gelu_value(in[i]);
}

template <class T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in) {
  const auto n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static) if (n > 65536)
  for (std::ptrdiff_t i = 0; i < n; ++i) d_in[i] = d_out[i] * gelu_grad(in[i]);
}

template <class T>
void attention_forward(std::span<T> out, std::span<T> probs, std::span<const T> q, int q_stride,
                       std::span<const T> k, std::span<const T> v, int n, int key_len, int dim, int heads) {
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  const int past = key_len - n;
#pragma omp parallel for collapse(2) schedule(static) if (n * key_len * heads > 32768)
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      const T* qi = q.data() + static_cast<std::size_t>(i) * q_stride + h * hd;
      T* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * key_len;
      const int last = past + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j <= last; ++j) {
        const T* kj = k.data() + static_cast<std::size_t>(j) * dim + h * hd;
        T dot = 0;
        for (int c = 0; c < hd; ++c) dot += qi[c] * kj[c];
        p[j] = dot * scale;
        mx = std::max(mx, p[j]);
      }
      T z = 0;
      for (int j = 0; j <= last; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      const T inv = T(1) / z;
      for (int j = 0; j <= last; ++j) p[j] *= inv;
      for (int j = last + 1; j < key_len; ++j) p[j] = 0;
      T* o = out.data() + static_cast<std::size_t>(i) * dim + h * hd;
      for (int c = 0; c < hd; ++c) o[c] = 0;
      for (int j = 0; j <= last; ++j) {
        const T* vj = v.data() + static_cast<std::size_t>(j) * dim + h * hd;
        const T pj = p[j];
        for (int c = 0; c < hd; ++c) o[c] += pj * vj[c];
      }
    }
  }
}

template <class T>
void attention_backward(std::span<T> d_q, std::span<T> d_k, std::span<T> d_v, std::span<const T> d_out,
                        std::span<const T> probs, std::span<const T> q, int q_stride, std::span<const T> k,
                        std::span<const T> v, int n, int key_len, int dim, int heads) {
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  const int past = key_len - n;
  // Heads touch disjoint column ranges of d_k/d_v, so the head loop is the
  // race-free parallel axis.
#pragma omp parallel for schedule(static) if (n * key_len * heads > 32768)
  for (int h = 0; h < heads; ++h) {
    std::vector<T> dp(static_cast<std::size_t>(key_len));
    for (int i = 0; i < n; ++i) {
      const int last = past + i;
      const T* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * key_len;
      const T* go = d_out.data() + static_cast<std::size_t>(i) * dim + h * hd;
      const T* qi = q.data() + static_cast<std::size_t>(i) * q_stride + h * hd;
      T* dqi = d_q.data() + static_cast<std::size_t>(i) * q_stride + h * hd;
      T acc = 0;
      for (int j = 0; j <= last; ++j) {
        const T* vj = v.data() + static_cast<std::size_t>(j) * dim + h * hd;
        T* dvj = d_v.data() + static_cast<std::size_t>(j) * dim + h * hd;
        T dot = 0;
        for (int c = 0; c < hd; ++c) {
          dot += go[c] * vj[c];
          dvj[c] += p[j] * go[c];
        }
        dp[j] = dot;
        acc += p[j] * dot;
      }
      for (int c = 0; c < hd; ++c) dqi[c] = 0;
      for (int j = 0; j <= last; ++j) {
        const T ds = p[j] * (dp[j] - acc) * scale;
        const T* kj = k.data() + static_cast<std::size_t>(j) * dim + h * hd;
        T* dkj = d_k.data() + static_cast<std::size_t>(j) * dim + h * hd;
        for (int c = 0; c < hd; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
}

template <class T>
void log_softmax_rows(std::span<T> out, std::span<const T> in, int rows, int cols) {
#pragma omp parallel for schedule(static) if (rows * cols > 65536)
  for (int r = 0; r < rows; ++r) {
    const T* x = in.data() + static_cast<std::size_t>(r) * cols;
    T* y = out.data() + static_cast<std::size_t>(r) * cols;
    T mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    T z = 0;
    for (int c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const T lz = mx + std::log(z);
    for (int c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
}

namespace reference {

template <class T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> w, std::span<const T> b,
                    int rows, int in_dim, int out_dim) {
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out_dim; ++o) {
      T acc = b.empty() ? T(0) : b[o];
      for (int i = 0; i < in_dim; ++i)
        acc += in[static_cast<std::size_t>(r) * in_dim + i] * w[static_cast<std::size_t>(i) * out_dim + o];
      out[static_cast<std::size_t>(r) * out_dim + o] = acc;
    }
}

template <class T>
void linear_backward(std::span<T> d_in, std::span<T> d_w, std::span<T> d_b, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> w, int rows, int in_dim, int out_dim) {
  for (int r = 0; r < rows; ++r) {
    for (int i = 0; i < in_dim && !d_in.empty(); ++i) {
      T acc = 0;
      for (int o = 0; o < out_dim; ++o)
        acc += d_out[static_cast<std::size_t>(r) * out_dim + o] * w[static_cast<std::size_t>(i) * out_dim + o];
      d_in[static_cast<std::size_t>(r) * in_dim + i] = acc;
    }
    for (int o = 0; o < out_dim; ++o) {
      const T g = d_out[static_cast<std::size_t>(r) * out_dim + o];
      if (!d_b.empty()) d_b[o] += g;
      if (!d_w.empty())
        for (int i = 0; i < in_dim; ++i)
          d_w[static_cast<std::size_t>(i) * out_dim + o] += in[static_cast<std::size_t>(r) * in_dim + i] * g;
    }
  }
}

template <class T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int rows, int dim) {
  for (int r = 0; r < rows; ++r) {
    T m = 0, var = 0;
    for (int i = 0; i < dim; ++i) m += in[r * dim + i];
    m /= dim;
    for (int i = 0; i < dim; ++i) var += (in[r * dim + i] - m) * (in[r * dim + i] - m);
    var /= dim;
    const T s = T(1) / std::sqrt(var + T(kLnEps));
    for (int i = 0; i < dim; ++i) out[r * dim + i] = (in[r * dim + i] - m) * s * gamma[i] + beta[i];
    mean[r] = m;
    rstd[r] = s;
  }
}

template <class T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int rows, int dim) {
  // Direct Jacobian-vector product, O(dim^2) per row.
  for (int r = 0; r < rows; ++r) {
    const T s = rstd[r];
    for (int j = 0; j < dim; ++j) {
      T acc = 0;
      const T xhat_j = (in[r * dim + j] - mean[r]) * s;
      for (int i = 0; i < dim; ++i) {
        const T xhat_i = (in[r * dim + i] - mean[r]) * s;
        const T jac = s * ((i == j ? T(1) : T(0)) - T(1) / dim - xhat_i * xhat_j / dim);
        acc += d_out[r * dim + i] * gamma[i] * jac;
      }
      d_in[r * dim + j] += acc;
      if (!d_gamma.empty()) d_gamma[j] += d_out[r * dim + j] * xhat_j;
      if (!d_beta.empty()) d_beta[j] += d_out[r * dim + j];
    }
  }
}

template <class T>
void gelu_forward(std::span<T> out, std::span<const T> in) {
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = gelu_value(in[i]);
}

template <class T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in) {
  for (std::size_t i = 0; i < in.size(); ++i) d_in[i] = d_out[i] * gelu_grad(in[i]);
}

template <class T>
void attention_forward(std::span<T> out, std::span<T> probs, std::span<const T> q, int q_stride,
                       std::span<const T> k, std::span<const T> v, int n, int key_len, int dim, int heads) {
  const int hd = dim / heads;
  const int past = key_len - n;
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      T* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * key_len;
      T z = 0;
      for (int j = 0; j < key_len; ++j) {
        if (j > past + i) {
          p[j] = 0;
          continue;
        }
        T dot = 0;
        for (int c = 0; c < hd; ++c) dot += q[i * q_stride + h * hd + c] * k[j * dim + h * hd + c];
        p[j] = std::exp(dot / std::sqrt(T(hd)));
        z += p[j];
      }
      for (int j = 0; j < key_len; ++j) p[j] /= z;
      for (int c = 0; c < hd; ++c) {
        T acc = 0;
        for (int j = 0; j < key_len; ++j) acc += p[j] * v[j * dim + h * hd + c];
        out[i * dim + h * hd + c] = acc;
      }
    }
}

template <class T>
void attention_backward(std::span<T> d_q, std::span<T> d_k, std::span<T> d_v, std::span<const T> d_out,
                        std::span<const T> probs, std::span<const T> q, int q_stride, std::span<const T> k,
                        std::span<const T> v, int n, int key_len, int dim, int heads) {
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      const T* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * key_len;
      for (int c = 0; c < hd; ++c) d_q[i * q_stride + h * hd + c] = 0;
      for (int j = 0; j < key_len; ++j) {
        // d score_j = p_j * (dp_j - sum_l p_l dp_l)
        T dpj = 0;
        for (int c = 0; c < hd; ++c) dpj += d_out[i * dim + h * hd + c] * v[j * dim + h * hd + c];
        T sum = 0;
        for (int l = 0; l < key_len; ++l) {
          T dpl = 0;
          for (int c = 0; c < hd; ++c) dpl += d_out[i * dim + h * hd + c] * v[l * dim + h * hd + c];
          sum += p[l] * dpl;
        }
        const T ds = p[j] * (dpj - sum) * scale;
        for (int c = 0; c < hd; ++c) {
          d_v[j * dim + h * hd + c] += p[j] * d_out[i * dim + h * hd + c];
          d_q[i * q_stride + h * hd + c] += ds * k[j * dim + h * hd + c];
          d_k[j * dim + h * hd + c] += ds * q[i * q_stride + h * hd + c];
        }
      }
    }
}

template <class T>
void log_softmax_rows(std::span<T> out, std::span<const T> in, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    T z = 0;
    for (int c = 0; c < cols; ++c) z += std::exp(in[r * cols + c]);
    for (int c = 0; c < cols; ++c) out[r * cols + c] = in[r * cols + c] - std::log(z);
  }
}

}  // namespace reference

#define PFX_INSTANTIATE_KERNELS(NS, T)                                                                            \
  template void NS::linear_forward<T>(std::span<T>, std::span<const T>, std::span<const T>, std::span<const T>, \
                                      int, int, int);                                                           \
  template void NS::linear_backward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,            \
                                       std::span<const T>, std::span<const T>, int, int, int);                  \
  template void NS::layernorm_forward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,          \
                                         std::span<const T>, std::span<const T>, int, int);                     \
  template void NS::layernorm_backward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,         \
                                          std::span<const T>, std::span<const T>, std::span<const T>,           \
                                          std::span<const T>, int, int);                                        \
  template void NS::gelu_forward<T>(std::span<T>, std::span<const T>);                                          \
  template void NS::gelu_backward<T>(std::span<T>, std::span<const T>, std::span<const T>);                     \
  template void NS::attention_forward<T>(std::span<T>, std::span<T>, std::span<const T>, int,                   \
                                         std::span<const T>, std::span<const T>, int, int, int, int);           \
  template void NS::attention_backward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,         \
                                          std::span<const T>, std::span<const T>, int, std::span<const T>,      \
                                          std::span<const T>, int, int, int, int);                              \
  template void NS::log_softmax_rows<T>(std::span<T>, std::span<const T>, int, int);

}  // namespace pfx::kernels

PFX_INSTANTIATE_KERNELS(pfx::kernels, float)
PFX_INSTANTIATE_KERNELS(pfx::kernels, double)
PFX_INSTANTIATE_KERNELS(pfx::kernels::reference, float)
PFX_INSTANTIATE_KERNELS(pfx::kernels::reference, double)
