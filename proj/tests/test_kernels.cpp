#include <doctest.h>

#include <omp.h>

#include "pfx/kernels.hpp"
#include "support.hpp"

using namespace pfx;
namespace K = pfx::kernels;
namespace R = pfx::kernels::reference;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

constexpr double kTol = 1e-12;

}  // namespace

TEST_CASE("linear forward and backward match the serial reference") {
  const int rows = 7, in = 13, out = 9;
  const auto x = test::random_vector(rows * in, 1);
  const auto w = test::random_vector(in * out, 2);
  const auto b = test::random_vector(out, 3);
  const auto dy = test::random_vector(rows * out, 4);
  std::vector<double> y1(rows * out), y2(rows * out);
  K::linear_forward<double>(y1, x, w, b, rows, in, out);
  R::linear_forward<double>(y2, x, w, b, rows, in, out);
  CHECK(max_abs_diff(y1, y2) < kTol);

  std::vector<double> dx1(rows * in, 7.0), dx2(rows * in, -3.0);
  std::vector<double> dw1(in * out, 0.5), dw2(in * out, 0.5), db1(out, 1.0), db2(out, 1.0);
  K::linear_backward<double>(dx1, dw1, db1, dy, x, w, rows, in, out);
  R::linear_backward<double>(dx2, dw2, db2, dy, x, w, rows, in, out);
  CHECK(max_abs_diff(dx1, dx2) < kTol);
  CHECK(max_abs_diff(dw1, dw2) < kTol);
  CHECK(max_abs_diff(db1, db2) < kTol);
}

TEST_CASE("layernorm forward and backward match the serial reference") {
  const int rows = 5, dim = 11;
  const auto x = test::random_vector(rows * dim, 5, 2.0);
  const auto g = test::random_vector(dim, 6);
  const auto be = test::random_vector(dim, 7);
  const auto dy = test::random_vector(rows * dim, 8);
  std::vector<double> y1(rows * dim), y2(rows * dim), m1(rows), m2(rows), r1(rows), r2(rows);
  K::layernorm_forward<double>(y1, m1, r1, x, g, be, rows, dim);
  R::layernorm_forward<double>(y2, m2, r2, x, g, be, rows, dim);
  CHECK(max_abs_diff(y1, y2) < kTol);
  CHECK(max_abs_diff(r1, r2) < kTol);

  std::vector<double> dx1(rows * dim, 1.0), dx2(rows * dim, 1.0), dg1(dim), dg2(dim), db1(dim), db2(dim);
  K::layernorm_backward<double>(dx1, dg1, db1, dy, x, m1, r1, g, rows, dim);
  R::layernorm_backward<double>(dx2, dg2, db2, dy, x, m2, r2, g, rows, dim);
  CHECK(max_abs_diff(dx1, dx2) < kTol);
  CHECK(max_abs_diff(dg1, dg2) < kTol);
  CHECK(max_abs_diff(db1, db2) < kTol);
}

TEST_CASE("gelu matches the reference and its finite differences") {
  const auto x = test::random_vector(64, 9, 2.0);
  const auto dy = test::random_vector(64, 10);
  std::vector<double> y1(64), y2(64), d1(64), d2(64);
  K::gelu_forward<double>(y1, x);
  R::gelu_forward<double>(y2, x);
  CHECK(max_abs_diff(y1, y2) < kTol);
  K::gelu_backward<double>(d1, dy, x);
  R::gelu_backward<double>(d2, dy, x);
  CHECK(max_abs_diff(d1, d2) < kTol);
  for (int i = 0; i < 64; ++i) {
    const double h = 1e-6;
    std::vector<double> a{x[i] + h}, b{x[i] - h}, ya(1), yb(1);
    R::gelu_forward<double>(ya, a);
    R::gelu_forward<double>(yb, b);
    CHECK(d2[i] == doctest::Approx(dy[i] * (ya[0] - yb[0]) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("attention with a strided query and prefix keys matches the reference") {
  const int n = 5, prefix = 3, key_len = n + prefix, dim = 12, heads = 3, stride = 3 * dim;
  const auto qkv = test::random_vector(n * stride, 11);
  const auto k = test::random_vector(key_len * dim, 12);
  const auto v = test::random_vector(key_len * dim, 13);
  const auto dy = test::random_vector(n * dim, 14);
  std::vector<double> o1(n * dim), o2(n * dim), p1(heads * n * key_len), p2(heads * n * key_len);
  K::attention_forward<double>(o1, p1, qkv, stride, k, v, n, key_len, dim, heads);
  R::attention_forward<double>(o2, p2, qkv, stride, k, v, n, key_len, dim, heads);
  CHECK(max_abs_diff(o1, o2) < kTol);
  CHECK(max_abs_diff(p1, p2) < kTol);

  std::vector<double> dq1(n * stride, 0.0), dq2(n * stride, 0.0);
  std::vector<double> dk1(key_len * dim, 0.25), dk2(key_len * dim, 0.25), dv1(key_len * dim), dv2(key_len * dim);
  K::attention_backward<double>(dq1, dk1, dv1, dy, p1, qkv, stride, k, v, n, key_len, dim, heads);
  R::attention_backward<double>(dq2, dk2, dv2, dy, p2, qkv, stride, k, v, n, key_len, dim, heads);
  CHECK(max_abs_diff(dq1, dq2) < kTol);
  CHECK(max_abs_diff(dk1, dk2) < kTol);
  CHECK(max_abs_diff(dv1, dv2) < kTol);
}

TEST_CASE("attention is causal: queries never see later keys") {
  const int n = 4, dim = 4, heads = 1;
  const auto q = test::random_vector(n * dim, 15);
  auto k = test::random_vector(n * dim, 16);
  auto v = test::random_vector(n * dim, 17);
  std::vector<double> o1(n * dim), o2(n * dim), p(heads * n * n);
  K::attention_forward<double>(o1, p, q, dim, k, v, n, n, dim, heads);
  for (int j = 0; j < dim; ++j) {
    k[3 * dim + j] += 5;
    v[3 * dim + j] -= 5;
  }
  K::attention_forward<double>(o2, p, q, dim, k, v, n, n, dim, heads);
  for (int i = 0; i < 3 * dim; ++i) CHECK(o1[i] == o2[i]);
}

TEST_CASE("log softmax rows normalize") {
  const int rows = 4, cols = 17;
  const auto x = test::random_vector(rows * cols, 18, 5.0);
  std::vector<double> y1(rows * cols), y2(rows * cols);
  K::log_softmax_rows<double>(y1, x, rows, cols);
  R::log_softmax_rows<double>(y2, x, rows, cols);
  CHECK(max_abs_diff(y1, y2) < kTol);
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += std::exp(y1[r * cols + c]);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("parallel kernels do not depend on the thread count") {
  const int rows = 33, in = 40, out = 24;
  std::vector<float> x(rows * in), w(in * out), b(out), y1(rows * out), y4(rows * out);
  Rng rng(19);
  for (auto* v : {&x, &w, &b})
    for (auto& e : *v) e = static_cast<float>(rng.normal());
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  K::linear_forward<float>(y1, x, w, b, rows, in, out);
  omp_set_num_threads(4);
  K::linear_forward<float>(y4, x, w, b, rows, in, out);
  omp_set_num_threads(saved);
  CHECK(y1 == y4);
}
