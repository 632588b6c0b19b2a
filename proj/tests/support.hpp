#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pfx/model.hpp"

namespace pfx::test {

inline ModelConfig tiny_config(int vocab = 12) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.vocab_size = vocab;
  c.max_positions = 48;
  return c;
}

template <class T>
Transformer<T> tiny_model(std::uint64_t seed, int vocab = 12, double std = 0.3) {
  return Transformer<float>::random(tiny_config(vocab), seed, std).template cast<T>();
}

template <class T>
PrefixKV<T> random_prefix(int length, int dim, std::uint64_t seed, double std = 0.5) {
  Rng rng(seed);
  std::vector<T> data(static_cast<std::size_t>(length) * dim);
  for (auto& v : data) v = static_cast<T>(std * rng.normal());
  return PrefixKV<T>(length, dim, std::move(data));
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = std * rng.normal();
  return v;
}

inline TokenSequence random_tokens(int n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence t(n);
  for (auto& x : t) x = 3 + rng.below(vocab - 3);
  return t;
}

// Central differences on selected coordinates of `x`; returns the relative
// error ||analytic - numeric|| / max(||analytic||, ||numeric||) over them.
struct FdResult {
  double rel_error = 0;
  double norm = 0;
};

inline FdResult fd_check(std::span<double> x, std::span<const double> analytic, const std::function<double()>& f,
                         const std::vector<std::size_t>& coords, double h = 1e-5) {
  double diff = 0, na = 0, nn = 0;
  for (auto i : coords) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f();
    x[i] = orig - h;
    const double fm = f();
    x[i] = orig;
    const double num = (fp - fm) / (2 * h);
    diff += (num - analytic[i]) * (num - analytic[i]);
    na += analytic[i] * analytic[i];
    nn += num * num;
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  return {denom == 0 ? 0.0 : std::sqrt(diff) / denom, std::sqrt(na)};
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  Rng rng(seed);
  std::vector<std::size_t> out;
  while (out.size() < count) {
    const auto i = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
    if (std::find(out.begin(), out.end(), i) == out.end()) out.push_back(i);
  }
  return out;
}

}  // namespace pfx::test
