#include <doctest.h>

#include "pfx/io.hpp"
#include "pfx/objectives.hpp"
#include "support.hpp"

using namespace pfx;

namespace {

// Straight-line loops written from the architecture description, sharing
// nothing with the library except the parameter layout.
std::vector<double> naive_logits(const Transformer<double>& m, const TokenSequence& tokens,
                                 const PrefixKV<double>* prefix) {
  const auto& c = m.config();
  const int E = c.hidden_size, H = c.num_heads, V = c.vocab_size, hd = E / H;
  const int n = static_cast<int>(tokens.size()), M = prefix ? prefix->length() : 0;
  auto P = [&](const std::string& name) { return m.param(name); };
  using Mat = std::vector<std::vector<double>>;
  auto layernorm = [&](const Mat& x, const std::string& pre) {
    auto g = P(pre + ".g"), b = P(pre + ".b");
    Mat y(x.size(), std::vector<double>(E));
    for (std::size_t i = 0; i < x.size(); ++i) {
      double mu = 0, var = 0;
      for (double v : x[i]) mu += v;
      mu /= E;
      for (double v : x[i]) var += (v - mu) * (v - mu);
      var /= E;
      for (int e = 0; e < E; ++e) y[i][e] = (x[i][e] - mu) / std::sqrt(var + 1e-5) * g[e] + b[e];
    }
    return y;
  };
  auto linear = [&](const Mat& x, const std::string& pre, int out, bool bias = true) {
    auto w = P(pre + ".w");
    const int in = static_cast<int>(x[0].size());
    Mat y(x.size(), std::vector<double>(out, 0.0));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (int o = 0; o < out; ++o) {
        double s = bias ? P(pre + ".b")[o] : 0.0;
        for (int k = 0; k < in; ++k) s += x[i][k] * w[static_cast<std::size_t>(k) * out + o];
        y[i][o] = s;
      }
    return y;
  };
  Mat x(n, std::vector<double>(E));
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < E; ++e)
      x[i][e] = P("wte")[tokens[i] * E + e] + (c.use_positions ? P("wpe")[(M + i) * E + e] : 0.0);
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    const auto qkv = linear(layernorm(x, p + "ln1"), p + "attn.qkv", 3 * E);
    Mat keys, vals;
    for (int j = 0; j < M; ++j) {
      auto k = prefix->key(l, j, E);
      auto v = prefix->value(l, j, E);
      keys.emplace_back(k.begin(), k.end());
      vals.emplace_back(v.begin(), v.end());
    }
    for (int i = 0; i < n; ++i) {
      keys.emplace_back(qkv[i].begin() + E, qkv[i].begin() + 2 * E);
      vals.emplace_back(qkv[i].begin() + 2 * E, qkv[i].end());
    }
    Mat att(n, std::vector<double>(E, 0.0));
    for (int h = 0; h < H; ++h)
      for (int i = 0; i < n; ++i) {
        std::vector<double> s;
        for (int j = 0; j <= M + i; ++j) {
          double d = 0;
          for (int t = 0; t < hd; ++t) d += qkv[i][h * hd + t] * keys[j][h * hd + t];
          s.push_back(d / std::sqrt(static_cast<double>(hd)));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (int j = 0; j <= M + i; ++j)
          for (int t = 0; t < hd; ++t) att[i][h * hd + t] += s[j] / z * vals[j][h * hd + t];
      }
    auto proj = linear(att, p + "attn.proj", E);
    for (int i = 0; i < n; ++i)
      for (int e = 0; e < E; ++e) x[i][e] += proj[i][e];
    auto fc = linear(layernorm(x, p + "ln2"), p + "mlp.fc", 4 * E);
    for (auto& row : fc)
      for (auto& v : row) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    auto out = linear(fc, p + "mlp.proj", E);
    for (int i = 0; i < n; ++i)
      for (int e = 0; e < E; ++e) x[i][e] += out[i][e];
  }
  auto logits = linear(layernorm(x, "lnf"), "lm_head", V, false);
  std::vector<double> flat;
  for (auto& r : logits) flat.insert(flat.end(), r.begin(), r.end());
  return flat;
}

}  // namespace

TEST_CASE("forward matches an independent loop implementation with a prefix") {
  const auto m = test::tiny_model<double>(1);
  const auto prefix = test::random_prefix<double>(2, m.config().activation_dim(), 2);
  const TokenSequence tokens{2, 5, 7, 3};
  const auto got = m.logits(tokens, &prefix);
  const auto want = naive_logits(m, tokens, &prefix);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
  const auto plain = m.logits(tokens, nullptr);
  const auto plain_want = naive_logits(m, tokens, nullptr);
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(plain[i] == doctest::Approx(plain_want[i]).epsilon(1e-6));
}

TEST_CASE("parameter count has a closed form") {
  for (const auto& c : {ModelConfig::desk(), ModelConfig::eval_desk(), test::tiny_config()})
    CHECK(parameter_count(c) == ParamLayout(c).total());
  const auto c = test::tiny_config();
  const std::size_t E = 8, V = 12, P = 48, L = 2;
  CHECK(parameter_count(c) == V * E + P * E + L * (12 * E * E + 13 * E) + 2 * E + E * V);
}

TEST_CASE("logits at position t do not depend on later tokens") {
  const auto m = test::tiny_model<double>(3);
  const auto prefix = test::random_prefix<double>(3, m.config().activation_dim(), 4);
  const TokenSequence a{2, 4, 5, 6, 7}, b{2, 4, 5, 9, 11};
  const auto la = m.logits(a, &prefix), lb = m.logits(b, &prefix);
  for (std::size_t i = 0; i < 3 * 12; ++i) CHECK(la[i] == lb[i]);
}

TEST_CASE("an empty prefix behaves like no prefix") {
  const auto m = test::tiny_model<double>(5);
  const PrefixKV<double> empty(0, m.config().activation_dim());
  const TokenSequence t{2, 4, 8};
  CHECK(m.logits(t, &empty) == m.logits(t, nullptr));
}

TEST_CASE("a zero LM head gives uniform predictions") {
  auto m = test::tiny_model<double>(6);
  for (auto& v : m.param("lm_head.w")) v = 0;
  const auto s = m.sequence_log_prob({5, 6, 7}, nullptr);
  for (double lp : s.token_log_probs) CHECK(lp == doctest::Approx(-std::log(12.0)).epsilon(1e-12));
}

TEST_CASE("next-token distributions are normalized") {
  const auto m = test::tiny_model<double>(7);
  const auto prefix = test::random_prefix<double>(2, m.config().activation_dim(), 8);
  const auto logits = m.logits(TokenSequence{2, 3, 4, 5}, &prefix);
  for (int t = 0; t < 4; ++t) {
    double z = 0;
    for (int v = 0; v < 12; ++v) z += std::exp(logits[t * 12 + v]);
    double lse = std::log(z), total = 0;
    for (int v = 0; v < 12; ++v) total += std::exp(logits[t * 12 + v] - lse);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("sequence probabilities over all sequences of length 3 sum to 1") {
  const auto m = test::tiny_model<double>(9, 5);
  const auto prefix = test::random_prefix<double>(2, m.config().activation_dim(), 10);
  double total = 0;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b)
      for (int c = 0; c < 5; ++c) total += std::exp(m.sequence_log_prob({a, b, c}, &prefix).total);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("prefix and parameter gradients match finite differences") {
  auto m = test::tiny_model<double>(11);
  auto prefix = test::random_prefix<double>(2, m.config().activation_dim(), 12);
  const TokenSequence x{5, 6, 3, 9, 4};
  const auto inputs = teacher_inputs(x, m.config().bos_id);
  std::vector<double> dparams(m.params().size(), 0.0), dprefix(prefix.data().size(), 0.0);
  ForwardCache<double> ws;
  m.score_with_grad(x, inputs, &prefix, 1.0, dparams, dprefix, ws);
  auto f = [&] { return m.sequence_log_prob(x, &prefix).total; };
  const auto pr = test::fd_check(prefix.data(), dprefix, f, test::sample_coords(prefix.data().size(), 60, 1));
  CHECK(pr.rel_error < 1e-6);
  CHECK(pr.norm > 0);
  const auto pp = test::fd_check(m.params(), dparams, f, test::sample_coords(m.params().size(), 120, 2));
  CHECK(pp.rel_error < 1e-6);
}

TEST_CASE("cached and uncached generation agree") {
  const auto m = test::tiny_model<float>(13);
  const auto prefix = test::random_prefix<float>(3, m.config().activation_dim(), 14);
  SamplingParams s;
  s.max_new = 12;
  s.seed = 99;
  s.top_k = 6;
  CHECK(m.generate({4, 5}, &prefix, s, true) == m.generate({4, 5}, &prefix, s, false));
  s.greedy = true;
  CHECK(m.generate({4, 5}, nullptr, s, true) == m.generate({4, 5}, nullptr, s, false));
}

TEST_CASE("greedy decoding equals top-k = 1 and picks the argmax") {
  const auto m = test::tiny_model<double>(15);
  SamplingParams g;
  g.greedy = true;
  g.max_new = 6;
  SamplingParams k1;
  k1.top_k = 1;
  k1.max_new = 6;
  k1.seed = 1234;
  const auto a = m.generate({3, 4}, nullptr, g);
  CHECK(a == m.generate({3, 4}, nullptr, k1));
  const auto logits = m.logits(TokenSequence{2, 3, 4}, nullptr);
  int best = 3;
  for (int v = 3; v < 12; ++v)
    if (logits[2 * 12 + v] > logits[2 * 12 + best]) best = v;
  CHECK(a[2] == best);
}

TEST_CASE("sampling respects top-k and never emits special tokens") {
  const auto cfg = test::tiny_config();
  std::vector<double> logits{5, 5, 5, 1, 2, 3, 4, 0, 0, 0, 0, 0};
  SamplingParams s;
  s.top_k = 2;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Token t = sample_token<double>(logits, s, rng, cfg);
    CHECK((t == 5 || t == 6));
  }
  s.top_k = 0;
  s.top_p = 0.5;
  for (int i = 0; i < 200; ++i) CHECK(sample_token<double>(logits, s, rng, cfg) == 6);
}

TEST_CASE("generation is deterministic per seed") {
  const auto m = test::tiny_model<float>(16);
  SamplingParams s;
  s.seed = 5;
  const auto a = m.generate({3}, nullptr, s);
  CHECK(a == m.generate({3}, nullptr, s));
  CHECK(a.size() == 21);
}

TEST_CASE("inputs beyond the position table are rejected") {
  const auto m = test::tiny_model<double>(17);
  const auto prefix = test::random_prefix<double>(40, m.config().activation_dim(), 18);
  CHECK_THROWS_AS(m.logits(TokenSequence(10, 4), &prefix), Error);
  CHECK_THROWS_AS(m.logits(TokenSequence{2, 99}, nullptr), Error);
}

TEST_CASE("model files round-trip and reject corruption") {
  const auto m = Transformer<float>::random(test::tiny_config(), 19);
  const auto bytes = serialize_model(m);
  const auto back = deserialize_model(bytes);
  CHECK(back.config() == m.config());
  CHECK(std::equal(back.params().begin(), back.params().end(), m.params().begin()));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad), Error);
  bad = bytes;
  bad.resize(bad.size() - 5);
  CHECK_THROWS_AS(deserialize_model(bad), Error);
}

TEST_CASE("encoder heads start from the decoder body") {
  const auto dec = test::tiny_model<double>(20);
  const auto enc = Encoder<double>::from_decoder(dec, 2, 6, 21);
  CHECK(std::equal(enc.body().params().begin(), enc.body().params().end(), dec.params().begin()));
  CHECK(enc.encode({4, 5, 6}, 0).size() == 6);
  CHECK(enc.encode({4, 5, 6}, 0) != enc.encode({4, 5, 6}, 1));
}
