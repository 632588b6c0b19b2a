#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pfx/objectives.hpp"

namespace pfx::test {

struct GradientCheck {
  std::string name;
  double rel_error = 0;  // worst of the prefix and encoder checks
  int probes = 0;
};

// Central differences over a set of probed scalars. The error is
// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the probes.
struct Probe {
  double* x;
  double analytic;
};

inline double probe_error(const std::vector<Probe>& probes, const std::function<double()>& f, double h = 1e-5) {
  double diff = 0, na = 0, nn = 0;
  for (const auto& p : probes) {
    const double orig = *p.x;
    *p.x = orig + h;
    const double fp = f();
    *p.x = orig - h;
    const double fm = f();
    *p.x = orig;
    const double num = (fp - fm) / (2 * h);
    diff += (num - p.analytic) * (num - p.analytic);
    na += p.analytic * p.analytic;
    nn += num * num;
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

inline std::vector<std::size_t> pick(std::size_t n, int count, Rng& rng) {
  std::vector<std::size_t> out;
  for (int i = 0; i < count; ++i) out.push_back(static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
  return out;
}

// Runs every objective's analytic gradient against finite differences on a
// randomly initialized double-precision model of the given shape.
inline std::vector<GradientCheck> gradient_suite(const ModelConfig& cfg, int prefix_len, int probes_per_group,
                                                 std::uint64_t seed, double model_std = 0.02) {
  const auto decoder = Transformer<float>::random(cfg, seed, model_std).cast<double>();
  const int D = cfg.activation_dim();
  Rng rng(derive_seed(seed, {1}));
  auto make_prefixes = [&](int n) {
    std::vector<PrefixKV<double>> out;
    for (int z = 0; z < n; ++z) {
      std::vector<double> data(static_cast<std::size_t>(prefix_len) * D);
      for (auto& v : data) v = 0.3 * rng.normal();
      out.emplace_back(prefix_len, D, std::move(data));
    }
    return out;
  };
  TokenSequence x;
  for (int t = 0; t < 10; ++t) x.push_back(3 + rng.below(cfg.vocab_size - 3));
  std::vector<GradientCheck> out;

  auto prefix_probes = [&](std::vector<PrefixKV<double>>& prefixes, const PrefixGrads<double>& g) {
    std::vector<Probe> p;
    for (std::size_t z = 0; z < prefixes.size(); ++z)
      for (auto i : pick(prefixes[z].data().size(), probes_per_group, rng))
        p.push_back({&prefixes[z].data()[i], g.rows[z][i]});
    return p;
  };
  auto encoder_probes = [&](Encoder<double>& enc, const std::vector<double>& gb, const std::vector<double>& gh) {
    std::vector<Probe> p;
    for (auto i : pick(gb.size(), probes_per_group, rng)) p.push_back({&enc.body().params()[i], gb[i]});
    for (auto i : pick(gh.size(), probes_per_group, rng)) p.push_back({&enc.head_params()[i], gh[i]});
    return p;
  };

  // Supervised: L_LM on the labeled prefix plus L_d.
  for (auto [name, w1, w2] : {std::tuple{"L_d", 0.0, 1.0}, std::tuple{"supervised total", 0.8, 0.2}}) {
    auto prefixes = make_prefixes(3);
    ObjectiveConfig oc;
    oc.omega1 = w1;
    oc.omega2 = w2;
    PrefixGrads<double> g(prefixes);
    supervised_example<double>(decoder, prefixes, x, 1, oc, 1.0, g);
    auto f = [&] {
      PrefixGrads<double> scratch(prefixes);
      return supervised_example<double>(decoder, prefixes, x, 1, oc, 1.0, scratch).total;
    };
    const auto probes = prefix_probes(prefixes, g);
    out.push_back({name, probe_error(probes, f), static_cast<int>(probes.size())});
  }

  // Unsupervised terms, isolated through their weights.
  struct Uns {
    const char* name;
    double w1, kl, w3;
    bool vector;
  };
  for (const auto& u : {Uns{"L_LM", 1, 0, 0, true}, Uns{"L_KL", 0, 1, 0, true}, Uns{"L_c", 0, 0, 1, true},
                        Uns{"L_c scalar", 0, 0, 1, false}, Uns{"unsupervised total", 0.8, 0.05, 2.0, true}}) {
    auto prefixes = make_prefixes(2);
    auto enc = Encoder<double>::from_decoder(decoder, 1, prefix_len * D, derive_seed(seed, {2}), 0.02);
    ObjectiveConfig oc;
    oc.omega1 = u.w1;
    oc.omega2 = 0;
    oc.omega3 = u.w3;
    oc.margin = 1.0;
    oc.contrast_vector = u.vector;
    const ScheduleValues sched{u.kl, 0.7};
    const std::uint64_t ex_seed = 77;
    PrefixGrads<double> g(prefixes);
    std::vector<double> gb(enc.body().params().size(), 0.0), gh(enc.head_params().size(), 0.0);
    unsupervised_example<double>(decoder, enc, prefixes, x, oc, sched, ex_seed, 1.0, g, {gb, gh});
    auto f = [&] {
      PrefixGrads<double> scratch(prefixes);
      return unsupervised_example<double>(decoder, enc, prefixes, x, oc, sched, ex_seed, 1.0, scratch, {}).total;
    };
    const auto pp = prefix_probes(prefixes, g);
    const auto ep = encoder_probes(enc, gb, gh);
    out.push_back({u.name, std::max(probe_error(pp, f), probe_error(ep, f)), static_cast<int>(pp.size() + ep.size())});
  }

  // Semi: L_enc alone, then the joint objective with one unlabeled aspect.
  for (auto [name, w1, w2, w3, label1] :
       {std::tuple{"L_enc", 0.0, 0.0, 1.0, 0}, std::tuple{"semi total", 0.8, 0.2, 0.4, -1}}) {
    std::vector<std::vector<PrefixKV<double>>> aspects{make_prefixes(2), make_prefixes(3)};
    auto enc = Encoder<double>::from_decoder(decoder, 2, prefix_len * D, derive_seed(seed, {3}), 0.02);
    ObjectiveConfig oc;
    oc.omega1 = w1;
    oc.omega2 = w2;
    oc.omega3 = w3;
    const std::vector<int> labels{1, label1};
    const std::vector<LatentFilter> filters{{1, 1.0}, {1, 1.0}};
    std::vector<PrefixGrads<double>> g{PrefixGrads<double>(aspects[0]), PrefixGrads<double>(aspects[1])};
    std::vector<double> gb(enc.body().params().size(), 0.0), gh(enc.head_params().size(), 0.0);
    semi_example<double>(decoder, enc, aspects, x, labels, filters, oc, 5, 1.0, g, {gb, gh});
    auto f = [&] {
      std::vector<PrefixGrads<double>> scratch{PrefixGrads<double>(aspects[0]), PrefixGrads<double>(aspects[1])};
      return semi_example<double>(decoder, enc, aspects, x, labels, filters, oc, 5, 1.0, scratch, {}).total;
    };
    auto pp = prefix_probes(aspects[0], g[0]);
    const auto pp2 = prefix_probes(aspects[1], g[1]);
    pp.insert(pp.end(), pp2.begin(), pp2.end());
    const auto ep = encoder_probes(enc, gb, gh);
    out.push_back({name, std::max(probe_error(pp, f), probe_error(ep, f)), static_cast<int>(pp.size() + ep.size())});
  }
  return out;
}

}  // namespace pfx::test
