#include "pfx/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfx/kernels.hpp"

namespace pfx {

void ObjectiveConfig::validate() const {
  require(omega1 >= 0 && omega2 >= 0 && omega3 >= 0, "objective: loss weights must be non-negative");
  require(margin > 0, "objective: margin must be positive");
  require(mask_rate >= 0 && mask_rate <= 1, "objective: mask_rate must lie in [0, 1]");
  require(tau_start > 0 && tau_end > 0 && kl_start > 0 && kl_end > 0, "objective: schedule endpoints must be positive");
  require(schedule_steps >= 1, "objective: schedule_steps must be >= 1");
}

ScheduleValues schedule(const ObjectiveConfig& cfg, long step) {
  if (step <= 0) return {cfg.kl_start, cfg.tau_start};
  if (step >= cfg.schedule_steps) return {cfg.kl_end, cfg.tau_end};
  const double f = static_cast<double>(step) / static_cast<double>(cfg.schedule_steps);
  return {cfg.kl_start + f * (cfg.kl_end - cfg.kl_start), cfg.tau_start + f * (cfg.tau_end - cfg.tau_start)};
}

template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  require(!logits.empty(), "softmax of an empty vector");
  const T mx = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

template <class T>
void softmax_backward(std::span<const T> p, std::span<const T> d_p, std::span<T> d_logits) {
  T dot = 0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * d_p[i];
  for (std::size_t i = 0; i < p.size(); ++i) d_logits[i] += p[i] * (d_p[i] - dot);
}

std::vector<double> sample_gumbel(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> g(n);
  for (auto& v : g) v = rng.gumbel();
  return g;
}

template <class T>
std::vector<T> gumbel_softmax(std::span<const T> logits, std::span<const double> noise, double tau) {
  require(tau > 0, "gumbel softmax: temperature must be positive");
  require(noise.size() == logits.size(), "gumbel softmax: noise size mismatch");
  std::vector<T> z(logits.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<T>((logits[i] + noise[i]) / tau);
  return softmax<T>(z);
}

template <class T>
std::vector<T> gumbel_softmax(std::span<const T> logits, double tau, std::uint64_t seed) {
  const auto g = sample_gumbel(static_cast<int>(logits.size()), seed);
  return gumbel_softmax<T>(logits, g, tau);
}

template <class T>
void gumbel_softmax_backward(std::span<const T> y, std::span<const T> d_y, double tau, std::span<T> d_logits) {
  std::vector<T> tmp(y.size(), T(0));
  softmax_backward<T>(y, d_y, tmp);
  for (std::size_t i = 0; i < y.size(); ++i) d_logits[i] += tmp[i] / static_cast<T>(tau);
}

template <class T>
std::vector<T> prefix_distances(std::span<const T> enc, std::span<const PrefixKV<T>> prefixes) {
  std::vector<T> d;
  for (const auto& p : prefixes) {
    if (p.data().size() != enc.size())
      throw Error("encoder output has dim " + std::to_string(enc.size()) + " but prefixes have M x D = " +
                  std::to_string(p.data().size()));
    T s = 0;
    for (std::size_t i = 0; i < enc.size(); ++i) {
      const T diff = enc[i] - p.data()[i];
      s += diff * diff;
    }
    d.push_back(std::sqrt(s));
  }
  return d;
}

template <class T>
std::vector<T> encoder_posterior(std::span<const T> enc, std::span<const PrefixKV<T>> prefixes, double tau,
                                 std::uint64_t seed, Pull pull) {
  auto d = prefix_distances<T>(enc, prefixes);
  if (pull == Pull::attract)
    for (auto& v : d) v = -v;
  return gumbel_softmax<T>(d, tau, seed);
}

template <class T>
T discriminative_loss(std::span<const T> scores, int y, std::span<T> d_scores) {
  require(y >= 0 && y < static_cast<int>(scores.size()), "discriminative loss: label out of range");
  const T mx = *std::max_element(scores.begin(), scores.end());
  T z = 0;
  for (T s : scores) z += std::exp(s - mx);
  const T lse = mx + std::log(z);
  if (!d_scores.empty())
    for (std::size_t i = 0; i < scores.size(); ++i)
      d_scores[i] = std::exp(scores[i] - lse) - (static_cast<int>(i) == y ? T(1) : T(0));
  return lse - scores[y];
}

template <class T>
T kl_loss(std::span<const T> q, std::span<T> d_q) {
  const T n = static_cast<T>(q.size());
  T kl = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] > 0) kl += q[i] * std::log(q[i] * n);
    if (!d_q.empty()) d_q[i] = q[i] > 0 ? std::log(q[i] * n) + T(1) : T(0);
  }
  return kl;
}

template <class T>
T contrastive_loss(std::span<const T> p, std::span<const T> p_bar, double margin, std::span<T> d_p,
                   std::span<T> d_p_bar) {
  require(p.size() == p_bar.size(), "contrastive loss: size mismatch");
  T sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sq += (p[i] - p_bar[i]) * (p[i] - p_bar[i]);
  const T r = std::sqrt(sq);
  const T gap = static_cast<T>(margin) - r;
  for (std::size_t i = 0; i < p.size(); ++i) {
    // The hinge is flat beyond the margin; at r = 0 the subgradient 0 is used.
    const T g = (gap > 0 && r > 0) ? T(-2) * gap * (p[i] - p_bar[i]) / r : T(0);
    if (!d_p.empty()) d_p[i] = g;
    if (!d_p_bar.empty()) d_p_bar[i] = -g;
  }
  return gap > 0 ? gap * gap : T(0);
}

template <class T>
T encoder_loss(std::span<const T> q_sup, int y) {
  require(y >= 0 && y < static_cast<int>(q_sup.size()), "encoder loss: label out of range");
  return -std::log(q_sup[y]);
}

TokenSequence mask_tokens(std::span<const Token> seq, double rate, Token mask_id, std::uint64_t seed) {
  require(rate >= 0 && rate <= 1, "mask rate must lie in [0, 1]");
  Rng rng(seed);
  TokenSequence out(seq.begin(), seq.end());
  for (auto& t : out)
    if (rng.uniform() < rate) t = mask_id;
  return out;
}

TokenSequence mask_inputs(std::span<const Token> inputs, double rate, Token mask_id, std::uint64_t seed) {
  if (inputs.empty()) return {};
  TokenSequence out{inputs.front()};
  const auto rest = mask_tokens(inputs.subspan(1), rate, mask_id, seed);
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

namespace {

// A decoder pass whose backward is deferred until its gradient scale is known.
template <class T>
struct ScoredPass {
  ForwardCache<T> cache;
  std::vector<T> logp;
  T total = 0;
};

template <class T>
void score_pass(const Transformer<T>& model, const TokenSequence& targets, std::span<const Token> inputs,
                const PrefixKV<T>* prefix, ScoredPass<T>& pass) {
  model.forward(inputs, prefix, pass.cache);
  const int n = pass.cache.n, V = model.config().vocab_size;
  pass.logp.resize(pass.cache.logits.size());
  kernels::log_softmax_rows<T>(pass.logp, pass.cache.logits, n, V);
  pass.total = 0;
  for (int t = 0; t < n; ++t) pass.total += pass.logp[static_cast<std::size_t>(t) * V + targets[t]];
}

template <class T>
void backward_pass(const Transformer<T>& model, const TokenSequence& targets, const ScoredPass<T>& pass, T scale,
                   std::span<T> d_prefix) {
  if (scale == T(0)) return;
  const int n = pass.cache.n, V = model.config().vocab_size;
  std::vector<T> dl(pass.logp.size());
  for (int t = 0; t < n; ++t)
    for (int v = 0; v < V; ++v) {
      const std::size_t i = static_cast<std::size_t>(t) * V + v;
      dl[i] = scale * ((v == targets[t] ? T(1) : T(0)) - std::exp(pass.logp[i]));
    }
  model.backward(pass.cache, dl, {}, {}, d_prefix);
}

template <class T>
void add_to(std::vector<T>& dst, std::span<const T> src, T w = T(1)) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
}

// Chain rule through d_z = ||e - P_z||.
template <class T>
void distance_backward(std::span<const T> enc, std::span<const PrefixKV<T>> prefixes, std::span<const T> dist,
                       std::span<const T> d_dist, std::vector<T>& d_enc, std::vector<std::vector<T>>& d_prefixes) {
  for (std::size_t z = 0; z < prefixes.size(); ++z) {
    if (d_dist[z] == T(0) || dist[z] == T(0)) continue;
    const T g = d_dist[z] / dist[z];
    const auto p = prefixes[z].data();
    for (std::size_t i = 0; i < enc.size(); ++i) {
      const T diff = g * (enc[i] - p[i]);
      d_enc[i] += diff;
      d_prefixes[z][i] -= diff;
    }
  }
}

}  // namespace

template <class T>
std::vector<T> prefix_scores(const Transformer<T>& model, const TokenSequence& seq,
                             std::span<const PrefixKV<T>> prefixes) {
  std::vector<T> s;
  for (const auto& p : prefixes) s.push_back(model.sequence_log_prob(seq, &p).total);
  return s;
}

template <class T>
std::vector<T> exact_posterior(const Transformer<T>& model, const TokenSequence& seq,
                               std::span<const PrefixKV<T>> prefixes) {
  require(!prefixes.empty(), "exact posterior needs at least one prefix");
  const auto s = prefix_scores(model, seq, prefixes);
  return softmax<T>(s);
}

template <class T>
PrefixKV<T> mix_prefixes(std::span<const PrefixKV<T>> prefixes, std::span<const T> weights) {
  require(!prefixes.empty() && prefixes.size() == weights.size(), "mix: one weight per prefix required");
  PrefixKV<T> out(prefixes[0].length(), prefixes[0].dim());
  auto d = out.data();
  for (std::size_t z = 0; z < prefixes.size(); ++z) {
    require(prefixes[z].length() == out.length() && prefixes[z].dim() == out.dim(), "mix: prefix shapes differ");
    const auto p = prefixes[z].data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += weights[z] * p[i];
  }
  return out;
}

template <class T>
T lm_loss(const Transformer<T>& model, std::span<const TokenSequence> batch, std::span<const PrefixKV<T>> prefixes,
          std::span<const std::vector<T>> weights) {
  require(!batch.empty(), "lm loss of an empty batch");
  require(weights.size() == batch.size(), "lm loss: one weight vector per example");
  T total = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto mixed = mix_prefixes<T>(prefixes, weights[b]);
    total -= model.sequence_log_prob(batch[b], &mixed).total;
  }
  return total / static_cast<T>(batch.size());
}

template <class T>
T lm_loss(const Transformer<T>& model, std::span<const TokenSequence> batch, std::span<const PrefixKV<T>> prefixes,
          std::span<const int> indices) {
  require(!batch.empty(), "lm loss of an empty batch");
  require(indices.size() == batch.size(), "lm loss: one prefix index per example");
  T total = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    require(indices[b] >= 0 && indices[b] < static_cast<int>(prefixes.size()), "lm loss: prefix index out of range");
    total -= model.sequence_log_prob(batch[b], &prefixes[indices[b]]).total;
  }
  return total / static_cast<T>(batch.size());
}

template <class T>
T discriminative_loss(const Transformer<T>& model, std::span<const TokenSequence> batch,
                      std::span<const PrefixKV<T>> prefixes, std::span<const int> labels, bool length_normalize) {
  require(!batch.empty() && labels.size() == batch.size(), "discriminative loss: one label per example");
  T total = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto s = prefix_scores(model, batch[b], prefixes);
    if (length_normalize)
      for (auto& v : s) v /= static_cast<T>(batch[b].size());
    total += discriminative_loss<T>(s, labels[b]);
  }
  return total / static_cast<T>(batch.size());
}

LossParts& LossParts::operator+=(const LossParts& o) {
  lm += o.lm;
  d += o.d;
  kl += o.kl;
  c += o.c;
  enc += o.enc;
  total += o.total;
  return *this;
}

LossParts LossParts::scaled(double s) const { return {lm * s, d * s, kl * s, c * s, enc * s, total * s}; }

template <class T>
PrefixGrads<T>::PrefixGrads(std::span<const PrefixKV<T>> prefixes) {
  for (const auto& p : prefixes) rows.emplace_back(p.data().size(), T(0));
}

template <class T>
void PrefixGrads<T>::zero() {
  for (auto& r : rows) std::fill(r.begin(), r.end(), T(0));
}

template <class T>
LossParts supervised_example(const Transformer<T>& model, std::span<const PrefixKV<T>> prefixes,
                             const TokenSequence& x, int y, const ObjectiveConfig& cfg, T scale,
                             PrefixGrads<T>& grads) {
  const int N = static_cast<int>(prefixes.size());
  require(y >= 0 && y < N, "supervised example: label " + std::to_string(y) + " outside schema");
  const auto inputs = teacher_inputs(x, model.config().bos_id);
  const T w1 = static_cast<T>(cfg.omega1), w2 = static_cast<T>(cfg.omega2);
  LossParts parts;
  if (w2 == T(0)) {
    ScoredPass<T> pass;
    score_pass(model, x, inputs, &prefixes[y], pass);
    backward_pass(model, x, pass, -w1 * scale, std::span<T>(grads.rows[y]));
    parts.lm = -static_cast<double>(pass.total);
    parts.total = cfg.omega1 * parts.lm;
    return parts;
  }
  std::vector<ScoredPass<T>> passes(N);
  std::vector<T> s(N), ds(N);
  const T norm = cfg.length_normalize_ld ? T(1) / static_cast<T>(x.size()) : T(1);
  for (int z = 0; z < N; ++z) {
    score_pass(model, x, inputs, &prefixes[z], passes[z]);
    s[z] = passes[z].total * norm;
  }
  parts.lm = -static_cast<double>(passes[y].total);
  parts.d = static_cast<double>(discriminative_loss<T>(s, y, ds));
  parts.total = cfg.omega1 * parts.lm + cfg.omega2 * parts.d;
  for (int z = 0; z < N; ++z) {
    // dL/ds_z for L = -w1 s_y + w2 CE(s); backward_pass applies ds/dprefix.
    T g = w2 * scale * ds[z] * norm;
    if (z == y) g -= w1 * scale;
    backward_pass(model, x, passes[z], g, std::span<T>(grads.rows[z]));
  }
  return parts;
}

template <class T>
LossParts unsupervised_example(const Transformer<T>& model, const Encoder<T>& encoder,
                               std::span<const PrefixKV<T>> prefixes, const TokenSequence& x,
                               const ObjectiveConfig& cfg, ScheduleValues sched, std::uint64_t seed, T scale,
                               PrefixGrads<T>& grads, EncoderGrads<T> enc_grads) {
  const int N = static_cast<int>(prefixes.size());
  require(N >= 2, "unsupervised training needs at least two attributes");
  typename Encoder<T>::Pass ep;
  encoder.forward(x, ep);
  const auto& e = ep.outputs[0];
  const auto dist = prefix_distances<T>(e, prefixes);
  std::vector<T> neg(N);
  for (int z = 0; z < N; ++z) neg[z] = -dist[z];
  const auto qa = gumbel_softmax<T>(neg, sample_gumbel(N, derive_seed(seed, {1})), sched.tau);
  const auto qr = gumbel_softmax<T>(dist, sample_gumbel(N, derive_seed(seed, {2})), sched.tau);
  std::vector<T> dqa(N, T(0)), dqr(N, T(0)), ddist(N, T(0));
  LossParts parts;

  if (cfg.omega1 > 0) {
    const auto mixed = mix_prefixes<T>(prefixes, qa);
    const auto inputs =
        mask_inputs(teacher_inputs(x, model.config().bos_id), cfg.mask_rate, model.config().mask_id,
                    derive_seed(seed, {0}));
    ScoredPass<T> pass;
    score_pass(model, x, inputs, &mixed, pass);
    std::vector<T> dmix(mixed.data().size(), T(0));
    backward_pass(model, x, pass, -static_cast<T>(cfg.omega1) * scale, std::span<T>(dmix));
    for (int z = 0; z < N; ++z) {
      add_to<T>(grads.rows[z], dmix, qa[z]);
      const auto p = prefixes[z].data();
      T dot = 0;
      for (std::size_t i = 0; i < dmix.size(); ++i) dot += p[i] * dmix[i];
      dqa[z] += dot;
    }
    parts.lm = -static_cast<double>(pass.total);
  }

  {
    // KL on the noise-free attract posterior.
    const auto q = softmax<T>(neg);
    std::vector<T> dq(N);
    parts.kl = static_cast<double>(kl_loss<T>(q, dq));
    for (auto& v : dq) v *= static_cast<T>(sched.kl_weight) * scale;
    std::vector<T> dneg(N, T(0));
    softmax_backward<T>(q, dq, dneg);
    for (int z = 0; z < N; ++z) ddist[z] -= dneg[z];
  }

  if (cfg.omega3 > 0) {
    const auto inputs = teacher_inputs(x, model.config().bos_id);
    std::vector<ScoredPass<T>> passes(N);
    std::vector<T> s(N);
    for (int z = 0; z < N; ++z) {
      score_pass(model, x, inputs, &prefixes[z], passes[z]);
      s[z] = passes[z].total;
    }
    const auto p = softmax<T>(s);
    const T w = static_cast<T>(cfg.omega3) * scale;
    std::vector<T> dp(N, T(0));
    if (cfg.contrast_vector) {
      std::vector<T> u(N), v(N), du(N), dv(N);
      for (int z = 0; z < N; ++z) {
        u[z] = qa[z] * p[z];
        v[z] = qr[z] * p[z];
      }
      parts.c = static_cast<double>(contrastive_loss<T>(u, v, cfg.margin, du, dv));
      for (int z = 0; z < N; ++z) {
        dqa[z] += w * du[z] * p[z];
        dqr[z] += w * dv[z] * p[z];
        dp[z] = w * (du[z] * qa[z] + dv[z] * qr[z]);
      }
    } else {
      T a = 0, b = 0;
      for (int z = 0; z < N; ++z) {
        a += qa[z] * p[z];
        b += qr[z] * p[z];
      }
      T da = 0, db = 0;
      parts.c = static_cast<double>(
          contrastive_loss<T>(std::span<const T>(&a, 1), std::span<const T>(&b, 1), cfg.margin, {&da, 1}, {&db, 1}));
      for (int z = 0; z < N; ++z) {
        dqa[z] += w * da * p[z];
        dqr[z] += w * db * p[z];
        dp[z] = w * (da * qa[z] + db * qr[z]);
      }
    }
    std::vector<T> ds(N, T(0));
    softmax_backward<T>(p, dp, ds);
    for (int z = 0; z < N; ++z) backward_pass(model, x, passes[z], ds[z], std::span<T>(grads.rows[z]));
  }

  std::vector<T> dla(N, T(0)), dlr(N, T(0));
  gumbel_softmax_backward<T>(qa, dqa, sched.tau, dla);
  gumbel_softmax_backward<T>(qr, dqr, sched.tau, dlr);
  for (int z = 0; z < N; ++z) ddist[z] += dlr[z] - dla[z];
  std::vector<T> de(e.size(), T(0));
  distance_backward<T>(e, prefixes, dist, ddist, de, grads.rows);
  std::vector<std::vector<T>> d_out(encoder.num_heads());
  d_out[0] = std::move(de);
  encoder.backward(ep, d_out, enc_grads.body, enc_grads.heads);

  parts.total = cfg.omega1 * parts.lm + sched.kl_weight * parts.kl + cfg.omega3 * parts.c;
  return parts;
}

template <class T>
int filtered_latent(std::span<const T> distances, const LatentFilter& filter, std::uint64_t seed) {
  const int N = static_cast<int>(distances.size());
  std::vector<T> neg(N);
  for (int z = 0; z < N; ++z) neg[z] = -distances[z];
  const auto q = softmax<T>(neg);
  std::vector<int> ids(N);
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return q[a] > q[b]; });
  if (filter.top_k > 0 && filter.top_k < N) ids.resize(filter.top_k);
  std::vector<double> w;
  for (int id : ids) w.push_back(static_cast<double>(q[id]));
  const double mass = std::accumulate(w.begin(), w.end(), 0.0);
  if (filter.top_p < 1.0) {
    double cum = 0;
    std::size_t keep = 0;
    while (keep < w.size()) {
      cum += w[keep++] / mass;
      if (cum >= filter.top_p) break;
    }
    ids.resize(keep);
    w.resize(keep);
  }
  if (ids.size() == 1) return ids[0];
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  const double u = Rng(seed).uniform() * total;
  double cum = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    cum += w[i];
    if (u < cum) return ids[i];
  }
  return ids.back();
}

template <class T>
LossParts semi_example(const Transformer<T>& model, const Encoder<T>& encoder,
                       std::span<const std::vector<PrefixKV<T>>> aspects, const TokenSequence& x,
                       std::span<const int> labels, std::span<const LatentFilter> filters, const ObjectiveConfig& cfg,
                       std::uint64_t seed, T scale, std::span<PrefixGrads<T>> grads, EncoderGrads<T> enc_grads) {
  const int K = static_cast<int>(aspects.size());
  require(K >= 1 && static_cast<int>(labels.size()) == K && static_cast<int>(filters.size()) == K &&
              static_cast<int>(grads.size()) == K,
          "semi example: per-aspect inputs disagree in count");
  require(encoder.num_heads() >= K, "semi example: encoder needs one head per aspect");
  typename Encoder<T>::Pass ep;
  encoder.forward(x, ep);
  LossParts parts;

  std::vector<std::vector<T>> dist(K), ddist(K);
  std::vector<int> sel(K);
  for (int k = 0; k < K; ++k) {
    const int N = static_cast<int>(aspects[k].size());
    require(labels[k] >= -1 && labels[k] < N, "semi example: label outside schema of aspect " + std::to_string(k));
    dist[k] = prefix_distances<T>(ep.outputs[k], aspects[k]);
    ddist[k].assign(N, T(0));
    sel[k] = labels[k] >= 0 ? labels[k] : filtered_latent<T>(dist[k], filters[k], derive_seed(seed, {std::uint64_t(k)}));
    if (labels[k] >= 0 && cfg.omega3 > 0) {
      std::vector<T> neg(N);
      for (int z = 0; z < N; ++z) neg[z] = -dist[k][z];
      const auto q = softmax<T>(neg);
      parts.enc += static_cast<double>(encoder_loss<T>(q, labels[k]));
      // d(-log q_y)/d(-d) = q - onehot(y)
      for (int z = 0; z < N; ++z)
        ddist[k][z] -= static_cast<T>(cfg.omega3) * scale * (q[z] - (z == labels[k] ? T(1) : T(0)));
    }
  }

  const bool any_label = std::any_of(labels.begin(), labels.end(), [](int l) { return l >= 0; });
  const bool need_decoder = cfg.omega1 > 0 || (cfg.omega2 > 0 && any_label);
  if (need_decoder) {
    const auto inputs = teacher_inputs(x, model.config().bos_id);
    std::vector<int> offsets(K + 1, 0);
    for (int k = 0; k < K; ++k) offsets[k + 1] = offsets[k] + aspects[k][0].length();
    auto build = [&](const std::vector<int>& choice) {
      std::vector<PrefixKV<T>> parts_kv;
      for (int k = 0; k < K; ++k) parts_kv.push_back(aspects[k][choice[k]]);
      return concat_prefixes<T>(parts_kv);
    };
    // Scatter a concatenated-prefix gradient back to per-aspect rows.
    auto scatter = [&](const std::vector<int>& choice, const std::vector<T>& d) {
      const std::size_t D = aspects[0][0].dim();
      for (int k = 0; k < K; ++k) {
        auto& dst = grads[k].rows[choice[k]];
        const T* src = d.data() + offsets[k] * D;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    };
    const std::size_t concat_size = static_cast<std::size_t>(offsets[K]) * aspects[0][0].dim();
    ScoredPass<T> base;
    const auto base_prefix = build(sel);
    score_pass(model, x, inputs, &base_prefix, base);
    parts.lm = -static_cast<double>(base.total);
    T base_scale = -static_cast<T>(cfg.omega1) * scale;
    const T norm = cfg.length_normalize_ld ? T(1) / static_cast<T>(x.size()) : T(1);
    if (cfg.omega2 > 0) {
      for (int k = 0; k < K; ++k) {
        if (labels[k] < 0) continue;
        const int N = static_cast<int>(aspects[k].size());
        std::vector<ScoredPass<T>> alt(N);
        std::vector<T> s(N), ds(N);
        for (int z = 0; z < N; ++z) {
          if (z == sel[k]) {
            s[z] = base.total * norm;
            continue;
          }
          auto choice = sel;
          choice[k] = z;
          const auto prefix = build(choice);
          score_pass(model, x, inputs, &prefix, alt[z]);
          s[z] = alt[z].total * norm;
        }
        parts.d += static_cast<double>(discriminative_loss<T>(s, labels[k], ds));
        for (int z = 0; z < N; ++z) {
          const T g = static_cast<T>(cfg.omega2) * scale * ds[z] * norm;
          if (z == sel[k]) {
            base_scale += g;
            continue;
          }
          std::vector<T> d(concat_size, T(0));
          backward_pass(model, x, alt[z], g, std::span<T>(d));
          auto choice = sel;
          choice[k] = z;
          scatter(choice, d);
        }
      }
    }
    std::vector<T> d(concat_size, T(0));
    backward_pass(model, x, base, base_scale, std::span<T>(d));
    scatter(sel, d);
  }

  std::vector<std::vector<T>> d_out(encoder.num_heads());
  bool any_enc = false;
  for (int k = 0; k < K; ++k) {
    if (std::all_of(ddist[k].begin(), ddist[k].end(), [](T v) { return v == T(0); })) continue;
    d_out[k].assign(ep.outputs[k].size(), T(0));
    distance_backward<T>(ep.outputs[k], aspects[k], dist[k], ddist[k], d_out[k], grads[k].rows);
    any_enc = true;
  }
  if (any_enc) encoder.backward(ep, d_out, enc_grads.body, enc_grads.heads);
  parts.total = cfg.omega1 * parts.lm + cfg.omega2 * parts.d + cfg.omega3 * parts.enc;
  return parts;
}

#define PFX_INSTANTIATE_OBJECTIVES(T)                                                                                 \
  template std::vector<T> softmax<T>(std::span<const T>);                                                            \
  template void softmax_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);                          \
  template std::vector<T> gumbel_softmax<T>(std::span<const T>, std::span<const double>, double);                   \
  template std::vector<T> gumbel_softmax<T>(std::span<const T>, double, std::uint64_t);                             \
  template void gumbel_softmax_backward<T>(std::span<const T>, std::span<const T>, double, std::span<T>);           \
  template std::vector<T> prefix_distances<T>(std::span<const T>, std::span<const PrefixKV<T>>);                    \
  template std::vector<T> encoder_posterior<T>(std::span<const T>, std::span<const PrefixKV<T>>, double,            \
                                               std::uint64_t, Pull);                                                 \
  template T discriminative_loss<T>(std::span<const T>, int, std::span<T>);                                          \
  template T kl_loss<T>(std::span<const T>, std::span<T>);                                                           \
  template T contrastive_loss<T>(std::span<const T>, std::span<const T>, double, std::span<T>, std::span<T>);       \
  template T encoder_loss<T>(std::span<const T>, int);                                                               \
  template std::vector<T> prefix_scores<T>(const Transformer<T>&, const TokenSequence&,                             \
                                           std::span<const PrefixKV<T>>);                                            \
  template std::vector<T> exact_posterior<T>(const Transformer<T>&, const TokenSequence&,                           \
                                             std::span<const PrefixKV<T>>);                                          \
  template PrefixKV<T> mix_prefixes<T>(std::span<const PrefixKV<T>>, std::span<const T>);                           \
  template T lm_loss<T>(const Transformer<T>&, std::span<const TokenSequence>, std::span<const PrefixKV<T>>,        \
                        std::span<const std::vector<T>>);                                                            \
  template T lm_loss<T>(const Transformer<T>&, std::span<const TokenSequence>, std::span<const PrefixKV<T>>,        \
                        std::span<const int>);                                                                       \
  template T discriminative_loss<T>(const Transformer<T>&, std::span<const TokenSequence>,                          \
                                    std::span<const PrefixKV<T>>, std::span<const int>, bool);                      \
  template struct PrefixGrads<T>;                                                                                    \
  template LossParts supervised_example<T>(const Transformer<T>&, std::span<const PrefixKV<T>>,                     \
                                           const TokenSequence&, int, const ObjectiveConfig&, T, PrefixGrads<T>&);  \
  template LossParts unsupervised_example<T>(const Transformer<T>&, const Encoder<T>&,                              \
                                             std::span<const PrefixKV<T>>, const TokenSequence&,                     \
                                             const ObjectiveConfig&, ScheduleValues, std::uint64_t, T,               \
                                             PrefixGrads<T>&, EncoderGrads<T>);                                      \
  template int filtered_latent<T>(std::span<const T>, const LatentFilter&, std::uint64_t);                          \
  template LossParts semi_example<T>(const Transformer<T>&, const Encoder<T>&,                                      \
                                     std::span<const std::vector<PrefixKV<T>>>, const TokenSequence&,               \
                                     std::span<const int>, std::span<const LatentFilter>, const ObjectiveConfig&,   \
                                     std::uint64_t, T, std::span<PrefixGrads<T>>, EncoderGrads<T>);

PFX_INSTANTIATE_OBJECTIVES(float)
PFX_INSTANTIATE_OBJECTIVES(double)

}  // namespace pfx
