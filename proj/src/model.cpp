#include "pfx/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pfx/io.hpp"
#include "pfx/kernels.hpp"

namespace pfx {

namespace k = kernels;

void ModelConfig::validate() const {
  require(num_layers > 0 && hidden_size > 0 && num_heads > 0 && vocab_size > 0 && max_positions > 0,
          "model config: all sizes must be positive");
  require(hidden_size % num_heads == 0, "model config: num_heads must divide hidden_size");
  for (Token id : {pad_id, mask_id, bos_id})
    require(id >= 0 && id < vocab_size, "model config: special token id outside vocabulary");
  require(pad_id != mask_id && pad_id != bos_id && mask_id != bos_id, "model config: special ids must be distinct");
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int E = cfg.hidden_size, V = cfg.vocab_size;
  wte_ = add("wte", V, E);
  wpe_ = add("wpe", cfg.max_positions, E);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(p + "ln1.g", 1, E);
    L.ln1_b = add(p + "ln1.b", 1, E);
    L.qkv_w = add(p + "attn.qkv.w", E, 3 * E);
    L.qkv_b = add(p + "attn.qkv.b", 1, 3 * E);
    L.proj_w = add(p + "attn.proj.w", E, E);
    L.proj_b = add(p + "attn.proj.b", 1, E);
    L.ln2_g = add(p + "ln2.g", 1, E);
    L.ln2_b = add(p + "ln2.b", 1, E);
    L.fc_w = add(p + "mlp.fc.w", E, 4 * E);
    L.fc_b = add(p + "mlp.fc.b", 1, 4 * E);
    L.mlp_w = add(p + "mlp.proj.w", 4 * E, E);
    L.mlp_b = add(p + "mlp.proj.b", 1, E);
    layers_.push_back(L);
  }
  lnf_g_ = add("lnf.g", 1, E);
  lnf_b_ = add("lnf.b", 1, E);
  lm_head_ = add("lm_head.w", E, V);
}

std::size_t ParamLayout::add(std::string name, int rows, int cols) {
  specs_.push_back({std::move(name), rows, cols, total_});
  total_ += static_cast<std::size_t>(rows) * cols;
  return specs_.back().offset;
}

const ParamSpec& ParamLayout::get(std::string_view name) const {
  for (const auto& s : specs_)
    if (s.name == name) return s;
  throw Error("unknown parameter " + std::string(name));
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t E = cfg.hidden_size, V = cfg.vocab_size, P = cfg.max_positions, L = cfg.num_layers;
  const std::size_t per_layer = 12 * E * E + 13 * E;
  return V * E + P * E + L * per_layer + 2 * E + E * V;
}

template <class T>
PrefixKV<T>::PrefixKV(int length, int dim, std::vector<T> data) : length_(length), dim_(dim), data_(std::move(data)) {
  require(data_.size() == static_cast<std::size_t>(length) * dim, "prefix data size does not match length x dim");
}

template <class T>
bool PrefixKV<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
PrefixKV<T> concat_prefixes(std::span<const PrefixKV<T>> parts) {
  require(!parts.empty(), "concat: at least one prefix required");
  const int dim = parts.front().dim();
  int total = 0;
  for (const auto& p : parts) {
    require(p.dim() == dim, "concat: prefixes disagree on activation dim");
    total += p.length();
  }
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(total) * dim);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return PrefixKV<T>(total, dim, std::move(data));
}

void SamplingParams::validate() const {
  require(top_k >= 0, "sampling: top_k must be >= 0");
  require(top_p > 0.0 && top_p <= 1.0, "sampling: top_p must be in (0, 1]");
  require(max_new >= 0, "sampling: max_new must be >= 0");
}

TokenSequence teacher_inputs(const TokenSequence& seq, Token bos) {
  require(!seq.empty(), "cannot score an empty sequence");
  TokenSequence in;
  in.reserve(seq.size());
  in.push_back(bos);
  in.insert(in.end(), seq.begin(), seq.end() - 1);
  return in;
}

template <class T>
Token sample_token(std::span<const T> logits, const SamplingParams& params, Rng& rng, const ModelConfig& cfg) {
  const int V = static_cast<int>(logits.size());
  auto banned = [&](int id) {
    return params.suppress_special && (id == cfg.pad_id || id == cfg.mask_id || id == cfg.bos_id);
  };
  if (params.greedy || params.temperature <= 0.0) {
    int best = -1;
    for (int i = 0; i < V; ++i)
      if (!banned(i) && (best < 0 || logits[i] > logits[best])) best = i;
    return best;
  }
  std::vector<int> ids;
  for (int i = 0; i < V; ++i)
    if (!banned(i)) ids.push_back(i);
  // Descending by logit, ties to the lower id.
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  if (params.top_k > 0 && static_cast<int>(ids.size()) > params.top_k) ids.resize(params.top_k);
  std::vector<double> p(ids.size());
  const double mx = static_cast<double>(logits[ids[0]]) / params.temperature;
  double z = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[ids[i]]) / params.temperature - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  if (params.top_p < 1.0) {
    double cum = 0;
    std::size_t keep = 0;
    while (keep < p.size()) {
      cum += p[keep++];
      if (cum >= params.top_p) break;
    }
    p.resize(keep);
    ids.resize(keep);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& v : p) v /= s;
  }
  const double u = rng.uniform();
  double cum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (u < cum) return ids[i];
  }
  return ids.back();
}

// ---------------------------------------------------------------------------
// Transformer

template <class T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg), params_(layout_.total(), T(0)) {
  const int E = cfg_.hidden_size;
  auto fill = [&](std::size_t off, T v) { std::fill_n(params_.begin() + off, E, v); };
  for (int l = 0; l < cfg_.num_layers; ++l) {
    fill(layout_.layer(l).ln1_g, T(1));
    fill(layout_.layer(l).ln2_g, T(1));
  }
  fill(layout_.lnf_g(), T(1));
}

template <class T>
Transformer<T> Transformer<T>::random(const ModelConfig& cfg, std::uint64_t seed, double std) {
  Transformer m(cfg);
  Rng rng(seed);
  const double resid_std = std / std::sqrt(2.0 * cfg.num_layers);
  for (const auto& s : m.layout_.specs()) {
    if (s.rows == 1) continue;  // biases and LN parameters keep their defaults
    const bool resid = s.name.ends_with("attn.proj.w") || s.name.ends_with("mlp.proj.w");
    const double sd = resid ? resid_std : std;
    for (std::size_t i = 0; i < s.size(); ++i) m.params_[s.offset + i] = static_cast<T>(sd * rng.normal());
  }
  return m;
}

template <class T>
template <class U>
Transformer<U> Transformer<T>::cast() const {
  Transformer<U> out(cfg_);
  auto dst = out.params();
  for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
  return out;
}

template <class T>
std::span<T> Transformer<T>::param(std::string_view name) {
  const auto& s = layout_.get(name);
  return std::span(params_).subspan(s.offset, s.size());
}

template <class T>
std::span<const T> Transformer<T>::param(std::string_view name) const {
  const auto& s = layout_.get(name);
  return std::span<const T>(params_).subspan(s.offset, s.size());
}

template <class T>
void Transformer<T>::check_tokens(std::span<const Token> tokens) const {
  for (Token t : tokens)
    if (t < 0 || t >= cfg_.vocab_size) throw Error("token id " + std::to_string(t) + " outside vocabulary");
}

template <class T>
void Transformer<T>::forward(std::span<const Token> tokens, const PrefixKV<T>* prefix, ForwardCache<T>& c,
                             int pos_offset, bool want_logits) const {
  const int n = static_cast<int>(tokens.size());
  const int M = prefix ? prefix->length() : 0;
  const int E = cfg_.hidden_size, H = cfg_.num_heads, V = cfg_.vocab_size;
  require(n >= 1, "forward: empty input");
  if (prefix) require(prefix->dim() == cfg_.activation_dim(), "forward: prefix dim does not match 2*L*E");
  if (pos_offset < 0) pos_offset = M;
  if (pos_offset + n > cfg_.max_positions || M + n > cfg_.max_positions)
    throw Error("forward: " + std::to_string(n) + " tokens after " + std::to_string(M) +
                " prefix positions exceed max_positions " + std::to_string(cfg_.max_positions));
  check_tokens(tokens);

  const int Lk = M + n;
  const std::size_t nE = static_cast<std::size_t>(n) * E;
  c.n = n;
  c.prefix_len = M;
  c.pos_offset = pos_offset;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.layers.resize(cfg_.num_layers);

  const T* P = params_.data();
  std::vector<T> x(nE);
  for (int i = 0; i < n; ++i) {
    const T* te = P + layout_.wte() + static_cast<std::size_t>(tokens[i]) * E;
    const T* pe = P + layout_.wpe() + static_cast<std::size_t>(pos_offset + i) * E;
    for (int e = 0; e < E; ++e) x[static_cast<std::size_t>(i) * E + e] = te[e] + (cfg_.use_positions ? pe[e] : T(0));
  }
  auto cs = [](const std::vector<T>& v) { return std::span<const T>(v); };
  auto ps = [&](std::size_t off, std::size_t len) { return std::span<const T>(P + off, len); };

  for (int l = 0; l < cfg_.num_layers; ++l) {
    auto& a = c.layers[l];
    const auto& w = layout_.layer(l);
    a.x_in = x;
    a.ln1.resize(nE);
    a.ln1_mean.resize(n);
    a.ln1_rstd.resize(n);
    k::layernorm_forward<T>(a.ln1, a.ln1_mean, a.ln1_rstd, cs(a.x_in), ps(w.ln1_g, E), ps(w.ln1_b, E), n, E);
    a.qkv.resize(3 * nE);
    k::linear_forward<T>(a.qkv, cs(a.ln1), ps(w.qkv_w, 3ull * E * E), ps(w.qkv_b, 3 * E), n, E, 3 * E);
    a.k_all.resize(static_cast<std::size_t>(Lk) * E);
    a.v_all.resize(static_cast<std::size_t>(Lk) * E);
    for (int j = 0; j < M; ++j) {
      auto kr = prefix->key(l, j, E);
      auto vr = prefix->value(l, j, E);
      std::copy(kr.begin(), kr.end(), a.k_all.begin() + static_cast<std::size_t>(j) * E);
      std::copy(vr.begin(), vr.end(), a.v_all.begin() + static_cast<std::size_t>(j) * E);
    }
    for (int i = 0; i < n; ++i) {
      const T* row = a.qkv.data() + static_cast<std::size_t>(i) * 3 * E;
      std::copy(row + E, row + 2 * E, a.k_all.begin() + static_cast<std::size_t>(M + i) * E);
      std::copy(row + 2 * E, row + 3 * E, a.v_all.begin() + static_cast<std::size_t>(M + i) * E);
    }
    a.probs.resize(static_cast<std::size_t>(H) * n * Lk);
    a.att.resize(nE);
    k::attention_forward<T>(a.att, a.probs, cs(a.qkv), 3 * E, cs(a.k_all), cs(a.v_all), n, Lk, E, H);
    a.x_mid.resize(nE);
    k::linear_forward<T>(a.x_mid, cs(a.att), ps(w.proj_w, static_cast<std::size_t>(E) * E), ps(w.proj_b, E), n, E,
                         E);
    for (std::size_t i = 0; i < nE; ++i) a.x_mid[i] += a.x_in[i];
    a.ln2.resize(nE);
    a.ln2_mean.resize(n);
    a.ln2_rstd.resize(n);
    k::layernorm_forward<T>(a.ln2, a.ln2_mean, a.ln2_rstd, cs(a.x_mid), ps(w.ln2_g, E), ps(w.ln2_b, E), n, E);
    a.fc.resize(4 * nE);
    a.fc_act.resize(4 * nE);
    k::linear_forward<T>(a.fc, cs(a.ln2), ps(w.fc_w, 4ull * E * E), ps(w.fc_b, 4 * E), n, E, 4 * E);
    k::gelu_forward<T>(a.fc_act, cs(a.fc));
    k::linear_forward<T>(x, cs(a.fc_act), ps(w.mlp_w, 4ull * E * E), ps(w.mlp_b, E), n, 4 * E, E);
    for (std::size_t i = 0; i < nE; ++i) x[i] += a.x_mid[i];
  }
  c.x_out = std::move(x);
  c.lnf.resize(nE);
  c.lnf_mean.resize(n);
  c.lnf_rstd.resize(n);
  k::layernorm_forward<T>(c.lnf, c.lnf_mean, c.lnf_rstd, cs(c.x_out), ps(layout_.lnf_g(), E), ps(layout_.lnf_b(), E),
                          n, E);
  if (want_logits) {
    c.logits.resize(static_cast<std::size_t>(n) * V);
    k::linear_forward<T>(c.logits, cs(c.lnf), ps(layout_.lm_head(), static_cast<std::size_t>(E) * V), {}, n, E, V);
    for (T v : c.logits)
      if (!std::isfinite(v)) throw Error("forward: non-finite logits (NaN/Inf in weights or prefix)");
  } else {
    c.logits.clear();
    for (T v : c.lnf)
      if (!std::isfinite(v)) throw Error("forward: non-finite activations (NaN/Inf in weights or prefix)");
  }
}

template <class T>
std::vector<T> Transformer<T>::logits(std::span<const Token> tokens, const PrefixKV<T>* prefix) const {
  ForwardCache<T> c;
  forward(tokens, prefix, c);
  return std::move(c.logits);
}

template <class T>
void Transformer<T>::backward(const ForwardCache<T>& c, std::span<const T> d_logits, std::span<const T> d_hidden,
                              std::span<T> d_params, std::span<T> d_prefix) const {
  const int n = c.n, M = c.prefix_len, Lk = M + n;
  const int E = cfg_.hidden_size, H = cfg_.num_heads, V = cfg_.vocab_size;
  const std::size_t nE = static_cast<std::size_t>(n) * E;
  const bool wg = !d_params.empty();
  if (wg) require(d_params.size() == params_.size(), "backward: parameter gradient size mismatch");
  if (!d_prefix.empty())
    require(d_prefix.size() == static_cast<std::size_t>(M) * cfg_.activation_dim(), "backward: prefix grad size");

  const T* P = params_.data();
  auto ps = [&](std::size_t off, std::size_t len) { return std::span<const T>(P + off, len); };
  auto gs = [&](std::size_t off, std::size_t len) { return wg ? d_params.subspan(off, len) : std::span<T>(); };
  auto cs = [](const std::vector<T>& v) { return std::span<const T>(v); };

  std::vector<T> d_lnf(nE, T(0));
  if (!d_hidden.empty()) std::copy(d_hidden.begin(), d_hidden.end(), d_lnf.begin());
  if (!d_logits.empty()) {
    std::vector<T> tmp(nE);
    k::linear_backward<T>(tmp, gs(layout_.lm_head(), static_cast<std::size_t>(E) * V), {}, d_logits, cs(c.lnf),
                          ps(layout_.lm_head(), static_cast<std::size_t>(E) * V), n, E, V);
    for (std::size_t i = 0; i < nE; ++i) d_lnf[i] += tmp[i];
  }
  std::vector<T> dx(nE, T(0));
  k::layernorm_backward<T>(dx, gs(layout_.lnf_g(), E), gs(layout_.lnf_b(), E), d_lnf, cs(c.x_out), cs(c.lnf_mean),
                           cs(c.lnf_rstd), ps(layout_.lnf_g(), E), n, E);

  std::vector<T> d_act(4 * nE), d_fc(4 * nE), d_ln(nE), d_mid(nE), d_att(nE), d_qkv(3 * nE);
  std::vector<T> dk(static_cast<std::size_t>(Lk) * E), dv(static_cast<std::size_t>(Lk) * E);
  for (int l = cfg_.num_layers - 1; l >= 0; --l) {
    const auto& a = c.layers[l];
    const auto& w = layout_.layer(l);
    // x_out = x_mid + gelu(ln2(x_mid) W_fc + b_fc) W_mlp + b_mlp
    k::linear_backward<T>(d_act, gs(w.mlp_w, 4ull * E * E), gs(w.mlp_b, E), dx, cs(a.fc_act),
                          ps(w.mlp_w, 4ull * E * E), n, 4 * E, E);
    k::gelu_backward<T>(d_fc, d_act, cs(a.fc));
    k::linear_backward<T>(d_ln, gs(w.fc_w, 4ull * E * E), gs(w.fc_b, 4 * E), d_fc, cs(a.ln2), ps(w.fc_w, 4ull * E * E),
                          n, E, 4 * E);
    d_mid = dx;
    k::layernorm_backward<T>(d_mid, gs(w.ln2_g, E), gs(w.ln2_b, E), d_ln, cs(a.x_mid), cs(a.ln2_mean),
                             cs(a.ln2_rstd), ps(w.ln2_g, E), n, E);
    // x_mid = x_in + attn(ln1(x_in)) W_proj + b_proj
    k::linear_backward<T>(d_att, gs(w.proj_w, static_cast<std::size_t>(E) * E), gs(w.proj_b, E), d_mid, cs(a.att),
                          ps(w.proj_w, static_cast<std::size_t>(E) * E), n, E, E);
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    k::attention_backward<T>(d_qkv, dk, dv, d_att, cs(a.probs), cs(a.qkv), 3 * E, cs(a.k_all), cs(a.v_all), n, Lk, E,
                             H);
    for (int i = 0; i < n; ++i) {
      T* row = d_qkv.data() + static_cast<std::size_t>(i) * 3 * E;
      std::copy_n(dk.begin() + static_cast<std::size_t>(M + i) * E, E, row + E);
      std::copy_n(dv.begin() + static_cast<std::size_t>(M + i) * E, E, row + 2 * E);
    }
    if (!d_prefix.empty()) {
      const int D = cfg_.activation_dim();
      for (int j = 0; j < M; ++j) {
        T* pr = d_prefix.data() + static_cast<std::size_t>(j) * D;
        for (int e = 0; e < E; ++e) {
          pr[2 * l * E + e] += dk[static_cast<std::size_t>(j) * E + e];
          pr[(2 * l + 1) * E + e] += dv[static_cast<std::size_t>(j) * E + e];
        }
      }
    }
    k::linear_backward<T>(d_ln, gs(w.qkv_w, 3ull * E * E), gs(w.qkv_b, 3 * E), d_qkv, cs(a.ln1),
                          ps(w.qkv_w, 3ull * E * E), n, E, 3 * E);
    dx = d_mid;
    k::layernorm_backward<T>(dx, gs(w.ln1_g, E), gs(w.ln1_b, E), d_ln, cs(a.x_in), cs(a.ln1_mean), cs(a.ln1_rstd),
                             ps(w.ln1_g, E), n, E);
  }
  if (wg) {
    for (int i = 0; i < n; ++i) {
      T* te = d_params.data() + layout_.wte() + static_cast<std::size_t>(c.tokens[i]) * E;
      T* pe = d_params.data() + layout_.wpe() + static_cast<std::size_t>(c.pos_offset + i) * E;
      for (int e = 0; e < E; ++e) {
        te[e] += dx[static_cast<std::size_t>(i) * E + e];
        if (cfg_.use_positions) pe[e] += dx[static_cast<std::size_t>(i) * E + e];
      }
    }
  }
}

template <class T>
SequenceScore<T> Transformer<T>::sequence_log_prob(const TokenSequence& seq, const PrefixKV<T>* prefix) const {
  const auto inputs = teacher_inputs(seq, cfg_.bos_id);
  ForwardCache<T> c;
  forward(inputs, prefix, c);
  const int n = c.n, V = cfg_.vocab_size;
  std::vector<T> lp(c.logits.size());
  k::log_softmax_rows<T>(lp, c.logits, n, V);
  SequenceScore<T> out;
  out.token_log_probs.resize(n);
  for (int t = 0; t < n; ++t) {
    out.token_log_probs[t] = lp[static_cast<std::size_t>(t) * V + seq[t]];
    out.total += out.token_log_probs[t];
  }
  return out;
}

template <class T>
T Transformer<T>::score_with_grad(const TokenSequence& targets, std::span<const Token> inputs,
                                  const PrefixKV<T>* prefix, T scale, std::span<T> d_params, std::span<T> d_prefix,
                                  ForwardCache<T>& c) const {
  require(targets.size() == inputs.size() && !targets.empty(), "score: inputs and targets must match and be non-empty");
  check_tokens(targets);
  forward(inputs, prefix, c);
  const int n = c.n, V = cfg_.vocab_size;
  std::vector<T> lp(c.logits.size());
  k::log_softmax_rows<T>(lp, c.logits, n, V);
  T total = 0;
  for (int t = 0; t < n; ++t) total += lp[static_cast<std::size_t>(t) * V + targets[t]];
  if (scale != T(0) && (!d_params.empty() || !d_prefix.empty())) {
    // d(sum_t log p_t)/d logits = onehot - softmax
    std::vector<T> dl(lp.size());
    for (int t = 0; t < n; ++t)
      for (int v = 0; v < V; ++v) {
        const std::size_t i = static_cast<std::size_t>(t) * V + v;
        dl[i] = scale * ((v == targets[t] ? T(1) : T(0)) - std::exp(lp[i]));
      }
    backward(c, dl, {}, d_params, d_prefix);
  }
  return total;
}

template <class T>
std::vector<T> Transformer<T>::continuation_log_probs(const TokenSequence& context, const TokenSequence& continuation,
                                                      const PrefixKV<T>* prefix) const {
  if (continuation.empty()) return {};
  TokenSequence inputs{cfg_.bos_id};
  inputs.insert(inputs.end(), context.begin(), context.end());
  inputs.insert(inputs.end(), continuation.begin(), continuation.end() - 1);
  ForwardCache<T> c;
  forward(inputs, prefix, c);
  const int V = cfg_.vocab_size;
  std::vector<T> lp(c.logits.size());
  k::log_softmax_rows<T>(lp, c.logits, c.n, V);
  std::vector<T> out(continuation.size());
  const std::size_t start = context.size();
  for (std::size_t i = 0; i < continuation.size(); ++i) out[i] = lp[(start + i) * V + continuation[i]];
  return out;
}

namespace {

// Key/value buffers for incremental decoding; prefix rows sit first.
template <class T>
struct KvState {
  std::vector<std::vector<T>> k, v;
  int length = 0;
};

template <class T>
void decode_step(const Transformer<T>& m, std::span<const Token> tokens, KvState<T>& kv, std::vector<T>& last_logits) {
  const auto& cfg = m.config();
  const auto& L = m.layout();
  const int n = static_cast<int>(tokens.size());
  const int E = cfg.hidden_size, H = cfg.num_heads, V = cfg.vocab_size;
  const std::size_t nE = static_cast<std::size_t>(n) * E;
  const T* P = m.params().data();
  auto ps = [&](std::size_t off, std::size_t len) { return std::span<const T>(P + off, len); };
  auto cs = [](const std::vector<T>& v) { return std::span<const T>(v); };
  if (kv.length + n > cfg.max_positions) throw Error("generate: context exceeds max_positions");

  std::vector<T> x(nE), ln(nE), mean(n), rstd(n), qkv(3 * nE), att(nE), tmp(nE), fc(4 * nE), act(4 * nE);
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < E; ++e)
      x[static_cast<std::size_t>(i) * E + e] =
          P[L.wte() + static_cast<std::size_t>(tokens[i]) * E + e] +
          (cfg.use_positions ? P[L.wpe() + static_cast<std::size_t>(kv.length + i) * E + e] : T(0));
  const int Lk = kv.length + n;
  std::vector<T> probs(static_cast<std::size_t>(H) * n * Lk);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& w = L.layer(l);
    k::layernorm_forward<T>(ln, mean, rstd, cs(x), ps(w.ln1_g, E), ps(w.ln1_b, E), n, E);
    k::linear_forward<T>(qkv, cs(ln), ps(w.qkv_w, 3ull * E * E), ps(w.qkv_b, 3 * E), n, E, 3 * E);
    auto& K = kv.k[l];
    auto& Vv = kv.v[l];
    for (int i = 0; i < n; ++i) {
      const T* row = qkv.data() + static_cast<std::size_t>(i) * 3 * E;
      std::copy(row + E, row + 2 * E, K.begin() + static_cast<std::size_t>(kv.length + i) * E);
      std::copy(row + 2 * E, row + 3 * E, Vv.begin() + static_cast<std::size_t>(kv.length + i) * E);
    }
    k::attention_forward<T>(att, probs, cs(qkv), 3 * E, std::span<const T>(K.data(), static_cast<std::size_t>(Lk) * E),
                            std::span<const T>(Vv.data(), static_cast<std::size_t>(Lk) * E), n, Lk, E, H);
    k::linear_forward<T>(tmp, cs(att), ps(w.proj_w, static_cast<std::size_t>(E) * E), ps(w.proj_b, E), n, E, E);
    for (std::size_t i = 0; i < nE; ++i) x[i] += tmp[i];
    k::layernorm_forward<T>(ln, mean, rstd, cs(x), ps(w.ln2_g, E), ps(w.ln2_b, E), n, E);
    k::linear_forward<T>(fc, cs(ln), ps(w.fc_w, 4ull * E * E), ps(w.fc_b, 4 * E), n, E, 4 * E);
    k::gelu_forward<T>(act, cs(fc));
    k::linear_forward<T>(tmp, cs(act), ps(w.mlp_w, 4ull * E * E), ps(w.mlp_b, E), n, 4 * E, E);
    for (std::size_t i = 0; i < nE; ++i) x[i] += tmp[i];
  }
  kv.length += n;
  // Only the last row's logits are needed.
  std::span<const T> last(x.data() + (nE - E), E);
  std::vector<T> lnf(E), m1(1), r1(1);
  k::layernorm_forward<T>(lnf, m1, r1, last, ps(L.lnf_g(), E), ps(L.lnf_b(), E), 1, E);
  last_logits.resize(V);
  k::linear_forward<T>(last_logits, cs(lnf), ps(L.lm_head(), static_cast<std::size_t>(E) * V), {}, 1, E, V);
}

}  // namespace

template <class T>
TokenSequence Transformer<T>::generate(const TokenSequence& prompt, const PrefixKV<T>* prefix,
                                       const SamplingParams& sampling, bool use_cache) const {
  sampling.validate();
  check_tokens(prompt);
  TokenSequence out = prompt;
  if (sampling.max_new == 0) return out;
  const int M = prefix ? prefix->length() : 0;
  const int E = cfg_.hidden_size;
  if (prefix) require(prefix->dim() == cfg_.activation_dim(), "generate: prefix dim does not match 2*L*E");
  const int room = cfg_.max_positions - M - 1 - static_cast<int>(prompt.size());
  require(room >= 1, "generate: prompt plus prefix leaves no room for new tokens");
  const int max_new = std::min(sampling.max_new, room);
  Rng rng(sampling.seed);

  TokenSequence ctx{cfg_.bos_id};
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());
  if (!use_cache) {
    for (int s = 0; s < max_new; ++s) {
      ForwardCache<T> c;
      forward(ctx, prefix, c);
      auto last = std::span<const T>(c.logits).subspan(c.logits.size() - cfg_.vocab_size);
      const Token t = sample_token<T>(last, sampling, rng, cfg_);
      ctx.push_back(t);
      out.push_back(t);
    }
    return out;
  }
  KvState<T> kv;
  kv.k.assign(cfg_.num_layers, std::vector<T>(static_cast<std::size_t>(cfg_.max_positions) * E));
  kv.v.assign(cfg_.num_layers, std::vector<T>(static_cast<std::size_t>(cfg_.max_positions) * E));
  for (int l = 0; l < cfg_.num_layers; ++l)
    for (int j = 0; j < M; ++j) {
      auto kr = prefix->key(l, j, E);
      auto vr = prefix->value(l, j, E);
      std::copy(kr.begin(), kr.end(), kv.k[l].begin() + static_cast<std::size_t>(j) * E);
      std::copy(vr.begin(), vr.end(), kv.v[l].begin() + static_cast<std::size_t>(j) * E);
    }
  kv.length = M;
  std::vector<T> logits;
  decode_step(*this, ctx, kv, logits);
  for (int s = 0; s < max_new; ++s) {
    const Token t = sample_token<T>(logits, sampling, rng, cfg_);
    out.push_back(t);
    if (s + 1 < max_new) decode_step(*this, std::span<const Token>(&t, 1), kv, logits);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder

template <class T>
Encoder<T>::Encoder(Transformer<T> body, int num_heads, int out_dim)
    : body_(std::move(body)), num_heads_(num_heads), out_dim_(out_dim) {
  require(num_heads >= 1 && out_dim >= 1, "encoder: need at least one head of positive width");
  heads_.assign(head_stride() * num_heads, T(0));
}

template <class T>
std::size_t Encoder<T>::head_stride() const {
  return static_cast<std::size_t>(body_.config().hidden_size + 1) * out_dim_;
}

template <class T>
Encoder<T> Encoder<T>::from_decoder(const Transformer<T>& decoder, int num_heads, int out_dim, std::uint64_t seed,
                                    double init_std) {
  Encoder enc(decoder, num_heads, out_dim);
  Rng rng(seed);
  const std::size_t wsize = static_cast<std::size_t>(decoder.config().hidden_size) * out_dim;
  for (int h = 0; h < num_heads; ++h)
    for (std::size_t i = 0; i < wsize; ++i) enc.heads_[h * enc.head_stride() + i] = static_cast<T>(init_std * rng.normal());
  return enc;
}

template <class T>
template <class U>
Encoder<U> Encoder<T>::cast() const {
  Encoder<U> out(body_.template cast<U>(), num_heads_, out_dim_);
  auto dst = out.head_params();
  for (std::size_t i = 0; i < heads_.size(); ++i) dst[i] = static_cast<U>(heads_[i]);
  return out;
}

namespace {
TokenSequence strip_pad(const TokenSequence& seq, Token pad) {
  auto end = seq.end();
  while (end != seq.begin() && *(end - 1) == pad) --end;
  return TokenSequence(seq.begin(), end);
}
}  // namespace

template <class T>
void Encoder<T>::forward(const TokenSequence& seq, Pass& pass) const {
  const auto tokens = strip_pad(seq, body_.config().pad_id);
  require(!tokens.empty(), "encode: empty sequence");
  body_.forward(tokens, nullptr, pass.cache, 0, false);
  const int E = body_.config().hidden_size;
  pass.pooled_row = pass.cache.n - 1;
  std::span<const T> pooled(pass.cache.lnf.data() + static_cast<std::size_t>(pass.pooled_row) * E, E);
  pass.outputs.resize(num_heads_);
  for (int h = 0; h < num_heads_; ++h) {
    pass.outputs[h].resize(out_dim_);
    const T* W = heads_.data() + h * head_stride();
    k::linear_forward<T>(pass.outputs[h], pooled, std::span<const T>(W, static_cast<std::size_t>(E) * out_dim_),
                         std::span<const T>(W + static_cast<std::size_t>(E) * out_dim_, out_dim_), 1, E, out_dim_);
  }
}

template <class T>
std::vector<T> Encoder<T>::encode(const TokenSequence& seq, int head) const {
  require(head >= 0 && head < num_heads_, "encode: head index out of range");
  Pass p;
  forward(seq, p);
  return std::move(p.outputs[head]);
}

template <class T>
void Encoder<T>::backward(const Pass& pass, std::span<const std::vector<T>> d_outputs, std::span<T> d_body,
                          std::span<T> d_heads) const {
  const int E = body_.config().hidden_size;
  const int n = pass.cache.n;
  std::span<const T> pooled(pass.cache.lnf.data() + static_cast<std::size_t>(pass.pooled_row) * E, E);
  std::vector<T> d_hidden(static_cast<std::size_t>(n) * E, T(0));
  std::span<T> d_pooled(d_hidden.data() + static_cast<std::size_t>(pass.pooled_row) * E, E);
  std::vector<T> tmp(E);
  bool any = false;
  for (int h = 0; h < num_heads_ && h < static_cast<int>(d_outputs.size()); ++h) {
    if (d_outputs[h].empty()) continue;
    any = true;
    const T* W = heads_.data() + h * head_stride();
    std::span<T> dW, db;
    if (!d_heads.empty()) {
      dW = d_heads.subspan(h * head_stride(), static_cast<std::size_t>(E) * out_dim_);
      db = d_heads.subspan(h * head_stride() + static_cast<std::size_t>(E) * out_dim_, out_dim_);
    }
    k::linear_backward<T>(tmp, dW, db, d_outputs[h], pooled,
                          std::span<const T>(W, static_cast<std::size_t>(E) * out_dim_), 1, E, out_dim_);
    for (int e = 0; e < E; ++e) d_pooled[e] += tmp[e];
  }
  if (any && !d_body.empty()) body_.backward(pass.cache, {}, d_hidden, d_body, {});
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_header(io::Writer& w, const ModelConfig& c) {
  w.magic("PFXM");
  w.u32(kModelFormatVersion);
  for (int v : {c.num_layers, c.hidden_size, c.num_heads, c.vocab_size, c.max_positions, c.pad_id, c.mask_id,
                c.bos_id, c.use_positions ? 1 : 0})
    w.i32(v);
}

ModelConfig read_header(io::Reader& r) {
  r.expect_magic("PFXM");
  const auto ver = r.u32();
  if (ver != kModelFormatVersion) throw Error("model file version " + std::to_string(ver) + " is not supported");
  ModelConfig c;
  c.num_layers = r.i32();
  c.hidden_size = r.i32();
  c.num_heads = r.i32();
  c.vocab_size = r.i32();
  c.max_positions = r.i32();
  c.pad_id = r.i32();
  c.mask_id = r.i32();
  c.bos_id = r.i32();
  c.use_positions = r.i32() != 0;
  c.validate();
  return c;
}

void write_tensor(io::Writer& w, const std::string& name, int rows, int cols, std::span<const float> data) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(rows));
  w.u32(static_cast<std::uint32_t>(cols));
  w.floats(data);
}

void read_model_tensors(io::Reader& r, Transformer<float>& m, std::uint32_t count) {
  const auto& layout = m.layout();
  if (count != layout.specs().size()) throw Error("model file tensor count does not match its config");
  for (const auto& s : layout.specs()) {
    const auto name = r.str();
    const auto rows = r.u32(), cols = r.u32();
    if (name != s.name || rows != static_cast<std::uint32_t>(s.rows) || cols != static_cast<std::uint32_t>(s.cols))
      throw Error("model file tensor " + name + " does not match expected " + s.name);
    const auto data = r.floats(s.size());
    for (float v : data)
      if (!std::isfinite(v)) throw Error("model file tensor " + name + " contains non-finite values");
    std::copy(data.begin(), data.end(), m.params().begin() + s.offset);
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Transformer<float>& model) {
  io::Writer w;
  write_header(w, model.config());
  w.u32(static_cast<std::uint32_t>(model.layout().specs().size()));
  for (const auto& s : model.layout().specs())
    write_tensor(w, s.name, s.rows, s.cols, model.params().subspan(s.offset, s.size()));
  return std::move(w.buffer());
}

Transformer<float> deserialize_model(std::span<const std::uint8_t> data) {
  io::Reader r(data);
  const auto cfg = read_header(r);
  Transformer<float> m(cfg);
  read_model_tensors(r, m, r.u32());
  return m;
}

void save_model(const Transformer<float>& model, const std::string& path) {
  io::write_file(path, serialize_model(model));
}

Transformer<float> load_model(const std::string& path) { return deserialize_model(io::read_file(path)); }

void save_encoder(const Encoder<float>& enc, const std::string& path) {
  io::Writer w;
  const auto& body = enc.body();
  write_header(w, body.config());
  w.u32(static_cast<std::uint32_t>(body.layout().specs().size() + 2 * enc.num_heads()));
  for (const auto& s : body.layout().specs())
    write_tensor(w, s.name, s.rows, s.cols, body.params().subspan(s.offset, s.size()));
  const int E = body.config().hidden_size;
  for (int h = 0; h < enc.num_heads(); ++h) {
    auto hp = enc.head_params().subspan(h * enc.head_stride(), enc.head_stride());
    write_tensor(w, "head." + std::to_string(h) + ".w", E, enc.out_dim(),
                 hp.subspan(0, static_cast<std::size_t>(E) * enc.out_dim()));
    write_tensor(w, "head." + std::to_string(h) + ".b", 1, enc.out_dim(),
                 hp.subspan(static_cast<std::size_t>(E) * enc.out_dim()));
  }
  io::write_file(path, w.buffer());
}

Encoder<float> load_encoder(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes);
  const auto cfg = read_header(r);
  Transformer<float> body(cfg);
  const auto count = r.u32();
  const auto nbody = body.layout().specs().size();
  if (count < nbody + 2 || (count - nbody) % 2 != 0) throw Error("encoder file has an unexpected tensor count");
  read_model_tensors(r, body, static_cast<std::uint32_t>(nbody));
  const int heads = static_cast<int>((count - nbody) / 2);
  std::vector<std::vector<float>> parts;
  int out_dim = 0;
  for (int i = 0; i < 2 * heads; ++i) {
    r.str();
    const auto rows = r.u32(), cols = r.u32();
    out_dim = static_cast<int>(cols);
    parts.push_back(r.floats(static_cast<std::size_t>(rows) * cols));
  }
  Encoder<float> enc(std::move(body), heads, out_dim);
  auto dst = enc.head_params();
  std::size_t off = 0;
  for (const auto& p : parts) {
    if (off + p.size() > dst.size()) throw Error("encoder file head shapes are inconsistent");
    std::copy(p.begin(), p.end(), dst.begin() + off);
    off += p.size();
  }
  if (off != dst.size()) throw Error("encoder file head shapes are inconsistent");
  return enc;
}

template class PrefixKV<float>;
template class PrefixKV<double>;
template class Transformer<float>;
template class Transformer<double>;
template class Encoder<float>;
template class Encoder<double>;
template PrefixKV<float> concat_prefixes<float>(std::span<const PrefixKV<float>>);
template PrefixKV<double> concat_prefixes<double>(std::span<const PrefixKV<double>>);
template Token sample_token<float>(std::span<const float>, const SamplingParams&, Rng&, const ModelConfig&);
template Token sample_token<double>(std::span<const double>, const SamplingParams&, Rng&, const ModelConfig&);
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template Encoder<double> Encoder<float>::cast<double>() const;
template Encoder<float> Encoder<double>::cast<float>() const;

}  // namespace pfx
