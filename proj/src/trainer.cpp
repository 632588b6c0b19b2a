#include "pfx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pfx/io.hpp"
#include "pfx/kernels.hpp"

namespace pfx {

Regime parse_regime(std::string_view s) {
  if (s == "pretrain") return Regime::pretrain;
  if (s == "supervised") return Regime::supervised;
  if (s == "unsupervised") return Regime::unsupervised;
  if (s == "semi") return Regime::semi;
  throw Error("unknown regime '" + std::string(s) + "' (pretrain, supervised, unsupervised, semi)");
}

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::pretrain: return "pretrain";
    case Regime::supervised: return "supervised";
    case Regime::unsupervised: return "unsupervised";
    case Regime::semi: return "semi";
  }
  return "?";
}

TrainConfig TrainConfig::defaults(Regime regime) {
  TrainConfig c;
  c.regime = regime;
  switch (regime) {
    case Regime::pretrain:
      c.learning_rate = 1e-3;
      c.batch_size = 16;
      c.epochs = 1;
      c.weight_decay = 0.01;
      c.objective.omega1 = 1.0;
      c.objective.omega2 = 0.0;
      break;
    case Regime::supervised:
      c.objective.omega1 = 0.8;
      c.objective.omega2 = 0.2;
      c.objective.omega3 = 0.0;
      break;
    case Regime::unsupervised:
      c.objective.omega1 = 0.8;
      c.objective.omega2 = 0.0;  // the KL weight follows the schedule instead
      c.objective.omega3 = 2.0;
      break;
    case Regime::semi:
      c.objective.omega1 = 0.8;
      c.objective.omega2 = 0.2;
      c.objective.omega3 = 0.4;
      break;
  }
  return c;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error("config: " + key + " expects a number, got '" + v + "'");
}

long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long d = std::stol(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error("config: " + key + " expects an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config: " + key + " expects true or false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

void apply(TrainConfig& c, const std::string& key, const std::string& v) {
  auto& o = c.objective;
  if (key == "regime") c.regime = parse_regime(v);
  else if (key == "batch_size") c.batch_size = static_cast<int>(to_long(key, v));
  else if (key == "epochs") c.epochs = static_cast<int>(to_long(key, v));
  else if (key == "max_steps") c.max_steps = to_long(key, v);
  else if (key == "learning_rate") c.learning_rate = to_double(key, v);
  else if (key == "encoder_learning_rate") c.encoder_learning_rate = to_double(key, v);
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_long(key, v));
  else if (key == "weight_decay") c.weight_decay = to_double(key, v);
  else if (key == "beta1") c.beta1 = to_double(key, v);
  else if (key == "beta2") c.beta2 = to_double(key, v);
  else if (key == "eps") c.eps = to_double(key, v);
  else if (key == "grad_clip") c.grad_clip = to_double(key, v);
  else if (key == "omega1") o.omega1 = to_double(key, v);
  else if (key == "omega2") o.omega2 = to_double(key, v);
  else if (key == "omega3") o.omega3 = to_double(key, v);
  else if (key == "margin") o.margin = to_double(key, v);
  else if (key == "mask_rate") o.mask_rate = to_double(key, v);
  else if (key == "tau_start") o.tau_start = to_double(key, v);
  else if (key == "tau_end") o.tau_end = to_double(key, v);
  else if (key == "kl_start") o.kl_start = to_double(key, v);
  else if (key == "kl_end") o.kl_end = to_double(key, v);
  else if (key == "schedule_steps") o.schedule_steps = to_long(key, v);
  else if (key == "contrast_norm") {
    if (v != "vector" && v != "scalar") throw Error("config: contrast_norm must be vector or scalar");
    o.contrast_vector = v == "vector";
  } else if (key == "length_normalize_ld") o.length_normalize_ld = to_bool(key, v);
  else if (key == "warm_steps") c.warm_steps = to_long(key, v);
  else if (key == "prefix_length") c.prefix_length = static_cast<int>(to_long(key, v));
  else if (key == "bottleneck_dim") c.bottleneck_dim = static_cast<int>(to_long(key, v));
  else if (key == "init_std") c.init_std = to_double(key, v);
  else if (key == "pos_offset_max") c.pos_offset_max = static_cast<int>(to_long(key, v));
  else if (key.starts_with("filter.")) {
    const auto dot = key.rfind('.');
    const auto aspect = key.substr(7, dot - 7);
    const auto field = key.substr(dot + 1);
    if (aspect.empty() || dot <= 7) throw Error("config: malformed filter key " + key);
    if (field == "top_k") c.filters[aspect].top_k = static_cast<int>(to_long(key, v));
    else if (field == "top_p") c.filters[aspect].top_p = to_double(key, v);
    else throw Error("config: unknown filter field in " + key);
  } else {
    throw Error("config: unknown key '" + key + "'");
  }
}

}  // namespace

TrainConfig TrainConfig::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(line_no) + ": expected key = value");
    auto key = trim(std::string_view(t).substr(0, eq));
    auto value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw Error("config line " + std::to_string(line_no) + ": empty key");
    pairs.emplace_back(std::move(key), std::move(value));
  }
  TrainConfig c;
  for (const auto& [k, v] : pairs)
    if (k == "regime") c = defaults(parse_regime(v));
  for (const auto& [k, v] : pairs) apply(c, k, v);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  const auto bytes = io::read_file(path);
  return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string TrainConfig::to_text() const {
  const auto& o = objective;
  std::ostringstream s;
  s << "regime = " << regime_name(regime) << "\n"
    << "batch_size = " << batch_size << "\n"
    << "epochs = " << epochs << "\n"
    << "max_steps = " << max_steps << "\n"
    << "learning_rate = " << fmt(learning_rate) << "\n"
    << "encoder_learning_rate = " << fmt(encoder_learning_rate) << "\n"
    << "seed = " << seed << "\n"
    << "weight_decay = " << fmt(weight_decay) << "\n"
    << "beta1 = " << fmt(beta1) << "\n"
    << "beta2 = " << fmt(beta2) << "\n"
    << "eps = " << fmt(eps) << "\n"
    << "grad_clip = " << fmt(grad_clip) << "\n"
    << "omega1 = " << fmt(o.omega1) << "\n"
    << "omega2 = " << fmt(o.omega2) << "\n"
    << "omega3 = " << fmt(o.omega3) << "\n"
    << "margin = " << fmt(o.margin) << "\n"
    << "mask_rate = " << fmt(o.mask_rate) << "\n"
    << "tau_start = " << fmt(o.tau_start) << "\n"
    << "tau_end = " << fmt(o.tau_end) << "\n"
    << "kl_start = " << fmt(o.kl_start) << "\n"
    << "kl_end = " << fmt(o.kl_end) << "\n"
    << "schedule_steps = " << o.schedule_steps << "\n"
    << "contrast_norm = " << (o.contrast_vector ? "vector" : "scalar") << "\n"
    << "length_normalize_ld = " << (o.length_normalize_ld ? "true" : "false") << "\n"
    << "warm_steps = " << warm_steps << "\n"
    << "prefix_length = " << prefix_length << "\n"
    << "bottleneck_dim = " << bottleneck_dim << "\n"
    << "init_std = " << fmt(init_std) << "\n"
    << "pos_offset_max = " << pos_offset_max << "\n";
  for (const auto& [aspect, f] : filters)
    s << "filter." << aspect << ".top_k = " << f.top_k << "\n"
      << "filter." << aspect << ".top_p = " << fmt(f.top_p) << "\n";
  return s.str();
}

std::string TrainConfig::hash() const { return io::content_hash(to_text()); }

void TrainConfig::validate() const {
  require(batch_size >= 1, "config: batch_size must be >= 1");
  require(epochs >= 0 && max_steps >= 0, "config: epochs and max_steps must be >= 0");
  require(learning_rate > 0, "config: learning_rate must be > 0");
  require(encoder_learning_rate >= 0, "config: encoder_learning_rate must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0, "config: invalid Adam constants");
  require(grad_clip >= 0 && weight_decay >= 0, "config: grad_clip and weight_decay must be >= 0");
  require(prefix_length >= 1 && bottleneck_dim >= 0 && init_std >= 0, "config: invalid prefix shape");
  require(warm_steps >= 0 && pos_offset_max >= 0, "config: warm_steps and pos_offset_max must be >= 0");
  for (const auto& [aspect, f] : filters)
    require(f.top_k >= 0 && f.top_p > 0 && f.top_p <= 1, "config: invalid filter for aspect " + aspect);
  objective.validate();
}

std::vector<Example> to_examples(std::span<const CorpusRecord> records, std::span<const AspectSpec> specs) {
  std::vector<Example> out;
  for (const auto& r : records) {
    Example e{r.tokens, std::vector<int>(specs.size(), -1)};
    for (const auto& [aspect, attr] : r.labels) {
      auto it = std::find_if(specs.begin(), specs.end(), [&](const AspectSpec& s) { return s.name == aspect; });
      if (it == specs.end()) continue;  // labels for aspects not being trained are dropped
      e.labels[it - specs.begin()] = it->attribute_index(attr);
      require(e.labels[it - specs.begin()] >= 0, "unknown attribute " + attr + " for aspect " + aspect);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<LossParts> TrainResult::epoch_means() const {
  std::vector<LossParts> out;
  std::vector<int> counts;
  for (const auto& s : log) {
    if (s.epoch >= static_cast<int>(out.size())) {
      out.resize(s.epoch + 1);
      counts.resize(s.epoch + 1, 0);
    }
    out[s.epoch] += s.loss;
    ++counts[s.epoch];
  }
  for (std::size_t e = 0; e < out.size(); ++e)
    if (counts[e] > 0) out[e] = out[e].scaled(1.0 / counts[e]);
  return out;
}

namespace {
long steps_per_epoch(const TrainConfig& cfg, std::size_t n) {
  return static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
}
}  // namespace

long total_steps(const TrainConfig& cfg, std::size_t n) {
  const long main = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch(cfg, n);
  return main + (cfg.regime == Regime::semi ? cfg.warm_steps : 0);
}

std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t n, long step) {
  require(n > 0, "training data is empty");
  const long spe = steps_per_epoch(cfg, n);
  const long epoch = step / spe, within = step % spe;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, {0x0e9c0ULL, static_cast<std::uint64_t>(epoch)}));
  rng.shuffle(order);
  const std::size_t begin = static_cast<std::size_t>(within) * cfg.batch_size;
  const std::size_t end = std::min(n, begin + cfg.batch_size);
  return {order.begin() + begin, order.begin() + end};
}

double adamw_step(OptimizerState& state, std::span<const std::vector<float>> grads, const TrainConfig& cfg,
                  double lr) {
  require(grads.size() == state.groups.size(), "optimizer: one gradient per parameter group");
  double sq = 0;
  for (const auto& g : grads)
    for (float v : g) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error("training diverged: non-finite gradient norm");
  const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
  const long t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t gi = 0; gi < state.groups.size(); ++gi) {
    auto& grp = state.groups[gi];
    const auto& g = grads[gi];
    require(g.size() == grp.params.size(), "optimizer: gradient size mismatch for " + grp.name);
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const float step_lr = static_cast<float>(lr * grp.lr_scale);
    const float wd = static_cast<float>(cfg.weight_decay), eps = static_cast<float>(cfg.eps);
    const float c = static_cast<float>(clip), f1 = static_cast<float>(1.0 / bc1), f2 = static_cast<float>(1.0 / bc2);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float gi_c = g[i] * c;
      grp.m[i] = b1 * grp.m[i] + (1.0f - b1) * gi_c;
      grp.v[i] = b2 * grp.v[i] + (1.0f - b2) * gi_c * gi_c;
      const float mh = grp.m[i] * f1, vh = grp.v[i] * f2;
      grp.params[i] -= step_lr * (mh / (std::sqrt(vh) + eps) + wd * grp.params[i]);
    }
  }
  state.step = t;
  return norm;
}

void save_checkpoint(const OptimizerState& state, const std::string& config_hash, const std::string& path) {
  io::Writer w;
  w.magic("PFXC");
  w.u32(kCheckpointVersion);
  w.u64(static_cast<std::uint64_t>(state.step));
  w.str(config_hash);
  w.u32(static_cast<std::uint32_t>(state.groups.size()));
  for (const auto& g : state.groups) {
    w.str(g.name);
    w.u64(g.params.size());
    w.floats(g.params);
    w.floats(g.m);
    w.floats(g.v);
  }
  const auto crc = io::crc32(w.buffer());
  w.u32(crc);
  io::write_file(path, w.buffer());
}

void load_checkpoint(OptimizerState& state, const std::string& config_hash, const std::string& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 8) throw Error("checkpoint " + path + " is truncated");
  const std::span<const std::uint8_t> body(bytes.data(), bytes.size() - 4);
  io::Reader tail(std::span<const std::uint8_t>(bytes).subspan(bytes.size() - 4));
  if (io::crc32(body) != tail.u32()) throw Error("checkpoint " + path + " failed its checksum; refusing to load");
  io::Reader r(body);
  r.expect_magic("PFXC");
  const auto ver = r.u32();
  if (ver != kCheckpointVersion) throw Error("checkpoint version " + std::to_string(ver) + " is not supported");
  const auto step = static_cast<long>(r.u64());
  const auto hash = r.str();
  if (hash != config_hash) throw Error("checkpoint was written under a different training config");
  const auto n = r.u32();
  if (n != state.groups.size()) throw Error("checkpoint has a different set of parameter groups");
  for (auto& g : state.groups) {
    const auto name = r.str();
    const auto count = r.u64();
    if (name != g.name || count != g.params.size()) throw Error("checkpoint group " + name + " does not match " + g.name);
    const auto p = r.floats(count);
    std::copy(p.begin(), p.end(), g.params.begin());
    g.m = r.floats(count);
    g.v = r.floats(count);
  }
  state.step = step;
}

namespace {

ParamGroup make_group(std::string name, std::span<float> params, double lr_scale = 1.0) {
  return {std::move(name), params, std::vector<float>(params.size(), 0.0f), std::vector<float>(params.size(), 0.0f),
          lr_scale};
}

// Shared driver: fn(step, batch, grads) fills gradients and returns the batch loss.
template <class Fn>
void run_loop(OptimizerState& state, const TrainConfig& cfg, std::size_t n, const TrainHooks& hooks,
              const std::function<double(long)>& lr_at, TrainResult& result, Fn fn) {
  require(n > 0, "training data is empty");
  if (!hooks.resume_from.empty()) load_checkpoint(state, cfg.hash(), hooks.resume_from);
  const long total = total_steps(cfg, n);
  const long end = hooks.stop_after_steps >= 0 ? std::min(total, hooks.stop_after_steps) : total;
  const long spe = steps_per_epoch(cfg, n);
  std::vector<std::vector<float>> grads;
  for (const auto& g : state.groups) grads.emplace_back(g.params.size(), 0.0f);
  for (long step = state.step; step < end; ++step) {
    for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
    const auto batch = batch_indices(cfg, n, step);
    StepLog log;
    log.step = step;
    log.epoch = static_cast<int>(step / spe);
    log.loss = fn(step, batch, grads);
    log.grad_norm = adamw_step(state, grads, cfg, lr_at(step));
    result.log.push_back(log);
    if (hooks.on_step) hooks.on_step(log);
    if (!hooks.checkpoint_path.empty() && hooks.checkpoint_every > 0 && state.step % hooks.checkpoint_every == 0)
      save_checkpoint(state, cfg.hash(), hooks.checkpoint_path);
  }
  if (!hooks.checkpoint_path.empty()) save_checkpoint(state, cfg.hash(), hooks.checkpoint_path);
  result.steps = state.step;
}

Provenance provenance_of(const TrainConfig& cfg) { return {std::string(regime_name(cfg.regime)), cfg.seed, cfg.hash()}; }

double encoder_lr_scale(const TrainConfig& cfg) {
  return cfg.encoder_learning_rate > 0 ? cfg.encoder_learning_rate / cfg.learning_rate : 1.0;
}

}  // namespace

TrainResult pretrain(Transformer<float>& model, std::span<const TokenSequence> data, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  cfg.validate();
  OptimizerState state;
  state.groups.push_back(make_group("decoder", model.params()));
  TrainResult result;
  const long total = total_steps(cfg, data.size());
  const long warm = std::max(1L, total / 20);
  auto lr_at = [&](long step) {
    if (step < warm) return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double f = static_cast<double>(step - warm) / static_cast<double>(std::max(1L, total - warm));
    return cfg.learning_rate * (1.0 - 0.9 * f);
  };
  const auto& mc = model.config();
  ForwardCache<float> cache;
  run_loop(state, cfg, data.size(), hooks, lr_at, result,
           [&](long step, const std::vector<std::size_t>& batch, std::vector<std::vector<float>>& grads) {
             LossParts parts;
             const float scale = 1.0f / static_cast<float>(batch.size());
             for (std::size_t b = 0; b < batch.size(); ++b) {
               const auto& x = data[batch[b]];
               const int n = static_cast<int>(x.size());
               require(n >= 1 && n <= mc.max_positions, "pretraining sequence length out of range");
               const int room = std::min(cfg.pos_offset_max, mc.max_positions - n);
               const int offset = room > 0 ? Rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), b})).below(room + 1) : 0;
               const auto inputs = teacher_inputs(x, mc.bos_id);
               model.forward(inputs, nullptr, cache, offset);
               const int V = mc.vocab_size;
               std::vector<float> lp(cache.logits.size()), dl(cache.logits.size());
               kernels::log_softmax_rows<float>(lp, cache.logits, n, V);
               double total_lp = 0;
               for (int t = 0; t < n; ++t) {
                 total_lp += lp[static_cast<std::size_t>(t) * V + x[t]];
                 for (int v = 0; v < V; ++v) {
                   const std::size_t i = static_cast<std::size_t>(t) * V + v;
                   dl[i] = -scale * ((v == x[t] ? 1.0f : 0.0f) - std::exp(lp[i]));
                 }
               }
               model.backward(cache, dl, {}, grads[0], {});
               parts.lm -= total_lp / static_cast<double>(batch.size());
             }
             parts.total = parts.lm;
             return parts;
           });
  return result;
}

TrainResult train_supervised(const Transformer<float>& model, std::span<const Example> data,
                             const AspectSchema& schema, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  schema.validate();
  require(!data.empty(), "supervised training needs data");
  for (const auto& e : data)
    require(!e.labels.empty() && e.labels[0] >= 0 && e.labels[0] < schema.size(),
            "supervised training: every example needs a label within aspect " + schema.aspect);
  ReparamBank<float> bank(schema, cfg.prefix_length, model.config().activation_dim(), cfg.bottleneck_dim,
                          derive_seed(cfg.seed, {0xba4cULL, 0}), cfg.init_std);
  OptimizerState state;
  state.groups.push_back(make_group("bank." + schema.aspect, bank.params()));
  TrainResult result;
  run_loop(state, cfg, data.size(), hooks, [&](long) { return cfg.learning_rate; }, result,
           [&](long, const std::vector<std::size_t>& batch, std::vector<std::vector<float>>& grads) {
             const auto prefixes = bank.materialize_all();
             PrefixGrads<float> pg(prefixes);
             LossParts parts;
             const float scale = 1.0f / static_cast<float>(batch.size());
             for (auto i : batch)
               parts += supervised_example<float>(model, prefixes, data[i].tokens, data[i].labels[0], cfg.objective,
                                                  scale, pg);
             for (int z = 0; z < bank.size(); ++z) bank.backward(z, pg.rows[z], grads[0]);
             return parts.scaled(1.0 / batch.size());
           });
  result.banks.push_back(bank.export_bank(provenance_of(cfg)));
  return result;
}

std::vector<int> encoder_assignments(const Encoder<float>& encoder, int head, const PrefixBank& bank,
                                     std::span<const TokenSequence> seqs) {
  std::vector<PrefixKV<float>> prefixes;
  for (int z = 0; z < bank.size(); ++z) prefixes.push_back(bank.materialize(z));
  std::vector<int> out;
  for (const auto& s : seqs) {
    const auto e = encoder.encode(s, head);
    const auto d = prefix_distances<float>(e, prefixes);
    out.push_back(static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin()));
  }
  return out;
}

TrainResult train_unsupervised(const Transformer<float>& model, std::span<const Example> data,
                               const AspectSchema& schema, std::span<const Example> dev, const TrainConfig& cfg,
                               const TrainHooks& hooks) {
  cfg.validate();
  schema.validate();
  require(schema.size() >= 2, "unsupervised training needs N >= 2 attributes (contrast is undefined otherwise)");
  require(!data.empty(), "unsupervised training needs data");
  const int D = model.config().activation_dim();
  ReparamBank<float> bank(schema, cfg.prefix_length, D, cfg.bottleneck_dim, derive_seed(cfg.seed, {0xba4cULL, 0}),
                          cfg.init_std);
  auto encoder = Encoder<float>::from_decoder(model, 1, cfg.prefix_length * D, derive_seed(cfg.seed, {0xe4cULL}),
                                              cfg.init_std);
  OptimizerState state;
  state.groups.push_back(make_group("bank." + schema.aspect, bank.params()));
  state.groups.push_back(make_group("encoder.body", encoder.body().params(), encoder_lr_scale(cfg)));
  state.groups.push_back(make_group("encoder.heads", encoder.head_params(), encoder_lr_scale(cfg)));
  TrainResult result;
  run_loop(state, cfg, data.size(), hooks, [&](long) { return cfg.learning_rate; }, result,
           [&](long step, const std::vector<std::size_t>& batch, std::vector<std::vector<float>>& grads) {
             const auto prefixes = bank.materialize_all();
             PrefixGrads<float> pg(prefixes);
             const auto sched = schedule(cfg.objective, step);
             LossParts parts;
             const float scale = 1.0f / static_cast<float>(batch.size());
             for (std::size_t b = 0; b < batch.size(); ++b)
               parts += unsupervised_example<float>(
                   model, encoder, prefixes, data[batch[b]].tokens, cfg.objective, sched,
                   derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), b}), scale, pg,
                   EncoderGrads<float>{grads[1], grads[2]});
             for (int z = 0; z < bank.size(); ++z) bank.backward(z, pg.rows[z], grads[0]);
             return parts.scaled(1.0 / batch.size());
           });
  auto exported = bank.export_bank(provenance_of(cfg));
  std::vector<int> perm(schema.size());
  std::iota(perm.begin(), perm.end(), 0);
  if (!dev.empty()) {
    std::vector<TokenSequence> seqs;
    for (const auto& e : dev) seqs.push_back(e.tokens);
    const auto assigned = encoder_assignments(encoder, 0, exported, seqs);
    std::vector<std::vector<int>> counts(schema.size(), std::vector<int>(schema.size(), 0));
    for (std::size_t i = 0; i < dev.size(); ++i)
      if (!dev[i].labels.empty() && dev[i].labels[0] >= 0) ++counts[assigned[i]][dev[i].labels[0]];
    perm = best_alignment(counts);
  }
  result.alignment = perm;
  result.banks.push_back(align_to_schema(exported, perm));
  result.encoder = std::move(encoder);
  return result;
}

TrainResult train_semi(const Transformer<float>& model, std::span<const Example> data,
                       std::span<const AspectSchema> schemas, const TrainConfig& cfg,
                       std::span<const PrefixBank> init, const TrainHooks& hooks) {
  cfg.validate();
  require(!schemas.empty(), "semi training needs at least one aspect");
  require(!data.empty(), "semi training needs data");
  require(init.empty() || init.size() == schemas.size(), "semi training: one initial bank per aspect");
  const int K = static_cast<int>(schemas.size());
  const int D = model.config().activation_dim();
  for (const auto& e : data) {
    require(static_cast<int>(e.labels.size()) == K, "semi training: example label count differs from aspect count");
    for (int k = 0; k < K; ++k)
      require(e.labels[k] >= -1 && e.labels[k] < schemas[k].size(), "semi training: label outside aspect schema");
  }
  std::vector<ReparamBank<float>> banks;
  for (int k = 0; k < K; ++k) {
    if (!init.empty()) {
      require(init[k].schema() == schemas[k], "semi training: initial bank schema differs from aspect " + schemas[k].aspect);
      require(init[k].dim() == D && init[k].length() == cfg.prefix_length, "semi training: initial bank shape mismatch");
      banks.push_back(ReparamBank<float>::direct(init[k]));
    } else {
      banks.emplace_back(schemas[k], cfg.prefix_length, D, cfg.bottleneck_dim,
                         derive_seed(cfg.seed, {0xba4cULL, static_cast<std::uint64_t>(k)}), cfg.init_std);
    }
  }
  auto encoder = Encoder<float>::from_decoder(model, K, cfg.prefix_length * D, derive_seed(cfg.seed, {0xe4cULL}),
                                              cfg.init_std);
  std::vector<LatentFilter> filters;
  for (const auto& s : schemas) {
    auto it = cfg.filters.find(s.aspect);
    filters.push_back(it == cfg.filters.end() ? LatentFilter{} : it->second);
  }
  OptimizerState state;
  for (int k = 0; k < K; ++k) state.groups.push_back(make_group("bank." + schemas[k].aspect, banks[k].params()));
  state.groups.push_back(make_group("encoder.body", encoder.body().params(), encoder_lr_scale(cfg)));
  state.groups.push_back(make_group("encoder.heads", encoder.head_params(), encoder_lr_scale(cfg)));
  ObjectiveConfig warm = cfg.objective;
  warm.omega1 = 0;
  warm.omega2 = 0;
  warm.omega3 = 1;
  TrainResult result;
  run_loop(state, cfg, data.size(), hooks, [&](long) { return cfg.learning_rate; }, result,
           [&](long step, const std::vector<std::size_t>& batch, std::vector<std::vector<float>>& grads) {
             std::vector<std::vector<PrefixKV<float>>> prefixes;
             std::vector<PrefixGrads<float>> pg;
             for (const auto& b : banks) {
               prefixes.push_back(b.materialize_all());
               pg.emplace_back(prefixes.back());
             }
             const auto& obj = step < cfg.warm_steps ? warm : cfg.objective;
             LossParts parts;
             const float scale = 1.0f / static_cast<float>(batch.size());
             for (std::size_t b = 0; b < batch.size(); ++b) {
               const auto& ex = data[batch[b]];
               parts += semi_example<float>(model, encoder, prefixes, ex.tokens, ex.labels, filters, obj,
                                            derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), b}), scale, pg,
                                            EncoderGrads<float>{grads[K], grads[K + 1]});
             }
             // The warm phase fits the encoder to the current prefixes and leaves them in place.
             if (step >= cfg.warm_steps)
               for (int k = 0; k < K; ++k)
                 for (int z = 0; z < banks[k].size(); ++z) banks[k].backward(z, pg[k].rows[z], grads[k]);
             return parts.scaled(1.0 / batch.size());
           });
  for (const auto& b : banks) result.banks.push_back(b.export_bank(provenance_of(cfg)));
  result.encoder = std::move(encoder);
  return result;
}

}  // namespace pfx
