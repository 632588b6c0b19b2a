// Acceptance run: one PASS/FAIL line per criterion. The pretrained base
// model is cached in the directory given by --cache; its cost is reported
// separately from the per-criterion timings.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "gradient_suite.hpp"
#include "support.hpp"
#include "pfx/eval.hpp"
#include "pfx/io.hpp"

using namespace pfx;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Budgets shared by the training criteria.
constexpr double kLearningRate = 1e-3;
constexpr int kBatch = 8;
constexpr long kSupervisedSteps = 500;
constexpr long kUnsupervisedSteps = 400;
constexpr long kSemiSteps = 300;
constexpr int kPerAttribute = 2000;

struct Env {
  fs::path cache;
  std::uint64_t seed = 42;
  double pretrain_seconds = 0;
  std::optional<Transformer<float>> base;

  std::vector<TokenSequence> union_corpus(int per_part) const {
    const std::vector<std::vector<AspectSpec>> parts{{AspectSpec::polarity(0.7)},
                                                     {AspectSpec::topic(0.7)},
                                                     {AspectSpec::toxicity(0.7)},
                                                     {AspectSpec::polarity(0.7), AspectSpec::topic(0.7)}};
    std::vector<TokenSequence> out;
    for (std::size_t k = 0; k < parts.size(); ++k)
      for (auto& r : generate_corpus(parts[k], per_part, LabelMode::none, derive_seed(seed, {0xc0, k})))
        out.push_back(std::move(r.tokens));
    return out;
  }

  Transformer<float> pretrained(const std::string& name, const ModelConfig& mc, int per_part, int epochs) {
    auto cfg = TrainConfig::defaults(Regime::pretrain);
    cfg.seed = seed;
    cfg.epochs = epochs;
    const std::string key = io::content_hash(cfg.to_text() + std::to_string(per_part) + name +
                                             std::to_string(parameter_count(mc)));
    const auto path = cache / (name + "-" + key + ".pfxm");
    if (fs::exists(path)) return load_model(path.string());
    const auto t0 = Clock::now();
    auto model = Transformer<float>::random(mc, derive_seed(seed, {0x30de1}));
    const auto data = union_corpus(per_part);
    TrainHooks hooks;
    hooks.on_step = [&](const StepLog& s) {
      if (s.step % 200 == 0) std::cerr << "  pretrain " << name << " step " << s.step << " loss " << s.loss.lm << "\n";
    };
    pretrain(model, data, cfg, hooks);
    save_model(model, path.string());
    pretrain_seconds += since(t0);
    return model;
  }

  const Transformer<float>& base_model() {
    if (!base) base = pretrained("base", ModelConfig::desk(), 6000, 1);
    return *base;
  }
};

TrainConfig supervised_config(double omega2, std::uint64_t seed) {
  auto c = TrainConfig::defaults(Regime::supervised);
  c.seed = seed;
  c.learning_rate = kLearningRate;
  c.batch_size = kBatch;
  c.max_steps = kSupervisedSteps;
  c.objective.omega2 = omega2;
  return c;
}

std::vector<Example> labeled(const AspectSpec& spec, int per_attribute, std::uint64_t seed) {
  const std::array<AspectSpec, 1> one{spec};
  const int n = static_cast<int>(spec.attributes.size());
  const auto corpus = generate_corpus(one, per_attribute * n * 2 + 64, LabelMode::full, seed);
  return to_examples(take_per_attribute(corpus, spec, per_attribute), one);
}

GenerationOptions generation_options(std::uint64_t seed) {
  GenerationOptions o;
  o.completions_per_prompt = 45;
  o.sampling.max_new = 20;
  o.sampling.seed = seed;
  return o;
}

struct SingleAspectScore {
  double mean_relevance = 0;
  double avoid = 0;
};

SingleAspectScore score_bank(const Transformer<float>& model, const AspectSpec& spec, const PrefixBank& bank,
                             std::uint64_t seed) {
  const auto prompts = neutral_prompts(spec);
  SingleAspectScore s;
  const int n = static_cast<int>(spec.attributes.size());
  for (int a = 0; a < n; ++a) {
    const auto prefix = bank.materialize(a);
    const auto conts = continuations(generate_completions(model, prompts, &prefix, generation_options(seed), a));
    s.mean_relevance += attribute_relevance(conts, spec, a).relevance() / n;
    if (!spec.avoid_attribute.empty() && spec.attributes[a].name != spec.avoid_attribute)
      s.avoid = avoid_rate(conts, spec);
  }
  return s;
}

struct SupervisedRuns {
  PrefixBank full, no_ld;
  SingleAspectScore full_score, no_ld_score;
  double seconds = 0;
};

SupervisedRuns supervised_pair(Env& env, const AspectSpec& spec, const std::string& checkpoint = {}) {
  const auto& base = env.base_model();
  const auto t0 = Clock::now();
  const auto data = labeled(spec, kPerAttribute, derive_seed(env.seed, {0xda7a, std::stoull(io::content_hash(spec.name), nullptr, 16)}));
  const auto schema = spec.schema();
  TrainHooks hooks;
  hooks.checkpoint_path = checkpoint;
  SupervisedRuns r;
  r.full = train_supervised(base, data, schema, supervised_config(0.2, env.seed), hooks).banks[0];
  r.no_ld = train_supervised(base, data, schema, supervised_config(0.0, env.seed)).banks[0];
  r.full_score = score_bank(base, spec, r.full, env.seed);
  r.no_ld_score = score_bank(base, spec, r.no_ld, env.seed);
  r.seconds = since(t0);
  return r;
}

// ---------------------------------------------------------------------------

Outcome criterion_gradients(Env&) {
  const auto t0 = Clock::now();
  const auto checks = test::gradient_suite(ModelConfig::desk(), 10, 16, 42);
  double worst = 0;
  std::string worst_name;
  for (const auto& c : checks)
    if (c.rel_error >= worst) {
      worst = c.rel_error;
      worst_name = c.name;
    }
  const double secs = since(t0);
  std::ostringstream d;
  d << checks.size() << " objective checks on the desk model (float64), worst relative error " << fmt("%.2e", worst)
    << " (" << worst_name << "), " << fmt("%.1f", secs) << " s";
  return {worst < 1e-4 && secs < 60, d.str()};
}

Outcome criterion_supervised(Env& env, SupervisedRuns& runs) {
  const double gap = runs.full_score.mean_relevance - runs.no_ld_score.mean_relevance;
  std::ostringstream d;
  d << "polarity relevance " << fmt("%.1f", runs.full_score.mean_relevance) << "% with L_d vs "
    << fmt("%.1f", runs.no_ld_score.mean_relevance) << "% without (gap " << fmt("%+.1f", gap) << " pp), "
    << fmt("%.0f", runs.seconds) << " s";
  (void)env;
  return {gap >= 10.0 && runs.seconds < 600, d.str()};
}

Outcome criterion_avoid(Env& env) {
  const auto runs = supervised_pair(env, AspectSpec::toxicity(0.7));
  const double ratio = runs.no_ld_score.avoid > 0 ? runs.full_score.avoid / runs.no_ld_score.avoid : 1.0;
  std::ostringstream d;
  d << "avoid-lexicon rate under the clean prefix " << fmt("%.4f", runs.full_score.avoid) << " with L_d vs "
    << fmt("%.4f", runs.no_ld_score.avoid) << " without (ratio " << fmt("%.2f", ratio) << "), "
    << fmt("%.0f", runs.seconds) << " s";
  return {runs.no_ld_score.avoid > 0 && ratio <= 0.6 && runs.seconds < 600, d.str()};
}

Outcome criterion_unsupervised(Env& env) {
  const auto& base = env.base_model();
  const auto t0 = Clock::now();
  const auto spec = AspectSpec::toxicity(0.9);
  const std::array<AspectSpec, 1> one{spec};
  auto data = labeled(spec, kPerAttribute, derive_seed(env.seed, {0x0a5}));
  for (auto& e : data) e.labels[0] = -1;
  const auto dev = labeled(spec, 32, derive_seed(env.seed, {0xde5}));
  std::vector<TokenSequence> held;
  std::vector<int> oracle;
  for (auto& r : generate_corpus(one, 600, LabelMode::none, derive_seed(env.seed, {0x7e57}))) {
    const int o = oracle_index(r.tokens, spec);
    if (o < 0) continue;
    held.push_back(std::move(r.tokens));
    oracle.push_back(o);
  }
  auto agreement = [&](double omega3) {
    auto cfg = TrainConfig::defaults(Regime::unsupervised);
    cfg.seed = env.seed;
    cfg.learning_rate = kLearningRate;
    cfg.batch_size = kBatch;
    cfg.max_steps = kUnsupervisedSteps;
    cfg.objective.schedule_steps = kUnsupervisedSteps;
    cfg.objective.omega3 = omega3;
    const auto r = train_unsupervised(base, data, spec.schema(), dev, cfg);
    const auto assigned = encoder_assignments(*r.encoder, 0, r.banks[0], held);
    long hits = 0;
    for (std::size_t i = 0; i < held.size(); ++i) hits += assigned[i] == oracle[i];
    return static_cast<double>(hits) / static_cast<double>(held.size());
  };
  const double with_lc = agreement(2.0);
  const double without_lc = agreement(0.0);
  const double secs = since(t0);
  std::ostringstream d;
  d << "cluster/oracle agreement " << fmt("%.3f", with_lc) << " with L_c vs " << fmt("%.3f", without_lc)
    << " without, on " << held.size() << " held-out texts, " << fmt("%.0f", secs) << " s";
  return {with_lc >= 0.8 && with_lc > without_lc && secs < 600, d.str()};
}

Outcome criterion_multi(Env& env, const PrefixBank& polarity_bank) {
  const auto& base = env.base_model();
  const auto t0 = Clock::now();
  const auto pol = AspectSpec::polarity(0.7), top = AspectSpec::topic(0.7);
  const auto topic_bank =
      train_supervised(base, labeled(top, kPerAttribute, derive_seed(env.seed, {0xda7a, 5})), top.schema(),
                       supervised_config(0.2, env.seed))
          .banks[0];
  const std::array<AspectSpec, 2> pair{pol, top};
  const std::array<AspectSchema, 2> schemas{pol.schema(), top.schema()};
  const auto corpus = generate_corpus(pair, 4000, LabelMode::partial, derive_seed(env.seed, {0x5e31}));
  const auto data = to_examples(corpus, pair);
  auto cfg = TrainConfig::defaults(Regime::semi);
  cfg.seed = env.seed;
  cfg.learning_rate = kLearningRate;
  cfg.batch_size = kBatch;
  cfg.max_steps = kSemiSteps;
  cfg.warm_steps = kSemiSteps;  // 1:1 warm to joint
  cfg.filters["polarity"] = {1, 1.0};
  cfg.filters["topic"] = {1, 1.0};
  const std::vector<PrefixBank> init{polarity_bank, topic_bank};
  const auto semi = train_semi(base, data, schemas, cfg, init).banks;

  const auto prompts = neutral_prompts(pol);
  auto joint = [&](const PrefixBank* a, const PrefixBank* b) {
    RelevanceCounts total;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 4; ++j) {
        std::optional<PrefixKV<float>> prefix;
        if (a) {
          const std::array<std::pair<const PrefixBank*, int>, 2> sel{{{a, i}, {b, j}}};
          prefix = concat_aspects(sel);
        }
        const auto conts = continuations(generate_completions(
            base, prompts, prefix ? &*prefix : nullptr, generation_options(env.seed), static_cast<std::uint64_t>(4 * i + j)));
        const std::array<int, 2> targets{i, j};
        total += joint_relevance(conts, pair, targets);
      }
    return total.relevance();
  };
  const double none = joint(nullptr, nullptr);
  const double concat = joint(&polarity_bank, &topic_bank);
  const double semi_rel = joint(&semi[0], &semi[1]);
  const double secs = since(t0);
  std::ostringstream d;
  d << "joint relevance semi " << fmt("%.1f", semi_rel) << "%, concat " << fmt("%.1f", concat) << "%, no prefix "
    << fmt("%.1f", none) << "% (concat/no-prefix " << fmt("%.2f", none > 0 ? concat / none : 0.0) << "x), "
    << fmt("%.0f", secs) << " s";
  return {semi_rel >= concat && concat >= 1.5 * none, d.str()};
}

Outcome criterion_schedules(Env&) {
  ObjectiveConfig oc;
  oc.schedule_steps = 1000;
  const auto first = schedule(oc, 0), last = schedule(oc, oc.schedule_steps);
  const TokenSequence seq(10000, 7);
  const auto masked = mask_tokens(seq, oc.mask_rate, 1, 42);
  const double rate = std::count(masked.begin(), masked.end(), 1) / 10000.0;
  const bool ok = first.kl_weight == 0.001 && first.tau == 1.0 && last.kl_weight == 0.1 && last.tau == 0.5 &&
                  std::abs(rate - 0.5) <= 0.02;
  std::ostringstream d;
  d << "(kl, tau) = (" << first.kl_weight << ", " << first.tau << ") at step 0 and (" << last.kl_weight << ", "
    << last.tau << ") at step " << oc.schedule_steps << "; mask fraction " << fmt("%.4f", rate)
    << " over 10000 positions";
  return {ok, d.str()};
}

Outcome criterion_contracts(Env& env, const PrefixBank& exported, const std::vector<float>& base_before,
                            const std::string& checkpoint) {
  const auto& base = env.base_model();
  const bool frozen = std::equal(base_before.begin(), base_before.end(), base.params().begin());
  // Round-trip through a file.
  const auto path = (env.cache / "roundtrip.pfxb").string();
  save_bank(exported, path);
  const auto loaded = load_bank(path);
  const bool roundtrip = loaded == exported && serialize_bank(loaded) == serialize_bank(exported);
  // Rebuild the training-time reparametrized bank from the final checkpoint.
  const auto cfg = supervised_config(0.2, env.seed);
  ReparamBank<float> live(exported.schema(), cfg.prefix_length, base.config().activation_dim(), cfg.bottleneck_dim, 0);
  OptimizerState st;
  st.groups.push_back({"bank." + exported.schema().aspect, live.params(), {}, {}, 1.0});
  load_checkpoint(st, cfg.hash(), checkpoint);
  SamplingParams s;
  s.seed = 42;
  bool identical = true;
  const auto prompts = neutral_prompts(AspectSpec::polarity());
  for (int a = 0; a < exported.size(); ++a) {
    const auto before = live.materialize(a);
    const auto after = loaded.materialize(a);
    for (const auto& p : prompts) identical &= base.generate(p, &before, s) == base.generate(p, &after, s);
  }
  std::ostringstream d;
  d << "decoder " << (frozen ? "bit-identical" : "CHANGED") << " after training; export round-trip "
    << (roundtrip ? "bit-exact" : "DIFFERS") << "; generation from exported bank "
    << (identical ? "token-identical" : "DIFFERS") << " at seed 42";
  return {frozen && roundtrip && identical, d.str()};
}

Outcome criterion_latency(Env& env) {
  const auto& base = env.base_model();
  ReparamBank<float> bank({"polarity", {"negative", "positive"}}, 10, base.config().activation_dim(), 256, 7);
  const auto prefix = bank.materialize(0);
  const auto prompt = neutral_prompts(AspectSpec::polarity())[0];
  SamplingParams s;
  s.max_new = 20;
  s.seed = 42;
  const auto with = latency_benchmark(base, prompt, &prefix, s, 100);
  const auto without = latency_benchmark(base, prompt, nullptr, s, 100);
  const double ratio = with.mean_s / without.mean_s;
  std::ostringstream d;
  d << "M=10 prefix " << fmt("%.2f", with.mean_s * 1e3) << " ms (cv " << fmt("%.3f", with.cv) << ") vs no prefix "
    << fmt("%.2f", without.mean_s * 1e3) << " ms (cv " << fmt("%.3f", without.cv) << "), ratio "
    << fmt("%.3f", ratio) << " over 100 repetitions";
  return {ratio <= 1.4 && with.repetitions >= 100, d.str()};
}

Outcome criterion_budget(Env&) {
  const auto t0 = Clock::now();
  ModelConfig gpt2_medium;
  gpt2_medium.num_layers = 24;
  gpt2_medium.hidden_size = 1024;
  gpt2_medium.num_heads = 16;
  gpt2_medium.vocab_size = 50257;
  gpt2_medium.max_positions = 1024;
  const auto b = parameter_budget(2, 10, 256, gpt2_medium);
  const double ratio = b.training_ratio();
  std::ostringstream d;
  d << "trainable " << b.training << " / frozen " << b.frozen << " = " << fmt("%.3f", 100 * ratio)
    << "% (exported prefixes: " << fmt("%.3f", 100 * b.exported_ratio()) << "%), " << fmt("%.2e", since(t0)) << " s";
  return {ratio >= 0.002 && ratio <= 0.02 && since(t0) < 1.0, d.str()};
}

Outcome criterion_posteriors(Env&) {
  double worst_sum = 0, worst_enum = 0;
  auto tiny = test::tiny_config(6);
  const auto m = Transformer<float>::random(tiny, 3, 0.3).cast<double>();
  Rng rng(5);
  for (int N = 1; N <= 3; ++N) {
    std::vector<PrefixKV<double>> prefixes;
    for (int z = 0; z < N; ++z) prefixes.push_back(test::random_prefix<double>(2, tiny.activation_dim(), 10 * N + z));
    for (int T = 1; T <= 4; ++T) {
      TokenSequence x;
      for (int t = 0; t < T; ++t) x.push_back(3 + rng.below(3));
      const auto post = exact_posterior<double>(m, x, prefixes);
      std::vector<double> joint(N);
      for (int z = 0; z < N; ++z) {
        double lp = 0;
        TokenSequence ctx{tiny.bos_id};
        for (Token t : x) {
          const auto logits = m.logits(ctx, &prefixes[z]);
          const double* row = logits.data() + (ctx.size() - 1) * tiny.vocab_size;
          double zs = 0;
          for (int v = 0; v < tiny.vocab_size; ++v) zs += std::exp(row[v]);
          lp += row[t] - std::log(zs);
          ctx.push_back(t);
        }
        joint[z] = std::exp(lp);
      }
      const double ev = std::accumulate(joint.begin(), joint.end(), 0.0);
      double sum = 0;
      for (int z = 0; z < N; ++z) {
        worst_enum = std::max(worst_enum, std::abs(post[z] - joint[z] / ev));
        sum += post[z];
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1));
    }
  }
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> d(2 + trial % 4);
    for (auto& v : d) v = 20 * rng.uniform();
    for (const auto& q : {softmax<double>(d), gumbel_softmax<double>(d, 0.5, trial)})
      worst_sum = std::max(worst_sum, std::abs(std::accumulate(q.begin(), q.end(), 0.0) - 1));
  }
  // Relevance recount on a 200-completion batch.
  const auto spec = AspectSpec::polarity(0.6);
  const std::array<AspectSpec, 1> one{spec};
  std::vector<TokenSequence> batch;
  for (auto& r : generate_corpus(one, 200, LabelMode::none, 77)) batch.push_back(std::move(r.tokens));
  const auto c = attribute_relevance(batch, spec, 1);
  const auto& vocab = Vocabulary::standard();
  long m1 = 0, mm = 0, u = 0;
  for (const auto& s : batch) {
    int cnt[2] = {0, 0};
    for (Token t : s)
      for (int a = 0; a < 2; ++a)
        for (const auto& w : spec.attributes[a].lexicon) cnt[a] += t == vocab.lexicon_id(w);
    if (cnt[0] == cnt[1]) ++u;
    else if (cnt[1] > cnt[0]) ++m1;
    else ++mm;
  }
  const bool recount = c.matched == m1 && c.mismatched == mm && c.undecided == u &&
                       c.relevance() == 100.0 * static_cast<double>(m1) / static_cast<double>(m1 + mm);
  std::ostringstream d;
  d << "max |sum - 1| " << fmt("%.1e", worst_sum) << ", max posterior vs enumeration " << fmt("%.1e", worst_enum)
    << " (T<=4, N<=3), relevance recount " << (recount ? "exact" : "MISMATCH") << " on 200 completions";
  return {worst_sum < 1e-9 && worst_enum < 1e-9 && recount, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cache = "acceptance_cache";
  std::vector<int> only;
  app.add_option("--cache", cache, "Directory for pretrained models");
  app.add_option("criteria", only, "Run only these criteria (1-10)");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto want = [&](int k) { return selected.empty() || selected.count(k) > 0; };

  Env env;
  env.cache = cache;
  fs::create_directories(env.cache);

  std::vector<std::pair<int, Outcome>> results;
  auto record = [&](int k, const char* name, const std::function<Outcome()>& fn) {
    if (!want(k)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << k << " [" << name << "] " << o.detail << "  ("
              << fmt("%.1f", since(t0)) << " s)" << std::endl;
    results.emplace_back(k, o);
  };

  record(1, "gradient suite", [&] { return criterion_gradients(env); });

  // Criteria 2, 5 and 7 share the polarity runs.
  std::optional<SupervisedRuns> polarity;
  std::vector<float> base_before;
  const auto checkpoint = (env.cache / "polarity-full.pfxc").string();
  auto polarity_runs = [&]() -> SupervisedRuns& {
    if (!polarity) {
      const auto& base = env.base_model();
      base_before.assign(base.params().begin(), base.params().end());
      polarity = supervised_pair(env, AspectSpec::polarity(0.7), checkpoint);
    }
    return *polarity;
  };
  if (want(2) || want(3) || want(4) || want(5) || want(7) || want(8)) {
    env.base_model();
    if (env.pretrain_seconds > 0)
      std::cout << "      shared pretraining of cached models took " << fmt("%.0f", env.pretrain_seconds) << " s"
                << std::endl;
  }
  record(2, "supervised ablation", [&] { return criterion_supervised(env, polarity_runs()); });
  record(3, "avoid-lexicon ablation", [&] { return criterion_avoid(env); });
  record(4, "unsupervised contrast", [&] { return criterion_unsupervised(env); });
  record(5, "multi-aspect", [&] { return criterion_multi(env, polarity_runs().full); });
  record(6, "schedules", [&] { return criterion_schedules(env); });
  record(7, "frozen decoder and export", [&] {
    auto& runs = polarity_runs();
    return criterion_contracts(env, runs.full, base_before, checkpoint);
  });
  record(8, "latency overhead", [&] { return criterion_latency(env); });
  record(9, "parameter budget", [&] { return criterion_budget(env); });
  record(10, "posteriors and oracle", [&] { return criterion_posteriors(env); });

  const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == static_cast<long>(results.size()) ? 0 : 1;
}
