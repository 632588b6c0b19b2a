#include "pfx/eval.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pfx/io.hpp"

namespace pfx {

using nlohmann::ordered_json;

double RelevanceCounts::relevance() const {
  return decided() == 0 ? 0.0 : 100.0 * static_cast<double>(matched) / static_cast<double>(decided());
}
double RelevanceCounts::matched_share() const {
  return total() == 0 ? 0.0 : 100.0 * static_cast<double>(matched) / static_cast<double>(total());
}
double RelevanceCounts::mismatched_share() const {
  return total() == 0 ? 0.0 : 100.0 * static_cast<double>(mismatched) / static_cast<double>(total());
}
double RelevanceCounts::undecided_share() const {
  return total() == 0 ? 0.0 : 100.0 * static_cast<double>(undecided) / static_cast<double>(total());
}

RelevanceCounts& RelevanceCounts::operator+=(const RelevanceCounts& o) {
  matched += o.matched;
  mismatched += o.mismatched;
  undecided += o.undecided;
  return *this;
}

RelevanceCounts attribute_relevance(std::span<const TokenSequence> completions, const AspectSpec& spec, int target) {
  require(!completions.empty(), "relevance of an empty completion set");
  require(target >= 0 && target < static_cast<int>(spec.attributes.size()), "relevance: target outside aspect");
  RelevanceCounts c;
  for (const auto& s : completions) {
    const int o = oracle_index(s, spec);
    if (o < 0) ++c.undecided;
    else if (o == target) ++c.matched;
    else ++c.mismatched;
  }
  return c;
}

RelevanceCounts joint_relevance(std::span<const TokenSequence> completions, std::span<const AspectSpec> specs,
                                std::span<const int> targets) {
  require(!completions.empty(), "relevance of an empty completion set");
  require(specs.size() == targets.size() && !specs.empty(), "joint relevance: one target per aspect");
  RelevanceCounts c;
  for (const auto& s : completions) {
    bool undecided = false, all = true;
    for (std::size_t k = 0; k < specs.size(); ++k) {
      const int o = oracle_index(s, specs[k]);
      if (o < 0) undecided = true;
      else if (o != targets[k]) all = false;
    }
    if (undecided) ++c.undecided;
    else if (all) ++c.matched;
    else ++c.mismatched;
  }
  return c;
}

double avoid_rate(std::span<const TokenSequence> completions, const AspectSpec& spec) {
  long hits = 0, total = 0;
  for (const auto& s : completions) {
    hits += avoid_count(s, spec);
    total += static_cast<long>(s.size());
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

double perplexity(const Transformer<float>& eval_model, std::span<const Completion> completions) {
  double nll = 0;
  long count = 0;
  for (const auto& c : completions) {
    if (c.continuation.empty()) continue;
    for (float lp : eval_model.continuation_log_probs(c.context, c.continuation, nullptr)) nll -= lp;
    count += static_cast<long>(c.continuation.size());
  }
  require(count > 0, "perplexity of an empty completion set");
  return std::exp(nll / static_cast<double>(count));
}

LatencyStats latency_benchmark(const Transformer<float>& model, const TokenSequence& prompt,
                               const PrefixKV<float>* prefix, const SamplingParams& sampling, int repetitions,
                               int warmup) {
  require(repetitions >= 1, "latency benchmark needs at least one repetition");
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  for (int i = 0; i < warmup; ++i) model.generate(prompt, prefix, sampling);
  std::vector<double> times;
  for (int i = 0; i < repetitions; ++i) {
    SamplingParams s = sampling;
    s.seed = derive_seed(sampling.seed, {static_cast<std::uint64_t>(i)});
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = model.generate(prompt, prefix, s);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
    if (out.empty()) times.back() += 0;  // keep the call observable
  }
  omp_set_num_threads(threads);
  LatencyStats st;
  st.repetitions = repetitions;
  for (double t : times) st.mean_s += t;
  st.mean_s /= repetitions;
  double var = 0;
  for (double t : times) var += (t - st.mean_s) * (t - st.mean_s);
  st.stddev_s = repetitions > 1 ? std::sqrt(var / (repetitions - 1)) : 0.0;
  st.cv = st.mean_s > 0 ? st.stddev_s / st.mean_s : 0.0;
  return st;
}

std::vector<Completion> generate_completions(const Transformer<float>& model, std::span<const TokenSequence> prompts,
                                             const PrefixKV<float>* prefix, const GenerationOptions& opts,
                                             std::uint64_t stream, const TokenSequence& marker) {
  require(opts.completions_per_prompt >= 1, "completions per prompt must be >= 1");
  std::vector<Completion> out(prompts.size() * opts.completions_per_prompt);
  // Completions are independent and individually seeded, so the result does
  // not depend on the thread count.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t idx = 0; idx < out.size(); ++idx) {
    const std::size_t p = idx / opts.completions_per_prompt, c = idx % opts.completions_per_prompt;
    TokenSequence ctx = marker;
    ctx.insert(ctx.end(), prompts[p].begin(), prompts[p].end());
    SamplingParams s = opts.sampling;
    s.seed = derive_seed(opts.sampling.seed, {stream, p, c});
    auto full = model.generate(ctx, prefix, s);
    out[idx] = {ctx, TokenSequence(full.begin() + ctx.size(), full.end())};
  }
  return out;
}

TokenSequence attribute_marker(const AspectSpec& spec, int attribute) {
  require(attribute >= 0 && attribute < static_cast<int>(spec.attributes.size()), "marker: attribute out of range");
  std::string text;
  for (char ch : spec.attributes[attribute].name)
    if (ch >= 'a' && ch <= 'z') text += ch;
  return Vocabulary::standard().encode(text + " ");
}

std::vector<TokenSequence> continuations(std::span<const Completion> completions) {
  std::vector<TokenSequence> out;
  for (const auto& c : completions) out.push_back(c.continuation);
  return out;
}

// ---------------------------------------------------------------------------
// Report

namespace {

ordered_json counts_json(const RelevanceCounts& c) {
  return ordered_json{{"relevance", c.relevance()},
                      {"matched", c.matched},
                      {"mismatched", c.mismatched},
                      {"undecided", c.undecided}};
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

std::string EvalReport::to_jsonl(bool include_latency) const {
  std::string out;
  ordered_json m{{"type", "meta"}};
  for (const auto& [k, v] : meta) m[k] = v;
  if (!failures.empty()) m["failures"] = failures;
  out += m.dump() + "\n";
  for (const auto& r : rows) {
    ordered_json j{{"type", "row"}, {"method", r.method}, {"aspect", r.aspect}, {"attribute", r.attribute}};
    ordered_json rel = ordered_json::object();
    for (const auto& [aspect, c] : r.relevance) rel[aspect] = counts_json(c);
    j["relevance"] = rel;
    if (r.joint) j["joint"] = counts_json(*r.joint);
    j["perplexity"] = r.perplexity;
    if (r.avoid_rate) j["avoid_rate"] = *r.avoid_rate;
    if (include_latency && r.latency_s) j["latency_s"] = *r.latency_s;
    j["completions"] = r.completions;
    out += j.dump() + "\n";
  }
  return out;
}

std::string EvalReport::to_table() const {
  std::set<std::string> aspect_set;
  for (const auto& r : rows)
    for (const auto& [a, c] : r.relevance) aspect_set.insert(a);
  const std::vector<std::string> aspects(aspect_set.begin(), aspect_set.end());
  const bool any_joint = std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.joint.has_value(); });
  const bool any_avoid = std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.avoid_rate.has_value(); });
  const bool any_latency = std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.latency_s.has_value(); });

  std::vector<std::string> header{"method", "aspect", "attribute"};
  for (const auto& a : aspects) header.push_back(a + " rel%");
  if (any_joint) header.push_back("joint%");
  header.push_back("undecided%");
  header.push_back("ppl");
  if (any_avoid) header.push_back("avoid");
  if (any_latency) header.push_back("latency_ms");

  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.method, r.aspect, r.attribute};
    double undecided = 0;
    for (const auto& a : aspects) {
      auto it = r.relevance.find(a);
      line.push_back(it == r.relevance.end() ? "-" : fixed(it->second.relevance(), 1));
      if (it != r.relevance.end()) undecided = std::max(undecided, it->second.undecided_share());
    }
    if (any_joint) line.push_back(r.joint ? fixed(r.joint->relevance(), 1) : "-");
    line.push_back(fixed(r.joint ? r.joint->undecided_share() : undecided, 1));
    line.push_back(fixed(r.perplexity, 2));
    if (any_avoid) line.push_back(r.avoid_rate ? fixed(*r.avoid_rate, 4) : "-");
    if (any_latency) line.push_back(r.latency_s ? fixed(*r.latency_s * 1e3, 2) : "-");
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream out;
  for (std::size_t li = 0; li < cells.size(); ++li) {
    for (std::size_t i = 0; i < cells[li].size(); ++i) {
      const auto& c = cells[li][i];
      if (i < 3) out << c << std::string(width[i] - c.size(), ' ');
      else out << std::string(width[i] - c.size(), ' ') << c;
      out << (i + 1 < cells[li].size() ? "  " : "\n");
    }
    if (li == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << "\n";
    }
  }
  for (const auto& f : failures) out << "FAILED: " << f << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Suite

std::vector<std::string> SuiteConfig::default_rows() {
  return {"polarity:no-prefix",         "polarity:prompt",        "polarity:supervised",
          "polarity:supervised-1k",     "polarity:supervised-24", "polarity:no-ld",
          "toxicity:no-prefix",         "toxicity:supervised",    "toxicity:no-ld",
          "toxicity:unsupervised",      "toxicity:unsupervised-no-lc",
          "topic:no-prefix",            "topic:supervised",       "topic:no-ld",
          "multi:no-prefix",            "multi:concat",           "multi:semi",
          "multi:semi-no-ld",           "multi:semi-no-enc"};
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    auto end = v.find(',', pos);
    if (end == std::string::npos) end = v.size();
    auto item = trim(std::string_view(v).substr(pos, end - pos));
    if (!item.empty()) out.push_back(item);
    pos = end + 1;
  }
  return out;
}

long as_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long r = std::stol(v, &used);
    if (used == v.size()) return r;
  } catch (const std::exception&) {
  }
  throw Error("suite config: " + key + " expects an integer, got '" + v + "'");
}

double as_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used == v.size()) return r;
  } catch (const std::exception&) {
  }
  throw Error("suite config: " + key + " expects a number, got '" + v + "'");
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("suite config: " + key + " expects true or false, got '" + v + "'");
}

}  // namespace

SuiteConfig SuiteConfig::parse(std::string_view text) {
  SuiteConfig c;
  c.rows = default_rows();
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("suite config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(std::string_view(t).substr(0, eq));
    const auto v = trim(std::string_view(t).substr(eq + 1));
    if (key == "base_model") c.base_model = v;
    else if (key == "eval_model") c.eval_model = v;
    else if (key == "rows") c.rows = split_list(v);
    else if (key.starts_with("bank.")) c.banks[key.substr(5)] = v;
    else if (key == "train_missing") c.train_missing = as_bool(key, v);
    else if (key == "prompts") c.prompts = static_cast<int>(as_long(key, v));
    else if (key == "completions") c.completions = static_cast<int>(as_long(key, v));
    else if (key == "max_new") c.max_new = static_cast<int>(as_long(key, v));
    else if (key == "top_k") c.top_k = static_cast<int>(as_long(key, v));
    else if (key == "top_p") c.top_p = as_double(key, v);
    else if (key == "temperature") c.temperature = as_double(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(as_long(key, v));
    else if (key == "separability") c.separability = as_double(key, v);
    else if (key == "full_per_attribute") c.full_per_attribute = static_cast<int>(as_long(key, v));
    else if (key == "dev_per_attribute") c.dev_per_attribute = static_cast<int>(as_long(key, v));
    else if (key == "semi_examples") c.semi_examples = static_cast<int>(as_long(key, v));
    else if (key == "latency") c.latency = as_bool(key, v);
    else if (key == "latency_reps") c.latency_reps = static_cast<int>(as_long(key, v));
    else if (key.starts_with("train.")) c.train_overrides.emplace_back(key.substr(6), v);
    else throw Error("suite config: unknown key '" + key + "'");
  }
  require(c.prompts >= 1 && c.completions >= 1 && c.max_new >= 0, "suite config: prompts, completions must be >= 1");
  require(c.separability > 0 && c.separability <= 1, "suite config: separability must lie in (0, 1]");
  return c;
}

SuiteConfig SuiteConfig::load(const std::string& path) {
  const auto bytes = io::read_file(path);
  return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string SuiteConfig::hash() const {
  std::ostringstream s;
  s << base_model << '|' << eval_model << '|' << train_missing << '|' << prompts << '|' << completions << '|'
    << max_new << '|' << top_k << '|' << top_p << '|' << temperature << '|' << seed << '|' << separability << '|'
    << full_per_attribute << '|' << dev_per_attribute << '|' << semi_examples << '|' << latency << '|'
    << latency_reps;
  for (const auto& r : rows) s << "|r:" << r;
  for (const auto& [k, v] : banks) s << "|b:" << k << '=' << v;
  for (const auto& [k, v] : train_overrides) s << "|t:" << k << '=' << v;
  return io::content_hash(s.str());
}

std::vector<CorpusRecord> take_per_attribute(std::span<const CorpusRecord> records, const AspectSpec& spec,
                                             int per_attribute) {
  std::vector<int> taken(spec.attributes.size(), 0);
  std::vector<CorpusRecord> out;
  for (const auto& r : records) {
    auto it = r.labels.find(spec.name);
    if (it == r.labels.end()) continue;
    const int a = spec.attribute_index(it->second);
    if (a < 0 || taken[a] >= per_attribute) continue;
    ++taken[a];
    out.push_back(r);
  }
  return out;
}

namespace {

std::uint64_t tag(std::string_view s) { return std::stoull(io::content_hash(s), nullptr, 16); }

class Suite {
 public:
  Suite(const SuiteConfig& cfg, std::ostream* progress)
      : cfg_(cfg),
        progress_(progress),
        base_(load_model(cfg.base_model)),
        eval_(load_model(cfg.eval_model)),
        specs_{AspectSpec::polarity(cfg.separability), AspectSpec::topic(cfg.separability),
               AspectSpec::toxicity(cfg.separability)} {
    report_.meta["seed"] = std::to_string(cfg.seed);
    report_.meta["suite_hash"] = cfg.hash();
    report_.meta["base_model"] = io::content_hash(io::read_file(cfg.base_model));
    report_.meta["eval_model"] = io::content_hash(io::read_file(cfg.eval_model));
    opts_.completions_per_prompt = cfg.completions;
    opts_.sampling.max_new = cfg.max_new;
    opts_.sampling.top_k = cfg.top_k;
    opts_.sampling.top_p = cfg.top_p;
    opts_.sampling.temperature = cfg.temperature;
    opts_.sampling.seed = cfg.seed;
  }

  EvalReport run() {
    for (const auto& id : cfg_.rows) {
      try {
        log("row " + id);
        run_row(id);
      } catch (const Error& e) {
        report_.failures.push_back(id + ": " + e.what());
        log("  failed: " + std::string(e.what()));
      }
    }
    return std::move(report_);
  }

 private:
  void log(const std::string& s) {
    if (progress_) *progress_ << s << std::endl;
  }

  const AspectSpec& spec(const std::string& aspect) const {
    for (const auto& s : specs_)
      if (s.name == aspect) return s;
    throw Error("unknown aspect " + aspect);
  }

  TrainConfig train_config(Regime regime) const {
    std::string text = "regime = " + std::string(regime_name(regime)) + "\n";
    for (const auto& [k, v] : cfg_.train_overrides) text += k + " = " + v + "\n";
    auto c = TrainConfig::parse(text);
    c.seed = cfg_.seed;
    return c;
  }

  std::vector<CorpusRecord> labeled_corpus(const AspectSpec& s, int per_attribute, std::uint64_t stream) const {
    const int n = static_cast<int>(s.attributes.size());
    const auto corpus = generate_corpus(std::span(&s, 1), per_attribute * n * 2 + 64, LabelMode::full,
                                        derive_seed(cfg_.seed, {tag(s.name), stream}));
    return take_per_attribute(corpus, s, per_attribute);
  }

  const PrefixBank& single_bank(const std::string& aspect, const std::string& method) {
    const std::string id = aspect + ":" + method;
    if (auto it = banks_.find(id); it != banks_.end()) return it->second;
    if (auto it = cfg_.banks.find(id); it != cfg_.banks.end()) return store(id, load_bank(it->second));
    if (!cfg_.train_missing) throw Error("no bank available for row " + id);
    const auto& s = spec(aspect);
    const std::array<AspectSpec, 1> one{s};
    if (method == "supervised" || method == "supervised-1k" || method == "supervised-24" || method == "no-ld") {
      const int per = method == "supervised-1k" ? 1000 : method == "supervised-24" ? 24 : cfg_.full_per_attribute;
      auto tc = train_config(Regime::supervised);
      if (method == "no-ld") tc.objective.omega2 = 0;
      const auto data = to_examples(labeled_corpus(s, per, 1), one);
      log("  training " + id + " on " + std::to_string(data.size()) + " examples");
      return store(id, train_supervised(base_, data, s.schema(), tc).banks.at(0));
    }
    if (method == "unsupervised" || method == "unsupervised-no-lc") {
      auto tc = train_config(Regime::unsupervised);
      if (method == "unsupervised-no-lc") tc.objective.omega3 = 0;
      auto data = to_examples(labeled_corpus(s, cfg_.full_per_attribute, 1), one);
      for (auto& e : data) e.labels[0] = -1;
      const auto dev = to_examples(labeled_corpus(s, cfg_.dev_per_attribute, 2), one);
      log("  training " + id + " on " + std::to_string(data.size()) + " unlabeled examples");
      return store(id, train_unsupervised(base_, data, s.schema(), dev, tc).banks.at(0));
    }
    throw Error("unknown method " + method);
  }

  std::vector<PrefixBank> multi_banks(const std::string& method) {
    const std::string id = "multi:" + method;
    if (auto it = cfg_.banks.find(id); it != cfg_.banks.end()) {
      std::vector<PrefixBank> out;
      for (const auto& path : split_list(it->second)) out.push_back(load_bank(path));
      require(out.size() == 2, "row " + id + " needs two bank files (polarity, topic)");
      return out;
    }
    std::vector<PrefixBank> init{single_bank("polarity", "supervised"), single_bank("topic", "supervised")};
    if (method == "concat") return init;
    if (!cfg_.train_missing) throw Error("no bank available for row " + id);
    auto tc = train_config(Regime::semi);
    if (method == "semi-no-ld") tc.objective.omega2 = 0;
    if (method == "semi-no-enc") {
      tc.objective.omega3 = 0;
      tc.warm_steps = 0;
    } else if (method != "semi") {
      throw Error("unknown method " + method);
    }
    const std::array<AspectSpec, 2> pair{spec("polarity"), spec("topic")};
    const auto corpus = generate_corpus(pair, cfg_.semi_examples, LabelMode::partial,
                                        derive_seed(cfg_.seed, {tag("multi"), 1}));
    const auto data = to_examples(corpus, pair);
    const std::array<AspectSchema, 2> schemas{pair[0].schema(), pair[1].schema()};
    log("  training " + id + " on " + std::to_string(data.size()) + " partially labeled examples");
    auto r = train_semi(base_, data, schemas, tc, init);
    return r.banks;
  }

  PrefixBank& store(const std::string& id, PrefixBank bank) {
    report_.meta["bank:" + id] = io::content_hash(serialize_bank(bank));
    return banks_[id] = std::move(bank);
  }

  void finish_row(ReportRow& row, const std::vector<Completion>& comps, const PrefixKV<float>* prefix,
                  const TokenSequence& prompt) {
    row.perplexity = perplexity(eval_, comps);
    row.completions = static_cast<long>(comps.size());
    if (cfg_.latency) {
      SamplingParams s = opts_.sampling;
      row.latency_s = latency_benchmark(base_, prompt, prefix, s, cfg_.latency_reps).mean_s;
    }
    report_.rows.push_back(std::move(row));
  }

  void run_row(const std::string& id) {
    const auto colon = id.find(':');
    if (colon == std::string::npos) throw Error("row ids look like <aspect>:<method>");
    const auto aspect = id.substr(0, colon), method = id.substr(colon + 1);
    if (aspect == "multi") return run_multi(id, method);
    const auto& s = spec(aspect);
    const auto prompts = neutral_prompts(s, cfg_.prompts);
    const PrefixBank* bank = nullptr;
    if (method != "no-prefix" && method != "prompt") bank = &single_bank(aspect, method);
    for (int a = 0; a < static_cast<int>(s.attributes.size()); ++a) {
      ReportRow row{method, aspect, s.attributes[a].name, {}, {}, 0, {}, {}, 0};
      std::optional<PrefixKV<float>> prefix;
      if (bank) prefix = bank->materialize(a);
      const TokenSequence marker = method == "prompt" ? attribute_marker(s, a) : TokenSequence{};
      const auto comps = generate_completions(base_, prompts, prefix ? &*prefix : nullptr, opts_,
                                              derive_seed(cfg_.seed, {tag(id), static_cast<std::uint64_t>(a)}), marker);
      const auto conts = continuations(comps);
      row.relevance[aspect] = attribute_relevance(conts, s, a);
      if (!s.avoid_attribute.empty()) row.avoid_rate = avoid_rate(conts, s);
      finish_row(row, comps, prefix ? &*prefix : nullptr, prompts.front());
    }
  }

  void run_multi(const std::string& id, const std::string& method) {
    const std::array<AspectSpec, 2> pair{spec("polarity"), spec("topic")};
    const auto prompts = neutral_prompts(pair[0], cfg_.prompts);
    std::vector<PrefixBank> banks;
    if (method != "no-prefix") banks = multi_banks(method);
    for (int a = 0; a < static_cast<int>(pair[0].attributes.size()); ++a)
      for (int b = 0; b < static_cast<int>(pair[1].attributes.size()); ++b) {
        ReportRow row{method, "polarity+topic", pair[0].attributes[a].name + "+" + pair[1].attributes[b].name,
                      {}, {}, 0, {}, {}, 0};
        std::optional<PrefixKV<float>> prefix;
        if (!banks.empty()) {
          const std::array<std::pair<const PrefixBank*, int>, 2> sel{{{&banks[0], a}, {&banks[1], b}}};
          prefix = concat_aspects(sel);
        }
        const auto comps = generate_completions(
            base_, prompts, prefix ? &*prefix : nullptr, opts_,
            derive_seed(cfg_.seed, {tag(id), static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(b)}));
        const auto conts = continuations(comps);
        row.relevance["polarity"] = attribute_relevance(conts, pair[0], a);
        row.relevance["topic"] = attribute_relevance(conts, pair[1], b);
        const std::array<int, 2> targets{a, b};
        row.joint = joint_relevance(conts, pair, targets);
        finish_row(row, comps, prefix ? &*prefix : nullptr, prompts.front());
      }
  }

  const SuiteConfig& cfg_;
  std::ostream* progress_;
  Transformer<float> base_;
  Transformer<float> eval_;
  std::vector<AspectSpec> specs_;
  GenerationOptions opts_;
  std::map<std::string, PrefixBank> banks_;
  EvalReport report_;
};

}  // namespace

EvalReport run_suite(const SuiteConfig& cfg, std::ostream* progress) {
  require(!cfg.base_model.empty(), "suite config needs base_model");
  require(!cfg.eval_model.empty(), "suite config needs eval_model");
  Suite suite(cfg, progress);
  return suite.run();
}

}  // namespace pfx
