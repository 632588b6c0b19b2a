#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pfx/model.hpp"
#include "pfx/prefix_bank.hpp"
#include "pfx/synth_data.hpp"
#include "pfx/trainer.hpp"

namespace pfx {

/// Oracle outcome counts for a batch of completions against a target.
struct RelevanceCounts {
  long matched = 0, mismatched = 0, undecided = 0;

  long total() const { return matched + mismatched + undecided; }
  long decided() const { return matched + mismatched; }
  /// matched / decided in percent (0 when nothing was decided).
  double relevance() const;
  /// Shares of the total in percent; they sum to exactly 100 as rationals.
  double matched_share() const;
  double mismatched_share() const;
  double undecided_share() const;
  RelevanceCounts& operator+=(const RelevanceCounts& o);
};

RelevanceCounts attribute_relevance(std::span<const TokenSequence> completions, const AspectSpec& spec, int target);

/// Matched only when every aspect's oracle agrees with its target; undecided
/// when any aspect is undecided.
RelevanceCounts joint_relevance(std::span<const TokenSequence> completions, std::span<const AspectSpec> specs,
                                std::span<const int> targets);

/// Fraction of completion tokens drawn from the spec's avoid lexicon.
double avoid_rate(std::span<const TokenSequence> completions, const AspectSpec& spec);

struct Completion {
  TokenSequence context;       // prompt, possibly with a marker
  TokenSequence continuation;  // generated tokens only
};

/// exp of the mean negative log-likelihood of all continuation tokens under
/// the evaluation model; context tokens are conditioned on but not scored.
double perplexity(const Transformer<float>& eval_model, std::span<const Completion> completions);

struct LatencyStats {
  double mean_s = 0;
  double stddev_s = 0;
  double cv = 0;
  int repetitions = 0;
};

/// Wall-clock seconds per completion on a single worker, after `warmup`
/// untimed runs.
LatencyStats latency_benchmark(const Transformer<float>& model, const TokenSequence& prompt,
                               const PrefixKV<float>* prefix, const SamplingParams& sampling, int repetitions,
                               int warmup = 3);

struct GenerationOptions {
  int completions_per_prompt = 45;
  SamplingParams sampling;  // seed is the base for per-completion seeds
};

/// `marker` (possibly empty) is prepended to every prompt.
std::vector<Completion> generate_completions(const Transformer<float>& model, std::span<const TokenSequence> prompts,
                                             const PrefixKV<float>* prefix, const GenerationOptions& opts,
                                             std::uint64_t stream, const TokenSequence& marker = {});

/// Prompt-engineering marker: the attribute name as plain text.
TokenSequence attribute_marker(const AspectSpec& spec, int attribute);

std::vector<TokenSequence> continuations(std::span<const Completion> completions);

struct ReportRow {
  std::string method;
  std::string aspect;     // "polarity", or "polarity+topic" for multi-aspect rows
  std::string attribute;  // "positive", or "negative+world"
  std::map<std::string, RelevanceCounts> relevance;  // per aspect
  std::optional<RelevanceCounts> joint;
  double perplexity = 0;
  std::optional<double> avoid_rate;
  std::optional<double> latency_s;
  long completions = 0;
};

struct EvalReport {
  std::map<std::string, std::string> meta;
  std::vector<ReportRow> rows;
  std::vector<std::string> failures;  // requested rows that could not be produced

  /// One JSON object per line: a meta line, then one line per row.
  std::string to_jsonl(bool include_latency = false) const;
  std::string to_table() const;
};

/// Suite configuration in the same `key = value` format as training
/// configs. `train.<key>` entries are forwarded to every TrainConfig.
struct SuiteConfig {
  std::string base_model;
  std::string eval_model;
  std::vector<std::string> rows;  // "<aspect>:<method>" or "multi:<method>"
  std::map<std::string, std::string> banks;  // row id -> exported bank file(s), comma separated for multi rows
  bool train_missing = true;
  int prompts = 15;
  int completions = 45;
  int max_new = 20;
  int top_k = 0;
  double top_p = 1.0;
  double temperature = 1.0;
  std::uint64_t seed = 42;
  double separability = 0.7;
  int full_per_attribute = 2000;
  int dev_per_attribute = 32;
  int semi_examples = 4000;
  bool latency = false;
  int latency_reps = 100;
  std::vector<std::pair<std::string, std::string>> train_overrides;

  static std::vector<std::string> default_rows();
  static SuiteConfig parse(std::string_view text);
  static SuiteConfig load(const std::string& path);
  std::string hash() const;
};

/// Trains or loads what each requested row needs, generates completions and
/// scores them. Rows that fail are listed in `failures`.
EvalReport run_suite(const SuiteConfig& cfg, std::ostream* progress = nullptr);

/// Balanced subset: the first `per_attribute` records of each attribute
/// of `spec` (in corpus order).
std::vector<CorpusRecord> take_per_attribute(std::span<const CorpusRecord> records, const AspectSpec& spec,
                                             int per_attribute);

}  // namespace pfx
