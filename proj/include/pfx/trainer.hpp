#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pfx/model.hpp"
#include "pfx/objectives.hpp"
#include "pfx/prefix_bank.hpp"
#include "pfx/synth_data.hpp"

namespace pfx {

enum class Regime { pretrain, supervised, unsupervised, semi };
Regime parse_regime(std::string_view s);
std::string_view regime_name(Regime r);

struct TrainConfig {
  Regime regime = Regime::supervised;
  int batch_size = 8;
  int epochs = 5;
  long max_steps = 0;  // > 0 overrides epochs
  double learning_rate = 2e-5;
  double encoder_learning_rate = 0;  // 0: same as learning_rate
  std::uint64_t seed = 42;
  double weight_decay = 0.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  ObjectiveConfig objective;
  std::map<std::string, LatentFilter> filters;  // semi regime, per aspect
  long warm_steps = 0;                          // semi regime, encoder only
  int prefix_length = 10;
  int bottleneck_dim = 256;
  double init_std = 0.02;
  int pos_offset_max = 20;  // pretraining: random position shift

  /// Defaults for a regime, including its loss weights.
  static TrainConfig defaults(Regime regime);
  /// Flat `key = value` text with `#` comments; unknown keys are errors.
  /// `regime` is applied first so that its defaults can be overridden.
  static TrainConfig parse(std::string_view text);
  static TrainConfig load(const std::string& path);
  /// Canonical text listing every key, parseable by parse().
  std::string to_text() const;
  std::string hash() const;
  void validate() const;
};

/// A training text with one attribute index per aspect (-1 when unlabeled).
struct Example {
  TokenSequence tokens;
  std::vector<int> labels;
};

std::vector<Example> to_examples(std::span<const CorpusRecord> records, std::span<const AspectSpec> specs);

struct StepLog {
  long step = 0;
  int epoch = 0;
  LossParts loss;
  double grad_norm = 0;
};

struct TrainHooks {
  long stop_after_steps = -1;  // simulate an interruption (absolute step count)
  std::string checkpoint_path;
  long checkpoint_every = 0;   // also written at the end when a path is set
  std::string resume_from;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<PrefixBank> banks;
  std::optional<Encoder<float>> encoder;
  std::vector<StepLog> log;
  long steps = 0;
  std::vector<int> alignment;  // unsupervised: cluster chosen for each attribute

  /// Per-epoch means of the logged steps.
  std::vector<LossParts> epoch_means() const;
};

/// Total optimizer steps implied by the config for `n` examples.
long total_steps(const TrainConfig& cfg, std::size_t n);

/// Example indices of `step`'s batch: a seeded shuffle per epoch.
std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t n, long step);

/// Pretrains every decoder weight as a causal LM on unlabeled text.
TrainResult pretrain(Transformer<float>& model, std::span<const TokenSequence> data, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

TrainResult train_supervised(const Transformer<float>& model, std::span<const Example> data,
                             const AspectSchema& schema, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Labels in `data` are ignored; `dev` (labeled) only serves the final
/// alignment of clusters to attribute names.
TrainResult train_unsupervised(const Transformer<float>& model, std::span<const Example> data,
                               const AspectSchema& schema, std::span<const Example> dev, const TrainConfig& cfg,
                               const TrainHooks& hooks = {});

/// `init` optionally provides one exported bank per schema to start from.
TrainResult train_semi(const Transformer<float>& model, std::span<const Example> data,
                       std::span<const AspectSchema> schemas, const TrainConfig& cfg,
                       std::span<const PrefixBank> init = {}, const TrainHooks& hooks = {});

/// Attribute index per sequence: the bank row nearest to the encoder output.
std::vector<int> encoder_assignments(const Encoder<float>& encoder, int head, const PrefixBank& bank,
                                     std::span<const TokenSequence> seqs);

// Checkpoint file: "PFXC", u32 version, u64 step, config hash, u32 group
// count, then per group a name and three float arrays (params, Adam m, Adam
// v), and a trailing CRC32 over all preceding bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamGroup {
  std::string name;
  std::span<float> params;
  std::vector<float> m, v;
  double lr_scale = 1.0;
};

struct OptimizerState {
  std::vector<ParamGroup> groups;
  long step = 0;
};

void save_checkpoint(const OptimizerState& state, const std::string& config_hash, const std::string& path);
/// Restores params and moments in place; group names and sizes must match.
void load_checkpoint(OptimizerState& state, const std::string& config_hash, const std::string& path);

/// One AdamW update with global-norm clipping; returns the pre-clip norm.
double adamw_step(OptimizerState& state, std::span<const std::vector<float>> grads, const TrainConfig& cfg,
                  double lr);

}  // namespace pfx
