#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pfx/model.hpp"
#include "pfx/prefix_bank.hpp"

namespace pfx {

struct ObjectiveConfig {
  double omega1 = 0.8;  // L_LM
  double omega2 = 0.2;  // L_d (supervised, semi); unused when the KL schedule applies
  double omega3 = 0.0;  // L_c (unsupervised) or L_enc (semi)
  double margin = 1.0;
  double mask_rate = 0.5;
  double tau_start = 1.0, tau_end = 0.5;
  double kl_start = 0.001, kl_end = 0.1;
  long schedule_steps = 1000;
  bool contrast_vector = true;  // false: scalar masses gathered at z and z-bar
  bool length_normalize_ld = false;

  void validate() const;
};

struct ScheduleValues {
  double kl_weight;
  double tau;
};

/// Linear interpolation between the endpoints, clamped outside [0, steps].
ScheduleValues schedule(const ObjectiveConfig& cfg, long step);

template <class T>
std::vector<T> softmax(std::span<const T> logits);

/// Given p = softmax(l) and dL/dp, accumulates dL/dl into d_logits.
template <class T>
void softmax_backward(std::span<const T> p, std::span<const T> d_p, std::span<T> d_logits);

std::vector<double> sample_gumbel(int n, std::uint64_t seed);

/// softmax((logits + noise) / tau).
template <class T>
std::vector<T> gumbel_softmax(std::span<const T> logits, std::span<const double> noise, double tau);
template <class T>
std::vector<T> gumbel_softmax(std::span<const T> logits, double tau, std::uint64_t seed);

/// dL/dlogits of y = gumbel_softmax(logits, noise, tau), accumulated.
template <class T>
void gumbel_softmax_backward(std::span<const T> y, std::span<const T> d_y, double tau, std::span<T> d_logits);

enum class Pull { attract, repel };

/// Euclidean distance from `enc` to each flattened prefix.
template <class T>
std::vector<T> prefix_distances(std::span<const T> enc, std::span<const PrefixKV<T>> prefixes);

/// Gumbel-softmax over -d (attract) or +d (repel).
template <class T>
std::vector<T> encoder_posterior(std::span<const T> enc, std::span<const PrefixKV<T>> prefixes, double tau,
                                 std::uint64_t seed, Pull pull);

/// -log softmax(scores)[y]; optionally writes dL/dscores.
template <class T>
T discriminative_loss(std::span<const T> scores, int y, std::span<T> d_scores = {});

/// KL(q || uniform) with 0 ln 0 = 0; optionally writes dL/dq.
template <class T>
T kl_loss(std::span<const T> q, std::span<T> d_q = {});

/// max(m - ||p - p_bar||, 0)^2; gradients are written when the spans are
/// non-empty (zero where the hinge is inactive or the norm is zero).
template <class T>
T contrastive_loss(std::span<const T> p, std::span<const T> p_bar, double margin, std::span<T> d_p = {},
                   std::span<T> d_p_bar = {});

/// -log q_sup[y].
template <class T>
T encoder_loss(std::span<const T> q_sup, int y);

/// Replaces each position except index 0 (the BOS slot of teacher inputs)
/// with `mask_id` with probability `rate`. Use mask_positions for raw masks.
TokenSequence mask_inputs(std::span<const Token> inputs, double rate, Token mask_id, std::uint64_t seed);
/// Every position independently masked with probability `rate`.
TokenSequence mask_tokens(std::span<const Token> seq, double rate, Token mask_id, std::uint64_t seed);

/// Sum of log p(x_t | x_<t, P_z) for every prefix z.
template <class T>
std::vector<T> prefix_scores(const Transformer<T>& model, const TokenSequence& seq,
                             std::span<const PrefixKV<T>> prefixes);

/// softmax over z of prefix_scores (uniform prior).
template <class T>
std::vector<T> exact_posterior(const Transformer<T>& model, const TokenSequence& seq,
                               std::span<const PrefixKV<T>> prefixes);

/// Sum_z w_z P_z.
template <class T>
PrefixKV<T> mix_prefixes(std::span<const PrefixKV<T>> prefixes, std::span<const T> weights);

/// Mean over examples of -log p(x | prefix); each example uses the mixture
/// of `prefixes` given by its weight vector.
template <class T>
T lm_loss(const Transformer<T>& model, std::span<const TokenSequence> batch, std::span<const PrefixKV<T>> prefixes,
          std::span<const std::vector<T>> weights);
template <class T>
T lm_loss(const Transformer<T>& model, std::span<const TokenSequence> batch, std::span<const PrefixKV<T>> prefixes,
          std::span<const int> indices);

/// Mean over examples of -log softmax(s)_y with s_z = prefix_scores.
template <class T>
T discriminative_loss(const Transformer<T>& model, std::span<const TokenSequence> batch,
                      std::span<const PrefixKV<T>> prefixes, std::span<const int> labels,
                      bool length_normalize = false);

// ---------------------------------------------------------------------------
// Per-example losses with gradients, as used by the trainer. Every gradient
// is multiplied by `scale` (1/B for batch means) and accumulated.

struct LossParts {
  double lm = 0, d = 0, kl = 0, c = 0, enc = 0, total = 0;
  LossParts& operator+=(const LossParts& o);
  LossParts scaled(double s) const;
};

template <class T>
struct PrefixGrads {
  std::vector<std::vector<T>> rows;  // one M x D buffer per prefix
  explicit PrefixGrads(std::span<const PrefixKV<T>> prefixes = {});
  void zero();
};

/// w1 * L_LM + w2 * L_d for one labeled example. With w2 = 0 only the
/// labeled prefix is run, so other prefixes receive no gradient at all.
template <class T>
LossParts supervised_example(const Transformer<T>& model, std::span<const PrefixKV<T>> prefixes,
                             const TokenSequence& x, int y, const ObjectiveConfig& cfg, T scale, PrefixGrads<T>& grads);

/// Encoder gradients: body parameters and head parameters; either may be empty.
template <class T>
struct EncoderGrads {
  std::span<T> body;
  std::span<T> heads;
};

/// w1 * L_LM(masked, soft prefix) + kl_weight * L_KL + w3 * L_c for one
/// unlabeled example. `seed` fixes mask and both Gumbel draws.
template <class T>
LossParts unsupervised_example(const Transformer<T>& model, const Encoder<T>& encoder,
                               std::span<const PrefixKV<T>> prefixes, const TokenSequence& x,
                               const ObjectiveConfig& cfg, ScheduleValues sched, std::uint64_t seed, T scale,
                               PrefixGrads<T>& grads, EncoderGrads<T> enc_grads);

struct LatentFilter {
  int top_k = 0;       // 0: off
  double top_p = 1.0;  // 1: off
};

/// Hard latent from softmax(-d) after top-k then top-p filtering and
/// renormalization. k = 1 reduces to argmin distance.
template <class T>
int filtered_latent(std::span<const T> distances, const LatentFilter& filter, std::uint64_t seed);

/// One example for the semi-supervised regime over several aspects. labels[k]
/// is the attribute index for aspect k or -1. The decoder sees the
/// concatenation of one prefix per aspect, in aspect order.
template <class T>
LossParts semi_example(const Transformer<T>& model, const Encoder<T>& encoder,
                       std::span<const std::vector<PrefixKV<T>>> aspects, const TokenSequence& x,
                       std::span<const int> labels, std::span<const LatentFilter> filters, const ObjectiveConfig& cfg,
                       std::uint64_t seed, T scale, std::span<PrefixGrads<T>> grads, EncoderGrads<T> enc_grads);

}  // namespace pfx
