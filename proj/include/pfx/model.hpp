#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pfx/common.hpp"

namespace pfx {

/// Architecture of a decoder-only causal transformer (pre-LN, GELU MLP,
/// learned absolute positions, untied bias-free LM head).
struct ModelConfig {
  int num_layers = 4;
  int hidden_size = 128;
  int num_heads = 4;
  int vocab_size = 64;
  int max_positions = 128;
  Token pad_id = 0;
  Token mask_id = 1;
  Token bos_id = 2;
  // Off only for the order-symmetry test model; prefixes are then
  // interchangeable along the position axis.
  bool use_positions = true;

  /// D: one key and one value vector per layer.
  int activation_dim() const { return 2 * num_layers * hidden_size; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  static ModelConfig desk() { return {}; }
  /// The larger evaluation model used for perplexity.
  static ModelConfig eval_desk() {
    ModelConfig c;
    c.num_layers = 6;
    c.hidden_size = 256;
    c.num_heads = 8;
    return c;
  }
};

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Named views into the flat parameter vector of a Transformer.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::size_t total() const { return total_; }
  const ParamSpec& get(std::string_view name) const;

  struct Layer {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, mlp_w, mlp_b;
  };
  const Layer& layer(int l) const { return layers_[l]; }
  std::size_t wte() const { return wte_; }
  std::size_t wpe() const { return wpe_; }
  std::size_t lnf_g() const { return lnf_g_; }
  std::size_t lnf_b() const { return lnf_b_; }
  std::size_t lm_head() const { return lm_head_; }

 private:
  std::size_t add(std::string name, int rows, int cols);

  std::vector<ParamSpec> specs_;
  std::vector<Layer> layers_;
  std::size_t total_ = 0;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, lm_head_ = 0;
};

/// Closed-form parameter count of a model, equal to ParamLayout(cfg).total().
std::size_t parameter_count(const ModelConfig& cfg);

/// Per-layer key/value activations prepended to attention: `length` rows of
/// width D, each row laid out layer-major with the key block before the
/// value block ([k_0 | v_0 | k_1 | v_1 | ...], each E wide).
template <class T>
class PrefixKV {
 public:
  PrefixKV() = default;
  PrefixKV(int length, int dim) : length_(length), dim_(dim), data_(static_cast<std::size_t>(length) * dim) {}
  PrefixKV(int length, int dim, std::vector<T> data);

  int length() const { return length_; }
  int dim() const { return dim_; }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<const T> row(int j) const { return std::span(data_).subspan(static_cast<std::size_t>(j) * dim_, dim_); }
  std::span<T> row(int j) { return std::span(data_).subspan(static_cast<std::size_t>(j) * dim_, dim_); }
  std::span<const T> key(int layer, int j, int hidden) const { return row(j).subspan(2 * layer * hidden, hidden); }
  std::span<const T> value(int layer, int j, int hidden) const {
    return row(j).subspan((2 * layer + 1) * hidden, hidden);
  }
  bool all_finite() const;
  bool operator==(const PrefixKV&) const = default;

 private:
  int length_ = 0;
  int dim_ = 0;
  std::vector<T> data_;
};

/// Concatenates prefixes along the position axis, in order.
template <class T>
PrefixKV<T> concat_prefixes(std::span<const PrefixKV<T>> parts);

template <class T>
struct LayerActivations {
  std::vector<T> x_in, ln1, ln1_mean, ln1_rstd, qkv, k_all, v_all, probs, att, x_mid, ln2, ln2_mean, ln2_rstd,
      fc, fc_act;
};

/// Everything a forward pass keeps for its backward pass. Reusing one cache
/// across calls avoids reallocation.
template <class T>
struct ForwardCache {
  int n = 0;
  int prefix_len = 0;
  int pos_offset = 0;
  TokenSequence tokens;
  std::vector<LayerActivations<T>> layers;
  std::vector<T> x_out, lnf, lnf_mean, lnf_rstd, logits;
};

template <class T>
struct SequenceScore {
  std::vector<T> token_log_probs;
  T total = 0;
};

struct SamplingParams {
  int top_k = 0;         // 0 disables
  double top_p = 1.0;    // in (0, 1]
  double temperature = 1.0;
  bool greedy = false;   // also implied by temperature <= 0
  int max_new = 20;
  std::uint64_t seed = 42;
  bool suppress_special = true;  // never emit PAD/MASK/BOS

  void validate() const;
};

/// Teacher-forcing inputs for scoring `seq`: [BOS, x_1 .. x_{T-1}], so that
/// every one of the T tokens is predicted.
TokenSequence teacher_inputs(const TokenSequence& seq, Token bos);

/// Picks the next token from one row of logits. Ties in greedy mode go to the
/// lowest id.
template <class T>
Token sample_token(std::span<const T> logits, const SamplingParams& params, Rng& rng, const ModelConfig& cfg);

template <class T>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& cfg);

  /// GPT-2 style init: N(0, std) matrices, zero biases, unit LN gains, and
  /// residual projections scaled by 1/sqrt(2L).
  static Transformer random(const ModelConfig& cfg, std::uint64_t seed, double std = 0.02);

  template <class U>
  Transformer<U> cast() const;

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::span<T> param(std::string_view name);
  std::span<const T> param(std::string_view name) const;

  /// Runs `tokens` with `prefix` (may be null) prepended to every layer's
  /// keys/values. Real tokens take positions pos_offset.. (default: the
  /// prefix length, so prefixes consume the first positions).
  void forward(std::span<const Token> tokens, const PrefixKV<T>* prefix, ForwardCache<T>& cache,
               int pos_offset = -1, bool want_logits = true) const;

  /// Convenience: per-position logits, n x V.
  std::vector<T> logits(std::span<const Token> tokens, const PrefixKV<T>* prefix) const;

  /// Backpropagates d_logits (n x V, may be empty) and d_hidden (gradient on
  /// the final-LN output, n x E, may be empty). Parameter gradients are
  /// accumulated into d_params and prefix gradients into d_prefix; either may
  /// be empty to skip that work.
  void backward(const ForwardCache<T>& cache, std::span<const T> d_logits, std::span<const T> d_hidden,
                std::span<T> d_params, std::span<T> d_prefix) const;

  /// log p(x_t | x_<t, prefix) for every token plus their sum.
  SequenceScore<T> sequence_log_prob(const TokenSequence& seq, const PrefixKV<T>* prefix) const;

  /// Scores `targets` given `inputs` (same length, usually teacher_inputs of
  /// the targets, possibly masked) and accumulates scale * d(total)/d(.) into
  /// d_params / d_prefix. Returns the total log-probability.
  T score_with_grad(const TokenSequence& targets, std::span<const Token> inputs, const PrefixKV<T>* prefix,
                    T scale, std::span<T> d_params, std::span<T> d_prefix, ForwardCache<T>& workspace) const;

  /// log-probs of `continuation` tokens following [BOS, context...].
  std::vector<T> continuation_log_probs(const TokenSequence& context, const TokenSequence& continuation,
                                        const PrefixKV<T>* prefix) const;

  /// Samples a completion; returns prompt followed by the new tokens. The
  /// cached path keeps per-layer key/value buffers; the uncached path re-runs
  /// the full context every step.
  TokenSequence generate(const TokenSequence& prompt, const PrefixKV<T>* prefix, const SamplingParams& sampling,
                         bool use_cache = true) const;

 private:
  void check_tokens(std::span<const Token> tokens) const;

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<T> params_;
};

/// Transformer body (initialized from the decoder) plus one linear head per
/// aspect mapping the last position's final hidden state to a flattened
/// prefix-shaped vector.
template <class T>
class Encoder {
 public:
  Encoder(Transformer<T> body, int num_heads, int out_dim);

  static Encoder from_decoder(const Transformer<T>& decoder, int num_heads, int out_dim, std::uint64_t seed,
                              double init_std = 0.02);

  template <class U>
  Encoder<U> cast() const;

  struct Pass {
    ForwardCache<T> cache;
    int pooled_row = 0;
    std::vector<std::vector<T>> outputs;  // per head, out_dim
  };

  void forward(const TokenSequence& seq, Pass& pass) const;
  std::vector<T> encode(const TokenSequence& seq, int head = 0) const;

  /// d_outputs holds one gradient per head (an empty vector skips that head).
  void backward(const Pass& pass, std::span<const std::vector<T>> d_outputs, std::span<T> d_body,
                std::span<T> d_heads) const;

  Transformer<T>& body() { return body_; }
  const Transformer<T>& body() const { return body_; }
  std::span<T> head_params() { return heads_; }
  std::span<const T> head_params() const { return heads_; }
  int num_heads() const { return num_heads_; }
  int out_dim() const { return out_dim_; }
  std::size_t head_stride() const;

 private:
  Transformer<T> body_;
  int num_heads_;
  int out_dim_;
  std::vector<T> heads_;  // per head: W [E x out_dim] then b [out_dim]
};

// Checkpoint format: "PFXM", u32 version, nine i32 ModelConfig fields, u32
// tensor count, then per tensor a length-prefixed name, u32 rows, u32 cols and
// row-major little-endian float32 data. Encoders append "head.<k>.w/b".
inline constexpr std::uint32_t kModelFormatVersion = 1;

std::vector<std::uint8_t> serialize_model(const Transformer<float>& model);
Transformer<float> deserialize_model(std::span<const std::uint8_t> data);
void save_model(const Transformer<float>& model, const std::string& path);
Transformer<float> load_model(const std::string& path);

void save_encoder(const Encoder<float>& encoder, const std::string& path);
Encoder<float> load_encoder(const std::string& path);

}  // namespace pfx
