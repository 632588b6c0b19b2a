#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pfx/model.hpp"

namespace pfx {

/// The attribute set of one aspect. Label index equals prefix index.
struct AspectSchema {
  std::string aspect;
  std::vector<std::string> attributes;

  int size() const { return static_cast<int>(attributes.size()); }
  int index_of(const std::string& attribute) const;  // -1 if absent
  void validate() const;
  bool operator==(const AspectSchema&) const = default;
};

struct Provenance {
  std::string regime;  // "supervised", "unsupervised", "semi", "" when untrained
  std::uint64_t seed = 0;
  std::string config_hash;
  bool operator==(const Provenance&) const = default;
};

/// Exported, immutable prefixes: a dense N x M x D float table.
class PrefixBank {
 public:
  PrefixBank() = default;
  PrefixBank(AspectSchema schema, int length, int dim, std::vector<float> table);

  const AspectSchema& schema() const { return schema_; }
  int size() const { return schema_.size(); }
  int length() const { return length_; }
  int dim() const { return dim_; }
  std::span<const float> table() const { return table_; }
  std::span<const float> prefix_data(int i) const;

  PrefixKV<float> materialize(int i) const;

  bool trained = false;
  Provenance provenance;

  bool operator==(const PrefixBank&) const = default;

 private:
  AspectSchema schema_;
  int length_ = 0;
  int dim_ = 0;
  std::vector<float> table_;
};

/// Training-time prefixes. With bottleneck D' > 0 each prefix is the product
/// H'_i (M x D') * W_i (D' x D); with D' = 0 ("direct") the table is trained
/// as is, which is how exported banks are fine-tuned further.
template <class T>
class ReparamBank {
 public:
  ReparamBank(AspectSchema schema, int length, int dim, int bottleneck, std::uint64_t seed, double init_std = 0.02);
  static ReparamBank direct(const PrefixBank& bank);

  const AspectSchema& schema() const { return schema_; }
  int size() const { return schema_.size(); }
  int length() const { return length_; }
  int dim() const { return dim_; }
  int bottleneck() const { return bottleneck_; }
  bool is_direct() const { return bottleneck_ == 0; }

  /// Flat trainable parameters: H' (N x M x D') followed by all W_i
  /// (N x D' x D); in direct mode the N x M x D table.
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::span<T> bottleneck_table();
  std::span<T> projection(int i);

  PrefixKV<T> materialize(int i) const;
  std::vector<PrefixKV<T>> materialize_all() const;

  /// Accumulates d(loss)/d(params) given d(loss)/d(materialize(i)) (M x D).
  void backward(int i, std::span<const T> d_prefix, std::span<T> d_params) const;

  PrefixBank export_bank(const Provenance& provenance) const;

 private:
  AspectSchema schema_;
  int length_, dim_, bottleneck_;
  std::vector<T> params_;
};

/// Position-axis concatenation of one prefix per selected bank.
PrefixKV<float> concat_aspects(std::span<const std::pair<const PrefixBank*, int>> selections);

/// New bank whose row a is the old row perm[a]; names move with their rows.
PrefixBank permute_attributes(const PrefixBank& bank, std::span<const int> perm);

/// Exhaustive search over all N! permutations: returns perm maximizing
/// sum_a counts[perm[a]][a], where counts[c][a] is how often cluster c was
/// assigned to items whose true attribute is a. Ties keep the
/// lexicographically first permutation.
std::vector<int> best_alignment(const std::vector<std::vector<int>>& counts);

/// Reorders rows by `perm` and names them in schema order, so row a becomes
/// the prefix for attribute a.
PrefixBank align_to_schema(const PrefixBank& bank, std::span<const int> perm);

struct ParameterBudget {
  std::size_t training = 0;  // H' plus every W_i (or N*M*D in direct mode)
  std::size_t exported = 0;  // N*M*D
  std::size_t frozen = 0;    // decoder parameters
  double training_ratio() const { return static_cast<double>(training) / static_cast<double>(frozen); }
  double exported_ratio() const { return static_cast<double>(exported) / static_cast<double>(frozen); }
};

ParameterBudget parameter_budget(int n, int length, int bottleneck, const ModelConfig& model);

// Bank file: "PFXB", u32 version, aspect name, u32 N, M, D, N attribute
// names, provenance (regime, u64 seed, config hash), u8 trained flag, then
// N*M*D float32 values. Strings are u32-length-prefixed UTF-8.
inline constexpr std::uint32_t kBankFormatVersion = 1;

std::vector<std::uint8_t> serialize_bank(const PrefixBank& bank);
PrefixBank deserialize_bank(std::span<const std::uint8_t> data);
void save_bank(const PrefixBank& bank, const std::string& path);
PrefixBank load_bank(const std::string& path);

}  // namespace pfx
