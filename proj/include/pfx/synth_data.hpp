#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pfx/common.hpp"
#include "pfx/prefix_bank.hpp"

namespace pfx {

/// The 64-symbol character vocabulary: PAD, MASK, BOS, space, a-z, 32
/// uppercase lexicon words (one id each), '.', ','.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(symbols_.size()); }
  Token pad() const { return 0; }
  Token mask() const { return 1; }
  Token bos() const { return 2; }
  bool is_special(Token t) const { return t >= 0 && t <= 2; }
  bool is_lexicon(Token t) const { return t >= first_lexicon_ && t < first_lexicon_ + num_lexicon_; }

  /// Lexicon words are matched greedily (longest first), everything else
  /// one character at a time. Throws on characters outside the vocabulary.
  TokenSequence encode(std::string_view text) const;
  /// Special tokens render as <pad>, <mask>, <bos>.
  std::string decode(std::span<const Token> tokens) const;

  Token lexicon_id(std::string_view word) const;  // throws if not a lexicon word
  const std::string& symbol(Token t) const;
  std::vector<std::string> lexicon_words() const;

 private:
  Vocabulary();
  std::vector<std::string> symbols_;
  int first_lexicon_ = 0;
  int num_lexicon_ = 0;
};

struct AttributeSpec {
  std::string name;
  std::vector<std::string> lexicon;
};

/// A synthetic aspect. Each text unit is, with probability `separability`, a
/// word from the record's own attribute lexicon; otherwise a lexicon word of
/// a uniformly random attribute (share `noise_lexicon_share`) or a neutral
/// filler word.
struct AspectSpec {
  std::string name;
  std::vector<AttributeSpec> attributes;
  double separability = 0.9;
  double noise_lexicon_share = 0.5;
  int min_units = 8;
  int max_units = 14;
  std::string avoid_attribute;  // lexicon whose emission is to be suppressed

  void validate() const;
  AspectSchema schema() const;
  int attribute_index(std::string_view attribute) const;  // -1 if absent

  static AspectSpec polarity(double separability = 0.9);
  static AspectSpec topic(double separability = 0.9);
  static AspectSpec toxicity(double separability = 0.9);
};

/// Validates each spec and rejects lexicons shared across aspects.
void validate_specs(std::span<const AspectSpec> specs);

std::vector<AspectSpec> parse_aspect_specs(std::string_view json_text);
std::vector<AspectSpec> load_aspect_specs(const std::string& path);
std::string aspect_specs_to_json(std::span<const AspectSpec> specs);

struct CorpusRecord {
  TokenSequence tokens;
  std::map<std::string, std::string> labels;
  bool operator==(const CorpusRecord&) const = default;
};

enum class LabelMode { full, partial, none };
LabelMode parse_label_mode(std::string_view s);

std::vector<CorpusRecord> generate_corpus(std::span<const AspectSpec> specs, int count, LabelMode mode,
                                          std::uint64_t seed);

inline constexpr std::string_view kUndecided = "undecided";

/// Attribute index with the strictly largest lexicon count, or -1 on ties
/// (including zero lexicon tokens).
int oracle_index(std::span<const Token> tokens, const AspectSpec& spec);
std::string oracle_classify(std::span<const Token> tokens, const AspectSpec& spec);

/// Number of tokens that belong to the avoid attribute's lexicon.
int avoid_count(std::span<const Token> tokens, const AspectSpec& spec);

/// Fixed prompts made only of filler words (no lexicon tokens).
std::vector<TokenSequence> neutral_prompts(const AspectSpec& spec, int count = 15);

/// Newline-delimited JSON: {"text": "...", "labels": {"aspect": "attr"}}.
std::string corpus_to_jsonl(std::span<const CorpusRecord> records);
std::vector<CorpusRecord> parse_corpus(std::string_view jsonl, std::span<const AspectSpec> specs);
std::vector<CorpusRecord> ingest(const std::string& path, std::span<const AspectSpec> specs);
void export_corpus(const std::string& path, std::span<const CorpusRecord> records);

}  // namespace pfx
