#include "pfx/synth_data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pfx/io.hpp"

namespace pfx {

using nlohmann::json;

namespace {

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {"the", "a",  "it", "was",  "and",  "of",
                                                 "to",  "is", "in", "that", "this", "with"};
  return words;
}

const std::vector<std::pair<std::string, std::vector<std::string>>>& stock_lexicons() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> lex = {
      {"negative", {"BAD", "SAD", "AWFUL", "GRIM"}},     {"positive", {"GOOD", "JOY", "GREAT", "NICE"}},
      {"world", {"WAR", "POLL", "TREATY", "EMBASSY"}},   {"sports", {"GOAL", "MATCH", "COACH", "LEAGUE"}},
      {"business", {"STOCK", "PROFIT", "MARKET", "BANK"}}, {"science", {"ATOM", "LAB", "ROBOT", "GENE"}},
      {"toxic", {"IDIOT", "DUMB", "HATE", "STUPID"}},    {"clean", {"THANKS", "PLEASE", "KIND", "HELP"}},
  };
  return lex;
}

std::vector<std::string> stock(const std::string& attribute) {
  for (const auto& [name, words] : stock_lexicons())
    if (name == attribute) return words;
  throw Error("no stock lexicon for " + attribute);
}

AspectSpec make_stock(std::string name, std::vector<std::string> attrs, double separability) {
  AspectSpec s;
  s.name = std::move(name);
  for (auto& a : attrs) s.attributes.push_back({a, stock(a)});
  s.separability = separability;
  return s;
}

}  // namespace

Vocabulary::Vocabulary() {
  symbols_ = {"<pad>", "<mask>", "<bos>", " "};
  for (char c = 'a'; c <= 'z'; ++c) symbols_.emplace_back(1, c);
  first_lexicon_ = static_cast<int>(symbols_.size());
  for (const auto& [name, words] : stock_lexicons())
    for (const auto& w : words) symbols_.push_back(w);
  num_lexicon_ = static_cast<int>(symbols_.size()) - first_lexicon_;
  symbols_.push_back(".");
  symbols_.push_back(",");
  // Greedy matching is exact only if no lexicon word prefixes another.
  for (int i = first_lexicon_; i < first_lexicon_ + num_lexicon_; ++i)
    for (int j = first_lexicon_; j < first_lexicon_ + num_lexicon_; ++j)
      if (i != j && symbols_[j].starts_with(symbols_[i])) throw Error("lexicon is not prefix-free");
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence out;
  std::size_t i = 0;
  while (i < text.size()) {
    int best = -1;
    std::size_t best_len = 0;
    for (int t = first_lexicon_; t < first_lexicon_ + num_lexicon_; ++t) {
      const auto& w = symbols_[t];
      if (w.size() > best_len && text.substr(i).starts_with(w)) {
        best = t;
        best_len = w.size();
      }
    }
    if (best < 0) {
      for (int t = 3; t < size(); ++t)
        if (!is_lexicon(t) && symbols_[t].size() == 1 && symbols_[t][0] == text[i]) {
          best = t;
          best_len = 1;
          break;
        }
    }
    if (best < 0) {
      std::ostringstream msg;
      msg << "character '" << text[i] << "' at offset " << i << " is not in the vocabulary";
      throw Error(msg.str());
    }
    out.push_back(best);
    i += best_len;
  }
  return out;
}

std::string Vocabulary::decode(std::span<const Token> tokens) const {
  std::string s;
  for (Token t : tokens) s += symbol(t);
  return s;
}

Token Vocabulary::lexicon_id(std::string_view word) const {
  for (int t = first_lexicon_; t < first_lexicon_ + num_lexicon_; ++t)
    if (symbols_[t] == word) return t;
  throw Error("'" + std::string(word) + "' is not a lexicon word");
}

const std::string& Vocabulary::symbol(Token t) const {
  require(t >= 0 && t < size(), "token id " + std::to_string(t) + " outside vocabulary");
  return symbols_[t];
}

std::vector<std::string> Vocabulary::lexicon_words() const {
  return {symbols_.begin() + first_lexicon_, symbols_.begin() + first_lexicon_ + num_lexicon_};
}

void AspectSpec::validate() const {
  require(!name.empty(), "aspect spec needs a name");
  require(!attributes.empty(), "aspect " + name + " needs attributes");
  require(separability > 0 && separability <= 1, "aspect " + name + ": separability must lie in (0, 1]");
  require(noise_lexicon_share >= 0 && noise_lexicon_share <= 1, "aspect " + name + ": noise share must lie in [0, 1]");
  require(min_units >= 1 && max_units >= min_units, "aspect " + name + ": invalid unit range");
  schema().validate();
  const auto& vocab = Vocabulary::standard();
  std::set<std::string> seen;
  for (const auto& a : attributes) {
    require(a.name != kUndecided, "attribute name 'undecided' is reserved");
    require(!a.lexicon.empty(), "attribute " + a.name + " has an empty lexicon");
    for (const auto& w : a.lexicon) {
      vocab.lexicon_id(w);
      require(seen.insert(w).second, "aspect " + name + ": lexicon word " + w + " is used by two attributes");
    }
  }
  if (!avoid_attribute.empty())
    require(attribute_index(avoid_attribute) >= 0, "aspect " + name + ": unknown avoid attribute " + avoid_attribute);
}

AspectSchema AspectSpec::schema() const {
  AspectSchema s{name, {}};
  for (const auto& a : attributes) s.attributes.push_back(a.name);
  return s;
}

int AspectSpec::attribute_index(std::string_view attribute) const {
  for (std::size_t i = 0; i < attributes.size(); ++i)
    if (attributes[i].name == attribute) return static_cast<int>(i);
  return -1;
}

AspectSpec AspectSpec::polarity(double separability) {
  return make_stock("polarity", {"negative", "positive"}, separability);
}

AspectSpec AspectSpec::topic(double separability) {
  return make_stock("topic", {"world", "sports", "business", "science"}, separability);
}

AspectSpec AspectSpec::toxicity(double separability) {
  auto s = make_stock("toxicity", {"toxic", "clean"}, separability);
  s.avoid_attribute = "toxic";
  return s;
}

void validate_specs(std::span<const AspectSpec> specs) {
  std::map<std::string, std::string> owner;
  std::set<std::string> names;
  for (const auto& s : specs) {
    s.validate();
    require(names.insert(s.name).second, "duplicate aspect " + s.name);
    for (const auto& a : s.attributes)
      for (const auto& w : a.lexicon) {
        auto [it, fresh] = owner.emplace(w, s.name);
        if (!fresh) throw Error("lexicon word " + w + " is shared by aspects " + it->second + " and " + s.name);
      }
  }
}

std::vector<AspectSpec> parse_aspect_specs(std::string_view json_text) {
  std::vector<AspectSpec> out;
  try {
    const auto j = json::parse(json_text);
    for (const auto& ja : j.at("aspects")) {
      AspectSpec s;
      s.name = ja.at("name").get<std::string>();
      for (const auto& jt : ja.at("attributes"))
        s.attributes.push_back({jt.at("name").get<std::string>(), jt.at("lexicon").get<std::vector<std::string>>()});
      s.separability = ja.value("separability", s.separability);
      s.noise_lexicon_share = ja.value("noise_lexicon_share", s.noise_lexicon_share);
      s.min_units = ja.value("min_units", s.min_units);
      s.max_units = ja.value("max_units", s.max_units);
      s.avoid_attribute = ja.value("avoid", std::string());
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("aspect spec: ") + e.what());
  }
  validate_specs(out);
  return out;
}

std::vector<AspectSpec> load_aspect_specs(const std::string& path) {
  const auto bytes = io::read_file(path);
  return parse_aspect_specs(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string aspect_specs_to_json(std::span<const AspectSpec> specs) {
  json arr = json::array();
  for (const auto& s : specs) {
    json ja{{"name", s.name},
            {"separability", s.separability},
            {"noise_lexicon_share", s.noise_lexicon_share},
            {"min_units", s.min_units},
            {"max_units", s.max_units}};
    if (!s.avoid_attribute.empty()) ja["avoid"] = s.avoid_attribute;
    for (const auto& a : s.attributes) ja["attributes"].push_back({{"name", a.name}, {"lexicon", a.lexicon}});
    arr.push_back(ja);
  }
  return json{{"aspects", arr}}.dump(2) + "\n";
}

LabelMode parse_label_mode(std::string_view s) {
  if (s == "full") return LabelMode::full;
  if (s == "partial") return LabelMode::partial;
  if (s == "none") return LabelMode::none;
  throw Error("label mode must be full, partial or none, got " + std::string(s));
}

std::vector<CorpusRecord> generate_corpus(std::span<const AspectSpec> specs, int count, LabelMode mode,
                                          std::uint64_t seed) {
  require(count >= 1, "corpus count must be >= 1");
  require(!specs.empty(), "corpus needs at least one aspect");
  validate_specs(specs);
  const auto& vocab = Vocabulary::standard();
  int lo = 0, hi = 0;
  for (const auto& s : specs) {
    lo = std::max(lo, s.min_units);
    hi = std::max(hi, s.max_units);
  }
  const int K = static_cast<int>(specs.size());
  std::vector<CorpusRecord> out;
  out.reserve(count);
  for (int r = 0; r < count; ++r) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(r)}));
    std::vector<int> attr(K);
    for (int k = 0; k < K; ++k) attr[k] = rng.below(static_cast<int>(specs[k].attributes.size()));
    const int units = lo + rng.below(hi - lo + 1);
    CorpusRecord rec;
    for (int u = 0; u < units; ++u) {
      const auto& s = specs[rng.below(K)];
      const int own = attr[&s - specs.data()];
      if (rng.bernoulli(s.separability)) {
        const auto& lex = s.attributes[own].lexicon;
        rec.tokens.push_back(vocab.lexicon_id(lex[rng.below(static_cast<int>(lex.size()))]));
      } else if (rng.bernoulli(s.noise_lexicon_share)) {
        const auto& lex = s.attributes[rng.below(static_cast<int>(s.attributes.size()))].lexicon;
        rec.tokens.push_back(vocab.lexicon_id(lex[rng.below(static_cast<int>(lex.size()))]));
      } else {
        const auto& w = filler_words()[rng.below(static_cast<int>(filler_words().size()))];
        const auto t = vocab.encode(w + " ");
        rec.tokens.insert(rec.tokens.end(), t.begin(), t.end());
      }
    }
    if (mode == LabelMode::full) {
      for (int k = 0; k < K; ++k) rec.labels[specs[k].name] = specs[k].attributes[attr[k]].name;
    } else if (mode == LabelMode::partial) {
      const int k = rng.below(K);
      rec.labels[specs[k].name] = specs[k].attributes[attr[k]].name;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

int oracle_index(std::span<const Token> tokens, const AspectSpec& spec) {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> counts(spec.attributes.size(), 0);
  std::vector<Token> ids;
  std::vector<int> owner;
  for (std::size_t a = 0; a < spec.attributes.size(); ++a)
    for (const auto& w : spec.attributes[a].lexicon) {
      ids.push_back(vocab.lexicon_id(w));
      owner.push_back(static_cast<int>(a));
    }
  for (Token t : tokens)
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == t) ++counts[owner[i]];
  const auto best = std::max_element(counts.begin(), counts.end());
  if (std::count(counts.begin(), counts.end(), *best) > 1) return -1;
  return static_cast<int>(best - counts.begin());
}

std::string oracle_classify(std::span<const Token> tokens, const AspectSpec& spec) {
  const int i = oracle_index(tokens, spec);
  return i < 0 ? std::string(kUndecided) : spec.attributes[i].name;
}

int avoid_count(std::span<const Token> tokens, const AspectSpec& spec) {
  const int a = spec.attribute_index(spec.avoid_attribute);
  require(a >= 0, "aspect " + spec.name + " has no avoid attribute");
  const auto& vocab = Vocabulary::standard();
  std::set<Token> avoid;
  for (const auto& w : spec.attributes[a].lexicon) avoid.insert(vocab.lexicon_id(w));
  return static_cast<int>(std::count_if(tokens.begin(), tokens.end(), [&](Token t) { return avoid.count(t) > 0; }));
}

std::vector<TokenSequence> neutral_prompts(const AspectSpec& spec, int count) {
  const auto& vocab = Vocabulary::standard();
  const auto h = io::content_hash(spec.name);
  Rng rng(derive_seed(std::stoull(h, nullptr, 16), {0x70726f6d7074ULL}));
  std::vector<TokenSequence> out;
  for (int i = 0; i < count; ++i) {
    const int words = 2 + rng.below(3);
    std::string text;
    for (int w = 0; w < words; ++w) text += filler_words()[rng.below(static_cast<int>(filler_words().size()))] + " ";
    out.push_back(vocab.encode(text));
  }
  return out;
}

std::string corpus_to_jsonl(std::span<const CorpusRecord> records) {
  const auto& vocab = Vocabulary::standard();
  std::string out;
  for (const auto& r : records) {
    json j{{"text", vocab.decode(r.tokens)}, {"labels", json::object()}};
    for (const auto& [k, v] : r.labels) j["labels"][k] = v;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<CorpusRecord> parse_corpus(std::string_view jsonl, std::span<const AspectSpec> specs) {
  const auto& vocab = Vocabulary::standard();
  std::vector<CorpusRecord> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < jsonl.size()) {
    auto end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    const auto line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "corpus line " + std::to_string(line_no) + ": ";
    CorpusRecord rec;
    try {
      const auto j = json::parse(line);
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
        throw Error(where + "expected an object with a string field \"text\"");
      rec.tokens = vocab.encode(j["text"].get<std::string>());
      if (j.contains("labels")) {
        if (!j["labels"].is_object()) throw Error(where + "\"labels\" must be an object");
        for (const auto& [aspect, attr] : j["labels"].items()) {
          if (!attr.is_string()) throw Error(where + "label for aspect " + aspect + " must be a string");
          const auto it = std::find_if(specs.begin(), specs.end(), [&](const AspectSpec& s) { return s.name == aspect; });
          if (it == specs.end()) throw Error(where + "unknown aspect " + aspect);
          const auto name = attr.get<std::string>();
          if (it->attribute_index(name) < 0) throw Error(where + "unknown attribute " + name + " for aspect " + aspect);
          rec.labels[aspect] = name;
        }
      }
    } catch (const json::exception& e) {
      throw Error(where + "malformed JSON (" + e.what() + ")");
    } catch (const Error& e) {
      const std::string msg = e.what();
      throw Error(msg.starts_with("corpus line") ? msg : where + msg);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<CorpusRecord> ingest(const std::string& path, std::span<const AspectSpec> specs) {
  const auto bytes = io::read_file(path);
  return parse_corpus(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), specs);
}

void export_corpus(const std::string& path, std::span<const CorpusRecord> records) {
  const auto text = corpus_to_jsonl(records);
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace pfx
