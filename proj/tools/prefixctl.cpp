#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "pfx/eval.hpp"
#include "pfx/io.hpp"

using namespace pfx;

namespace {

std::vector<AspectSpec> specs_from(const std::string& path) {
  if (!path.empty()) return load_aspect_specs(path);
  return {AspectSpec::polarity(), AspectSpec::topic(), AspectSpec::toxicity()};
}

const AspectSpec& find_spec(const std::vector<AspectSpec>& specs, const std::string& name) {
  for (const auto& s : specs)
    if (s.name == name) return s;
  throw Error("no aspect named '" + name + "'");
}

TrainConfig train_config(const std::string& path, Regime fallback, const std::optional<std::uint64_t>& seed) {
  TrainConfig c = path.empty() ? TrainConfig::defaults(fallback) : TrainConfig::load(path);
  if (seed) c.seed = *seed;
  c.validate();
  return c;
}

void print_step(const StepLog& s) {
  if (s.step % 50 == 0)
    std::cerr << "step " << s.step << " epoch " << s.epoch << " loss " << s.loss.total << " lm " << s.loss.lm
              << " d " << s.loss.d << " kl " << s.loss.kl << " c " << s.loss.c << " enc " << s.loss.enc << "\n";
}

struct PretrainArgs {
  std::string config, corpus, out, arch = "desk";
  std::optional<std::uint64_t> seed;
  int count = 20000;
};

int run_pretrain(const PretrainArgs& a) {
  auto cfg = train_config(a.config, Regime::pretrain, a.seed);
  require(cfg.regime == Regime::pretrain, "pretrain needs a config with regime = pretrain");
  const auto specs = specs_from("");
  std::vector<CorpusRecord> corpus;
  if (!a.corpus.empty()) {
    corpus = ingest(a.corpus, specs);
  } else {
    // Union of unlabeled single-aspect corpora.
    for (std::size_t k = 0; k < specs.size(); ++k) {
      auto part = generate_corpus(std::span(&specs[k], 1), a.count / static_cast<int>(specs.size()), LabelMode::none,
                                  derive_seed(cfg.seed, {0xc0, k}));
      corpus.insert(corpus.end(), part.begin(), part.end());
    }
  }
  std::vector<TokenSequence> seqs;
  for (auto& r : corpus) seqs.push_back(std::move(r.tokens));
  require(a.arch == "desk" || a.arch == "eval", "--arch must be desk or eval");
  auto mc = a.arch == "desk" ? ModelConfig::desk() : ModelConfig::eval_desk();
  auto model = Transformer<float>::random(mc, derive_seed(cfg.seed, {0x30de1}));
  TrainHooks hooks;
  hooks.on_step = print_step;
  pretrain(model, seqs, cfg, hooks);
  save_model(model, a.out);
  std::cout << "wrote " << a.out << " (" << parameter_count(mc) << " parameters)\n";
  return 0;
}

struct TrainArgs {
  std::string config, model, corpus, dev, spec, out, checkpoint, resume;
  std::vector<std::string> aspects, init;
  std::optional<std::uint64_t> seed;
  long checkpoint_every = 0;
};

int run_train(const TrainArgs& a) {
  auto cfg = train_config(a.config, Regime::supervised, a.seed);
  require(cfg.regime != Regime::pretrain, "use `prefixctl pretrain` for the pretrain regime");
  const auto model = load_model(a.model);
  const auto all_specs = specs_from(a.spec);
  require(!a.aspects.empty(), "--aspect is required");
  std::vector<AspectSpec> specs;
  for (const auto& name : a.aspects) specs.push_back(find_spec(all_specs, name));
  const auto data = to_examples(ingest(a.corpus, all_specs), specs);
  TrainHooks hooks;
  hooks.on_step = print_step;
  hooks.checkpoint_path = a.checkpoint;
  hooks.checkpoint_every = a.checkpoint_every;
  hooks.resume_from = a.resume;

  TrainResult result;
  if (cfg.regime == Regime::semi) {
    std::vector<AspectSchema> schemas;
    for (const auto& s : specs) schemas.push_back(s.schema());
    std::vector<PrefixBank> init;
    for (const auto& p : a.init) init.push_back(load_bank(p));
    result = train_semi(model, data, schemas, cfg, init, hooks);
  } else {
    require(specs.size() == 1, "single-aspect regimes take exactly one --aspect");
    if (cfg.regime == Regime::supervised) {
      result = train_supervised(model, data, specs[0].schema(), cfg, hooks);
    } else {
      require(!a.dev.empty(), "the unsupervised regime needs --dev (labeled) for cluster alignment");
      const auto dev = to_examples(ingest(a.dev, all_specs), specs);
      result = train_unsupervised(model, data, specs[0].schema(), dev, cfg, hooks);
    }
  }
  for (const auto& bank : result.banks) {
    const std::string path = result.banks.size() == 1 ? a.out : a.out + "." + bank.schema().aspect + ".pfxb";
    save_bank(bank, path);
    std::cout << "wrote " << path << "\n";
  }
  if (result.encoder) {
    save_encoder(*result.encoder, a.out + ".encoder.pfxm");
    std::cout << "wrote " << a.out << ".encoder.pfxm\n";
  }
  return 0;
}

struct GenerateArgs {
  std::string model, prompt;
  std::vector<std::string> banks, attributes;
  std::optional<std::uint64_t> seed;
  int max_new = 20, top_k = 0, count = 1;
  double top_p = 1.0, temperature = 1.0;
  bool greedy = false;
};

int run_generate(const GenerateArgs& a) {
  const auto model = load_model(a.model);
  require(a.banks.size() == a.attributes.size(), "give one --attribute per --bank");
  std::vector<PrefixBank> banks;
  for (const auto& p : a.banks) banks.push_back(load_bank(p));
  std::vector<std::pair<const PrefixBank*, int>> sel;
  for (std::size_t i = 0; i < banks.size(); ++i) {
    const int idx = banks[i].schema().index_of(a.attributes[i]);
    require(idx >= 0, "bank " + a.banks[i] + " has no attribute '" + a.attributes[i] + "'");
    sel.emplace_back(&banks[i], idx);
  }
  std::optional<PrefixKV<float>> prefix;
  if (!sel.empty()) prefix = concat_aspects(sel);
  const auto& vocab = Vocabulary::standard();
  const auto prompt = vocab.encode(a.prompt);
  SamplingParams s;
  s.max_new = a.max_new;
  s.top_k = a.top_k;
  s.top_p = a.top_p;
  s.temperature = a.temperature;
  s.greedy = a.greedy;
  const std::uint64_t base = a.seed.value_or(42);
  for (int i = 0; i < a.count; ++i) {
    s.seed = a.count == 1 ? base : derive_seed(base, {static_cast<std::uint64_t>(i)});
    const auto out = model.generate(prompt, prefix ? &*prefix : nullptr, s);
    std::cout << vocab.decode(out) << "\n";
  }
  return 0;
}

int run_eval(const std::string& config, const std::string& out, const std::optional<std::uint64_t>& seed, bool quiet) {
  auto cfg = SuiteConfig::load(config);
  if (seed) cfg.seed = *seed;
  const auto report = run_suite(cfg, quiet ? nullptr : &std::cerr);
  const auto jsonl = report.to_jsonl(cfg.latency);
  if (!out.empty()) {
    io::write_file(out, std::span(reinterpret_cast<const std::uint8_t*>(jsonl.data()), jsonl.size()));
  } else {
    std::cout << jsonl << "\n";
  }
  std::cout << report.to_table();
  return report.failures.empty() ? 0 : 1;
}

int run_bank_inspect(const std::string& path) {
  const auto bank = load_bank(path);
  const auto& s = bank.schema();
  std::cout << "aspect      " << s.aspect << "\n"
            << "attributes  " << s.size() << "\n";
  for (int i = 0; i < s.size(); ++i) std::cout << "  [" << i << "] " << s.attributes[i] << "\n";
  std::cout << "length M    " << bank.length() << "\n"
            << "dim D       " << bank.dim() << "\n"
            << "trained     " << (bank.trained ? "yes" : "no") << "\n"
            << "regime      " << (bank.provenance.regime.empty() ? "-" : bank.provenance.regime) << "\n"
            << "seed        " << bank.provenance.seed << "\n"
            << "config      " << (bank.provenance.config_hash.empty() ? "-" : bank.provenance.config_hash) << "\n"
            << "content     " << io::content_hash(serialize_bank(bank)) << "\n";
  return 0;
}

int run_data_synth(const std::string& spec, int count, std::uint64_t seed, const std::string& labels,
                   const std::string& out) {
  const auto specs = load_aspect_specs(spec);
  const auto records = generate_corpus(specs, count, parse_label_mode(labels), seed);
  export_corpus(out, records);
  std::cout << "wrote " << records.size() << " records to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute prefixes for a small causal transformer"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Pretrain a base or evaluation model");
  pre->add_option("--config", pa.config, "Training config (regime = pretrain)");
  pre->add_option("--corpus", pa.corpus, "JSONL corpus; default: synthesized union corpus");
  pre->add_option("--count", pa.count, "Records to synthesize when no corpus is given");
  pre->add_option("--arch", pa.arch, "desk or eval")->check(CLI::IsMember({"desk", "eval"}));
  pre->add_option("--seed", pa.seed);
  pre->add_option("--out", pa.out)->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train prefix banks against a frozen model");
  train->add_option("--config", ta.config, "Training config");
  train->add_option("--model", ta.model)->required();
  train->add_option("--corpus", ta.corpus)->required();
  train->add_option("--aspect", ta.aspects, "Aspect name (repeat for the semi regime)");
  train->add_option("--spec", ta.spec, "Aspect spec JSON; default: stock aspects");
  train->add_option("--dev", ta.dev, "Labeled dev corpus for unsupervised alignment");
  train->add_option("--init", ta.init, "Exported banks to start from (semi regime)");
  train->add_option("--checkpoint", ta.checkpoint);
  train->add_option("--checkpoint-every", ta.checkpoint_every);
  train->add_option("--resume", ta.resume);
  train->add_option("--seed", ta.seed);
  train->add_option("--out", ta.out)->required();

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Sample completions");
  gen->add_option("--model", ga.model)->required();
  gen->add_option("--bank", ga.banks, "Bank file (repeat to concatenate aspects)");
  gen->add_option("--attribute", ga.attributes, "Attribute per bank");
  gen->add_option("--prompt", ga.prompt);
  gen->add_option("--max-new", ga.max_new);
  gen->add_option("--top-k", ga.top_k);
  gen->add_option("--top-p", ga.top_p);
  gen->add_option("--temperature", ga.temperature);
  gen->add_flag("--greedy", ga.greedy);
  gen->add_option("-n,--count", ga.count);
  gen->add_option("--seed", ga.seed);

  std::string eval_config, eval_out;
  std::optional<std::uint64_t> eval_seed;
  bool quiet = false;
  auto* ev = app.add_subcommand("eval", "Run an evaluation suite");
  ev->add_option("--config", eval_config)->required();
  ev->add_option("--out", eval_out, "JSONL report path; default: standard output");
  ev->add_option("--seed", eval_seed);
  ev->add_flag("-q,--quiet", quiet);

  std::string bank_path;
  auto* bank = app.add_subcommand("bank", "Prefix bank utilities");
  bank->require_subcommand(1);
  auto* inspect = bank->add_subcommand("inspect", "Print a bank file's header");
  inspect->add_option("file", bank_path)->required();

  std::string spec_path, synth_out, label_mode = "full";
  int synth_count = 1000;
  std::uint64_t synth_seed = 42;
  auto* data = app.add_subcommand("data", "Corpus utilities");
  data->require_subcommand(1);
  auto* synth = data->add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--spec", spec_path)->required();
  synth->add_option("--count", synth_count);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--labels", label_mode, "full, partial or none");
  synth->add_option("--out", synth_out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return run_pretrain(pa);
    if (*train) return run_train(ta);
    if (*gen) return run_generate(ga);
    if (*ev) return run_eval(eval_config, eval_out, eval_seed, quiet);
    if (*inspect) return run_bank_inspect(bank_path);
    if (*synth) return run_data_synth(spec_path, synth_count, synth_seed, label_mode, synth_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
