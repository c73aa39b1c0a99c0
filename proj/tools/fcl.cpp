// fcl: gen-corpus, train, translate, evaluate, analyze, repro.

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "fcl/error.hpp"
#include "fcl/pipeline.hpp"

namespace {

using fcl::pipeline::RunConfig;

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUser = 2;

bool is_user_error(fcl::ErrorCode c) {
  using fcl::ErrorCode;
  switch (c) {
    case ErrorCode::IoError:
    case ErrorCode::InvalidConfig:
    case ErrorCode::VersionMismatch:
    case ErrorCode::CorruptChecksum:
    case ErrorCode::LengthMismatch:
    case ErrorCode::EmptyCorpus:
    case ErrorCode::EmptyTestSet:
    case ErrorCode::TooFewTokens:
    case ErrorCode::SentenceTooLong:
    case ErrorCode::EmptyText:
    case ErrorCode::TextTooShort:
      return true;
    default:
      return false;
  }
}

// Options shared by every subcommand: config file, seed, per-key overrides.
struct Settings {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool no_timestamps = false;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::vector<std::pair<std::string, CLI::Option*>> aliases;  // applied after dotted keys
  std::map<std::string, std::string> alias_values;

  void attach(CLI::App* app, const std::set<std::string>& namespaces) {
    app->add_option("--config", config_path, "JSON config file; flags override its values");
    app->add_option("--seed", seed, "Global seed (falls back to FCL_SEED, then the config file)");
    app->add_flag("--no-timestamps", no_timestamps, "Omit wall-clock times from train.log");
    for (const auto& [key, def] : fcl::pipeline::override_keys()) {
      const auto dot = key.find('.');
      if (dot == std::string::npos || !namespaces.count(key.substr(0, dot))) continue;
      auto [it, inserted] = values.emplace(key, def);
      options[key] = app->add_option("--" + key, it->second, "Overrides " + key)->default_str(def);
    }
  }

  void alias(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto [it, inserted] = alias_values.emplace(key, "");
    for (const auto& [k, def] : fcl::pipeline::override_keys()) {
      if (k == key) it->second = def;
    }
    aliases.emplace_back(key, app->add_option(flag, it->second, help + " (same as --" + key + ")")
                                  ->default_str(it->second));
  }

  // Precedence: defaults < config file < FCL_SEED < flags.
  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : fcl::pipeline::load_run_config(config_path);
    if (const char* env = std::getenv("FCL_SEED"); env && !seed) {
      fcl::pipeline::apply_override(c, "seed", env);
    }
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) fcl::pipeline::apply_override(c, key, values.at(key));
    }
    for (const auto& [key, opt] : aliases) {
      if (opt->count() > 0) fcl::pipeline::apply_override(c, key, alias_values.at(key));
    }
    if (seed) c.seed = c.train.seed = *seed;
    c.validate();
    return c;
  }
};

const std::set<std::string> kAll = {"corpus", "model", "train", "contrastive", "eval", "paths"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-aware token-level contrastive learning for NMT on synthetic corpora"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  Settings gen_s, train_s, tr_s, ev_s, an_s, rep_s;

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic Zipf corpus, its splits and vocabularies");
  gen_s.attach(gen, {"corpus", "paths"});

  auto* train = app.add_subcommand("train", "Train one model and keep the best checkpoint by dev BLEU");
  train_s.attach(train, kAll);
  train_s.alias(train, "--objective", "train.objective", "baseline, tcl or fcl");

  std::string ckpt, input, output;
  auto* translate = app.add_subcommand("translate", "Translate a file of source sentences, one per line");
  translate->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  translate->add_option("--input", input, "Source sentences")->required();
  translate->add_option("--output", output, "Hypothesis file to write")->required();
  tr_s.attach(translate, {"eval"});
  tr_s.alias(translate, "--beam", "eval.beam_size", "Beam width; 1 is greedy decoding");
  tr_s.alias(translate, "--alpha", "eval.length_penalty", "Length penalty exponent");

  std::string hyp, ref, vocab, out;
  auto* evaluate = app.add_subcommand("evaluate", "Score hypotheses: BLEU, subsets, frequency buckets, diversity");
  evaluate->add_option("--hyp", hyp, "Hypothesis file")->required();
  evaluate->add_option("--ref", ref, "Reference file")->required();
  evaluate->add_option("--vocab", vocab, "Target vocabulary TSV with training counts")->required();
  evaluate->add_option("--out", out, "Directory for metrics.json and buckets.csv")->required();
  ev_s.attach(evaluate, {"eval"});
  ev_s.alias(evaluate, "--buckets", "eval.bucket_count", "Number of frequency buckets");

  std::string an_ckpt, an_vocab, an_out;
  bool svg = false, dump = false;
  auto* analyze = app.add_subcommand("analyze", "Geometry of the softmax embeddings: uniformity, distance, isotropy, PCA");
  analyze->add_option("--checkpoint", an_ckpt, "Checkpoint file")->required();
  analyze->add_option("--vocab", an_vocab, "Target vocabulary TSV with training counts")->required();
  analyze->add_option("--out", an_out, "Directory for geometry.json and pca.csv")->required();
  analyze->add_flag("--svg", svg, "Also render pca.svg");
  analyze->add_flag("--dump-embeddings", dump, "Also write the embeddings as text");
  an_s.attach(analyze, {"eval"});

  auto* repro = app.add_subcommand("repro", "gen-corpus, train baseline and fcl, evaluate, analyze, compare");
  rep_s.attach(repro, kAll);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUser;
  }

  try {
    if (gen->parsed()) {
      const auto f = fcl::pipeline::gen_corpus(gen_s.resolve());
      std::cout << "wrote " << f.train.string() << ".{src,tgt}, " << f.dev.string() << ".{src,tgt}, "
                << f.test.string() << ".{src,tgt}, " << f.src_vocab.string() << ", " << f.tgt_vocab.string() << '\n';
    } else if (train->parsed()) {
      const auto c = train_s.resolve();
      const auto r = fcl::pipeline::run_train(c, !train_s.no_timestamps);
      std::cout << "best epoch " << r.best_epoch << " dev BLEU " << r.best_dev_bleu << " after " << r.steps
                << " steps; outputs in " << c.paths.run_dir << '\n';
    } else if (translate->parsed()) {
      const auto c = tr_s.resolve();
      fcl::pipeline::run_translate(ckpt, input, output, fcl::pipeline::decode_config(c.eval));
    } else if (evaluate->parsed()) {
      const auto c = ev_s.resolve();
      const auto r = fcl::pipeline::run_evaluate(hyp, ref, vocab, c.eval, out);
      std::cout << "BLEU " << r.bleu << '\n';
    } else if (analyze->parsed()) {
      const auto c = an_s.resolve();
      fcl::pipeline::AnalyzeOptions o;
      o.svg = svg;
      o.dump_embeddings = dump;
      o.seed = c.seed;
      const auto r = fcl::pipeline::run_analyze(an_ckpt, an_vocab, c.eval, an_out, o);
      std::cout << "-Uni " << r.neg_uniformity << " Dis " << r.avg_distance << '\n';
    } else if (repro->parsed()) {
      const auto r = fcl::pipeline::run_repro(rep_s.resolve(), !rep_s.no_timestamps);
      std::cout << r.comparison.dump(2) << '\n';
    }
  } catch (const fcl::Error& e) {
    std::cerr << "error [" << fcl::error_code_name(e.code()) << "]: " << e.what() << '\n';
    return is_user_error(e.code()) ? kExitUser : kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}
