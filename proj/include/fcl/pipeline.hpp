#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fcl/contrastive.hpp"
#include "fcl/corpus.hpp"
#include "fcl/decode.hpp"
#include "fcl/eval.hpp"
#include "fcl/geometry.hpp"
#include "fcl/model.hpp"
#include "fcl/training.hpp"
#include "json.hpp"

namespace fcl::pipeline {

struct Paths {
  std::string run_dir = "runs/default";
  std::string corpus_stem = "data/zipf";
  bool operator==(const Paths&) const = default;
};

/// Every module's settings in one place. `seed` drives training; the corpus
/// has its own seed so several training seeds can share one corpus.
struct RunConfig {
  corpus::ZipfCorpusConfig corpus;
  double dev_fraction = 0.05;
  double test_fraction = 0.05;
  model::ModelConfig model;
  training::TrainConfig train;
  contrastive::ContrastiveConfig contrastive;
  eval::EvalConfig eval;
  Paths paths;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Namespaced object: corpus, model, train, contrastive, eval, paths, seed.
nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);
/// `key` is `namespace.field` (or `seed`); `value` is JSON or a bare string.
void apply_override(RunConfig& c, const std::string& key, const std::string& value);
/// Every overridable key with its default rendered as text.
std::vector<std::pair<std::string, std::string>> override_keys(const RunConfig& c = {});

decode::DecodeConfig decode_config(const eval::EvalConfig& e);

struct CorpusFiles {
  std::filesystem::path train, dev, test;  // stems; add .src / .tgt
  std::filesystem::path src_vocab, tgt_vocab;
};

CorpusFiles corpus_files(const std::filesystem::path& stem);

/// Generates, splits and writes the corpus plus both vocabularies.
CorpusFiles gen_corpus(const RunConfig& c);

/// Reads the split files; missing files raise IoError naming the path.
training::TrainData load_train_data(const RunConfig& c);

/// Trains into `run_dir`, writing `config.json` beside the checkpoint.
training::TrainResult run_train(const RunConfig& c, bool timestamps);

std::vector<corpus::Sentence> translate_sentences(const model::Checkpoint& ck,
                                                  const std::vector<corpus::Sentence>& input,
                                                  const decode::DecodeConfig& cfg);
void run_translate(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                   const std::filesystem::path& output, const decode::DecodeConfig& cfg);

eval::MetricsReport run_evaluate(const std::filesystem::path& hyp, const std::filesystem::path& ref,
                                 const std::filesystem::path& vocab, const eval::EvalConfig& cfg,
                                 const std::filesystem::path& out_dir);

struct AnalyzeOptions {
  bool svg = false;
  bool dump_embeddings = false;
  std::uint64_t seed = 0;
};

geometry::GeometryReport run_analyze(const std::filesystem::path& checkpoint, const std::filesystem::path& vocab,
                                     const eval::EvalConfig& cfg, const std::filesystem::path& out_dir,
                                     const AnalyzeOptions& options = {});

struct ReproArm {
  std::string objective;
  double best_dev_bleu = 0.0;
  int best_epoch = 0;
  std::size_t epochs = 0;
  eval::MetricsReport metrics;
  geometry::GeometryReport geometry;
};

struct ReproResult {
  std::vector<ReproArm> arms;  // baseline, fcl
  nlohmann::json comparison;
};

/// One arm of `repro` on an existing corpus: train into `run_dir/<objective>/`,
/// translate the test split, evaluate and analyze there.
ReproArm run_repro_arm(const RunConfig& c, training::Objective objective, bool timestamps);

/// One row per arm with BLEU, rare-bucket F1 and the geometry summary.
nlohmann::json comparison_json(const std::vector<ReproArm>& arms, std::uint64_t seed);

/// gen-corpus, train baseline and fcl, translate the test split, evaluate,
/// analyze. Outputs go under `run_dir/<objective>/` plus `comparison.json`.
ReproResult run_repro(const RunConfig& c, bool timestamps);

/// F1 of the two rarest buckets with their counts pooled.
double rare_bucket_f1(const eval::BucketedPRF& b);

}  // namespace fcl::pipeline
