#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fcl/contrastive.hpp"
#include "fcl/corpus.hpp"
#include "fcl/model.hpp"
#include "json.hpp"

namespace fcl::training {

using ad::Var;

enum class Objective { baseline, tcl, fcl };

std::string objective_name(Objective o);
Objective parse_objective(const std::string& s);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-9;
  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  Objective objective = Objective::baseline;
  /// Weight of the contrastive term.
  double lambda = 2.0;
  double label_smoothing = 0.1;
  AdamConfig adam;
  std::int64_t warmup_steps = 400;
  /// Multiplies the inverse-square-root schedule.
  double lr_scale = 1.0;
  double clip_norm = 5.0;
  std::size_t max_tokens = 1024;
  int max_epochs = 30;
  int patience = 5;
  /// Beam used for the per-epoch dev score; 1 is greedy.
  int dev_beam = 1;
  /// Average the translation loss over both passes instead of pass 1 only.
  bool mt_on_both_passes = false;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5).
double lr_schedule(std::int64_t step, std::int64_t warmup_steps, int d_model);

struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
};

AdamState make_adam_state(const std::vector<Var>& params);
/// One bias-corrected Adam step using the gradients stored on `params`.
void adam_update(const std::vector<Var>& params, AdamState& state, double lr, const AdamConfig& cfg);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Var>& params, double max_norm);

struct TrainStreams {
  RngStream shuffle;
  RngStream pass1;
  RngStream pass2;

  explicit TrainStreams(std::uint64_t seed);
};

struct StepLog {
  std::int64_t step = 0;
  double l_mt = 0.0;
  double l_contrast = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::size_t tokens = 0;
};

struct Trainer {
  model::ModelParams params;
  AdamState adam;
  TrainConfig config;
  contrastive::ContrastiveConfig contrast;
  const corpus::FrequencyTable* freq = nullptr;

  Trainer(model::ModelParams p, const TrainConfig& cfg, const contrastive::ContrastiveConfig& ccfg,
          const corpus::FrequencyTable* freq);

  std::vector<Var> parameters() const;
};

/// Two dropout passes, combined loss, single backward, clip, Adam.
StepLog training_step(Trainer& trainer, const corpus::Batch& batch, TrainStreams& streams);

class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);
  /// Records an epoch score; returns true when it is a new best.
  bool update(double score);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_score() const { return best_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_ = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double dev_bleu = 0.0;
  bool best = false;
  double mean_l_mt = 0.0;
  double mean_l_contrast = 0.0;
  std::int64_t steps = 0;
};

struct TrainData {
  std::vector<corpus::EncodedPair> train;
  std::vector<corpus::EncodedPair> dev;
  corpus::Vocabulary src_vocab;
  corpus::Vocabulary tgt_vocab;
  corpus::FrequencyTable tgt_freq;
};

/// Vocabularies from the training split; all splits encoded with them.
TrainData make_train_data(const corpus::CorpusSplits& splits);

struct TrainOptions {
  std::filesystem::path run_dir;  // empty: nothing written
  bool timestamps = true;
  nlohmann::json checkpoint_metadata = nlohmann::json::object();
  /// Called after each epoch; replaces dev decoding when set (tests).
  std::function<double(const model::ModelParams&, int epoch)> dev_score;
};

struct TrainResult {
  model::ModelParams best;
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  double best_dev_bleu = 0.0;
  std::int64_t steps = 0;
};

/// Full training loop with early stopping on dev BLEU. Writes
/// `train.log` and `best.ckpt` into `run_dir` when it is set.
TrainResult train(const TrainData& data, const model::ModelConfig& mcfg, const TrainConfig& cfg,
                  const contrastive::ContrastiveConfig& ccfg, const TrainOptions& options = {});

/// Vocabulary metadata stored with checkpoints so inference is self-contained.
nlohmann::json vocab_metadata(const corpus::Vocabulary& src, const corpus::Vocabulary& tgt);
std::pair<corpus::Vocabulary, corpus::Vocabulary> vocab_from_metadata(const nlohmann::json& meta);

}  // namespace fcl::training
