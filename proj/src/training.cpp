#include "fcl/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "fcl/decode.hpp"
#include "fcl/error.hpp"
#include "fcl/eval.hpp"

namespace fcl::training {

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::baseline: return "baseline";
    case Objective::tcl: return "tcl";
    case Objective::fcl: return "fcl";
  }
  return "?";
}

Objective parse_objective(const std::string& s) {
  if (s == "baseline") return Objective::baseline;
  if (s == "tcl") return Objective::tcl;
  if (s == "fcl") return Objective::fcl;
  throw Error(ErrorCode::InvalidConfig, "unknown objective '" + s + "' (baseline|tcl|fcl)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("train.lambda must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("train.label_smoothing must be in [0,1)");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0)) {
    fail("train.adam settings out of range");
  }
  if (warmup_steps < 1) fail("train.warmup_steps must be >= 1");
  if (!(lr_scale > 0.0)) fail("train.lr_scale must be > 0");
  if (!(clip_norm > 0.0)) fail("train.clip_norm must be > 0");
  if (max_tokens < 1) fail("train.max_tokens must be >= 1");
  if (max_epochs < 1) fail("train.max_epochs must be >= 1");
  if (patience < 1) fail("train.patience must be >= 1");
  if (dev_beam < 1) fail("train.dev_beam must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"objective", objective_name(c.objective)},
       {"lambda", c.lambda},
       {"label_smoothing", c.label_smoothing},
       {"adam_beta1", c.adam.beta1},
       {"adam_beta2", c.adam.beta2},
       {"adam_eps", c.adam.eps},
       {"warmup_steps", c.warmup_steps},
       {"lr_scale", c.lr_scale},
       {"clip_norm", c.clip_norm},
       {"max_tokens", c.max_tokens},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"dev_beam", c.dev_beam},
       {"mt_on_both_passes", c.mt_on_both_passes},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("objective")) c.objective = parse_objective(j.at("objective").get<std::string>());
  c.lambda = j.value("lambda", c.lambda);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.adam.beta1 = j.value("adam_beta1", c.adam.beta1);
  c.adam.beta2 = j.value("adam_beta2", c.adam.beta2);
  c.adam.eps = j.value("adam_eps", c.adam.eps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.lr_scale = j.value("lr_scale", c.lr_scale);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.dev_beam = j.value("dev_beam", c.dev_beam);
  c.mt_on_both_passes = j.value("mt_on_both_passes", c.mt_on_both_passes);
  c.seed = j.value("seed", c.seed);
}

double lr_schedule(std::int64_t step, std::int64_t warmup_steps, int d_model) {
  if (step < 1 || warmup_steps < 1 || d_model < 1) {
    throw Error(ErrorCode::InvalidConfig, "lr_schedule needs step, warmup, d_model >= 1");
  }
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

AdamState make_adam_state(const std::vector<Var>& params) {
  AdamState st;
  for (const auto& p : params) {
    st.m.emplace_back(p.shape());
    st.v.emplace_back(p.shape());
  }
  return st;
}

void adam_update(const std::vector<Var>& params, AdamState& state, double lr, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "adam: state/parameter count differs");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var p = params[k];
    if (state.m[k].shape() != p.shape()) {
      throw Error(ErrorCode::ShapeMismatch, "adam: moment shape differs for parameter " + std::to_string(k), k);
    }
    auto g = p.grad_data();
    if (g.empty()) continue;
    auto w = p.mutable_value().data();
    auto m = state.m[k].storage().data();
    auto v = state.v[k].storage().data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

double clip_grad_norm(const std::vector<Var>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad_data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (const auto& p : params) {
      for (double& g : p.mutable_grad()) g *= k;
    }
  }
  return norm;
}

TrainStreams::TrainStreams(std::uint64_t seed)
    : shuffle(seed, RngPurpose::shuffle), pass1(seed, RngPurpose::dropout_pass1), pass2(seed, RngPurpose::dropout_pass2) {}

Trainer::Trainer(model::ModelParams p, const TrainConfig& cfg, const contrastive::ContrastiveConfig& ccfg,
                 const corpus::FrequencyTable* f)
    : params(std::move(p)), config(cfg), contrast(ccfg), freq(f) {
  config.validate();
  contrast.validate();
  adam = make_adam_state(parameters());
}

std::vector<Var> Trainer::parameters() const {
  std::vector<Var> out;
  for (auto& [name, v] : params.named_parameters()) out.push_back(v);
  return out;
}

StepLog training_step(Trainer& tr, const corpus::Batch& batch, TrainStreams& streams) {
  const TrainConfig& cfg = tr.config;
  const model::ModelParams& p = tr.params;
  const bool contrastive = cfg.objective != Objective::baseline;
  if (cfg.objective == Objective::fcl && tr.freq == nullptr) {
    throw Error(ErrorCode::InvalidConfig, "fcl objective needs a frequency table");
  }
  p.zero_grad();

  const std::vector<int> gold = batch.target_ids();
  auto pass = [&](RngStream& stream, model::PassLabel label) {
    Var enc = model::encode(p, batch, &stream);
    return model::decode_states(p, enc, batch, &stream, label);
  };
  auto mt_loss = [&](const model::HiddenStateBatch& hs) {
    return ad::label_smoothed_ce_logits(model::output_logits(p, hs.states), gold, cfg.label_smoothing, corpus::kPad);
  };

  model::HiddenStateBatch s1 = pass(streams.pass1, model::PassLabel::pass1);
  Var l_mt = mt_loss(s1);
  Var l_contrast = Var::constant(Tensor::scalar(0.0));
  if (contrastive || cfg.mt_on_both_passes) {
    model::HiddenStateBatch s2 = pass(streams.pass2, model::PassLabel::pass2);
    if (cfg.mt_on_both_passes) l_mt = ad::scale(ad::add(l_mt, mt_loss(s2)), 0.5);
    if (contrastive) {
      auto positives = contrastive::collect_positive_sets(gold, s1, s2);
      if (cfg.objective == Objective::tcl) {
        l_contrast = contrastive::tcl_loss(s1.states, s2.states, positives, tr.contrast);
      } else {
        auto w = contrastive::contrast_weights(gold, *tr.freq, tr.contrast);
        l_contrast = contrastive::fcl_loss(s1.states, s2.states, positives, w, tr.contrast);
      }
    }
  }
  Var total = contrastive ? ad::add(l_mt, ad::scale(l_contrast, cfg.lambda)) : l_mt;

  StepLog log;
  log.step = tr.adam.step + 1;
  log.l_mt = l_mt.value().item();
  log.l_contrast = l_contrast.value().item();
  log.total = total.value().item();
  log.tokens = gold.size();
  if (!std::isfinite(log.total)) {
    throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(log.step),
                static_cast<std::size_t>(log.step));
  }
  ad::backward(total);
  const auto params = tr.parameters();
  log.grad_norm = clip_grad_norm(params, cfg.clip_norm);
  if (!std::isfinite(log.grad_norm)) {
    throw Error(ErrorCode::NonFinite, "non-finite gradient at step " + std::to_string(log.step),
                static_cast<std::size_t>(log.step));
  }
  log.lr = cfg.lr_scale * lr_schedule(log.step, cfg.warmup_steps, tr.params.config.d_model);
  adam_update(params, tr.adam, log.lr, cfg.adam);
  tr.params.step = tr.adam.step;
  return log;
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) throw Error(ErrorCode::InvalidConfig, "patience must be >= 1");
}

bool EarlyStopping::update(double score) {
  ++epoch_;
  if (epoch_ == 1 || score > best_) {
    best_ = score;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

nlohmann::json vocab_metadata(const corpus::Vocabulary& src, const corpus::Vocabulary& tgt) {
  auto content = [](const corpus::Vocabulary& v) {
    return std::vector<std::string>(v.tokens().begin() + corpus::kNumReserved, v.tokens().end());
  };
  return {{"src_vocab", content(src)}, {"tgt_vocab", content(tgt)}};
}

std::pair<corpus::Vocabulary, corpus::Vocabulary> vocab_from_metadata(const nlohmann::json& meta) {
  if (!meta.contains("src_vocab") || !meta.contains("tgt_vocab")) {
    throw Error(ErrorCode::IoError, "checkpoint metadata lacks vocabularies");
  }
  return {corpus::Vocabulary(meta.at("src_vocab").get<std::vector<std::string>>()),
          corpus::Vocabulary(meta.at("tgt_vocab").get<std::vector<std::string>>())};
}

TrainData make_train_data(const corpus::CorpusSplits& splits) {
  if (splits.train.size() == 0) throw Error(ErrorCode::EmptyCorpus, "training split is empty");
  TrainData d;
  auto src = corpus::build_vocabulary(splits.train.source);
  auto tgt = corpus::build_vocabulary(splits.train.target);
  d.src_vocab = src.vocab;
  d.tgt_vocab = tgt.vocab;
  d.tgt_freq = tgt.freq;
  d.train = corpus::encode_corpus(splits.train, d.src_vocab, d.tgt_vocab);
  d.dev = corpus::encode_corpus(splits.dev, d.src_vocab, d.tgt_vocab);
  return d;
}

namespace {

class LogWriter {
 public:
  LogWriter(const std::filesystem::path& path, bool timestamps) : timestamps_(timestamps) {
    if (path.empty()) return;
    os_.open(path, std::ios::binary | std::ios::trunc);
    if (!os_) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  void write(nlohmann::json record) {
    if (!os_.is_open()) return;
    if (timestamps_) {
      record["time"] = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    }
    os_ << record.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
  bool timestamps_;
};

double dev_bleu(const model::ModelParams& p, const TrainData& data, int beam) {
  std::vector<std::vector<int>> sources;
  std::vector<corpus::Sentence> refs;
  for (const auto& pair : data.dev) {
    sources.push_back(pair.source);
    refs.push_back(data.tgt_vocab.decode(pair.target));
  }
  decode::DecodeConfig dc;
  dc.beam_size = beam;
  auto out = decode::translate(p, sources, dc);
  std::vector<corpus::Sentence> hyps;
  for (const auto& ids : out) hyps.push_back(data.tgt_vocab.decode(ids));
  return eval::bleu(hyps, refs);
}

}  // namespace

TrainResult train(const TrainData& data, const model::ModelConfig& mcfg_in, const TrainConfig& cfg,
                  const contrastive::ContrastiveConfig& ccfg, const TrainOptions& options) {
  cfg.validate();
  if (data.train.empty()) throw Error(ErrorCode::EmptyCorpus, "training split is empty");
  model::ModelConfig mcfg = mcfg_in;
  mcfg.src_vocab = static_cast<int>(data.src_vocab.size());
  mcfg.tgt_vocab = static_cast<int>(data.tgt_vocab.size());
  mcfg.validate();

  if (!options.run_dir.empty()) std::filesystem::create_directories(options.run_dir);
  LogWriter log(options.run_dir.empty() ? std::filesystem::path() : options.run_dir / "train.log",
                options.timestamps);

  RngStream init(cfg.seed, RngPurpose::init);
  Trainer tr(model::init_model(mcfg, init), cfg, ccfg, &data.tgt_freq);
  TrainStreams streams(cfg.seed);
  EarlyStopping stopper(cfg.patience);
  TrainResult result;
  nlohmann::json meta = vocab_metadata(data.src_vocab, data.tgt_vocab);
  meta.update(options.checkpoint_metadata);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto batches = corpus::batch_epoch(data.train, cfg.max_tokens, streams.shuffle);
    EpochLog ep;
    ep.epoch = epoch;
    for (const auto& b : batches) {
      StepLog s = training_step(tr, b, streams);
      ep.mean_l_mt += s.l_mt;
      ep.mean_l_contrast += s.l_contrast;
      ++ep.steps;
      log.write({{"type", "step"},
                 {"epoch", epoch},
                 {"step", s.step},
                 {"l_mt", s.l_mt},
                 {"l_contrast", s.l_contrast},
                 {"total", s.total},
                 {"lr", s.lr},
                 {"grad_norm", s.grad_norm},
                 {"tokens", s.tokens}});
    }
    if (ep.steps > 0) {
      ep.mean_l_mt /= static_cast<double>(ep.steps);
      ep.mean_l_contrast /= static_cast<double>(ep.steps);
    }
    ep.dev_bleu = options.dev_score ? options.dev_score(tr.params, epoch) : dev_bleu(tr.params, data, cfg.dev_beam);
    ep.best = stopper.update(ep.dev_bleu);
    if (ep.best) {
      result.best = model::clone(tr.params);
      if (!options.run_dir.empty()) model::save_checkpoint(result.best, options.run_dir / "best.ckpt", meta);
    }
    log.write({{"type", "epoch"},
               {"epoch", epoch},
               {"dev_bleu", ep.dev_bleu},
               {"best", ep.best},
               {"mean_l_mt", ep.mean_l_mt},
               {"mean_l_contrast", ep.mean_l_contrast},
               {"steps", ep.steps}});
    result.epochs.push_back(ep);
    if (stopper.should_stop()) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_dev_bleu = stopper.best_score();
  result.steps = tr.adam.step;
  return result;
}

}  // namespace fcl::training
