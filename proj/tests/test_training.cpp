#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fcl/error.hpp"
#include "fcl/training.hpp"
#include "test_util.hpp"

using namespace fcl;
using namespace fcl::training;
using fcl::ad::Var;

namespace {

TrainData tiny_data(std::uint64_t seed = 3, int vocab = 20, std::size_t pairs = 80) {
  corpus::ZipfCorpusConfig cc;
  cc.vocab_size = vocab;
  cc.pair_count = pairs;
  cc.min_len = 2;
  cc.max_len = 5;
  cc.seed = seed;
  return make_train_data(corpus::split_corpus(corpus::generate_zipf_corpus(cc), 0.1, 0.1));
}

model::ModelConfig tiny_model(const TrainData& d, double dropout = 0.1) {
  auto c = fcl::testing::tiny_config(static_cast<int>(d.tgt_vocab.size()), dropout);
  c.src_vocab = static_cast<int>(d.src_vocab.size());
  return c;
}

std::vector<Tensor> values(const Trainer& t) {
  std::vector<Tensor> out;
  for (const auto& v : t.parameters()) out.push_back(v.value());
  return out;
}

struct Run {
  std::vector<StepLog> logs;
  std::vector<std::vector<Tensor>> trajectory;
};

Run run_steps(const TrainData& d, const TrainConfig& cfg, const contrastive::ContrastiveConfig& cc,
              const corpus::FrequencyTable& freq, int epochs = 2) {
  RngStream init(cfg.seed, RngPurpose::init);
  Trainer tr(model::init_model(tiny_model(d), init), cfg, cc, &freq);
  TrainStreams streams(cfg.seed);
  Run r;
  for (int e = 0; e < epochs; ++e) {
    for (const auto& b : corpus::batch_epoch(d.train, cfg.max_tokens, streams.shuffle)) {
      r.logs.push_back(training_step(tr, b, streams));
      r.trajectory.push_back(values(tr));
    }
  }
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("learning rate schedule") {
  CHECK(lr_schedule(400, 400, 64) == doctest::Approx(0.00625).epsilon(1e-14));
  const double w = 100;
  CHECK(std::pow(w, -0.5) == doctest::Approx(w * std::pow(w, -1.5)).epsilon(1e-15));
  for (std::int64_t s = 1; s < 400; ++s) CHECK(lr_schedule(s + 1, 400, 64) > lr_schedule(s, 400, 64));
  for (std::int64_t s = 400; s < 2000; ++s) CHECK(lr_schedule(s + 1, 400, 64) < lr_schedule(s, 400, 64));
  CHECK_THROWS_AS(lr_schedule(0, 400, 64), Error);
}

TEST_CASE("adam update") {
  Var p = Var::parameter(Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
  auto st = make_adam_state({p});
  p.zero_grad();
  (void)p.grad();
  ad::backward(ad::scale(ad::sum(p), 0.0));
  adam_update({p}, st, 0.1, {});
  CHECK(p.value() == Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));

  // hand-stepped scalar: grads 0.5 then -0.25
  Var x = Var::parameter(Tensor({1}, std::vector<double>{1.0}));
  auto sx = make_adam_state({x});
  AdamConfig cfg;
  const double lr = 0.01;
  double m = 0, v = 0, w = 1.0;
  const double grads[2] = {0.5, -0.25};
  for (int t = 1; t <= 2; ++t) {
    x.zero_grad();
    ad::backward(ad::dot_const(x, Tensor({1}, std::vector<double>{grads[t - 1]})));
    adam_update({x}, sx, lr, cfg);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.998 * v + 0.002 * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.998, t));
    w -= lr * mh / (std::sqrt(vh) + 1e-9);
    CHECK(x.value()[0] == doctest::Approx(w).epsilon(1e-15));
  }

  Var big = Var::parameter(fcl::testing::random_tensor({10}, 1));
  auto sb = make_adam_state({big});
  RngStream rng(5, RngPurpose::shuffle);
  for (int it = 0; it < 1000; ++it) {
    big.zero_grad();
    Tensor g({10});
    for (auto& e : g.storage()) e = rng.uniform(-100.0, 100.0);
    ad::backward(ad::dot_const(big, g));
    adam_update({big}, sb, 1e-3, {});
  }
  CHECK(sb.m[0].all_finite());
  CHECK(sb.v[0].all_finite());
  CHECK(big.value().all_finite());
}

TEST_CASE("gradient clipping") {
  Var a = Var::parameter(Tensor({2}, std::vector<double>{0, 0}));
  ad::backward(ad::dot_const(a, Tensor({2}, std::vector<double>{3, 4})));
  CHECK(clip_grad_norm({a}, 1.0) == doctest::Approx(5.0));
  Tensor g = a.grad();
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  CHECK(clip_grad_norm({a}, 10.0) == doctest::Approx(1.0));
}

TEST_CASE("baseline step reports no contrastive term") {
  auto d = tiny_data();
  TrainConfig cfg;
  cfg.max_tokens = 64;
  auto r = run_steps(d, cfg, {}, d.tgt_freq, 1);
  REQUIRE(!r.logs.empty());
  for (const auto& s : r.logs) {
    CHECK(s.l_contrast == 0.0);
    CHECK(s.total == s.l_mt);
    CHECK(std::isfinite(s.grad_norm));
  }
}

TEST_CASE("total loss is the weighted sum") {
  auto d = tiny_data();
  for (auto obj : {Objective::tcl, Objective::fcl}) {
    TrainConfig cfg;
    cfg.objective = obj;
    cfg.max_tokens = 64;
    auto r = run_steps(d, cfg, {}, d.tgt_freq, 1);
    for (const auto& s : r.logs) {
      CHECK(s.l_contrast != 0.0);
      CHECK(std::abs(s.total - (s.l_mt + cfg.lambda * s.l_contrast)) <= 1e-9);
    }
  }
}

TEST_CASE("lambda zero reproduces the baseline trajectory bit for bit") {
  auto d = tiny_data();
  TrainConfig base;
  base.max_tokens = 64;
  auto b = run_steps(d, base, {}, d.tgt_freq);
  for (auto obj : {Objective::tcl, Objective::fcl}) {
    TrainConfig cfg = base;
    cfg.objective = obj;
    cfg.lambda = 0.0;
    auto r = run_steps(d, cfg, {}, d.tgt_freq);
    REQUIRE(r.trajectory.size() == b.trajectory.size());
    bool identical = true;
    for (std::size_t i = 0; i < r.trajectory.size(); ++i) {
      identical = identical && r.trajectory[i] == b.trajectory[i] && r.logs[i].l_mt == b.logs[i].l_mt;
    }
    CHECK(identical);
  }
}

TEST_CASE("fcl on uniform counts with unit gamma equals tcl") {
  auto d = tiny_data();
  corpus::FrequencyTable flat = d.tgt_freq;
  for (std::size_t i = corpus::kNumReserved; i < flat.counts.size(); ++i) flat.counts[i] = 17;
  flat.counts[corpus::kEos] = 17;
  contrastive::ContrastiveConfig cc;
  cc.gamma = 1.0;
  TrainConfig cfg;
  cfg.max_tokens = 64;
  cfg.objective = Objective::tcl;
  auto t = run_steps(d, cfg, cc, flat);
  cfg.objective = Objective::fcl;
  auto f = run_steps(d, cfg, cc, flat);
  REQUIRE(t.logs.size() == f.logs.size());
  bool identical = true;
  for (std::size_t i = 0; i < t.logs.size(); ++i) {
    identical = identical && t.logs[i].l_mt == f.logs[i].l_mt && t.logs[i].l_contrast == f.logs[i].l_contrast &&
                t.logs[i].total == f.logs[i].total && t.trajectory[i] == f.trajectory[i];
  }
  CHECK(identical);
}

TEST_CASE("tied weights stay shared through updates") {
  auto d = tiny_data();
  RngStream init(1, RngPurpose::init);
  TrainConfig cfg;
  cfg.max_tokens = 64;
  cfg.objective = Objective::fcl;
  Trainer tr(model::init_model(tiny_model(d), init), cfg, {}, &d.tgt_freq);
  TrainStreams streams(1);
  for (const auto& b : corpus::batch_epoch(d.train, 64, streams.shuffle)) training_step(tr, b, streams);
  CHECK(tr.params.softmax_weight.same_storage(tr.params.tgt_embedding));
  for (const auto& v : tr.parameters()) CHECK(v.value().all_finite());
  for (const auto& m : tr.adam.m) CHECK(m.all_finite());
  for (const auto& v : tr.adam.v) CHECK(v.all_finite());
}

TEST_CASE("early stopping") {
  EarlyStopping es(1);
  CHECK(es.update(10.0));
  CHECK(!es.should_stop());
  CHECK(!es.update(9.0));
  CHECK(es.should_stop());
  CHECK(es.best_epoch() == 1);

  EarlyStopping e3(3);
  for (double s : {1.0, 2.0, 2.0, 1.5, 3.0, 2.0, 2.0}) e3.update(s);
  CHECK(e3.best_epoch() == 5);
  CHECK(!e3.should_stop());
  CHECK_THROWS_AS(EarlyStopping(0), Error);

  auto d = tiny_data();
  TrainConfig cfg;
  cfg.patience = 1;
  cfg.max_epochs = 10;
  cfg.max_tokens = 64;
  TrainOptions opt;
  opt.dev_score = [](const model::ModelParams&, int epoch) { return 50.0 - epoch; };
  auto r = train(d, tiny_model(d), cfg, {}, opt);
  CHECK(r.epochs.size() == 2);
  CHECK(r.best_epoch == 1);
  CHECK(r.best.step == static_cast<std::int64_t>(r.steps / 2));
}

TEST_CASE("training is deterministic and writes its artifacts") {
  auto d = tiny_data();
  TrainConfig cfg;
  cfg.objective = Objective::fcl;
  cfg.max_epochs = 2;
  cfg.max_tokens = 64;
  auto dir = std::filesystem::temp_directory_path() / "fcl_train_test";
  std::filesystem::remove_all(dir);
  TrainOptions opt;
  opt.timestamps = false;
  opt.run_dir = dir / "a";
  auto a = train(d, tiny_model(d), cfg, {}, opt);
  opt.run_dir = dir / "b";
  auto b = train(d, tiny_model(d), cfg, {}, opt);
  CHECK(std::filesystem::exists(dir / "a" / "best.ckpt"));
  const std::string log_a = slurp(dir / "a" / "train.log");
  CHECK(!log_a.empty());
  CHECK(log_a == slurp(dir / "b" / "train.log"));
  CHECK(slurp(dir / "a" / "best.ckpt") == slurp(dir / "b" / "best.ckpt"));
  CHECK(a.best_dev_bleu == b.best_dev_bleu);

  auto ck = model::load_checkpoint(dir / "a" / "best.ckpt");
  auto [src, tgt] = vocab_from_metadata(ck.metadata);
  CHECK(src == d.src_vocab);
  CHECK(tgt == d.tgt_vocab);

  std::istringstream lines(log_a);
  std::string line;
  int steps = 0, epochs = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    if (j["type"] == "step") {
      ++steps;
      CHECK(std::abs(j["total"].get<double>() -
                     (j["l_mt"].get<double>() + cfg.lambda * j["l_contrast"].get<double>())) <= 1e-9);
    } else {
      ++epochs;
      CHECK(j.contains("dev_bleu"));
    }
    CHECK(!j.contains("time"));
  }
  CHECK(steps == a.steps);
  CHECK(epochs == 2);
}

TEST_CASE("config validation and json round trip") {
  TrainConfig c;
  c.objective = Objective::tcl;
  c.lambda = 0.5;
  c.mt_on_both_passes = true;
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>() == c);
  TrainConfig bad;
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.patience = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(parse_objective("focal"), Error);
}
