#include "fcl/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "fcl/error.hpp"

namespace fcl::pipeline {

namespace {

nlohmann::json corpus_json(const RunConfig& c) {
  const auto& z = c.corpus;
  return {{"vocab_size", z.vocab_size},
          {"zipf_exponent", z.zipf_exponent},
          {"min_len", z.min_len},
          {"max_len", z.max_len},
          {"pair_count", z.pair_count},
          {"seed", z.seed},
          {"mapping_rule", corpus::mapping_rule_name(z.mapping_rule)},
          {"permute_tokens", z.permute_tokens},
          {"dev_fraction", c.dev_fraction},
          {"test_fraction", c.test_fraction}};
}

nlohmann::json contrastive_json(const contrastive::ContrastiveConfig& c) {
  return {{"gamma", c.gamma},
          {"freq_max_mode", contrastive::freq_max_mode_name(c.freq_max_mode)},
          {"weight_positives", c.weight_positives},
          {"include_self_in_denominator", c.include_self_in_denominator},
          {"pass2_in_denominator", c.pass2_in_denominator},
          {"temperature", c.temperature},
          {"average_positives", c.average_positives}};
}

nlohmann::json model_json(const model::ModelConfig& m) {
  nlohmann::json j = m;
  j.erase("src_vocab");  // taken from the vocabularies
  j.erase("tgt_vocab");
  return j;
}

nlohmann::json train_json(const training::TrainConfig& t) {
  nlohmann::json j = t;
  j.erase("seed");  // the global seed
  return j;
}

void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& ns) {
  if (!given.is_object()) throw Error(ErrorCode::InvalidConfig, "config section '" + ns + "' must be an object");
  for (const auto& [k, v] : given.items()) {
    if (!known.contains(k)) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + ns + "." + k + "'");
  }
}

template <class T>
T field(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

void RunConfig::validate() const {
  corpus.validate();
  if (!(dev_fraction >= 0.0) || !(test_fraction >= 0.0) || dev_fraction + test_fraction >= 1.0) {
    throw Error(ErrorCode::InvalidConfig, "corpus.dev_fraction + corpus.test_fraction must be in [0,1)");
  }
  model::ModelConfig m = model;
  m.src_vocab = m.tgt_vocab = corpus::kNumReserved + 1;
  m.validate();
  train.validate();
  contrastive.validate();
  eval.validate();
  if (paths.run_dir.empty() || paths.corpus_stem.empty()) {
    throw Error(ErrorCode::InvalidConfig, "paths.run_dir and paths.corpus_stem must be set");
  }
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json e = c.eval;
  return {{"corpus", corpus_json(c)},
          {"model", model_json(c.model)},
          {"train", train_json(c.train)},
          {"contrastive", contrastive_json(c.contrastive)},
          {"eval", e},
          {"paths", {{"run_dir", c.paths.run_dir}, {"corpus_stem", c.paths.corpus_stem}}},
          {"seed", c.seed}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  const RunConfig d;
  const nlohmann::json known = to_json(d);
  check_keys(j, known, "config");
  RunConfig c;
  try {
    if (j.contains("corpus")) {
      const auto& s = j.at("corpus");
      check_keys(s, known.at("corpus"), "corpus");
      auto& z = c.corpus;
      z.vocab_size = field(s, "vocab_size", z.vocab_size);
      z.zipf_exponent = field(s, "zipf_exponent", z.zipf_exponent);
      z.min_len = field(s, "min_len", z.min_len);
      z.max_len = field(s, "max_len", z.max_len);
      z.pair_count = field(s, "pair_count", z.pair_count);
      z.seed = field(s, "seed", z.seed);
      if (s.contains("mapping_rule")) z.mapping_rule = corpus::parse_mapping_rule(s.at("mapping_rule").get<std::string>());
      z.permute_tokens = field(s, "permute_tokens", z.permute_tokens);
      c.dev_fraction = field(s, "dev_fraction", c.dev_fraction);
      c.test_fraction = field(s, "test_fraction", c.test_fraction);
    }
    if (j.contains("model")) {
      check_keys(j.at("model"), known.at("model"), "model");
      nlohmann::json merged = model_json(c.model);
      merged.update(j.at("model"));
      c.model = merged.get<model::ModelConfig>();
    }
    if (j.contains("train")) {
      check_keys(j.at("train"), known.at("train"), "train");
      nlohmann::json merged = train_json(c.train);
      merged.update(j.at("train"));
      c.train = merged.get<training::TrainConfig>();
    }
    if (j.contains("contrastive")) {
      const auto& s = j.at("contrastive");
      check_keys(s, known.at("contrastive"), "contrastive");
      auto& k = c.contrastive;
      k.gamma = field(s, "gamma", k.gamma);
      if (s.contains("freq_max_mode")) {
        k.freq_max_mode = contrastive::parse_freq_max_mode(s.at("freq_max_mode").get<std::string>());
      }
      k.weight_positives = field(s, "weight_positives", k.weight_positives);
      k.include_self_in_denominator = field(s, "include_self_in_denominator", k.include_self_in_denominator);
      k.pass2_in_denominator = field(s, "pass2_in_denominator", k.pass2_in_denominator);
      k.temperature = field(s, "temperature", k.temperature);
      k.average_positives = field(s, "average_positives", k.average_positives);
    }
    if (j.contains("eval")) {
      check_keys(j.at("eval"), known.at("eval"), "eval");
      nlohmann::json merged = c.eval;
      merged.update(j.at("eval"));
      c.eval = merged.get<eval::EvalConfig>();
    }
    if (j.contains("paths")) {
      const auto& s = j.at("paths");
      check_keys(s, known.at("paths"), "paths");
      c.paths.run_dir = field(s, "run_dir", c.paths.run_dir);
      c.paths.corpus_stem = field(s, "corpus_stem", c.paths.corpus_stem);
    }
    c.seed = field(j, "seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config value has the wrong type: ") + e.what());
  }
  c.train.seed = c.seed;
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  os << to_json(c).dump(2) << '\n';
}

void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;
  }
  nlohmann::json j = to_json(c);
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    if (!j.contains(key) || j.at(key).is_object()) throw Error(ErrorCode::InvalidConfig, "unknown option '" + key + "'");
    j[key] = parsed;
  } else {
    const std::string ns = key.substr(0, dot), field_name = key.substr(dot + 1);
    if (!j.contains(ns) || !j.at(ns).is_object() || !j.at(ns).contains(field_name)) {
      throw Error(ErrorCode::InvalidConfig, "unknown option '" + key + "'");
    }
    // keep text fields as text even when the value looks like JSON
    if (j.at(ns).at(field_name).is_string()) parsed = value;
    j[ns][field_name] = parsed;
  }
  c = run_config_from_json(j);
}

std::vector<std::pair<std::string, std::string>> override_keys(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  const nlohmann::json all = to_json(c);
  for (const auto& [ns, section] : all.items()) {
    if (!section.is_object()) {
      out.emplace_back(ns, section.dump());
      continue;
    }
    for (const auto& [k, v] : section.items()) {
      out.emplace_back(ns + "." + k, v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  return out;
}

decode::DecodeConfig decode_config(const eval::EvalConfig& e) {
  decode::DecodeConfig d;
  d.beam_size = e.beam_size;
  d.length_penalty = e.length_penalty;
  d.max_len_factor = e.max_len_factor;
  return d;
}

CorpusFiles corpus_files(const std::filesystem::path& stem) {
  auto with = [&](const std::string& suffix) { return std::filesystem::path(stem.string() + suffix); };
  return {with(".train"), with(".dev"), with(".test"), with(".src.vocab.tsv"), with(".tgt.vocab.tsv")};
}

CorpusFiles gen_corpus(const RunConfig& c) {
  c.validate();
  const CorpusFiles f = corpus_files(c.paths.corpus_stem);
  if (f.train.has_parent_path()) std::filesystem::create_directories(f.train.parent_path());
  const auto splits = corpus::split_corpus(corpus::generate_zipf_corpus(c.corpus), c.dev_fraction, c.test_fraction);
  corpus::write_corpus(f.train, splits.train);
  corpus::write_corpus(f.dev, splits.dev);
  corpus::write_corpus(f.test, splits.test);
  const auto src = corpus::build_vocabulary(splits.train.source);
  const auto tgt = corpus::build_vocabulary(splits.train.target);
  corpus::write_vocabulary(f.src_vocab, src.vocab, src.freq);
  corpus::write_vocabulary(f.tgt_vocab, tgt.vocab, tgt.freq);
  return f;
}

namespace {

void require_file(const std::filesystem::path& p) {
  if (!std::filesystem::is_regular_file(p)) throw Error(ErrorCode::IoError, "missing file " + p.string());
}

corpus::ParallelCorpus read_split(const std::filesystem::path& stem) {
  require_file(stem.string() + ".src");
  require_file(stem.string() + ".tgt");
  return corpus::read_corpus(stem);
}

corpus::VocabularyBuild read_vocab(const std::filesystem::path& p) {
  require_file(p);
  return corpus::read_vocabulary(p);
}

std::vector<corpus::Sentence> read_text(const std::filesystem::path& p) {
  require_file(p);
  return corpus::read_sentences(p);
}

}  // namespace

training::TrainData load_train_data(const RunConfig& c) {
  const CorpusFiles f = corpus_files(c.paths.corpus_stem);
  const auto train = read_split(f.train);
  const auto dev = read_split(f.dev);
  const auto src = read_vocab(f.src_vocab);
  const auto tgt = read_vocab(f.tgt_vocab);
  training::TrainData d;
  d.src_vocab = src.vocab;
  d.tgt_vocab = tgt.vocab;
  d.tgt_freq = tgt.freq;
  d.train = corpus::encode_corpus(train, d.src_vocab, d.tgt_vocab);
  d.dev = corpus::encode_corpus(dev, d.src_vocab, d.tgt_vocab);
  return d;
}

training::TrainResult run_train(const RunConfig& c_in, bool timestamps) {
  RunConfig c = c_in;
  c.train.seed = c.seed;
  c.validate();
  const auto data = load_train_data(c);
  const std::filesystem::path dir = c.paths.run_dir;
  std::filesystem::create_directories(dir);
  save_run_config(c, dir / "config.json");
  training::TrainOptions opt;
  opt.run_dir = dir;
  opt.timestamps = timestamps;
  opt.checkpoint_metadata = {{"objective", training::objective_name(c.train.objective)}, {"seed", c.seed}};
  return training::train(data, c.model, c.train, c.contrastive, opt);
}

std::vector<corpus::Sentence> translate_sentences(const model::Checkpoint& ck,
                                                  const std::vector<corpus::Sentence>& input,
                                                  const decode::DecodeConfig& cfg) {
  const auto [src, tgt] = training::vocab_from_metadata(ck.metadata);
  std::vector<std::vector<int>> ids;
  for (const auto& s : input) ids.push_back(src.encode(s));
  const auto out = decode::translate(ck.params, ids, cfg);
  std::vector<corpus::Sentence> text;
  for (const auto& o : out) text.push_back(tgt.decode(o));
  return text;
}

void run_translate(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                   const std::filesystem::path& output, const decode::DecodeConfig& cfg) {
  cfg.validate();
  require_file(checkpoint);
  const auto ck = model::load_checkpoint(checkpoint);
  const auto text = translate_sentences(ck, read_text(input), cfg);
  if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
  corpus::write_sentences(output, text);
}

eval::MetricsReport run_evaluate(const std::filesystem::path& hyp, const std::filesystem::path& ref,
                                 const std::filesystem::path& vocab, const eval::EvalConfig& cfg,
                                 const std::filesystem::path& out_dir) {
  const auto hyps = read_text(hyp);
  const auto refs = read_text(ref);
  const auto v = read_vocab(vocab);
  auto report = eval::evaluate(hyps, refs, v.vocab, v.freq, cfg);
  eval::write_metrics(report, out_dir);
  return report;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + p.string());
  os << text;
  if (!os) throw Error(ErrorCode::IoError, "failed writing " + p.string());
}

}  // namespace

geometry::GeometryReport run_analyze(const std::filesystem::path& checkpoint, const std::filesystem::path& vocab,
                                     const eval::EvalConfig& cfg, const std::filesystem::path& out_dir,
                                     const AnalyzeOptions& options) {
  cfg.validate();
  require_file(checkpoint);
  const auto ck = model::load_checkpoint(checkpoint);
  const auto v = read_vocab(vocab);
  const auto m = geometry::softmax_embeddings(ck.params);
  if (m.w.rows() + corpus::kNumReserved != v.vocab.size()) {
    throw Error(ErrorCode::InvalidConfig, "vocabulary " + vocab.string() + " does not match the checkpoint");
  }
  geometry::PairSampling sampling;
  sampling.seed = options.seed;
  const auto report = geometry::analyze(m, corpus::frequency_buckets(v.freq, cfg.bucket_count), sampling);
  const auto groups = corpus::frequency_buckets(v.freq, 3);
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "geometry.json", geometry::to_json(report).dump(2) + "\n");
  write_text(out_dir / "pca.csv", geometry::pca_csv(m, report.pca, v.vocab, groups));
  if (options.svg) write_text(out_dir / "pca.svg", geometry::pca_svg(m, report.pca, groups));
  if (options.dump_embeddings) geometry::write_embedding_dump(out_dir / "embeddings.txt", m.w);
  return report;
}

double rare_bucket_f1(const eval::BucketedPRF& b) {
  std::int64_t matched = 0, ref = 0, hyp = 0;
  const std::size_t k = b.buckets.size();
  for (std::size_t i = k >= 2 ? k - 2 : 0; i < k; ++i) {
    matched += b.buckets[i].matched;
    ref += b.buckets[i].ref_count;
    hyp += b.buckets[i].hyp_count;
  }
  return eval::make_prf(matched, ref, hyp).f1;
}

ReproArm run_repro_arm(const RunConfig& c, training::Objective objective, bool timestamps) {
  const CorpusFiles files = corpus_files(c.paths.corpus_stem);
  RunConfig rc = c;
  rc.train.objective = objective;
  const std::string name = training::objective_name(objective);
  const std::filesystem::path dir = std::filesystem::path(c.paths.run_dir) / name;
  rc.paths.run_dir = dir.string();
  const auto trained = run_train(rc, timestamps);

  const auto ck = model::load_checkpoint(dir / "best.ckpt");
  const auto test_src = read_text(files.test.string() + ".src");
  corpus::write_sentences(dir / "test.hyp", translate_sentences(ck, test_src, decode_config(c.eval)));

  ReproArm arm;
  arm.objective = name;
  arm.best_dev_bleu = trained.best_dev_bleu;
  arm.best_epoch = trained.best_epoch;
  arm.epochs = trained.epochs.size();
  arm.metrics = run_evaluate(dir / "test.hyp", files.test.string() + ".tgt", files.tgt_vocab, c.eval, dir);
  AnalyzeOptions ao;
  ao.svg = true;
  ao.seed = c.seed;
  arm.geometry = run_analyze(dir / "best.ckpt", files.tgt_vocab, c.eval, dir, ao);
  return arm;
}

nlohmann::json comparison_json(const std::vector<ReproArm>& arms, std::uint64_t seed) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& a : arms) {
    rows.push_back({{"objective", a.objective},
                    {"best_epoch", a.best_epoch},
                    {"epochs", a.epochs},
                    {"dev_bleu", a.best_dev_bleu},
                    {"test_bleu", a.metrics.bleu},
                    {"rare_f1", rare_bucket_f1(a.metrics.buckets)},
                    {"neg_uniformity", a.geometry.neg_uniformity},
                    {"avg_distance", a.geometry.avg_distance},
                    {"i1", a.geometry.i1},
                    {"i2", a.geometry.i2}});
  }
  return {{"seed", seed}, {"arms", rows}};
}

ReproResult run_repro(const RunConfig& c, bool timestamps) {
  c.validate();
  gen_corpus(c);
  ReproResult result;
  for (auto objective : {training::Objective::baseline, training::Objective::fcl}) {
    result.arms.push_back(run_repro_arm(c, objective, timestamps));
  }
  result.comparison = comparison_json(result.arms, c.seed);
  write_text(std::filesystem::path(c.paths.run_dir) / "comparison.json", result.comparison.dump(2) + "\n");
  return result;
}

}  // namespace fcl::pipeline
