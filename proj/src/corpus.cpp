#include "fcl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fcl/error.hpp"

namespace fcl::corpus {

namespace {

const std::vector<std::string> kReservedTokens{"<pad>", "<bos>", "<eos>", "<unk>"};

std::string token_name(int rank) { return "w" + std::to_string(rank); }

/// Contiguous split of n items into k groups, remainder to the first groups.
std::vector<std::size_t> split_sizes(std::size_t n, std::size_t k) {
  std::vector<std::size_t> sizes(k, n / k);
  for (std::size_t i = 0; i < n % k; ++i) ++sizes[i];
  return sizes;
}

}  // namespace

const char* mapping_rule_name(MappingRule rule) {
  switch (rule) {
    case MappingRule::bijective_map_reverse: return "bijective_map_reverse";
    case MappingRule::bijective_map_identity: return "bijective_map_identity";
  }
  return "unknown";
}

MappingRule parse_mapping_rule(const std::string& name) {
  if (name == "bijective_map_reverse") return MappingRule::bijective_map_reverse;
  if (name == "bijective_map_identity") return MappingRule::bijective_map_identity;
  throw Error(ErrorCode::InvalidConfig, "unknown mapping rule '" + name + "'");
}

void ZipfCorpusConfig::validate() const {
  if (vocab_size < 10) throw Error(ErrorCode::InvalidConfig, "vocab_size must be >= 10");
  if (min_len < 1 || min_len > max_len) {
    throw Error(ErrorCode::InvalidConfig, "sentence lengths need 1 <= min_len <= max_len");
  }
  if (pair_count < 1) throw Error(ErrorCode::InvalidConfig, "pair_count must be >= 1");
  if (!(zipf_exponent > 0.0) || !std::isfinite(zipf_exponent)) {
    throw Error(ErrorCode::InvalidConfig, "zipf_exponent must be positive");
  }
}

ParallelCorpus generate_zipf_corpus(const ZipfCorpusConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed, RngPurpose::corpus);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);

  std::vector<double> cdf(V);
  double total = 0.0;
  for (std::size_t r = 0; r < V; ++r) {
    total += std::pow(static_cast<double>(r + 1), -cfg.zipf_exponent);
    cdf[r] = total;
  }
  for (auto& c : cdf) c /= total;
  cdf.back() = 1.0;

  std::vector<int> sigma(V);
  std::iota(sigma.begin(), sigma.end(), 0);
  if (cfg.permute_tokens) rng.shuffle(sigma.begin(), sigma.end());

  ParallelCorpus out;
  out.source.reserve(static_cast<std::size_t>(cfg.pair_count));
  out.target.reserve(static_cast<std::size_t>(cfg.pair_count));
  const auto span = static_cast<std::uint64_t>(cfg.max_len - cfg.min_len + 1);
  for (int p = 0; p < cfg.pair_count; ++p) {
    const auto len = static_cast<std::size_t>(cfg.min_len) + rng.index(span);
    Sentence src, tgt;
    src.reserve(len);
    tgt.reserve(len);
    for (std::size_t t = 0; t < len; ++t) {
      const double u = rng.uniform();
      const auto rank = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      src.push_back(token_name(rank));
      tgt.push_back(token_name(sigma[static_cast<std::size_t>(rank)]));
    }
    if (cfg.mapping_rule == MappingRule::bijective_map_reverse) std::reverse(tgt.begin(), tgt.end());
    out.source.push_back(std::move(src));
    out.target.push_back(std::move(tgt));
  }
  return out;
}

CorpusSplits split_corpus(const ParallelCorpus& corpus, double dev_fraction, double test_fraction) {
  if (!(dev_fraction >= 0.0) || !(test_fraction >= 0.0) || dev_fraction + test_fraction >= 1.0) {
    throw Error(ErrorCode::InvalidConfig, "split fractions must be >= 0 and sum below 1");
  }
  const std::size_t n = corpus.size();
  const auto dev_n = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(n)));
  const auto test_n = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (dev_n + test_n >= n) throw Error(ErrorCode::EmptyCorpus, "no sentences left for training");
  const std::size_t train_n = n - dev_n - test_n;
  auto slice = [&](std::size_t begin, std::size_t end) {
    ParallelCorpus out;
    out.source.assign(corpus.source.begin() + static_cast<std::ptrdiff_t>(begin),
                      corpus.source.begin() + static_cast<std::ptrdiff_t>(end));
    out.target.assign(corpus.target.begin() + static_cast<std::ptrdiff_t>(begin),
                      corpus.target.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  };
  return {slice(0, train_n), slice(train_n, train_n + dev_n), slice(train_n + dev_n, n)};
}

// ---- vocabulary ---------------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& content_tokens) {
  tokens_ = kReservedTokens;
  tokens_.insert(tokens_.end(), content_tokens.begin(), content_tokens.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw Error(ErrorCode::InvalidConfig, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(token) > 0; }

std::vector<int> Vocabulary::encode(const Sentence& s) const {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (const auto& t : s) ids.push_back(id(t));
  return ids;
}

Sentence Vocabulary::decode(const std::vector<int>& ids) const {
  Sentence s;
  for (int i : ids) {
    if (i < kNumReserved && i != kUnk) continue;
    s.push_back(token(i));
  }
  return s;
}

VocabularyBuild build_vocabulary(const std::vector<Sentence>& sentences) {
  std::unordered_map<std::string, std::int64_t> counts;
  bool any = false;
  for (const auto& s : sentences) {
    for (const auto& t : s) {
      ++counts[t];
      any = true;
    }
  }
  if (!any) throw Error(ErrorCode::EmptyCorpus, "no tokens to build a vocabulary from");
  std::vector<std::pair<std::string, std::int64_t>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens;
  FrequencyTable freq;
  freq.counts.assign(kNumReserved, 0);
  freq.counts[kEos] = static_cast<std::int64_t>(sentences.size());
  for (auto& [tok, c] : items) {
    tokens.push_back(tok);
    freq.counts.push_back(c);
  }
  return {Vocabulary(tokens), std::move(freq)};
}

// ---- buckets ---------------------------------------------------------------------

int BucketAssignment::bucket_of(int id) const {
  if (id >= 0 && static_cast<std::size_t>(id) < bucket_of_id.size() &&
      bucket_of_id[static_cast<std::size_t>(id)] >= 0) {
    return bucket_of_id[static_cast<std::size_t>(id)];
  }
  return bucket_count - 1;
}

BucketAssignment frequency_buckets(const FrequencyTable& freq, int k) {
  if (k < 1) throw Error(ErrorCode::InvalidConfig, "bucket count must be >= 1");
  std::vector<int> ids;
  for (std::size_t i = kNumReserved; i < freq.counts.size(); ++i) ids.push_back(static_cast<int>(i));
  if (ids.size() < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::TooFewTokens, std::to_string(ids.size()) + " content tokens for " +
                                             std::to_string(k) + " buckets");
  }
  std::stable_sort(ids.begin(), ids.end(),
                   [&](int a, int b) { return freq.count(a) > freq.count(b); });
  BucketAssignment out;
  out.bucket_count = k;
  out.bucket_of_id.assign(freq.counts.size(), -1);
  out.members.resize(static_cast<std::size_t>(k));
  std::size_t pos = 0;
  const auto sizes = split_sizes(ids.size(), static_cast<std::size_t>(k));
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    for (std::size_t i = 0; i < sizes[b]; ++i, ++pos) {
      out.bucket_of_id[static_cast<std::size_t>(ids[pos])] = static_cast<int>(b);
      out.members[b].push_back(ids[pos]);
    }
  }
  return out;
}

// ---- batching -----------------------------------------------------------------------

std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                                       const Vocabulary& tgt_vocab) {
  if (corpus.source.size() != corpus.target.size()) {
    throw Error(ErrorCode::LengthMismatch, "source/target line counts differ");
  }
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.push_back({src_vocab.encode(corpus.source[i]), tgt_vocab.encode(corpus.target[i])});
  }
  return out;
}

std::vector<std::uint8_t> Batch::target_mask() const {
  std::vector<std::uint8_t> m(tgt_out.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = tgt_out[i] != kPad;
  return m;
}

std::size_t Batch::target_tokens() const {
  return std::accumulate(tgt_lengths.begin(), tgt_lengths.end(), std::size_t{0});
}

std::vector<std::size_t> Batch::target_positions() const {
  std::vector<std::size_t> pos;
  pos.reserve(target_tokens());
  for (std::size_t b = 0; b < batch_size; ++b) {
    for (std::size_t t = 0; t < tgt_lengths[b]; ++t) pos.push_back(b * tgt_len + t);
  }
  return pos;
}

std::vector<int> Batch::target_ids() const {
  std::vector<int> ids;
  for (std::size_t p : target_positions()) ids.push_back(tgt_out[p]);
  return ids;
}

Batch make_batch(const std::vector<EncodedPair>& pairs, const std::vector<std::size_t>& ids) {
  Batch b;
  b.batch_size = ids.size();
  b.sentence_ids = ids;
  for (std::size_t i : ids) {
    b.src_len = std::max(b.src_len, pairs[i].source.size());
    b.tgt_len = std::max(b.tgt_len, pairs[i].target.size() + 1);
  }
  b.src_len = std::max<std::size_t>(b.src_len, 1);
  b.src.assign(b.batch_size * b.src_len, kPad);
  b.tgt_in.assign(b.batch_size * b.tgt_len, kPad);
  b.tgt_out.assign(b.batch_size * b.tgt_len, kPad);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto& p = pairs[ids[r]];
    std::copy(p.source.begin(), p.source.end(), b.src.begin() + static_cast<long>(r * b.src_len));
    b.src_lengths.push_back(p.source.size());
    b.tgt_in[r * b.tgt_len] = kBos;
    for (std::size_t t = 0; t < p.target.size(); ++t) {
      b.tgt_in[r * b.tgt_len + t + 1] = p.target[t];
      b.tgt_out[r * b.tgt_len + t] = p.target[t];
    }
    b.tgt_out[r * b.tgt_len + p.target.size()] = kEos;
    b.tgt_lengths.push_back(p.target.size() + 1);
  }
  return b;
}

std::vector<Batch> batch_epoch(const std::vector<EncodedPair>& pairs, std::size_t max_tokens,
                               RngStream& shuffle) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].target.size() + 2 > max_tokens || pairs[i].source.size() + 2 > max_tokens) {
      throw Error(ErrorCode::SentenceTooLong,
                  "sentence " + std::to_string(i) + " exceeds the batch token budget", i);
    }
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle.shuffle(order.begin(), order.end());

  // length-sort within pools to limit padding, then shuffle batch order
  constexpr std::size_t kPool = 1024;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t start = 0; start < order.size(); start += kPool) {
    const std::size_t end = std::min(order.size(), start + kPool);
    std::vector<std::size_t> pool(order.begin() + static_cast<long>(start),
                                  order.begin() + static_cast<long>(end));
    std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
      const auto& pa = pairs[a];
      const auto& pb = pairs[b];
      if (pa.target.size() != pb.target.size()) return pa.target.size() < pb.target.size();
      return pa.source.size() < pb.source.size();
    });
    std::vector<std::size_t> cur;
    std::size_t cur_len = 0;
    for (std::size_t idx : pool) {
      const std::size_t len = pairs[idx].target.size() + 1;
      const std::size_t new_len = std::max(cur_len, len);
      if (!cur.empty() && new_len * (cur.size() + 1) > max_tokens) {
        groups.push_back(std::move(cur));
        cur.clear();
        cur_len = 0;
      }
      cur.push_back(idx);
      cur_len = std::max(cur_len, len);
    }
    if (!cur.empty()) groups.push_back(std::move(cur));
  }
  shuffle.shuffle(groups.begin(), groups.end());
  std::vector<Batch> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(make_batch(pairs, g));
  return out;
}

// ---- subsets ------------------------------------------------------------------------------

SubsetPartition sentence_subsets(const std::vector<Sentence>& targets, const Vocabulary& vocab,
                                 const FrequencyTable& freq, std::int64_t low_threshold) {
  if (targets.empty()) throw Error(ErrorCode::EmptyTestSet, "no sentences to partition");
  if (low_threshold < 1) throw Error(ErrorCode::InvalidConfig, "low-frequency threshold must be >= 1");
  SubsetPartition out;
  out.rare_proportion.resize(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& s = targets[i];
    std::size_t rare = 0;
    for (const auto& t : s) {
      const std::int64_t c = vocab.contains(t) ? freq.count(vocab.id(t)) : 0;
      if (c < low_threshold) ++rare;
    }
    out.rare_proportion[i] = s.empty() ? 0.0 : static_cast<double>(rare) / static_cast<double>(s.size());
  }
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.rare_proportion[a] > out.rare_proportion[b];
  });
  const auto sizes = split_sizes(order.size(), 3);
  auto it = order.begin();
  out.low.assign(it, it + static_cast<long>(sizes[0]));
  it += static_cast<long>(sizes[0]);
  out.medium.assign(it, it + static_cast<long>(sizes[1]));
  it += static_cast<long>(sizes[1]);
  out.high.assign(it, order.end());
  for (auto* v : {&out.low, &out.medium, &out.high}) std::sort(v->begin(), v->end());
  return out;
}

// ---- files -------------------------------------------------------------------------------------

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << ' ';
      os << s[i];
    }
    os << '\n';
  }
  if (!os) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    Sentence s;
    std::string tok;
    while (ls >> tok) s.push_back(tok);
    out.push_back(std::move(s));
  }
  return out;
}

void write_corpus(const std::filesystem::path& stem, const ParallelCorpus& corpus) {
  write_sentences(stem.string() + ".src", corpus.source);
  write_sentences(stem.string() + ".tgt", corpus.target);
}

ParallelCorpus read_corpus(const std::filesystem::path& stem) {
  ParallelCorpus c;
  c.source = read_sentences(stem.string() + ".src");
  c.target = read_sentences(stem.string() + ".tgt");
  if (c.source.size() != c.target.size()) {
    throw Error(ErrorCode::LengthMismatch, stem.string() + ": " + std::to_string(c.source.size()) +
                                               " source vs " + std::to_string(c.target.size()) +
                                               " target lines");
  }
  return c;
}

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab,
                      const FrequencyTable& freq) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const std::int64_t c = i < static_cast<std::size_t>(kNumReserved) ? 0 : freq.count(static_cast<int>(i));
    os << vocab.token(static_cast<int>(i)) << '\t' << c << '\n';
  }
  if (!os) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

VocabularyBuild read_vocabulary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::vector<std::string> tokens;
  FrequencyTable freq;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error(ErrorCode::IoError, path.string() + ":" + std::to_string(line_no) + ": missing TAB");
    }
    const std::string tok = line.substr(0, tab);
    const std::int64_t c = std::stoll(line.substr(tab + 1));
    if (line_no <= static_cast<std::size_t>(kNumReserved)) {
      if (tok != kReservedTokens[line_no - 1]) {
        throw Error(ErrorCode::IoError, path.string() + ": reserved token '" +
                                            kReservedTokens[line_no - 1] + "' expected");
      }
      freq.counts.push_back(0);
      continue;
    }
    tokens.push_back(tok);
    freq.counts.push_back(c);
  }
  if (freq.counts.size() < static_cast<std::size_t>(kNumReserved)) {
    throw Error(ErrorCode::IoError, path.string() + ": truncated vocabulary");
  }
  return {Vocabulary(tokens), std::move(freq)};
}

}  // namespace fcl::corpus
