#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "fcl/tensor.hpp"

namespace fcl::corpus {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

using Sentence = std::vector<std::string>;

struct ParallelCorpus {
  std::vector<Sentence> source;
  std::vector<Sentence> target;

  std::size_t size() const { return source.size(); }
  bool operator==(const ParallelCorpus&) const = default;
};

enum class MappingRule { bijective_map_reverse, bijective_map_identity };

const char* mapping_rule_name(MappingRule rule);
MappingRule parse_mapping_rule(const std::string& name);

struct ZipfCorpusConfig {
  int vocab_size = 200;
  double zipf_exponent = 1.1;
  int min_len = 4;
  int max_len = 12;
  int pair_count = 8888;
  std::uint64_t seed = 1;
  MappingRule mapping_rule = MappingRule::bijective_map_reverse;
  /// When false the token bijection is the identity map.
  bool permute_tokens = true;

  void validate() const;
  bool operator==(const ZipfCorpusConfig&) const = default;
};

/// Source tokens i.i.d. Zipf over `vocab_size` ranks, target = mapped source.
ParallelCorpus generate_zipf_corpus(const ZipfCorpusConfig& cfg);

struct CorpusSplits {
  ParallelCorpus train, dev, test;
};

/// Contiguous split in corpus order: train first, then dev, then test.
/// Dev and test sizes are rounded fractions of the corpus size.
CorpusSplits split_corpus(const ParallelCorpus& corpus, double dev_fraction = 0.05, double test_fraction = 0.05);

class Vocabulary {
 public:
  Vocabulary();
  /// Content tokens in id order (ids start after the reserved block).
  explicit Vocabulary(const std::vector<std::string>& content_tokens);

  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kNumReserved; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const Sentence& s) const;
  /// Drops reserved ids other than UNK.
  Sentence decode(const std::vector<int>& ids) const;

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Training-set counts by id. EOS holds the number of training sentences
/// (it is a real target token); PAD/BOS/UNK hold 0.
struct FrequencyTable {
  std::vector<std::int64_t> counts;

  std::int64_t count(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < counts.size() ? counts[static_cast<std::size_t>(id)] : 0;
  }
  bool operator==(const FrequencyTable&) const = default;
};

struct VocabularyBuild {
  Vocabulary vocab;
  FrequencyTable freq;
};

/// Ids assigned by descending count, ties by token string.
VocabularyBuild build_vocabulary(const std::vector<Sentence>& sentences);

struct BucketAssignment {
  int bucket_count = 0;
  /// Bucket per id; -1 for reserved ids.
  std::vector<int> bucket_of_id;
  /// Member ids per bucket, frequent -> rare.
  std::vector<std::vector<int>> members;

  /// Bucket of an id; reserved/unknown ids fall into the rarest bucket.
  int bucket_of(int id) const;
};

/// Content ids sorted by descending count (ties ascending id) split into k
/// contiguous groups; remainder goes to the most frequent buckets.
BucketAssignment frequency_buckets(const FrequencyTable& freq, int k);

struct EncodedPair {
  std::vector<int> source;
  std::vector<int> target;
};

std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                                       const Vocabulary& tgt_vocab);

/// Padded minibatch. Rows are sentences, row-major matrices.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;  // decoder steps = longest target + 1
  std::vector<int> src;
  std::vector<std::size_t> src_lengths;
  std::vector<int> tgt_in;   // BOS y1..yn PAD..
  std::vector<int> tgt_out;  // y1..yn EOS PAD..
  std::vector<std::size_t> tgt_lengths;
  std::vector<std::size_t> sentence_ids;

  /// 1 at real (non-PAD) target positions.
  std::vector<std::uint8_t> target_mask() const;
  /// N: number of real target tokens, EOS included.
  std::size_t target_tokens() const;
  /// Row-major flat indices of the real target positions, in order.
  std::vector<std::size_t> target_positions() const;
  /// Gold ids at the real target positions, aligned to target_positions().
  std::vector<int> target_ids() const;
};

Batch make_batch(const std::vector<EncodedPair>& pairs, const std::vector<std::size_t>& ids);

/// One epoch of token-budgeted batches. Sentence order is drawn from
/// `shuffle`; each batch keeps batch_size * tgt_len <= max_tokens.
std::vector<Batch> batch_epoch(const std::vector<EncodedPair>& pairs, std::size_t max_tokens,
                               RngStream& shuffle);

struct SubsetPartition {
  std::vector<std::size_t> high;    // fewest rare tokens
  std::vector<std::size_t> medium;
  std::vector<std::size_t> low;     // most rare tokens
  std::vector<double> rare_proportion;
};

/// Ranks sentences by the share of target tokens whose training count is
/// below `low_threshold` and splits them into tertiles.
SubsetPartition sentence_subsets(const std::vector<Sentence>& targets, const Vocabulary& vocab,
                                 const FrequencyTable& freq, std::int64_t low_threshold);

// ---- files ----------------------------------------------------------------

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences);
std::vector<Sentence> read_sentences(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& stem, const ParallelCorpus& corpus);
ParallelCorpus read_corpus(const std::filesystem::path& stem);

/// `token<TAB>count` lines; reserved tokens first with count 0.
void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab,
                      const FrequencyTable& freq);
VocabularyBuild read_vocabulary(const std::filesystem::path& path);

}  // namespace fcl::corpus
