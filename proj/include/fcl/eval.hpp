#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fcl/corpus.hpp"
#include "json.hpp"

namespace fcl::eval {

using corpus::Sentence;

struct EvalConfig {
  int beam_size = 4;
  double length_penalty = 0.6;
  double max_len_factor = 2.0;
  int bucket_count = 5;
  std::size_t mattr_window = 500;
  std::size_t hdd_sample_size = 42;
  double mtld_threshold = 0.72;
  /// Training count below which a token is rare for the sentence subsets.
  std::int64_t low_threshold = 200;

  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

// ---- BLEU ------------------------------------------------------------------

/// Sufficient statistics; additive over sentences.
struct BleuStats {
  std::array<std::int64_t, 4> matches{};
  std::array<std::int64_t, 4> totals{};
  std::int64_t hyp_length = 0;
  std::int64_t ref_length = 0;

  BleuStats& operator+=(const BleuStats& o);
  bool operator==(const BleuStats&) const = default;
};

BleuStats bleu_stats(const Sentence& hyp, const Sentence& ref);
BleuStats bleu_stats(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);
/// Corpus BLEU in [0, 100], no smoothing.
double bleu_from_stats(const BleuStats& s);
double bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);

// ---- bucketed 1-gram scores -----------------------------------------------

struct PRF {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  std::int64_t matched = 0;
  std::int64_t ref_count = 0;
  std::int64_t hyp_count = 0;
};

struct BucketedPRF {
  std::vector<PRF> buckets;  // frequent -> rare
  PRF overall;
};

/// Clipped per-sentence unigram matches aggregated per bucket. Tokens are
/// bucketed through `vocab`; unknown tokens fall in the rarest bucket.
BucketedPRF one_gram_prf(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                         const corpus::Vocabulary& vocab, const corpus::BucketAssignment& buckets);

PRF make_prf(std::int64_t matched, std::int64_t ref_count, std::int64_t hyp_count);

// ---- lexical diversity -----------------------------------------------------

double mattr(const std::vector<std::string>& tokens, std::size_t window);
double hdd(const std::vector<std::string>& tokens, std::size_t sample_size);
double mtld(const std::vector<std::string>& tokens, double threshold);
/// One direction of the factor count, exposed for inspection.
double mtld_factors(const std::vector<std::string>& tokens, double threshold);

// ---- subsets ---------------------------------------------------------------

struct SubsetBleu {
  std::optional<double> high, medium, low;
};

SubsetBleu subset_report(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                         const corpus::SubsetPartition& subsets);

// ---- reports ---------------------------------------------------------------

struct MetricsReport {
  double bleu = 0.0;
  SubsetBleu subsets;
  BucketedPRF buckets;
  std::optional<double> mattr, hdd, mtld;
};

MetricsReport evaluate(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                       const corpus::Vocabulary& vocab, const corpus::FrequencyTable& freq,
                       const EvalConfig& cfg);

nlohmann::json to_json(const MetricsReport& r);
/// One row per bucket then an `overall` row.
std::string buckets_csv(const BucketedPRF& b);
void write_metrics(const MetricsReport& r, const std::filesystem::path& dir);

/// Shortest-round-trip decimal text for report values.
std::string format_double(double v);

}  // namespace fcl::eval
