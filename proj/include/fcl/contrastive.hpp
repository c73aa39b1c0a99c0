#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fcl/autodiff.hpp"
#include "fcl/corpus.hpp"
#include "fcl/model.hpp"

namespace fcl::contrastive {

using ad::Var;

/// Where the max log-count normalizer of the frequency score is taken.
enum class FreqMaxMode { batch, corpus };

std::string freq_max_mode_name(FreqMaxMode m);
FreqMaxMode parse_freq_max_mode(const std::string& s);

struct ContrastiveConfig {
  double gamma = 1.4;
  FreqMaxMode freq_max_mode = FreqMaxMode::batch;
  /// Apply the soft weight to same-token positives in the denominator too.
  bool weight_positives = false;
  bool include_self_in_denominator = true;
  /// Add pass-2 rows to the denominator.
  bool pass2_in_denominator = false;
  /// Cosine similarities are divided by this value.
  double temperature = 1.0;
  /// Divide each anchor's sum over positives by its positive count, so an
  /// anchor with many same-token rows weighs as much as one with none.
  bool average_positives = false;

  void validate() const;
  bool operator==(const ContrastiveConfig&) const = default;
};

/// Positives of each pass-1 anchor. The dropout twin (same row of pass 2)
/// is always a positive and is implicit.
struct PositiveSets {
  std::vector<std::vector<std::size_t>> supervised;

  std::size_t size() const { return supervised.size(); }
  std::size_t positive_count(std::size_t i) const { return supervised[i].size() + 1; }
};

PositiveSets collect_positive_sets(std::span<const int> token_ids);
/// Checks that both passes carry the same ids and row count.
PositiveSets collect_positive_sets(std::span<const int> token_ids, const model::HiddenStateBatch& pass1,
                                   const model::HiddenStateBatch& pass2);

/// f = 1 - log(max(count,1)) / max_log_count, or 1 when max_log_count is 0.
double frequency_score(std::int64_t count, double max_log_count);

double max_log_count(std::span<const int> token_ids, const corpus::FrequencyTable& freq, FreqMaxMode mode);

enum class AnchorWeighting {
  normalized,    // negative mean scaled to gamma
  fallback,      // raw negative mean was 0, negatives get 1
  no_negatives,  // every row shares the anchor's token
};

struct WeightMatrix {
  Tensor w;                                // [N x N]
  std::vector<double> raw_negative_mean;   // per anchor, before scaling
  std::vector<AnchorWeighting> status;     // per anchor
  double max_log_count = 0.0;

  std::size_t size() const { return status.size(); }
};

WeightMatrix contrast_weights(std::span<const int> token_ids, const corpus::FrequencyTable& freq,
                              const ContrastiveConfig& cfg);
/// All-ones weights; the FCL kernel with these is the TCL loss.
WeightMatrix uniform_weights(std::size_t n);

/// Token-level contrastive loss over pass-1 anchors.
Var tcl_loss(const Var& pass1, const Var& pass2, const PositiveSets& positives, const ContrastiveConfig& cfg);

/// Frequency-weighted contrastive loss; weights scale the denominator terms.
Var fcl_loss(const Var& pass1, const Var& pass2, const PositiveSets& positives, const WeightMatrix& weights,
             const ContrastiveConfig& cfg);

}  // namespace fcl::contrastive
