#pragma once

#include <cstddef>
#include <vector>

#include "fcl/model.hpp"

namespace fcl::decode {

struct DecodeConfig {
  int beam_size = 4;
  /// Exponent of the ((5 + len) / 6) length penalty.
  double length_penalty = 0.6;
  double max_len_factor = 2.0;
  int max_len_offset = 8;

  void validate() const;
  bool operator==(const DecodeConfig&) const = default;
};

/// Decoding stops at EOS or after this many generated tokens.
std::size_t max_output_length(std::size_t source_length, const DecodeConfig& cfg);

/// Batched argmax decoding. Outputs exclude BOS and EOS.
std::vector<std::vector<int>> greedy_decode(const model::ModelParams& p,
                                            const std::vector<std::vector<int>>& sources,
                                            const DecodeConfig& cfg = {}, std::size_t batch_sentences = 64);

/// Length-normalized beam search for one sentence. Output excludes BOS and EOS.
std::vector<int> beam_search(const model::ModelParams& p, const std::vector<int>& source,
                             const DecodeConfig& cfg);

/// beam_size 1 dispatches to greedy decoding.
std::vector<std::vector<int>> translate(const model::ModelParams& p, const std::vector<std::vector<int>>& sources,
                                        const DecodeConfig& cfg);

}  // namespace fcl::decode
