#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fcl/autodiff.hpp"
#include "fcl/corpus.hpp"
#include "json.hpp"

namespace fcl::model {

using ad::Var;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 256;
  double dropout = 0.1;
  int src_vocab = 0;
  int tgt_vocab = 0;
  int max_len = 256;
  bool tie_softmax = true;
  /// Pre-norm residual blocks; false selects post-norm.
  bool pre_norm = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Linear {
  Var weight;  // [in x out]
  Var bias;    // [out]
};

/// Keys have no bias: it would shift every score of a query equally, which
/// the softmax ignores, so its gradient is identically zero.
struct AttentionBlock {
  Linear q;
  Var k_weight;  // [d x d]
  Linear v, out;
};

struct LayerNormParams {
  Var gain, bias;
};

struct EncoderLayer {
  LayerNormParams ln_attn;
  AttentionBlock self_attn;
  LayerNormParams ln_ff;
  Linear ff_in, ff_out;
};

struct DecoderLayer {
  LayerNormParams ln_self;
  AttentionBlock self_attn;
  LayerNormParams ln_cross;
  AttentionBlock cross_attn;
  LayerNormParams ln_ff;
  Linear ff_in, ff_out;
};

struct ModelParams {
  ModelConfig config;
  Var src_embedding;   // [src_vocab x d]
  Var tgt_embedding;   // [tgt_vocab x d]
  Var softmax_weight;  // W_s; same node as tgt_embedding when tied
  std::vector<EncoderLayer> encoder;
  LayerNormParams enc_final;
  std::vector<DecoderLayer> decoder;
  LayerNormParams dec_final;
  Tensor positions;  // sinusoidal table [max_len x d], not trained
  std::int64_t step = 0;

  /// Every trainable tensor once, in a fixed order, with a stable name.
  std::vector<std::pair<std::string, Var>> named_parameters() const;
  void zero_grad() const;
};

/// Deep copy of all parameter values (tying preserved).
ModelParams clone(const ModelParams& p);

ModelParams init_model(const ModelConfig& cfg, RngStream& stream);

enum class PassLabel { pass1, pass2 };

struct HiddenStateBatch {
  Var states;                  // [N x d_model]
  std::vector<int> token_ids;  // gold id per row
  PassLabel pass = PassLabel::pass1;
};

/// Encoder output [batch*src_len x d]. `dropout` may be null (no dropout).
Var encode(const ModelParams& p, const corpus::Batch& batch, RngStream* dropout);

/// Last-layer decoder outputs at every (row, step) of the batch.
Var decode_all(const ModelParams& p, const Var& encoder_states, const corpus::Batch& batch,
               RngStream* dropout);

/// Teacher-forced decoder states at the real target positions (EOS kept).
HiddenStateBatch decode_states(const ModelParams& p, const Var& encoder_states,
                               const corpus::Batch& batch, RngStream* dropout,
                               PassLabel pass = PassLabel::pass1);

/// states * W_s^T.
Var output_logits(const ModelParams& p, const Var& states);
/// Softmax over output_logits: p(y | y_<i, x) for each row.
Var output_distribution(const ModelParams& p, const HiddenStateBatch& states);

/// Inference helper: log-probabilities of the next token after each prefix.
/// `encoder_states` rows are laid out per prefix row ([rows*src_len x d]).
Tensor next_token_log_probs(const ModelParams& p, const Var& encoder_states,
                            std::span<const std::size_t> src_lengths, std::size_t src_len,
                            const std::vector<std::vector<int>>& prefixes);

/// Step-by-step decoding with cached keys and values; each step costs one
/// position instead of the whole prefix. Results match next_token_log_probs.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelParams& p, const Var& encoder_states, std::span<const std::size_t> src_lengths,
                     std::size_t src_len);

  /// Feeds one token per row at position steps(); returns log-probs [rows x tgt_vocab].
  Tensor step(std::span<const int> tokens);
  /// Keeps the rows listed in `keep`, in that order; repeats are allowed.
  void select(std::span<const std::size_t> keep);

  std::size_t rows() const { return rows_; }
  std::size_t steps() const { return steps_; }

 private:
  struct LayerCache {
    Tensor self_k, self_v;    // [rows*steps x d]
    Tensor cross_k, cross_v;  // [rows*src_len x d]
  };
  const ModelParams* p_;
  std::size_t rows_;
  std::size_t src_len_;
  std::size_t steps_ = 0;
  std::vector<std::size_t> src_lengths_;
  std::vector<LayerCache> layers_;
};

// ---- checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  nlohmann::json metadata;  // free-form (vocabularies, run info)
};

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fcl::model
