#include "fcl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <zlib.h>

#include "fcl/error.hpp"

namespace fcl::model {

using namespace fcl::ad;
using corpus::Batch;

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
  if (d_model < 1 || n_heads < 1) bad("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (n_enc_layers < 0 || n_dec_layers < 0 || d_ff < 1) bad("layer counts / d_ff invalid");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must be in [0,1)");
  if (src_vocab < corpus::kNumReserved + 1 || tgt_vocab < corpus::kNumReserved + 1) {
    bad("vocabulary sizes must exceed the reserved block");
  }
  if (max_len < 2) bad("max_len must be >= 2");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},         {"n_heads", c.n_heads},
                     {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers},
                     {"d_ff", c.d_ff},               {"dropout", c.dropout},
                     {"src_vocab", c.src_vocab},     {"tgt_vocab", c.tgt_vocab},
                     {"max_len", c.max_len},         {"tie_softmax", c.tie_softmax},
                     {"pre_norm", c.pre_norm}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_enc_layers = j.value("n_enc_layers", d.n_enc_layers);
  c.n_dec_layers = j.value("n_dec_layers", d.n_dec_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.dropout = j.value("dropout", d.dropout);
  c.src_vocab = j.value("src_vocab", d.src_vocab);
  c.tgt_vocab = j.value("tgt_vocab", d.tgt_vocab);
  c.max_len = j.value("max_len", d.max_len);
  c.tie_softmax = j.value("tie_softmax", d.tie_softmax);
  c.pre_norm = j.value("pre_norm", d.pre_norm);
}

// ---- parameters -------------------------------------------------------------

namespace {

Tensor uniform_tensor(Shape shape, double limit, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(-limit, limit);
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, RngStream& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  return {Var::parameter(uniform_tensor({in, out}, limit, rng)), Var::parameter(Tensor({out}))};
}

AttentionBlock make_attention(std::size_t d, RngStream& rng) {
  AttentionBlock a;
  a.q = make_linear(d, d, rng);
  a.k_weight = make_linear(d, d, rng).weight;
  a.v = make_linear(d, d, rng);
  a.out = make_linear(d, d, rng);
  return a;
}

LayerNormParams make_layer_norm(std::size_t d) {
  return {Var::parameter(Tensor({d}, 1.0)), Var::parameter(Tensor({d}, 0.0))};
}

Tensor sinusoid_table(std::size_t len, std::size_t d) {
  Tensor t({len, d});
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      t.at(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) t.at(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return t;
}

void add_linear(std::vector<std::pair<std::string, Var>>& out, const std::string& name,
                const Linear& l) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

void add_attention(std::vector<std::pair<std::string, Var>>& out, const std::string& name,
                   const AttentionBlock& a) {
  add_linear(out, name + ".q", a.q);
  out.emplace_back(name + ".k.weight", a.k_weight);
  add_linear(out, name + ".v", a.v);
  add_linear(out, name + ".out", a.out);
}

void add_norm(std::vector<std::pair<std::string, Var>>& out, const std::string& name,
              const LayerNormParams& n) {
  out.emplace_back(name + ".gain", n.gain);
  out.emplace_back(name + ".bias", n.bias);
}

}  // namespace

std::vector<std::pair<std::string, Var>> ModelParams::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  out.emplace_back("src_embedding", src_embedding);
  out.emplace_back("tgt_embedding", tgt_embedding);
  if (!softmax_weight.same_storage(tgt_embedding)) out.emplace_back("softmax_weight", softmax_weight);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    add_norm(out, p + ".ln_attn", encoder[i].ln_attn);
    add_attention(out, p + ".self_attn", encoder[i].self_attn);
    add_norm(out, p + ".ln_ff", encoder[i].ln_ff);
    add_linear(out, p + ".ff_in", encoder[i].ff_in);
    add_linear(out, p + ".ff_out", encoder[i].ff_out);
  }
  add_norm(out, "encoder.final", enc_final);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    add_norm(out, p + ".ln_self", decoder[i].ln_self);
    add_attention(out, p + ".self_attn", decoder[i].self_attn);
    add_norm(out, p + ".ln_cross", decoder[i].ln_cross);
    add_attention(out, p + ".cross_attn", decoder[i].cross_attn);
    add_norm(out, p + ".ln_ff", decoder[i].ln_ff);
    add_linear(out, p + ".ff_in", decoder[i].ff_in);
    add_linear(out, p + ".ff_out", decoder[i].ff_out);
  }
  add_norm(out, "decoder.final", dec_final);
  return out;
}

void ModelParams::zero_grad() const {
  for (auto& [name, v] : named_parameters()) {
    Var copy = v;
    copy.zero_grad();
  }
}

ModelParams init_model(const ModelConfig& cfg, RngStream& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const double emb_limit = std::sqrt(3.0 / static_cast<double>(d));
  ModelParams p;
  p.config = cfg;
  p.src_embedding =
      Var::parameter(uniform_tensor({static_cast<std::size_t>(cfg.src_vocab), d}, emb_limit, rng));
  p.tgt_embedding =
      Var::parameter(uniform_tensor({static_cast<std::size_t>(cfg.tgt_vocab), d}, emb_limit, rng));
  p.softmax_weight = cfg.tie_softmax
                         ? p.tgt_embedding
                         : Var::parameter(uniform_tensor(
                               {static_cast<std::size_t>(cfg.tgt_vocab), d}, emb_limit, rng));
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    EncoderLayer l;
    l.ln_attn = make_layer_norm(d);
    l.self_attn = make_attention(d, rng);
    l.ln_ff = make_layer_norm(d);
    l.ff_in = make_linear(d, ff, rng);
    l.ff_out = make_linear(ff, d, rng);
    p.encoder.push_back(std::move(l));
  }
  p.enc_final = make_layer_norm(d);
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    DecoderLayer l;
    l.ln_self = make_layer_norm(d);
    l.self_attn = make_attention(d, rng);
    l.ln_cross = make_layer_norm(d);
    l.cross_attn = make_attention(d, rng);
    l.ln_ff = make_layer_norm(d);
    l.ff_in = make_linear(d, ff, rng);
    l.ff_out = make_linear(ff, d, rng);
    p.decoder.push_back(std::move(l));
  }
  p.dec_final = make_layer_norm(d);
  p.positions = sinusoid_table(static_cast<std::size_t>(cfg.max_len), d);
  return p;
}

ModelParams clone(const ModelParams& p) {
  RngStream dummy(0, RngPurpose::init);
  ModelParams out = init_model(p.config, dummy);
  out.step = p.step;
  auto src = p.named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
  return out;
}

// ---- forward ----------------------------------------------------------------------

namespace {

Var linear(const Var& x, const Linear& l) { return add_bias(matmul(x, l.weight), l.bias); }

Var norm(const Var& x, const LayerNormParams& n) { return layer_norm(x, n.gain, n.bias, 1e-6); }

Var maybe_dropout(const Var& x, double rate, RngStream* stream) {
  if (!stream || rate == 0.0) return x;
  return dropout(x, rate, *stream);
}

Var multi_head(const AttentionBlock& a, const Var& query_in, const Var& key_in,
               const AttentionLayout& layout) {
  Var q = linear(query_in, a.q);
  Var k = matmul(key_in, a.k_weight);
  Var v = linear(key_in, a.v);
  return linear(attention(q, k, v, layout), a.out);
}

/// Residual sublayer in pre- or post-norm arrangement.
template <typename F>
Var residual(const Var& x, const LayerNormParams& ln, bool pre_norm, double rate,
             RngStream* stream, F&& body) {
  if (pre_norm) return add(x, maybe_dropout(body(norm(x, ln)), rate, stream));
  return norm(add(x, maybe_dropout(body(x), rate, stream)), ln);
}

Var feed_forward(const Var& x, const Linear& in, const Linear& out) {
  return linear(relu(linear(x, in)), out);
}

Tensor position_rows(const ModelParams& p, std::size_t batch, std::size_t len) {
  const auto d = static_cast<std::size_t>(p.config.d_model);
  if (len > p.positions.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "sequence length " + std::to_string(len) +
                                              " exceeds max_len " + std::to_string(p.positions.rows()));
  }
  Tensor t({batch * len, d});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(p.positions.data().data(), len * d, t.storage().data() + b * len * d);
  }
  return t;
}

Var embed(const ModelParams& p, const Var& table, std::span<const int> ids, std::size_t batch,
          std::size_t len, RngStream* stream) {
  const double s = std::sqrt(static_cast<double>(p.config.d_model));
  Var x = add_const(scale(embedding(table, ids), s), position_rows(p, batch, len));
  return maybe_dropout(x, p.config.dropout, stream);
}

Var encode_ids(const ModelParams& p, std::span<const int> src, std::size_t batch,
               std::size_t src_len, std::span<const std::size_t> src_lengths, RngStream* stream) {
  const double rate = p.config.dropout;
  const bool pre = p.config.pre_norm;
  AttentionLayout layout{batch, src_len, src_len, static_cast<std::size_t>(p.config.n_heads), false,
                         std::vector<std::size_t>(src_lengths.begin(), src_lengths.end())};
  Var x = embed(p, p.src_embedding, src, batch, src_len, stream);
  for (const auto& l : p.encoder) {
    x = residual(x, l.ln_attn, pre, rate, stream,
                 [&](const Var& h) { return multi_head(l.self_attn, h, h, layout); });
    x = residual(x, l.ln_ff, pre, rate, stream,
                 [&](const Var& h) { return feed_forward(h, l.ff_in, l.ff_out); });
  }
  return pre ? norm(x, p.enc_final) : x;
}

Var decode_ids(const ModelParams& p, const Var& enc, std::span<const std::size_t> src_lengths,
               std::size_t src_len, std::span<const int> tgt_in, std::size_t batch,
               std::size_t tgt_len, std::span<const std::size_t> tgt_lengths, RngStream* stream) {
  const double rate = p.config.dropout;
  const bool pre = p.config.pre_norm;
  const auto heads = static_cast<std::size_t>(p.config.n_heads);
  AttentionLayout self_layout{batch, tgt_len, tgt_len, heads, true,
                              std::vector<std::size_t>(tgt_lengths.begin(), tgt_lengths.end())};
  AttentionLayout cross_layout{batch, tgt_len, src_len, heads, false,
                               std::vector<std::size_t>(src_lengths.begin(), src_lengths.end())};
  Var y = embed(p, p.tgt_embedding, tgt_in, batch, tgt_len, stream);
  for (const auto& l : p.decoder) {
    y = residual(y, l.ln_self, pre, rate, stream,
                 [&](const Var& h) { return multi_head(l.self_attn, h, h, self_layout); });
    y = residual(y, l.ln_cross, pre, rate, stream,
                 [&](const Var& h) { return multi_head(l.cross_attn, h, enc, cross_layout); });
    y = residual(y, l.ln_ff, pre, rate, stream,
                 [&](const Var& h) { return feed_forward(h, l.ff_in, l.ff_out); });
  }
  return pre ? norm(y, p.dec_final) : y;
}

}  // namespace

Var encode(const ModelParams& p, const Batch& batch, RngStream* dropout) {
  if (batch.src.size() != batch.batch_size * batch.src_len ||
      batch.src_lengths.size() != batch.batch_size) {
    throw Error(ErrorCode::ShapeMismatch, "malformed batch source matrix");
  }
  return encode_ids(p, batch.src, batch.batch_size, batch.src_len, batch.src_lengths, dropout);
}

Var decode_all(const ModelParams& p, const Var& encoder_states, const Batch& batch,
               RngStream* dropout) {
  if (encoder_states.rows() != batch.batch_size * batch.src_len ||
      batch.tgt_in.size() != batch.batch_size * batch.tgt_len) {
    throw Error(ErrorCode::ShapeMismatch, "encoder states do not match the batch");
  }
  return decode_ids(p, encoder_states, batch.src_lengths, batch.src_len, batch.tgt_in,
                    batch.batch_size, batch.tgt_len, batch.tgt_lengths, dropout);
}

HiddenStateBatch decode_states(const ModelParams& p, const Var& encoder_states, const Batch& batch,
                               RngStream* dropout, PassLabel pass) {
  Var all = decode_all(p, encoder_states, batch, dropout);
  const auto positions = batch.target_positions();
  return {gather_rows(all, positions), batch.target_ids(), pass};
}

Var output_logits(const ModelParams& p, const Var& states) {
  return matmul_nt(states, p.softmax_weight);
}

Var output_distribution(const ModelParams& p, const HiddenStateBatch& states) {
  return row_softmax(output_logits(p, states.states));
}

Tensor next_token_log_probs(const ModelParams& p, const Var& encoder_states,
                            std::span<const std::size_t> src_lengths, std::size_t src_len,
                            const std::vector<std::vector<int>>& prefixes) {
  NoGradGuard no_grad;
  const std::size_t rows = prefixes.size();
  if (rows == 0) return Tensor({0, static_cast<std::size_t>(p.config.tgt_vocab)});
  const std::size_t len = prefixes.front().size();
  std::vector<int> ids;
  ids.reserve(rows * len);
  for (const auto& pre : prefixes) {
    if (pre.size() != len) throw Error(ErrorCode::ShapeMismatch, "prefixes must share a length");
    ids.insert(ids.end(), pre.begin(), pre.end());
  }
  std::vector<std::size_t> lengths(rows, len);
  Var states = decode_ids(p, encoder_states, src_lengths, src_len, ids, rows, len, lengths, nullptr);
  std::vector<std::size_t> last(rows);
  for (std::size_t r = 0; r < rows; ++r) last[r] = r * len + len - 1;
  return log_softmax(output_logits(p, gather_rows(states, last))).value();
}

namespace {

// Rows of `t` regrouped as `groups` blocks of `len` rows, block b taken from old block keep[b].
Tensor select_blocks(const Tensor& t, std::size_t len, std::span<const std::size_t> keep) {
  const std::size_t d = t.cols();
  Tensor out({keep.size() * len, d});
  for (std::size_t b = 0; b < keep.size(); ++b) {
    std::copy_n(t.data().data() + keep[b] * len * d, len * d, out.storage().data() + b * len * d);
  }
  return out;
}

// Appends one row per block: [rows*len x d] + [rows x d] -> [rows*(len+1) x d].
Tensor append_step(const Tensor& cache, std::size_t len, const Tensor& fresh) {
  const std::size_t rows = fresh.rows(), d = fresh.cols();
  Tensor out({rows * (len + 1), d});
  for (std::size_t r = 0; r < rows; ++r) {
    double* dst = out.storage().data() + r * (len + 1) * d;
    if (len > 0) std::copy_n(cache.data().data() + r * len * d, len * d, dst);
    std::copy_n(fresh.data().data() + r * d, d, dst + len * d);
  }
  return out;
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const ModelParams& p, const Var& encoder_states,
                                       std::span<const std::size_t> src_lengths, std::size_t src_len)
    : p_(&p), rows_(src_lengths.size()), src_len_(src_len), src_lengths_(src_lengths.begin(), src_lengths.end()) {
  if (encoder_states.rows() != rows_ * src_len_) {
    throw Error(ErrorCode::ShapeMismatch, "encoder states do not match the source lengths");
  }
  NoGradGuard no_grad;
  for (const auto& l : p.decoder) {
    LayerCache c;
    c.cross_k = matmul(encoder_states, l.cross_attn.k_weight).value();
    c.cross_v = linear(encoder_states, l.cross_attn.v).value();
    layers_.push_back(std::move(c));
  }
}

Tensor IncrementalDecoder::step(std::span<const int> tokens) {
  if (tokens.size() != rows_) throw Error(ErrorCode::ShapeMismatch, "one token per row expected");
  NoGradGuard no_grad;
  const ModelParams& p = *p_;
  const bool pre = p.config.pre_norm;
  const auto heads = static_cast<std::size_t>(p.config.n_heads);
  const auto d = static_cast<std::size_t>(p.config.d_model);
  if (steps_ >= p.positions.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "sequence length " + std::to_string(steps_ + 1) +
                                              " exceeds max_len " + std::to_string(p.positions.rows()));
  }
  Tensor pos({rows_, d});
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy_n(p.positions.data().data() + steps_ * d, d, pos.storage().data() + r * d);
  }
  const double s = std::sqrt(static_cast<double>(d));
  Var y = add_const(scale(embedding(p.tgt_embedding, tokens), s), pos);

  const std::size_t len = steps_ + 1;
  AttentionLayout self_layout{rows_, 1, len, heads, false, std::vector<std::size_t>(rows_, len)};
  AttentionLayout cross_layout{rows_, 1, src_len_, heads, false, src_lengths_};
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    const auto& l = p.decoder[i];
    auto& c = layers_[i];
    y = residual(y, l.ln_self, pre, 0.0, nullptr, [&](const Var& h) {
      c.self_k = append_step(c.self_k, steps_, matmul(h, l.self_attn.k_weight).value());
      c.self_v = append_step(c.self_v, steps_, linear(h, l.self_attn.v).value());
      Var q = linear(h, l.self_attn.q);
      return linear(attention(q, Var::constant(c.self_k), Var::constant(c.self_v), self_layout), l.self_attn.out);
    });
    y = residual(y, l.ln_cross, pre, 0.0, nullptr, [&](const Var& h) {
      Var q = linear(h, l.cross_attn.q);
      return linear(attention(q, Var::constant(c.cross_k), Var::constant(c.cross_v), cross_layout),
                    l.cross_attn.out);
    });
    y = residual(y, l.ln_ff, pre, 0.0, nullptr, [&](const Var& h) { return feed_forward(h, l.ff_in, l.ff_out); });
  }
  if (pre) y = norm(y, p.dec_final);
  ++steps_;
  return log_softmax(output_logits(p, y)).value();
}

void IncrementalDecoder::select(std::span<const std::size_t> keep) {
  for (std::size_t k : keep) {
    if (k >= rows_) throw Error(ErrorCode::ShapeMismatch, "row " + std::to_string(k) + " out of range", k);
  }
  for (auto& c : layers_) {
    if (steps_ > 0) {
      c.self_k = select_blocks(c.self_k, steps_, keep);
      c.self_v = select_blocks(c.self_v, steps_, keep);
    }
    c.cross_k = select_blocks(c.cross_k, src_len_, keep);
    c.cross_v = select_blocks(c.cross_v, src_len_, keep);
  }
  std::vector<std::size_t> lengths;
  for (std::size_t k : keep) lengths.push_back(src_lengths_[k]);
  src_lengths_ = std::move(lengths);
  rows_ = keep.size();
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  std::uint64_t get(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw Error(ErrorCode::CorruptChecksum, "checkpoint truncated");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& data, std::size_t len) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(len)));
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path,
                     const nlohmann::json& metadata) {
  std::string out(kMagic, kMagic + 8);
  put_u32(out, kCheckpointVersion);
  const std::string config = nlohmann::json{{"model", p.config}, {"metadata", metadata}}.dump();
  put_u64(out, config.size());
  out += config;
  put_u64(out, static_cast<std::uint64_t>(p.step));
  const auto params = p.named_parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, v] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(v.shape().size()));
    for (auto dim : v.shape()) put_u64(out, dim);
    for (double x : v.value().data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  put_u32(out, crc_of(out, out.size()));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoError, "cannot write checkpoint " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot read checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || buf.compare(0, 8, std::string(kMagic, 8)) != 0) {
    throw Error(ErrorCode::CorruptChecksum, path.string() + " is not a checkpoint");
  }
  Reader header(buf, buf.size());
  header.bytes(8);
  const auto version = static_cast<std::uint32_t>(header.get(4));
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) +
                                                ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::size_t body = buf.size() - 4;
  Reader tail(buf, buf.size());
  tail.bytes(body);
  if (static_cast<std::uint32_t>(tail.get(4)) != crc_of(buf, body)) {
    throw Error(ErrorCode::CorruptChecksum, path.string() + ": CRC mismatch");
  }

  Reader r(buf, body);
  r.bytes(12);
  const auto config_len = r.get(8);
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(r.bytes(config_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptChecksum, std::string("checkpoint config: ") + e.what());
  }
  Checkpoint ck;
  RngStream dummy(0, RngPurpose::init);
  ck.params = init_model(config.at("model").get<ModelConfig>(), dummy);
  ck.metadata = config.value("metadata", nlohmann::json::object());
  ck.params.step = static_cast<std::int64_t>(r.get(8));

  auto params = ck.params.named_parameters();
  const auto count = static_cast<std::size_t>(r.get(4));
  if (count != params.size()) {
    throw Error(ErrorCode::CorruptChecksum, "checkpoint holds " + std::to_string(count) +
                                                " tensors, model expects " + std::to_string(params.size()));
  }
  for (auto& [name, v] : params) {
    const std::string stored = r.bytes(r.get(4));
    Shape shape(static_cast<std::size_t>(r.get(4)));
    for (auto& dim : shape) dim = r.get(8);
    if (stored != name || shape != v.shape()) {
      throw Error(ErrorCode::CorruptChecksum, "unexpected tensor '" + stored + "' " + shape_string(shape));
    }
    for (auto& x : v.mutable_value().storage()) x = std::bit_cast<double>(r.get(8));
  }
  return ck;
}

}  // namespace fcl::model
