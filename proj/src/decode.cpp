#include "fcl/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fcl/error.hpp"

namespace fcl::decode {

using corpus::kBos;
using corpus::kEos;
using corpus::kPad;
using ad::Var;

void DecodeConfig::validate() const {
  if (beam_size < 1) throw Error(ErrorCode::InvalidConfig, "beam_size must be >= 1");
  if (!(length_penalty >= 0.0)) throw Error(ErrorCode::InvalidConfig, "length_penalty must be >= 0");
  if (!(max_len_factor > 0.0) || max_len_offset < 0) {
    throw Error(ErrorCode::InvalidConfig, "max length settings must be positive");
  }
}

std::size_t max_output_length(std::size_t source_length, const DecodeConfig& cfg) {
  return static_cast<std::size_t>(std::floor(cfg.max_len_factor * static_cast<double>(source_length))) +
         static_cast<std::size_t>(cfg.max_len_offset);
}

namespace {

corpus::Batch source_batch(const std::vector<std::vector<int>>& sources, std::size_t begin, std::size_t end) {
  corpus::Batch b;
  b.batch_size = end - begin;
  for (std::size_t i = begin; i < end; ++i) b.src_len = std::max(b.src_len, sources[i].size());
  b.src.assign(b.batch_size * b.src_len, kPad);
  for (std::size_t i = begin; i < end; ++i) {
    std::copy(sources[i].begin(), sources[i].end(), b.src.begin() + static_cast<std::ptrdiff_t>((i - begin) * b.src_len));
    b.src_lengths.push_back(sources[i].size());
  }
  return b;
}

bool excluded(int v) { return v == kPad || v == kBos; }

double length_norm(std::size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

}  // namespace

std::vector<std::vector<int>> greedy_decode(const model::ModelParams& p,
                                            const std::vector<std::vector<int>>& sources, const DecodeConfig& cfg,
                                            std::size_t batch_sentences) {
  cfg.validate();
  ad::NoGradGuard no_grad;
  std::vector<std::vector<int>> out(sources.size());
  const std::size_t V = static_cast<std::size_t>(p.config.tgt_vocab);
  for (std::size_t begin = 0; begin < sources.size(); begin += batch_sentences) {
    const std::size_t end = std::min(sources.size(), begin + batch_sentences);
    corpus::Batch batch = source_batch(sources, begin, end);
    const std::size_t rows = batch.batch_size;
    if (batch.src_len == 0) continue;
    Var enc = model::encode(p, batch, nullptr);

    std::size_t limit = 0;
    for (std::size_t i = begin; i < end; ++i) limit = std::max(limit, max_output_length(sources[i].size(), cfg));
    model::IncrementalDecoder dec(p, enc, batch.src_lengths, batch.src_len);
    std::vector<int> last(rows, kBos);
    std::vector<bool> done(rows, false);
    for (std::size_t r = 0; r < rows; ++r) {
      if (sources[begin + r].empty()) done[r] = true;
    }
    for (std::size_t step = 0; step < limit; ++step) {
      if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
      Tensor lp = dec.step(last);
      for (std::size_t r = 0; r < rows; ++r) {
        if (done[r]) {
          last[r] = kPad;
          continue;
        }
        int best = -1;
        for (std::size_t v = 0; v < V; ++v) {
          if (excluded(static_cast<int>(v))) continue;
          if (best < 0 || lp.at(r, v) > lp.at(r, static_cast<std::size_t>(best))) best = static_cast<int>(v);
        }
        last[r] = best;
        if (best == kEos) {
          done[r] = true;
        } else {
          out[begin + r].push_back(best);
          if (out[begin + r].size() >= max_output_length(sources[begin + r].size(), cfg)) done[r] = true;
        }
      }
    }
  }
  return out;
}

std::vector<int> beam_search(const model::ModelParams& p, const std::vector<int>& source, const DecodeConfig& cfg) {
  cfg.validate();
  if (source.empty()) return {};
  ad::NoGradGuard no_grad;
  const std::size_t k = static_cast<std::size_t>(cfg.beam_size);
  const std::size_t V = static_cast<std::size_t>(p.config.tgt_vocab);
  const std::size_t limit = max_output_length(source.size(), cfg);
  corpus::Batch batch = source_batch({source}, 0, 1);
  Var enc1 = model::encode(p, batch, nullptr);
  model::IncrementalDecoder dec(p, enc1, batch.src_lengths, batch.src_len);

  struct Hyp {
    std::vector<int> tokens;  // BOS first
    double logp = 0.0;
  };
  struct Finished {
    std::vector<int> tokens;
    double score;
  };
  std::vector<Hyp> alive{{{kBos}, 0.0}};
  std::vector<Finished> finished;

  for (std::size_t step = 1; step <= limit && !alive.empty() && finished.size() < k; ++step) {
    std::vector<int> last;
    for (const auto& h : alive) last.push_back(h.tokens.back());
    Tensor lp = dec.step(last);

    struct Cand {
      double score;
      std::size_t beam;
      int token;
    };
    std::vector<Cand> cands;
    cands.reserve(alive.size() * V);
    for (std::size_t b = 0; b < alive.size(); ++b) {
      for (std::size_t v = 0; v < V; ++v) {
        if (excluded(static_cast<int>(v))) continue;
        cands.push_back({alive[b].logp + lp.at(b, v), b, static_cast<int>(v)});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.token < b.token;
    });

    std::vector<Hyp> next;
    std::vector<std::size_t> parents;
    for (std::size_t r = 0; r < cands.size() && next.size() < k; ++r) {
      const Cand& c = cands[r];
      if (c.token == kEos) {
        if (r < k) {
          std::vector<int> toks(alive[c.beam].tokens.begin() + 1, alive[c.beam].tokens.end());
          finished.push_back({toks, c.score / length_norm(step, cfg.length_penalty)});
        }
        continue;
      }
      Hyp h = alive[c.beam];
      h.tokens.push_back(c.token);
      h.logp = c.score;
      next.push_back(std::move(h));
      parents.push_back(c.beam);
    }
    alive = std::move(next);
    if (!alive.empty()) dec.select(parents);
  }
  if (finished.empty()) {
    for (const auto& h : alive) {
      finished.push_back({std::vector<int>(h.tokens.begin() + 1, h.tokens.end()),
                          h.logp / length_norm(h.tokens.size() - 1, cfg.length_penalty)});
    }
  }
  // stable: earliest finished wins ties
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (finished[i].score > finished[best].score) best = i;
  }
  return finished[best].tokens;
}

std::vector<std::vector<int>> translate(const model::ModelParams& p, const std::vector<std::vector<int>>& sources,
                                        const DecodeConfig& cfg) {
  cfg.validate();
  if (cfg.beam_size == 1) return greedy_decode(p, sources, cfg);
  std::vector<std::vector<int>> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(beam_search(p, s, cfg));
  return out;
}

}  // namespace fcl::decode
