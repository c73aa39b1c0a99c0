#include "fcl/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "fcl/error.hpp"

namespace fcl::contrastive {

std::string freq_max_mode_name(FreqMaxMode m) { return m == FreqMaxMode::batch ? "batch" : "corpus"; }

FreqMaxMode parse_freq_max_mode(const std::string& s) {
  if (s == "batch") return FreqMaxMode::batch;
  if (s == "corpus") return FreqMaxMode::corpus;
  throw Error(ErrorCode::InvalidConfig, "unknown freq_max_mode '" + s + "'");
}

void ContrastiveConfig::validate() const {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw Error(ErrorCode::InvalidConfig, "gamma must be > 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::InvalidConfig, "temperature must be > 0");
  }
}

PositiveSets collect_positive_sets(std::span<const int> token_ids) {
  const std::size_t n = token_ids.size();
  std::unordered_map<int, std::vector<std::size_t>> rows_of;
  for (std::size_t i = 0; i < n; ++i) rows_of[token_ids[i]].push_back(i);
  PositiveSets out;
  out.supervised.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : rows_of[token_ids[i]]) {
      if (j != i) out.supervised[i].push_back(j);
    }
  }
  return out;
}

PositiveSets collect_positive_sets(std::span<const int> token_ids, const model::HiddenStateBatch& pass1,
                                   const model::HiddenStateBatch& pass2) {
  const std::size_t n = token_ids.size();
  if (pass1.token_ids.size() != n || pass2.token_ids.size() != n || pass1.states.rows() != n ||
      pass2.states.rows() != n || pass1.states.cols() != pass2.states.cols()) {
    throw Error(ErrorCode::PassMisalignment, "pass sizes differ from token list");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (pass1.token_ids[i] != token_ids[i] || pass2.token_ids[i] != token_ids[i]) {
      throw Error(ErrorCode::PassMisalignment, "token ids differ at row " + std::to_string(i), i);
    }
  }
  return collect_positive_sets(token_ids);
}

double frequency_score(std::int64_t count, double max_log_count) {
  if (max_log_count <= 0.0) return 1.0;
  const double lc = std::log(static_cast<double>(std::max<std::int64_t>(count, 1)));
  return 1.0 - lc / max_log_count;
}

double max_log_count(std::span<const int> token_ids, const corpus::FrequencyTable& freq, FreqMaxMode mode) {
  std::int64_t mx = 1;
  if (mode == FreqMaxMode::batch) {
    for (int id : token_ids) mx = std::max(mx, freq.count(id));
  } else {
    for (std::int64_t c : freq.counts) mx = std::max(mx, c);
  }
  return std::log(static_cast<double>(mx));
}

WeightMatrix contrast_weights(std::span<const int> token_ids, const corpus::FrequencyTable& freq,
                              const ContrastiveConfig& cfg) {
  cfg.validate();
  const std::size_t n = token_ids.size();
  WeightMatrix out;
  out.w = Tensor({n, n}, 1.0);
  out.raw_negative_mean.assign(n, 0.0);
  out.status.assign(n, AnchorWeighting::normalized);
  out.max_log_count = max_log_count(token_ids, freq, cfg.freq_max_mode);

  std::vector<double> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = frequency_score(freq.count(token_ids[i]), out.max_log_count);

  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    std::size_t negatives = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (token_ids[j] != token_ids[i]) {
        total += f[i] * f[j];
        ++negatives;
      }
    }
    if (negatives == 0) {
      out.status[i] = AnchorWeighting::no_negatives;
      continue;
    }
    const double m = total / static_cast<double>(negatives);
    out.raw_negative_mean[i] = m;
    if (m <= 0.0) {
      out.status[i] = AnchorWeighting::fallback;
      continue;
    }
    const double k = cfg.gamma / m;
    for (std::size_t j = 0; j < n; ++j) {
      const bool negative = token_ids[j] != token_ids[i];
      if (negative || (cfg.weight_positives && j != i)) out.w.at(i, j) = k * f[i] * f[j];
    }
  }
  return out;
}

WeightMatrix uniform_weights(std::size_t n) {
  WeightMatrix out;
  out.w = Tensor({n, n}, 1.0);
  out.raw_negative_mean.assign(n, 0.0);
  out.status.assign(n, AnchorWeighting::fallback);
  return out;
}

Var tcl_loss(const Var& pass1, const Var& pass2, const PositiveSets& positives, const ContrastiveConfig& cfg) {
  return fcl_loss(pass1, pass2, positives, uniform_weights(pass1.rows()), cfg);
}

Var fcl_loss(const Var& pass1, const Var& pass2, const PositiveSets& positives, const WeightMatrix& weights,
             const ContrastiveConfig& cfg) {
  cfg.validate();
  const std::size_t n = pass1.rows();
  if (pass2.shape() != pass1.shape() || positives.size() != n) {
    throw Error(ErrorCode::PassMisalignment, "pass shapes or positive sets disagree");
  }
  if (weights.w.shape() != Shape{n, n}) {
    throw Error(ErrorCode::WeightShapeMismatch,
                "weights " + shape_string(weights.w.shape()) + " for " + std::to_string(n) + " anchors");
  }

  const Var u1 = ad::normalize_rows(pass1);
  const Var u2 = ad::normalize_rows(pass2);
  const double inv_t = 1.0 / cfg.temperature;
  Var sim11 = ad::matmul_nt(u1, u1);
  Var twin = ad::row_dot(u1, u2);
  if (inv_t != 1.0) {
    sim11 = ad::scale(sim11, inv_t);
    twin = ad::scale(twin, inv_t);
  }

  Tensor w = weights.w;
  if (!cfg.include_self_in_denominator) {
    for (std::size_t i = 0; i < n; ++i) w.at(i, i) = 0.0;
  }
  Var logits = sim11;
  if (cfg.pass2_in_denominator) {
    Var sim12 = ad::matmul_nt(u1, u2);
    if (inv_t != 1.0) sim12 = ad::scale(sim12, inv_t);
    logits = ad::concat_cols(sim11, sim12);
    Tensor wide({n, 2 * n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        wide.at(i, j) = w.at(i, j);
        wide.at(i, n + j) = j == i ? 1.0 : weights.w.at(i, j);
      }
    }
    w = std::move(wide);
  }
  const Var lse = ad::weighted_logsumexp(logits, w);

  Tensor sup_mask({n, n});
  Tensor pos_count({n});
  for (std::size_t i = 0; i < n; ++i) {
    const double share = cfg.average_positives ? 1.0 / static_cast<double>(positives.positive_count(i)) : 1.0;
    for (std::size_t j : positives.supervised[i]) sup_mask.at(i, j) = share;
    pos_count[i] = cfg.average_positives ? share : static_cast<double>(positives.positive_count(i));
  }
  // sum_i sum_p [sim(i,p) - lse_i], each anchor scaled by 1/|P(i)| when averaging
  Var numer;
  Var total;
  if (cfg.average_positives) {
    numer = ad::add(ad::dot_const(sim11, sup_mask), ad::dot_const(twin, pos_count));
    total = ad::sub(numer, ad::sum(lse));
  } else {
    numer = ad::add(ad::dot_const(sim11, sup_mask), ad::sum(twin));
    total = ad::sub(numer, ad::dot_const(lse, pos_count));
  }
  return ad::scale(total, -1.0 / static_cast<double>(n));
}

}  // namespace fcl::contrastive
