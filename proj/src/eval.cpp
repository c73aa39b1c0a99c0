#include "fcl/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "fcl/error.hpp"

namespace fcl::eval {

void EvalConfig::validate() const {
  if (beam_size < 1) throw Error(ErrorCode::InvalidConfig, "eval.beam_size must be >= 1");
  if (bucket_count < 1) throw Error(ErrorCode::InvalidConfig, "eval.bucket_count must be >= 1");
  if (mattr_window < 1 || hdd_sample_size < 1) throw Error(ErrorCode::InvalidConfig, "eval window sizes must be >= 1");
  if (!(mtld_threshold > 0.0 && mtld_threshold < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "eval.mtld_threshold must be in (0,1)");
  }
  if (low_threshold < 1) throw Error(ErrorCode::InvalidConfig, "eval.low_threshold must be >= 1");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"beam_size", c.beam_size},           {"length_penalty", c.length_penalty},
       {"max_len_factor", c.max_len_factor}, {"bucket_count", c.bucket_count},
       {"mattr_window", c.mattr_window},     {"hdd_sample_size", c.hdd_sample_size},
       {"mtld_threshold", c.mtld_threshold}, {"low_threshold", c.low_threshold}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.beam_size = j.value("beam_size", c.beam_size);
  c.length_penalty = j.value("length_penalty", c.length_penalty);
  c.max_len_factor = j.value("max_len_factor", c.max_len_factor);
  c.bucket_count = j.value("bucket_count", c.bucket_count);
  c.mattr_window = j.value("mattr_window", c.mattr_window);
  c.hdd_sample_size = j.value("hdd_sample_size", c.hdd_sample_size);
  c.mtld_threshold = j.value("mtld_threshold", c.mtld_threshold);
  c.low_threshold = j.value("low_threshold", c.low_threshold);
}

// ---- BLEU -----------------------------------------------------------------------------

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_length += o.hyp_length;
  ref_length += o.ref_length;
  return *this;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::int64_t>;

NgramCounts ngrams(const Sentence& s, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++out[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                   s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

void require_aligned(std::size_t hyps, std::size_t refs) {
  if (hyps != refs) {
    throw Error(ErrorCode::LengthMismatch,
                std::to_string(hyps) + " hypotheses vs " + std::to_string(refs) + " references");
  }
}

}  // namespace

BleuStats bleu_stats(const Sentence& hyp, const Sentence& ref) {
  BleuStats s;
  s.hyp_length = static_cast<std::int64_t>(hyp.size());
  s.ref_length = static_cast<std::int64_t>(ref.size());
  for (std::size_t n = 1; n <= 4; ++n) {
    auto h = ngrams(hyp, n);
    auto r = ngrams(ref, n);
    for (const auto& [g, c] : h) {
      auto it = r.find(g);
      if (it != r.end()) s.matches[n - 1] += std::min(c, it->second);
    }
    s.totals[n - 1] = hyp.size() >= n ? static_cast<std::int64_t>(hyp.size() - n + 1) : 0;
  }
  return s;
}

BleuStats bleu_stats(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  require_aligned(hyps.size(), refs.size());
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_stats(hyps[i], refs[i]);
  return total;
}

double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_length == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.matches[n] == 0 || s.totals[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  double bp = 1.0;
  if (s.hyp_length < s.ref_length) {
    bp = std::exp(1.0 - static_cast<double>(s.ref_length) / static_cast<double>(s.hyp_length));
  }
  return 100.0 * bp * std::exp(log_p / 4.0);
}

double bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  return bleu_from_stats(bleu_stats(hyps, refs));
}

// ---- 1-gram ------------------------------------------------------------------------------

PRF make_prf(std::int64_t matched, std::int64_t ref_count, std::int64_t hyp_count) {
  PRF p;
  p.matched = matched;
  p.ref_count = ref_count;
  p.hyp_count = hyp_count;
  p.recall = ref_count > 0 ? static_cast<double>(matched) / static_cast<double>(ref_count) : 0.0;
  p.precision = hyp_count > 0 ? static_cast<double>(matched) / static_cast<double>(hyp_count) : 0.0;
  p.f1 = p.precision + p.recall > 0.0 ? 2.0 * p.precision * p.recall / (p.precision + p.recall) : 0.0;
  return p;
}

BucketedPRF one_gram_prf(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                         const corpus::Vocabulary& vocab, const corpus::BucketAssignment& buckets) {
  require_aligned(hyps.size(), refs.size());
  const std::size_t k = static_cast<std::size_t>(buckets.bucket_count);
  std::vector<std::int64_t> matched(k, 0), ref_n(k, 0), hyp_n(k, 0);
  auto bucket = [&](const std::string& tok) { return static_cast<std::size_t>(buckets.bucket_of(vocab.id(tok))); };
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    std::unordered_map<std::string, std::int64_t> h, r;
    for (const auto& t : hyps[i]) ++h[t];
    for (const auto& t : refs[i]) ++r[t];
    for (const auto& [t, c] : h) {
      hyp_n[bucket(t)] += c;
      auto it = r.find(t);
      if (it != r.end()) matched[bucket(t)] += std::min(c, it->second);
    }
    for (const auto& [t, c] : r) ref_n[bucket(t)] += c;
  }
  BucketedPRF out;
  std::int64_t m = 0, rn = 0, hn = 0;
  for (std::size_t b = 0; b < k; ++b) {
    out.buckets.push_back(make_prf(matched[b], ref_n[b], hyp_n[b]));
    m += matched[b];
    rn += ref_n[b];
    hn += hyp_n[b];
  }
  out.overall = make_prf(m, rn, hn);
  return out;
}

// ---- diversity ------------------------------------------------------------------------------

double mattr(const std::vector<std::string>& tokens, std::size_t window) {
  if (tokens.empty()) throw Error(ErrorCode::EmptyText, "mattr: empty text");
  const std::size_t n = tokens.size();
  const std::size_t w = std::clamp<std::size_t>(window, 1, n);
  std::unordered_map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i < w; ++i) ++counts[tokens[i]];
  double total = static_cast<double>(counts.size()) / static_cast<double>(w);
  for (std::size_t start = 1; start + w <= n; ++start) {
    auto it = counts.find(tokens[start - 1]);
    if (--it->second == 0) counts.erase(it);
    ++counts[tokens[start + w - 1]];
    total += static_cast<double>(counts.size()) / static_cast<double>(w);
  }
  return total / static_cast<double>(n - w + 1);
}

namespace {

double log_choose(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace

double hdd(const std::vector<std::string>& tokens, std::size_t sample_size) {
  if (tokens.empty()) throw Error(ErrorCode::EmptyText, "hdd: empty text");
  const std::size_t n = tokens.size();
  if (n < sample_size) {
    throw Error(ErrorCode::TextTooShort,
                "hdd: " + std::to_string(n) + " tokens < sample size " + std::to_string(sample_size));
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens) ++counts[t];
  const double N = static_cast<double>(n), s = static_cast<double>(sample_size);
  const double log_total = log_choose(N, s);
  double sum = 0.0;
  for (const auto& [t, c] : counts) {
    const double rest = N - static_cast<double>(c);
    const double miss = rest < s ? 0.0 : std::exp(log_choose(rest, s) - log_total);
    sum += 1.0 - miss;
  }
  return sum / s;
}

double mtld_factors(const std::vector<std::string>& tokens, double threshold) {
  double factors = 0.0;
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t count = 0;
  double ttr = 1.0;
  for (const auto& t : tokens) {
    ++seen[t];
    ++count;
    ttr = static_cast<double>(seen.size()) / static_cast<double>(count);
    if (ttr < threshold) {
      factors += 1.0;
      seen.clear();
      count = 0;
      ttr = 1.0;
    }
  }
  if (count > 0) factors += (1.0 - ttr) / (1.0 - threshold);
  return factors;
}

double mtld(const std::vector<std::string>& tokens, double threshold) {
  if (tokens.empty()) throw Error(ErrorCode::EmptyText, "mtld: empty text");
  std::vector<std::string> rev(tokens.rbegin(), tokens.rend());
  const double f = mtld_factors(tokens, threshold);
  const double b = mtld_factors(rev, threshold);
  if (f == 0.0 || b == 0.0) throw Error(ErrorCode::UndefinedDiversity, "mtld: no factor completed");
  const double n = static_cast<double>(tokens.size());
  return 0.5 * (n / f + n / b);
}

// ---- subsets ---------------------------------------------------------------------------------

SubsetBleu subset_report(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                         const corpus::SubsetPartition& subsets) {
  require_aligned(hyps.size(), refs.size());
  std::vector<int> seen(hyps.size(), 0);
  for (const auto* part : {&subsets.high, &subsets.medium, &subsets.low}) {
    for (std::size_t i : *part) {
      if (i >= seen.size()) throw Error(ErrorCode::NotAPartition, "subset index out of range", i);
      ++seen[i];
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i] != 1) throw Error(ErrorCode::NotAPartition, "sentence not in exactly one subset", i);
  }
  auto score = [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
    if (idx.empty()) return std::nullopt;
    BleuStats s;
    for (std::size_t i : idx) s += bleu_stats(hyps[i], refs[i]);
    return bleu_from_stats(s);
  };
  return {score(subsets.high), score(subsets.medium), score(subsets.low)};
}

// ---- reports ---------------------------------------------------------------------------------

MetricsReport evaluate(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                       const corpus::Vocabulary& vocab, const corpus::FrequencyTable& freq, const EvalConfig& cfg) {
  cfg.validate();
  require_aligned(hyps.size(), refs.size());
  MetricsReport r;
  r.bleu = bleu(hyps, refs);
  if (!refs.empty()) {
    r.subsets = subset_report(hyps, refs, corpus::sentence_subsets(refs, vocab, freq, cfg.low_threshold));
  }
  r.buckets = one_gram_prf(hyps, refs, vocab, corpus::frequency_buckets(freq, cfg.bucket_count));
  std::vector<std::string> text;
  for (const auto& h : hyps) text.insert(text.end(), h.begin(), h.end());
  auto guarded = [](auto fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::EmptyText || e.code() == ErrorCode::TextTooShort ||
          e.code() == ErrorCode::UndefinedDiversity) {
        return std::nullopt;
      }
      throw;
    }
  };
  r.mattr = guarded([&] { return mattr(text, cfg.mattr_window); });
  r.hdd = guarded([&] { return hdd(text, cfg.hdd_sample_size); });
  r.mtld = guarded([&] { return mtld(text, cfg.mtld_threshold); });
  return r;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json buckets = nlohmann::json::array();
  for (std::size_t b = 0; b < r.buckets.buckets.size(); ++b) {
    const PRF& p = r.buckets.buckets[b];
    buckets.push_back({{"id", b}, {"recall", p.recall}, {"precision", p.precision}, {"f1", p.f1}});
  }
  const PRF& o = r.buckets.overall;
  return {{"bleu", r.bleu},
          {"subsets",
           {{"high", optional_json(r.subsets.high)},
            {"medium", optional_json(r.subsets.medium)},
            {"low", optional_json(r.subsets.low)}}},
          {"buckets", buckets},
          {"overall", {{"recall", o.recall}, {"precision", o.precision}, {"f1", o.f1}}},
          {"mattr", optional_json(r.mattr)},
          {"hdd", optional_json(r.hdd)},
          {"mtld", optional_json(r.mtld)}};
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string buckets_csv(const BucketedPRF& b) {
  std::ostringstream os;
  os << "bucket,recall,precision,f1,matched,ref_count,hyp_count\n";
  auto row = [&](const std::string& name, const PRF& p) {
    os << name << ',' << format_double(p.recall) << ',' << format_double(p.precision) << ','
       << format_double(p.f1) << ',' << p.matched << ',' << p.ref_count << ',' << p.hyp_count << '\n';
  };
  for (std::size_t i = 0; i < b.buckets.size(); ++i) row(std::to_string(i), b.buckets[i]);
  row("overall", b.overall);
  return os.str();
}

void write_metrics(const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error(ErrorCode::IoError, "cannot write " + p.string());
    os << text;
    if (!os) throw Error(ErrorCode::IoError, "failed writing " + p.string());
  };
  write(dir / "metrics.json", to_json(r).dump(2) + "\n");
  write(dir / "buckets.csv", buckets_csv(r.buckets));
}

}  // namespace fcl::eval
