#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "fcl/decode.hpp"
#include "fcl/error.hpp"
#include "fcl/eval.hpp"
#include "test_util.hpp"

using namespace fcl;
using namespace fcl::eval;
using corpus::Sentence;

namespace {

Sentence words(const std::string& s) {
  Sentence out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t j = s.find(' ', i);
    if (j == std::string::npos) j = s.size();
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j + 1;
  }
  return out;
}

std::vector<Sentence> random_text(std::size_t n, int types, std::uint64_t seed, std::size_t max_len = 8) {
  RngStream rng(seed, RngPurpose::corpus);
  std::vector<Sentence> out(n);
  for (auto& s : out) {
    const std::size_t len = 1 + rng.index(max_len);
    for (std::size_t i = 0; i < len; ++i) s.push_back("t" + std::to_string(rng.index(static_cast<std::uint64_t>(types))));
  }
  return out;
}

std::vector<std::string> flatten(const std::vector<Sentence>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.insert(out.end(), s.begin(), s.end());
  return out;
}

template <class F>
ErrorCode error_of(F f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

// exact binomial for small n
std::uint64_t choose(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace

TEST_CASE("bleu") {
  std::vector<Sentence> ref{words("the cat sat on the mat"), words("a b c d e f")};
  CHECK(bleu(ref, ref) == 100.0);
  CHECK(bleu({words("a b c d")}, {words("a b c d e")}) == doctest::Approx(100.0 * std::exp(1.0 - 5.0 / 4.0)));
  CHECK(std::abs(bleu({words("a b c d")}, {words("a b c d e")}) - 77.88) <= 0.01);
  CHECK(bleu({words("a b c d e")}, {words("a c b e d")}) == 0.0);
  CHECK(error_of([] { bleu({words("a")}, {}); }) == ErrorCode::LengthMismatch);

  auto refs = random_text(40, 6, 1);
  auto hyps = random_text(40, 6, 2);
  std::vector<Sentence> rh(hyps.rbegin(), hyps.rend()), rr(refs.rbegin(), refs.rend());
  CHECK(bleu(hyps, refs) == bleu(rh, rr));
  auto near = refs;
  near[3].push_back("extra");
  CHECK(bleu(near, refs) < 100.0);
}

TEST_CASE("one-gram scores") {
  corpus::Vocabulary v({"a", "b", "c", "d"});
  corpus::FrequencyTable f{{0, 0, 0, 0, 4, 3, 2, 1}};
  auto one = corpus::frequency_buckets(f, 1);
  auto r = one_gram_prf({words("a b d")}, {words("a b c")}, v, one);
  CHECK(r.buckets[0].recall == doctest::Approx(2.0 / 3.0));
  CHECK(r.buckets[0].precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.buckets[0].f1 == doctest::Approx(2.0 / 3.0));

  // identity: every nonempty bucket is perfect
  corpus::Vocabulary big({"t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"});
  corpus::FrequencyTable bf;
  bf.counts = {0, 0, 0, 0, 100, 90, 80, 70, 60, 50, 40, 30, 20, 10};
  auto five = corpus::frequency_buckets(bf, 5);
  auto refs = random_text(50, 12, 3);  // t10, t11 are unknown to the vocabulary
  auto id = one_gram_prf(refs, refs, big, five);
  for (const auto& b : id.buckets) {
    if (b.ref_count > 0) {
      CHECK(b.recall == 1.0);
      CHECK(b.precision == 1.0);
      CHECK(b.f1 == 1.0);
    }
  }

  // naive per-sentence counting oracle
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto h = random_text(30, 12, seed + 10), g = random_text(30, 12, seed + 20);
    auto res = one_gram_prf(h, g, big, five);
    std::vector<double> m(5, 0), rc(5, 0), hc(5, 0);
    for (std::size_t i = 0; i < h.size(); ++i) {
      std::set<std::string> types(h[i].begin(), h[i].end());
      types.insert(g[i].begin(), g[i].end());
      for (const auto& t : types) {
        double ch = 0, cr = 0;
        for (const auto& x : h[i]) ch += x == t;
        for (const auto& x : g[i]) cr += x == t;
        int vid = big.id(t);
        std::size_t b = vid == corpus::kUnk ? 4 : static_cast<std::size_t>(five.bucket_of(vid));
        m[b] += std::min(ch, cr);
        rc[b] += cr;
        hc[b] += ch;
      }
    }
    double mt = 0, rt = 0;
    for (std::size_t b = 0; b < 5; ++b) {
      if (rc[b] > 0) CHECK(std::abs(res.buckets[b].recall - m[b] / rc[b]) <= 1e-12);
      if (hc[b] > 0) CHECK(std::abs(res.buckets[b].precision - m[b] / hc[b]) <= 1e-12);
      mt += res.buckets[b].recall * static_cast<double>(res.buckets[b].ref_count);
      rt += static_cast<double>(res.buckets[b].ref_count);
      CHECK(res.buckets[b].f1 >= 0.0);
      CHECK(res.buckets[b].f1 <= 1.0);
    }
    CHECK(std::abs(mt / rt - res.overall.recall) <= 1e-12);
  }
  CHECK(error_of([&] { one_gram_prf({words("a")}, {}, v, one); }) == ErrorCode::LengthMismatch);
}

TEST_CASE("mattr") {
  CHECK(mattr(words("a b a"), 2) == 1.0);
  CHECK(mattr(words("a a b"), 2) == 0.75);
  CHECK(mattr(words("a a b b"), 10) == 0.5);
  CHECK(error_of([] { mattr({}, 3); }) == ErrorCode::EmptyText);
  auto text = flatten(random_text(200, 30, 4));
  text.resize(1000, "pad");
  for (std::size_t w : {1u, 7u, 50u, 500u, 1000u}) {
    double sum = 0;
    for (std::size_t s = 0; s + w <= text.size(); ++s) {
      std::set<std::string> t(text.begin() + static_cast<std::ptrdiff_t>(s),
                              text.begin() + static_cast<std::ptrdiff_t>(s + w));
      sum += static_cast<double>(t.size()) / static_cast<double>(w);
    }
    CHECK(std::abs(mattr(text, w) - sum / static_cast<double>(text.size() - w + 1)) <= 1e-12);
  }
  std::set<std::string> all(text.begin(), text.end());
  CHECK(mattr(text, text.size()) == static_cast<double>(all.size()) / static_cast<double>(text.size()));
}

TEST_CASE("hdd") {
  std::vector<std::string> distinct;
  for (int i = 0; i < 60; ++i) distinct.push_back("w" + std::to_string(i));
  CHECK(std::abs(hdd(distinct, 42) - 1.0) <= 1e-9);
  std::vector<std::string> same(50, "x");
  CHECK(hdd(same, 42) == doctest::Approx(1.0 / 42.0));
  CHECK(error_of([&] { hdd(same, 51); }) == ErrorCode::TextTooShort);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto text = flatten(random_text(5, 4, seed, 5));
    const std::uint64_t n = text.size();
    for (std::uint64_t s = 1; s <= std::min<std::uint64_t>(n, 6); ++s) {
      std::map<std::string, std::uint64_t> c;
      for (const auto& t : text) ++c[t];
      double expect = 0;
      for (const auto& [t, k] : c) {
        expect += 1.0 - static_cast<double>(choose(n - k, s)) / static_cast<double>(choose(n, s));
      }
      expect /= static_cast<double>(s);
      CHECK(std::abs(hdd(text, s) - expect) <= 1e-9);
      CHECK(hdd(text, s) > 0.0);
      CHECK(hdd(text, s) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("mtld") {
  CHECK(mtld(words("a a a a"), 0.72) == 2.0);
  std::vector<std::string> bigram;
  for (int i = 0; i < 10; ++i) {
    bigram.push_back("a");
    bigram.push_back("b");
  }
  // trace: factor closes at every third token (TTR 2/3), six factors, "a b" remainder has TTR 1
  CHECK(mtld_factors(bigram, 0.72) == 6.0);
  CHECK(mtld(bigram, 0.72) == doctest::Approx(20.0 / 6.0).epsilon(1e-15));
  CHECK(error_of([] { mtld(words("a b c d"), 0.72); }) == ErrorCode::UndefinedDiversity);
  CHECK(error_of([] { mtld({}, 0.72); }) == ErrorCode::EmptyText);
  // "a a" closes a factor; remainder "b c d b" has TTR 3/4 and adds a partial factor
  CHECK(mtld_factors(words("a a b c d b"), 0.72) == doctest::Approx(1.0 + (1.0 - 0.75) / 0.28));
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto text = flatten(random_text(50, 8, seed));
    CHECK(mtld(text, 0.72) >= 1.0);
  }
}

TEST_CASE("subset report") {
  auto refs = random_text(12, 5, 7);
  auto hyps = random_text(12, 5, 8);
  corpus::SubsetPartition all;
  for (std::size_t i = 0; i < 12; ++i) all.low.push_back(i);
  auto r = subset_report(hyps, refs, all);
  CHECK(!r.high);
  CHECK(!r.medium);
  CHECK(*r.low == bleu(hyps, refs));

  corpus::SubsetPartition split;
  for (std::size_t i = 0; i < 12; ++i) (i % 3 == 0 ? split.high : i % 3 == 1 ? split.medium : split.low).push_back(i);
  auto same = subset_report(refs, refs, split);
  CHECK(*same.high == 100.0);
  CHECK(*same.medium == 100.0);
  CHECK(*same.low == 100.0);

  BleuStats parts;
  for (const auto* idx : {&split.high, &split.medium, &split.low}) {
    for (std::size_t i : *idx) parts += bleu_stats(hyps[i], refs[i]);
  }
  CHECK(parts == bleu_stats(hyps, refs));

  auto broken = split;
  broken.low.push_back(0);
  CHECK(error_of([&] { subset_report(hyps, refs, broken); }) == ErrorCode::NotAPartition);
  broken = split;
  broken.low.pop_back();
  CHECK(error_of([&] { subset_report(hyps, refs, broken); }) == ErrorCode::NotAPartition);
}

TEST_CASE("metrics report files") {
  auto refs = random_text(60, 10, 9, 12);
  auto built = corpus::build_vocabulary(refs);
  EvalConfig cfg;
  cfg.low_threshold = 5;
  cfg.hdd_sample_size = 10;
  auto r = evaluate(refs, refs, built.vocab, built.freq, cfg);
  auto j = to_json(r);
  CHECK(j["bleu"] == 100.0);
  for (const auto& b : j["buckets"]) CHECK(b["f1"] == 1.0);
  CHECK(j.contains("mattr"));
  CHECK(j.contains("hdd"));
  CHECK(j.contains("mtld"));
  auto csv = buckets_csv(r.buckets);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 5 + 1);
  cfg.bucket_count = 3;
  auto r3 = evaluate(refs, refs, built.vocab, built.freq, cfg);
  auto j3 = to_json(r3);
  CHECK(j3["buckets"].size() == 3);
  j3["buckets"] = j["buckets"];
  CHECK(j3 == j);
}

TEST_CASE("beam search") {
  auto cfg = fcl::testing::tiny_config(14);
  RngStream init(9, RngPurpose::init);
  auto p = model::init_model(cfg, init);
  auto pairs = fcl::testing::random_pairs(12, 14, 21, 2, 7);
  std::vector<std::vector<int>> sources;
  for (const auto& pr : pairs) sources.push_back(pr.source);
  decode::DecodeConfig one;
  one.beam_size = 1;
  auto greedy = decode::greedy_decode(p, sources, one, 5);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    CHECK(decode::beam_search(p, sources[i], one) == greedy[i]);
  }
  CHECK(decode::translate(p, sources, one) == greedy);
  CHECK(decode::greedy_decode(p, sources, one, 64) == greedy);

  decode::DecodeConfig four;
  for (const auto& s : sources) {
    auto out = decode::beam_search(p, s, four);
    CHECK(out.size() <= decode::max_output_length(s.size(), four));
    for (int t : out) {
      CHECK(t != corpus::kEos);
      CHECK(t != corpus::kPad);
      CHECK(t != corpus::kBos);
    }
  }
  CHECK(decode::beam_search(p, {}, four).empty());
}
