#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fcl/corpus.hpp"
#include "fcl/error.hpp"

using namespace fcl;
using namespace fcl::corpus;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fcl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Sentence words(const std::string& s) {
  std::istringstream is(s);
  Sentence out;
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

}  // namespace

TEST_CASE("identity mapping copies the source") {
  ZipfCorpusConfig cfg;
  cfg.pair_count = 50;
  cfg.mapping_rule = MappingRule::bijective_map_identity;
  cfg.permute_tokens = false;
  auto c = generate_zipf_corpus(cfg);
  REQUIRE(c.size() == 50);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.source[i] == c.target[i]);
}

TEST_CASE("reverse mapping is a reversed bijection") {
  ZipfCorpusConfig cfg;
  cfg.pair_count = 300;
  auto c = generate_zipf_corpus(cfg);
  std::map<std::string, std::string> sigma;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& s = c.source[i];
    const auto& t = c.target[i];
    REQUIRE(s.size() == t.size());
    CHECK(s.size() >= 4);
    CHECK(s.size() <= 12);
    for (std::size_t j = 0; j < s.size(); ++j) {
      auto [it, fresh] = sigma.emplace(s[j], t[t.size() - 1 - j]);
      CHECK(it->second == t[t.size() - 1 - j]);
    }
  }
  std::set<std::string> images;
  for (auto& [k, v] : sigma) images.insert(v);
  CHECK(images.size() == sigma.size());
}

TEST_CASE("zipf frequencies follow the rank law") {
  ZipfCorpusConfig cfg;
  cfg.vocab_size = 200;
  cfg.zipf_exponent = 1.1;
  cfg.pair_count = 10000;
  auto c = generate_zipf_corpus(cfg);
  std::map<std::string, double> counts;
  for (const auto& s : c.source) {
    for (const auto& t : s) counts[t] += 1.0;
  }
  // source token names are w<rank> with rank 0 the most frequent
  const double ratio = counts["w0"] / counts["w99"];
  const double expected = std::pow(100.0, 1.1);
  CHECK(ratio > expected / 2.0);
  CHECK(ratio < expected * 2.0);
}

TEST_CASE("corpus generation is deterministic and validated") {
  ZipfCorpusConfig cfg;
  cfg.pair_count = 200;
  auto dir = temp_dir("corpus_det");
  write_corpus(dir / "a", generate_zipf_corpus(cfg));
  write_corpus(dir / "b", generate_zipf_corpus(cfg));
  CHECK(slurp(dir / "a.src") == slurp(dir / "b.src"));
  CHECK(slurp(dir / "a.tgt") == slurp(dir / "b.tgt"));
  CHECK(read_corpus(dir / "a") == generate_zipf_corpus(cfg));

  ZipfCorpusConfig bad = cfg;
  bad.vocab_size = 5;
  CHECK_THROWS_AS(generate_zipf_corpus(bad), Error);
  bad = cfg;
  bad.min_len = 7;
  bad.max_len = 3;
  CHECK_THROWS_AS(generate_zipf_corpus(bad), Error);
}

TEST_CASE("vocabulary counts and ids") {
  auto vb = build_vocabulary({words("a a b")});
  CHECK(vb.freq.count(vb.vocab.id("a")) == 2);
  CHECK(vb.freq.count(vb.vocab.id("b")) == 1);
  CHECK(vb.vocab.id("a") == kNumReserved);
  CHECK(vb.vocab.id("zzz") == kUnk);
  CHECK(vb.vocab.encode(words("a zzz"))[1] == kUnk);
  CHECK_THROWS_AS(build_vocabulary({}), Error);

  ZipfCorpusConfig cfg;
  cfg.pair_count = 500;
  auto c = generate_zipf_corpus(cfg);
  auto tv = build_vocabulary(c.target);
  std::int64_t total = 0, tally = 0;
  for (std::size_t i = kNumReserved; i < tv.vocab.size(); ++i) total += tv.freq.count(static_cast<int>(i));
  for (const auto& s : c.target) tally += static_cast<std::int64_t>(s.size());
  CHECK(total == tally);
  CHECK(tv.freq.count(kEos) == 500);
  for (std::size_t i = kNumReserved + 1; i < tv.vocab.size(); ++i) {
    CHECK(tv.freq.count(static_cast<int>(i - 1)) >= tv.freq.count(static_cast<int>(i)));
  }
  // encode/decode round trip over in-vocabulary ids
  std::vector<int> ids;
  for (std::size_t i = kNumReserved; i < tv.vocab.size(); ++i) ids.push_back(static_cast<int>(i));
  CHECK(tv.vocab.encode(tv.vocab.decode(ids)) == ids);

  auto dir = temp_dir("vocab");
  write_vocabulary(dir / "v.tsv", tv.vocab, tv.freq);
  auto back = read_vocabulary(dir / "v.tsv");
  CHECK(back.vocab == tv.vocab);
  CHECK(back.freq.count(kEos) == 0);
  CHECK(slurp(dir / "v.tsv").rfind("<pad>\t0\n<bos>\t0\n<eos>\t0\n<unk>\t0\n", 0) == 0);
}

TEST_CASE("frequency buckets") {
  FrequencyTable f;
  f.counts = {0, 0, 0, 0};
  for (int i = 0; i < 10; ++i) f.counts.push_back(100 - i);
  auto b = frequency_buckets(f, 5);
  for (const auto& m : b.members) CHECK(m.size() == 2);

  f.counts.push_back(1);
  b = frequency_buckets(f, 5);
  CHECK(b.members[0].size() == 3);
  for (int k = 1; k < 5; ++k) CHECK(b.members[static_cast<std::size_t>(k)].size() == 2);
  CHECK(b.bucket_of(kEos) == 4);
  CHECK(b.bucket_of(9999) == 4);

  auto three = frequency_buckets(f, 3);
  CHECK(three.members.size() == 3);

  CHECK_THROWS_AS(frequency_buckets(f, 12), Error);

  // partition and monotonicity on a corpus-derived table
  ZipfCorpusConfig cfg;
  cfg.pair_count = 800;
  auto tv = build_vocabulary(generate_zipf_corpus(cfg).target);
  auto bb = frequency_buckets(tv.freq, 5);
  std::set<int> seen;
  for (std::size_t k = 0; k < bb.members.size(); ++k) {
    for (int id : bb.members[k]) CHECK(seen.insert(id).second);
    if (k + 1 < bb.members.size()) {
      std::int64_t mn = INT64_MAX, mx = 0;
      for (int id : bb.members[k]) mn = std::min(mn, tv.freq.count(id));
      for (int id : bb.members[k + 1]) mx = std::max(mx, tv.freq.count(id));
      CHECK(mn >= mx);
    }
  }
  CHECK(seen.size() == tv.vocab.content_size());
}

TEST_CASE("batching") {
  ZipfCorpusConfig cfg;
  cfg.pair_count = 1;
  auto c = generate_zipf_corpus(cfg);
  auto sv = build_vocabulary(c.source), tv = build_vocabulary(c.target);
  auto pairs = encode_corpus(c, sv.vocab, tv.vocab);
  RngStream s(1, RngPurpose::shuffle);
  auto single = batch_epoch(pairs, 100000, s);
  REQUIRE(single.size() == 1);
  CHECK(single[0].target_tokens() == c.target[0].size() + 1);
  CHECK(single[0].tgt_in[0] == kBos);
  CHECK(single[0].tgt_out[c.target[0].size()] == kEos);

  cfg.pair_count = 700;
  c = generate_zipf_corpus(cfg);
  sv = build_vocabulary(c.source);
  tv = build_vocabulary(c.target);
  pairs = encode_corpus(c, sv.vocab, tv.vocab);
  RngStream s1(5, RngPurpose::shuffle), s2(5, RngPurpose::shuffle);
  auto e1 = batch_epoch(pairs, 200, s1);
  auto e2 = batch_epoch(pairs, 200, s2);
  REQUIRE(e1.size() == e2.size());
  std::size_t tokens = 0;
  std::multiset<std::size_t> ids;
  for (std::size_t i = 0; i < e1.size(); ++i) {
    CHECK(e1[i].sentence_ids == e2[i].sentence_ids);
    CHECK(e1[i].batch_size * e1[i].tgt_len <= 200);
    std::size_t mask = 0;
    for (auto m : e1[i].target_mask()) mask += m;
    CHECK(mask == e1[i].target_tokens());
    tokens += mask;
    ids.insert(e1[i].sentence_ids.begin(), e1[i].sentence_ids.end());
  }
  std::size_t expected = 0;
  for (const auto& t : c.target) expected += t.size() + 1;
  CHECK(tokens == expected);
  CHECK(ids.size() == 700);
  CHECK(std::set<std::size_t>(ids.begin(), ids.end()).size() == 700);

  RngStream s3(5, RngPurpose::shuffle);
  CHECK_THROWS_AS(batch_epoch(pairs, 8, s3), Error);
}

TEST_CASE("sentence subsets") {
  auto vb = build_vocabulary({words("f f f f f f f f r")});
  // f has count 8, r has count 1
  auto p = sentence_subsets({words("r r"), words("f f"), words("f r")}, vb.vocab, vb.freq, 2);
  CHECK(p.low == std::vector<std::size_t>{0});
  CHECK(p.high == std::vector<std::size_t>{1});
  CHECK(p.medium == std::vector<std::size_t>{2});

  auto same = sentence_subsets({words("f"), words("f"), words("f"), words("f")}, vb.vocab, vb.freq, 2);
  CHECK(same.low == std::vector<std::size_t>{0, 1});
  CHECK(same.medium == std::vector<std::size_t>{2});
  CHECK(same.high == std::vector<std::size_t>{3});

  ZipfCorpusConfig cfg;
  cfg.pair_count = 100;
  auto c = generate_zipf_corpus(cfg);
  auto tv = build_vocabulary(c.target);
  auto q = sentence_subsets(c.target, tv.vocab, tv.freq, 5);
  std::size_t lo = std::min({q.low.size(), q.medium.size(), q.high.size()});
  std::size_t hi = std::max({q.low.size(), q.medium.size(), q.high.size()});
  CHECK(hi - lo <= 1);
  CHECK(q.low.size() + q.medium.size() + q.high.size() == 100);

  CHECK_THROWS_AS(sentence_subsets({}, vb.vocab, vb.freq, 2), Error);
}
