#include <cmath>

#include "doctest.h"
#include "fcl/autodiff.hpp"
#include "fcl/error.hpp"
#include "test_util.hpp"

using namespace fcl;
using namespace fcl::ad;
using fcl::testing::random_tensor;

namespace {

void check_code(const std::function<void()>& fn, ErrorCode code) {
  try {
    fn();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == code);
  }
}

}  // namespace

TEST_CASE("matmul values") {
  Tensor m = random_tensor({3, 4}, 1);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  CHECK(matmul(Var::constant(eye), Var::constant(m)).value() == m);

  Var out = matmul(Var::constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
                   Var::constant(Tensor::matrix(2, 1, {1, 1})));
  CHECK(out.value() == Tensor::matrix(2, 1, {3, 7}));

  check_code([] { matmul(Var::constant(Tensor({2, 3})), Var::constant(Tensor({2, 3}))); },
             ErrorCode::ShapeMismatch);
}

TEST_CASE("matmul gradient of sum matches finite differences") {
  Tensor b = random_tensor({5, 2}, 3);
  auto r = grad_check([&](const Var& a) { return sum(matmul(a, Var::constant(b))); },
                      random_tensor({4, 5}, 2));
  CHECK(r.max_rel_error <= 1e-6);
  Tensor a = random_tensor({4, 5}, 4);
  r = grad_check([&](const Var& x) { return sum(matmul(Var::constant(a), x)); }, b);
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("row_softmax") {
  Var p = row_softmax(Var::constant(Tensor::matrix(2, 3, {0, 0, 0, 1000, 0, -1000})));
  CHECK(p.value().at(0, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(p.value().at(0, 2) == doctest::Approx(1.0 / 3.0));
  CHECK(p.value().at(1, 0) == 1.0);
  CHECK(p.value().at(1, 1) < 1e-300);
  CHECK(p.value().all_finite());

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Var q = row_softmax(Var::constant(random_tensor({3, 4}, seed, -1e3, 1e3)));
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(q.value().at(i, j) >= 0.0);
        s += q.value().at(i, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
  Tensor bad = Tensor::matrix(1, 2, {NAN, 0});
  check_code([&] { row_softmax(Var::constant(bad)); }, ErrorCode::NonFinite);
}

TEST_CASE("layer_norm") {
  Var ones = Var::constant(Tensor({2}, 1.0));
  Var zeros = Var::constant(Tensor({2}, 0.0));
  Var c = layer_norm(Var::constant(Tensor::matrix(1, 2, {5, 5})), ones, zeros);
  CHECK(c.value().at(0, 0) == 0.0);
  CHECK(c.value().at(0, 1) == 0.0);
  Var two = layer_norm(Var::constant(Tensor::matrix(1, 2, {1, 3})), ones, zeros);
  CHECK(two.value().at(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(two.value().at(0, 1) == doctest::Approx(1.0).epsilon(1e-5));

  check_code([] {
    layer_norm(Var::constant(Tensor({2, 3})), Var::constant(Tensor({2})), Var::constant(Tensor({3})));
  }, ErrorCode::ShapeMismatch);

  Tensor g = random_tensor({6}, 11, 0.5, 1.5), b = random_tensor({6}, 12);
  Tensor w = random_tensor({4, 6}, 13);
  auto weighted = [&](const Var& y) { return dot_const(y, w); };
  auto r = grad_check([&](const Var& x) {
    return weighted(layer_norm(x, Var::constant(g), Var::constant(b)));
  }, random_tensor({4, 6}, 10));
  CHECK(r.max_rel_error <= 1e-5);
  r = grad_check([&](const Var& gain) {
    return weighted(layer_norm(Var::constant(random_tensor({4, 6}, 10)), gain, Var::constant(b)));
  }, g);
  CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("dropout") {
  Tensor x = random_tensor({10, 10}, 5);
  RngStream s0(1, RngPurpose::dropout_pass1);
  CHECK(dropout(Var::constant(x), 0.0, s0).value() == x);

  RngStream a(7, RngPurpose::dropout_pass1), b(7, RngPurpose::dropout_pass1);
  CHECK(dropout(Var::constant(x), 0.3, a).value() == dropout(Var::constant(x), 0.3, b).value());

  RngStream c(7, RngPurpose::dropout_pass2);
  CHECK(dropout(Var::constant(x), 0.3, c).value() != dropout(Var::constant(x), 0.3, a).value());

  Tensor big({100000}, 1.0);
  RngStream s(42, RngPurpose::dropout_pass1);
  Var y = dropout(Var::constant(big), 0.1, s);
  std::size_t kept = 0;
  for (double v : y.value().data()) {
    if (v != 0.0) {
      ++kept;
      CHECK(v == doctest::Approx(1.0 / 0.9));
    }
  }
  CHECK(std::abs(kept / 1e5 - 0.9) <= 0.01);

  check_code([&] { dropout(Var::constant(x), 1.0, s); }, ErrorCode::InvalidRate);
  check_code([&] { dropout(Var::constant(x), -0.1, s); }, ErrorCode::InvalidRate);
}

TEST_CASE("cosine_sim_matrix") {
  Tensor v = random_tensor({4, 3}, 21);
  Var sim = cosine_sim_matrix(Var::constant(v), Var::constant(v));
  for (std::size_t i = 0; i < 4; ++i) CHECK(sim.value().at(i, i) == doctest::Approx(1.0).epsilon(1e-14));

  Var orth = cosine_sim_matrix(Var::constant(Tensor::matrix(1, 2, {1, 0})),
                               Var::constant(Tensor::matrix(1, 2, {0, 3})));
  CHECK(orth.value()[0] == 0.0);

  try {
    cosine_sim_matrix(Var::constant(Tensor::matrix(3, 2, {1, 0, 0, 0, 1, 1})), Var::constant(v.rows() ? Tensor::matrix(1, 2, {1, 1}) : v));
    FAIL("expected ZeroNormRow");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroNormRow);
    REQUIRE(e.index().has_value());
    CHECK(*e.index() == 1);
  }

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Var m = cosine_sim_matrix(Var::constant(random_tensor({5, 4}, seed)),
                              Var::constant(random_tensor({6, 4}, seed + 100)));
    for (double e : m.value().data()) {
      CHECK(e >= -1.0 - 1e-12);
      CHECK(e <= 1.0 + 1e-12);
    }
  }

  Tensor t = random_tensor({5, 4}, 31), w = random_tensor({3, 5}, 32);
  auto r = grad_check([&](const Var& s) {
    return dot_const(cosine_sim_matrix(s, Var::constant(t)), w);
  }, random_tensor({3, 4}, 30));
  CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("backward") {
  Var x = Var::parameter(random_tensor({3, 2}, 40));
  backward(sum(x));
  Tensor g1 = x.grad();
  for (double g : g1.data()) CHECK(g == 1.0);
  backward(sum(x));
  Tensor g2 = x.grad();
  for (double g : g2.data()) CHECK(g == 2.0);
  x.zero_grad();
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.value()[i]));

  check_code([&] { backward(x); }, ErrorCode::NonScalarLoss);

  // matmul -> layer_norm -> softmax -> weighted sum
  Tensor b = random_tensor({4, 5}, 42), g = random_tensor({5}, 43, 0.5, 1.5);
  Tensor bias = random_tensor({5}, 44), w = random_tensor({3, 5}, 45);
  auto r = grad_check([&](const Var& a) {
    Var h = layer_norm(matmul(a, Var::constant(b)), Var::constant(g), Var::constant(bias));
    return dot_const(row_softmax(h), w);
  }, random_tensor({3, 4}, 41));
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("grad_check on a linear function is exact") {
  auto r = grad_check([](const Var& x) { return sum(x); }, random_tensor({7}, 50));
  CHECK(r.max_rel_error < 1e-9);
}

TEST_CASE("primitive gradients over random instances") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::uint64_t s = 1000 + seed * 17;
    Tensor w35 = random_tensor({3, 5}, s + 1);
    Tensor w3 = random_tensor({3}, s + 2);
    Tensor w33 = random_tensor({3, 3}, s + 3);
    double worst = 0.0;
    auto track = [&](const GradCheckReport& r) { worst = std::max(worst, r.max_rel_error); };

    track(grad_check([&](const Var& x) { return dot_const(row_softmax(x), w35); },
                     random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) { return dot_const(log_softmax(x), w35); },
                     random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) { return dot_const(normalize_rows(x), w35); },
                     random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) {
      return dot_const(row_dot(x, Var::constant(w35)), w3);
    }, random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) {
      return dot_const(matmul_nt(x, Var::constant(w35)), w33);
    }, random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) {
      Tensor weights = random_tensor({3, 5}, s + 4, 0.1, 2.0);
      return dot_const(weighted_logsumexp(x, weights), w3);
    }, random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) {
      return dot_const(add_bias(relu(x), Var::constant(random_tensor({5}, s + 5))), w35);
    }, random_tensor({3, 5}, s)));
    track(grad_check([&](const Var& x) {
      std::vector<int> ids{2, 0, 2};
      return dot_const(embedding(x, ids), w35);
    }, random_tensor({4, 5}, s)));
    track(grad_check([&](const Var& x) {
      std::vector<std::size_t> rows{1, 1, 0};
      return dot_const(gather_rows(x, rows), w35);
    }, random_tensor({2, 5}, s)));
    track(grad_check([&](const Var& x) {
      Var c = concat_cols(x, scale(x, 2.0));
      return sum(mul(c, c));
    }, random_tensor({2, 3}, s)));
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("attention gradients and masking") {
  AttentionLayout layout{2, 3, 4, 2, false, {4, 2}};
  Tensor k = random_tensor({8, 4}, 61), v = random_tensor({8, 4}, 62), w = random_tensor({6, 4}, 63);
  Tensor q = random_tensor({6, 4}, 60);
  auto rq = grad_check([&](const Var& x) {
    return dot_const(attention(x, Var::constant(k), Var::constant(v), layout), w);
  }, q);
  CHECK(rq.max_rel_error <= 1e-5);
  auto rk = grad_check([&](const Var& x) {
    return dot_const(attention(Var::constant(q), x, Var::constant(v), layout), w);
  }, k);
  CHECK(rk.max_rel_error <= 1e-5);
  auto rv = grad_check([&](const Var& x) {
    return dot_const(attention(Var::constant(q), Var::constant(k), x, layout), w);
  }, v);
  CHECK(rv.max_rel_error <= 1e-5);

  // masked keys of batch row 1 have no influence
  Tensor v2 = v;
  for (std::size_t c = 0; c < 4; ++c) {
    v2.at(4 + 2, c) += 5.0;
    v2.at(4 + 3, c) -= 3.0;
  }
  Var a = attention(Var::constant(q), Var::constant(k), Var::constant(v), layout);
  Var b = attention(Var::constant(q), Var::constant(k), Var::constant(v2), layout);
  CHECK(a.value() == b.value());

  // causal: query 0 sees only key 0
  AttentionLayout causal{1, 3, 3, 1, true, {3}};
  Tensor qq = random_tensor({3, 2}, 70), kk = random_tensor({3, 2}, 71), vv = random_tensor({3, 2}, 72);
  Var c = attention(Var::constant(qq), Var::constant(kk), Var::constant(vv), causal);
  CHECK(c.value().at(0, 0) == doctest::Approx(vv.at(0, 0)));
  CHECK(c.value().at(0, 1) == doctest::Approx(vv.at(0, 1)));
}

TEST_CASE("label smoothed cross entropy") {
  std::vector<int> gold{1, 0};
  Tensor perfect = Tensor::matrix(2, 3, {0, 1, 0, 1, 0, 0});
  CHECK(label_smoothed_ce(Var::constant(perfect), gold, 0.0).item() == 0.0);
  Tensor uniform({2, 4}, 0.25);
  CHECK(label_smoothed_ce(Var::constant(uniform), gold, 0.0).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));

  std::vector<int> bad{5, 0};
  check_code([&] { label_smoothed_ce(Var::constant(uniform), bad, 0.1); }, ErrorCode::InvalidGoldId);

  // logits route agrees with the probability route
  Tensor logits = random_tensor({3, 6}, 80, -3, 3);
  std::vector<int> g3{0, 5, 2};
  double via_probs = label_smoothed_ce(row_softmax(Var::constant(logits)), g3, 0.1, 3).item();
  double via_logits = label_smoothed_ce_logits(Var::constant(logits), g3, 0.1, 3).item();
  CHECK(via_probs == doctest::Approx(via_logits).epsilon(1e-13));

  auto r = grad_check([&](const Var& x) { return label_smoothed_ce_logits(x, g3, 0.1, 3); }, logits);
  CHECK(r.max_rel_error <= 1e-5);
  r = grad_check([&](const Var& x) { return label_smoothed_ce(row_softmax(x), g3, 0.1); }, logits);
  CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("rng stream determinism and separation") {
  RngStream a(99, RngPurpose::init), b(99, RngPurpose::init), c(99, RngPurpose::shuffle);
  bool differs = false;
  for (int i = 0; i < 16; ++i) {
    auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
}
