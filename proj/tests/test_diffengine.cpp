#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "textmesh/diffengine.hpp"
#include "textmesh/rng.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

using textmesh::Rng;
using namespace textmesh::diff;

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-5;

struct Instance {
  ParamVector params;
  Program program;
};

// Relative error with a unit floor so near-zero entries compare absolutely.
double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

void check_fd_matches(const Instance& inst, const char* label) {
  GradResult ad = value_and_grad(inst.program, inst.params);
  std::vector<double> fd = finite_difference_gradient(inst.program, inst.params, kFdStep);
  REQUIRE(ad.gradient.size() == fd.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, rel_err(ad.gradient[i], fd[i]));
  INFO(label << ": worst relative gradient error " << worst);
  CHECK(worst <= kFdTol);
}

std::vector<double> random_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

ParamVector make_params(Rng& rng, std::initializer_list<std::pair<const char*, std::size_t>> segs,
                        double lo = -2.0, double hi = 2.0) {
  ParamVector pv;
  for (const auto& [name, size] : segs) {
    pv.add_segment(name, size);
    auto span = pv.segment(name);
    for (auto& x : span) x = rng.uniform(lo, hi);
  }
  return pv;
}

// One FD-checkable instance generator per registered primitive. The key set
// must stay in sync with registered_primitives(); a dedicated test enforces
// that, so adding an op without an oracle here fails loudly.
std::map<std::string, std::function<Instance(Rng&)>> primitive_generators() {
  std::map<std::string, std::function<Instance(Rng&)>> gen;

  gen["param"] = [](Rng& rng) {
    auto pv = make_params(rng, {{"x", 5}});
    return Instance{std::move(pv), [](Tape& t) { return t.sum(t.param("x")); }};
  };
  gen["constant"] = [](Rng& rng) {
    auto pv = make_params(rng, {{"x", 4}});
    auto c = random_values(rng, 4, -2.0, 2.0);
    return Instance{std::move(pv),
                    [c](Tape& t) { return t.sum(t.mul(t.param("x"), t.constant(c))); }};
  };
  gen["affine"] = [](Rng& rng) {
    const std::size_t r = 1 + rng.below(3), k = 1 + rng.below(4), c = 1 + rng.below(4);
    auto pv = make_params(rng, {{"x", r * k}, {"w", k * c}, {"b", c}});
    return Instance{std::move(pv), [r, k, c](Tape& t) {
                      return t.sum(t.affine(t.param("x"), t.param("w"), t.param("b"), r, k, c));
                    }};
  };
  auto pointwise_gen = [](const char* name, Node (Tape::*op)(Node), double lo, double hi) {
    return [name, op, lo, hi](Rng& rng) {
      auto pv = make_params(rng, {{"x", 6}}, lo, hi);
      (void)name;
      return Instance{std::move(pv), [op](Tape& t) { return t.sum((t.*op)(t.param("x"))); }};
    };
  };
  gen["exp"] = pointwise_gen("exp", &Tape::exp, -2.0, 2.0);
  gen["sin"] = pointwise_gen("sin", &Tape::sin, -3.0, 3.0);
  gen["cos"] = pointwise_gen("cos", &Tape::cos, -3.0, 3.0);
  gen["sigmoid"] = pointwise_gen("sigmoid", &Tape::sigmoid, -4.0, 4.0);
  gen["softplus"] = pointwise_gen("softplus", &Tape::softplus, -4.0, 4.0);
  gen["sqrt"] = pointwise_gen("sqrt", &Tape::sqrt, 0.2, 4.0);

  auto binary_gen = [](Node (Tape::*op)(Node, Node), bool avoid_zero_b) {
    return [op, avoid_zero_b](Rng& rng) {
      // Cycle through shapes: matched, scalar lhs, scalar rhs.
      const int mode = static_cast<int>(rng.below(3));
      const std::size_t na = mode == 1 ? 1 : 5;
      const std::size_t nb = mode == 2 ? 1 : 5;
      ParamVector pv;
      pv.add_segment("a", na);
      pv.add_segment("b", nb);
      for (auto& x : pv.segment("a")) x = rng.uniform(-2.0, 2.0);
      for (auto& x : pv.segment("b")) {
        x = rng.uniform(0.5, 2.0) * (rng.uniform() < 0.5 && !avoid_zero_b ? -1.0 : 1.0);
        if (avoid_zero_b && rng.uniform() < 0.5) x = -x;  // sign ok, magnitude >= 0.5
      }
      return Instance{std::move(pv),
                      [op](Tape& t) { return t.sum((t.*op)(t.param("a"), t.param("b"))); }};
    };
  };
  gen["add"] = binary_gen(&Tape::add, false);
  gen["sub"] = binary_gen(&Tape::sub, false);
  gen["mul"] = binary_gen(&Tape::mul, false);
  gen["div"] = binary_gen(&Tape::div, true);

  gen["affine_scalar"] = [](Rng& rng) {
    auto pv = make_params(rng, {{"x", 5}});
    const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-1.0, 1.0);
    return Instance{std::move(pv),
                    [a, b](Tape& t) { return t.sum(t.affine_scalar(t.param("x"), a, b)); }};
  };
  gen["cumsum_rows"] = [](Rng& rng) {
    const std::size_t r = 1 + rng.below(3), c = 1 + rng.below(5);
    auto pv = make_params(rng, {{"x", r * c}});
    // Weight entries unevenly so errors in the prefix structure show up.
    auto w = random_values(rng, r * c, -1.0, 1.0);
    return Instance{std::move(pv), [r, c, w](Tape& t) {
                      return t.sum(t.mul(t.cumsum_rows(t.param("x"), r, c), t.constant(w)));
                    }};
  };
  gen["row_sum"] = [](Rng& rng) {
    const std::size_t r = 1 + rng.below(3), c = 1 + rng.below(5);
    auto pv = make_params(rng, {{"x", r * c}});
    auto w = random_values(rng, r, -1.0, 1.0);
    return Instance{std::move(pv), [r, c, w](Tape& t) {
                      return t.sum(t.mul(t.row_sum(t.param("x"), r, c), t.constant(w)));
                    }};
  };
  gen["col"] = [](Rng& rng) {
    const std::size_t r = 1 + rng.below(3), c = 1 + rng.below(4);
    const std::size_t j = rng.below(c);
    auto pv = make_params(rng, {{"x", r * c}});
    return Instance{std::move(pv),
                    [r, c, j](Tape& t) { return t.sum(t.col(t.param("x"), r, c, j)); }};
  };
  gen["sum"] = [](Rng& rng) {
    auto pv = make_params(rng, {{"x", 7}});
    return Instance{std::move(pv), [](Tape& t) {
                      Node s = t.sum(t.param("x"));
                      return t.mul(s, s);  // non-trivial downstream use
                    }};
  };
  gen["psi"] = [](Rng& rng) {
    ParamVector pv;
    pv.add_segment("u", 6);
    pv.add_segment("beta", 1);
    for (auto& x : pv.segment("u")) {
      x = rng.uniform(-1.5, 1.5);
      if (std::abs(x) < 1e-3) x = 1e-3;  // keep FD away from the C1 kink
    }
    pv.segment("beta")[0] = rng.uniform(0.05, 0.5);
    return Instance{std::move(pv),
                    [](Tape& t) { return t.sum(t.psi(t.param("u"), t.param("beta"))); }};
  };
  gen["clamp_min"] = [](Rng& rng) {
    ParamVector pv;
    pv.add_segment("x", 6);
    for (auto& x : pv.segment("x")) {
      x = rng.uniform(-2.0, 2.0);
      if (std::abs(x) < 1e-2) x = 1e-2;  // keep FD away from the hinge at 0
    }
    return Instance{std::move(pv),
                    [](Tape& t) { return t.sum(t.clamp_min(t.param("x"), 0.0)); }};
  };
  gen["sparse_linear"] = [](Rng& rng) {
    const std::size_t rows = 1 + rng.below(4), cols = 2 + rng.below(5);
    SparseMap map;
    map.rows = rows;
    map.cols = cols;
    map.row_ptr.push_back(0);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t nnz = rng.below(3);  // rows may be empty
      for (std::size_t e = 0; e < nnz; ++e) {
        map.col_idx.push_back(static_cast<std::uint32_t>(rng.below(cols)));
        map.weight.push_back(rng.uniform(-1.0, 1.0));
      }
      map.row_ptr.push_back(static_cast<std::uint32_t>(map.col_idx.size()));
    }
    auto pv = make_params(rng, {{"x", cols}});
    return Instance{std::move(pv),
                    [map](Tape& t) { return t.sum(t.sparse_linear(map, t.param("x"))); }};
  };
  return gen;
}

}  // namespace

TEST_CASE("every registered primitive has a generator and matches finite differences") {
  auto gens = primitive_generators();
  std::set<std::string> registered;
  for (const auto& name : registered_primitives()) registered.insert(name);
  std::set<std::string> covered;
  for (const auto& [name, _] : gens) covered.insert(name);
  REQUIRE(registered == covered);

  Rng rng(0x5eedbeef);
  for (const auto& [name, gen] : gens) {
    for (int trial = 0; trial < 100; ++trial) {
      Instance inst = gen(rng);
      check_fd_matches(inst, name.c_str());
    }
  }
}

TEST_CASE("two-layer mlp gradient matches a hand-derived oracle") {
  const std::size_t n_in = 3, n_hidden = 8;
  Rng rng(42);
  ParamVector pv;
  pv.add_segment("w1", n_in * n_hidden);
  pv.add_segment("b1", n_hidden);
  pv.add_segment("w2", n_hidden);
  pv.add_segment("b2", 1);
  for (auto& x : pv.values()) x = rng.uniform(-0.7, 0.7);
  const std::vector<double> input = {0.3, -0.8, 1.1};

  Program program = [&](Tape& t) {
    Node x = t.constant(input);
    Node h = t.softplus(t.affine(x, t.param("w1"), t.param("b1"), 1, n_in, n_hidden));
    Node y = t.affine(h, t.param("w2"), t.param("b2"), 1, n_hidden, 1);
    return y;
  };
  GradResult got = value_and_grad(program, pv);

  // Oracle: independent forward + manual chain rule, no tape involved.
  auto w1 = pv.segment("w1");
  auto b1 = pv.segment("b1");
  auto w2 = pv.segment("w2");
  auto b2 = pv.segment("b2");
  std::vector<double> pre(n_hidden, 0.0), act(n_hidden, 0.0);
  for (std::size_t j = 0; j < n_hidden; ++j) {
    double s = b1[j];
    for (std::size_t i = 0; i < n_in; ++i) s += input[i] * w1[i * n_hidden + j];
    pre[j] = s;
    act[j] = s > 30.0 ? s : std::log1p(std::exp(s));
  }
  double y = b2[0];
  for (std::size_t j = 0; j < n_hidden; ++j) y += act[j] * w2[j];
  CHECK(got.value == doctest::Approx(y).epsilon(1e-12));

  std::vector<double> want(pv.size(), 0.0);
  auto seg = [&](const char* name) { return pv.segment_info(name).offset; };
  want[seg("b2")] = 1.0;
  for (std::size_t j = 0; j < n_hidden; ++j) {
    want[seg("w2") + j] = act[j];
    const double dact = 1.0 / (1.0 + std::exp(-pre[j]));
    const double dpre = w2[j] * dact;
    want[seg("b1") + j] = dpre;
    for (std::size_t i = 0; i < n_in; ++i) want[seg("w1") + i * n_hidden + j] = dpre * input[i];
  }
  for (std::size_t i = 0; i < pv.size(); ++i) {
    CHECK(got.gradient[i] == doctest::Approx(want[i]).epsilon(1e-10));
  }
}

TEST_CASE("value_and_grad is bitwise deterministic") {
  Rng rng(7);
  auto gens = primitive_generators();
  Instance inst = gens["affine"](rng);
  GradResult a = value_and_grad(inst.program, inst.params);
  GradResult b = value_and_grad(inst.program, inst.params);
  CHECK(std::memcmp(&a.value, &b.value, sizeof(double)) == 0);
  REQUIRE(a.gradient.size() == b.gradient.size());
  CHECK(std::memcmp(a.gradient.data(), b.gradient.data(),
                    a.gradient.size() * sizeof(double)) == 0);
}

TEST_CASE("gradients accumulate across independent tapes like one big program") {
  // Chunked evaluation pattern: grad(f1) + grad(f2) == grad(f1 + f2).
  Rng rng(11);
  auto pv = make_params(rng, {{"x", 6}});
  Program f1 = [](Tape& t) { return t.sum(t.sin(t.param("x"))); };
  Program f2 = [](Tape& t) { return t.sum(t.mul(t.param("x"), t.param("x"))); };
  Program f12 = [&](Tape& t) { return t.add(f1(t), f2(t)); };
  GradResult g1 = value_and_grad(f1, pv);
  GradResult g2 = value_and_grad(f2, pv);
  GradResult g12 = value_and_grad(f12, pv);
  CHECK(g12.value == doctest::Approx(g1.value + g2.value).epsilon(1e-14));
  for (std::size_t i = 0; i < pv.size(); ++i) {
    CHECK(g12.gradient[i] == doctest::Approx(g1.gradient[i] + g2.gradient[i]).epsilon(1e-12));
  }
}

TEST_CASE("parameter segments must partition the flat array exactly") {
  std::vector<double> vals(10, 0.0);
  CHECK_NOTHROW(ParamVector::from_parts({{"a", 0, 4}, {"b", 4, 6}}, vals));
  // Gap between segments.
  CHECK_THROWS_AS(ParamVector::from_parts({{"a", 0, 4}, {"b", 5, 5}}, vals), TapeError);
  // Overlap.
  CHECK_THROWS_AS(ParamVector::from_parts({{"a", 0, 6}, {"b", 4, 6}}, vals), TapeError);
  // Not covering the tail.
  CHECK_THROWS_AS(ParamVector::from_parts({{"a", 0, 4}, {"b", 4, 4}}, vals), TapeError);
  // Duplicate names.
  CHECK_THROWS_AS(ParamVector::from_parts({{"a", 0, 4}, {"a", 4, 6}}, vals), TapeError);
  ParamVector pv;
  pv.add_segment("a", 3);
  CHECK_THROWS_AS(pv.add_segment("a", 2), TapeError);
  CHECK_THROWS_AS(pv.segment("missing"), TapeError);
}

TEST_CASE("non-finite values raise errors naming the primitive and segments") {
  ParamVector pv;
  pv.add_segment("weights", 2);
  pv.segment("weights")[0] = 1.0;
  pv.segment("weights")[1] = 0.0;

  Program bad = [](Tape& t) {
    Node w = t.param("weights");
    Node num = t.col(w, 1, 2, 0);
    Node den = t.col(w, 1, 2, 1);
    return t.div(num, den);  // 1/0 -> inf
  };
  bool threw = false;
  try {
    value_and_grad(bad, pv);
  } catch (const TapeError& e) {
    threw = true;
    const std::string msg = e.what();
    CHECK(msg.find("div") != std::string::npos);
    CHECK(msg.find("weights") != std::string::npos);
  }
  CHECK(threw);

  Program bad_sqrt = [](Tape& t) { return t.sum(t.sqrt(t.affine_scalar(t.param("weights"), 1.0, -5.0))); };
  CHECK_THROWS_AS(value_and_grad(bad_sqrt, pv), TapeError);
}

TEST_CASE("tape lifecycle guards") {
  ParamVector pv;
  pv.add_segment("x", 3);
  for (auto& v : pv.segment("x")) v = 0.5;

  Tape t(pv);
  Node x = t.param("x");
  Node y = t.sum(t.sin(x));
  CHECK(t.value(y).size() == 1);
  GradResult g = t.backward(y);
  CHECK(g.gradient.size() == 3);
  CHECK_THROWS_AS(t.backward(y), TapeError);   // backward only once
  CHECK_THROWS_AS((void)t.value(y), TapeError);  // values released

  Tape t2(pv);
  Node x2 = t2.param("x");
  CHECK_THROWS_AS((void)t2.backward(x2), TapeError);  // non-scalar output
}

TEST_CASE("sparse_linear matches a dense matrix product") {
  Rng rng(99);
  const std::size_t rows = 5, cols = 7;
  std::vector<double> dense(rows * cols, 0.0);
  SparseMap map;
  map.rows = rows;
  map.cols = cols;
  map.row_ptr.push_back(0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (rng.uniform() < 0.4) {
        const double w = rng.uniform(-1.0, 1.0);
        dense[i * cols + j] = w;
        map.col_idx.push_back(static_cast<std::uint32_t>(j));
        map.weight.push_back(w);
      }
    }
    map.row_ptr.push_back(static_cast<std::uint32_t>(map.col_idx.size()));
  }
  auto pv = make_params(rng, {{"x", cols}});
  Tape t(pv);
  Node out = t.sparse_linear(map, t.param("x"));
  auto got = t.value(out);
  auto x = pv.segment("x");
  for (std::size_t i = 0; i < rows; ++i) {
    double want = 0.0;
    for (std::size_t j = 0; j < cols; ++j) want += dense[i * cols + j] * x[j];
    CHECK(got[i] == doctest::Approx(want).epsilon(1e-12));
  }
}
