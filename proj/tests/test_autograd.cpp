#include <catch2/catch_amalgamated.hpp>

#include "cmalign/autograd.hpp"
#include "cmalign/rng.hpp"

using namespace cmalign;

namespace {

// Finite-difference sweep for a scalar graph rebuilt by `build` from leaf
// tensors. Returns the max relative error across all leaf coordinates.
double check_gradients(const std::function<int(Tape&, const std::vector<int>&)>& build,
                       std::vector<Tensor> inputs, double step = 1e-4) {
  Tape tape;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(tape.leaf(t));
  int root = build(tape, ids);
  GradientSet gs = tape.backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(ids.size());
  for (int id : ids) analytic.push_back(gs.at(id));
  auto fn = [&](const std::vector<Tensor>& xs) {
    Tape t2;
    std::vector<int> ids2;
    ids2.reserve(xs.size());
    for (const Tensor& t : xs) ids2.push_back(t2.leaf(t));
    return t2.value(build(t2, ids2))[0];
  };
  return finite_diff_check(fn, std::move(inputs), analytic, step);
}

// Reduce a non-scalar node against a fixed random probe so the full Jacobian
// is exercised through one scalar root.
int probe_reduce(Tape& tape, int node, const Tensor& probe) {
  int flat = tape.reshape(node, {static_cast<int>(probe.size())});
  int r = tape.constant(probe.reshaped({static_cast<int>(probe.size())}));
  return tape.sum(tape.mul(flat, r));
}

}  // namespace

TEST_CASE("backward basics") {
  SECTION("sum of squares gives 2x") {
    Tensor x({4}, {1.0, -2.0, 0.5, 3.0});
    Tape tape;
    int xi = tape.leaf(x);
    int root = tape.sum(tape.mul(xi, xi));
    GradientSet gs = tape.backward(root);
    Tensor g = gs.at(xi);
    for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Catch::Approx(2 * x[i]).margin(1e-12));
  }
  SECTION("unused leaf reads back a zero gradient") {
    Tape tape;
    int a = tape.leaf(Tensor({3}, {1, 2, 3}));
    int b = tape.leaf(Tensor({2}, {5, 6}));
    int root = tape.sum(a);
    GradientSet gs = tape.backward(root);
    Tensor gb = gs.at(b);
    REQUIRE(gb.shape() == Shape{2});
    REQUIRE(gb[0] == 0.0);
    REQUIRE(gb[1] == 0.0);
  }
  SECTION("non-scalar root is a usage error") {
    Tape tape;
    int a = tape.leaf(Tensor({3}, {1, 2, 3}));
    try {
      tape.backward(a);
      FAIL("expected usage error");
    } catch (const Error& e) {
      REQUIRE(e.kind() == ErrorKind::usage);
    }
  }
  SECTION("backward is deterministic") {
    Rng rng(5);
    Tape tape;
    int x = tape.leaf(rng.normal_tensor({4, 3}));
    int root = tape.sum(tape.relu(tape.scale(x, 1.7)));
    GradientSet g1 = tape.backward(root);
    GradientSet g2 = tape.backward(root);
    REQUIRE(bitwise_equal(g1.at(x), g2.at(x)));
  }
  SECTION("no gradient flows into constants") {
    Tape tape;
    int c = tape.constant(Tensor({2}, {1, 2}));
    int x = tape.leaf(Tensor({2}, {3, 4}));
    int root = tape.sum(tape.mul(c, x));
    GradientSet gs = tape.backward(root);
    Tensor gx = gs.at(x);
    REQUIRE(gx[0] == 1.0);
    REQUIRE(gx[1] == 2.0);
  }
}

TEST_CASE("elementwise and structural adjoints agree with finite differences") {
  Rng rng(11);
  Tensor probe23 = rng.normal_tensor({2, 3});
  SECTION("add/sub/mul/scale/add_scalar chain") {
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      int s = t.sub(t.add(ids[0], ids[1]), t.scale(t.mul(ids[0], ids[1]), 0.5));
      return probe_reduce(t, t.add_scalar(s, 0.25), probe23);
    };
    REQUIRE(check_gradients(build, {rng.normal_tensor({2, 3}), rng.normal_tensor({2, 3})}) < 1e-6);
  }
  SECTION("add_n") {
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.add_n({ids[0], ids[1], ids[2], ids[0]}), probe23);
    };
    REQUIRE(check_gradients(build, {rng.normal_tensor({2, 3}), rng.normal_tensor({2, 3}),
                                    rng.normal_tensor({2, 3})}) < 1e-6);
  }
  SECTION("reshape, concat_rows, slice_rows") {
    Tensor probe = rng.normal_tensor({3, 2});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      int a = t.reshape(ids[0], {2, 2});
      int b = t.reshape(ids[1], {2, 2});
      int cat = t.concat_rows({a, b});       // 4 x 2
      int sl = t.slice_rows(cat, 1, 3);      // rows 1..3
      return probe_reduce(t, sl, probe);
    };
    REQUIRE(check_gradients(build, {rng.normal_tensor({4}), rng.normal_tensor({2, 2})}) < 1e-6);
  }
  SECTION("relu away from the kink") {
    Tensor x = rng.uniform_tensor({3, 3}, 0.2, 1.5);
    for (int64_t i = 0; i < x.size(); ++i)
      if (i % 2) x[i] = -x[i];  // mixed signs, all |x| >= 0.2
    Tensor probe = rng.normal_tensor({3, 3});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.relu(ids[0]), probe);
    };
    REQUIRE(check_gradients(build, {x}) < 1e-6);
  }
}

TEST_CASE("linear-algebra adjoints agree with finite differences") {
  Rng rng(13);
  SECTION("matmul_nt") {
    Tensor probe = rng.normal_tensor({3, 4});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.matmul_nt(ids[0], ids[1]), probe);
    };
    REQUIRE(check_gradients(build, {rng.normal_tensor({3, 5}), rng.normal_tensor({4, 5})}) < 1e-6);
  }
  SECTION("matmul_nn") {
    Tensor probe = rng.normal_tensor({3, 2});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.matmul_nn(ids[0], ids[1]), probe);
    };
    REQUIRE(check_gradients(build, {rng.normal_tensor({3, 4}), rng.normal_tensor({4, 2})}) < 1e-6);
  }
  SECTION("conv2d stride 1 and 2") {
    for (int stride : {1, 2}) {
      Tensor probe({(5 - 1) / stride + 1, (4 - 1) / stride + 1, 3});
      Rng prng(17 + stride);
      probe = prng.normal_tensor(probe.shape());
      auto build = [&](Tape& t, const std::vector<int>& ids) {
        return probe_reduce(t, t.conv2d(ids[0], ids[1], ids[2], stride), probe);
      };
      REQUIRE(check_gradients(build, {rng.normal_tensor({5, 4, 2}), rng.normal_tensor({3, 3, 2, 3}),
                                      rng.normal_tensor({3})}) < 1e-6);
    }
  }
}

TEST_CASE("normalization adjoints agree with finite differences") {
  Rng rng(19);
  SECTION("rows_normalize") {
    Tensor x = rng.normal_tensor({4, 3});
    Tensor probe = rng.normal_tensor({4, 3});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.rows_normalize(ids[0], 1e-8), probe);
    };
    REQUIRE(check_gradients(build, {x}) < 1e-6);
  }
  SECTION("softmax_rows gradient and row-sum property") {
    Tensor x = rng.uniform_tensor({3, 5}, -1.0, 1.0);
    Tensor probe = rng.normal_tensor({3, 5});
    for (double beta : {1.0, 10.0, 50.0}) {
      auto build = [&](Tape& t, const std::vector<int>& ids) {
        return probe_reduce(t, t.softmax_rows(ids[0], beta), probe);
      };
      REQUIRE(check_gradients(build, {x}) < 1e-4);

      Tape tape;
      int xi = tape.leaf(x);
      int root = probe_reduce(tape, tape.softmax_rows(xi, beta), probe);
      Tensor g = tape.backward(root).at(xi);
      for (int i = 0; i < 3; ++i) {
        double row_sum = 0;
        for (int j = 0; j < 5; ++j) row_sum += g[static_cast<int64_t>(i) * 5 + j];
        REQUIRE(std::abs(row_sum) < 1e-6);  // softmax shift invariance
      }
    }
  }
  SECTION("l2norm_rows away from zero rows") {
    Tensor x = rng.normal_tensor({5, 4});
    Tensor probe = rng.normal_tensor({5});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.l2norm_rows(ids[0]), probe);
    };
    REQUIRE(check_gradients(build, {x}) < 1e-6);
  }
  SECTION("minmax_normalize away from ties") {
    Tensor x({2, 3}, {0.1, 0.9, 0.4, 0.3, 0.65, 0.2});
    Tensor probe = rng.normal_tensor({2, 3});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.minmax_normalize(ids[0]), probe);
    };
    REQUIRE(check_gradients(build, {x}) < 1e-6);
  }
  SECTION("batchnorm_train with extra non-stat rows") {
    Tensor x = rng.normal_tensor({6, 3});
    Tensor gamma = rng.uniform_tensor({3}, 0.5, 1.5);
    Tensor shift = rng.normal_tensor({3});
    Tensor probe = rng.normal_tensor({6, 3});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.batchnorm_train(ids[0], ids[1], ids[2], 4), probe);
    };
    REQUIRE(check_gradients(build, {x, gamma, shift}) < 1e-4);
  }
  SECTION("batchnorm stat rows match a direct computation") {
    Tensor x = rng.normal_tensor({5, 2});
    Tape tape;
    int xi = tape.leaf(x);
    int g = tape.constant(Tensor::full({2}, 1.0));
    int s = tape.constant(Tensor({2}));
    int bn = tape.batchnorm_train(xi, g, s, 3);
    auto [mean, var] = tape.batchnorm_stats(bn);
    for (int c = 0; c < 2; ++c) {
      double m = (x.at(0, c) + x.at(1, c) + x.at(2, c)) / 3;
      REQUIRE(mean[c] == Catch::Approx(m).margin(1e-12));
      double v = 0;
      for (int i = 0; i < 3; ++i) v += (x.at(i, c) - m) * (x.at(i, c) - m);
      REQUIRE(var[c] == Catch::Approx(v / 3).margin(1e-12));
    }
    // rows past the stat range are normalized by the same statistics
    const Tensor& out = tape.value(bn);
    for (int c = 0; c < 2; ++c) {
      double expect = (x.at(4, c) - mean[c]) / std::sqrt(var[c] + 1e-5);
      REQUIRE(out.at(4, c) == Catch::Approx(expect).margin(1e-9));
    }
  }
}

TEST_CASE("pooling and loss adjoints agree with finite differences") {
  Rng rng(23);
  SECTION("gem_pool above the floor") {
    Tensor x = rng.uniform_tensor({6, 4}, 0.1, 2.0);
    Tensor probe = rng.normal_tensor({4});
    for (double p : {1.0, 3.0}) {
      auto build = [&](Tape& t, const std::vector<int>& ids) {
        return probe_reduce(t, t.gem_pool(ids[0], p), probe);
      };
      REQUIRE(check_gradients(build, {x}) < 1e-5);
    }
  }
  SECTION("gem_pool clamped region has zero gradient and matches differences") {
    Tensor x = rng.uniform_tensor({4, 2}, 0.1, 1.0);
    x[0] = -0.5;  // far below the floor on both sides of the step
    Tensor probe = rng.normal_tensor({2});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.gem_pool(ids[0], 3.0), probe);
    };
    REQUIRE(check_gradients(build, {x}) < 1e-5);
    Tape tape;
    int xi = tape.leaf(x);
    int root = probe_reduce(tape, tape.gem_pool(xi, 3.0), probe);
    REQUIRE(tape.backward(root).at(xi)[0] == 0.0);
  }
  SECTION("cross_entropy_mean") {
    Tensor logits = rng.normal_tensor({4, 5});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return t.cross_entropy_mean(ids[0], {1, 0, 4, 2});
    };
    REQUIRE(check_gradients(build, {logits}) < 1e-6);
  }
  SECTION("lerp_rows") {
    Tensor probe = rng.normal_tensor({3, 4});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return probe_reduce(t, t.lerp_rows(ids[0], ids[1], ids[2]), probe);
    };
    REQUIRE(check_gradients(build, {rng.normal_tensor({3, 4}), rng.normal_tensor({3, 4}),
                                    rng.uniform_tensor({3}, 0.1, 0.9)}) < 1e-6);
  }
  SECTION("batch_hard_triplet away from mining ties") {
    // Hand-placed descriptors: distinct pair distances, active hinges.
    Tensor x({4, 2}, {0.0, 0.0, 1.0, 0.3, 0.9, -0.2, 2.0, 1.5});
    auto build = [&](Tape& t, const std::vector<int>& ids) {
      return t.batch_hard_triplet(ids[0], {0, 0, 1, 1}, 0.3);
    };
    REQUIRE(check_gradients(build, {x}) < 1e-5);
  }
  SECTION("dense_hinge with detached attention") {
    Tensor a = rng.uniform_tensor({6}, 0.1, 1.0);
    Tensor dpos = rng.uniform_tensor({6}, 0.5, 2.0);
    Tensor dneg(dpos.shape());
    for (int64_t i = 0; i < dneg.size(); ++i)
      dneg[i] = dpos[i] + (i % 2 ? 1.0 : -1.0) * rng.uniform(0.05, 0.8);  // mixed active/inactive
    for (bool normalize : {false, true}) {
      auto build = [&](Tape& t, const std::vector<int>& ids) {
        return t.dense_hinge(ids[0], ids[1], a, 0.3, normalize);
      };
      REQUIRE(check_gradients(build, {dpos, dneg}) < 1e-6);
    }
  }
}

TEST_CASE("tape forward values match the plain field ops") {
  Rng rng(29);
  FeatureMap f = rng.normal_tensor({3, 4, 5});
  Tape tape;
  int fi = tape.constant(f);
  int flat = tape.reshape(fi, {12, 5});

  SECTION("gem pooling") {
    int pooled = tape.gem_pool(flat, 3.0);
    REQUIRE(bitwise_equal(tape.value(pooled), gem_pool(f, 3.0)));
  }
  SECTION("activation map and person mask") {
    int norms = tape.l2norm_rows(flat);
    REQUIRE(bitwise_equal(tape.value(norms).reshaped({3, 4}), activation_map(f)));
    int mask = tape.minmax_normalize(norms);
    REQUIRE(bitwise_equal(tape.value(mask).reshaped({3, 4}), person_mask(f)));
  }
}

TEST_CASE("finite_diff_check reports near-zero error for linear and constant maps") {
  Rng rng(31);
  Tensor x = rng.normal_tensor({5});
  Tensor w = rng.normal_tensor({5});
  auto linear = [&](const std::vector<Tensor>& xs) {
    double s = 0;
    for (int i = 0; i < 5; ++i) s += w[i] * xs[0][i];
    return s;
  };
  REQUIRE(finite_diff_check(linear, {x}, {w}, 1e-4) < 1e-8);

  auto constant = [](const std::vector<Tensor>&) { return 42.0; };
  REQUIRE(finite_diff_check(constant, {x}, {Tensor({5})}, 1e-4) == 0.0);
}
