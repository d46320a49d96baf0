#include <catch2/catch_amalgamated.hpp>

#include "cmalign/field.hpp"
#include "cmalign/rng.hpp"
#include "oracles.hpp"

using namespace cmalign;

TEST_CASE("activation_map computes per-position L2 norms") {
  SECTION("all-zero map") {
    FeatureMap f({2, 2, 4});
    SpatialMap m = activation_map(f);
    for (int64_t i = 0; i < m.size(); ++i) REQUIRE(m[i] == 0.0);
  }
  SECTION("unit basis vector at every position") {
    FeatureMap f({2, 3, 5});
    for (int p = 0; p < 6; ++p) f[p * 5 + p % 5] = 1.0;
    SpatialMap m = activation_map(f);
    for (int64_t i = 0; i < m.size(); ++i) REQUIRE(m[i] == 1.0);
  }
  SECTION("3-4-5 triangle") {
    FeatureMap f({1, 2, 2});
    f.at(0, 1, 0) = 3.0;
    f.at(0, 1, 1) = 4.0;
    SpatialMap m = activation_map(f);
    REQUIRE(m.at(0, 0) == 0.0);
    REQUIRE(m.at(0, 1) == 5.0);
  }
  SECTION("invariant to negating a channel") {
    Rng rng(11);
    FeatureMap f = rng.normal_tensor({3, 4, 6});
    FeatureMap g = f;
    for (int p = 0; p < 12; ++p) g[p * 6 + 2] = -g[p * 6 + 2];
    REQUIRE(bitwise_equal(activation_map(f), activation_map(g)));
  }
}

TEST_CASE("minmax_normalize rescales to [0,1]") {
  SECTION("affine rescale") {
    SpatialMap g({1, 3}, {2, 4, 6});
    SpatialMap out = minmax_normalize(g);
    REQUIRE(out[0] == 0.0);
    REQUIRE(out[1] == 0.5);
    REQUIRE(out[2] == 1.0);
  }
  SECTION("already spanning [0,1] is unchanged") {
    SpatialMap g({2, 2}, {0.0, 0.25, 0.75, 1.0});
    REQUIRE(bitwise_equal(minmax_normalize(g), g));
  }
  SECTION("constant map clamps per degenerate rule") {
    for (double c : {-1.5, 0.3, 2.0}) {
      SpatialMap g = Tensor::full({2, 2}, c);
      SpatialMap out = minmax_normalize(g);
      double expect = std::min(std::max(c, 0.0), 1.0);
      for (int64_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == expect);
    }
  }
  SECTION("non-degenerate output attains 0 and 1") {
    Rng rng(3);
    SpatialMap g = rng.normal_tensor({4, 5});
    SpatialMap out = minmax_normalize(g);
    double lo = 2, hi = -1;
    for (int64_t i = 0; i < out.size(); ++i) {
      lo = std::min(lo, out[i]);
      hi = std::max(hi, out[i]);
    }
    REQUIRE(lo == 0.0);
    REQUIRE(hi == 1.0);
  }
}

TEST_CASE("person_mask composes norm and normalization") {
  SECTION("two-level map") {
    FeatureMap f({2, 2, 3});
    f.at(1, 1, 0) = 10.0;
    SpatialMap m = person_mask(f);
    REQUIRE(m.at(1, 1) == 1.0);
    REQUIRE(m.at(0, 0) == 0.0);
    REQUIRE(m.at(0, 1) == 0.0);
    REQUIRE(m.at(1, 0) == 0.0);
  }
  SECTION("matches independent composition on random input") {
    Rng rng(17);
    FeatureMap f = rng.normal_tensor({4, 4, 8});
    SpatialMap expect = oracle::minmax(oracle::activation_map(f));
    REQUIRE(max_abs_diff(person_mask(f), expect) < 1e-12);
  }
  SECTION("invariant to positive global scale") {
    Rng rng(19);
    FeatureMap f = rng.normal_tensor({3, 5, 4});
    FeatureMap g = f;
    for (int64_t i = 0; i < g.size(); ++i) g[i] *= 7.25;  // power of two times odd: exact scaling
    REQUIRE(max_abs_diff(person_mask(f), person_mask(g)) < 1e-12);
  }
}

TEST_CASE("gem_pool generalized mean") {
  SECTION("p = 1 is the spatial mean") {
    Rng rng(23);
    FeatureMap f = rng.uniform_tensor({3, 4, 5}, 0.5, 2.0);
    PersonDescriptor d = gem_pool(f, 1.0);
    for (int c = 0; c < 5; ++c) {
      double mean = 0;
      for (int p = 0; p < 12; ++p) mean += f[p * 5 + c];
      mean /= 12;
      REQUIRE(std::abs(d[c] - mean) < 1e-6);
    }
  }
  SECTION("spatially constant input is a fixed point for any power") {
    FeatureMap f({2, 3, 2});
    for (int p = 0; p < 6; ++p) {
      f[p * 2] = 1.5;
      f[p * 2 + 1] = 0.25;
    }
    for (double pw : {1.0, 2.0, 3.0, 7.0}) {
      PersonDescriptor d = gem_pool(f, pw);
      REQUIRE(std::abs(d[0] - 1.5) < 1e-12);
      REQUIRE(std::abs(d[1] - 0.25) < 1e-12);
    }
  }
  SECTION("single channel {1,4} at power 2") {
    FeatureMap f({1, 2, 1}, {1.0, 4.0});
    PersonDescriptor d = gem_pool(f, 2.0);
    REQUIRE(std::abs(d[0] - 2.915475947422650) < 1e-12);  // sqrt((1+16)/2)
  }
  SECTION("monotone non-decreasing in the power for nonnegative inputs") {
    Rng rng(29);
    FeatureMap f = rng.uniform_tensor({4, 3, 6}, 0.0, 3.0);
    PersonDescriptor prev = gem_pool(f, 1.0);
    for (double pw : {1.5, 2.0, 3.0, 5.0}) {
      PersonDescriptor cur = gem_pool(f, pw);
      for (int c = 0; c < 6; ++c) REQUIRE(cur[c] >= prev[c] - 1e-9);
      prev = cur;
    }
  }
  SECTION("matches the brute-force formula") {
    Rng rng(31);
    FeatureMap f = rng.normal_tensor({3, 3, 4});
    REQUIRE(max_abs_diff(gem_pool(f, 3.0), oracle::gem_pool(f, 3.0)) < 1e-9);
  }
}

TEST_CASE("field ops are deterministic") {
  Rng rng(37);
  FeatureMap f = rng.normal_tensor({5, 4, 7});
  REQUIRE(bitwise_equal(activation_map(f), activation_map(f)));
  REQUIRE(bitwise_equal(person_mask(f), person_mask(f)));
  REQUIRE(bitwise_equal(gem_pool(f, 3.0), gem_pool(f, 3.0)));
}
