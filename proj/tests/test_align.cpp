#include <catch2/catch_amalgamated.hpp>

#include "cmalign/align.hpp"
#include "cmalign/rng.hpp"
#include "oracles.hpp"

using namespace cmalign;

namespace {

// Random stochastic rows built directly (not via matching_probability).
Tensor random_stochastic(Rng& rng, int h, int w) {
  Tensor p({h, w, h, w});
  int n = h * w;
  for (int row = 0; row < n; ++row) {
    double z = 0;
    for (int q = 0; q < n; ++q) {
      p[static_cast<int64_t>(row) * n + q] = rng.uniform(0.01, 1.0);
      z += p[static_cast<int64_t>(row) * n + q];
    }
    for (int q = 0; q < n; ++q) p[static_cast<int64_t>(row) * n + q] /= z;
  }
  return p;
}

}  // namespace

TEST_CASE("cosine_similarity") {
  SECTION("self-similarity diagonal is 1 for unit-norm distinct vectors") {
    FeatureMap f({2, 2, 4});
    for (int p = 0; p < 4; ++p) f[p * 4 + p] = 1.0;  // distinct basis vectors
    SimilarityTensor c = cosine_similarity(f, f);
    int n = 4;
    for (int p = 0; p < n; ++p) {
      REQUIRE(c[static_cast<int64_t>(p) * n + p] == Catch::Approx(1.0).margin(1e-12));
      for (int q = 0; q < n; ++q)
        if (q != p) REQUIRE(c[static_cast<int64_t>(p) * n + q] == Catch::Approx(0.0).margin(1e-12));
    }
  }
  SECTION("45 degree angle") {
    FeatureMap ft({1, 1, 2}, {1.0, 0.0});
    FeatureMap fs({1, 1, 2}, {1.0, 1.0});
    SimilarityTensor c = cosine_similarity(ft, fs);
    REQUIRE(std::abs(c[0] - 0.7071067811865476) < 1e-12);
  }
  SECTION("values stay within [-1, 1] and match the brute-force oracle") {
    Rng rng(41);
    FeatureMap ft = rng.normal_tensor({3, 4, 6});
    FeatureMap fs = rng.normal_tensor({3, 4, 6});
    SimilarityTensor c = cosine_similarity(ft, fs);
    REQUIRE(max_abs_diff(c, oracle::cosine_similarity(ft, fs)) < 1e-9);
    for (int64_t i = 0; i < c.size(); ++i) {
      REQUIRE(c[i] <= 1.0 + 1e-12);
      REQUIRE(c[i] >= -1.0 - 1e-12);
    }
  }
  SECTION("zero vectors give similarity 0, not NaN") {
    FeatureMap ft({1, 2, 3});
    FeatureMap fs({1, 2, 3});
    ft.at(0, 1, 0) = 1.0;
    SimilarityTensor c = cosine_similarity(ft, fs);
    REQUIRE(c.all_finite());
    REQUIRE(c[0] == 0.0);
  }
  SECTION("shape mismatch names both shapes") {
    FeatureMap a({2, 2, 3}), b({2, 3, 3});
    try {
      cosine_similarity(a, b);
      FAIL("expected dimension error");
    } catch (const Error& e) {
      REQUIRE(e.kind() == ErrorKind::dimension);
      std::string msg = e.what();
      REQUIRE(msg.find("(2, 2, 3)") != std::string::npos);
      REQUIRE(msg.find("(2, 3, 3)") != std::string::npos);
    }
  }
}

TEST_CASE("matching_probability") {
  SECTION("single candidate gives probability 1") {
    SimilarityTensor c({1, 1, 1, 1}, {0.37});
    MatchProbability p = matching_probability(c, 50.0);
    REQUIRE(p.values[0] == 1.0);
  }
  SECTION("constant row gives the uniform distribution") {
    SimilarityTensor c = Tensor::full({2, 3, 2, 3}, 0.8);
    MatchProbability p = matching_probability(c, 10.0);
    for (int64_t i = 0; i < p.values.size(); ++i)
      REQUIRE(p.values[i] == Catch::Approx(1.0 / 6).margin(1e-12));
  }
  SECTION("row [1, 0] at temperature 50") {
    SimilarityTensor c({1, 2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
    MatchProbability p = matching_probability(c, 50.0);
    double tail = 1.9287498479639178e-22;  // exp(-50)/(1+exp(-50))
    REQUIRE(std::abs(p.values[0] - (1.0 - tail)) < 1e-15);
    REQUIRE(std::abs(p.values[1] - tail) < 1e-30);
  }
  SECTION("rows sum to 1 with no negative entries across temperatures") {
    Rng rng(43);
    for (double beta : {1.0, 10.0, 50.0}) {
      for (int trial = 0; trial < 20; ++trial) {
        SimilarityTensor c = rng.uniform_tensor({2, 3, 2, 3}, -1.0, 1.0);
        MatchProbability p = matching_probability(c, beta);
        int n = 6;
        for (int row = 0; row < n; ++row) {
          double s = 0;
          for (int q = 0; q < n; ++q) {
            double v = p.values[static_cast<int64_t>(row) * n + q];
            REQUIRE(v >= 0.0);
            s += v;
          }
          REQUIRE(std::abs(s - 1.0) < 1e-6);
        }
      }
    }
  }
  SECTION("invariant to adding a constant to a whole row, bit-compared") {
    Rng rng(47);
    SimilarityTensor c = rng.uniform_tensor({2, 2, 2, 2}, -1.0, 1.0);
    SimilarityTensor shifted = c;
    for (int q = 0; q < 4; ++q) shifted[4 + q] += 0.5;  // shift row p=1
    REQUIRE(bitwise_equal(matching_probability(c, 50.0).values,
                          matching_probability(shifted, 50.0).values));
  }
  SECTION("matches the unstabilized oracle") {
    Rng rng(53);
    SimilarityTensor c = rng.uniform_tensor({2, 2, 2, 2}, -1.0, 1.0);
    for (double beta : {1.0, 10.0, 50.0}) {
      MatchProbability p = matching_probability(c, beta);
      REQUIRE(max_abs_diff(p.values, oracle::matching_probability(c, beta)) < 1e-9);
    }
  }
  SECTION("argmax of P matches argmax of C when the row max is unique") {
    Rng rng(59);
    for (int trial = 0; trial < 25; ++trial) {
      SimilarityTensor c = rng.uniform_tensor({2, 3, 2, 3}, -1.0, 1.0);
      MatchProbability p = matching_probability(c, 50.0);
      int n = 6;
      for (int row = 0; row < n; ++row) {
        int amax_c = 0, amax_p = 0;
        for (int q = 1; q < n; ++q) {
          if (c[static_cast<int64_t>(row) * n + q] > c[static_cast<int64_t>(row) * n + amax_c]) amax_c = q;
          if (p.values[static_cast<int64_t>(row) * n + q] > p.values[static_cast<int64_t>(row) * n + amax_p])
            amax_p = q;
        }
        REQUIRE(amax_c == amax_p);
      }
    }
  }
}

TEST_CASE("soft_warp") {
  SECTION("one-hot rows gather the matched positions") {
    int h = 2, w = 2, n = 4;
    Tensor p({h, w, h, w});
    int perm[4] = {2, 0, 3, 1};
    for (int row = 0; row < n; ++row) p[static_cast<int64_t>(row) * n + perm[row]] = 1.0;
    Rng rng(61);
    FeatureMap f = rng.normal_tensor({h, w, 3});
    Tensor out = soft_warp(MatchProbability{p, 50.0}, f);
    for (int row = 0; row < n; ++row)
      for (int c = 0; c < 3; ++c) REQUIRE(out[row * 3 + c] == f[perm[row] * 3 + c]);
  }
  SECTION("uniform rows average the source") {
    int h = 2, w = 3, n = 6;
    Tensor p = Tensor::full({h, w, h, w}, 1.0 / n);
    Rng rng(67);
    FeatureMap f = rng.normal_tensor({h, w, 4});
    Tensor out = soft_warp(MatchProbability{p, 1.0}, f);
    for (int c = 0; c < 4; ++c) {
      double mean = 0;
      for (int q = 0; q < n; ++q) mean += f[q * 4 + c];
      mean /= n;
      for (int row = 0; row < n; ++row) REQUIRE(out[row * 4 + c] == Catch::Approx(mean).margin(1e-12));
    }
  }
  SECTION("random stochastic rows match the brute-force sum on a 2x1 map") {
    Rng rng(71);
    Tensor p = random_stochastic(rng, 2, 1);
    FeatureMap f = rng.normal_tensor({2, 1, 5});
    Tensor out = soft_warp(MatchProbability{p, 1.0}, f);
    REQUIRE(max_abs_diff(out, oracle::soft_warp(p, f)) < 1e-9);
  }
  SECTION("linear in the source field") {
    Rng rng(73);
    Tensor p = random_stochastic(rng, 2, 3);
    FeatureMap f = rng.normal_tensor({2, 3, 4});
    FeatureMap g = rng.normal_tensor({2, 3, 4});
    double a = 1.7, b = -0.4;
    FeatureMap combo(f.shape());
    for (int64_t i = 0; i < combo.size(); ++i) combo[i] = a * f[i] + b * g[i];
    Tensor lhs = soft_warp(MatchProbability{p, 1.0}, combo);
    Tensor wf = soft_warp(MatchProbability{p, 1.0}, f);
    Tensor wg = soft_warp(MatchProbability{p, 1.0}, g);
    for (int64_t i = 0; i < lhs.size(); ++i)
      REQUIRE(lhs[i] == Catch::Approx(a * wf[i] + b * wg[i]).margin(1e-9));
  }
  SECTION("spatial-map source is treated as one channel") {
    Rng rng(79);
    Tensor p = random_stochastic(rng, 3, 2);
    SpatialMap m = rng.uniform_tensor({3, 2}, 0.0, 1.0);
    Tensor out = soft_warp(MatchProbability{p, 1.0}, m);
    REQUIRE(out.shape() == m.shape());
    REQUIRE(max_abs_diff(out, oracle::soft_warp(p, m)) < 1e-12);
  }
}

TEST_CASE("align blends warped source with target by the mask") {
  Rng rng(83);
  Tensor p = random_stochastic(rng, 2, 2);
  MatchProbability mp{p, 50.0};
  FeatureMap ft = rng.normal_tensor({2, 2, 3});
  FeatureMap fs = rng.normal_tensor({2, 2, 3});

  SECTION("mask of zeros returns the target bit-exactly") {
    SpatialMap m({2, 2});
    REQUIRE(bitwise_equal(align(ft, fs, m, mp), ft));
  }
  SECTION("mask of ones returns the warp bit-exactly") {
    SpatialMap m = Tensor::full({2, 2}, 1.0);
    REQUIRE(bitwise_equal(align(ft, fs, m, mp), soft_warp(mp, fs)));
  }
  SECTION("half mask with uniform rows averages warp and target") {
    Tensor uniform = Tensor::full({2, 2, 2, 2}, 0.25);
    SpatialMap m = Tensor::full({2, 2}, 0.5);
    FeatureMap out = align(ft, fs, m, MatchProbability{uniform, 1.0});
    for (int pos = 0; pos < 4; ++pos)
      for (int c = 0; c < 3; ++c) {
        double mean = 0;
        for (int q = 0; q < 4; ++q) mean += fs[q * 3 + c];
        mean /= 4;
        REQUIRE(out[pos * 3 + c] == Catch::Approx((mean + ft[pos * 3 + c]) / 2).margin(1e-12));
      }
  }
  SECTION("random mask matches the brute-force oracle") {
    SpatialMap m = rng.uniform_tensor({2, 2}, 0.0, 1.0);
    REQUIRE(max_abs_diff(align(ft, fs, m, mp), oracle::align(ft, fs, m, p)) < 1e-9);
  }
}

TEST_CASE("co_attention") {
  Rng rng(89);
  SECTION("all-ones masks stay all-ones through stochastic rows") {
    Tensor p = random_stochastic(rng, 2, 3);
    SpatialMap ones = Tensor::full({2, 3}, 1.0);
    SpatialMap a = co_attention(ones, ones, MatchProbability{p, 1.0});
    for (int64_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == Catch::Approx(1.0).margin(1e-9));
  }
  SECTION("zero target mask annihilates") {
    Tensor p = random_stochastic(rng, 2, 2);
    SpatialMap zeros({2, 2});
    SpatialMap ms = rng.uniform_tensor({2, 2}, 0.0, 1.0);
    SpatialMap a = co_attention(zeros, ms, MatchProbability{p, 1.0});
    for (int64_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == 0.0);
  }
  SECTION("random masks match the brute-force oracle on a 3x3 grid") {
    Tensor p = random_stochastic(rng, 3, 3);
    SpatialMap mt = rng.uniform_tensor({3, 3}, 0.0, 1.0);
    SpatialMap ms = rng.uniform_tensor({3, 3}, 0.0, 1.0);
    SpatialMap a = co_attention(mt, ms, MatchProbability{p, 1.0});
    REQUIRE(max_abs_diff(a, oracle::co_attention(mt, ms, p)) < 1e-9);
    for (int64_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i] >= 0.0);
      REQUIRE(a[i] <= 1.0);
    }
  }
}

TEST_CASE("transpose_similarity swaps the index roles") {
  Rng rng(97);
  FeatureMap ft = rng.normal_tensor({2, 3, 4});
  FeatureMap fs = rng.normal_tensor({2, 3, 4});
  SimilarityTensor c = cosine_similarity(ft, fs);
  SimilarityTensor ct = transpose_similarity(c);
  // The swapped-argument computation produces the same dot products.
  REQUIRE(bitwise_equal(ct, cosine_similarity(fs, ft)));
  REQUIRE(bitwise_equal(transpose_similarity(ct), c));
}
