#pragma once

#include <cmath>

#include "cmalign/field.hpp"

namespace cmalign {

// Dense cross-modal correspondence. C and P are materialized as h x w x h x w
// tensors indexed (p, q): p ranges over the target map, q over the source.
// Desk-scale maps stay small enough that the dense form is cheap and directly
// comparable against brute-force oracles.
using SimilarityTensor = Tensor;

struct MatchProbability {
  Tensor values;  // h x w x h x w, rows over q sum to 1
  double beta = 0;
};

// Norms are floored here when normalizing position vectors for cosine
// similarity, so zero features yield similarity 0 instead of NaN.
inline constexpr double kCosineEps = 1e-8;

inline void require_same_grid(const Tensor& a, const Tensor& b, const char* what) {
  require(a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1), ErrorKind::dimension, what,
          ": incompatible grids ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

inline SimilarityTensor cosine_similarity(const FeatureMap& f_tgt, const FeatureMap& f_src) {
  require_feature_map(f_tgt, "cosine_similarity target");
  require_feature_map(f_src, "cosine_similarity source");
  require(f_tgt.shape() == f_src.shape(), ErrorKind::dimension, "cosine_similarity: shape mismatch ",
          shape_str(f_tgt.shape()), " vs ", shape_str(f_src.shape()));
  int h = f_tgt.dim(0), w = f_tgt.dim(1), d = f_tgt.dim(2);
  int n = h * w;
  auto unit_rows = [&](const FeatureMap& f) {
    Tensor u(f.shape());
    for (int p = 0; p < n; ++p) {
      const double* v = f.data() + static_cast<int64_t>(p) * d;
      double s = 0;
      for (int c = 0; c < d; ++c) s += v[c] * v[c];
      double inv = 1.0 / std::max(std::sqrt(s), kCosineEps);
      for (int c = 0; c < d; ++c) u[static_cast<int64_t>(p) * d + c] = v[c] * inv;
    }
    return u;
  };
  Tensor ut = unit_rows(f_tgt), us = unit_rows(f_src);
  SimilarityTensor out({h, w, h, w});
  for (int p = 0; p < n; ++p) {
    const double* a = ut.data() + static_cast<int64_t>(p) * d;
    for (int q = 0; q < n; ++q) {
      const double* b = us.data() + static_cast<int64_t>(q) * d;
      double s = 0;
      for (int c = 0; c < d; ++c) s += a[c] * b[c];
      out[static_cast<int64_t>(p) * n + q] = s;
    }
  }
  return out;
}

// C(p,q) -> C(q,p); the reverse-direction alignment reuses one similarity
// computation this way instead of a second code path.
inline SimilarityTensor transpose_similarity(const SimilarityTensor& c) {
  require(c.rank() == 4, ErrorKind::dimension, "transpose_similarity input must be rank 4");
  int h = c.dim(0), w = c.dim(1);
  int n = h * w;
  require(c.dim(2) == h && c.dim(3) == w, ErrorKind::dimension, "transpose_similarity: non-square grid");
  SimilarityTensor out(c.shape());
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) out[static_cast<int64_t>(q) * n + p] = c[static_cast<int64_t>(p) * n + q];
  return out;
}

// Row-wise softmax with temperature, max-subtracted for stability.
inline MatchProbability matching_probability(const SimilarityTensor& c, double beta) {
  require(c.rank() == 4, ErrorKind::dimension, "matching_probability input must be rank 4");
  require(beta > 0, ErrorKind::usage, "matching_probability: beta must be > 0, got ", beta);
  int n = c.dim(0) * c.dim(1);
  MatchProbability out{Tensor(c.shape()), beta};
  for (int p = 0; p < n; ++p) {
    const double* row = c.data() + static_cast<int64_t>(p) * n;
    double* po = out.values.data() + static_cast<int64_t>(p) * n;
    double hi = row[0];
    for (int q = 1; q < n; ++q) hi = std::max(hi, row[q]);
    double z = 0;
    for (int q = 0; q < n; ++q) {
      po[q] = std::exp(beta * (row[q] - hi));
      z += po[q];
    }
    double inv = 1.0 / z;
    for (int q = 0; q < n; ++q) po[q] *= inv;
  }
  return out;
}

// out(p) = sum_q P(p,q) f_src(q); accepts a FeatureMap or, for the
// co-attention construction, a SpatialMap source treated as d = 1.
inline Tensor soft_warp(const MatchProbability& p, const Tensor& f_src) {
  require(f_src.rank() == 2 || f_src.rank() == 3, ErrorKind::dimension,
          "soft_warp source must be h x w or h x w x d, got ", shape_str(f_src.shape()));
  require(p.values.rank() == 4, ErrorKind::dimension, "soft_warp: matching probability must be rank 4");
  require_same_grid(p.values, f_src, "soft_warp");
  require(p.values.dim(2) == f_src.dim(0) && p.values.dim(3) == f_src.dim(1), ErrorKind::dimension,
          "soft_warp: source grid mismatch");
  int n = f_src.dim(0) * f_src.dim(1);
  int d = f_src.rank() == 3 ? f_src.dim(2) : 1;
  Tensor out(f_src.shape());
  for (int tp = 0; tp < n; ++tp) {
    const double* row = p.values.data() + static_cast<int64_t>(tp) * n;
    double* o = out.data() + static_cast<int64_t>(tp) * d;
    for (int c = 0; c < d; ++c) o[c] = 0;
    for (int q = 0; q < n; ++q) {
      const double* v = f_src.data() + static_cast<int64_t>(q) * d;
      double pw = row[q];
      for (int c = 0; c < d; ++c) o[c] += pw * v[c];
    }
  }
  return out;
}

// out(p) = M_tgt(p) * warp(f_src)(p) + (1 - M_tgt(p)) * f_tgt(p)
inline FeatureMap align(const FeatureMap& f_tgt, const FeatureMap& f_src, const SpatialMap& m_tgt,
                        const MatchProbability& p) {
  require_feature_map(f_tgt, "align target");
  require_feature_map(f_src, "align source");
  require_spatial_map(m_tgt, "align mask");
  require(f_tgt.shape() == f_src.shape(), ErrorKind::dimension, "align: feature shape mismatch ",
          shape_str(f_tgt.shape()), " vs ", shape_str(f_src.shape()));
  require_same_grid(f_tgt, m_tgt, "align");
  Tensor warped = soft_warp(p, f_src);
  int n = f_tgt.dim(0) * f_tgt.dim(1);
  int d = f_tgt.dim(2);
  FeatureMap out(f_tgt.shape());
  for (int pos = 0; pos < n; ++pos) {
    double m = m_tgt[pos];
    const double* wv = warped.data() + static_cast<int64_t>(pos) * d;
    const double* tv = f_tgt.data() + static_cast<int64_t>(pos) * d;
    double* o = out.data() + static_cast<int64_t>(pos) * d;
    for (int c = 0; c < d; ++c) o[c] = m * wv[c] + (1.0 - m) * tv[c];
  }
  return out;
}

// A(p) = minmax( M_tgt(p) * warp(M_src)(p) ), P taken from the same feature
// pair the loss uses.
inline SpatialMap co_attention(const SpatialMap& m_tgt, const SpatialMap& m_src, const MatchProbability& p) {
  require_spatial_map(m_tgt, "co_attention target mask");
  require_spatial_map(m_src, "co_attention source mask");
  require(m_tgt.shape() == m_src.shape(), ErrorKind::dimension, "co_attention: mask shape mismatch");
  Tensor warped = soft_warp(p, m_src);
  SpatialMap prod(m_tgt.shape());
  for (int64_t i = 0; i < prod.size(); ++i) prod[i] = m_tgt[i] * warped[i];
  return minmax_normalize(prod);
}

}  // namespace cmalign
