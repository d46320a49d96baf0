#pragma once

#include <cmath>

#include "cmalign/error.hpp"
#include "cmalign/tensor.hpp"

namespace cmalign {

// Spatial feature fields use three tensor ranks throughout the library:
//   FeatureMap       rank-3, h x w x d
//   SpatialMap       rank-2, h x w   (masks, activation and attention maps)
//   PersonDescriptor rank-1, d       (image-level representation)
using FeatureMap = Tensor;
using SpatialMap = Tensor;
using PersonDescriptor = Tensor;

// Degenerate min-max range threshold: below this the map is treated as
// constant and clamped into [0,1] instead of rescaled, so a uniform mask
// stays uniform rather than collapsing to zero.
inline constexpr double kMinmaxEps = 1e-12;
// Activations are floored here before fractional powers in GeM pooling.
inline constexpr double kGemFloor = 1e-6;

inline void require_feature_map(const Tensor& f, const char* what) {
  require(f.rank() == 3, ErrorKind::dimension, what, " must be h x w x d, got ", shape_str(f.shape()));
}

inline void require_spatial_map(const Tensor& m, const char* what) {
  require(m.rank() == 2, ErrorKind::dimension, what, " must be h x w, got ", shape_str(m.shape()));
}

// Per-position L2 norm of a feature map.
inline SpatialMap activation_map(const FeatureMap& f) {
  require_feature_map(f, "activation_map input");
  int h = f.dim(0), w = f.dim(1), d = f.dim(2);
  SpatialMap out({h, w});
  for (int p = 0; p < h * w; ++p) {
    double s = 0;
    const double* v = f.data() + static_cast<int64_t>(p) * d;
    for (int c = 0; c < d; ++c) s += v[c] * v[c];
    out[p] = std::sqrt(s);
  }
  return out;
}

inline SpatialMap minmax_normalize(const SpatialMap& g) {
  require_spatial_map(g, "minmax_normalize input");
  double lo = g[0], hi = g[0];
  for (int64_t i = 0; i < g.size(); ++i) {
    lo = std::min(lo, g[i]);
    hi = std::max(hi, g[i]);
  }
  SpatialMap out(g.shape());
  if (hi - lo < kMinmaxEps) {
    for (int64_t i = 0; i < g.size(); ++i) out[i] = std::min(std::max(g[i], 0.0), 1.0);
  } else {
    double inv = 1.0 / (hi - lo);
    for (int64_t i = 0; i < g.size(); ++i) out[i] = (g[i] - lo) * inv;
  }
  return out;
}

inline SpatialMap person_mask(const FeatureMap& f) { return minmax_normalize(activation_map(f)); }

// Generalized-mean pooling over spatial positions, one value per channel.
inline PersonDescriptor gem_pool(const FeatureMap& f, double p_gem) {
  require_feature_map(f, "gem_pool input");
  require(p_gem >= 1.0, ErrorKind::usage, "gem_pool power must be >= 1, got ", p_gem);
  int h = f.dim(0), w = f.dim(1), d = f.dim(2);
  PersonDescriptor out({d});
  double inv_n = 1.0 / (h * w);
  for (int c = 0; c < d; ++c) {
    double s = 0;
    for (int p = 0; p < h * w; ++p) {
      double v = std::max(f[static_cast<int64_t>(p) * d + c], kGemFloor);
      s += std::pow(v, p_gem);
    }
    out[c] = std::pow(s * inv_n, 1.0 / p_gem);
  }
  return out;
}

}  // namespace cmalign
