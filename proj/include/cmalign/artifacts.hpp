#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cmalign/align.hpp"
#include "cmalign/field.hpp"
#include "cmalign/io.hpp"
#include "cmalign/model.hpp"

namespace cmalign {

// Inspection artifacts for one cross-modal image pair: person masks and
// co-attention maps (both directions) as 8-bit graymaps, plus a CSV of the
// top-k correspondence probabilities from every position of image a into
// image b. Everything derives from the final feature maps.
struct ArtifactPaths {
  std::string mask_a, mask_b;
  std::string coattention_a, coattention_b;
  std::string matches;
};

inline ArtifactPaths export_artifacts(const TwoStream& model, const Tensor& image_a,
                                      const Tensor& image_b, const std::string& out_dir,
                                      double beta, int top_k) {
  require(top_k >= 1, ErrorKind::usage, "export_artifacts: top_k must be >= 1");
  namespace fs = std::filesystem;
  auto [a4, a5] = model.forward_maps(image_a, 0);
  auto [b4, b5] = model.forward_maps(image_b, 1);

  SpatialMap mask_a = person_mask(a5);
  SpatialMap mask_b = person_mask(b5);
  SimilarityTensor c = cosine_similarity(a5, b5);
  MatchProbability p_ab = matching_probability(c, beta);
  MatchProbability p_ba = matching_probability(transpose_similarity(c), beta);
  SpatialMap co_a = co_attention(mask_a, mask_b, p_ab);
  SpatialMap co_b = co_attention(mask_b, mask_a, p_ba);

  ArtifactPaths paths;
  paths.mask_a = (fs::path(out_dir) / "mask_a.pgm").string();
  paths.mask_b = (fs::path(out_dir) / "mask_b.pgm").string();
  paths.coattention_a = (fs::path(out_dir) / "coattention_a.pgm").string();
  paths.coattention_b = (fs::path(out_dir) / "coattention_b.pgm").string();
  paths.matches = (fs::path(out_dir) / "matches.csv").string();
  write_pgm(paths.mask_a, mask_a);
  write_pgm(paths.mask_b, mask_b);
  write_pgm(paths.coattention_a, co_a);
  write_pgm(paths.coattention_b, co_b);

  // top-k rows per anchor position of image a, k capped at the source grid
  int ht = mask_a.dim(0), wt = mask_a.dim(1);
  int hs = mask_b.dim(0), ws = mask_b.dim(1);
  int n_s = hs * ws;
  int k = std::min(top_k, n_s);
  std::ostringstream csv;
  csv << "p_row,p_col,q_row,q_col,prob\n";
  std::vector<int> order(static_cast<size_t>(n_s));
  for (int p = 0; p < ht * wt; ++p) {
    const double* row = p_ab.values.data() + static_cast<int64_t>(p) * n_s;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return row[x] > row[y]; });
    for (int r = 0; r < k; ++r) {
      int q = order[static_cast<size_t>(r)];
      char prob[32];
      std::snprintf(prob, sizeof(prob), "%.9f", row[q]);
      csv << p / wt << ',' << p % wt << ',' << q / ws << ',' << q % ws << ',' << prob << '\n';
    }
  }
  write_file(paths.matches, csv.str());
  return paths;
}

}  // namespace cmalign
