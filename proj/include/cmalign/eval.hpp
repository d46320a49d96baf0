#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cmalign/align.hpp"
#include "cmalign/data.hpp"
#include "cmalign/error.hpp"
#include "cmalign/field.hpp"
#include "cmalign/model.hpp"

namespace cmalign {

// Pooled descriptors for every image of one modality, labeled by the
// identity written in the dataset manifest.
struct DescriptorSet {
  std::vector<PersonDescriptor> descriptors;
  std::vector<int> identities;
};

inline DescriptorSet extract_descriptors(const TwoStream& model, const Dataset& ds, int modality,
                                         double gem_p) {
  require(modality == 0 || modality == 1, ErrorKind::usage, "extract: modality must be 0 or 1");
  DescriptorSet out;
  for (const DatasetImage& img : ds.images) {
    if (img.modality != modality) continue;
    auto [l4, l5] = model.forward_maps(img.pixels, modality);
    out.descriptors.push_back(gem_pool(l5, gem_p));
    out.identities.push_back(img.identity);
  }
  return out;
}

struct RetrievalResult {
  double map = 0;
  std::vector<double> cmc;           // cmc[k-1] = fraction with a positive in the top k
  std::vector<double> per_query_ap;  // excluded queries carry no entry
  int excluded_queries = 0;
};

// Ranks the gallery by descending cosine similarity per query (ties broken by
// gallery index), scores average precision as the mean of precision values at
// each positive's rank, and counts top-k hits for CMC. Queries without any
// gallery positive are excluded and counted.
inline RetrievalResult evaluate_retrieval(const DescriptorSet& queries, const DescriptorSet& gallery,
                                          int cmc_k) {
  require(!gallery.descriptors.empty(), ErrorKind::usage, "evaluate_retrieval: empty gallery");
  require(!queries.descriptors.empty(), ErrorKind::usage, "evaluate_retrieval: no queries");
  require(cmc_k >= 1, ErrorKind::usage, "evaluate_retrieval: cmc_k must be >= 1");
  const size_t n_g = gallery.descriptors.size();

  std::vector<double> gallery_norm(n_g);
  for (size_t j = 0; j < n_g; ++j) {
    const Tensor& g = gallery.descriptors[j];
    double s = 0;
    for (int64_t i = 0; i < g.size(); ++i) s += g[i] * g[i];
    gallery_norm[j] = std::max(std::sqrt(s), kCosineEps);
  }

  RetrievalResult result;
  result.cmc.assign(static_cast<size_t>(cmc_k), 0.0);
  double ap_sum = 0;
  int included = 0;
  std::vector<double> sims(n_g);
  std::vector<int> order(n_g);
  for (size_t qi = 0; qi < queries.descriptors.size(); ++qi) {
    const Tensor& q = queries.descriptors[qi];
    require(q.same_shape(gallery.descriptors[0]), ErrorKind::dimension,
            "evaluate_retrieval: descriptor dimension mismatch");
    int label = queries.identities[qi];
    int positives = 0;
    for (size_t j = 0; j < n_g; ++j)
      if (gallery.identities[j] == label) ++positives;
    if (positives == 0) {
      ++result.excluded_queries;
      continue;
    }
    double qn = 0;
    for (int64_t i = 0; i < q.size(); ++i) qn += q[i] * q[i];
    qn = std::max(std::sqrt(qn), kCosineEps);
    for (size_t j = 0; j < n_g; ++j) {
      double dot = 0;
      for (int64_t i = 0; i < q.size(); ++i) dot += q[i] * gallery.descriptors[j][i];
      sims[j] = dot / (qn * gallery_norm[j]);
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return sims[static_cast<size_t>(a)] > sims[static_cast<size_t>(b)]; });

    int hits = 0;
    double precision_sum = 0;
    int first_positive_rank = 0;
    for (size_t r = 0; r < n_g; ++r) {
      if (gallery.identities[static_cast<size_t>(order[r])] == label) {
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        if (first_positive_rank == 0) first_positive_rank = static_cast<int>(r + 1);
      }
    }
    double ap = precision_sum / positives;
    result.per_query_ap.push_back(ap);
    ap_sum += ap;
    ++included;
    for (int k = first_positive_rank; k <= cmc_k; ++k) result.cmc[static_cast<size_t>(k - 1)] += 1.0;
  }
  require(included > 0, ErrorKind::data, "evaluate_retrieval: no query has a gallery positive");
  result.map = ap_sum / included;
  for (double& v : result.cmc) v /= included;
  return result;
}

}  // namespace cmalign
