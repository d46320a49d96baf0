#pragma once

#include <cmath>
#include <vector>

#include "cmalign/field.hpp"
#include "cmalign/rng.hpp"

namespace cmalign {

// Weights and margins of the three-term objective.
struct LossWeights {
  double lambda_ic = 1.0;
  double lambda_dt = 0.5;
  double margin = 0.3;  // shared by the batch-hard and dense triplet terms
  double beta = 50.0;   // matching-probability temperature
};

inline constexpr double kBnEps = 1e-5;

// Identity classifier: per-channel normalization followed by a bias-free
// linear map to identity logits. One instance serves original descriptors of
// both modalities and reconstructed descriptors alike.
struct ClassifierHead {
  Tensor gamma, shift;                // learned normalization parameters, d
  Tensor running_mean, running_var;   // inference statistics, d
  Tensor weight;                      // K x d

  static ClassifierHead init(int d, int num_classes, Rng& rng) {
    ClassifierHead h;
    h.gamma = Tensor::full({d}, 1.0);
    h.shift = Tensor({d});
    h.running_mean = Tensor({d});
    h.running_var = Tensor::full({d}, 1.0);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    h.weight = rng.uniform_tensor({num_classes, d}, -bound, bound);
    return h;
  }

  int channels() const { return gamma.dim(0); }
  int num_classes() const { return weight.dim(0); }

  // Inference-mode normalization with running statistics.
  Tensor normalize(const PersonDescriptor& desc) const {
    require(desc.rank() == 1 && desc.dim(0) == channels(), ErrorKind::dimension,
            "classifier head expects a descriptor of ", channels(), " channels, got ",
            shape_str(desc.shape()));
    Tensor out(desc.shape());
    for (int c = 0; c < channels(); ++c)
      out[c] = gamma[c] * (desc[c] - running_mean[c]) / std::sqrt(running_var[c] + kBnEps) + shift[c];
    return out;
  }

  Tensor logits(const PersonDescriptor& desc) const {
    Tensor normalized = normalize(desc);
    int k = num_classes(), d = channels();
    Tensor out({k});
    for (int i = 0; i < k; ++i) {
      double s = 0;
      for (int c = 0; c < d; ++c) s += weight[static_cast<int64_t>(i) * d + c] * normalized[c];
      out[i] = s;
    }
    return out;
  }
};

// Stabilized cross-entropy of softmax(logits) at the true label.
inline double cross_entropy(const Tensor& logits, int label) {
  require(logits.rank() == 1, ErrorKind::dimension, "cross_entropy expects a logit vector");
  require(label >= 0 && label < logits.dim(0), ErrorKind::usage, "label ", label,
          " out of range for ", logits.dim(0), " classes");
  double hi = logits[0];
  for (int64_t i = 1; i < logits.size(); ++i) hi = std::max(hi, logits[i]);
  double z = 0;
  for (int64_t i = 0; i < logits.size(); ++i) z += std::exp(logits[i] - hi);
  return std::log(z) + hi - logits[label];
}

inline double classification_loss(const PersonDescriptor& desc, int label, const ClassifierHead& head) {
  return cross_entropy(head.logits(desc), label);
}

inline double euclidean(const PersonDescriptor& a, const PersonDescriptor& b) {
  require(a.same_shape(b), ErrorKind::dimension, "euclidean: shape mismatch");
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double diff = a[i] - b[i];
    s += diff * diff;
  }
  return std::sqrt(s);
}

// Batch-hard mining: per anchor, the farthest same-label and nearest
// different-label sample; mean hinge over anchors that have both.
inline double batch_hard_triplet(const std::vector<PersonDescriptor>& descs, const std::vector<int>& labels,
                                 double margin) {
  require(descs.size() == labels.size(), ErrorKind::dimension, "batch_hard_triplet: ", descs.size(),
          " descriptors vs ", labels.size(), " labels");
  int n = static_cast<int>(descs.size());
  bool multi_label = false;
  for (int i = 1; i < n && !multi_label; ++i) multi_label = labels[i] != labels[0];
  require(multi_label, ErrorKind::config, "batch_hard_triplet: batch has a single identity, no negatives exist");

  double total = 0;
  int anchors = 0;
  for (int a = 0; a < n; ++a) {
    double hardest_pos = -1, hardest_neg = -1;
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      double dij = euclidean(descs[a], descs[j]);
      if (labels[j] == labels[a]) {
        hardest_pos = std::max(hardest_pos, dij);
      } else if (hardest_neg < 0 || dij < hardest_neg) {
        hardest_neg = dij;
      }
    }
    if (hardest_pos < 0 || hardest_neg < 0) continue;
    total += std::max(0.0, hardest_pos - hardest_neg + margin);
    ++anchors;
  }
  require(anchors > 0, ErrorKind::config, "batch_hard_triplet: no anchor has a positive pair");
  return total / anchors;
}

// Mean classification loss over every descriptor of both modalities plus the
// batch-hard triplet on the pooled batch; cross-modal triplets arise from the
// mixing.
inline double id_loss(const std::vector<PersonDescriptor>& descs, const std::vector<int>& labels,
                      const ClassifierHead& head, double margin) {
  require(!descs.empty(), ErrorKind::usage, "id_loss: empty batch");
  double ce = 0;
  for (size_t i = 0; i < descs.size(); ++i) ce += classification_loss(descs[i], labels[i], head);
  return ce / static_cast<double>(descs.size()) + batch_hard_triplet(descs, labels, margin);
}

// Mean cross-entropy of the shared head on reconstructed descriptors. The
// labels are the identities shared by each positive pair; pairing is
// validated where the reconstructions are assembled.
inline double id_consistency_loss(const std::vector<PersonDescriptor>& recon_descs,
                                  const std::vector<int>& labels, const ClassifierHead& head) {
  require(!recon_descs.empty(), ErrorKind::usage, "id_consistency_loss: empty batch");
  require(recon_descs.size() == labels.size(), ErrorKind::dimension, "id_consistency_loss: size mismatch");
  double ce = 0;
  for (size_t i = 0; i < recon_descs.size(); ++i) ce += classification_loss(recon_descs[i], labels[i], head);
  return ce / static_cast<double>(recon_descs.size());
}

// Per-position Euclidean distance between an anchor map and a reconstruction.
inline SpatialMap local_distance(const FeatureMap& f_anchor, const FeatureMap& f_recon) {
  require_feature_map(f_anchor, "local_distance anchor");
  require(f_anchor.shape() == f_recon.shape(), ErrorKind::dimension, "local_distance: shape mismatch ",
          shape_str(f_anchor.shape()), " vs ", shape_str(f_recon.shape()));
  int h = f_anchor.dim(0), w = f_anchor.dim(1), d = f_anchor.dim(2);
  SpatialMap out({h, w});
  for (int p = 0; p < h * w; ++p) {
    double s = 0;
    for (int c = 0; c < d; ++c) {
      double diff = f_anchor[static_cast<int64_t>(p) * d + c] - f_recon[static_cast<int64_t>(p) * d + c];
      s += diff * diff;
    }
    out[p] = std::sqrt(s);
  }
  return out;
}

// Co-attention-weighted hinge over positions, summed (not averaged) unless
// normalization is requested.
inline double dense_triplet_loss(const SpatialMap& d_pos, const SpatialMap& d_neg, const SpatialMap& a,
                                 double alpha, bool normalize = false) {
  require_spatial_map(a, "dense_triplet_loss attention");
  require(d_pos.shape() == d_neg.shape() && d_pos.shape() == a.shape(), ErrorKind::dimension,
          "dense_triplet_loss: shape mismatch");
  double total = 0, weight = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    total += a[i] * std::max(0.0, d_pos[i] - d_neg[i] + alpha);
    weight += a[i];
  }
  if (!normalize) return total;
  return weight > kMinmaxEps ? total / weight : 0.0;
}

inline double total_loss(double l_id, double l_ic, double l_dt, const LossWeights& w) {
  return l_id + w.lambda_ic * l_ic + w.lambda_dt * l_dt;
}

}  // namespace cmalign
