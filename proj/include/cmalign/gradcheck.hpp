#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cmalign/align.hpp"
#include "cmalign/autograd.hpp"
#include "cmalign/field.hpp"
#include "cmalign/rng.hpp"

namespace cmalign {

// Finite-difference validation of the tape's adjoints. Every case samples
// leaf tensors, builds a scalar graph, and compares the analytic gradient of
// every leaf against central differences. Non-scalar operations are reduced
// through a fixed random linear probe so their full Jacobian is exercised.
//
// Central differences step across subgradient kinks, so inputs that land a
// kinked quantity too close to its threshold are resampled: the walker below
// inspects every node of the built graph and reports the smallest distance to
// a kink or mining tie.

struct GradcheckCase {
  std::string name;
  // Samples inputs and returns the graph builder. The builder may capture
  // values derived from the sampled inputs (labels, detached attention,
  // probes); it is re-invoked on perturbed copies of the same inputs.
  struct Instance {
    std::vector<Tensor> inputs;
    std::function<int(Tape&, const std::vector<int>&)> build;
  };
  std::function<Instance(Rng&)> make;
};

namespace gradcheck_detail {

inline double tensor_min_abs(const Tensor& t, double shift = 0.0) {
  double m = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < t.size(); ++i) m = std::min(m, std::abs(t[i] - shift));
  return m;
}

}  // namespace gradcheck_detail

// Smallest distance to a non-differentiable point across the whole graph:
// hinge arguments near zero, min/max mining or normalization ties, norm
// arguments near zero, and pooling floor crossings.
inline double kink_margin(const Tape& tape) {
  using gradcheck_detail::tensor_min_abs;
  double margin = std::numeric_limits<double>::infinity();
  auto update = [&](double m) { margin = std::min(margin, m); };
  for (int id = 0; id < tape.size(); ++id) {
    const TapeNode& nd = tape.node_at(id);
    switch (nd.op) {
      case OpKind::relu:
        update(tensor_min_abs(tape.value(nd.inputs[0])));
        break;
      case OpKind::l2norm_rows:
        // kink where a whole row vanishes; the row norm is the distance
        update(tensor_min_abs(nd.value));
        break;
      case OpKind::rows_normalize:
        // switch between 1/norm and 1/eps at norm == eps
        update(tensor_min_abs(nd.aux0, nd.a));
        break;
      case OpKind::gem_pool:
        update(tensor_min_abs(tape.value(nd.inputs[0]), kGemFloor));
        break;
      case OpKind::minmax_normalize: {
        const Tensor& x = tape.value(nd.inputs[0]);
        if (nd.flag) {
          // degenerate range: clamp kinks at 0 and 1
          update(tensor_min_abs(x));
          update(tensor_min_abs(x, 1.0));
        } else {
          int64_t imin = nd.ints[0], imax = nd.ints[1];
          for (int64_t i = 0; i < x.size(); ++i) {
            if (i != imin) update(x[i] - x[imin]);
            if (i != imax) update(x[imax] - x[i]);
          }
        }
        break;
      }
      case OpKind::batch_hard_triplet: {
        const Tensor& x = tape.value(nd.inputs[0]);
        int n = x.dim(0), d = x.dim(1);
        const int* picks = nd.ints.data();
        const int* labels = nd.ints.data() + 2 * n;
        auto dist = [&](int i, int j) {
          const double* a = x.data() + static_cast<int64_t>(i) * d;
          const double* b = x.data() + static_cast<int64_t>(j) * d;
          double s = 0;
          for (int c = 0; c < d; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
          return std::sqrt(s);
        };
        for (int i = 0; i < n; ++i) {
          int pos = picks[2 * i], neg = picks[2 * i + 1];
          if (pos < 0) continue;
          double dpos = dist(i, pos), dneg = dist(i, neg);
          update(std::abs(dpos - dneg + nd.a));  // hinge argument
          update(dpos);                          // sqrt kink at coincident rows
          update(dneg);
          for (int j = 0; j < n; ++j) {          // mining ties
            if (j == i || j == pos || j == neg) continue;
            if (labels[j] == labels[i])
              update(std::abs(dpos - dist(i, j)));
            else
              update(std::abs(dist(i, j) - dneg));
          }
        }
        break;
      }
      case OpKind::dense_hinge: {
        const Tensor& dpos = tape.value(nd.inputs[0]);
        const Tensor& dneg = tape.value(nd.inputs[1]);
        for (int64_t i = 0; i < dpos.size(); ++i) update(std::abs(dpos[i] - dneg[i] + nd.a));
        break;
      }
      default:
        break;
    }
  }
  return margin;
}

struct GradcheckReport {
  std::string name;
  bool passed = false;
  double max_rel_error = 0;
  int resamples = 0;
  std::string detail;  // set on failure
};

struct GradcheckSettings {
  double tol = 1e-4;
  double step = 1e-4;
  int seeds = 10;
  uint64_t base_seed = 1;
  double min_margin = 1e-3;  // resample while any kink margin is below this
  int max_resamples = 64;
};

// Runs one case across settings.seeds independently sampled instances.
inline GradcheckReport run_gradcheck_case(const GradcheckCase& def, const GradcheckSettings& s) {
  GradcheckReport report;
  report.name = def.name;
  for (int seed = 0; seed < s.seeds; ++seed) {
    Rng rng = Rng(s.base_seed).derive(0x6b).derive(static_cast<uint64_t>(seed));
    GradcheckCase::Instance inst;
    bool usable = false;
    for (int attempt = 0; attempt <= s.max_resamples; ++attempt) {
      inst = def.make(rng);
      Tape tape;
      std::vector<int> ids;
      ids.reserve(inst.inputs.size());
      for (const Tensor& t : inst.inputs) ids.push_back(tape.leaf(t));
      inst.build(tape, ids);
      if (kink_margin(tape) >= s.min_margin) {
        usable = true;
        break;
      }
      ++report.resamples;
    }
    if (!usable) {
      report.detail = "could not sample inputs clear of kinks after " +
                      std::to_string(s.max_resamples) + " attempts";
      return report;
    }

    Tape tape;
    std::vector<int> ids;
    ids.reserve(inst.inputs.size());
    for (const Tensor& t : inst.inputs) ids.push_back(tape.leaf(t));
    int root = inst.build(tape, ids);
    GradientSet grads = tape.backward(root);
    std::vector<Tensor> analytic;
    analytic.reserve(ids.size());
    for (int id : ids) analytic.push_back(grads.at(id));

    auto fn = [&](const std::vector<Tensor>& xs) {
      Tape t2;
      std::vector<int> ids2;
      ids2.reserve(xs.size());
      for (const Tensor& x : xs) ids2.push_back(t2.leaf(x));
      return t2.value(inst.build(t2, ids2))[0];
    };
    double err = finite_diff_check(fn, inst.inputs, analytic, s.step);
    report.max_rel_error = std::max(report.max_rel_error, err);
    if (err > s.tol) {
      char detail[128];
      std::snprintf(detail, sizeof(detail), "seed %d: max relative error %.3e exceeds %.3e", seed,
                    err, s.tol);
      report.detail = detail;
      return report;
    }
  }
  report.passed = true;
  return report;
}

// --- the case registry -----------------------------------------------------

namespace gradcheck_detail {

// Reduce a non-scalar node against a probe captured from the sampling phase.
inline int probe_reduce(Tape& tape, int node, const Tensor& probe) {
  int flat = tape.reshape(node, {static_cast<int>(probe.size())});
  int r = tape.constant(probe.reshaped({static_cast<int>(probe.size())}));
  return tape.sum(tape.mul(flat, r));
}

using Builder = std::function<int(Tape&, const std::vector<int>&)>;

inline GradcheckCase simple_case(std::string name, std::vector<Shape> shapes, double lo, double hi,
                                 std::function<int(Tape&, const std::vector<int>&, const Tensor&)> body,
                                 Shape probe_shape) {
  GradcheckCase c;
  c.name = std::move(name);
  c.make = [shapes = std::move(shapes), lo, hi, body = std::move(body),
            probe_shape = std::move(probe_shape)](Rng& rng) {
    GradcheckCase::Instance inst;
    for (const Shape& s : shapes) inst.inputs.push_back(rng.uniform_tensor(s, lo, hi));
    Tensor probe = rng.normal_tensor(probe_shape);
    inst.build = [body, probe](Tape& t, const std::vector<int>& ids) {
      return body(t, ids, probe);
    };
    return inst;
  };
  return c;
}

}  // namespace gradcheck_detail

inline std::vector<GradcheckCase> gradcheck_cases() {
  using gradcheck_detail::probe_reduce;
  using gradcheck_detail::simple_case;
  std::vector<GradcheckCase> cases;

  // elementwise and structural primitives
  cases.push_back(simple_case(
      "add", {{3, 4}, {3, 4}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.add(ids[0], ids[1]), pr);
      },
      {3, 4}));
  cases.push_back(simple_case(
      "sub", {{3, 4}, {3, 4}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.sub(ids[0], ids[1]), pr);
      },
      {3, 4}));
  cases.push_back(simple_case(
      "mul", {{3, 4}, {3, 4}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.mul(ids[0], ids[1]), pr);
      },
      {3, 4}));
  cases.push_back(simple_case(
      "scale", {{2, 5}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.scale(ids[0], -1.75), pr);
      },
      {2, 5}));
  cases.push_back(simple_case(
      "add_scalar", {{2, 5}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.add_scalar(ids[0], 0.6), pr);
      },
      {2, 5}));
  cases.push_back(simple_case(
      "add_n", {{2, 3}, {2, 3}, {2, 3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.add_n({ids[0], ids[1], ids[2], ids[0]}), pr);
      },
      {2, 3}));
  cases.push_back(simple_case(
      "relu", {{4, 4}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.relu(ids[0]), pr);
      },
      {4, 4}));
  cases.push_back(simple_case(
      "sum", {{3, 5}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor&) { return t.sum(ids[0]); }, {1}));
  cases.push_back(simple_case(
      "reshape", {{2, 6}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.reshape(ids[0], {3, 4}), pr);
      },
      {3, 4}));
  cases.push_back(simple_case(
      "concat_rows", {{2, 3}, {4, 3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.concat_rows({ids[0], ids[1]}), pr);
      },
      {6, 3}));
  cases.push_back(simple_case(
      "slice_rows", {{5, 3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.slice_rows(ids[0], 1, 3), pr);
      },
      {3, 3}));

  // spatial and linear-algebra primitives
  cases.push_back(simple_case(
      "conv2d_stride1", {{5, 4, 2}, {3, 3, 2, 3}, {3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.conv2d(ids[0], ids[1], ids[2], 1), pr);
      },
      {5, 4, 3}));
  cases.push_back(simple_case(
      "conv2d_stride2", {{5, 4, 2}, {3, 3, 2, 3}, {3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.conv2d(ids[0], ids[1], ids[2], 2), pr);
      },
      {3, 2, 3}));
  cases.push_back(simple_case(
      "matmul_nt", {{3, 5}, {4, 5}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.matmul_nt(ids[0], ids[1]), pr);
      },
      {3, 4}));
  cases.push_back(simple_case(
      "matmul_nn", {{3, 4}, {4, 2}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.matmul_nn(ids[0], ids[1]), pr);
      },
      {3, 2}));

  // normalization primitives
  cases.push_back(simple_case(
      "rows_normalize", {{4, 3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.rows_normalize(ids[0], kCosineEps), pr);
      },
      {4, 3}));
  // narrow logit range keeps the beta-scaled curvature within the
  // finite-difference truncation budget at the production temperature
  cases.push_back(simple_case(
      "softmax_rows_beta50", {{3, 6}}, -0.04, 0.04,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.softmax_rows(ids[0], 50.0), pr);
      },
      {3, 6}));
  cases.push_back(simple_case(
      "softmax_rows_beta1", {{3, 6}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.softmax_rows(ids[0], 1.0), pr);
      },
      {3, 6}));
  cases.push_back(simple_case(
      "l2norm_rows", {{5, 4}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.l2norm_rows(ids[0]), pr);
      },
      {5}));
  cases.push_back(simple_case(
      "minmax_normalize", {{3, 4}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.minmax_normalize(ids[0]), pr);
      },
      {3, 4}));
  cases.push_back(simple_case(
      "gem_pool", {{6, 4}}, 0.05, 2.0,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.gem_pool(ids[0], 3.0), pr);
      },
      {4}));
  cases.push_back(simple_case(
      "batchnorm_train", {{6, 3}, {3}, {3}}, -1, 1,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.batchnorm_train(ids[0], ids[1], ids[2], 4), pr);
      },
      {6, 3}));
  cases.push_back(simple_case(
      "lerp_rows", {{3, 4}, {3, 4}, {3}}, 0.1, 0.9,
      [](Tape& t, const std::vector<int>& ids, const Tensor& pr) {
        return probe_reduce(t, t.lerp_rows(ids[0], ids[1], ids[2]), pr);
      },
      {3, 4}));

  // loss primitives
  {
    GradcheckCase c;
    c.name = "cross_entropy_mean";
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      inst.inputs.push_back(rng.normal_tensor({4, 5}));
      std::vector<int> labels;
      for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.uniform_int(5)));
      inst.build = [labels](Tape& t, const std::vector<int>& ids) {
        return t.cross_entropy_mean(ids[0], labels);
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }
  {
    GradcheckCase c;
    c.name = "batch_hard_triplet";
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      inst.inputs.push_back(rng.uniform_tensor({6, 3}, -1.0, 1.0));
      std::vector<int> labels{0, 0, 1, 1, 2, 2};
      inst.build = [labels](Tape& t, const std::vector<int>& ids) {
        return t.batch_hard_triplet(ids[0], labels, 0.3);
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }
  {
    GradcheckCase c;
    c.name = "dense_hinge";
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      inst.inputs.push_back(rng.uniform_tensor({8}, 0.3, 1.5));
      inst.inputs.push_back(rng.uniform_tensor({8}, 0.3, 1.5));
      Tensor attention = rng.uniform_tensor({8}, 0.05, 1.0);
      inst.build = [attention](Tape& t, const std::vector<int>& ids) {
        int unnorm = t.dense_hinge(ids[0], ids[1], attention, 0.3, false);
        int norm = t.dense_hinge(ids[0], ids[1], attention, 0.3, true);
        return t.add(unnorm, norm);
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }

  // composite graphs mirroring the production assembly
  {
    // The warp output is probed directly, without the smoothing that pooling
    // or a loss head adds, so the temperature is kept moderate to hold the
    // central-difference truncation error well inside the tolerance. The
    // production temperature is exercised by the composite cases below.
    GradcheckCase c;
    c.name = "soft_warp";  // matching probability applied to source rows
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      inst.inputs.push_back(rng.uniform_tensor({6, 3}, -1.0, 1.0));  // target rows
      inst.inputs.push_back(rng.uniform_tensor({6, 3}, -1.0, 1.0));  // source rows
      Tensor probe = rng.normal_tensor({6, 3});
      inst.build = [probe](Tape& t, const std::vector<int>& ids) {
        int p = t.softmax_rows(t.matmul_nt(t.rows_normalize(ids[0], kCosineEps),
                                           t.rows_normalize(ids[1], kCosineEps)),
                               10.0);
        return probe_reduce(t, t.matmul_nn(p, ids[1]), probe);
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }
  {
    GradcheckCase c;
    c.name = "composite_warp_chain";  // cosine -> matching -> warp -> pooled CE
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      inst.inputs.push_back(rng.uniform_tensor({9, 4}, -1.0, 1.0));  // target rows, 3x3 grid
      inst.inputs.push_back(rng.uniform_tensor({9, 4}, -1.0, 1.0));  // source rows
      inst.inputs.push_back(rng.uniform_tensor({3, 4}, -0.5, 0.5));  // classifier
      inst.build = [](Tape& t, const std::vector<int>& ids) {
        int c = t.matmul_nt(t.rows_normalize(ids[0], kCosineEps),
                            t.rows_normalize(ids[1], kCosineEps));
        int p = t.softmax_rows(c, 50.0);
        int warped = t.matmul_nn(p, ids[1]);
        int pooled = t.gem_pool(warped, 3.0);
        int logits = t.matmul_nt(t.reshape(pooled, {1, 4}), ids[2]);
        return t.cross_entropy_mean(logits, {1});
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }
  {
    GradcheckCase c;
    c.name = "composite_align_blend";  // masks + lerp against warped source
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      inst.inputs.push_back(rng.uniform_tensor({6, 3}, 0.1, 1.0));
      inst.inputs.push_back(rng.uniform_tensor({6, 3}, 0.1, 1.0));
      Tensor probe = rng.normal_tensor({6, 3});
      inst.build = [probe](Tape& t, const std::vector<int>& ids) {
        int mask = t.minmax_normalize(t.l2norm_rows(ids[0]));
        int p = t.softmax_rows(
            t.matmul_nt(t.rows_normalize(ids[0], kCosineEps), t.rows_normalize(ids[1], kCosineEps)),
            50.0);
        int aligned = t.lerp_rows(ids[0], t.matmul_nn(p, ids[1]), mask);
        return probe_reduce(t, aligned, probe);
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }
  {
    // Full objective on a two-identity micro-batch of leaf feature maps
    // (3x3 grid, d = 4): identity CE + batch-hard triplet on pooled
    // descriptors, consistency CE through aligned features, and the
    // attention-weighted dense triplet, all through shared normalization.
    GradcheckCase c;
    c.name = "composite_total_loss";
    c.make = [](Rng& rng) {
      GradcheckCase::Instance inst;
      const int n = 9, d = 4, b = 4;
      for (int i = 0; i < b; ++i) inst.inputs.push_back(rng.uniform_tensor({n, d}, -1.0, 1.0));
      inst.inputs.push_back(rng.uniform_tensor({d}, 0.8, 1.2));   // bn gamma
      inst.inputs.push_back(rng.uniform_tensor({d}, -0.2, 0.2));  // bn shift
      inst.inputs.push_back(rng.uniform_tensor({2, d}, -0.6, 0.6));  // classifier
      const std::vector<int> labels{0, 1, 0, 1};
      // modality halves: rows 0,1 vs rows 2,3; positive = same label across
      // halves, negative = the other label across halves
      const std::vector<int> pos{2, 3, 0, 1};
      const std::vector<int> neg{3, 2, 1, 0};

      // Detached attention: computed once from the sampled values, then held
      // fixed across the finite-difference evaluations, matching its
      // stop-gradient role in the objective.
      std::vector<Tensor> attention;
      {
        Tape t0;
        std::vector<int> ids0;
        for (const Tensor& x : inst.inputs) ids0.push_back(t0.leaf(x));
        for (int i = 0; i < b; ++i) {
          int mask_t = t0.minmax_normalize(t0.l2norm_rows(ids0[static_cast<size_t>(i)]));
          int mask_s = t0.minmax_normalize(t0.l2norm_rows(ids0[static_cast<size_t>(pos[static_cast<size_t>(i)])]));
          int p = t0.softmax_rows(
              t0.matmul_nt(t0.rows_normalize(ids0[static_cast<size_t>(i)], kCosineEps),
                           t0.rows_normalize(ids0[static_cast<size_t>(pos[static_cast<size_t>(i)])], kCosineEps)),
              50.0);
          const Tensor& pv = t0.value(p);
          const Tensor& mt = t0.value(mask_t);
          const Tensor& ms = t0.value(mask_s);
          Tensor raw({n});
          for (int r = 0; r < n; ++r) {
            double acc = 0;
            for (int q = 0; q < n; ++q) acc += pv[static_cast<int64_t>(r) * n + q] * ms[q];
            raw[r] = mt[r] * acc;
          }
          attention.push_back(t0.value(t0.minmax_normalize(t0.constant(std::move(raw)))));
        }
      }

      inst.build = [=](Tape& t, const std::vector<int>& ids) {
        std::vector<int> desc_rows;
        for (int i = 0; i < b; ++i)
          desc_rows.push_back(t.reshape(t.gem_pool(ids[static_cast<size_t>(i)], 3.0), {1, d}));
        int descriptors = t.concat_rows(desc_rows);

        std::vector<int> recon_rows;
        std::vector<int> dt_nodes;
        for (int i = 0; i < b; ++i) {
          int tgt = ids[static_cast<size_t>(i)];
          int src = ids[static_cast<size_t>(pos[static_cast<size_t>(i)])];
          int bad = ids[static_cast<size_t>(neg[static_cast<size_t>(i)])];
          int mask = t.minmax_normalize(t.l2norm_rows(tgt));
          int p_pos = t.softmax_rows(t.matmul_nt(t.rows_normalize(tgt, kCosineEps),
                                                 t.rows_normalize(src, kCosineEps)),
                                     50.0);
          int p_neg = t.softmax_rows(t.matmul_nt(t.rows_normalize(tgt, kCosineEps),
                                                 t.rows_normalize(bad, kCosineEps)),
                                     50.0);
          int warped_pos = t.matmul_nn(p_pos, src);
          int warped_neg = t.matmul_nn(p_neg, bad);
          int aligned = t.lerp_rows(tgt, warped_pos, mask);
          recon_rows.push_back(t.reshape(t.gem_pool(aligned, 3.0), {1, d}));
          int d_pos = t.l2norm_rows(t.sub(tgt, warped_pos));
          int d_neg = t.l2norm_rows(t.sub(tgt, warped_neg));
          dt_nodes.push_back(t.dense_hinge(d_pos, d_neg, attention[static_cast<size_t>(i)], 0.3, false));
        }

        std::vector<int> all_rows{descriptors};
        all_rows.insert(all_rows.end(), recon_rows.begin(), recon_rows.end());
        int bn = t.batchnorm_train(t.concat_rows(all_rows), ids[b], ids[b + 1], b);
        int logits = t.matmul_nt(bn, ids[b + 2]);
        int l_id = t.add(t.cross_entropy_mean(t.slice_rows(logits, 0, b), labels),
                         t.batch_hard_triplet(descriptors, labels, 0.3));
        int l_ic = t.cross_entropy_mean(t.slice_rows(logits, b, b), labels);
        int l_dt = t.scale(t.add_n(dt_nodes), 1.0 / b);
        return t.add(t.add(l_id, l_ic), t.scale(l_dt, 0.5));
      };
      return inst;
    };
    cases.push_back(std::move(c));
  }

  return cases;
}

// Runs the registry, optionally restricted to names in `only` (empty = all).
inline std::vector<GradcheckReport> run_gradchecks(const GradcheckSettings& settings,
                                                   const std::vector<std::string>& only = {}) {
  std::vector<GradcheckCase> cases = gradcheck_cases();
  for (const std::string& name : only) {
    bool known = std::any_of(cases.begin(), cases.end(),
                             [&](const GradcheckCase& c) { return c.name == name; });
    require(known, ErrorKind::usage, "gradcheck: unknown case name '", name, "'");
  }
  std::vector<GradcheckReport> reports;
  for (const GradcheckCase& c : cases) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    reports.push_back(run_gradcheck_case(c, settings));
  }
  return reports;
}

}  // namespace cmalign
