#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cmalign/error.hpp"
#include "cmalign/field.hpp"
#include "cmalign/tensor.hpp"

namespace cmalign {

// Eager reverse-mode tape over the closed set of primitives this project
// needs. Every op computes its value immediately and records enough state to
// run the hand-written adjoint later. Nodes are identified by their index in
// construction order, which is automatically a topological order.
//
// Kink conventions (hinges, ReLU, norms at zero, min/max selection): the
// subgradient 0 is used exactly at the kink, and ties in argmin/argmax
// selection resolve to the first attaining index.

enum class OpKind {
  leaf,
  constant,
  reshape,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  add_n,
  relu,
  sum,
  conv2d,
  rows_normalize,
  matmul_nt,
  matmul_nn,
  softmax_rows,
  l2norm_rows,
  minmax_normalize,
  gem_pool,
  batchnorm_train,
  cross_entropy_mean,
  lerp_rows,
  concat_rows,
  slice_rows,
  batch_hard_triplet,
  dense_hinge,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::reshape: return "reshape";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::add_n: return "add_n";
    case OpKind::relu: return "relu";
    case OpKind::sum: return "sum";
    case OpKind::conv2d: return "conv2d";
    case OpKind::rows_normalize: return "rows_normalize";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::matmul_nn: return "matmul_nn";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::l2norm_rows: return "l2norm_rows";
    case OpKind::minmax_normalize: return "minmax_normalize";
    case OpKind::gem_pool: return "gem_pool";
    case OpKind::batchnorm_train: return "batchnorm_train";
    case OpKind::cross_entropy_mean: return "cross_entropy_mean";
    case OpKind::lerp_rows: return "lerp_rows";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::batch_hard_triplet: return "batch_hard_triplet";
    case OpKind::dense_hinge: return "dense_hinge";
  }
  return "?";
}

struct TapeNode {
  OpKind op;
  Tensor value;
  std::vector<int> inputs;
  bool needs_grad = false;
  // Op-specific state: scalars (temperatures, margins, strides), index lists
  // (labels, mining picks), and saved forward intermediates.
  double a = 0;
  int i0 = 0;
  bool flag = false;
  std::vector<int> ints{};
  Tensor aux0{}, aux1{};
};

// Gradients of one backward pass, indexed by node id. Nodes the root does not
// depend on read back as zeros.
class GradientSet {
 public:
  GradientSet(std::vector<Tensor> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}
  Tensor at(int id) const {
    require(id >= 0 && id < static_cast<int>(grads_.size()), ErrorKind::usage, "gradient id out of range");
    if (!grads_[id].empty()) return grads_[id];
    return Tensor(shapes_[id]);
  }

 private:
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor& value(int id) const { return node(id).value; }
  const TapeNode& node_at(int id) const { return node(id); }

  int leaf(Tensor v) { return push({OpKind::leaf, std::move(v), {}, true}); }
  int constant(Tensor v) { return push({OpKind::constant, std::move(v), {}, false}); }

  int reshape(int x, Shape s) {
    TapeNode n{OpKind::reshape, node(x).value.reshaped(std::move(s)), {x}, false};
    return push(std::move(n));
  }

  int add(int x, int y) { return binary_elementwise(OpKind::add, x, y, [](double u, double v) { return u + v; }); }
  int sub(int x, int y) { return binary_elementwise(OpKind::sub, x, y, [](double u, double v) { return u - v; }); }
  int mul(int x, int y) { return binary_elementwise(OpKind::mul, x, y, [](double u, double v) { return u * v; }); }

  int scale(int x, double s) {
    TapeNode n{OpKind::scale, node(x).value, {x}, false};
    n.a = s;
    for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] *= s;
    return push(std::move(n));
  }

  int add_scalar(int x, double s) {
    TapeNode n{OpKind::add_scalar, node(x).value, {x}, false};
    n.a = s;
    for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] += s;
    return push(std::move(n));
  }

  int add_n(const std::vector<int>& xs) {
    require(!xs.empty(), ErrorKind::usage, "add_n: empty operand list");
    TapeNode n{OpKind::add_n, node(xs[0]).value, xs, false};
    for (size_t k = 1; k < xs.size(); ++k) {
      const Tensor& v = node(xs[k]).value;
      require(v.same_shape(n.value), ErrorKind::dimension, "add_n: operand shape mismatch");
      for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] += v[i];
    }
    return push(std::move(n));
  }

  int relu(int x) {
    TapeNode n{OpKind::relu, node(x).value, {x}, false};
    for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = std::max(0.0, n.value[i]);
    return push(std::move(n));
  }

  int sum(int x) {
    double s = 0;
    const Tensor& v = node(x).value;
    for (int64_t i = 0; i < v.size(); ++i) s += v[i];
    TapeNode n{OpKind::sum, Tensor::scalar(s), {x}, false};
    return push(std::move(n));
  }

  // Spatial convolution, odd kernel, zero padding (kh/2, kw/2), channel-last.
  // x: h x w x cin, w: kh x kw x cin x cout, b: cout.
  int conv2d(int x, int w, int b, int stride) {
    const Tensor& xv = node(x).value;
    const Tensor& wv = node(w).value;
    const Tensor& bv = node(b).value;
    require(xv.rank() == 3 && wv.rank() == 4 && bv.rank() == 1, ErrorKind::dimension,
            "conv2d: expected x(h,w,cin), w(kh,kw,cin,cout), b(cout)");
    int h = xv.dim(0), wd = xv.dim(1), cin = xv.dim(2);
    int kh = wv.dim(0), kw = wv.dim(1), cout = wv.dim(3);
    require(wv.dim(2) == cin, ErrorKind::dimension, "conv2d: cin mismatch: input has ", cin, ", kernel has ",
            wv.dim(2));
    require(bv.dim(0) == cout, ErrorKind::dimension, "conv2d: bias size mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, ErrorKind::usage, "conv2d: kernel dims must be odd");
    require(stride >= 1, ErrorKind::usage, "conv2d: stride must be >= 1");
    int ph = kh / 2, pw = kw / 2;
    int oh = (h - 1) / stride + 1, ow = (wd - 1) / stride + 1;
    Tensor out({oh, ow, cout});
    for (int oi = 0; oi < oh; ++oi) {
      for (int oj = 0; oj < ow; ++oj) {
        double* o = out.data() + (static_cast<int64_t>(oi) * ow + oj) * cout;
        for (int co = 0; co < cout; ++co) o[co] = bv[co];
        for (int di = 0; di < kh; ++di) {
          int ii = oi * stride + di - ph;
          if (ii < 0 || ii >= h) continue;
          for (int dj = 0; dj < kw; ++dj) {
            int jj = oj * stride + dj - pw;
            if (jj < 0 || jj >= wd) continue;
            const double* xp = xv.data() + (static_cast<int64_t>(ii) * wd + jj) * cin;
            const double* wp = wv.data() + (static_cast<int64_t>(di) * kw + dj) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              double xvl = xp[ci];
              const double* wr = wp + static_cast<int64_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) o[co] += xvl * wr[co];
            }
          }
        }
      }
    }
    TapeNode n{OpKind::conv2d, std::move(out), {x, w, b}, false};
    n.i0 = stride;
    return push(std::move(n));
  }

  // Row-wise x / max(|x|, eps).
  int rows_normalize(int x, double eps) {
    const Tensor& xv = node(x).value;
    require(xv.rank() == 2, ErrorKind::dimension, "rows_normalize expects n x d");
    int n = xv.dim(0), d = xv.dim(1);
    Tensor out(xv.shape());
    Tensor norms({n});
    for (int i = 0; i < n; ++i) {
      const double* r = xv.data() + static_cast<int64_t>(i) * d;
      double s = 0;
      for (int c = 0; c < d; ++c) s += r[c] * r[c];
      norms[i] = std::sqrt(s);
      double inv = 1.0 / std::max(norms[i], eps);
      double* o = out.data() + static_cast<int64_t>(i) * d;
      for (int c = 0; c < d; ++c) o[c] = r[c] * inv;
    }
    TapeNode nd{OpKind::rows_normalize, std::move(out), {x}, false};
    nd.a = eps;
    nd.aux0 = std::move(norms);
    return push(std::move(nd));
  }

  // a (n x d) times b (m x d) transposed -> n x m.
  int matmul_nt(int a, int b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1), ErrorKind::dimension,
            "matmul_nt: shapes ", shape_str(av.shape()), " and ", shape_str(bv.shape()));
    int n = av.dim(0), m = bv.dim(0), d = av.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
      const double* ar = av.data() + static_cast<int64_t>(i) * d;
      double* o = out.data() + static_cast<int64_t>(i) * m;
      for (int j = 0; j < m; ++j) {
        const double* br = bv.data() + static_cast<int64_t>(j) * d;
        double s = 0;
        for (int c = 0; c < d; ++c) s += ar[c] * br[c];
        o[j] = s;
      }
    }
    return push({OpKind::matmul_nt, std::move(out), {a, b}, false});
  }

  // a (n x m) times b (m x d) -> n x d.
  int matmul_nn(int a, int b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), ErrorKind::dimension,
            "matmul_nn: shapes ", shape_str(av.shape()), " and ", shape_str(bv.shape()));
    int n = av.dim(0), m = av.dim(1), d = bv.dim(1);
    Tensor out({n, d});
    for (int i = 0; i < n; ++i) {
      const double* ar = av.data() + static_cast<int64_t>(i) * m;
      double* o = out.data() + static_cast<int64_t>(i) * d;
      for (int k = 0; k < m; ++k) {
        double av_ik = ar[k];
        if (av_ik == 0.0) continue;
        const double* br = bv.data() + static_cast<int64_t>(k) * d;
        for (int c = 0; c < d; ++c) o[c] += av_ik * br[c];
      }
    }
    return push({OpKind::matmul_nn, std::move(out), {a, b}, false});
  }

  // Row-wise softmax(beta * x), max-subtracted.
  int softmax_rows(int x, double beta) {
    const Tensor& xv = node(x).value;
    require(xv.rank() == 2, ErrorKind::dimension, "softmax_rows expects n x m");
    require(beta > 0, ErrorKind::usage, "softmax_rows: beta must be > 0");
    int n = xv.dim(0), m = xv.dim(1);
    Tensor out(xv.shape());
    for (int i = 0; i < n; ++i) {
      const double* r = xv.data() + static_cast<int64_t>(i) * m;
      double* o = out.data() + static_cast<int64_t>(i) * m;
      double hi = r[0];
      for (int j = 1; j < m; ++j) hi = std::max(hi, r[j]);
      double z = 0;
      for (int j = 0; j < m; ++j) {
        o[j] = std::exp(beta * (r[j] - hi));
        z += o[j];
      }
      double inv = 1.0 / z;
      for (int j = 0; j < m; ++j) o[j] *= inv;
    }
    TapeNode nd{OpKind::softmax_rows, std::move(out), {x}, false};
    nd.a = beta;
    return push(std::move(nd));
  }

  // Per-row L2 norm: n x d -> n.
  int l2norm_rows(int x) {
    const Tensor& xv = node(x).value;
    require(xv.rank() == 2, ErrorKind::dimension, "l2norm_rows expects n x d");
    int n = xv.dim(0), d = xv.dim(1);
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
      const double* r = xv.data() + static_cast<int64_t>(i) * d;
      double s = 0;
      for (int c = 0; c < d; ++c) s += r[c] * r[c];
      out[i] = std::sqrt(s);
    }
    return push({OpKind::l2norm_rows, std::move(out), {x}, false});
  }

  // Global min-max rescale with the degenerate clamp rule of the field ops.
  int minmax_normalize(int x) {
    const Tensor& xv = node(x).value;
    int64_t imin = 0, imax = 0;
    for (int64_t i = 1; i < xv.size(); ++i) {
      if (xv[i] < xv[imin]) imin = i;  // strict: first attaining index wins
      if (xv[i] > xv[imax]) imax = i;
    }
    double range = xv[imax] - xv[imin];
    bool degenerate = range < kMinmaxEps;
    Tensor out(xv.shape());
    if (degenerate) {
      for (int64_t i = 0; i < xv.size(); ++i) out[i] = std::min(std::max(xv[i], 0.0), 1.0);
    } else {
      double inv = 1.0 / range;
      for (int64_t i = 0; i < xv.size(); ++i) out[i] = (xv[i] - xv[imin]) * inv;
    }
    TapeNode nd{OpKind::minmax_normalize, std::move(out), {x}, false};
    nd.flag = degenerate;
    nd.ints = {static_cast<int>(imin), static_cast<int>(imax)};
    return push(std::move(nd));
  }

  // Generalized-mean pooling over rows: n x d -> d, inputs floored.
  int gem_pool(int x, double p) {
    const Tensor& xv = node(x).value;
    require(xv.rank() == 2, ErrorKind::dimension, "gem_pool expects n x d");
    require(p >= 1.0, ErrorKind::usage, "gem_pool: power must be >= 1");
    int n = xv.dim(0), d = xv.dim(1);
    Tensor out({d});
    for (int c = 0; c < d; ++c) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += std::pow(std::max(xv[static_cast<int64_t>(i) * d + c], kGemFloor), p);
      out[c] = std::pow(s / n, 1.0 / p);
    }
    TapeNode nd{OpKind::gem_pool, std::move(out), {x}, false};
    nd.a = p;
    return push(std::move(nd));
  }

  // Batch normalization in training form. Statistics are computed over the
  // first m rows only and applied to every row, so extra rows (reconstructed
  // descriptors) are normalized by the original batch's statistics without
  // influencing them.
  int batchnorm_train(int x, int gamma, int shift, int m) {
    const Tensor& xv = node(x).value;
    const Tensor& gv = node(gamma).value;
    const Tensor& sv = node(shift).value;
    require(xv.rank() == 2, ErrorKind::dimension, "batchnorm_train expects n x d");
    int n = xv.dim(0), d = xv.dim(1);
    require(gv.rank() == 1 && gv.dim(0) == d && sv.rank() == 1 && sv.dim(0) == d, ErrorKind::dimension,
            "batchnorm_train: parameter shape mismatch");
    require(m >= 1 && m <= n, ErrorKind::usage, "batchnorm_train: stat rows ", m, " out of range for ", n);
    Tensor inv_std({d});
    Tensor xhat({n, d});
    Tensor out({n, d});
    for (int c = 0; c < d; ++c) {
      double mean = 0;
      for (int i = 0; i < m; ++i) mean += xv[static_cast<int64_t>(i) * d + c];
      mean /= m;
      double var = 0;
      for (int i = 0; i < m; ++i) {
        double diff = xv[static_cast<int64_t>(i) * d + c] - mean;
        var += diff * diff;
      }
      var /= m;
      double s = 1.0 / std::sqrt(var + kBnEpsTape);
      inv_std[c] = s;
      for (int i = 0; i < n; ++i) {
        double xh = (xv[static_cast<int64_t>(i) * d + c] - mean) * s;
        xhat[static_cast<int64_t>(i) * d + c] = xh;
        out[static_cast<int64_t>(i) * d + c] = gv[c] * xh + sv[c];
      }
    }
    TapeNode nd{OpKind::batchnorm_train, std::move(out), {x, gamma, shift}, false};
    nd.i0 = m;
    nd.aux0 = std::move(inv_std);
    nd.aux1 = std::move(xhat);
    return push(std::move(nd));
  }

  // Mean cross-entropy over rows of logits against integer labels.
  int cross_entropy_mean(int logits, std::vector<int> labels) {
    const Tensor& lv = node(logits).value;
    require(lv.rank() == 2, ErrorKind::dimension, "cross_entropy_mean expects n x K logits");
    int n = lv.dim(0), k = lv.dim(1);
    require(static_cast<int>(labels.size()) == n, ErrorKind::dimension, "cross_entropy_mean: ", labels.size(),
            " labels for ", n, " rows");
    Tensor probs({n, k});
    double total = 0;
    for (int i = 0; i < n; ++i) {
      int label = labels[i];
      require(label >= 0 && label < k, ErrorKind::usage, "cross_entropy_mean: label ", label,
              " out of range for ", k, " classes");
      const double* r = lv.data() + static_cast<int64_t>(i) * k;
      double* p = probs.data() + static_cast<int64_t>(i) * k;
      double hi = r[0];
      for (int j = 1; j < k; ++j) hi = std::max(hi, r[j]);
      double z = 0;
      for (int j = 0; j < k; ++j) {
        p[j] = std::exp(r[j] - hi);
        z += p[j];
      }
      for (int j = 0; j < k; ++j) p[j] /= z;
      total += std::log(z) + hi - r[label];
    }
    TapeNode nd{OpKind::cross_entropy_mean, Tensor::scalar(total / n), {logits}, false};
    nd.ints = std::move(labels);
    nd.aux0 = std::move(probs);
    return push(std::move(nd));
  }

  // Row-blend: out_p = m_p * s_p + (1 - m_p) * t_p, with t, s: n x d, m: n.
  int lerp_rows(int t, int s, int m) {
    const Tensor& tv = node(t).value;
    const Tensor& sv = node(s).value;
    const Tensor& mv = node(m).value;
    require(tv.rank() == 2 && sv.same_shape(tv), ErrorKind::dimension, "lerp_rows: field shape mismatch");
    require(mv.rank() == 1 && mv.dim(0) == tv.dim(0), ErrorKind::dimension, "lerp_rows: mask shape mismatch");
    int n = tv.dim(0), d = tv.dim(1);
    Tensor out(tv.shape());
    for (int i = 0; i < n; ++i) {
      double w = mv[i];
      for (int c = 0; c < d; ++c)
        out[static_cast<int64_t>(i) * d + c] =
            w * sv[static_cast<int64_t>(i) * d + c] + (1.0 - w) * tv[static_cast<int64_t>(i) * d + c];
    }
    return push({OpKind::lerp_rows, std::move(out), {t, s, m}, false});
  }

  int concat_rows(const std::vector<int>& xs) {
    require(!xs.empty(), ErrorKind::usage, "concat_rows: empty operand list");
    int d = node(xs[0]).value.dim(1);
    int total = 0;
    for (int x : xs) {
      const Tensor& v = node(x).value;
      require(v.rank() == 2 && v.dim(1) == d, ErrorKind::dimension, "concat_rows: operand shape mismatch");
      total += v.dim(0);
    }
    Tensor out({total, d});
    int row = 0;
    for (int x : xs) {
      const Tensor& v = node(x).value;
      std::copy(v.data(), v.data() + v.size(), out.data() + static_cast<int64_t>(row) * d);
      row += v.dim(0);
    }
    return push({OpKind::concat_rows, std::move(out), xs, false});
  }

  int slice_rows(int x, int begin, int count) {
    const Tensor& xv = node(x).value;
    require(xv.rank() == 2, ErrorKind::dimension, "slice_rows expects n x d");
    require(begin >= 0 && count >= 1 && begin + count <= xv.dim(0), ErrorKind::usage,
            "slice_rows: range [", begin, ", ", begin + count, ") out of ", xv.dim(0), " rows");
    int d = xv.dim(1);
    Tensor out({count, d});
    std::copy(xv.data() + static_cast<int64_t>(begin) * d, xv.data() + static_cast<int64_t>(begin + count) * d,
              out.data());
    TapeNode nd{OpKind::slice_rows, std::move(out), {x}, false};
    nd.i0 = begin;
    return push(std::move(nd));
  }

  // Batch-hard triplet over descriptor rows (n x d) with Euclidean mining;
  // same mining and mean convention as the plain loss function.
  int batch_hard_triplet(int x, const std::vector<int>& labels, double margin) {
    const Tensor& xv = node(x).value;
    require(xv.rank() == 2, ErrorKind::dimension, "batch_hard_triplet expects n x d");
    int n = xv.dim(0), d = xv.dim(1);
    require(static_cast<int>(labels.size()) == n, ErrorKind::dimension,
            "batch_hard_triplet: label count mismatch");
    bool multi = false;
    for (int i = 1; i < n && !multi; ++i) multi = labels[i] != labels[0];
    require(multi, ErrorKind::config, "batch_hard_triplet: batch has a single identity, no negatives exist");
    auto dist = [&](int i, int j) {
      const double* a = xv.data() + static_cast<int64_t>(i) * d;
      const double* b = xv.data() + static_cast<int64_t>(j) * d;
      double s = 0;
      for (int c = 0; c < d; ++c) {
        double diff = a[c] - b[c];
        s += diff * diff;
      }
      return std::sqrt(s);
    };
    std::vector<int> picks(2 * n, -1);
    double total = 0;
    int anchors = 0;
    for (int i = 0; i < n; ++i) {
      int pos = -1, neg = -1;
      double dpos = -1, dneg = -1;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        double dij = dist(i, j);
        if (labels[j] == labels[i]) {
          if (dij > dpos) {
            dpos = dij;
            pos = j;
          }
        } else if (neg < 0 || dij < dneg) {
          dneg = dij;
          neg = j;
        }
      }
      if (pos < 0 || neg < 0) continue;
      picks[2 * i] = pos;
      picks[2 * i + 1] = neg;
      total += std::max(0.0, dpos - dneg + margin);
      ++anchors;
    }
    require(anchors > 0, ErrorKind::config, "batch_hard_triplet: no anchor has a positive pair");
    TapeNode nd{OpKind::batch_hard_triplet, Tensor::scalar(total / anchors), {x}, false};
    nd.a = margin;
    nd.i0 = anchors;
    nd.ints = std::move(picks);  // picks [2i], [2i+1], then the labels
    nd.ints.insert(nd.ints.end(), labels.begin(), labels.end());
    return push(std::move(nd));
  }

  // Attention-weighted hinge over positions: sum_p a_p [dpos_p - dneg_p + alpha]_+,
  // optionally divided by sum_p a_p. The attention vector is a detached
  // constant by contract, so it is captured by value rather than as a node.
  int dense_hinge(int dpos, int dneg, Tensor attention, double alpha, bool normalize) {
    const Tensor& pv = node(dpos).value;
    const Tensor& nv = node(dneg).value;
    require(pv.rank() == 1 && nv.same_shape(pv) && attention.same_shape(pv), ErrorKind::dimension,
            "dense_hinge: position vectors must share shape");
    double total = 0, mass = 0;
    for (int64_t i = 0; i < pv.size(); ++i) {
      total += attention[i] * std::max(0.0, pv[i] - nv[i] + alpha);
      mass += attention[i];
    }
    double value = total;
    if (normalize) value = mass > kMinmaxEps ? total / mass : 0.0;
    TapeNode nd{OpKind::dense_hinge, Tensor::scalar(value), {dpos, dneg}, false};
    nd.a = alpha;
    nd.flag = normalize;
    nd.aux0 = std::move(attention);
    nd.aux1 = Tensor::scalar(mass);
    return push(std::move(nd));
  }

  GradientSet backward(int root) const;

  // Batch statistics of a batchnorm_train node, for the trainer's running
  // averages: per-channel mean and biased variance over the stat rows.
  std::pair<Tensor, Tensor> batchnorm_stats(int id) const {
    const TapeNode& nd = node(id);
    require(nd.op == OpKind::batchnorm_train, ErrorKind::usage, "batchnorm_stats: not a batchnorm node");
    const Tensor& xv = node(nd.inputs[0]).value;
    int d = xv.dim(1), m = nd.i0;
    Tensor mean({d}), var({d});
    for (int c = 0; c < d; ++c) {
      double mu = 0;
      for (int i = 0; i < m; ++i) mu += xv[static_cast<int64_t>(i) * d + c];
      mu /= m;
      double v = 0;
      for (int i = 0; i < m; ++i) {
        double diff = xv[static_cast<int64_t>(i) * d + c] - mu;
        v += diff * diff;
      }
      mean[c] = mu;
      var[c] = v / m;
    }
    return {std::move(mean), std::move(var)};
  }

 private:
  std::vector<TapeNode> nodes_;

  const TapeNode& node(int id) const {
    require(id >= 0 && id < size(), ErrorKind::usage, "tape node id ", id, " out of range");
    return nodes_[static_cast<size_t>(id)];
  }

  int push(TapeNode n) {
    if (n.op != OpKind::leaf && n.op != OpKind::constant) {
      for (int in : n.inputs) n.needs_grad = n.needs_grad || node(in).needs_grad;
    }
    require(n.value.all_finite(), ErrorKind::numeric, "non-finite value produced by ", op_name(n.op));
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  template <typename F>
  int binary_elementwise(OpKind op, int x, int y, F fn) {
    const Tensor& xv = node(x).value;
    const Tensor& yv = node(y).value;
    require(xv.same_shape(yv), ErrorKind::dimension, op_name(op), ": shape mismatch ",
            shape_str(xv.shape()), " vs ", shape_str(yv.shape()));
    Tensor out(xv.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = fn(xv[i], yv[i]);
    return push({op, std::move(out), {x, y}, false});
  }

  static constexpr double kBnEpsTape = 1e-5;
};

inline GradientSet Tape::backward(int root) const {
  require(root >= 0 && root < size(), ErrorKind::usage, "backward: root id out of range");
  require(node(root).value.size() == 1, ErrorKind::usage, "backward: root must be scalar, got shape ",
          shape_str(node(root).value.shape()));
  std::vector<Tensor> grads(nodes_.size());
  std::vector<Shape> shapes(nodes_.size());
  for (size_t i = 0; i < nodes_.size(); ++i) shapes[i] = nodes_[i].value.shape();
  grads[static_cast<size_t>(root)] = Tensor(node(root).value.shape());
  grads[static_cast<size_t>(root)][0] = 1.0;

  auto grad_buf = [&](int id) -> Tensor* {
    if (!nodes_[static_cast<size_t>(id)].needs_grad) return nullptr;
    Tensor& g = grads[static_cast<size_t>(id)];
    if (g.empty()) g = Tensor(shapes[static_cast<size_t>(id)]);
    return &g;
  };

  for (int id = root; id >= 0; --id) {
    const TapeNode& nd = nodes_[static_cast<size_t>(id)];
    const Tensor& g = grads[static_cast<size_t>(id)];
    if (g.empty() || !nd.needs_grad) continue;
    require(g.all_finite(), ErrorKind::numeric, "non-finite gradient at ", op_name(nd.op));
    switch (nd.op) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::reshape: {
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        break;
      }
      case OpKind::add: {
        for (int k = 0; k < 2; ++k)
          if (Tensor* gx = grad_buf(nd.inputs[k]))
            for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        break;
      }
      case OpKind::sub: {
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (Tensor* gy = grad_buf(nd.inputs[1]))
          for (int64_t i = 0; i < g.size(); ++i) (*gy)[i] -= g[i];
        break;
      }
      case OpKind::mul: {
        const Tensor& xv = node(nd.inputs[0]).value;
        const Tensor& yv = node(nd.inputs[1]).value;
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * yv[i];
        if (Tensor* gy = grad_buf(nd.inputs[1]))
          for (int64_t i = 0; i < g.size(); ++i) (*gy)[i] += g[i] * xv[i];
        break;
      }
      case OpKind::scale: {
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * nd.a;
        break;
      }
      case OpKind::add_scalar: {
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        break;
      }
      case OpKind::add_n: {
        for (int in : nd.inputs)
          if (Tensor* gx = grad_buf(in))
            for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        break;
      }
      case OpKind::relu: {
        const Tensor& xv = node(nd.inputs[0]).value;
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0) (*gx)[i] += g[i];
        break;
      }
      case OpKind::sum: {
        if (Tensor* gx = grad_buf(nd.inputs[0]))
          for (int64_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0];
        break;
      }
      case OpKind::conv2d: {
        const Tensor& xv = node(nd.inputs[0]).value;
        const Tensor& wv = node(nd.inputs[1]).value;
        int h = xv.dim(0), wd = xv.dim(1), cin = xv.dim(2);
        int kh = wv.dim(0), kw = wv.dim(1), cout = wv.dim(3);
        int stride = nd.i0, ph = kh / 2, pw = kw / 2;
        int oh = nd.value.dim(0), ow = nd.value.dim(1);
        Tensor* gx = grad_buf(nd.inputs[0]);
        Tensor* gw = grad_buf(nd.inputs[1]);
        Tensor* gb = grad_buf(nd.inputs[2]);
        for (int oi = 0; oi < oh; ++oi) {
          for (int oj = 0; oj < ow; ++oj) {
            const double* go = g.data() + (static_cast<int64_t>(oi) * ow + oj) * cout;
            if (gb)
              for (int co = 0; co < cout; ++co) (*gb)[co] += go[co];
            for (int di = 0; di < kh; ++di) {
              int ii = oi * stride + di - ph;
              if (ii < 0 || ii >= h) continue;
              for (int dj = 0; dj < kw; ++dj) {
                int jj = oj * stride + dj - pw;
                if (jj < 0 || jj >= wd) continue;
                const double* xp = xv.data() + (static_cast<int64_t>(ii) * wd + jj) * cin;
                const double* wp = wv.data() + (static_cast<int64_t>(di) * kw + dj) * cin * cout;
                for (int ci = 0; ci < cin; ++ci) {
                  const double* wr = wp + static_cast<int64_t>(ci) * cout;
                  if (gx) {
                    double s = 0;
                    for (int co = 0; co < cout; ++co) s += wr[co] * go[co];
                    (*gx)[(static_cast<int64_t>(ii) * wd + jj) * cin + ci] += s;
                  }
                  if (gw) {
                    double xvl = xp[ci];
                    double* gwr = gw->data() + (static_cast<int64_t>(di) * kw + dj) * cin * cout +
                                  static_cast<int64_t>(ci) * cout;
                    for (int co = 0; co < cout; ++co) gwr[co] += xvl * go[co];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case OpKind::rows_normalize: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& xv = node(nd.inputs[0]).value;
        const Tensor& yv = nd.value;
        int n = xv.dim(0), d = xv.dim(1);
        for (int i = 0; i < n; ++i) {
          double norm = nd.aux0[i];
          const double* gr = g.data() + static_cast<int64_t>(i) * d;
          double* go = gx->data() + static_cast<int64_t>(i) * d;
          if (norm > nd.a) {
            const double* yr = yv.data() + static_cast<int64_t>(i) * d;
            double dot = 0;
            for (int c = 0; c < d; ++c) dot += gr[c] * yr[c];
            double inv = 1.0 / norm;
            for (int c = 0; c < d; ++c) go[c] += (gr[c] - yr[c] * dot) * inv;
          } else {
            double inv = 1.0 / nd.a;
            for (int c = 0; c < d; ++c) go[c] += gr[c] * inv;
          }
        }
        break;
      }
      case OpKind::matmul_nt: {
        const Tensor& av = node(nd.inputs[0]).value;
        const Tensor& bv = node(nd.inputs[1]).value;
        int n = av.dim(0), m = bv.dim(0), d = av.dim(1);
        if (Tensor* ga = grad_buf(nd.inputs[0])) {
          for (int i = 0; i < n; ++i) {
            const double* gr = g.data() + static_cast<int64_t>(i) * m;
            double* go = ga->data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < m; ++j) {
              double gij = gr[j];
              if (gij == 0.0) continue;
              const double* br = bv.data() + static_cast<int64_t>(j) * d;
              for (int c = 0; c < d; ++c) go[c] += gij * br[c];
            }
          }
        }
        if (Tensor* gb = grad_buf(nd.inputs[1])) {
          for (int i = 0; i < n; ++i) {
            const double* gr = g.data() + static_cast<int64_t>(i) * m;
            const double* ar = av.data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < m; ++j) {
              double gij = gr[j];
              if (gij == 0.0) continue;
              double* go = gb->data() + static_cast<int64_t>(j) * d;
              for (int c = 0; c < d; ++c) go[c] += gij * ar[c];
            }
          }
        }
        break;
      }
      case OpKind::matmul_nn: {
        const Tensor& av = node(nd.inputs[0]).value;
        const Tensor& bv = node(nd.inputs[1]).value;
        int n = av.dim(0), m = av.dim(1), d = bv.dim(1);
        if (Tensor* ga = grad_buf(nd.inputs[0])) {
          for (int i = 0; i < n; ++i) {
            const double* gr = g.data() + static_cast<int64_t>(i) * d;
            double* go = ga->data() + static_cast<int64_t>(i) * m;
            for (int k = 0; k < m; ++k) {
              const double* br = bv.data() + static_cast<int64_t>(k) * d;
              double s = 0;
              for (int c = 0; c < d; ++c) s += gr[c] * br[c];
              go[k] += s;
            }
          }
        }
        if (Tensor* gb = grad_buf(nd.inputs[1])) {
          for (int i = 0; i < n; ++i) {
            const double* gr = g.data() + static_cast<int64_t>(i) * d;
            const double* ar = av.data() + static_cast<int64_t>(i) * m;
            for (int k = 0; k < m; ++k) {
              double aik = ar[k];
              if (aik == 0.0) continue;
              double* go = gb->data() + static_cast<int64_t>(k) * d;
              for (int c = 0; c < d; ++c) go[c] += aik * gr[c];
            }
          }
        }
        break;
      }
      case OpKind::softmax_rows: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& yv = nd.value;
        int n = yv.dim(0), m = yv.dim(1);
        for (int i = 0; i < n; ++i) {
          const double* yr = yv.data() + static_cast<int64_t>(i) * m;
          const double* gr = g.data() + static_cast<int64_t>(i) * m;
          double dot = 0;
          for (int j = 0; j < m; ++j) dot += gr[j] * yr[j];
          double* go = gx->data() + static_cast<int64_t>(i) * m;
          for (int j = 0; j < m; ++j) go[j] += nd.a * yr[j] * (gr[j] - dot);
        }
        break;
      }
      case OpKind::l2norm_rows: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& xv = node(nd.inputs[0]).value;
        int n = xv.dim(0), d = xv.dim(1);
        for (int i = 0; i < n; ++i) {
          double norm = nd.value[i];
          if (norm <= 0) continue;  // kink at the origin: subgradient 0
          double gi = g[i] / norm;
          const double* xr = xv.data() + static_cast<int64_t>(i) * d;
          double* go = gx->data() + static_cast<int64_t>(i) * d;
          for (int c = 0; c < d; ++c) go[c] += gi * xr[c];
        }
        break;
      }
      case OpKind::minmax_normalize: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& xv = node(nd.inputs[0]).value;
        if (nd.flag) {
          // degenerate clamp: pass-through strictly inside (0,1)
          for (int64_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0 && xv[i] < 1.0) (*gx)[i] += g[i];
        } else {
          int64_t imin = nd.ints[0], imax = nd.ints[1];
          double range = xv[imax] - xv[imin];
          double gsum = 0, gydot = 0;
          for (int64_t i = 0; i < g.size(); ++i) {
            gsum += g[i];
            gydot += g[i] * nd.value[i];
          }
          double inv = 1.0 / range;
          for (int64_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * inv;
          (*gx)[imin] += (-gsum + gydot) * inv;
          (*gx)[imax] -= gydot * inv;
        }
        break;
      }
      case OpKind::gem_pool: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& xv = node(nd.inputs[0]).value;
        int n = xv.dim(0), d = xv.dim(1);
        double p = nd.a;
        for (int c = 0; c < d; ++c) {
          double y = nd.value[c];
          double coeff = g[c] * std::pow(y, 1.0 - p) / n;
          for (int i = 0; i < n; ++i) {
            double x = xv[static_cast<int64_t>(i) * d + c];
            if (x <= kGemFloor) continue;  // clamped region: zero gradient
            (*gx)[static_cast<int64_t>(i) * d + c] += coeff * std::pow(x, p - 1.0);
          }
        }
        break;
      }
      case OpKind::batchnorm_train: {
        const Tensor& xhat = nd.aux1;
        const Tensor& inv_std = nd.aux0;
        const Tensor& gv = node(nd.inputs[1]).value;
        int n = xhat.dim(0), d = xhat.dim(1), m = nd.i0;
        Tensor* gx = grad_buf(nd.inputs[0]);
        Tensor* gg = grad_buf(nd.inputs[1]);
        Tensor* gs = grad_buf(nd.inputs[2]);
        for (int c = 0; c < d; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (int i = 0; i < n; ++i) {
            double gi = g[static_cast<int64_t>(i) * d + c];
            sum_g += gi;
            sum_gx += gi * xhat[static_cast<int64_t>(i) * d + c];
          }
          if (gg) (*gg)[c] += sum_gx;
          if (gs) (*gs)[c] += sum_g;
          if (gx) {
            // With ghat = gamma * g, the normalized-input gradient is
            //   gx_i = inv_std * ghat_i                              (i >= m)
            //   gx_i = inv_std * (ghat_i - (1/m)(sum_j ghat_j
            //           + xhat_i * sum_j ghat_j xhat_j))             (i <  m)
            // where sums run over ALL rows: non-stat rows still pull on the
            // statistics' sources through their normalized values.
            double ghat_sum = gv[c] * sum_g;
            double ghat_dot = gv[c] * sum_gx;
            for (int i = 0; i < n; ++i) {
              double ghat = gv[c] * g[static_cast<int64_t>(i) * d + c];
              double v = inv_std[c] * ghat;
              if (i < m)
                v -= inv_std[c] / m * (ghat_sum + xhat[static_cast<int64_t>(i) * d + c] * ghat_dot);
              (*gx)[static_cast<int64_t>(i) * d + c] += v;
            }
          }
        }
        break;
      }
      case OpKind::cross_entropy_mean: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& probs = nd.aux0;
        int n = probs.dim(0), k = probs.dim(1);
        double scale = g[0] / n;
        for (int i = 0; i < n; ++i) {
          const double* pr = probs.data() + static_cast<int64_t>(i) * k;
          double* go = gx->data() + static_cast<int64_t>(i) * k;
          for (int j = 0; j < k; ++j) go[j] += scale * pr[j];
          go[nd.ints[static_cast<size_t>(i)]] -= scale;
        }
        break;
      }
      case OpKind::lerp_rows: {
        const Tensor& tv = node(nd.inputs[0]).value;
        const Tensor& sv = node(nd.inputs[1]).value;
        const Tensor& mv = node(nd.inputs[2]).value;
        int n = tv.dim(0), d = tv.dim(1);
        Tensor* gt = grad_buf(nd.inputs[0]);
        Tensor* gs = grad_buf(nd.inputs[1]);
        Tensor* gm = grad_buf(nd.inputs[2]);
        for (int i = 0; i < n; ++i) {
          double w = mv[i];
          const double* gr = g.data() + static_cast<int64_t>(i) * d;
          double mdot = 0;
          for (int c = 0; c < d; ++c) {
            if (gt) (*gt)[static_cast<int64_t>(i) * d + c] += gr[c] * (1.0 - w);
            if (gs) (*gs)[static_cast<int64_t>(i) * d + c] += gr[c] * w;
            mdot += gr[c] * (sv[static_cast<int64_t>(i) * d + c] - tv[static_cast<int64_t>(i) * d + c]);
          }
          if (gm) (*gm)[i] += mdot;
        }
        break;
      }
      case OpKind::concat_rows: {
        int row = 0;
        int d = nd.value.dim(1);
        for (int in : nd.inputs) {
          int rows = node(in).value.dim(0);
          if (Tensor* gx = grad_buf(in)) {
            for (int64_t i = 0; i < static_cast<int64_t>(rows) * d; ++i)
              (*gx)[i] += g[static_cast<int64_t>(row) * d + i];
          }
          row += rows;
        }
        break;
      }
      case OpKind::slice_rows: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        int d = nd.value.dim(1);
        int64_t offset = static_cast<int64_t>(nd.i0) * d;
        for (int64_t i = 0; i < g.size(); ++i) (*gx)[offset + i] += g[i];
        break;
      }
      case OpKind::batch_hard_triplet: {
        Tensor* gx = grad_buf(nd.inputs[0]);
        if (!gx) break;
        const Tensor& xv = node(nd.inputs[0]).value;
        int n = xv.dim(0), d = xv.dim(1);
        double scale = g[0] / nd.i0;
        for (int i = 0; i < n; ++i) {
          int pos = nd.ints[static_cast<size_t>(2 * i)];
          int neg = nd.ints[static_cast<size_t>(2 * i) + 1];
          if (pos < 0) continue;
          auto pair_dist = [&](int j) {
            double s = 0;
            for (int c = 0; c < d; ++c) {
              double diff = xv[static_cast<int64_t>(i) * d + c] - xv[static_cast<int64_t>(j) * d + c];
              s += diff * diff;
            }
            return std::sqrt(s);
          };
          double dpos = pair_dist(pos), dneg = pair_dist(neg);
          if (dpos - dneg + nd.a <= 0) continue;  // inactive hinge
          if (dpos > 0) {
            double w = scale / dpos;
            for (int c = 0; c < d; ++c) {
              double diff = xv[static_cast<int64_t>(i) * d + c] - xv[static_cast<int64_t>(pos) * d + c];
              (*gx)[static_cast<int64_t>(i) * d + c] += w * diff;
              (*gx)[static_cast<int64_t>(pos) * d + c] -= w * diff;
            }
          }
          if (dneg > 0) {
            double w = scale / dneg;
            for (int c = 0; c < d; ++c) {
              double diff = xv[static_cast<int64_t>(i) * d + c] - xv[static_cast<int64_t>(neg) * d + c];
              (*gx)[static_cast<int64_t>(i) * d + c] -= w * diff;
              (*gx)[static_cast<int64_t>(neg) * d + c] += w * diff;
            }
          }
        }
        break;
      }
      case OpKind::dense_hinge: {
        const Tensor& pv = node(nd.inputs[0]).value;
        const Tensor& nv = node(nd.inputs[1]).value;
        const Tensor& att = nd.aux0;
        double mass = nd.aux1[0];
        double scale = g[0];
        if (nd.flag) scale = mass > kMinmaxEps ? g[0] / mass : 0.0;
        Tensor* gp = grad_buf(nd.inputs[0]);
        Tensor* gn = grad_buf(nd.inputs[1]);
        for (int64_t i = 0; i < pv.size(); ++i) {
          if (pv[i] - nv[i] + nd.a <= 0) continue;
          double w = scale * att[i];
          if (gp) (*gp)[i] += w;
          if (gn) (*gn)[i] -= w;
        }
        break;
      }
    }
  }
  // Materialize zeros for untouched leaves so "independent leaf -> zero
  // gradient" reads back directly.
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == OpKind::leaf && grads[i].empty()) grads[i] = Tensor(shapes[i]);
  return GradientSet(std::move(grads), std::move(shapes));
}

// Central-difference comparison utility: fn re-evaluates the scalar output
// from scratch for perturbed inputs, analytic holds the tape's gradients in
// the same order. Returns the max relative error over all coordinates.
inline double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& fn,
                                std::vector<Tensor> inputs, const std::vector<Tensor>& analytic,
                                double step) {
  require(step > 0, ErrorKind::usage, "finite_diff_check: step must be > 0");
  require(inputs.size() == analytic.size(), ErrorKind::usage,
          "finite_diff_check: inputs/gradients count mismatch");
  double worst = 0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    require(inputs[k].same_shape(analytic[k]), ErrorKind::dimension,
            "finite_diff_check: gradient shape mismatch at input ", k);
    for (int64_t i = 0; i < inputs[k].size(); ++i) {
      double saved = inputs[k][i];
      inputs[k][i] = saved + step;
      double up = fn(inputs);
      inputs[k][i] = saved - step;
      double down = fn(inputs);
      inputs[k][i] = saved;
      require(std::isfinite(up) && std::isfinite(down), ErrorKind::numeric,
              "finite_diff_check: non-finite value at perturbed point");
      double numeric = (up - down) / (2 * step);
      double a = analytic[k][i];
      double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace cmalign
