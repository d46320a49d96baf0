#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cmalign/align.hpp"
#include "cmalign/autograd.hpp"
#include "cmalign/config.hpp"
#include "cmalign/data.hpp"
#include "cmalign/field.hpp"
#include "cmalign/model.hpp"
#include "cmalign/tensor.hpp"

namespace cmalign {

struct LrPair {
  double backbone = 0;
  double head = 0;
};

// Linear warmup to the base rates over [0, warmup_epochs), base thereafter,
// divided by decay_factor at each decay epoch (cumulative).
inline LrPair lr_schedule(const Config::Train& tc, int epoch) {
  require(epoch >= 0, ErrorKind::usage, "lr_schedule: epoch must be >= 0");
  double f = 1.0;
  if (tc.warmup_epochs > 0 && epoch < tc.warmup_epochs)
    f = static_cast<double>(epoch + 1) / static_cast<double>(tc.warmup_epochs);
  for (int d : tc.decay_epochs)
    if (epoch >= d) f /= tc.decay_factor;
  return {tc.base_lr_backbone * f, tc.base_lr_head * f};
}

// An identity-balanced cross-modal batch: the same identities appear in both
// modality halves, images_per_identity images each. Slot i of each half holds
// identity ids[i / images_per_identity].
struct Batch {
  std::vector<int> ids;      // labels, identities_per_modality of them
  std::vector<int> a_items;  // dataset image indices, modality a half
  std::vector<int> b_items;  // modality b half, same id layout
};

namespace detail {

// Deals items without replacement from a fixed universe, reshuffling when
// exhausted; items in `exclude` are skipped (universe must be larger than any
// exclude set passed in).
class Deck {
 public:
  explicit Deck(std::vector<int> universe) : universe_(std::move(universe)) {}

  void reset() { pool_.clear(); }

  int deal(Rng& rng, const std::vector<int>& exclude) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      while (!pool_.empty()) {
        int item = pool_.back();
        pool_.pop_back();
        if (std::find(exclude.begin(), exclude.end(), item) == exclude.end()) return item;
      }
      pool_ = universe_;
      rng.shuffle(pool_);
    }
    raise(ErrorKind::data, "sampler: universe of ", universe_.size(),
          " items cannot satisfy the exclusion set");
  }

 private:
  std::vector<int> universe_;
  std::vector<int> pool_;
};

}  // namespace detail

// Epoch-wise sampler: a shuffled identity deck dealt identities_per_modality
// at a time, and per-(identity, modality) image decks dealt
// images_per_identity at a time, all without replacement until a deck runs
// out. Deterministic given the seed.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, int identities_per_batch, int images_per_identity, Rng rng)
      : ds_(&ds), p_(identities_per_batch), k_(images_per_identity), rng_(rng) {
    require(p_ >= 2, ErrorKind::config, "sampler: need at least 2 identities per batch");
    require(k_ >= 1, ErrorKind::config, "sampler: images per identity must be >= 1");
    require(ds.n_identities >= p_, ErrorKind::data, "dataset has ", ds.n_identities,
            " identities but batches need ", p_);
    std::vector<int> labels(static_cast<size_t>(ds.n_identities));
    for (int i = 0; i < ds.n_identities; ++i) labels[static_cast<size_t>(i)] = i;
    for (int label : labels)
      for (int mod = 0; mod < 2; ++mod) {
        const std::vector<int>& pool = ds.pool(label, mod);
        require(static_cast<int>(pool.size()) >= k_, ErrorKind::data, "identity ",
                ds.images[static_cast<size_t>(pool.empty() ? 0 : pool[0])].identity,
                " has only ", pool.size(), " images in modality ", kModalityNames[mod],
                " but batches need ", k_);
        image_decks_.emplace_back(pool);
      }
    id_deck_ = std::make_unique<detail::Deck>(std::move(labels));
  }

  int batch_size() const { return 2 * p_ * k_; }

  int steps_per_epoch() const {
    return std::max<int>(1, static_cast<int>(ds_->images.size()) / batch_size());
  }

  void start_epoch() {
    id_deck_->reset();
    for (detail::Deck& d : image_decks_) d.reset();
  }

  Batch next_batch() {
    Batch batch;
    for (int p = 0; p < p_; ++p) batch.ids.push_back(id_deck_->deal(rng_, batch.ids));
    for (int mod = 0; mod < 2; ++mod) {
      std::vector<int>& half = mod == 0 ? batch.a_items : batch.b_items;
      for (int label : batch.ids) {
        std::vector<int> taken;
        detail::Deck& deck = image_decks_[static_cast<size_t>(label) * 2 + static_cast<size_t>(mod)];
        for (int k = 0; k < k_; ++k) taken.push_back(deck.deal(rng_, taken));
        half.insert(half.end(), taken.begin(), taken.end());
      }
    }
    return batch;
  }

 private:
  const Dataset* ds_;
  int p_, k_;
  Rng rng_;
  std::unique_ptr<detail::Deck> id_deck_;
  std::vector<detail::Deck> image_decks_;  // [label * 2 + modality]
};

struct LossValues {
  double l_id = 0, l_ic = 0, l_dt = 0, l_total = 0;
};

struct StepRecord {
  int epoch = 0, step = 0;
  LossValues losses;
  double lr_backbone = 0, lr_head = 0;
  double grad_norm_backbone = 0, grad_norm_head = 0;
};

using TrainLog = std::vector<StepRecord>;

namespace detail {

struct AssembledLosses {
  int total = -1;  // tape node of the weighted objective
  int bn = -1;     // batchnorm node, for running-statistics updates
  LossValues values;
};

// Builds the full objective for one batch on the tape: identity loss on the
// original descriptors, plus -- when their weights are nonzero -- the
// consistency and dense triplet terms from cross-modal feature alignment at
// each configured depth. Zero-weight terms are skipped outright, which makes
// the degenerate configuration exactly the identity-only step.
inline AssembledLosses assemble_losses(Tape& tape, const TwoStream& model,
                                       const TwoStream::ParamNodes& pn, const Dataset& ds,
                                       const Batch& batch, const Config::Loss& lc,
                                       const std::vector<int>& layers) {
  const int half = static_cast<int>(batch.a_items.size());
  require(half > 0 && static_cast<int>(batch.b_items.size()) == half, ErrorKind::usage,
          "assemble_losses: malformed batch");
  const int b = 2 * half;
  const bool with_ic = lc.lambda_ic != 0.0;
  const bool with_dt = lc.lambda_dt != 0.0;
  const bool with_align = with_ic || with_dt;

  // Per-image forward passes and pooled descriptors, batch order a-half then
  // b-half.
  std::vector<int> items(batch.a_items);
  items.insert(items.end(), batch.b_items.begin(), batch.b_items.end());
  std::vector<int> labels;
  std::vector<TwoStream::ImageMaps> maps;
  std::vector<int> desc_rows;
  labels.reserve(static_cast<size_t>(b));
  maps.reserve(static_cast<size_t>(b));
  desc_rows.reserve(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    const DatasetImage& img = ds.images[static_cast<size_t>(items[static_cast<size_t>(i)])];
    int node = tape.constant(img.pixels);
    maps.push_back(model.forward_image(tape, pn, node, img.modality));
    int d = model.descriptor_from_rows(tape, pn, maps.back().l5_rows, 5, maps.back().d5, lc.gem_p);
    desc_rows.push_back(tape.reshape(d, {1, TwoStream::kC5}));
    labels.push_back(img.label);
  }
  int descriptors = tape.concat_rows(desc_rows);  // b x d, pre-normalization

  // Hardest cross-modal positive and negative per anchor, mined on the
  // pooled descriptor values (first occurrence wins ties).
  const Tensor& desc_v = tape.value(descriptors);
  auto dist = [&](int i, int j) {
    const double* x = desc_v.data() + static_cast<int64_t>(i) * TwoStream::kC5;
    const double* y = desc_v.data() + static_cast<int64_t>(j) * TwoStream::kC5;
    double s = 0;
    for (int c = 0; c < TwoStream::kC5; ++c) s += (x[c] - y[c]) * (x[c] - y[c]);
    return std::sqrt(s);
  };
  std::vector<int> mined_pos(static_cast<size_t>(b), -1), mined_neg(static_cast<size_t>(b), -1);
  if (with_align)
    for (int i = 0; i < b; ++i) {
      int other_begin = i < half ? half : 0;
      double worst_pos = -1, best_neg = 0;
      for (int j = other_begin; j < other_begin + half; ++j) {
        double d = dist(i, j);
        if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
          if (d > worst_pos) {
            worst_pos = d;
            mined_pos[static_cast<size_t>(i)] = j;
          }
        } else if (mined_neg[static_cast<size_t>(i)] < 0 || d < best_neg) {
          best_neg = d;
          mined_neg[static_cast<size_t>(i)] = j;
        }
      }
      require(mined_pos[static_cast<size_t>(i)] >= 0, ErrorKind::pairing, "anchor ", i,
              " (identity ", ds.images[static_cast<size_t>(items[static_cast<size_t>(i)])].identity,
              ") has no cross-modal positive in the batch");
      require(mined_neg[static_cast<size_t>(i)] >= 0, ErrorKind::pairing, "anchor ", i,
              " has no cross-modal negative in the batch");
    }

  // Lazily built per-(image, layer) nodes shared across pairings.
  struct LayerNodes {
    int rows = -1, unit = -1, mask = -1, mask_col = -1;
  };
  std::vector<std::array<LayerNodes, 2>> cache(static_cast<size_t>(b));
  auto layer_slot = [&](int layer) { return layer == 4 ? 0 : 1; };
  auto image_layer = [&](int i, int layer) -> LayerNodes& {
    LayerNodes& ln = cache[static_cast<size_t>(i)][static_cast<size_t>(layer_slot(layer))];
    if (ln.rows < 0) {
      const TwoStream::ImageMaps& m = maps[static_cast<size_t>(i)];
      ln.rows = layer == 4 ? m.l4_rows : m.l5_rows;
      ln.unit = tape.rows_normalize(ln.rows, kCosineEps);
      int act = tape.l2norm_rows(ln.rows);
      ln.mask = tape.minmax_normalize(act);
      if (lc.mask_stop_gradient) ln.mask = tape.constant(tape.value(ln.mask));
      ln.mask_col = tape.reshape(ln.mask, {tape.value(ln.mask).dim(0), 1});
    }
    return ln;
  };
  auto grid_of = [&](int i, int layer) {
    const TwoStream::ImageMaps& m = maps[static_cast<size_t>(i)];
    return layer == 4 ? m.d4 : m.d5;
  };

  AssembledLosses out;

  // Identity loss: batch normalization over the original descriptors, shared
  // logits map, mean cross-entropy plus batch-hard triplet on the pre-norm
  // descriptors.
  std::vector<int> recon_desc_rows;  // per layer, then per anchor
  std::vector<std::vector<int>> dt_terms(layers.size());
  if (with_align)
    for (size_t li = 0; li < layers.size(); ++li) {
      int layer = layers[li];
      for (int i = 0; i < b; ++i) {
        const LayerNodes& tgt = image_layer(i, layer);
        const LayerNodes& pos = image_layer(mined_pos[static_cast<size_t>(i)], layer);
        int c_pos = tape.matmul_nt(tgt.unit, pos.unit);
        int p_pos = tape.softmax_rows(c_pos, lc.beta);
        int warped_pos = tape.matmul_nn(p_pos, pos.rows);

        if (with_ic) {
          int aligned = tape.lerp_rows(tgt.rows, warped_pos, tgt.mask);
          int rd = model.descriptor_from_rows(tape, pn, aligned, layer,
                                              grid_of(i, layer), lc.gem_p);
          recon_desc_rows.push_back(tape.reshape(rd, {1, TwoStream::kC5}));
        }

        if (with_dt) {
          const LayerNodes& neg = image_layer(mined_neg[static_cast<size_t>(i)], layer);
          int c_neg = tape.matmul_nt(tgt.unit, neg.unit);
          int p_neg = tape.softmax_rows(c_neg, lc.beta);
          int warped_neg = tape.matmul_nn(p_neg, neg.rows);
          int d_pos = tape.l2norm_rows(tape.sub(tgt.rows, warped_pos));
          int d_neg = tape.l2norm_rows(tape.sub(tgt.rows, warped_neg));
          int n_t = tape.value(d_pos).dim(0);
          Tensor attention;
          if (lc.use_co_attention) {
            // detached: computed from forward values, weights the hinge only
            const Tensor& p_v = tape.value(p_pos);
            const Tensor& tgt_mask_v = tape.value(tgt.mask);
            const Tensor& pos_mask_v = tape.value(pos.mask);
            int n_s = pos_mask_v.dim(0);
            Tensor raw({n_t, 1});
            for (int p = 0; p < n_t; ++p) {
              double acc = 0;
              for (int q = 0; q < n_s; ++q)
                acc += p_v[static_cast<int64_t>(p) * n_s + q] * pos_mask_v[q];
              raw[p] = tgt_mask_v[p] * acc;
            }
            attention = minmax_normalize(raw).reshaped({n_t});
          } else {
            attention = Tensor::full({n_t}, 1.0);
          }
          dt_terms[li].push_back(tape.dense_hinge(d_pos, d_neg, std::move(attention), lc.margin,
                                                  lc.normalize_dense_triplet));
        }
      }
    }

  // Normalization statistics come from the original descriptors only, so the
  // reconstructed rows are normalized by the same batch statistics without
  // influencing them.
  int head_input = descriptors;
  if (!recon_desc_rows.empty()) {
    std::vector<int> rows{descriptors};
    rows.insert(rows.end(), recon_desc_rows.begin(), recon_desc_rows.end());
    head_input = tape.concat_rows(rows);
  }
  out.bn = tape.batchnorm_train(head_input, pn.bn_gamma, pn.bn_shift, b);
  int logits = tape.matmul_nt(out.bn, pn.cls_weight);
  int ce = tape.cross_entropy_mean(tape.slice_rows(logits, 0, b), labels);
  int bht = tape.batch_hard_triplet(descriptors, labels, lc.margin);
  int l_id = tape.add(ce, bht);

  int total = l_id;
  int l_ic = -1, l_dt = -1;
  if (with_ic) {
    std::vector<int> per_layer;
    for (size_t li = 0; li < layers.size(); ++li) {
      int begin = b + static_cast<int>(li) * b;
      per_layer.push_back(tape.cross_entropy_mean(tape.slice_rows(logits, begin, b), labels));
    }
    l_ic = per_layer.size() == 1 ? per_layer[0] : tape.add_n(per_layer);
    total = tape.add(total, tape.scale(l_ic, lc.lambda_ic));
  }
  if (with_dt) {
    std::vector<int> per_layer;
    for (size_t li = 0; li < layers.size(); ++li) {
      // mean over each modality's anchors, halves summed
      int a_sum = tape.add_n(std::vector<int>(dt_terms[li].begin(), dt_terms[li].begin() + half));
      int b_sum = tape.add_n(std::vector<int>(dt_terms[li].begin() + half, dt_terms[li].end()));
      per_layer.push_back(
          tape.add(tape.scale(a_sum, 1.0 / half), tape.scale(b_sum, 1.0 / half)));
    }
    l_dt = per_layer.size() == 1 ? per_layer[0] : tape.add_n(per_layer);
    total = tape.add(total, tape.scale(l_dt, lc.lambda_dt));
  }

  out.total = total;
  out.values.l_id = tape.value(l_id)[0];
  out.values.l_ic = with_ic ? tape.value(l_ic)[0] : 0.0;
  out.values.l_dt = with_dt ? tape.value(l_dt)[0] : 0.0;
  out.values.l_total = tape.value(total)[0];
  return out;
}

}  // namespace detail

// Momentum SGD with weight decay for one parameter group.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<std::pair<std::string, Tensor*>>& params,
            const std::vector<Tensor>& grads, double lr) {
    require(params.size() == grads.size(), ErrorKind::usage, "sgd: parameter/gradient count mismatch");
    if (velocity_.empty())
      for (auto& [name, p] : params) velocity_.emplace_back(p->shape());
    for (size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k].second;
      Tensor& v = velocity_[k];
      const Tensor& g = grads[k];
      require(g.same_shape(p), ErrorKind::dimension, "sgd: gradient shape mismatch for ",
              params[k].first);
      for (int64_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + (g[i] + weight_decay_ * p[i]);
        p[i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

// Orchestrates training: owns the sampler, the optimizer state, and the
// running-statistics updates of the classifier head.
class Trainer {
 public:
  static constexpr double kBnMomentum = 0.1;

  Trainer(TwoStream& model, const Dataset& ds, const Config::Train& tc, const Config::Loss& lc)
      : model_(&model),
        ds_(&ds),
        tc_(tc),
        lc_(lc),
        sampler_(ds, static_cast<int>(tc.identities_per_modality),
                 static_cast<int>(tc.images_per_identity),
                 Rng(static_cast<uint64_t>(tc.seed)).derive(0x5a)),
        sgd_backbone_(tc.momentum, tc.weight_decay),
        sgd_head_(tc.momentum, tc.weight_decay) {
    require(model.classes() == ds.n_identities, ErrorKind::config, "model expects ",
            model.classes(), " identity classes but the dataset has ", ds.n_identities);
  }

  BatchSampler& sampler() { return sampler_; }

  // One SGD update on the batch. Loss values, learning rates, and gradient
  // norms are returned for logging.
  StepRecord train_step(const Batch& batch, int epoch, int step) {
    LrPair lr = lr_schedule(tc_, epoch);
    try {
      Tape tape;
      TwoStream::ParamNodes pn = model_->insert_params(tape, true);
      detail::AssembledLosses losses =
          detail::assemble_losses(tape, *model_, pn, *ds_, batch, lc_, tc_.cmalign_layers);
      GradientSet grads = tape.backward(losses.total);

      auto collect = [&](const std::vector<int>& ids) {
        std::vector<Tensor> out;
        out.reserve(ids.size());
        for (int id : ids) out.push_back(grads.at(id));
        return out;
      };
      std::vector<Tensor> gb = collect(TwoStream::backbone_node_ids(pn));
      std::vector<Tensor> gh = collect(TwoStream::head_node_ids(pn));

      StepRecord rec;
      rec.epoch = epoch;
      rec.step = step;
      rec.losses = losses.values;
      rec.lr_backbone = lr.backbone;
      rec.lr_head = lr.head;
      rec.grad_norm_backbone = group_norm(gb);
      rec.grad_norm_head = group_norm(gh);

      sgd_backbone_.step(model_->backbone_params(), gb, lr.backbone);
      sgd_head_.step(model_->head_params(), gh, lr.head);
      update_running_stats(tape, losses.bn);
      return rec;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numeric)
        raise(ErrorKind::numeric, "epoch ", epoch, " step ", step, ": ", e.what());
      throw;
    }
  }

  // Loss values on a batch without updating anything.
  LossValues evaluate(const Batch& batch) const {
    Tape tape;
    TwoStream::ParamNodes pn = model_->insert_params(tape, false);
    return detail::assemble_losses(tape, *model_, pn, *ds_, batch, lc_, tc_.cmalign_layers).values;
  }

  // Full training run. With a non-empty out_dir, writes per-epoch checkpoint
  // directories, a final checkpoint, and the JSON-lines log.
  TrainLog fit(const std::string& out_dir) {
    namespace fs = std::filesystem;
    TrainLog log;
    std::ostringstream jsonl;
    for (int epoch = 0; epoch < static_cast<int>(tc_.epochs); ++epoch) {
      sampler_.start_epoch();
      int steps = sampler_.steps_per_epoch();
      for (int step = 0; step < steps; ++step) {
        StepRecord rec = train_step(sampler_.next_batch(), epoch, step);
        append_log_line(jsonl, rec);
        log.push_back(rec);
      }
      if (!out_dir.empty()) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%03d", epoch + 1);
        model_->save_checkpoint((fs::path(out_dir) / "checkpoints" / name).string());
      }
    }
    if (!out_dir.empty()) {
      model_->save_checkpoint((fs::path(out_dir) / "checkpoints" / "final").string());
      write_file((fs::path(out_dir) / "train_log.jsonl").string(), jsonl.str());
    }
    return log;
  }

 private:
  static double group_norm(const std::vector<Tensor>& grads) {
    double s = 0;
    for (const Tensor& g : grads)
      for (int64_t i = 0; i < g.size(); ++i) s += g[i] * g[i];
    return std::sqrt(s);
  }

  static void append_json_number(std::ostringstream& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  }

  static void append_log_line(std::ostringstream& out, const StepRecord& rec) {
    out << "{\"epoch\":" << rec.epoch << ",\"step\":" << rec.step << ",\"L_ID\":";
    append_json_number(out, rec.losses.l_id);
    out << ",\"L_IC\":";
    append_json_number(out, rec.losses.l_ic);
    out << ",\"L_DT\":";
    append_json_number(out, rec.losses.l_dt);
    out << ",\"L_total\":";
    append_json_number(out, rec.losses.l_total);
    out << ",\"lr_backbone\":";
    append_json_number(out, rec.lr_backbone);
    out << ",\"lr_head\":";
    append_json_number(out, rec.lr_head);
    out << "}\n";
  }

  void update_running_stats(const Tape& tape, int bn_node) {
    auto [mean, var] = tape.batchnorm_stats(bn_node);
    int n = 2 * static_cast<int>(tc_.identities_per_modality * tc_.images_per_identity);
    double unbias = n > 1 ? static_cast<double>(n) / (n - 1) : 1.0;
    Tensor& rm = model_->bn_running_mean();
    Tensor& rv = model_->bn_running_var();
    for (int64_t i = 0; i < rm.size(); ++i) {
      rm[i] = (1.0 - kBnMomentum) * rm[i] + kBnMomentum * mean[i];
      rv[i] = (1.0 - kBnMomentum) * rv[i] + kBnMomentum * var[i] * unbias;
    }
  }

  TwoStream* model_;
  const Dataset* ds_;
  Config::Train tc_;
  Config::Loss lc_;
  BatchSampler sampler_;
  Sgd sgd_backbone_, sgd_head_;
};

}  // namespace cmalign
