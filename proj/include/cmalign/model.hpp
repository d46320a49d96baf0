#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cmalign/autograd.hpp"
#include "cmalign/error.hpp"
#include "cmalign/io.hpp"
#include "cmalign/rng.hpp"
#include "cmalign/tensor.hpp"

namespace cmalign {

// Two-stream convolutional extractor: modality-specific shallow stages with
// identical architecture but independent parameters, then a shared deep stage
// (single storage, reached from both modality paths). Feature maps are taken
// at two depths: after the first shared convolution (d = 32) and after the
// second (d = 64). The classifier head -- batch normalization followed by a
// bias-free linear map to identity logits -- exists for training only;
// inference uses the pooled features directly.
class TwoStream {
 public:
  static constexpr int kC1 = 16;  // shallow stage widths
  static constexpr int kC2 = 32;
  static constexpr int kC4 = 32;  // "layer 4": first shared conv
  static constexpr int kC5 = 64;  // "layer 5": second shared conv
  static constexpr int kKernel = 3;

  TwoStream(int in_channels, int classes, Rng& rng) : in_channels_(in_channels), classes_(classes) {
    require(in_channels >= 1, ErrorKind::config, "model: input channels must be >= 1");
    require(classes >= 2, ErrorKind::config, "model: need at least 2 identity classes");
    auto conv_init = [&](int cin, int cout) {
      double bound = 1.0 / std::sqrt(static_cast<double>(kKernel) * kKernel * cin);
      return rng.uniform_tensor({kKernel, kKernel, cin, cout}, -bound, bound);
    };
    a1w_ = conv_init(in_channels, kC1);
    a1b_ = Tensor({kC1});
    a2w_ = conv_init(kC1, kC2);
    a2b_ = Tensor({kC2});
    b1w_ = conv_init(in_channels, kC1);
    b1b_ = Tensor({kC1});
    b2w_ = conv_init(kC1, kC2);
    b2b_ = Tensor({kC2});
    c4w_ = conv_init(kC2, kC4);
    c4b_ = Tensor({kC4});
    c5w_ = conv_init(kC4, kC5);
    c5b_ = Tensor({kC5});
    bn_gamma_ = Tensor::full({kC5}, 1.0);
    bn_shift_ = Tensor({kC5});
    bn_running_mean_ = Tensor({kC5});
    bn_running_var_ = Tensor::full({kC5}, 1.0);
    double bound = 1.0 / std::sqrt(static_cast<double>(kC5));
    cls_weight_ = rng.uniform_tensor({classes, kC5}, -bound, bound);
  }

  int classes() const { return classes_; }
  int in_channels() const { return in_channels_; }

  // Trainable parameters split into optimizer groups: the backbone convs and
  // the classifier head (normalization + logits map). Order is fixed; it
  // defines the checkpoint manifest and the optimizer slot layout.
  std::vector<std::pair<std::string, Tensor*>> backbone_params() {
    return {{"conv_a1_w", &a1w_}, {"conv_a1_b", &a1b_}, {"conv_a2_w", &a2w_}, {"conv_a2_b", &a2b_},
            {"conv_b1_w", &b1w_}, {"conv_b1_b", &b1b_}, {"conv_b2_w", &b2w_}, {"conv_b2_b", &b2b_},
            {"conv_c4_w", &c4w_}, {"conv_c4_b", &c4b_}, {"conv_c5_w", &c5w_}, {"conv_c5_b", &c5b_}};
  }
  std::vector<std::pair<std::string, Tensor*>> head_params() {
    return {{"bn_gamma", &bn_gamma_}, {"bn_shift", &bn_shift_}, {"cls_weight", &cls_weight_}};
  }
  // Full persisted state: trainable parameters plus head running statistics.
  std::vector<std::pair<std::string, Tensor*>> state() {
    auto all = backbone_params();
    auto head = head_params();
    all.insert(all.end(), head.begin(), head.end());
    all.push_back({"bn_running_mean", &bn_running_mean_});
    all.push_back({"bn_running_var", &bn_running_var_});
    return all;
  }

  Tensor& bn_running_mean() { return bn_running_mean_; }
  Tensor& bn_running_var() { return bn_running_var_; }

  // --- tape wiring ---------------------------------------------------------

  // Tape ids of every parameter; trainable inserts leaves (gradients flow),
  // otherwise constants.
  struct ParamNodes {
    int a1w, a1b, a2w, a2b;
    int b1w, b1b, b2w, b2b;
    int c4w, c4b, c5w, c5b;
    int bn_gamma, bn_shift, cls_weight;
  };

  ParamNodes insert_params(Tape& tape, bool trainable) const {
    auto put = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
    ParamNodes p{};
    p.a1w = put(a1w_);
    p.a1b = put(a1b_);
    p.a2w = put(a2w_);
    p.a2b = put(a2b_);
    p.b1w = put(b1w_);
    p.b1b = put(b1b_);
    p.b2w = put(b2w_);
    p.b2b = put(b2b_);
    p.c4w = put(c4w_);
    p.c4b = put(c4b_);
    p.c5w = put(c5w_);
    p.c5b = put(c5b_);
    p.bn_gamma = put(bn_gamma_);
    p.bn_shift = put(bn_shift_);
    p.cls_weight = put(cls_weight_);
    return p;
  }

  // Tape ids in backbone_params() / head_params() order, for reading a
  // GradientSet back into optimizer slots.
  static std::vector<int> backbone_node_ids(const ParamNodes& p) {
    return {p.a1w, p.a1b, p.a2w, p.a2b, p.b1w, p.b1b, p.b2w, p.b2b, p.c4w, p.c4b, p.c5w, p.c5b};
  }
  static std::vector<int> head_node_ids(const ParamNodes& p) {
    return {p.bn_gamma, p.bn_shift, p.cls_weight};
  }

  struct MapDims {
    int h = 0, w = 0;
  };

  // Feature maps of one image at the two designated depths, in flattened
  // (h*w) x d row form ready for the correspondence ops.
  struct ImageMaps {
    int l4_rows = -1;
    int l5_rows = -1;
    MapDims d4, d5;
  };

  ImageMaps forward_image(Tape& tape, const ParamNodes& p, int image, int modality) const {
    const Tensor& xv = tape.value(image);
    require(xv.rank() == 3 && xv.dim(2) == in_channels_, ErrorKind::dimension,
            "forward: image must be h x w x ", in_channels_, ", got ", shape_str(xv.shape()));
    require(modality == 0 || modality == 1, ErrorKind::usage, "forward: modality must be 0 or 1");
    int w1 = modality == 0 ? p.a1w : p.b1w, b1 = modality == 0 ? p.a1b : p.b1b;
    int w2 = modality == 0 ? p.a2w : p.b2w, b2 = modality == 0 ? p.a2b : p.b2b;
    int s1 = tape.relu(tape.conv2d(image, w1, b1, 2));
    int s2 = tape.relu(tape.conv2d(s1, w2, b2, 2));
    int l4 = tape.relu(tape.conv2d(s2, p.c4w, p.c4b, 1));
    int l5 = tape.relu(tape.conv2d(l4, p.c5w, p.c5b, 1));
    ImageMaps maps;
    const Tensor& l4v = tape.value(l4);
    const Tensor& l5v = tape.value(l5);
    maps.d4 = {l4v.dim(0), l4v.dim(1)};
    maps.d5 = {l5v.dim(0), l5v.dim(1)};
    maps.l4_rows = tape.reshape(l4, {maps.d4.h * maps.d4.w, kC4});
    maps.l5_rows = tape.reshape(l5, {maps.d5.h * maps.d5.w, kC5});
    return maps;
  }

  // Continues a (possibly reconstructed) feature map to a pooled descriptor:
  // layer-4 rows pass through the remaining shared conv, layer-5 rows pool
  // directly.
  int descriptor_from_rows(Tape& tape, const ParamNodes& p, int rows, int layer, MapDims dims,
                           double gem_p) const {
    if (layer == 4) {
      int map = tape.reshape(rows, {dims.h, dims.w, kC4});
      int l5 = tape.relu(tape.conv2d(map, p.c5w, p.c5b, 1));
      return tape.gem_pool(tape.reshape(l5, {dims.h * dims.w, kC5}), gem_p);
    }
    require(layer == 5, ErrorKind::usage, "descriptor_from_rows: layer must be 4 or 5");
    return tape.gem_pool(rows, gem_p);
  }

  // Plain forward pass outside training: rank-3 feature maps at both depths.
  std::pair<FeatureMap, FeatureMap> forward_maps(const Tensor& image, int modality) const {
    Tape tape;
    ParamNodes p = insert_params(tape, false);
    int img = tape.constant(image);
    ImageMaps maps = forward_image(tape, p, img, modality);
    FeatureMap l4 = tape.value(maps.l4_rows).reshaped({maps.d4.h, maps.d4.w, kC4});
    FeatureMap l5 = tape.value(maps.l5_rows).reshaped({maps.d5.h, maps.d5.w, kC5});
    return {std::move(l4), std::move(l5)};
  }

  // --- checkpointing -------------------------------------------------------

  void save_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ostringstream manifest;
    for (auto& [name, tensor] : state()) {
      std::string file = name + ".cmft";
      write_cmft((fs::path(dir) / file).string(), *tensor);
      manifest << name << '\t' << file << '\t';
      for (int i = 0; i < tensor->rank(); ++i) manifest << (i ? " " : "") << tensor->dim(i);
      manifest << '\n';
    }
    write_file((fs::path(dir) / "manifest.txt").string(), manifest.str());
  }

  static TwoStream load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::string manifest = read_file((fs::path(dir) / "manifest.txt").string());
    std::istringstream in(manifest);
    std::string line;
    std::vector<std::pair<std::string, Tensor>> entries;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string name, file;
      bool ok = static_cast<bool>(std::getline(ls, name, '\t')) &&
                static_cast<bool>(std::getline(ls, file, '\t'));
      require(ok, ErrorKind::io, "checkpoint manifest in ", dir, " has a malformed line: ", line);
      Tensor t = read_cmft((fs::path(dir) / file).string());
      Shape listed;
      int d;
      while (ls >> d) listed.push_back(d);
      require(t.shape() == listed, ErrorKind::io, "checkpoint tensor ", name, " has shape ",
              shape_str(t.shape()), " but the manifest lists ", shape_str(listed));
      entries.emplace_back(std::move(name), std::move(t));
    }
    auto find = [&](const std::string& name) -> Tensor& {
      for (auto& [n, t] : entries)
        if (n == name) return t;
      raise(ErrorKind::io, "checkpoint in ", dir, " is missing tensor ", name);
    };
    Tensor& cls = find("cls_weight");
    require(cls.rank() == 2, ErrorKind::io, "checkpoint cls_weight must be rank 2");
    Tensor& a1w = find("conv_a1_w");
    require(a1w.rank() == 4, ErrorKind::io, "checkpoint conv_a1_w must be rank 4");
    Rng throwaway(0);
    TwoStream model(a1w.dim(2), cls.dim(0), throwaway);
    for (auto& [name, slot] : model.state()) {
      Tensor& loaded = find(name);
      require(loaded.same_shape(*slot), ErrorKind::io, "checkpoint tensor ", name, " has shape ",
              shape_str(loaded.shape()), ", expected ", shape_str(slot->shape()));
      *slot = std::move(loaded);
    }
    return model;
  }

 private:
  int in_channels_;
  int classes_;
  Tensor a1w_, a1b_, a2w_, a2b_;  // modality-a shallow stage
  Tensor b1w_, b1b_, b2w_, b2b_;  // modality-b shallow stage
  Tensor c4w_, c4b_, c5w_, c5b_;  // shared deep stage
  Tensor bn_gamma_, bn_shift_, bn_running_mean_, bn_running_var_;
  Tensor cls_weight_;  // classes x kC5
};

}  // namespace cmalign
