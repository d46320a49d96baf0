#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cmalign/config.hpp"
#include "cmalign/error.hpp"
#include "cmalign/io.hpp"
#include "cmalign/rng.hpp"
#include "cmalign/tensor.hpp"

namespace cmalign {

// Synthetic paired two-modality person images. Each (identity, index) pair is
// rendered once into a shared pre-transform image -- identity appearance from
// a latent vector, plus per-image nuisances (translation, scale, occlusion,
// background clutter, noise) -- and then pushed through one of two fixed
// modality transforms: modality "a" keeps the full color rendering, modality
// "b" collapses channels to a contrast-remapped luminance.

constexpr const char* kModalityNames[2] = {"a", "b"};

inline int modality_from_name(const std::string& name) {
  if (name == "a") return 0;
  if (name == "b") return 1;
  raise(ErrorKind::data, "unknown modality '", name, "' (expected 'a' or 'b')");
}

namespace detail {

inline double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Identity appearance: three body bands (head / torso / legs), each with its
// own color, plus a per-identity sinusoidal texture on the torso.
struct Appearance {
  double band_color[3][3];  // band x channel
  double tex_freq_r, tex_freq_c, tex_phase, tex_amp;
};

inline Appearance sample_appearance(Rng& rng) {
  Appearance ap;
  for (auto& band : ap.band_color)
    for (double& c : band) c = 0.1 + 0.8 * rng.uniform();
  ap.tex_freq_r = rng.uniform(0.6, 1.8);
  ap.tex_freq_c = rng.uniform(0.6, 1.8);
  ap.tex_phase = rng.uniform(0.0, 6.283185307179586);
  ap.tex_amp = rng.uniform(0.15, 0.35);
  return ap;
}

struct Nuisance {
  double dy, dx;        // translation in pixels
  double scale;         // body scale factor
  int occ_r0, occ_c0;   // occlusion rectangle (size 0 disables)
  int occ_h, occ_w;
  double occ_shade;
  double bg_base[3];    // background gradient endpoints
  double bg_top[3];
};

inline Nuisance sample_nuisance(Rng& rng, const Config::Dataset& cfg) {
  Nuisance nu;
  nu.dy = rng.uniform(-cfg.translation_max, cfg.translation_max);
  nu.dx = rng.uniform(-cfg.translation_max, cfg.translation_max);
  nu.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  for (int k = 0; k < 3; ++k) {
    nu.bg_base[k] = rng.uniform(0.05, 0.5);
    nu.bg_top[k] = rng.uniform(0.05, 0.5);
  }
  if (cfg.occlusion_max > 0) {
    nu.occ_h = static_cast<int>(rng.uniform() * (cfg.occlusion_max + 1));
    nu.occ_w = static_cast<int>(rng.uniform() * (cfg.occlusion_max + 1));
    nu.occ_r0 = static_cast<int>(rng.uniform() * cfg.height);
    nu.occ_c0 = static_cast<int>(rng.uniform() * cfg.width);
    nu.occ_shade = rng.uniform(0.2, 0.8);
  } else {
    nu.occ_h = nu.occ_w = nu.occ_r0 = nu.occ_c0 = 0;
    nu.occ_shade = 0;
  }
  return nu;
}

// Shared pre-transform rendering of one (identity, index) image.
inline Tensor render_base(const Appearance& ap, const Nuisance& nu, Rng& noise_rng,
                          const Config::Dataset& cfg) {
  int h = cfg.height, w = cfg.width;
  Tensor img({h, w, 3});
  double cy = 0.5 * (h - 1) + nu.dy;
  double cx = 0.5 * (w - 1) + nu.dx;
  double ry = 0.40 * h * nu.scale;
  double rx = 0.27 * w * nu.scale;
  for (int r = 0; r < h; ++r) {
    double t = static_cast<double>(r) / std::max(1, h - 1);
    for (int c = 0; c < w; ++c) {
      double* px = img.data() + (static_cast<int64_t>(r) * w + c) * 3;
      double ey = (r - cy) / ry;
      double ex = (c - cx) / rx;
      if (ey * ey + ex * ex <= 1.0) {
        // body: vertical position within the body selects the band
        double v = clamp01((ey + 1.0) / 2.0);
        int band = v < 0.25 ? 0 : (v < 0.62 ? 1 : 2);
        double tex = 1.0;
        if (band == 1)
          tex += ap.tex_amp * std::sin(ap.tex_freq_r * r + ap.tex_phase) *
                 std::cos(ap.tex_freq_c * c);
        for (int k = 0; k < 3; ++k) px[k] = clamp01(ap.band_color[band][k] * tex);
      } else {
        for (int k = 0; k < 3; ++k) px[k] = nu.bg_base[k] + (nu.bg_top[k] - nu.bg_base[k]) * t;
      }
    }
  }
  // occlusion rectangle over everything beneath it
  for (int r = nu.occ_r0; r < std::min(h, nu.occ_r0 + nu.occ_h); ++r)
    for (int c = nu.occ_c0; c < std::min(w, nu.occ_c0 + nu.occ_w); ++c) {
      double* px = img.data() + (static_cast<int64_t>(r) * w + c) * 3;
      for (int k = 0; k < 3; ++k) px[k] = nu.occ_shade;
    }
  if (cfg.noise_std > 0)
    for (int64_t i = 0; i < img.size(); ++i)
      img[i] = clamp01(img[i] + cfg.noise_std * noise_rng.normal());
  return img;
}

inline Tensor apply_modality(const Tensor& base, int modality) {
  if (modality == 0) return base;
  // modality b: luminance collapse followed by an S-shaped contrast remap
  Tensor out(base.shape());
  int64_t n = base.size() / 3;
  for (int64_t i = 0; i < n; ++i) {
    const double* px = base.data() + i * 3;
    double g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    double remapped = clamp01(0.5 + 0.5 * std::tanh(2.6 * (g - 0.5)));
    double* q = out.data() + i * 3;
    q[0] = q[1] = q[2] = remapped;
  }
  return out;
}

inline std::string image_relpath(int modality, int identity, int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s/%04d/%02d.cmft", kModalityNames[modality], identity, index);
  return buf;
}

}  // namespace detail

// Deterministic generation: every image depends only on (seed, identity,
// index), so regeneration reproduces files bit-exactly.
inline void generate_synthetic_dataset(const Config::Dataset& cfg, bool overwrite = false) {
  require(cfg.n_identities >= 1 && cfg.images_per_identity >= 1, ErrorKind::config,
          "dataset: counts must be >= 1");
  require(cfg.height >= 8 && cfg.width >= 8, ErrorKind::config, "dataset: image size too small");
  namespace fs = std::filesystem;
  fs::path root(cfg.root);
  require(!cfg.root.empty(), ErrorKind::config, "dataset: root path is empty");
  std::error_code ec;
  if (fs::exists(root, ec) && !fs::is_empty(root, ec)) {
    require(overwrite, ErrorKind::io, "dataset root ", cfg.root,
            " exists and is not empty (pass the overwrite flag to replace it)");
    fs::remove_all(root, ec);
    require(!ec, ErrorKind::io, "failed to clear ", cfg.root, ": ", ec.message());
  }

  Rng seed_root(static_cast<uint64_t>(cfg.seed));
  std::ostringstream manifest;
  for (int mod = 0; mod < 2; ++mod)
    for (int id = 0; id < cfg.n_identities; ++id) {
      Rng id_rng = seed_root.derive(static_cast<uint64_t>(id));
      detail::Appearance ap = detail::sample_appearance(id_rng);
      for (int idx = 0; idx < cfg.images_per_identity; ++idx) {
        Rng img_rng = seed_root.derive(static_cast<uint64_t>(id))
                          .derive(static_cast<uint64_t>(idx) + 1);
        detail::Nuisance nu = detail::sample_nuisance(img_rng, cfg);
        Tensor base = detail::render_base(ap, nu, img_rng, cfg);
        Tensor img = detail::apply_modality(base, mod);
        std::string rel = detail::image_relpath(mod, id, idx);
        write_cmft((root / rel).string(), img);
        manifest << kModalityNames[mod] << '\t' << id << '\t' << rel << '\t' << cfg.height << '\t'
                 << cfg.width << '\t' << 3 << '\n';
      }
    }
  write_file((root / "manifest.txt").string(), manifest.str());
}

struct DatasetImage {
  int modality = 0;
  int identity = 0;        // identity id as written in the manifest
  int label = 0;           // contiguous 0-based label
  std::string relpath;
  Tensor pixels;           // h x w x c
};

struct Dataset {
  std::string root;
  std::vector<DatasetImage> images;
  int n_identities = 0;
  int height = 0, width = 0, channels = 0;
  // image indices grouped as [label][modality]
  std::vector<std::array<std::vector<int>, 2>> by_identity;

  const std::vector<int>& pool(int label, int modality) const {
    return by_identity[static_cast<size_t>(label)][static_cast<size_t>(modality)];
  }
};

// Loads root/manifest.txt and every referenced image. With cross_modal set,
// every identity must appear in both modalities.
inline Dataset load_directory_dataset(const std::string& root, bool cross_modal = true) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.root = root;
  std::string manifest = read_file((fs::path(root) / "manifest.txt").string());
  std::istringstream in(manifest);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string mod_name, id_str, rel, h_str, w_str, c_str;
    bool ok = static_cast<bool>(std::getline(ls, mod_name, '\t')) &&
              static_cast<bool>(std::getline(ls, id_str, '\t')) &&
              static_cast<bool>(std::getline(ls, rel, '\t')) &&
              static_cast<bool>(std::getline(ls, h_str, '\t')) &&
              static_cast<bool>(std::getline(ls, w_str, '\t')) && static_cast<bool>(ls >> c_str);
    require(ok, ErrorKind::data, "manifest line ", line_no, " is malformed: ", line);
    DatasetImage img;
    img.modality = modality_from_name(mod_name);
    try {
      img.identity = std::stoi(id_str);
    } catch (const std::exception&) {
      raise(ErrorKind::data, "manifest line ", line_no, ": bad identity '", id_str, "'");
    }
    img.relpath = rel;
    int h = 0, w = 0, c = 0;
    try {
      h = std::stoi(h_str);
      w = std::stoi(w_str);
      c = std::stoi(c_str);
    } catch (const std::exception&) {
      raise(ErrorKind::data, "manifest line ", line_no, ": bad shape fields");
    }
    img.pixels = read_cmft((fs::path(root) / rel).string());
    require(img.pixels.rank() == 3 && img.pixels.dim(0) == h && img.pixels.dim(1) == w &&
                img.pixels.dim(2) == c,
            ErrorKind::data, "image ", rel, " has shape ", shape_str(img.pixels.shape()),
            " but the manifest lists (", h, ", ", w, ", ", c, ")");
    if (ds.images.empty()) {
      ds.height = h;
      ds.width = w;
      ds.channels = c;
    } else {
      require(h == ds.height && w == ds.width && c == ds.channels, ErrorKind::data, "image ", rel,
              " shape differs from the rest of the dataset");
    }
    ds.images.push_back(std::move(img));
  }
  require(!ds.images.empty(), ErrorKind::data, "dataset at ", root, " lists no images");

  std::map<int, int> label_of;  // sorted identity -> contiguous label
  for (const DatasetImage& img : ds.images) label_of.emplace(img.identity, 0);
  int next = 0;
  for (auto& [id, label] : label_of) label = next++;
  ds.n_identities = next;
  ds.by_identity.assign(static_cast<size_t>(next), {});
  for (size_t i = 0; i < ds.images.size(); ++i) {
    DatasetImage& img = ds.images[i];
    img.label = label_of.at(img.identity);
    ds.by_identity[static_cast<size_t>(img.label)][static_cast<size_t>(img.modality)].push_back(
        static_cast<int>(i));
  }
  if (cross_modal)
    for (const auto& [id, label] : label_of) {
      const auto& pools = ds.by_identity[static_cast<size_t>(label)];
      require(!pools[0].empty() && !pools[1].empty(), ErrorKind::data, "identity ", id,
              " is present in only one modality (cross-modal mode needs both)");
    }
  return ds;
}

}  // namespace cmalign
