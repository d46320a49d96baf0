// Acceptance harness: exercises the library end to end and prints one
// PASS/FAIL line per criterion, exit status 0 only if every criterion holds.
// Each criterion carries its own runtime budget; exceeding it is a failure
// even when the numeric checks pass.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cmalign/align.hpp"
#include "cmalign/config.hpp"
#include "cmalign/data.hpp"
#include "cmalign/eval.hpp"
#include "cmalign/field.hpp"
#include "cmalign/gradcheck.hpp"
#include "cmalign/loss.hpp"
#include "cmalign/model.hpp"
#include "cmalign/rng.hpp"
#include "cmalign/train.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace cmalign;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

double now_s() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

std::string format(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, args);
  va_end(args);
  return buf;
}

bool near(double a, double b) { return std::fabs(a - b) <= 1e-12 * std::max(1.0, std::fabs(b)); }

// Draws a random grid small enough for the brute-force references while
// avoiding the degenerate single-position map.
void draw_grid(Rng& rng, int& h, int& w, int& d) {
  do {
    h = 1 + static_cast<int>(rng.uniform_int(4));
    w = 1 + static_cast<int>(rng.uniform_int(4));
  } while (h * w < 2);
  d = 1 + static_cast<int>(rng.uniform_int(8));
}

// --- criterion 1: library equations vs independent brute-force versions ---
Outcome equation_oracles() {
  Rng rng(20260816);
  const double betas[] = {1.0, 10.0, 50.0};
  double worst = 0;
  const int instances = 12;
  for (int it = 0; it < instances; ++it) {
    int h, w, d;
    draw_grid(rng, h, w, d);
    FeatureMap ft = rng.uniform_tensor({h, w, d}, -1.0, 1.0);
    FeatureMap fs = rng.uniform_tensor({h, w, d}, -1.0, 1.0);
    FeatureMap fo = rng.uniform_tensor({h, w, d}, -1.0, 1.0);  // a second source image
    SpatialMap mt = rng.uniform_tensor({h, w}, 0.0, 1.0);
    SpatialMap ms = rng.uniform_tensor({h, w}, 0.0, 1.0);
    double beta = betas[it % 3];

    SimilarityTensor c = cosine_similarity(ft, fs);
    worst = std::max(worst, max_abs_diff(c, oracle::cosine_similarity(ft, fs)));

    MatchProbability p = matching_probability(c, beta);
    worst = std::max(worst, max_abs_diff(p.values, oracle::matching_probability(c, beta)));

    Tensor warped = soft_warp(p, fs);
    worst = std::max(worst, max_abs_diff(warped, oracle::soft_warp(p.values, fs)));

    FeatureMap recon = align(ft, fs, mt, p);
    worst = std::max(worst, max_abs_diff(recon, oracle::align(ft, fs, mt, p.values)));

    SpatialMap attn = co_attention(mt, ms, p);
    worst = std::max(worst, max_abs_diff(attn, oracle::co_attention(mt, ms, p.values)));

    SpatialMap d_pos = local_distance(ft, recon);
    worst = std::max(worst, max_abs_diff(d_pos, oracle::local_distance(ft, recon)));

    SpatialMap d_neg = local_distance(ft, fo);
    double lib = dense_triplet_loss(d_pos, d_neg, attn, 0.3);
    worst = std::max(worst, std::fabs(lib - oracle::dense_triplet(d_pos, d_neg, attn, 0.3)));
  }
  Outcome out;
  out.ok = worst <= 1e-6;
  out.detail = format("max |diff| %.2e over %d instances", worst, instances);
  return out;
}

// --- criterion 2: matching probability rows are distributions ---
Outcome probability_rows() {
  Rng rng(414243);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    int h = 1 + static_cast<int>(rng.uniform_int(4));
    int w = 1 + static_cast<int>(rng.uniform_int(4));
    SimilarityTensor c = rng.uniform_tensor({h, w, h, w}, -1.0, 1.0);
    for (double beta : {1.0, 10.0, 50.0}) {
      MatchProbability p = matching_probability(c, beta);
      int n = h * w;
      for (int row = 0; row < n; ++row) {
        double sum = 0;
        for (int q = 0; q < n; ++q) sum += p.values[static_cast<int64_t>(row) * n + q];
        worst = std::max(worst, std::fabs(sum - 1.0));
      }
    }
  }
  Outcome out;
  out.ok = worst <= 1e-6;
  out.detail = format("max |row sum - 1| %.2e", worst);
  return out;
}

// --- criterion 3: finite-difference agreement for every tracked op ---
Outcome gradient_suite() {
  std::vector<GradcheckReport> reports = run_gradchecks(GradcheckSettings{});
  double worst = 0;
  std::string failures;
  for (const GradcheckReport& r : reports) {
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed) failures += (failures.empty() ? "" : ", ") + r.name;
  }
  Outcome out;
  out.ok = failures.empty();
  out.detail = format("%zu cases, worst rel err %.2e", reports.size(), worst);
  if (!failures.empty()) out.detail += "; failed: " + failures;
  return out;
}

// --- criterion 4: blending identities and argmax consistency ---
Outcome alignment_identities() {
  Rng rng(777001);
  int argmax_rows = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int h, w, d;
    draw_grid(rng, h, w, d);
    FeatureMap ft = rng.uniform_tensor({h, w, d}, -1.0, 1.0);
    FeatureMap fs = rng.uniform_tensor({h, w, d}, -1.0, 1.0);
    SimilarityTensor c = cosine_similarity(ft, fs);
    MatchProbability p = matching_probability(c, 50.0);

    if (!bitwise_equal(align(ft, fs, Tensor::zeros({h, w}), p), ft))
      return {false, format("mask 0 identity violated on trial %d", trial)};
    if (!bitwise_equal(align(ft, fs, Tensor::full({h, w}, 1.0), p), soft_warp(p, fs)))
      return {false, format("mask 1 identity violated on trial %d", trial)};

    int n = h * w;
    for (int row = 0; row < n; ++row) {
      const int64_t off = static_cast<int64_t>(row) * n;
      int cbest = 0, pbest = 0;
      bool unique = true;
      for (int q = 1; q < n; ++q) {
        if (c[off + q] == c[off + cbest]) unique = false;
        if (c[off + q] > c[off + cbest]) cbest = q, unique = true;
        if (p.values[off + q] > p.values[off + pbest]) pbest = q;
      }
      if (!unique) continue;  // ties carry no preferred winner
      if (cbest != pbest)
        return {false, format("argmax mismatch on trial %d row %d", trial, row)};
      ++argmax_rows;
    }
  }
  return {true, format("100 trials, %d argmax rows agreed", argmax_rows)};
}

// --- criterion 5: ablation trend on the synthetic benchmark ---
// Shared recipe for all three arms: 30 epochs at the default optimizer
// settings with the dense-triplet hinge normalized by total attention mass
// (the unnormalized positional sum diverges at these learning rates on the
// toy backbone, which has no internal normalization layers).
Outcome ablation_trend() {
  fs::path base = fs::temp_directory_path() / "cmalign_acceptance_ablation";
  fs::remove_all(base);
  fs::create_directories(base);

  const int seeds[] = {1, 2, 3};
  double means[3] = {0, 0, 0};  // full, id_only, coattn_off
  std::string detail;
  for (int seed : seeds) {
    Config::Dataset dtrain;
    dtrain.root = (base / ("train_" + std::to_string(seed))).string();
    dtrain.n_identities = 64;
    dtrain.images_per_identity = 8;
    dtrain.seed = seed;
    Config::Dataset deval = dtrain;
    deval.root = (base / ("eval_" + std::to_string(seed))).string();
    deval.n_identities = 16;
    deval.seed = seed + 5000;
    generate_synthetic_dataset(dtrain);
    generate_synthetic_dataset(deval);
    Dataset train_ds = load_directory_dataset(dtrain.root);
    Dataset eval_ds = load_directory_dataset(deval.root);

    for (int arm = 0; arm < 3; ++arm) {
      Config::Train tc;
      tc.epochs = 30;
      tc.seed = seed;
      Config::Loss lc;
      lc.normalize_dense_triplet = true;
      if (arm == 1) lc.lambda_ic = 0, lc.lambda_dt = 0;
      if (arm == 2) lc.use_co_attention = false;

      Rng init = Rng(static_cast<uint64_t>(seed)).derive(0x4d);
      TwoStream model(static_cast<int>(train_ds.channels), train_ds.n_identities, init);
      Trainer trainer(model, train_ds, tc, lc);
      try {
        for (int e = 0; e < tc.epochs; ++e) {
          trainer.sampler().start_epoch();
          for (int s = 0; s < trainer.sampler().steps_per_epoch(); ++s)
            trainer.train_step(trainer.sampler().next_batch(), e, s);
        }
      } catch (const Error& err) {
        const char* arm_names[] = {"full", "id-only", "co-attention-off"};
        fs::remove_all(base);
        return {false, format("seed %d %s arm diverged: %s", seed, arm_names[arm], err.what())};
      }
      DescriptorSet q = extract_descriptors(model, eval_ds, 0, lc.gem_p);
      DescriptorSet g = extract_descriptors(model, eval_ds, 1, lc.gem_p);
      means[arm] += evaluate_retrieval(q, g, 10).map / 3.0;
    }
  }
  fs::remove_all(base);
  Outcome out;
  out.ok = means[0] >= means[1] + 0.02 && means[2] <= means[0];
  out.detail = format("mean mAP full %.4f, id-only %.4f, co-attention-off %.4f", means[0], means[1],
                      means[2]);
  return out;
}

// --- criterion 6: retrieval evaluator vs direct enumeration ---
Outcome evaluator_oracle() {
  Rng rng(90125);
  for (int inst = 0; inst < 50; ++inst) {
    int ng = 2 + static_cast<int>(rng.uniform_int(9));  // 2..10 gallery items
    int nq = 1 + static_cast<int>(rng.uniform_int(4));
    int dim = 1 + static_cast<int>(rng.uniform_int(6));
    DescriptorSet gallery, queries;
    for (int j = 0; j < ng; ++j) {
      gallery.descriptors.push_back(rng.uniform_tensor({dim}, -1.0, 1.0));
      gallery.identities.push_back(static_cast<int>(rng.uniform_int(4)));
    }
    bool any_positive = false;
    for (int i = 0; i < nq; ++i) {
      queries.descriptors.push_back(rng.uniform_tensor({dim}, -1.0, 1.0));
      int label = static_cast<int>(rng.uniform_int(5));  // label 4 never matches
      queries.identities.push_back(label);
      for (int j = 0; j < ng; ++j) any_positive |= gallery.identities[j] == label;
    }
    if (!any_positive) {
      gallery.identities[0] = queries.identities[0];
      any_positive = true;
    }

    RetrievalResult r = evaluate_retrieval(queries, gallery, ng);

    std::vector<double> gnorm(static_cast<size_t>(ng));
    for (int j = 0; j < ng; ++j) {
      double s = 0;
      for (int64_t i = 0; i < dim; ++i) s += gallery.descriptors[j][i] * gallery.descriptors[j][i];
      gnorm[j] = std::max(std::sqrt(s), kCosineEps);
    }
    size_t included = 0;
    int excluded = 0;
    for (int qi = 0; qi < nq; ++qi) {
      std::vector<int> relevant(static_cast<size_t>(ng));
      int positives = 0;
      for (int j = 0; j < ng; ++j) {
        relevant[j] = gallery.identities[j] == queries.identities[qi] ? 1 : 0;
        positives += relevant[j];
      }
      if (positives == 0) {
        ++excluded;
        continue;
      }
      double qn = 0;
      for (int64_t i = 0; i < dim; ++i)
        qn += queries.descriptors[qi][i] * queries.descriptors[qi][i];
      qn = std::max(std::sqrt(qn), kCosineEps);
      std::vector<double> scores(static_cast<size_t>(ng));
      for (int j = 0; j < ng; ++j) {
        double dot = 0;
        for (int64_t i = 0; i < dim; ++i) dot += queries.descriptors[qi][i] * gallery.descriptors[j][i];
        scores[j] = dot / (qn * gnorm[j]);
      }
      double expect = oracle::average_precision(scores, relevant);
      if (included >= r.per_query_ap.size() || r.per_query_ap[included] != expect)
        return {false, format("AP mismatch on instance %d query %d", inst, qi)};
      ++included;
    }
    if (excluded != r.excluded_queries)
      return {false, format("excluded-query count mismatch on instance %d", inst)};
    for (size_t k = 1; k < r.cmc.size(); ++k)
      if (r.cmc[k] < r.cmc[k - 1])
        return {false, format("CMC not monotone on instance %d", inst)};
  }
  return {true, "50 instances agreed exactly"};
}

// --- criterion 7: pipeline determinism through the command-line tool ---
int run_command(const std::string& cmd) {
  int status = std::system((cmd + " > /dev/null 2> /dev/null").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

Outcome pipeline_determinism() {
  const std::string cli = CMALIGN_CLI_PATH;
  fs::path base = fs::temp_directory_path() / "cmalign_acceptance_pipeline";
  fs::remove_all(base);
  std::string metrics[2];
  for (int run = 0; run < 2; ++run) {
    fs::path root = base / ("run" + std::to_string(run));
    fs::create_directories(root);
    std::string data = (root / "data").string();
    std::string common = " --set dataset.root=" + data +
                         " --set dataset.n_identities=4 --set dataset.images_per_identity=2"
                         " --set dataset.height=12 --set dataset.width=8 --seed 11";
    if (run_command(cli + " gen" + common) != 0) return {false, "gen failed"};
    if (run_command(cli + " train" + common +
                    " --set train.epochs=3 --set train.identities_per_modality=2"
                    " --set train.images_per_identity=2 --set train.warmup_epochs=1 -o " +
                    (root / "train_out").string()) != 0)
      return {false, "train failed"};
    if (run_command(cli + " eval" + common + " --set eval.cmc_k=5 --checkpoint " +
                    (root / "train_out" / "checkpoints" / "final").string() + " -o " +
                    (root / "eval_out").string()) != 0)
      return {false, "eval failed"};
    metrics[run] = slurp(root / "eval_out" / "metrics.json");
  }
  fs::remove_all(base);
  if (metrics[0].empty()) return {false, "metrics.json missing or empty"};
  if (metrics[0] != metrics[1]) return {false, "metrics.json differs between runs"};
  return {true, format("metrics identical (%zu bytes)", metrics[0].size())};
}

// --- criterion 8: learning-rate schedule endpoints ---
Outcome schedule_endpoints() {
  Config::Train tc;  // defaults: warmup 10, decay at 20 and 50 by 10x
  for (int e : {static_cast<int>(tc.warmup_epochs) - 1, static_cast<int>(tc.warmup_epochs)}) {
    LrPair lr = lr_schedule(tc, e);
    if (!near(lr.backbone, 1e-2) || !near(lr.head, 1e-1))
      return {false, format("epoch %d: expected base rates, got (%g, %g)", e, lr.backbone, lr.head)};
  }
  for (int e : {50, 64, 200}) {
    LrPair lr = lr_schedule(tc, e);
    if (!near(lr.backbone, 1e-4) || !near(lr.head, 1e-3))
      return {false, format("epoch %d: expected decayed rates, got (%g, %g)", e, lr.backbone, lr.head)};
  }
  return {true, "warmup end (1e-2, 1e-1); epoch >= 50 (1e-4, 1e-3)"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
    double budget_s;
  };
  const Criterion criteria[] = {
      {"equation oracles: alignment/loss ops vs brute force", equation_oracles, 10.0},
      {"matching probability rows sum to one", probability_rows, 60.0},
      {"finite-difference gradient suite", gradient_suite, 120.0},
      {"alignment identities and argmax agreement", alignment_identities, 60.0},
      {"ablation: full vs id-only vs co-attention-off", ablation_trend, 1200.0},
      {"retrieval evaluator vs enumerated average precision", evaluator_oracle, 60.0},
      {"pipeline determinism (gen -> train -> eval)", pipeline_determinism, 300.0},
      {"learning-rate schedule endpoints", schedule_endpoints, 10.0},
  };

  int passed = 0;
  const int total = static_cast<int>(std::size(criteria));
  for (int i = 0; i < total; ++i) {
    double t0 = now_s();
    Outcome out;
    try {
      out = criteria[i].run();
    } catch (const std::exception& e) {
      out = {false, format("unexpected exception: %s", e.what())};
    }
    double dt = now_s() - t0;
    if (dt > criteria[i].budget_s) {
      out.ok = false;
      out.detail += format(" [over budget: %.1f s > %.0f s]", dt, criteria[i].budget_s);
    }
    std::printf("%s  %d  %-52s  [%7.1f s]  %s\n", out.ok ? "PASS" : "FAIL", i + 1,
                criteria[i].name, dt, out.detail.c_str());
    std::fflush(stdout);
    passed += out.ok ? 1 : 0;
  }
  std::printf("%d/%d criteria passed\n", passed, total);
  return passed == total ? 0 : 1;
}
