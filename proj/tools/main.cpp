// cmalign command-line tool: dataset generation, training, retrieval
// evaluation, correspondence export, and gradient checking. Standard output
// carries machine-readable results only; diagnostics go to standard error.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 I/O or data error,
// 4 numeric abort (message names epoch and step), 5 gradient-check failure.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmalign/artifacts.hpp"
#include "cmalign/config.hpp"
#include "cmalign/data.hpp"
#include "cmalign/eval.hpp"
#include "cmalign/gradcheck.hpp"
#include "cmalign/io.hpp"
#include "cmalign/model.hpp"
#include "cmalign/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace cmalign;

constexpr uint64_t kModelInitStream = 0x4d;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::usage:
    case ErrorKind::dimension:
      return 2;
    case ErrorKind::io:
    case ErrorKind::data:
    case ErrorKind::pairing:
      return 3;
    case ErrorKind::numeric:
      return 4;
  }
  return 2;
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  int64_t seed = -1;
  bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
  cmd->add_option("-c,--config", args.config_path, "configuration file (INI-style sections)");
  cmd->add_option("-s,--set", args.overrides,
                  "override a config value as section.key=value (repeatable)");
  auto* out = cmd->add_option("-o,--out", args.out_dir, "output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", args.seed, "seed every stage (dataset, training, gradcheck)")
      ->check(CLI::NonNegativeNumber)
      ->each([&args](const std::string&) { args.seed_given = true; });
}

Config resolve_config(const CommonArgs& args) {
  Config cfg;
  if (!args.config_path.empty()) cfg.load_file(args.config_path);
  for (const std::string& o : args.overrides) cfg.apply_override(o);
  if (args.seed_given) cfg.set_all_seeds(args.seed);
  cfg.validate();
  return cfg;
}

void echo_resolved_config(const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_file((fs::path(out_dir) / "resolved-config.txt").string(), cfg.serialize());
}

std::string json_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// --- subcommands -----------------------------------------------------------

int run_gen(const CommonArgs& args, bool overwrite) {
  Config cfg = resolve_config(args);
  require(!cfg.dataset.root.empty(), ErrorKind::config, "gen: dataset.root must be set");
  generate_synthetic_dataset(cfg.dataset, overwrite);
  std::string out = args.out_dir.empty() ? cfg.dataset.root : args.out_dir;
  echo_resolved_config(cfg, out);
  std::printf("{\"identities\":%lld,\"images\":%lld,\"root\":\"%s\"}\n",
              static_cast<long long>(cfg.dataset.n_identities),
              static_cast<long long>(2 * cfg.dataset.n_identities * cfg.dataset.images_per_identity),
              cfg.dataset.root.c_str());
  return 0;
}

int run_train(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  require(!cfg.dataset.root.empty(), ErrorKind::config, "train: dataset.root must be set");
  echo_resolved_config(cfg, args.out_dir);
  Dataset ds = load_directory_dataset(cfg.dataset.root);
  std::fprintf(stderr, "loaded %zu images of %d identities from %s\n", ds.images.size(),
               ds.n_identities, cfg.dataset.root.c_str());
  Rng init_rng = Rng(static_cast<uint64_t>(cfg.train.seed)).derive(kModelInitStream);
  TwoStream model(ds.channels, ds.n_identities, init_rng);
  Trainer trainer(model, ds, cfg.train, cfg.loss);
  TrainLog log = trainer.fit(args.out_dir);
  std::fprintf(stderr, "finished %lld epochs (%zu steps); checkpoints in %s\n",
               static_cast<long long>(cfg.train.epochs), log.size(),
               (fs::path(args.out_dir) / "checkpoints").string().c_str());
  if (!log.empty()) {
    const LossValues& last = log.back().losses;
    std::printf("{\"L_DT\":%s,\"L_IC\":%s,\"L_ID\":%s,\"L_total\":%s}\n",
                json_double(last.l_dt).c_str(), json_double(last.l_ic).c_str(),
                json_double(last.l_id).c_str(), json_double(last.l_total).c_str());
  }
  return 0;
}

int run_eval(const CommonArgs& args, const std::string& checkpoint) {
  Config cfg = resolve_config(args);
  require(!cfg.dataset.root.empty(), ErrorKind::config, "eval: dataset.root must be set");
  echo_resolved_config(cfg, args.out_dir);
  Dataset ds = load_directory_dataset(cfg.dataset.root);
  TwoStream model = TwoStream::load_checkpoint(checkpoint);
  int query_mod = cfg.eval.direction == "a_to_b" ? 0 : 1;
  DescriptorSet queries = extract_descriptors(model, ds, query_mod, cfg.loss.gem_p);
  DescriptorSet gallery = extract_descriptors(model, ds, 1 - query_mod, cfg.loss.gem_p);
  RetrievalResult r = evaluate_retrieval(queries, gallery, static_cast<int>(cfg.eval.cmc_k));

  std::string json = "{\"cmc\":[";
  for (size_t k = 0; k < r.cmc.size(); ++k) {
    if (k) json += ",";
    json += json_double(r.cmc[k]);
  }
  json += "],\"excluded_queries\":" + std::to_string(r.excluded_queries);
  json += ",\"mAP\":" + json_double(r.map) + "}";
  write_file((fs::path(args.out_dir) / "metrics.json").string(), json + "\n");
  std::printf("%s\n", json.c_str());
  return 0;
}

int run_match(const CommonArgs& args, const std::string& checkpoint, const std::string& image_a,
              const std::string& image_b) {
  Config cfg = resolve_config(args);
  echo_resolved_config(cfg, args.out_dir);
  TwoStream model = TwoStream::load_checkpoint(checkpoint);
  Tensor a = read_cmft(image_a);
  Tensor b = read_cmft(image_b);
  ArtifactPaths paths = export_artifacts(model, a, b, args.out_dir, cfg.loss.beta,
                                         static_cast<int>(cfg.match.k));
  std::printf(
      "{\"coattention_a\":\"%s\",\"coattention_b\":\"%s\",\"mask_a\":\"%s\",\"mask_b\":\"%s\","
      "\"matches\":\"%s\"}\n",
      paths.coattention_a.c_str(), paths.coattention_b.c_str(), paths.mask_a.c_str(),
      paths.mask_b.c_str(), paths.matches.c_str());
  return 0;
}

int run_gradcheck(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  echo_resolved_config(cfg, args.out_dir);
  GradcheckSettings settings;
  settings.tol = cfg.gradcheck.tol;
  settings.step = cfg.gradcheck.step;
  settings.seeds = static_cast<int>(cfg.gradcheck.seeds);
  settings.base_seed = static_cast<uint64_t>(cfg.gradcheck.seed);
  std::vector<std::string> only;
  if (cfg.gradcheck.ops != "all") {
    std::string item;
    std::istringstream ss(cfg.gradcheck.ops);
    while (std::getline(ss, item, ','))
      if (!item.empty()) only.push_back(item);
  }
  std::vector<GradcheckReport> reports = run_gradchecks(settings, only);
  std::string failing;
  for (const GradcheckReport& r : reports) {
    std::printf("%s\t%.3e\t%s\n", r.name.c_str(), r.max_rel_error, r.passed ? "pass" : "FAIL");
    if (!r.passed) {
      failing += failing.empty() ? "" : ", ";
      failing += r.name;
      std::fprintf(stderr, "%s: %s\n", r.name.c_str(), r.detail.c_str());
    }
  }
  if (!failing.empty()) {
    std::fprintf(stderr, "gradient check failed for: %s\n", failing.c_str());
    return 5;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense cross-modal correspondence toolkit"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, match_args, grad_args;
  bool overwrite = false;
  std::string checkpoint, image_a, image_b;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic paired two-modality dataset");
  add_common(gen, gen_args, false);
  gen->add_flag("--overwrite", overwrite, "replace a non-empty dataset root");

  CLI::App* train = app.add_subcommand("train", "train the two-stream model");
  add_common(train, train_args, true);

  CLI::App* eval = app.add_subcommand("eval", "cross-modal retrieval metrics for a checkpoint");
  add_common(eval, eval_args, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();

  CLI::App* match = app.add_subcommand("match", "export masks, co-attention, and top-k matches");
  add_common(match, match_args, true);
  match->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  match->add_option("--image-a", image_a, "first-modality image tensor")->required();
  match->add_option("--image-b", image_b, "second-modality image tensor")->required();

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(grad, grad_args, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "cmalign: %s\n", e.what());
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen(gen_args, overwrite);
    if (train->parsed()) return run_train(train_args);
    if (eval->parsed()) return run_eval(eval_args, checkpoint);
    if (match->parsed()) return run_match(match_args, checkpoint, image_a, image_b);
    if (grad->parsed()) return run_gradcheck(grad_args);
  } catch (const Error& e) {
    std::fprintf(stderr, "cmalign: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cmalign: unexpected error: %s\n", e.what());
    return 1;
  }
  return 2;
}
