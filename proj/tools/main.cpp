// Pipeline driver: one subcommand per stage, JSON config, seeded determinism.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "userip/pipeline.hpp"

namespace fs = std::filesystem;
using namespace userip;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = "run";
  std::optional<uint64_t> seed;
  std::optional<int> threads;
};

RunConfig resolve_config(const GlobalArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = RunConfig::from_json_text(read_text_file(args.config_path));
  if (args.seed) cfg.seed = *args.seed;
  if (args.threads) cfg.threads = *args.threads;
  cfg.validate();
  return cfg;
}

int run_stage(const GlobalArgs& args, const std::string& variant_arg, const std::string& stage,
              int sweep_max_users) {
  RunConfig cfg = resolve_config(args);
  fs::path out(args.out_dir);
  fs::create_directories(out);

  if (stage == "gen-data") {
    auto r = run_gen_data(cfg, out);
    std::cout << "gen-data: wrote " << r.outputs.size() << " artifacts to " << out.string() << "\n";
  } else if (stage == "train-lm") {
    run_train_lm(cfg, out);
    std::cout << "train-lm: checkpoint at " << (out / artifact::lm_ckpt).string() << "\n";
  } else if (stage == "infer") {
    auto r = run_infer(cfg, out);
    std::cout << "infer: " << r.epochs_run << " epochs, final loss " << r.final_loss
              << ", lm checksum " << (r.lm_checksum_before == r.lm_checksum_after ? "intact" : "CHANGED")
              << "\n";
  } else if (stage == "build-bank") {
    auto r = run_build_bank(cfg, out);
    std::cout << "build-bank: " << r.users << " users, " << r.dead_codes.size() << " dead codes\n";
  } else if (stage == "train-rec") {
    auto r = run_train_rec(cfg, out, variant_from_name(variant_arg));
    std::cout << "train-rec[" << variant_arg << "]: best valid AUC " << r.best_valid_auc << "\n";
  } else if (stage == "eval") {
    auto r = run_eval(cfg, out);
    for (const auto& row : r.rows)
      std::cout << "eval: " << row.variant << " " << row.fold << " auc=" << row.auc_value
                << " logloss=" << row.logloss_value << "\n";
  } else if (stage == "ablate") {
    auto r = run_ablate(cfg, out);
    std::cout << "ablate: with_vq auc=" << r.auc_with_vq << " raw_theta auc=" << r.auc_without_vq
              << "\n";
  } else if (stage == "sweep-codebook") {
    auto r = run_sweep_codebook(cfg, out);
    for (const auto& row : r.rows)
      std::cout << "sweep: K1=" << row.k1 << " auc=" << row.auc_value << " logloss=" << row.logloss_value
                << "\n";
  } else if (stage == "case-study") {
    auto r = run_case_study(cfg, out, sweep_max_users);
    std::cout << "case-study: target attention increased for " << r.fraction_increased * 100.0
              << "% of users\n";
  } else if (stage == "verify-bayes") {
    auto r = run_verify_bayes(cfg, out);
    for (const auto& p : r.report.points)
      if (p.concept_id != 0 && (p.m == r.report.points.back().m || p.median_exp_mr < 0.01))
        std::cout << "verify-bayes: M=" << p.m << " concept=" << p.concept_id
                  << " median exp(M*r_M)=" << p.median_exp_mr << " agreement=" << p.agreement << "\n";
  } else {
    raise(Errc::config, "unknown stage " + stage);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-profile inference pipeline"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "JSON run configuration")
      ->envname("UIP_CONFIG")
      ->check(CLI::ExistingFile);
  app.add_option("--out", args.out_dir, "run directory for artifacts")->envname("UIP_OUT");
  uint64_t seed_val = 0;
  auto* seed_opt = app.add_option("--seed", seed_val, "override the config seed")->envname("UIP_SEED");
  int threads_val = 0;
  auto* threads_opt =
      app.add_option("--threads", threads_val, "worker cap; 1 is bitwise deterministic")
          ->envname("UIP_THREADS");

  std::string variant = "with_bank";
  int case_max_users = 0;

  app.add_subcommand("gen-data", "generate or ingest the interaction dataset");
  app.add_subcommand("train-lm", "train and freeze the behavior language model");
  app.add_subcommand("infer", "infer per-user soft profiles (joint VQ when configured)");
  app.add_subcommand("build-bank", "quantize profiles into the feature bank");
  auto* rec_cmd = app.add_subcommand("train-rec", "train the downstream CTR model");
  rec_cmd->add_option("--variant", variant, "with_bank | id_only | raw_theta");
  app.add_subcommand("eval", "evaluate trained recommenders and emit reports");
  app.add_subcommand("ablate", "quantized-ID vs raw-theta serving comparison");
  app.add_subcommand("sweep-codebook", "vary the first codebook size");
  auto* case_cmd = app.add_subcommand("case-study", "before/after attention export");
  case_cmd->add_option("--max-users", case_max_users, "cap exported users (0 = all)");
  app.add_subcommand("verify-bayes", "posterior-concentration harness");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (seed_opt->count()) args.seed = seed_val;
    if (threads_opt->count()) args.threads = threads_val;
    return run_stage(args, variant, app.get_subcommands().front()->get_name(), case_max_users);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case Errc::config: return 2;
      case Errc::artifact: return 3;
      case Errc::divergence: return 4;
      case Errc::io: return 3;
    }
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
