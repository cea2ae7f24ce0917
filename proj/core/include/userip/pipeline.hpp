#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "userip/bank.hpp"
#include "userip/bayes.hpp"
#include "userip/corpus.hpp"
#include "userip/inference.hpp"
#include "userip/lm.hpp"
#include "userip/quant.hpp"
#include "userip/recommender.hpp"

namespace userip {

// Resolved run configuration. Defaults form the smoke profile: the whole
// pipeline runs in minutes on one CPU core.
struct RunConfig {
  uint64_t seed = 42;
  int threads = 1;

  struct DataCfg {
    int n_users = 500;
    int n_items = 300;
    int n_categories = 2;
    std::vector<int> class_counts = {4, 3};
    int seq_len = 30;
    double mix_own = 0.7;
    double zipf_exponent = 1.0;
    double rating_boost = 1.8;
    double sigma_match = 0.6;
    double sigma_nonmatch = 0.8;
    int min_interactions = 4;
    std::array<int, 3> split_ratios = {8, 1, 1};
    std::string ingest_path;  // non-empty: ingest an external review file instead
  } data;

  struct LmCfg {
    int embed_dim = 64;
    int n_layers = 2;
    int n_heads = 2;
    int context_len = 128;
    double dropout = 0.0;
    double lr = 1e-3;
    int epochs = 20;
    int batch_size = 16;
  } lm;

  struct InferCfg {
    std::vector<int> slot_widths = {1, 1};
    int epochs = 100;
    double lr = 1e-3;
    int batch_users = 128;
    int patience = 5;
    double min_delta = 1e-3;
    double init_sigma = 0.02;
    bool joint_vq = true;
    bool use_delimiter = false;
    bool strict_name_isolation = true;
  } infer;

  struct QuantCfg {
    std::vector<int> code_counts = {4, 3};
    double alpha = 0.001;
    double beta = 0.001;
    double codebook_lr = 1e-2;
    int surrogate_item_dim = 16;
    int surrogate_hidden = 32;
    bool consolidate = true;
  } quant;

  struct RecCfg {
    int embed_dim = 8;
    int cross_layers = 3;
    std::vector<int> mlp_dims = {16, 16};
    double dropout = 0.2;
    double lr = 1e-3;
    int batch_size = 128;
    int epochs = 50;
    int patience = 5;
    double logit_clip = 30.0;
  } rec;

  struct BayesCfg {
    double p_star = 0.8;
    double p_alt = 0.5;
    std::vector<int> m_values = {1, 5, 13, 26, 60, 120, 200};
    int trials = 2000;
  } bayes;

  struct SweepCfg {
    std::vector<int> k1_values = {4, 8, 16, 32};
  } sweep;

  void validate() const;
  // strict parsing: unknown keys anywhere are rejected
  static RunConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
  std::string config_hash() const;

  PromptTemplate prompt_template() const;
  DCNConfig dcn_config() const;
};

// Canonical artifact names inside a run directory.
namespace artifact {
inline constexpr const char* dataset = "dataset.tsv";
inline constexpr const char* idmap = "idmap.tsv";
inline constexpr const char* split = "split.tsv";
inline constexpr const char* planted = "planted.tsv";
inline constexpr const char* vocab = "vocab.tsv";
inline constexpr const char* lm_ckpt = "lm.ckpt";
inline constexpr const char* theta_ckpt = "theta.ckpt";
inline constexpr const char* codebook_ckpt = "codebook.ckpt";
inline constexpr const char* bank_file = "bank.uipb";
inline constexpr const char* metrics_csv = "metrics.csv";
inline constexpr const char* improvement_csv = "improvement.csv";
inline constexpr const char* ablation_csv = "ablation.csv";
inline constexpr const char* sweep_csv = "sweep.csv";
inline constexpr const char* attention_csv = "attention.csv";
inline constexpr const char* case_summary_csv = "case_summary.csv";
inline constexpr const char* concentration_csv = "concentration.csv";
inline constexpr const char* resolved_config = "resolved_config.json";
std::string dcn_ckpt(RecVariant variant);
std::string manifest(const std::string& stage);
}  // namespace artifact

// ---------------------------------------------------------------------------
// Stages. Each validates its upstream artifacts against the producing
// manifests, writes its outputs plus a manifest, and returns a small summary.
// ---------------------------------------------------------------------------

struct StageResult {
  std::string stage;
  std::vector<std::string> outputs;
};

StageResult run_gen_data(const RunConfig& cfg, const std::filesystem::path& out);
StageResult run_train_lm(const RunConfig& cfg, const std::filesystem::path& out);

struct InferStageResult : StageResult {
  int epochs_run = 0;
  double final_loss = 0.0;
  uint32_t lm_checksum_before = 0;
  uint32_t lm_checksum_after = 0;
};
InferStageResult run_infer(const RunConfig& cfg, const std::filesystem::path& out);

struct BankStageResult : StageResult {
  size_t users = 0;
  std::vector<std::pair<int, int>> dead_codes;
};
BankStageResult run_build_bank(const RunConfig& cfg, const std::filesystem::path& out);

struct RecStageResult : StageResult {
  double best_valid_auc = 0.0;
};
RecStageResult run_train_rec(const RunConfig& cfg, const std::filesystem::path& out,
                             RecVariant variant);

struct EvalRow {
  std::string variant;
  std::string fold;
  double auc_value = 0.0;
  double logloss_value = 0.0;
};
struct EvalStageResult : StageResult {
  std::vector<EvalRow> rows;
};
// evaluates every trained variant on valid and test folds; emits metrics.csv
// and, when id_only is present, the improvement CSV against it
EvalStageResult run_eval(const RunConfig& cfg, const std::filesystem::path& out);

struct AblateStageResult : StageResult {
  double auc_with_vq = 0.0;
  double auc_without_vq = 0.0;
};
AblateStageResult run_ablate(const RunConfig& cfg, const std::filesystem::path& out);

struct SweepRow {
  int k1 = 0;
  double auc_value = 0.0;
  double logloss_value = 0.0;
  double purity_joint = 0.0;
};
struct SweepStageResult : StageResult {
  std::vector<SweepRow> rows;
};
SweepStageResult run_sweep_codebook(const RunConfig& cfg, const std::filesystem::path& out);

struct CaseStudyResult : StageResult {
  // per user: mean normalized target->soft attention, before and after
  std::vector<std::array<double, 2>> per_user_mean;
  double fraction_increased = 0.0;
};
CaseStudyResult run_case_study(const RunConfig& cfg, const std::filesystem::path& out,
                               int max_users = 0);

struct BayesStageResult : StageResult {
  ConcentrationReport report;
};
BayesStageResult run_verify_bayes(const RunConfig& cfg, const std::filesystem::path& out);

// joint-class purity and adjusted Rand index of a bank against planted truth
struct RecoveryScore {
  double purity_joint = 0.0;
  double ari_joint = 0.0;
};
RecoveryScore score_recovery(const Dataset& data, const FeatureBank& bank);

}  // namespace userip
