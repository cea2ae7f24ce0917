#pragma once

#include <map>
#include <optional>
#include <vector>

#include "userip/bank.hpp"

namespace userip {

enum class RecVariant { with_bank, id_only, raw_theta };
const char* variant_name(RecVariant v);
RecVariant variant_from_name(const std::string& s);

struct CTRExample {
  uint32_t user_id = 0;
  uint32_t item_id = 0;
  std::vector<int> profile_codes;              // -1 marks the reserved unknown row
  std::vector<std::vector<double>> raw_theta;  // per profile, raw_theta variant only
  int label = 0;
};

struct DCNConfig {
  int embed_dim = 8;
  int cross_layers = 3;
  std::vector<int> mlp_dims = {16, 16};
  double dropout = 0.2;
  double lr = 1e-3;
  int batch_size = 128;
  int epochs = 50;
  int patience = 5;        // early stop on validation AUC
  double logit_clip = 30.0;
  void validate() const;
};

// DCN-style CTR model: an explicit feature-crossing tower and an MLP tower
// over concatenated per-field embeddings, joined by a logistic head.
struct DCNModel {
  DCNConfig cfg;
  RecVariant variant = RecVariant::with_bank;
  int n_users = 0, n_items = 0;
  std::vector<int> code_counts;  // K_m (with_bank)
  std::vector<int> theta_dims;   // flattened theta width per profile (raw_theta)

  Tensor user_table;  // (n_users + 1) x embed_dim; last row reserved
  Tensor item_table;
  std::vector<Tensor> profile_tables;  // (K_m + 1) x embed_dim; last row = unknown
  std::vector<Tensor> theta_proj;      // theta_dim x embed_dim (raw_theta)
  std::vector<Tensor> cross_w, cross_b;
  std::vector<Tensor> mlp_w, mlp_b;
  Tensor out_w, out_b;  // zero-initialized: untrained prediction is exactly 0.5

  static DCNModel init(RecVariant variant, int n_users, int n_items,
                       const std::vector<int>& code_counts, const std::vector<int>& theta_dims,
                       const DCNConfig& cfg, uint64_t seed);
  std::vector<Tensor> params();
  int field_count() const;

  void save(const std::filesystem::path& p, const std::string& extra_meta_json = "") const;
  static DCNModel load(const std::filesystem::path& p);
};

// concatenated per-field embeddings for a batch; gradient-carrying
Tensor dcn_embed(DCNModel& model, std::span<const CTRExample> batch);

// x_{l+1} = x0 * (x_l . w) + b + x_l, batched over rows
Tensor cross_layer(const Tensor& x0, const Tensor& xl, const Tensor& w, const Tensor& b);

// pre-sigmoid scores; dropout active only when an rng is supplied
Tensor dcn_logits(DCNModel& model, std::span<const CTRExample> batch, Rng* dropout_rng = nullptr);

// probability in (0, 1); logit clipped for numeric safety
double predict(DCNModel& model, const CTRExample& example);
std::vector<double> predict_batch(DCNModel& model, std::span<const CTRExample> batch);

// ---------------------------------------------------------------------------
// Example construction and training
// ---------------------------------------------------------------------------

std::vector<CTRExample> build_examples(const Dataset& data, Fold fold, RecVariant variant,
                                       const FeatureBank* bank,
                                       const std::map<uint32_t, SoftProfileSet>* profiles);

struct RecTrainReport {
  std::vector<double> train_loss;
  std::vector<double> valid_auc;
  int best_epoch = -1;
  double best_valid_auc = 0.0;
};

// trains a prebuilt model in place; on return the model holds the
// best-validation parameter state
void fit_dcn(DCNModel& model, std::vector<CTRExample> train_examples,
             const std::vector<CTRExample>& valid_examples, uint64_t seed,
             RecTrainReport* report = nullptr);

// core loop over prebuilt examples; returns the best-validation model
DCNModel train_dcn(std::vector<CTRExample> train_examples,
                   const std::vector<CTRExample>& valid_examples, RecVariant variant, int n_users,
                   int n_items, const std::vector<int>& code_counts,
                   const std::vector<int>& theta_dims, const DCNConfig& cfg, uint64_t seed,
                   RecTrainReport* report = nullptr);

// end-to-end: builds fold examples from the dataset plus bank/profiles
DCNModel train_rec(const Dataset& data, const DCNConfig& cfg, RecVariant variant,
                   const FeatureBank* bank, const std::map<uint32_t, SoftProfileSet>* profiles,
                   uint64_t seed, RecTrainReport* report = nullptr);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// probability a random positive outranks a random negative; ties count half
double auc(std::span<const double> scores, std::span<const int> labels);
// mean binary cross-entropy with 1e-12 probability clipping
double logloss(std::span<const double> scores, std::span<const int> labels);

struct RelativeImprovement {
  double auc_pct = 0.0;
  double logloss_pct = 0.0;
};
RelativeImprovement relative_improvement(double model_auc, double base_auc, double model_logloss,
                                         double base_logloss);

}  // namespace userip
