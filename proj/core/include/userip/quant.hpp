#pragma once

#include <map>
#include <span>
#include <vector>

#include "userip/inference.hpp"
#include "userip/optim.hpp"

namespace userip {

// One table of trainable code vectors per profile, with per-code usage
// counters since the last reset.
struct Codebook {
  std::vector<Tensor> tables;             // table m: K_m x dim_m
  std::vector<std::vector<long>> usage;   // assignment counts since last reset

  int n_profiles() const { return static_cast<int>(tables.size()); }
  int code_count(int m) const { return tables[static_cast<size_t>(m)].dim(0); }
  int code_dim(int m) const { return tables[static_cast<size_t>(m)].dim(1); }
  void reset_usage();
  void validate() const;

  static Codebook init(const std::vector<int>& code_counts, const std::vector<int>& dims,
                       uint64_t seed);
  void save(const std::filesystem::path& p, const std::string& extra_meta_json = "") const;
  static Codebook load(const std::filesystem::path& p);
};

struct Assignment {
  std::vector<uint32_t> users;
  std::vector<std::vector<int>> codes;  // parallel to users: (c_1 .. c_M)

  const std::vector<int>& codes_of(uint32_t user) const;
  bool has(uint32_t user) const;
};

// index of the code vector closest to theta (squared L2); ties break to the
// lowest index
int nearest(std::span<const double> theta_flat, const Tensor& table);

// codebook pull + commitment: sum_m ( ||sg[theta] - v||^2 + beta * ||theta - sg[v]||^2 )
struct VqLossResult {
  Tensor loss;
  std::vector<int> assignment;
};
VqLossResult vq_loss(const std::vector<Tensor>& theta, const Codebook& book, double beta);

// forward value is the assigned code vector; backward passes the gradient to
// theta unchanged and to the code vector through its forward use
struct StraightThroughResult {
  Tensor quantized;
  int index = 0;
};
StraightThroughResult straight_through(const Tensor& theta_m, const Tensor& table_m);

// ---------------------------------------------------------------------------
// Surrogate recommender supervising the quantized vectors (BCE term)
// ---------------------------------------------------------------------------

struct SurrogateRecConfig {
  int item_embed_dim = 16;
  int hidden = 32;
  double lr = 1e-3;
};

struct SurrogateRec {
  SurrogateRecConfig cfg;
  Tensor item_embedding;  // n_items x item_embed_dim
  Tensor w1, b1, w2, b2;  // MLP over [quantized profiles, item embedding]

  static SurrogateRec init(int n_items, int profile_dim_total, const SurrogateRecConfig& cfg,
                           uint64_t seed);
  std::vector<Tensor> params();
};

// BCE of the surrogate consuming quantized profile vectors for one user's
// item batch; quantized vectors are broadcast across the batch
Tensor surrogate_loss(SurrogateRec& rec, const std::vector<Tensor>& quantized,
                      std::span<const int> items, std::span<const double> labels);

// total objective: llm_term + alpha * vec_term
Tensor total_loss(const Tensor& llm_term, const Tensor& vec_term, double alpha);

// final assignments for every user; fills usage counters and reports dead codes
struct AssignAllResult {
  Assignment assignment;
  std::vector<std::pair<int, int>> dead_codes;  // (profile, code)
};
AssignAllResult assign_all(const std::map<uint32_t, SoftProfileSet>& profiles, Codebook& book);

// ---------------------------------------------------------------------------
// Joint-training hook for the inference loop (Algorithm 1's g2 branch)
// ---------------------------------------------------------------------------

struct QuantTrainConfig {
  std::vector<int> code_counts;  // K_m
  double alpha = 0.001;          // weight of the vec term in the total loss
  double beta = 0.001;           // commitment weight
  // The codebook advances once per user batch while every theta advances once
  // per epoch, so its rate must outpace theta drift for the pull to track.
  double codebook_lr = 1e-2;
  SurrogateRecConfig surrogate;
  int warmup_epochs = 1;  // g1-only epochs before k-means++ seeding
  bool reseed_dead_codes = true;
  uint64_t seed = 0;
};

class CodebookTrainer : public JointHook {
 public:
  CodebookTrainer(const Dataset& data, int n_items, const std::vector<int>& profile_dims,
                  const QuantTrainConfig& cfg);

  Tensor user_term(uint32_t user, const std::vector<Tensor>& theta) override;
  void batch_step() override;
  void epoch_end(int epoch, const std::vector<uint32_t>& users,
                 const std::function<const std::vector<Tensor>&(uint32_t)>& theta_of) override;
  bool active() const override { return seeded_; }

  // Lloyd passes over the frozen final thetas until the assignment reaches a
  // fixpoint: finishes minimizing the codebook pull term once the joint loop
  // has stopped. Returns the number of passes used.
  int consolidate(const std::vector<uint32_t>& users,
                  const std::function<const std::vector<Tensor>&(uint32_t)>& theta_of,
                  int max_iters = 50);

  Codebook& book() { return book_; }
  SurrogateRec& surrogate() { return rec_; }
  const std::vector<double>& epoch_quant_error() const { return epoch_quant_error_; }
  long reseeded_codes() const { return reseeded_; }
  // codes chosen the last time each user was visited during training
  const std::map<uint32_t, std::vector<int>>& last_assignments() const { return last_assignments_; }

 private:
  QuantTrainConfig cfg_;
  Codebook book_;
  SurrogateRec rec_;
  Adam opt_;
  std::vector<Tensor> trainable_;
  std::map<uint32_t, std::pair<std::vector<int>, std::vector<double>>> user_items_;  // items, labels
  std::map<uint32_t, std::vector<int>> last_assignments_;
  std::vector<double> epoch_quant_error_;
  bool seeded_ = false;
  long reseeded_ = 0;
  Rng reseed_rng_;
};

// k-means++ seeding over point rows
std::vector<std::vector<double>> kmeanspp(const std::vector<std::vector<double>>& points, int k,
                                          Rng& rng);

// ---------------------------------------------------------------------------
// Clustering agreement metrics
// ---------------------------------------------------------------------------

double purity(std::span<const int> clusters, std::span<const int> truth);
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace userip
