#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "userip/corpus.hpp"
#include "userip/tensor.hpp"

namespace userip {

// Behavior vocabulary: one token per item, whole-word template tokens for
// profile names and the task description, plus reserved specials.
struct Vocab {
  std::vector<std::string> symbols;
  std::unordered_map<std::string, int> ids;
  int pad = -1, bos = -1, eos = -1, del = -1;
  int item_base = -1;  // token id of item 0; items are contiguous
  int n_items = 0;

  int size() const { return static_cast<int>(symbols.size()); }
  int id_of(const std::string& s) const;
  const std::string& symbol_of(int id) const;
  int item_token(int item) const;
  bool is_item_token(int id) const { return id >= item_base && id < item_base + n_items; }

  static Vocab build(int n_items, const std::vector<std::vector<std::string>>& profile_names,
                     const std::vector<std::string>& task_words);
  void save(const std::filesystem::path& p) const;
  static Vocab load(const std::filesystem::path& p);
};

struct LMConfig {
  int embed_dim = 64;
  int n_layers = 2;
  int n_heads = 2;
  int context_len = 128;
  int vocab_size = 0;
  double dropout = 0.0;

  int head_dim() const { return embed_dim / n_heads; }
  void validate() const;
  std::string to_json() const;
  static LMConfig from_json(const std::string& j);
};

struct LMParams {
  LMConfig cfg;
  Tensor token_embedding;  // V x d; the output projection is tied to it
  Tensor pos_embedding;    // context_len x d

  struct Layer {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;  // d x d
    Tensor bq, bk, bv, bo;  // d
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_w1, mlp_b1;  // d x 4d, 4d
    Tensor mlp_w2, mlp_b2;  // 4d x d, d
  };
  std::vector<Layer> layers;
  Tensor final_gain, final_bias;
  bool frozen = false;

  static LMParams init(const LMConfig& cfg, uint64_t seed);
  std::vector<Tensor> all_params() const;  // fixed order
  void freeze_all();
  uint32_t checksum() const;

  void save(const std::filesystem::path& p, const std::string& extra_meta_json) const;
  static LMParams load(const std::filesystem::path& p);
};

// attention probabilities captured during a forward pass: [layer][head],
// row-major T x T, row = attending position
struct AttentionCapture {
  int t = 0;
  std::vector<std::vector<std::vector<double>>> weights;
};

// Masked multi-head self-attention stack over already-embedded inputs
// (token embeddings and injected soft vectors alike). mask(i, j) == true
// lets position i attend to position j; every row must attend somewhere.
Tensor lm_forward(const LMParams& params, const Tensor& inputs, const BoolMatrix& mask,
                  AttentionCapture* capture = nullptr, double dropout_rate = 0.0,
                  Rng* dropout_rng = nullptr);

// token embeddings + positional embeddings for a plain token sequence
Tensor lm_embed_tokens(const LMParams& params, std::span<const int> tokens);

// Mean next-token NLL over target positions [span_start, span_end) of the
// token sequence whose (possibly soft) input vectors are given. tokens[i]
// must hold the discrete target id for every position in the span.
Tensor lm_nll(const LMParams& params, const Tensor& inputs, const BoolMatrix& mask,
              std::span<const int> tokens, int span_start, int span_end,
              AttentionCapture* capture = nullptr);

// convenience for plain token sequences under a standard causal mask
Tensor lm_nll_tokens(const LMParams& params, std::span<const int> tokens, int span_start,
                     int span_end);

// "<bos> D_task item_1 ... item_T <eos>", items left-truncated to fit context
std::vector<int> lm_training_sequence(const Vocab& vocab, const std::vector<std::string>& task_words,
                                      std::span<const int> items, int context_len,
                                      long* truncations = nullptr);

struct LMTrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;
  long truncated_sequences = 0;
};

struct LMTrainConfig {
  int epochs = 8;
  double lr = 1e-3;
  int batch_size = 16;
  std::vector<std::string> task_words;
};

// next-token training on per-user train-fold sequences; the returned params
// are frozen
LMParams train_lm(const Dataset& data, const Vocab& vocab, const LMConfig& cfg,
                  const LMTrainConfig& train_cfg, uint64_t seed, LMTrainReport* report = nullptr);

// mean per-token NLL of fold sequences; the first `skip_items` item
// predictions of each sequence are excluded
double lm_eval_nll(const LMParams& params, const Vocab& vocab,
                   const std::vector<std::string>& task_words, const Dataset& data,
                   std::optional<Fold> fold, int skip_items = 0);

}  // namespace userip
