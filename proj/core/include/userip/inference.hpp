#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "userip/lm.hpp"

namespace userip {

// Prompt skeleton: M (profile-name span, soft-slot) pairs, an optional
// delimiter after each pair, then the task description. Target tokens are
// never part of the template.
struct PromptTemplate {
  std::vector<std::vector<std::string>> profile_names;  // word span per profile
  std::vector<int> slot_widths;                         // soft tokens per profile
  bool use_delimiter = false;
  std::vector<std::string> task_words;
  // rule (b): profile-name rows attend only within their own segment. The
  // relaxed reading (names also see earlier pairs causally) stays behind
  // this switch.
  bool strict_name_isolation = true;

  int n_profiles() const { return static_cast<int>(profile_names.size()); }
  void validate() const;
};

PromptTemplate default_prompt_template(int n_profiles);

enum class Segment : uint8_t { name, soft, delim, task, target };

struct PromptLayout {
  struct Span {
    Segment kind;
    int profile;  // -1 for task/target
    int begin;
    int end;  // exclusive
  };
  std::vector<Span> spans;
  int length = 0;
  int target_begin = 0;
  int target_end = 0;
  std::vector<Segment> kind_at;
  std::vector<int> profile_at;

  std::vector<int> positions_of(Segment kind, int profile = -1) const;
  void validate() const;
};

// Per-user trainable soft profile vectors, the only LM-side trainables.
struct SoftProfileSet {
  uint32_t user_id = 0;
  std::vector<Tensor> theta;  // profile m: slot_widths[m] x embed_dim
  uint64_t init_seed = 0;
};

// mean of the frozen token-embedding table plus sigma-scaled noise
SoftProfileSet init_soft_profiles(const LMParams& params, const PromptTemplate& tmpl, uint32_t user,
                                  uint64_t seed, double sigma = 0.02);

struct AssembledPrompt {
  Tensor inputs;            // T x d, gradient flows only into soft slots
  PromptLayout layout;
  std::vector<int> tokens;  // discrete id per position (pad at soft slots)
};

AssembledPrompt assemble_prompt(const LMParams& params, const Vocab& vocab,
                                const PromptTemplate& tmpl, const SoftProfileSet& profiles,
                                std::span<const int> behavior_items, long* truncations = nullptr);

// Restricted causal mask over a layout: soft rows see their own name span and
// themselves, name rows stay inside their own segment, task and target rows
// attend causally to everything earlier. Never attends forward.
BoolMatrix build_causal_mask(const PromptLayout& layout, bool strict_name_isolation = true);

// mean NLL over the behavior span under the restricted mask
Tensor llm_loss(const LMParams& params, const Vocab& vocab, const PromptTemplate& tmpl,
                const SoftProfileSet& profiles, std::span<const int> behavior_items,
                AttentionCapture* capture = nullptr, long* truncations = nullptr);

// ---------------------------------------------------------------------------
// Inference loop (Algorithm 1, g1 branch; quant joins through JointHook)
// ---------------------------------------------------------------------------

class JointHook {
 public:
  virtual ~JointHook() = default;
  // weighted extra loss for one user, built inside the caller's tape
  virtual Tensor user_term(uint32_t user, const std::vector<Tensor>& theta) = 0;
  // update hook-owned parameters after a user batch
  virtual void batch_step() = 0;
  // epoch boundary; theta_of exposes every user's current vectors
  virtual void epoch_end(int epoch, const std::vector<uint32_t>& users,
                         const std::function<const std::vector<Tensor>&(uint32_t)>& theta_of) = 0;
  virtual bool active() const = 0;
};

struct InferConfig {
  int epochs = 100;
  double lr = 1e-3;
  int batch_users = 128;
  int patience = 5;        // early stop when the epoch loss plateaus
  double min_delta = 1e-3;
  double divergence_factor = 10.0;
  double init_sigma = 0.02;
  uint64_t seed = 0;
  // workers for the per-user LM backward phase; hook updates stay serialized.
  // threads == 1 guarantees bitwise determinism
  int threads = 1;
};

struct InferResult {
  std::map<uint32_t, SoftProfileSet> profiles;
  std::vector<double> epoch_mean_loss;
  int epochs_run = 0;
  uint32_t lm_checksum_before = 0;
  uint32_t lm_checksum_after = 0;
  long truncated_prompts = 0;
};

InferResult infer_profiles(const Dataset& data, const LMParams& params, const Vocab& vocab,
                           const PromptTemplate& tmpl, const InferConfig& cfg,
                           JointHook* hook = nullptr);

// ---------------------------------------------------------------------------
// Attention export (case study)
// ---------------------------------------------------------------------------

struct AttentionRow {
  uint32_t user = 0;
  int profile = 0;
  int position = 0;
  std::string token;
  Segment segment = Segment::target;
  std::string stage;
  double weight = 0.0;  // min-max normalized within one exported table
};

// attention received by each soft slot from every token position, averaged
// over heads and layers, min-max normalized per (user, stage) table
std::vector<AttentionRow> export_attention(const LMParams& params, const Vocab& vocab,
                                           const PromptTemplate& tmpl,
                                           const SoftProfileSet& profiles,
                                           std::span<const int> behavior_items,
                                           const std::string& stage);

// mean normalized target->soft attention per profile; the case-study summary
std::vector<double> mean_target_attention(const std::vector<AttentionRow>& rows, int n_profiles);

// ---------------------------------------------------------------------------
// Theta checkpoints
// ---------------------------------------------------------------------------

void save_profiles(const std::filesystem::path& p, const std::map<uint32_t, SoftProfileSet>& profiles,
                   const PromptTemplate& tmpl, int embed_dim, uint64_t seed,
                   const std::string& extra_meta_json = "");
struct ProfilesFile {
  std::map<uint32_t, SoftProfileSet> profiles;
  std::vector<int> slot_widths;
  int embed_dim = 0;
  uint64_t seed = 0;
  std::string meta_json;
};
ProfilesFile load_profiles(const std::filesystem::path& p);

}  // namespace userip
