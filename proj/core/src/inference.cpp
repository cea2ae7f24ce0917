#include "userip/inference.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "json.hpp"
#include "userip/optim.hpp"

namespace userip {

void PromptTemplate::validate() const {
  if (profile_names.empty()) raise(Errc::config, "prompt template: M must be >= 1");
  if (slot_widths.size() != profile_names.size())
    raise(Errc::config, "prompt template: one slot width per profile required");
  for (const auto& name : profile_names)
    if (name.empty()) raise(Errc::config, "prompt template: empty profile-name span");
  for (int s : slot_widths)
    if (s < 1) raise(Errc::config, "prompt template: slot widths must be >= 1");
  if (task_words.empty()) raise(Errc::config, "prompt template: empty task description");
}

PromptTemplate default_prompt_template(int n_profiles) {
  if (n_profiles < 1) raise(Errc::config, "default_prompt_template: M must be >= 1");
  PromptTemplate t;
  t.profile_names.push_back({"this", "users", "hobby", "is"});
  if (n_profiles >= 2) t.profile_names.push_back({"their", "background", "is"});
  for (int m = 2; m < n_profiles; ++m)
    t.profile_names.push_back({"their", "trait" + std::to_string(m), "is"});
  t.slot_widths.assign(static_cast<size_t>(n_profiles), 1);
  t.task_words = {"predict", "the", "next", "purchases", ":"};
  return t;
}

std::vector<int> PromptLayout::positions_of(Segment kind, int profile) const {
  std::vector<int> out;
  for (int p = 0; p < length; ++p)
    if (kind_at[static_cast<size_t>(p)] == kind &&
        (profile < 0 || profile_at[static_cast<size_t>(p)] == profile))
      out.push_back(p);
  return out;
}

void PromptLayout::validate() const {
  if (length <= 0) raise(Errc::config, "prompt layout: empty");
  if (static_cast<int>(kind_at.size()) != length || static_cast<int>(profile_at.size()) != length)
    raise(Errc::config, "prompt layout: per-position labels must cover the sequence");
  if (spans.empty() || spans.back().kind != Segment::target)
    raise(Errc::config, "prompt layout: target segment must be last");
  int covered = 0;
  for (const auto& s : spans) {
    if (s.begin != covered || s.end <= s.begin)
      raise(Errc::config, "prompt layout: spans must partition the sequence");
    covered = s.end;
  }
  if (covered != length) raise(Errc::config, "prompt layout: spans must partition the sequence");
}

SoftProfileSet init_soft_profiles(const LMParams& params, const PromptTemplate& tmpl, uint32_t user,
                                  uint64_t seed, double sigma) {
  tmpl.validate();
  int d = params.cfg.embed_dim;
  int v = params.cfg.vocab_size;
  std::vector<double> mean_row(static_cast<size_t>(d), 0.0);
  auto emb = params.token_embedding.values();
  for (int row = 0; row < v; ++row)
    for (int c = 0; c < d; ++c) mean_row[static_cast<size_t>(c)] += emb[static_cast<size_t>(row) * d + c];
  for (auto& x : mean_row) x /= v;

  SoftProfileSet set;
  set.user_id = user;
  set.init_seed = seed;
  for (int m = 0; m < tmpl.n_profiles(); ++m) {
    Rng rng(mix_seed(seed, (static_cast<uint64_t>(user) << 8) ^ static_cast<uint64_t>(m)));
    int s = tmpl.slot_widths[static_cast<size_t>(m)];
    std::vector<double> vals(static_cast<size_t>(s) * d);
    for (int row = 0; row < s; ++row)
      for (int c = 0; c < d; ++c)
        vals[static_cast<size_t>(row) * d + c] = mean_row[static_cast<size_t>(c)] + rng.gaussian(0.0, sigma);
    set.theta.push_back(Tensor::from_values({s, d}, std::move(vals), true));
  }
  return set;
}

AssembledPrompt assemble_prompt(const LMParams& params, const Vocab& vocab,
                                const PromptTemplate& tmpl, const SoftProfileSet& profiles,
                                std::span<const int> behavior_items, long* truncations) {
  tmpl.validate();
  if (behavior_items.empty()) raise(Errc::config, "assemble_prompt: behavior sequence is empty");
  if (static_cast<int>(profiles.theta.size()) != tmpl.n_profiles())
    raise(Errc::config, "assemble_prompt: profile set does not match template");

  int n_profiles = tmpl.n_profiles();
  int overhead = 0;
  for (int m = 0; m < n_profiles; ++m) {
    overhead += static_cast<int>(tmpl.profile_names[static_cast<size_t>(m)].size());
    overhead += tmpl.slot_widths[static_cast<size_t>(m)];
    if (tmpl.use_delimiter) overhead += 1;
  }
  overhead += static_cast<int>(tmpl.task_words.size());
  int max_behavior = params.cfg.context_len - overhead;
  if (max_behavior < 1) raise(Errc::config, "assemble_prompt: template leaves no room for targets");

  size_t start = 0;
  if (static_cast<int>(behavior_items.size()) > max_behavior) {
    start = behavior_items.size() - static_cast<size_t>(max_behavior);
    if (truncations) ++(*truncations);
  }

  PromptLayout layout;
  std::vector<int> tokens;
  std::vector<Tensor> parts;
  auto push_span = [&layout](Segment kind, int profile, int len) {
    int begin = layout.length;
    layout.spans.push_back({kind, profile, begin, begin + len});
    for (int i = 0; i < len; ++i) {
      layout.kind_at.push_back(kind);
      layout.profile_at.push_back(profile);
    }
    layout.length += len;
  };

  for (int m = 0; m < n_profiles; ++m) {
    std::vector<int> name_ids;
    for (const auto& w : tmpl.profile_names[static_cast<size_t>(m)]) name_ids.push_back(vocab.id_of(w));
    parts.push_back(select_rows(params.token_embedding, name_ids));
    tokens.insert(tokens.end(), name_ids.begin(), name_ids.end());
    push_span(Segment::name, m, static_cast<int>(name_ids.size()));

    parts.push_back(profiles.theta[static_cast<size_t>(m)]);
    for (int s = 0; s < tmpl.slot_widths[static_cast<size_t>(m)]; ++s) tokens.push_back(vocab.pad);
    push_span(Segment::soft, m, tmpl.slot_widths[static_cast<size_t>(m)]);

    if (tmpl.use_delimiter) {
      std::vector<int> del_ids{vocab.del};
      parts.push_back(select_rows(params.token_embedding, del_ids));
      tokens.push_back(vocab.del);
      push_span(Segment::delim, m, 1);
    }
  }

  std::vector<int> task_ids;
  for (const auto& w : tmpl.task_words) task_ids.push_back(vocab.id_of(w));
  parts.push_back(select_rows(params.token_embedding, task_ids));
  tokens.insert(tokens.end(), task_ids.begin(), task_ids.end());
  push_span(Segment::task, -1, static_cast<int>(task_ids.size()));

  std::vector<int> target_ids;
  for (size_t i = start; i < behavior_items.size(); ++i)
    target_ids.push_back(vocab.item_token(behavior_items[i]));
  parts.push_back(select_rows(params.token_embedding, target_ids));
  tokens.insert(tokens.end(), target_ids.begin(), target_ids.end());
  push_span(Segment::target, -1, static_cast<int>(target_ids.size()));

  layout.target_begin = layout.spans.back().begin;
  layout.target_end = layout.spans.back().end;
  layout.validate();

  Tensor stacked = concat(parts, 0);
  std::vector<int> positions(static_cast<size_t>(layout.length));
  for (int i = 0; i < layout.length; ++i) positions[static_cast<size_t>(i)] = i;
  Tensor inputs = add(stacked, select_rows(params.pos_embedding, positions));

  AssembledPrompt out;
  out.inputs = inputs;
  out.layout = std::move(layout);
  out.tokens = std::move(tokens);
  return out;
}

BoolMatrix build_causal_mask(const PromptLayout& layout, bool strict_name_isolation) {
  layout.validate();
  int t = layout.length;
  BoolMatrix mask(t, t);
  for (int i = 0; i < t; ++i) {
    Segment kind = layout.kind_at[static_cast<size_t>(i)];
    int prof = layout.profile_at[static_cast<size_t>(i)];
    for (int j = 0; j <= i; ++j) {
      Segment jk = layout.kind_at[static_cast<size_t>(j)];
      int jp = layout.profile_at[static_cast<size_t>(j)];
      bool allow = false;
      switch (kind) {
        case Segment::soft:
          // own name span plus itself (and earlier slots of the same profile)
          allow = (jk == Segment::name && jp == prof) ||
                  (jk == Segment::soft && jp == prof) || j == i;
          break;
        case Segment::name:
          allow = strict_name_isolation
                      ? (jk == Segment::name && jp == prof)
                      : (jk == Segment::name || jk == Segment::soft || jk == Segment::delim);
          break;
        case Segment::delim:
          allow = (jk == Segment::name && jp == prof) || (jk == Segment::soft && jp == prof) || j == i;
          break;
        case Segment::task:
        case Segment::target:
          allow = true;
          break;
      }
      if (allow) mask.at(i, j) = 1;
    }
    mask.at(i, i) = 1;
  }
  return mask;
}

Tensor llm_loss(const LMParams& params, const Vocab& vocab, const PromptTemplate& tmpl,
                const SoftProfileSet& profiles, std::span<const int> behavior_items,
                AttentionCapture* capture, long* truncations) {
  AssembledPrompt prompt = assemble_prompt(params, vocab, tmpl, profiles, behavior_items, truncations);
  BoolMatrix mask = build_causal_mask(prompt.layout, tmpl.strict_name_isolation);
  return lm_nll(params, prompt.inputs, mask, prompt.tokens, prompt.layout.target_begin,
                prompt.layout.target_end, capture);
}

// ---------------------------------------------------------------------------
// Inference loop
// ---------------------------------------------------------------------------

InferResult infer_profiles(const Dataset& data, const LMParams& params, const Vocab& vocab,
                           const PromptTemplate& tmpl, const InferConfig& cfg, JointHook* hook) {
  tmpl.validate();
  if (!params.frozen) raise(Errc::config, "infer_profiles: LM params must be frozen");

  std::optional<Fold> fold = data.split.empty() ? std::nullopt : std::make_optional(Fold::train);
  std::vector<uint32_t> users;
  std::vector<std::vector<int>> behaviors;
  for (uint32_t u : data.active_users()) {
    auto items = data.user_item_sequence(u, fold);
    if (items.empty()) continue;
    users.push_back(u);
    behaviors.push_back(std::move(items));
  }
  if (users.empty()) raise(Errc::config, "infer_profiles: no users with training behavior");

  InferResult result;
  result.lm_checksum_before = params.checksum();

  std::map<uint32_t, SoftProfileSet> profiles;
  std::map<uint32_t, Adam> optimizers;
  for (uint32_t u : users) {
    profiles.emplace(u, init_soft_profiles(params, tmpl, u, cfg.seed, cfg.init_sigma));
    optimizers.emplace(u, Adam(cfg.lr));
  }

  auto theta_of = [&profiles](uint32_t u) -> const std::vector<Tensor>& {
    return profiles.at(u).theta;
  };

  Rng order_rng(mix_seed(cfg.seed, 0x02D3));
  std::vector<size_t> order(users.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double initial_loss = 0.0;
  double best_loss = 0.0;
  int stale_epochs = 0;
  int workers = std::max(1, cfg.threads);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;

    // phase 1: LM losses and theta gradients, shardable across workers (the
    // frozen LM is shared read-only and each theta belongs to one user)
    std::vector<double> lm_losses(order.size(), 0.0);
    auto lm_pass = [&](size_t begin, size_t step, long* truncations) {
      for (size_t oi = begin; oi < order.size(); oi += step) {
        uint32_t u = users[order[oi]];
        auto& set = profiles.at(u);
        Tape tape;
        Tensor loss = llm_loss(params, vocab, tmpl, set, behaviors[order[oi]], nullptr, truncations);
        lm_losses[oi] = loss.item();
        tape.backward(loss);
      }
    };
    if (workers == 1) {
      lm_pass(0, 1, &result.truncated_prompts);
    } else {
      std::vector<long> truncations(static_cast<size_t>(workers), 0);
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w)
        pool.emplace_back(lm_pass, static_cast<size_t>(w), static_cast<size_t>(workers),
                          &truncations[static_cast<size_t>(w)]);
      for (auto& t : pool) t.join();
      for (long c : truncations) result.truncated_prompts += c;
    }
    for (double l : lm_losses) epoch_loss += l;

    // phase 2: hook terms and parameter steps, in order
    int in_batch = 0;
    for (size_t oi = 0; oi < order.size(); ++oi) {
      uint32_t u = users[order[oi]];
      auto& set = profiles.at(u);
      if (hook && hook->active()) {
        Tape tape;
        Tensor extra = hook->user_term(u, set.theta);
        if (extra.defined()) {
          epoch_loss += extra.item();
          tape.backward(extra);
        }
      }
      optimizers.at(u).step(set.theta);
      ++in_batch;
      if (in_batch == cfg.batch_users || oi + 1 == order.size()) {
        if (hook && hook->active()) hook->batch_step();
        in_batch = 0;
      }
    }
    epoch_loss /= static_cast<double>(users.size());
    result.epoch_mean_loss.push_back(epoch_loss);
    result.epochs_run = epoch + 1;

    if (epoch == 0) {
      initial_loss = epoch_loss;
      best_loss = epoch_loss;
    } else {
      if (!std::isfinite(epoch_loss) || epoch_loss > cfg.divergence_factor * std::max(initial_loss, 1e-6))
        raise(Errc::divergence,
              "infer_profiles: loss " + std::to_string(epoch_loss) + " exceeded divergence guard at epoch " +
                  std::to_string(epoch));
      if (epoch_loss < best_loss - cfg.min_delta) {
        best_loss = epoch_loss;
        stale_epochs = 0;
      } else {
        ++stale_epochs;
      }
    }
    if (hook) hook->epoch_end(epoch, users, theta_of);
    if (stale_epochs >= cfg.patience) break;
  }

  result.lm_checksum_after = params.checksum();
  result.profiles = std::move(profiles);
  return result;
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

std::vector<AttentionRow> export_attention(const LMParams& params, const Vocab& vocab,
                                           const PromptTemplate& tmpl,
                                           const SoftProfileSet& profiles,
                                           std::span<const int> behavior_items,
                                           const std::string& stage) {
  AttentionCapture capture;
  (void)llm_loss(params, vocab, tmpl, profiles, behavior_items, &capture);
  AssembledPrompt prompt = assemble_prompt(params, vocab, tmpl, profiles, behavior_items);
  const auto& layout = prompt.layout;
  int t = layout.length;

  // mean over layers and heads of attention received by each soft position
  std::vector<std::vector<double>> received(
      static_cast<size_t>(tmpl.n_profiles()), std::vector<double>(static_cast<size_t>(t), 0.0));
  long n_mats = 0;
  for (const auto& layer : capture.weights) n_mats += static_cast<long>(layer.size());
  for (int m = 0; m < tmpl.n_profiles(); ++m) {
    auto soft_positions = layout.positions_of(Segment::soft, m);
    for (const auto& layer : capture.weights)
      for (const auto& mat : layer)
        for (int i = 0; i < t; ++i) {
          double w = 0.0;
          for (int p : soft_positions) w += mat[static_cast<size_t>(i) * t + p];
          received[static_cast<size_t>(m)][static_cast<size_t>(i)] += w;
        }
    for (auto& w : received[static_cast<size_t>(m)]) w /= static_cast<double>(n_mats);
  }

  // min-max normalize across the whole exported table
  double lo = 1e300, hi = -1e300;
  for (int m = 0; m < tmpl.n_profiles(); ++m)
    for (int i = 0; i < t; ++i) {
      if (layout.kind_at[static_cast<size_t>(i)] == Segment::soft) continue;
      lo = std::min(lo, received[static_cast<size_t>(m)][static_cast<size_t>(i)]);
      hi = std::max(hi, received[static_cast<size_t>(m)][static_cast<size_t>(i)]);
    }
  double range = hi - lo;

  std::vector<AttentionRow> rows;
  for (int m = 0; m < tmpl.n_profiles(); ++m)
    for (int i = 0; i < t; ++i) {
      if (layout.kind_at[static_cast<size_t>(i)] == Segment::soft) continue;
      AttentionRow row;
      row.user = profiles.user_id;
      row.profile = m;
      row.position = i;
      row.token = vocab.symbol_of(prompt.tokens[static_cast<size_t>(i)]);
      row.segment = layout.kind_at[static_cast<size_t>(i)];
      row.stage = stage;
      double w = received[static_cast<size_t>(m)][static_cast<size_t>(i)];
      row.weight = range > 0.0 ? (w - lo) / range : 0.0;
      rows.push_back(std::move(row));
    }
  return rows;
}

std::vector<double> mean_target_attention(const std::vector<AttentionRow>& rows, int n_profiles) {
  std::vector<double> total(static_cast<size_t>(n_profiles), 0.0);
  std::vector<long> count(static_cast<size_t>(n_profiles), 0);
  for (const auto& row : rows) {
    if (row.segment != Segment::target) continue;
    total[static_cast<size_t>(row.profile)] += row.weight;
    ++count[static_cast<size_t>(row.profile)];
  }
  for (int m = 0; m < n_profiles; ++m)
    if (count[static_cast<size_t>(m)] > 0) total[static_cast<size_t>(m)] /= count[static_cast<size_t>(m)];
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_profiles(const std::filesystem::path& p, const std::map<uint32_t, SoftProfileSet>& profiles,
                   const PromptTemplate& tmpl, int embed_dim, uint64_t seed,
                   const std::string& extra_meta_json) {
  CheckpointData data;
  data.kind = "theta";
  nlohmann::json meta = extra_meta_json.empty() ? nlohmann::json::object()
                                                : nlohmann::json::parse(extra_meta_json);
  meta["n_profiles"] = tmpl.n_profiles();
  meta["slot_widths"] = tmpl.slot_widths;
  meta["embed_dim"] = embed_dim;
  meta["seed"] = seed;
  std::vector<uint32_t> users;
  for (const auto& [u, _] : profiles) users.push_back(u);
  meta["users"] = users;
  data.meta_json = meta.dump();
  for (const auto& [u, set] : profiles)
    for (size_t m = 0; m < set.theta.size(); ++m) {
      const Tensor& t = set.theta[m];
      data.blocks.push_back({"u" + std::to_string(u) + ".m" + std::to_string(m), t.shape(),
                             {t.values().begin(), t.values().end()}});
    }
  save_checkpoint(p, data);
}

ProfilesFile load_profiles(const std::filesystem::path& p) {
  CheckpointData data = load_checkpoint(p, "theta");
  auto meta = nlohmann::json::parse(data.meta_json);
  ProfilesFile out;
  out.slot_widths = meta.at("slot_widths").get<std::vector<int>>();
  out.embed_dim = meta.at("embed_dim").get<int>();
  out.seed = meta.at("seed").get<uint64_t>();
  out.meta_json = data.meta_json;
  int n_profiles = meta.at("n_profiles").get<int>();
  for (uint32_t u : meta.at("users").get<std::vector<uint32_t>>()) {
    SoftProfileSet set;
    set.user_id = u;
    set.init_seed = out.seed;
    set.theta.resize(static_cast<size_t>(n_profiles));
    out.profiles.emplace(u, std::move(set));
  }
  for (auto& b : data.blocks) {
    size_t dot = b.name.find(".m");
    if (b.name.empty() || b.name[0] != 'u' || dot == std::string::npos)
      raise(Errc::artifact, p.string() + ": unexpected theta block " + b.name);
    uint32_t u = static_cast<uint32_t>(std::stoul(b.name.substr(1, dot - 1)));
    int m = std::stoi(b.name.substr(dot + 2));
    auto it = out.profiles.find(u);
    if (it == out.profiles.end() || m < 0 || m >= n_profiles)
      raise(Errc::artifact, p.string() + ": theta block for unknown user/profile " + b.name);
    it->second.theta[static_cast<size_t>(m)] =
        Tensor::from_values(b.shape, std::move(b.values), true);
  }
  for (const auto& [u, set] : out.profiles)
    for (const auto& t : set.theta)
      if (!t.defined()) raise(Errc::artifact, p.string() + ": missing theta block for user " + std::to_string(u));
  return out;
}

}  // namespace userip
