#include "userip/recommender.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "json.hpp"
#include "userip/optim.hpp"

namespace userip {

const char* variant_name(RecVariant v) {
  switch (v) {
    case RecVariant::with_bank: return "with_bank";
    case RecVariant::id_only: return "id_only";
    case RecVariant::raw_theta: return "raw_theta";
  }
  return "unknown";
}

RecVariant variant_from_name(const std::string& s) {
  if (s == "with_bank") return RecVariant::with_bank;
  if (s == "id_only") return RecVariant::id_only;
  if (s == "raw_theta") return RecVariant::raw_theta;
  raise(Errc::config, "unknown recommender variant: " + s);
}

void DCNConfig::validate() const {
  if (embed_dim < 1 || cross_layers < 1 || batch_size < 1 || epochs < 1)
    raise(Errc::config, "dcn config: non-positive dimension");
  if (dropout < 0.0 || dropout >= 1.0) raise(Errc::config, "dcn config: dropout outside [0,1)");
  for (int d : mlp_dims)
    if (d < 1) raise(Errc::config, "dcn config: non-positive mlp width");
}

int DCNModel::field_count() const {
  int fields = 2;
  if (variant != RecVariant::id_only) fields += static_cast<int>(profile_tables.empty()
                                                                     ? theta_proj.size()
                                                                     : profile_tables.size());
  return fields;
}

DCNModel DCNModel::init(RecVariant variant, int n_users, int n_items,
                        const std::vector<int>& code_counts, const std::vector<int>& theta_dims,
                        const DCNConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (n_users < 1 || n_items < 1) raise(Errc::config, "dcn: empty id spaces");
  DCNModel model;
  model.cfg = cfg;
  model.variant = variant;
  model.n_users = n_users;
  model.n_items = n_items;
  model.code_counts = code_counts;
  model.theta_dims = theta_dims;

  Rng rng(mix_seed(seed, 0xDC17));
  const double sigma = 0.05;
  model.user_table = Tensor::randn({n_users + 1, cfg.embed_dim}, rng, 0.0, sigma, true);
  model.item_table = Tensor::randn({n_items + 1, cfg.embed_dim}, rng, 0.0, sigma, true);
  if (variant == RecVariant::with_bank) {
    for (int k : code_counts)
      model.profile_tables.push_back(Tensor::randn({k + 1, cfg.embed_dim}, rng, 0.0, sigma, true));
  } else if (variant == RecVariant::raw_theta) {
    for (int d : theta_dims)
      model.theta_proj.push_back(
          Tensor::randn({d, cfg.embed_dim}, rng, 0.0, std::sqrt(1.0 / d), true));
  }

  int f = cfg.embed_dim * model.field_count();
  for (int l = 0; l < cfg.cross_layers; ++l) {
    model.cross_w.push_back(Tensor::randn({f, 1}, rng, 0.0, std::sqrt(1.0 / f), true));
    model.cross_b.push_back(Tensor::zeros({f}, true));
  }
  int in_dim = f;
  for (int width : cfg.mlp_dims) {
    model.mlp_w.push_back(Tensor::randn({in_dim, width}, rng, 0.0, std::sqrt(2.0 / in_dim), true));
    model.mlp_b.push_back(Tensor::zeros({width}, true));
    in_dim = width;
  }
  model.out_w = Tensor::zeros({f + in_dim, 1}, true);
  model.out_b = Tensor::zeros({1}, true);
  return model;
}

std::vector<Tensor> DCNModel::params() {
  std::vector<Tensor> out{user_table, item_table};
  for (auto& t : profile_tables) out.push_back(t);
  for (auto& t : theta_proj) out.push_back(t);
  for (auto& t : cross_w) out.push_back(t);
  for (auto& t : cross_b) out.push_back(t);
  for (auto& t : mlp_w) out.push_back(t);
  for (auto& t : mlp_b) out.push_back(t);
  out.push_back(out_w);
  out.push_back(out_b);
  return out;
}

Tensor dcn_embed(DCNModel& model, std::span<const CTRExample> batch) {
  if (batch.empty()) raise(Errc::config, "dcn_embed: empty batch");
  int b = static_cast<int>(batch.size());
  std::vector<int> user_rows, item_rows;
  user_rows.reserve(batch.size());
  item_rows.reserve(batch.size());
  for (const auto& ex : batch) {
    if (static_cast<int>(ex.user_id) >= model.n_users || static_cast<int>(ex.item_id) >= model.n_items)
      raise(Errc::config, "dcn_embed: id out of range");
    user_rows.push_back(static_cast<int>(ex.user_id));
    item_rows.push_back(static_cast<int>(ex.item_id));
  }
  std::vector<Tensor> fields;
  fields.push_back(select_rows(model.user_table, user_rows));
  fields.push_back(select_rows(model.item_table, item_rows));

  if (model.variant == RecVariant::with_bank) {
    for (size_t m = 0; m < model.profile_tables.size(); ++m) {
      std::vector<int> rows;
      rows.reserve(batch.size());
      int unknown_row = model.code_counts[m];
      for (const auto& ex : batch) {
        int c = m < ex.profile_codes.size() ? ex.profile_codes[m] : -1;
        if (c >= model.code_counts[m])
          raise(Errc::config, "dcn_embed: profile index " + std::to_string(c) + " out of range");
        rows.push_back(c < 0 ? unknown_row : c);
      }
      fields.push_back(select_rows(model.profile_tables[m], rows));
    }
  } else if (model.variant == RecVariant::raw_theta) {
    for (size_t m = 0; m < model.theta_proj.size(); ++m) {
      int d = model.theta_dims[m];
      std::vector<double> vals(static_cast<size_t>(b) * d, 0.0);
      for (int i = 0; i < b; ++i) {
        const auto& ex = batch[static_cast<size_t>(i)];
        if (m >= ex.raw_theta.size() || static_cast<int>(ex.raw_theta[m].size()) != d)
          raise(Errc::config, "dcn_embed: raw theta width mismatch");
        std::copy(ex.raw_theta[m].begin(), ex.raw_theta[m].end(),
                  vals.begin() + static_cast<long>(i) * d);
      }
      Tensor raw = Tensor::from_values({b, d}, std::move(vals));
      fields.push_back(matmul(raw, model.theta_proj[m]));
    }
  }
  return concat(fields, 1);
}

Tensor cross_layer(const Tensor& x0, const Tensor& xl, const Tensor& w, const Tensor& b) {
  if (x0.shape() != xl.shape()) raise(Errc::config, "cross_layer: x0/xl shape mismatch");
  Tensor w_col = w.rank() == 1 ? reshape(w, {w.dim(0), 1}) : w;
  Tensor s = reshape(matmul(xl, w_col), {xl.dim(0)});
  return add(add_row_broadcast(row_scale(x0, s), b), xl);
}

Tensor dcn_logits(DCNModel& model, std::span<const CTRExample> batch, Rng* dropout_rng) {
  Tensor x0 = dcn_embed(model, batch);
  Tensor x = x0;
  for (size_t l = 0; l < model.cross_w.size(); ++l)
    x = cross_layer(x0, x, model.cross_w[l], model.cross_b[l]);

  Tensor h = x0;
  for (size_t l = 0; l < model.mlp_w.size(); ++l) {
    h = relu(add_row_broadcast(matmul(h, model.mlp_w[l]), model.mlp_b[l]));
    if (dropout_rng && model.cfg.dropout > 0.0) h = dropout(h, model.cfg.dropout, *dropout_rng);
  }
  Tensor joined = concat({x, h}, 1);
  return reshape(add_row_broadcast(matmul(joined, model.out_w), model.out_b),
                 {static_cast<int>(batch.size())});
}

double predict(DCNModel& model, const CTRExample& example) {
  std::vector<CTRExample> one{example};
  return predict_batch(model, one)[0];
}

std::vector<double> predict_batch(DCNModel& model, std::span<const CTRExample> batch) {
  Tensor z = clamp(dcn_logits(model, batch), -model.cfg.logit_clip, model.cfg.logit_clip);
  Tensor p = sigmoid(z);
  return {p.values().begin(), p.values().end()};
}

// ---------------------------------------------------------------------------
// Examples and training
// ---------------------------------------------------------------------------

std::vector<CTRExample> build_examples(const Dataset& data, Fold fold, RecVariant variant,
                                       const FeatureBank* bank,
                                       const std::map<uint32_t, SoftProfileSet>* profiles) {
  if (data.split.size() != data.records.size())
    raise(Errc::config, "build_examples: dataset has no split");
  std::vector<CTRExample> out;
  for (size_t i = 0; i < data.records.size(); ++i) {
    if (data.split[i] != fold) continue;
    const auto& r = data.records[i];
    CTRExample ex;
    ex.user_id = r.user_id;
    ex.item_id = r.item_id;
    ex.label = binarize(r.rating);
    if (variant == RecVariant::with_bank) {
      if (!bank) raise(Errc::config, "build_examples: with_bank variant needs a feature bank");
      auto codes = bank->lookup(r.user_id);
      if (codes)
        ex.profile_codes = *codes;
      else
        ex.profile_codes.assign(static_cast<size_t>(bank->meta().n_profiles), -1);
    } else if (variant == RecVariant::raw_theta) {
      if (!profiles) raise(Errc::config, "build_examples: raw_theta variant needs profiles");
      auto it = profiles->find(r.user_id);
      if (it == profiles->end())
        raise(Errc::config, "build_examples: no theta for user " + std::to_string(r.user_id));
      for (const auto& t : it->second.theta)
        ex.raw_theta.push_back({t.values().begin(), t.values().end()});
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void fit_dcn(DCNModel& model, std::vector<CTRExample> train_examples,
             const std::vector<CTRExample>& valid_examples, uint64_t seed, RecTrainReport* report) {
  model.cfg.validate();
  if (train_examples.empty()) raise(Errc::config, "train_dcn: no training examples");

  auto snapshot_values = [](DCNModel& m) {
    std::vector<std::vector<double>> vals;
    for (auto& t : m.params()) vals.push_back({t.values().begin(), t.values().end()});
    return vals;
  };
  auto restore_values = [](DCNModel& m, const std::vector<std::vector<double>>& vals) {
    auto params = m.params();
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].frozen()) continue;
      auto dst = params[i].values_mut();
      std::copy(vals[i].begin(), vals[i].end(), dst.begin());
    }
  };

  auto trainable = model.params();
  Adam opt(model.cfg.lr);
  Rng shuffle_rng(mix_seed(seed, 0xBA7C));
  Rng dropout_rng(mix_seed(seed, 0xD0D0));

  RecTrainReport local;
  double best_auc = -1.0;
  int stale = 0;
  std::vector<std::vector<double>> best_values = snapshot_values(model);

  std::vector<size_t> order(train_examples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < model.cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    long batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(model.cfg.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(model.cfg.batch_size));
      std::vector<CTRExample> batch;
      std::vector<double> labels;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        batch.push_back(train_examples[order[i]]);
        labels.push_back(static_cast<double>(train_examples[order[i]].label));
      }
      {
        Tape tape;
        Tensor loss = sigmoid_bce_mean(dcn_logits(model, batch, &dropout_rng), labels);
        epoch_loss += loss.item();
        tape.backward(loss);
      }
      opt.step(trainable);
      ++batches;
    }
    local.train_loss.push_back(epoch_loss / std::max(1L, batches));

    if (!valid_examples.empty()) {
      std::vector<double> scores = predict_batch(model, valid_examples);
      std::vector<int> labels;
      labels.reserve(valid_examples.size());
      for (const auto& ex : valid_examples) labels.push_back(ex.label);
      double val_auc = auc(scores, labels);
      local.valid_auc.push_back(val_auc);
      if (val_auc > best_auc + 1e-6) {
        best_auc = val_auc;
        local.best_epoch = epoch;
        local.best_valid_auc = val_auc;
        best_values = snapshot_values(model);
        stale = 0;
      } else if (++stale >= model.cfg.patience) {
        break;
      }
    } else {
      best_values = snapshot_values(model);
      local.best_epoch = epoch;
    }
  }
  restore_values(model, best_values);
  if (report) *report = local;
}

DCNModel train_dcn(std::vector<CTRExample> train_examples,
                   const std::vector<CTRExample>& valid_examples, RecVariant variant, int n_users,
                   int n_items, const std::vector<int>& code_counts,
                   const std::vector<int>& theta_dims, const DCNConfig& cfg, uint64_t seed,
                   RecTrainReport* report) {
  DCNModel model = DCNModel::init(variant, n_users, n_items, code_counts, theta_dims, cfg, seed);
  fit_dcn(model, std::move(train_examples), valid_examples, seed, report);
  return model;
}

DCNModel train_rec(const Dataset& data, const DCNConfig& cfg, RecVariant variant,
                   const FeatureBank* bank, const std::map<uint32_t, SoftProfileSet>* profiles,
                   uint64_t seed, RecTrainReport* report) {
  if (variant == RecVariant::with_bank) {
    if (!bank) raise(Errc::config, "train_rec: with_bank variant needs a feature bank");
    bool overlap = false;
    for (uint32_t u : data.active_users())
      if (bank->lookup(u)) {
        overlap = true;
        break;
      }
    if (!overlap)
      raise(Errc::config, "train_rec: bank and dataset user spaces are disjoint");
  }
  auto train_ex = build_examples(data, Fold::train, variant, bank, profiles);
  auto valid_ex = build_examples(data, Fold::valid, variant, bank, profiles);

  std::vector<int> code_counts = bank ? bank->meta().code_counts : std::vector<int>{};
  std::vector<int> theta_dims;
  if (variant == RecVariant::raw_theta && profiles && !profiles->empty())
    for (const auto& t : profiles->begin()->second.theta) theta_dims.push_back(t.size());

  return train_dcn(std::move(train_ex), valid_ex, variant, static_cast<int>(data.n_users),
                   static_cast<int>(data.n_items), code_counts, theta_dims, cfg, seed, report);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void DCNModel::save(const std::filesystem::path& p, const std::string& extra_meta_json) const {
  CheckpointData data;
  data.kind = "dcn";
  nlohmann::json meta = extra_meta_json.empty() ? nlohmann::json::object()
                                                : nlohmann::json::parse(extra_meta_json);
  meta["variant"] = variant_name(variant);
  meta["n_users"] = n_users;
  meta["n_items"] = n_items;
  meta["code_counts"] = code_counts;
  meta["theta_dims"] = theta_dims;
  meta["config"] = {{"embed_dim", cfg.embed_dim},   {"cross_layers", cfg.cross_layers},
                    {"mlp_dims", cfg.mlp_dims},     {"dropout", cfg.dropout},
                    {"lr", cfg.lr},                 {"batch_size", cfg.batch_size},
                    {"epochs", cfg.epochs},         {"patience", cfg.patience},
                    {"logit_clip", cfg.logit_clip}};
  data.meta_json = meta.dump();

  auto push = [&data](const std::string& name, const Tensor& t) {
    data.blocks.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  };
  push("user_table", user_table);
  push("item_table", item_table);
  for (size_t m = 0; m < profile_tables.size(); ++m)
    push("profile_table" + std::to_string(m), profile_tables[m]);
  for (size_t m = 0; m < theta_proj.size(); ++m) push("theta_proj" + std::to_string(m), theta_proj[m]);
  for (size_t l = 0; l < cross_w.size(); ++l) {
    push("cross_w" + std::to_string(l), cross_w[l]);
    push("cross_b" + std::to_string(l), cross_b[l]);
  }
  for (size_t l = 0; l < mlp_w.size(); ++l) {
    push("mlp_w" + std::to_string(l), mlp_w[l]);
    push("mlp_b" + std::to_string(l), mlp_b[l]);
  }
  push("out_w", out_w);
  push("out_b", out_b);
  save_checkpoint(p, data);
}

DCNModel DCNModel::load(const std::filesystem::path& p) {
  CheckpointData data = load_checkpoint(p, "dcn");
  auto meta = nlohmann::json::parse(data.meta_json);
  DCNModel model;
  model.variant = variant_from_name(meta.at("variant").get<std::string>());
  model.n_users = meta.at("n_users").get<int>();
  model.n_items = meta.at("n_items").get<int>();
  model.code_counts = meta.at("code_counts").get<std::vector<int>>();
  model.theta_dims = meta.at("theta_dims").get<std::vector<int>>();
  auto cj = meta.at("config");
  model.cfg.embed_dim = cj.at("embed_dim").get<int>();
  model.cfg.cross_layers = cj.at("cross_layers").get<int>();
  model.cfg.mlp_dims = cj.at("mlp_dims").get<std::vector<int>>();
  model.cfg.dropout = cj.at("dropout").get<double>();
  model.cfg.lr = cj.at("lr").get<double>();
  model.cfg.batch_size = cj.at("batch_size").get<int>();
  model.cfg.epochs = cj.at("epochs").get<int>();
  model.cfg.patience = cj.at("patience").get<int>();
  model.cfg.logit_clip = cj.at("logit_clip").get<double>();

  std::map<std::string, TensorBlock*> by_name;
  for (auto& b : data.blocks) by_name[b.name] = &b;
  auto take = [&by_name, &p](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) raise(Errc::artifact, p.string() + ": missing block " + name);
    return Tensor::from_values(it->second->shape, std::move(it->second->values), true);
  };
  model.user_table = take("user_table");
  model.item_table = take("item_table");
  for (size_t m = 0; m < model.code_counts.size() && model.variant == RecVariant::with_bank; ++m)
    model.profile_tables.push_back(take("profile_table" + std::to_string(m)));
  for (size_t m = 0; m < model.theta_dims.size() && model.variant == RecVariant::raw_theta; ++m)
    model.theta_proj.push_back(take("theta_proj" + std::to_string(m)));
  for (int l = 0; l < model.cfg.cross_layers; ++l) {
    model.cross_w.push_back(take("cross_w" + std::to_string(l)));
    model.cross_b.push_back(take("cross_b" + std::to_string(l)));
  }
  for (size_t l = 0; l < model.cfg.mlp_dims.size(); ++l) {
    model.mlp_w.push_back(take("mlp_w" + std::to_string(l)));
    model.mlp_b.push_back(take("mlp_b" + std::to_string(l)));
  }
  model.out_w = take("out_w");
  model.out_b = take("out_b");
  return model;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty())
    raise(Errc::config, "auc: scores and labels must be non-empty and aligned");
  long pos = 0, neg = 0;
  for (int y : labels) {
    if (y == 1)
      ++pos;
    else if (y == 0)
      ++neg;
    else
      raise(Errc::config, "auc: labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) raise(Errc::config, "auc: needs at least one positive and one negative");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });

  // rank-sum with average ranks over tie groups
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  return (pos_rank_sum - static_cast<double>(pos) * (pos + 1) / 2.0) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

double logloss(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty())
    raise(Errc::config, "logloss: scores and labels must be non-empty and aligned");
  double total = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    double p = std::min(1.0 - 1e-12, std::max(1e-12, scores[i]));
    total -= labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(scores.size());
}

RelativeImprovement relative_improvement(double model_auc, double base_auc, double model_logloss,
                                         double base_logloss) {
  if (base_auc <= 0.5)
    raise(Errc::config, "relative_improvement: baseline AUC must exceed 0.5");
  if (model_logloss <= 0.0)
    raise(Errc::config, "relative_improvement: non-positive model logloss");
  RelativeImprovement out;
  out.auc_pct = ((model_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0;
  out.logloss_pct = (base_logloss - model_logloss) / model_logloss * 100.0;
  return out;
}

}  // namespace userip
