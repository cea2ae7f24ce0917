#include "userip/quant.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "json.hpp"

namespace userip {

void Codebook::reset_usage() {
  for (size_t m = 0; m < usage.size(); ++m)
    std::fill(usage[m].begin(), usage[m].end(), 0L);
}

void Codebook::validate() const {
  if (tables.empty()) raise(Errc::config, "codebook: no tables");
  if (usage.size() != tables.size()) raise(Errc::config, "codebook: usage/tables mismatch");
  for (size_t m = 0; m < tables.size(); ++m) {
    if (tables[m].rank() != 2 || tables[m].dim(0) < 1)
      raise(Errc::config, "codebook: table " + std::to_string(m) + " must be K x dim with K >= 1");
    if (static_cast<int>(usage[m].size()) != tables[m].dim(0))
      raise(Errc::config, "codebook: usage width mismatch at table " + std::to_string(m));
    for (double v : tables[m].values())
      if (!std::isfinite(v)) raise(Errc::config, "codebook: non-finite code vector");
  }
}

Codebook Codebook::init(const std::vector<int>& code_counts, const std::vector<int>& dims,
                        uint64_t seed) {
  if (code_counts.size() != dims.size()) raise(Errc::config, "codebook: K list and dim list disagree");
  Codebook book;
  Rng rng(mix_seed(seed, 0xC0DE));
  for (size_t m = 0; m < code_counts.size(); ++m) {
    if (code_counts[m] < 1) raise(Errc::config, "codebook: K must be >= 1");
    book.tables.push_back(Tensor::randn({code_counts[m], dims[m]}, rng, 0.0, 0.02, true));
    book.usage.emplace_back(static_cast<size_t>(code_counts[m]), 0L);
  }
  return book;
}

void Codebook::save(const std::filesystem::path& p, const std::string& extra_meta_json) const {
  validate();
  CheckpointData data;
  data.kind = "codebook";
  nlohmann::json meta = extra_meta_json.empty() ? nlohmann::json::object()
                                                : nlohmann::json::parse(extra_meta_json);
  meta["n_profiles"] = n_profiles();
  std::vector<int> counts, dims;
  for (int m = 0; m < n_profiles(); ++m) {
    counts.push_back(code_count(m));
    dims.push_back(code_dim(m));
  }
  meta["code_counts"] = counts;
  meta["dims"] = dims;
  meta["usage"] = usage;
  data.meta_json = meta.dump();
  for (int m = 0; m < n_profiles(); ++m) {
    const Tensor& t = tables[static_cast<size_t>(m)];
    data.blocks.push_back({"table" + std::to_string(m), t.shape(), {t.values().begin(), t.values().end()}});
  }
  save_checkpoint(p, data);
}

Codebook Codebook::load(const std::filesystem::path& p) {
  CheckpointData data = load_checkpoint(p, "codebook");
  auto meta = nlohmann::json::parse(data.meta_json);
  int n = meta.at("n_profiles").get<int>();
  Codebook book;
  book.tables.resize(static_cast<size_t>(n));
  for (auto& b : data.blocks) {
    if (b.name.rfind("table", 0) != 0) raise(Errc::artifact, p.string() + ": unexpected block " + b.name);
    int m = std::stoi(b.name.substr(5));
    if (m < 0 || m >= n) raise(Errc::artifact, p.string() + ": table index out of range");
    book.tables[static_cast<size_t>(m)] = Tensor::from_values(b.shape, std::move(b.values), true);
  }
  book.usage = meta.at("usage").get<std::vector<std::vector<long>>>();
  book.validate();
  return book;
}

const std::vector<int>& Assignment::codes_of(uint32_t user) const {
  for (size_t i = 0; i < users.size(); ++i)
    if (users[i] == user) return codes[i];
  raise(Errc::config, "assignment: unknown user " + std::to_string(user));
}

bool Assignment::has(uint32_t user) const {
  return std::find(users.begin(), users.end(), user) != users.end();
}

int nearest(std::span<const double> theta_flat, const Tensor& table) {
  if (table.rank() != 2 || table.dim(0) < 1) raise(Errc::config, "nearest: empty code table rejected");
  int k = table.dim(0), dim = table.dim(1);
  if (static_cast<int>(theta_flat.size()) != dim)
    raise(Errc::config, "nearest: vector dim " + std::to_string(theta_flat.size()) +
                            " vs code dim " + std::to_string(dim));
  auto tv = table.values();
  int best = 0;
  double best_dist = HUGE_VAL;
  for (int c = 0; c < k; ++c) {
    double dist = 0.0;
    const double* row = tv.data() + static_cast<size_t>(c) * dim;
    for (int j = 0; j < dim; ++j) {
      double diff = theta_flat[static_cast<size_t>(j)] - row[j];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = c;
    }
  }
  return best;
}

namespace {

Tensor code_row(const Tensor& table, int c, const std::vector<int>& shape) {
  return reshape(slice(table, 0, c, 1), shape);
}

std::vector<double> flat_values(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

}  // namespace

VqLossResult vq_loss(const std::vector<Tensor>& theta, const Codebook& book, double beta) {
  if (beta < 0.0) raise(Errc::config, "vq_loss: beta must be >= 0");
  if (static_cast<int>(theta.size()) != book.n_profiles())
    raise(Errc::config, "vq_loss: profile count mismatch");
  VqLossResult result;
  Tensor acc;
  for (int m = 0; m < book.n_profiles(); ++m) {
    const Tensor& th = theta[static_cast<size_t>(m)];
    const Tensor& table = book.tables[static_cast<size_t>(m)];
    int c = nearest(th.values(), table);
    result.assignment.push_back(c);
    Tensor v = code_row(table, c, th.shape());
    Tensor codebook_term = sum_squares(sub(stop_gradient(th), v));
    Tensor commit_term = scale(sum_squares(sub(th, stop_gradient(v))), beta);
    Tensor term = add(codebook_term, commit_term);
    acc = acc.defined() ? add(acc, term) : term;
  }
  result.loss = acc;
  return result;
}

StraightThroughResult straight_through(const Tensor& theta_m, const Tensor& table_m) {
  int c = nearest(theta_m.values(), table_m);
  Tensor v = code_row(table_m, c, theta_m.shape());
  // forward: v exactly; backward: identity into theta, forward-use into v
  Tensor q = add(v, sub(theta_m, stop_gradient(theta_m)));
  return {q, c};
}

SurrogateRec SurrogateRec::init(int n_items, int profile_dim_total, const SurrogateRecConfig& cfg,
                                uint64_t seed) {
  if (n_items < 1 || profile_dim_total < 1) raise(Errc::config, "surrogate: bad dimensions");
  Rng rng(mix_seed(seed, 0x5EC5));
  SurrogateRec rec;
  rec.cfg = cfg;
  int in_dim = profile_dim_total + cfg.item_embed_dim;
  rec.item_embedding = Tensor::randn({n_items, cfg.item_embed_dim}, rng, 0.0, 0.05, true);
  rec.w1 = Tensor::randn({in_dim, cfg.hidden}, rng, 0.0, std::sqrt(2.0 / in_dim), true);
  rec.b1 = Tensor::zeros({cfg.hidden}, true);
  rec.w2 = Tensor::randn({cfg.hidden, 1}, rng, 0.0, std::sqrt(2.0 / cfg.hidden), true);
  rec.b2 = Tensor::zeros({1}, true);
  return rec;
}

std::vector<Tensor> SurrogateRec::params() { return {item_embedding, w1, b1, w2, b2}; }

Tensor surrogate_loss(SurrogateRec& rec, const std::vector<Tensor>& quantized,
                      std::span<const int> items, std::span<const double> labels) {
  if (items.empty()) raise(Errc::config, "surrogate_loss: empty item batch");
  if (items.size() != labels.size()) raise(Errc::config, "surrogate_loss: items/labels mismatch");
  int b = static_cast<int>(items.size());
  std::vector<Tensor> fields;
  for (const auto& q : quantized) {
    Tensor flat = q.rank() == 1 ? q : reshape(q, {q.size()});
    fields.push_back(broadcast_row(flat, b));
  }
  fields.push_back(select_rows(rec.item_embedding, items));
  Tensor x = concat(fields, 1);
  Tensor h = relu(add_row_broadcast(matmul(x, rec.w1), rec.b1));
  Tensor z = reshape(add_row_broadcast(matmul(h, rec.w2), rec.b2), {b});
  return sigmoid_bce_mean(z, labels);
}

Tensor total_loss(const Tensor& llm_term, const Tensor& vec_term, double alpha) {
  if (alpha < 0.0) raise(Errc::config, "total_loss: alpha must be >= 0");
  return add(llm_term, scale(vec_term, alpha));
}

AssignAllResult assign_all(const std::map<uint32_t, SoftProfileSet>& profiles, Codebook& book) {
  book.validate();
  AssignAllResult result;
  book.reset_usage();
  for (const auto& [u, set] : profiles) {
    if (static_cast<int>(set.theta.size()) != book.n_profiles())
      raise(Errc::config, "assign_all: profile count mismatch for user " + std::to_string(u));
    std::vector<int> codes;
    for (int m = 0; m < book.n_profiles(); ++m) {
      int c = nearest(set.theta[static_cast<size_t>(m)].values(), book.tables[static_cast<size_t>(m)]);
      codes.push_back(c);
      ++book.usage[static_cast<size_t>(m)][static_cast<size_t>(c)];
    }
    result.assignment.users.push_back(u);
    result.assignment.codes.push_back(std::move(codes));
  }
  for (int m = 0; m < book.n_profiles(); ++m)
    for (int c = 0; c < book.code_count(m); ++c)
      if (book.usage[static_cast<size_t>(m)][static_cast<size_t>(c)] == 0)
        result.dead_codes.emplace_back(m, c);
  return result;
}

// ---------------------------------------------------------------------------
// k-means++
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> kmeanspp(const std::vector<std::vector<double>>& points, int k,
                                          Rng& rng) {
  if (points.empty()) raise(Errc::config, "kmeanspp: no points");
  if (k < 1) raise(Errc::config, "kmeanspp: k must be >= 1");
  size_t dim = points[0].size();
  std::vector<std::vector<double>> centers;
  centers.push_back(points[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(points.size()) - 1))]);
  std::vector<double> dist2(points.size(), HUGE_VAL);
  while (static_cast<int>(centers.size()) < k) {
    const auto& latest = centers.back();
    double total = 0.0;
    for (size_t i = 0; i < points.size(); ++i) {
      double d = 0.0;
      for (size_t j = 0; j < dim; ++j) {
        double diff = points[i][j] - latest[j];
        d += diff * diff;
      }
      dist2[i] = std::min(dist2[i], d);
      total += dist2[i];
    }
    if (total <= 0.0) {
      // all points coincide with chosen centers; fall back to uniform picks
      centers.push_back(points[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(points.size()) - 1))]);
      continue;
    }
    double x = rng.uniform01() * total;
    double acc = 0.0;
    size_t chosen = points.size() - 1;
    for (size_t i = 0; i < points.size(); ++i) {
      acc += dist2[i];
      if (acc >= x) {
        chosen = i;
        break;
      }
    }
    centers.push_back(points[chosen]);
  }
  return centers;
}

// ---------------------------------------------------------------------------
// CodebookTrainer
// ---------------------------------------------------------------------------

CodebookTrainer::CodebookTrainer(const Dataset& data, int n_items,
                                 const std::vector<int>& profile_dims, const QuantTrainConfig& cfg)
    : cfg_(cfg),
      book_(Codebook::init(cfg.code_counts, profile_dims, cfg.seed)),
      rec_(SurrogateRec::init(n_items,
                              [&profile_dims] {
                                int total = 0;
                                for (int d : profile_dims) total += d;
                                return total;
                              }(),
                              cfg.surrogate, cfg.seed)),
      opt_(cfg.codebook_lr),
      reseed_rng_(mix_seed(cfg.seed, 0xDEAD)) {
  if (cfg.code_counts.size() != profile_dims.size())
    raise(Errc::config, "codebook trainer: K list does not match profile count");
  if (cfg.alpha < 0 || cfg.beta < 0) raise(Errc::config, "codebook trainer: negative loss weight");
  std::optional<Fold> fold = data.split.empty() ? std::nullopt : std::make_optional(Fold::train);
  for (uint32_t u : data.active_users()) {
    std::pair<std::vector<int>, std::vector<double>> entry;
    for (size_t idx : data.user_records(u, fold)) {
      entry.first.push_back(static_cast<int>(data.records[idx].item_id));
      entry.second.push_back(static_cast<double>(binarize(data.records[idx].rating)));
    }
    if (!entry.first.empty()) user_items_.emplace(u, std::move(entry));
  }
  trainable_ = book_.tables;
  for (auto& t : rec_.params()) trainable_.push_back(t);
}

Tensor CodebookTrainer::user_term(uint32_t user, const std::vector<Tensor>& theta) {
  if (!seeded_) return Tensor();
  VqLossResult vq = vq_loss(theta, book_, cfg_.beta);
  for (int m = 0; m < book_.n_profiles(); ++m)
    ++book_.usage[static_cast<size_t>(m)][static_cast<size_t>(vq.assignment[static_cast<size_t>(m)])];
  last_assignments_[user] = vq.assignment;

  Tensor vec_term = vq.loss;
  auto it = user_items_.find(user);
  if (it != user_items_.end()) {
    std::vector<Tensor> quantized;
    for (int m = 0; m < book_.n_profiles(); ++m)
      quantized.push_back(straight_through(theta[static_cast<size_t>(m)],
                                           book_.tables[static_cast<size_t>(m)]).quantized);
    vec_term = add(vec_term, surrogate_loss(rec_, quantized, it->second.first, it->second.second));
  }
  // caller adds this to the llm term; returning the weighted vec term makes
  // the sum equal to total_loss(llm, vec, alpha)
  return scale(vec_term, cfg_.alpha);
}

void CodebookTrainer::batch_step() {
  if (!seeded_) return;
  opt_.step(trainable_);
}

void CodebookTrainer::epoch_end(int epoch, const std::vector<uint32_t>& users,
                                const std::function<const std::vector<Tensor>&(uint32_t)>& theta_of) {
  if (!seeded_ && epoch + 1 >= cfg_.warmup_epochs) {
    // k-means++ over the first-epoch theta snapshot
    for (int m = 0; m < book_.n_profiles(); ++m) {
      std::vector<std::vector<double>> points;
      points.reserve(users.size());
      for (uint32_t u : users) points.push_back(flat_values(theta_of(u)[static_cast<size_t>(m)]));
      Rng rng(mix_seed(cfg_.seed, 0x5EED + static_cast<uint64_t>(m)));
      auto centers = kmeanspp(points, book_.code_count(m), rng);
      auto vals = book_.tables[static_cast<size_t>(m)].values_mut();
      int dim = book_.code_dim(m);
      for (int c = 0; c < book_.code_count(m); ++c)
        for (int j = 0; j < dim; ++j)
          vals[static_cast<size_t>(c) * dim + j] = centers[static_cast<size_t>(c)][static_cast<size_t>(j)];
    }
    seeded_ = true;
    book_.reset_usage();
    return;
  }
  if (!seeded_) return;

  // average quantization error across users, for the non-increase invariant
  double err = 0.0;
  long count = 0;
  for (uint32_t u : users) {
    const auto& theta = theta_of(u);
    for (int m = 0; m < book_.n_profiles(); ++m) {
      const Tensor& th = theta[static_cast<size_t>(m)];
      int c = nearest(th.values(), book_.tables[static_cast<size_t>(m)]);
      auto tv = book_.tables[static_cast<size_t>(m)].values();
      int dim = book_.code_dim(m);
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        double diff = th.values()[static_cast<size_t>(j)] - tv[static_cast<size_t>(c) * dim + j];
        d += diff * diff;
      }
      err += d;
      ++count;
    }
  }
  epoch_quant_error_.push_back(err / std::max(1L, count));

  if (cfg_.reseed_dead_codes) {
    for (int m = 0; m < book_.n_profiles(); ++m) {
      for (int c = 0; c < book_.code_count(m); ++c) {
        if (book_.usage[static_cast<size_t>(m)][static_cast<size_t>(c)] != 0) continue;
        // re-seed a dead code to a random live user's theta plus noise
        uint32_t u = users[static_cast<size_t>(reseed_rng_.uniform_int(0, static_cast<int>(users.size()) - 1))];
        const Tensor& th = theta_of(u)[static_cast<size_t>(m)];
        auto vals = book_.tables[static_cast<size_t>(m)].values_mut();
        int dim = book_.code_dim(m);
        for (int j = 0; j < dim; ++j)
          vals[static_cast<size_t>(c) * dim + j] =
              th.values()[static_cast<size_t>(j)] + reseed_rng_.gaussian(0.0, 0.01);
        ++reseeded_;
      }
    }
  }
  book_.reset_usage();
}

int CodebookTrainer::consolidate(const std::vector<uint32_t>& users,
                                 const std::function<const std::vector<Tensor>&(uint32_t)>& theta_of,
                                 int max_iters) {
  if (!seeded_) raise(Errc::config, "consolidate: codebook was never seeded");
  int iters = 0;
  std::map<uint32_t, std::vector<int>> previous;
  for (; iters < max_iters; ++iters) {
    // assign
    std::map<uint32_t, std::vector<int>> current;
    for (uint32_t u : users) {
      const auto& theta = theta_of(u);
      std::vector<int> codes;
      for (int m = 0; m < book_.n_profiles(); ++m)
        codes.push_back(nearest(theta[static_cast<size_t>(m)].values(), book_.tables[static_cast<size_t>(m)]));
      current.emplace(u, std::move(codes));
    }
    bool stable = iters > 0 && current == previous;
    // update: each live code moves to the centroid of its members
    for (int m = 0; m < book_.n_profiles(); ++m) {
      int k = book_.code_count(m), dim = book_.code_dim(m);
      std::vector<double> sums(static_cast<size_t>(k) * dim, 0.0);
      std::vector<long> counts(static_cast<size_t>(k), 0);
      for (uint32_t u : users) {
        int c = current.at(u)[static_cast<size_t>(m)];
        auto tv = theta_of(u)[static_cast<size_t>(m)].values();
        for (int j = 0; j < dim; ++j) sums[static_cast<size_t>(c) * dim + j] += tv[static_cast<size_t>(j)];
        ++counts[static_cast<size_t>(c)];
      }
      auto vals = book_.tables[static_cast<size_t>(m)].values_mut();
      for (int c = 0; c < k; ++c) {
        if (counts[static_cast<size_t>(c)] == 0) continue;
        for (int j = 0; j < dim; ++j)
          vals[static_cast<size_t>(c) * dim + j] =
              sums[static_cast<size_t>(c) * dim + j] / static_cast<double>(counts[static_cast<size_t>(c)]);
      }
    }
    previous = std::move(current);
    if (stable) break;
  }
  last_assignments_ = previous;

  double err = 0.0;
  long count = 0;
  for (uint32_t u : users) {
    const auto& theta = theta_of(u);
    for (int m = 0; m < book_.n_profiles(); ++m) {
      const Tensor& th = theta[static_cast<size_t>(m)];
      int c = nearest(th.values(), book_.tables[static_cast<size_t>(m)]);
      auto tv = book_.tables[static_cast<size_t>(m)].values();
      int dim = book_.code_dim(m);
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        double diff = th.values()[static_cast<size_t>(j)] - tv[static_cast<size_t>(c) * dim + j];
        d += diff * diff;
      }
      err += d;
      ++count;
    }
  }
  epoch_quant_error_.push_back(err / std::max(1L, count));
  return iters;
}

// ---------------------------------------------------------------------------
// Clustering metrics
// ---------------------------------------------------------------------------

double purity(std::span<const int> clusters, std::span<const int> truth) {
  if (clusters.size() != truth.size() || clusters.empty())
    raise(Errc::config, "purity: label vectors must be non-empty and aligned");
  std::unordered_map<int, std::unordered_map<int, long>> table;
  for (size_t i = 0; i < clusters.size(); ++i) ++table[clusters[i]][truth[i]];
  long hit = 0;
  for (const auto& [c, counts] : table) {
    long best = 0;
    for (const auto& [t, n] : counts) best = std::max(best, n);
    hit += best;
  }
  return static_cast<double>(hit) / static_cast<double>(clusters.size());
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty())
    raise(Errc::config, "adjusted_rand_index: label vectors must be non-empty and aligned");
  auto comb2 = [](long n) { return n * (n - 1) / 2.0; };
  std::unordered_map<int, std::unordered_map<int, long>> table;
  std::unordered_map<int, long> row_sum, col_sum;
  long n = static_cast<long>(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    ++table[a[i]][b[i]];
    ++row_sum[a[i]];
    ++col_sum[b[i]];
  }
  double sum_ij = 0.0;
  for (const auto& [r, counts] : table)
    for (const auto& [c, cnt] : counts) sum_ij += comb2(cnt);
  double sum_a = 0.0, sum_b = 0.0;
  for (const auto& [r, cnt] : row_sum) sum_a += comb2(cnt);
  for (const auto& [c, cnt] : col_sum) sum_b += comb2(cnt);
  double expected = sum_a * sum_b / comb2(n);
  double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 0.0;  // degenerate: single cluster both sides
  return (sum_ij - expected) / (max_index - expected);
}

}  // namespace userip
