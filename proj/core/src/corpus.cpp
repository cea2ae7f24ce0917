#include "userip/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace userip {

const char* fold_name(Fold f) {
  switch (f) {
    case Fold::train: return "train";
    case Fold::valid: return "valid";
    case Fold::test: return "test";
    default: return "none";
  }
}

Fold fold_from_name(const std::string& s) {
  if (s == "train") return Fold::train;
  if (s == "valid") return Fold::valid;
  if (s == "test") return Fold::test;
  if (s == "none") return Fold::none;
  raise(Errc::artifact, "unknown fold name: " + s);
}

void PlantedProfileSpec::validate() const {
  if (n_categories < 1) raise(Errc::config, "planted spec: M must be >= 1");
  if (static_cast<int>(class_counts.size()) != n_categories)
    raise(Errc::config, "planted spec: class_counts size != M");
  for (int g : class_counts)
    if (g < 2) raise(Errc::config, "planted spec: each class count must be >= 2");
  if (static_cast<int>(affinity.size()) != n_categories)
    raise(Errc::config, "planted spec: affinity table size != M");
  size_t n_items = background.size();
  auto check_dist = [n_items](const std::vector<double>& dist, const std::string& what) {
    if (dist.size() != n_items) raise(Errc::config, "planted spec: " + what + " has wrong length");
    double total = 0.0;
    int support = 0;
    for (double p : dist) {
      if (p < 0.0 || !std::isfinite(p)) raise(Errc::config, "planted spec: " + what + " not a distribution");
      total += p;
      if (p > 0.0) ++support;
    }
    if (std::abs(total - 1.0) > 1e-9) raise(Errc::config, "planted spec: " + what + " does not sum to 1");
    if (support < 2)
      raise(Errc::config, "planted spec: " + what + " is degenerate (single-item affinity set)");
  };
  for (int m = 0; m < n_categories; ++m) {
    if (static_cast<int>(affinity[static_cast<size_t>(m)].size()) != class_counts[static_cast<size_t>(m)])
      raise(Errc::config, "planted spec: affinity[" + std::to_string(m) + "] size != G_m");
    for (int g = 0; g < class_counts[static_cast<size_t>(m)]; ++g)
      check_dist(affinity[static_cast<size_t>(m)][static_cast<size_t>(g)],
                 "affinity[" + std::to_string(m) + "][" + std::to_string(g) + "]");
  }
  check_dist(background, "background");
  if (mix_own < 0.0 || mix_own > 1.0) raise(Errc::config, "planted spec: mix_own outside [0,1]");
  if (rating_boost < 0.0) raise(Errc::config, "planted spec: rating_boost must be >= 0");
  if (seq_len < 1) raise(Errc::config, "planted spec: seq_len must be >= 1");
}

PlantedProfileSpec make_planted_spec(int n_categories, std::vector<int> class_counts, int n_items,
                                     double zipf_exponent, uint64_t seed) {
  if (n_categories < 1) raise(Errc::config, "make_planted_spec: M must be >= 1");
  if (static_cast<int>(class_counts.size()) != n_categories)
    raise(Errc::config, "make_planted_spec: class_counts size != M");
  if (n_items < 2 * n_categories) raise(Errc::config, "make_planted_spec: too few items");

  PlantedProfileSpec spec;
  spec.n_categories = n_categories;
  spec.class_counts = class_counts;
  spec.item_category.assign(static_cast<size_t>(n_items), 0);
  spec.item_class.assign(static_cast<size_t>(n_items), 0);

  Rng rng(mix_seed(seed, 0xC0117));
  std::vector<int> perm(static_cast<size_t>(n_items));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);

  // popularity rank permutation, independent of the region layout
  std::vector<double> pop(static_cast<size_t>(n_items));
  std::vector<int> rank(static_cast<size_t>(n_items));
  std::iota(rank.begin(), rank.end(), 0);
  rng.shuffle(rank);
  for (int i = 0; i < n_items; ++i)
    pop[static_cast<size_t>(i)] = 1.0 / std::pow(static_cast<double>(rank[static_cast<size_t>(i)]) + 1.0,
                                                 zipf_exponent);

  // regions: contiguous runs of the shuffled permutation, one per category;
  // buckets: round-robin within the region
  spec.affinity.assign(static_cast<size_t>(n_categories), {});
  int base = n_items / n_categories;
  int extra = n_items % n_categories;
  int pos = 0;
  for (int m = 0; m < n_categories; ++m) {
    int region_size = base + (m < extra ? 1 : 0);
    int g_m = class_counts[static_cast<size_t>(m)];
    if (region_size < 2 * g_m)
      raise(Errc::config, "make_planted_spec: region for category " + std::to_string(m) +
                              " too small for " + std::to_string(g_m) + " buckets");
    spec.affinity[static_cast<size_t>(m)].assign(static_cast<size_t>(g_m),
                                                 std::vector<double>(static_cast<size_t>(n_items), 0.0));
    for (int k = 0; k < region_size; ++k) {
      int item = perm[static_cast<size_t>(pos + k)];
      int bucket = k % g_m;
      spec.item_category[static_cast<size_t>(item)] = m;
      spec.item_class[static_cast<size_t>(item)] = bucket;
      spec.affinity[static_cast<size_t>(m)][static_cast<size_t>(bucket)][static_cast<size_t>(item)] =
          pop[static_cast<size_t>(item)];
    }
    for (auto& dist : spec.affinity[static_cast<size_t>(m)]) {
      double total = std::accumulate(dist.begin(), dist.end(), 0.0);
      for (auto& p : dist) p /= total;
    }
    pos += region_size;
  }

  spec.background = pop;
  double total = std::accumulate(spec.background.begin(), spec.background.end(), 0.0);
  for (auto& p : spec.background) p /= total;

  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Dataset views
// ---------------------------------------------------------------------------

std::vector<uint32_t> Dataset::active_users() const {
  std::vector<uint8_t> seen(n_users, 0);
  for (const auto& r : records) seen[r.user_id] = 1;
  std::vector<uint32_t> out;
  for (uint32_t u = 0; u < n_users; ++u)
    if (seen[u]) out.push_back(u);
  return out;
}

std::vector<uint32_t> Dataset::active_items() const {
  std::vector<uint8_t> seen(n_items, 0);
  for (const auto& r : records) seen[r.item_id] = 1;
  std::vector<uint32_t> out;
  for (uint32_t i = 0; i < n_items; ++i)
    if (seen[i]) out.push_back(i);
  return out;
}

std::vector<size_t> Dataset::user_records(uint32_t user, std::optional<Fold> fold) const {
  std::vector<size_t> idx;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].user_id != user) continue;
    if (fold && (split.empty() || split[i] != *fold)) continue;
    idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(), [this](size_t a, size_t b) {
    return records[a].timestamp < records[b].timestamp;
  });
  return idx;
}

std::vector<int> Dataset::user_item_sequence(uint32_t user, std::optional<Fold> fold) const {
  std::vector<int> items;
  for (size_t i : user_records(user, fold)) items.push_back(static_cast<int>(records[i].item_id));
  return items;
}

const std::vector<std::vector<int>>& Dataset::planted_classes_for_eval() const {
  if (!planted_) raise(Errc::config, "dataset has no planted ground truth");
  ++planted_reads_;
  return *planted_;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

std::vector<double> to_cdf(const std::vector<double>& dist) {
  std::vector<double> cdf(dist.size());
  double acc = 0.0;
  for (size_t i = 0; i < dist.size(); ++i) {
    acc += dist[i];
    cdf[i] = acc;
  }
  return cdf;
}

int clipped_rating(double x) {
  int r = static_cast<int>(std::lround(x));
  return std::min(5, std::max(1, r));
}

}  // namespace

Dataset generate_synthetic(const PlantedProfileSpec& spec, int n_users, int n_items, uint64_t seed) {
  spec.validate();
  if (n_users < 1 || n_items < 1) raise(Errc::config, "generate_synthetic: n_users and n_items must be positive");
  if (static_cast<size_t>(n_items) != spec.background.size())
    raise(Errc::config, "generate_synthetic: n_items disagrees with planted spec");

  std::vector<std::vector<std::vector<double>>> affinity_cdf(static_cast<size_t>(spec.n_categories));
  for (int m = 0; m < spec.n_categories; ++m) {
    affinity_cdf[static_cast<size_t>(m)].reserve(spec.affinity[static_cast<size_t>(m)].size());
    for (const auto& dist : spec.affinity[static_cast<size_t>(m)])
      affinity_cdf[static_cast<size_t>(m)].push_back(to_cdf(dist));
  }
  std::vector<double> background_cdf = to_cdf(spec.background);

  Dataset d;
  d.n_users = static_cast<uint32_t>(n_users);
  d.n_items = static_cast<uint32_t>(n_items);
  d.planted_class_counts = spec.class_counts;
  std::vector<std::vector<int>> classes(static_cast<size_t>(n_users));

  for (int u = 0; u < n_users; ++u) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(u)));
    auto& cls = classes[static_cast<size_t>(u)];
    cls.resize(static_cast<size_t>(spec.n_categories));
    for (int m = 0; m < spec.n_categories; ++m)
      cls[static_cast<size_t>(m)] = rng.uniform_int(0, spec.class_counts[static_cast<size_t>(m)] - 1);

    for (int t = 0; t < spec.seq_len; ++t) {
      int m = rng.uniform_int(0, spec.n_categories - 1);
      int item;
      if (rng.uniform01() < spec.mix_own) {
        item = rng.categorical_cdf(
            affinity_cdf[static_cast<size_t>(m)][static_cast<size_t>(cls[static_cast<size_t>(m)])]);
      } else {
        item = rng.categorical_cdf(background_cdf);
      }
      bool match = spec.item_class[static_cast<size_t>(item)] ==
                   cls[static_cast<size_t>(spec.item_category[static_cast<size_t>(item)])];
      double mu = 3.3 + (match ? spec.rating_boost / 2.0 : -spec.rating_boost / 2.0);
      double sigma = match ? spec.sigma_match : spec.sigma_nonmatch;
      InteractionRecord rec;
      rec.user_id = static_cast<uint32_t>(u);
      rec.item_id = static_cast<uint32_t>(item);
      rec.rating = clipped_rating(rng.gaussian(mu, sigma));
      rec.timestamp = t;
      d.records.push_back(rec);
    }
  }
  d.set_planted(std::move(classes));
  return d;
}

int binarize(int rating) {
  if (rating < 1 || rating > 5) raise(Errc::config, "binarize: rating " + std::to_string(rating) + " outside 1..5");
  return rating > 3 ? 1 : 0;
}

Dataset filter_cold(const Dataset& d, int min_count) {
  Dataset out = d;
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<uint32_t, int> user_count, item_count;
    for (const auto& r : out.records) {
      ++user_count[r.user_id];
      ++item_count[r.item_id];
    }
    std::vector<InteractionRecord> kept;
    std::vector<Fold> kept_split;
    kept.reserve(out.records.size());
    for (size_t i = 0; i < out.records.size(); ++i) {
      const auto& r = out.records[i];
      if (user_count[r.user_id] >= min_count && item_count[r.item_id] >= min_count) {
        kept.push_back(r);
        if (!out.split.empty()) kept_split.push_back(out.split[i]);
      }
    }
    if (kept.size() != out.records.size()) changed = true;
    out.records = std::move(kept);
    out.split = std::move(kept_split);
  }
  return out;
}

Dataset split_dataset(const Dataset& d, std::array<int, 3> ratios, uint64_t seed) {
  for (int r : ratios)
    if (r < 0) raise(Errc::config, "split: ratios must be nonnegative");
  int ratio_total = ratios[0] + ratios[1] + ratios[2];
  if (ratio_total <= 0 || ratios[0] <= 0) raise(Errc::config, "split: train ratio must be positive");

  Dataset out = d;
  out.split.assign(out.records.size(), Fold::none);

  std::unordered_map<uint32_t, std::vector<size_t>> by_user;
  for (size_t i = 0; i < out.records.size(); ++i) by_user[out.records[i].user_id].push_back(i);

  std::vector<uint32_t> users;
  users.reserve(by_user.size());
  for (const auto& [u, _] : by_user) users.push_back(u);
  std::sort(users.begin(), users.end());

  for (uint32_t u : users) {
    auto idx = by_user[u];
    Rng rng(mix_seed(seed, 0x5B117u + u));
    rng.shuffle(idx);
    int n = static_cast<int>(idx.size());
    // largest-remainder apportionment over (train, valid, test)
    std::array<double, 3> exact{};
    std::array<int, 3> count{};
    int assigned = 0;
    for (int f = 0; f < 3; ++f) {
      exact[static_cast<size_t>(f)] = static_cast<double>(n) * ratios[static_cast<size_t>(f)] / ratio_total;
      count[static_cast<size_t>(f)] = static_cast<int>(std::floor(exact[static_cast<size_t>(f)]));
      assigned += count[static_cast<size_t>(f)];
    }
    while (assigned < n) {
      int best = 0;
      double best_frac = -1.0;
      for (int f = 0; f < 3; ++f) {
        double frac = exact[static_cast<size_t>(f)] - count[static_cast<size_t>(f)];
        if (frac > best_frac + 1e-12) {
          best_frac = frac;
          best = f;
        }
      }
      ++count[static_cast<size_t>(best)];
      ++assigned;
    }
    if (count[0] == 0 && n > 0) {
      // every user keeps at least one training record
      int donor = count[1] >= count[2] ? 1 : 2;
      --count[static_cast<size_t>(donor)];
      ++count[0];
    }
    int k = 0;
    for (int f = 0; f < 3; ++f)
      for (int c = 0; c < count[static_cast<size_t>(f)]; ++c)
        out.split[idx[static_cast<size_t>(k++)]] = static_cast<Fold>(f + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

IngestResult ingest_reviews(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  IngestResult result;
  std::unordered_map<std::string, uint32_t> user_ids, item_ids;
  std::unordered_set<std::string> seen_keys;

  size_t line_no = 0;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') continue;  // version header / comments

    std::istringstream is(line);
    std::string user, item, rating_s, ts_s;
    if (!(is >> user >> item >> rating_s >> ts_s)) {
      result.issues.push_back({line_no, "malformed line"});
      continue;
    }
    int rating;
    int64_t ts;
    try {
      size_t pos1 = 0, pos2 = 0;
      rating = std::stoi(rating_s, &pos1);
      ts = std::stoll(ts_s, &pos2);
      if (pos1 != rating_s.size() || pos2 != ts_s.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      result.issues.push_back({line_no, "malformed line"});
      continue;
    }
    if (rating < 1 || rating > 5) {
      result.issues.push_back({line_no, "rating out of range"});
      continue;
    }
    std::string key = user + "\x1f" + item + "\x1f" + ts_s;
    if (!seen_keys.insert(key).second) {
      result.issues.push_back({line_no, "duplicate (user, item, timestamp)"});
      continue;
    }
    auto map_id = [](std::unordered_map<std::string, uint32_t>& m, std::vector<std::string>& names,
                     const std::string& name) {
      auto it = m.find(name);
      if (it != m.end()) return it->second;
      uint32_t id = static_cast<uint32_t>(names.size());
      m.emplace(name, id);
      names.push_back(name);
      return id;
    };
    InteractionRecord rec;
    rec.user_id = map_id(user_ids, result.user_names, user);
    rec.item_id = map_id(item_ids, result.item_names, item);
    rec.rating = rating;
    rec.timestamp = ts;
    result.dataset.records.push_back(rec);
  }
  result.dataset.n_users = static_cast<uint32_t>(result.user_names.size());
  result.dataset.n_items = static_cast<uint32_t>(result.item_names.size());
  return result;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kDatasetHeader = "#uip-dataset v1";
constexpr const char* kSplitHeader = "#uip-split v1";
constexpr const char* kPlantedHeader = "#uip-planted v1";
constexpr const char* kIdmapHeader = "#uip-idmap v1";

std::vector<std::string> read_lines_expect_header(const std::filesystem::path& p, const char* header) {
  std::string text = read_text_file(p);
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  if (lines.empty() || lines[0] != header)
    raise(Errc::artifact, p.string() + ": missing format-version header '" + std::string(header) + "'");
  lines.erase(lines.begin());
  return lines;
}

}  // namespace

void save_dataset(const std::filesystem::path& p, const Dataset& d) {
  std::ostringstream os;
  os << kDatasetHeader << "\n";
  os << "#users " << d.n_users << " items " << d.n_items << "\n";
  for (const auto& r : d.records)
    os << r.user_id << "\t" << r.item_id << "\t" << r.rating << "\t" << r.timestamp << "\n";
  write_text_file_atomic(p, os.str());
}

Dataset load_dataset(const std::filesystem::path& p) {
  auto lines = read_lines_expect_header(p, kDatasetHeader);
  Dataset d;
  bool have_sizes = false;
  for (size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream is(line.substr(1));
      std::string kw1, kw2;
      uint32_t nu, ni;
      if (is >> kw1 >> nu >> kw2 >> ni && kw1 == "users" && kw2 == "items") {
        d.n_users = nu;
        d.n_items = ni;
        have_sizes = true;
      }
      continue;
    }
    std::istringstream is(line);
    InteractionRecord r;
    if (!(is >> r.user_id >> r.item_id >> r.rating >> r.timestamp))
      raise(Errc::artifact, p.string() + ": malformed record at data line " + std::to_string(i + 1));
    if (r.rating < 1 || r.rating > 5)
      raise(Errc::artifact, p.string() + ": rating out of range at data line " + std::to_string(i + 1));
    d.records.push_back(r);
  }
  if (!have_sizes) {
    for (const auto& r : d.records) {
      d.n_users = std::max(d.n_users, r.user_id + 1);
      d.n_items = std::max(d.n_items, r.item_id + 1);
    }
  }
  return d;
}

void save_split(const std::filesystem::path& p, const Dataset& d) {
  if (d.split.size() != d.records.size()) raise(Errc::config, "save_split: dataset has no split");
  std::ostringstream os;
  os << kSplitHeader << "\n";
  for (size_t i = 0; i < d.split.size(); ++i) os << i << "\t" << fold_name(d.split[i]) << "\n";
  write_text_file_atomic(p, os.str());
}

void load_split(const std::filesystem::path& p, Dataset& d) {
  auto lines = read_lines_expect_header(p, kSplitHeader);
  d.split.assign(d.records.size(), Fold::none);
  for (const auto& line : lines) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    size_t idx;
    std::string name;
    if (!(is >> idx >> name)) raise(Errc::artifact, p.string() + ": malformed split line");
    if (idx >= d.records.size())
      raise(Errc::artifact, p.string() + ": split index " + std::to_string(idx) + " out of range");
    d.split[idx] = fold_from_name(name);
  }
}

void save_planted(const std::filesystem::path& p, const Dataset& d) {
  if (!d.has_planted()) raise(Errc::config, "save_planted: dataset has no planted truth");
  std::ostringstream os;
  os << kPlantedHeader << "\n";
  os << "#counts";
  for (int g : d.planted_class_counts) os << " " << g;
  os << "\n";
  const auto& classes = d.planted_classes_for_eval();
  for (size_t u = 0; u < classes.size(); ++u) {
    os << u;
    for (int c : classes[u]) os << "\t" << c;
    os << "\n";
  }
  write_text_file_atomic(p, os.str());
}

void load_planted(const std::filesystem::path& p, Dataset& d) {
  auto lines = read_lines_expect_header(p, kPlantedHeader);
  std::vector<std::vector<int>> classes(d.n_users);
  for (const auto& line : lines) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream is(line.substr(1));
      std::string kw;
      is >> kw;
      if (kw == "counts") {
        d.planted_class_counts.clear();
        int g;
        while (is >> g) d.planted_class_counts.push_back(g);
      }
      continue;
    }
    std::istringstream is(line);
    size_t u;
    if (!(is >> u) || u >= classes.size())
      raise(Errc::artifact, p.string() + ": bad planted line");
    int c;
    while (is >> c) classes[u].push_back(c);
  }
  d.set_planted(std::move(classes));
}

void save_idmap(const std::filesystem::path& p, const IngestResult& r) {
  std::ostringstream os;
  os << kIdmapHeader << "\n";
  for (size_t i = 0; i < r.user_names.size(); ++i) os << "user\t" << r.user_names[i] << "\t" << i << "\n";
  for (size_t i = 0; i < r.item_names.size(); ++i) os << "item\t" << r.item_names[i] << "\t" << i << "\n";
  write_text_file_atomic(p, os.str());
}

}  // namespace userip
