#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "userip/common.hpp"

namespace userip {

struct InteractionRecord {
  uint32_t user_id = 0;
  uint32_t item_id = 0;
  int rating = 0;  // 1..5
  int64_t timestamp = 0;

  bool operator==(const InteractionRecord&) const = default;
};

enum class Fold : uint8_t { none = 0, train = 1, valid = 2, test = 3 };

const char* fold_name(Fold f);
Fold fold_from_name(const std::string& s);

// Planted generative model: the item catalog is carved into one region per
// profile category; each region is partitioned into per-class affinity
// buckets with Zipf-weighted popularity inside. A user draws one class per
// category; sequence items come from a mixture favoring the user's own
// buckets; ratings of affinity-matching items are boosted.
struct PlantedProfileSpec {
  int n_categories = 0;                               // M
  std::vector<int> class_counts;                      // G_1..G_M
  std::vector<std::vector<std::vector<double>>> affinity;  // [m][g] -> dist over items
  std::vector<double> background;                     // catalog-wide dist
  std::vector<int> item_category;                     // region of each item
  std::vector<int> item_class;                        // bucket within region
  double mix_own = 0.7;
  double rating_boost = 1.8;   // matching mean 3.3 + boost/2, others 3.3 - boost/2
  double sigma_match = 0.6;
  double sigma_nonmatch = 0.8;
  int seq_len = 30;

  void validate() const;
};

PlantedProfileSpec make_planted_spec(int n_categories, std::vector<int> class_counts, int n_items,
                                     double zipf_exponent, uint64_t seed);

struct Dataset {
  std::vector<InteractionRecord> records;
  std::vector<Fold> split;  // parallel to records; empty until split() ran
  uint32_t n_users = 0;     // id space size (ids may be sparse after filtering)
  uint32_t n_items = 0;
  std::vector<int> planted_class_counts;  // G_m sizes only; per-user classes are private

  // ---- derived views ----
  std::vector<uint32_t> active_users() const;
  std::vector<uint32_t> active_items() const;
  // record indices of one user ordered by timestamp, optionally one fold only
  std::vector<size_t> user_records(uint32_t user, std::optional<Fold> fold = std::nullopt) const;
  std::vector<int> user_item_sequence(uint32_t user, std::optional<Fold> fold = std::nullopt) const;

  // Planted truth is write-only for the training pipeline; every read goes
  // through the eval accessor and bumps the taint counter.
  void set_planted(std::vector<std::vector<int>> classes) { planted_ = std::move(classes); }
  bool has_planted() const { return planted_.has_value(); }
  const std::vector<std::vector<int>>& planted_classes_for_eval() const;
  long planted_read_count() const { return planted_reads_; }

 private:
  std::optional<std::vector<std::vector<int>>> planted_;
  mutable long planted_reads_ = 0;
};

Dataset generate_synthetic(const PlantedProfileSpec& spec, int n_users, int n_items, uint64_t seed);

int binarize(int rating);  // 1 iff rating > 3

Dataset filter_cold(const Dataset& d, int min_count = 4);

Dataset split_dataset(const Dataset& d, std::array<int, 3> ratios, uint64_t seed);

// ---------------------------------------------------------------------------
// Ingestion of external review files: whitespace-separated
// "user item rating timestamp [text...]" lines; string IDs are mapped to
// dense integers in first-seen order.
// ---------------------------------------------------------------------------

struct IngestIssue {
  size_t line = 0;
  std::string reason;
};

struct IngestResult {
  Dataset dataset;
  std::vector<IngestIssue> issues;
  std::vector<std::string> user_names;  // internal id -> external id
  std::vector<std::string> item_names;
};

IngestResult ingest_reviews(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// File formats (all carry a format-version header line)
// ---------------------------------------------------------------------------

void save_dataset(const std::filesystem::path& p, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& p);
void save_split(const std::filesystem::path& p, const Dataset& d);
void load_split(const std::filesystem::path& p, Dataset& d);
void save_planted(const std::filesystem::path& p, const Dataset& d);
void load_planted(const std::filesystem::path& p, Dataset& d);
void save_idmap(const std::filesystem::path& p, const IngestResult& r);

}  // namespace userip
