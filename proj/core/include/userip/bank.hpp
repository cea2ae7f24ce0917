#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "userip/quant.hpp"

namespace userip {

// Durable user -> (c_1 .. c_M) store with constant-time lookup. Binary layout,
// bit-exact: magic "UIPB", version u16, header length u32, JSON header,
// record block sorted by user_id (u32 user id + M x u16 indices), trailing
// CRC32 over everything before it. Never mutated after creation.
struct BankMeta {
  int n_profiles = 0;
  std::vector<int> code_counts;           // K_m
  std::string theta_checksum;             // hex CRC32 of the producing theta checkpoint
  std::string codebook_checksum;          // hex CRC32 of the producing codebook checkpoint
  std::string tool = "userip";
};

class FeatureBank {
 public:
  FeatureBank() = default;

  const BankMeta& meta() const { return meta_; }
  size_t size() const { return order_.size(); }

  // explicit unknown-user outcome, never a default tuple
  std::optional<std::vector<int>> lookup(uint32_t user) const;

  const std::vector<uint32_t>& users() const { return order_; }

  static FeatureBank from_assignment(const Assignment& assignment, BankMeta meta);
  void write(const std::filesystem::path& p) const;
  static FeatureBank read(const std::filesystem::path& p);

 private:
  BankMeta meta_;
  std::vector<uint32_t> order_;                 // ascending user ids
  std::vector<uint16_t> codes_;                 // order_.size() x n_profiles
  std::unordered_map<uint32_t, size_t> index_;
};

void write_bank(const std::filesystem::path& p, const Assignment& assignment, BankMeta meta);
FeatureBank read_bank(const std::filesystem::path& p);

}  // namespace userip
