#include "userip/bank.hpp"

#include <algorithm>
#include <cstring>

#include "json.hpp"

namespace userip {

namespace {

constexpr char kBankMagic[4] = {'U', 'I', 'P', 'B'};
constexpr uint16_t kBankVersion = 1;

template <class T>
void append_pod(std::vector<unsigned char>& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T read_pod(const std::vector<unsigned char>& bytes, size_t& off, const std::string& what) {
  if (off + sizeof(T) > bytes.size()) raise(Errc::artifact, "feature bank: truncated at " + what);
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

nlohmann::json meta_to_json(const BankMeta& meta) {
  return nlohmann::json{{"n_profiles", meta.n_profiles},
                        {"code_counts", meta.code_counts},
                        {"theta_checksum", meta.theta_checksum},
                        {"codebook_checksum", meta.codebook_checksum},
                        {"tool", meta.tool}};
}

BankMeta meta_from_json(const nlohmann::json& j) {
  BankMeta meta;
  meta.n_profiles = j.at("n_profiles").get<int>();
  meta.code_counts = j.at("code_counts").get<std::vector<int>>();
  meta.theta_checksum = j.at("theta_checksum").get<std::string>();
  meta.codebook_checksum = j.at("codebook_checksum").get<std::string>();
  meta.tool = j.value("tool", "");
  return meta;
}

}  // namespace

std::optional<std::vector<int>> FeatureBank::lookup(uint32_t user) const {
  auto it = index_.find(user);
  if (it == index_.end()) return std::nullopt;
  std::vector<int> out(static_cast<size_t>(meta_.n_profiles));
  for (int m = 0; m < meta_.n_profiles; ++m)
    out[static_cast<size_t>(m)] =
        codes_[it->second * static_cast<size_t>(meta_.n_profiles) + static_cast<size_t>(m)];
  return out;
}

FeatureBank FeatureBank::from_assignment(const Assignment& assignment, BankMeta meta) {
  if (meta.n_profiles < 1) raise(Errc::config, "feature bank: n_profiles must be >= 1");
  if (static_cast<int>(meta.code_counts.size()) != meta.n_profiles)
    raise(Errc::config, "feature bank: one K per profile required");
  if (assignment.users.size() != assignment.codes.size())
    raise(Errc::config, "feature bank: malformed assignment");

  std::vector<size_t> order(assignment.users.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&assignment](size_t a, size_t b) {
    return assignment.users[a] < assignment.users[b];
  });

  FeatureBank bank;
  bank.meta_ = std::move(meta);
  for (size_t i : order) {
    uint32_t user = assignment.users[i];
    const auto& codes = assignment.codes[i];
    if (static_cast<int>(codes.size()) != bank.meta_.n_profiles)
      raise(Errc::config, "feature bank: tuple width mismatch for user " + std::to_string(user));
    if (!bank.index_.emplace(user, bank.order_.size()).second)
      raise(Errc::config, "feature bank: duplicate user " + std::to_string(user));
    for (int m = 0; m < bank.meta_.n_profiles; ++m) {
      int c = codes[static_cast<size_t>(m)];
      if (c < 0 || c >= bank.meta_.code_counts[static_cast<size_t>(m)])
        raise(Errc::config, "feature bank: index " + std::to_string(c) + " out of range for profile " +
                                std::to_string(m));
      bank.codes_.push_back(static_cast<uint16_t>(c));
    }
    bank.order_.push_back(user);
  }
  return bank;
}

void FeatureBank::write(const std::filesystem::path& p) const {
  std::string header = meta_to_json(meta_).dump();
  std::vector<unsigned char> out;
  out.insert(out.end(), kBankMagic, kBankMagic + 4);
  append_pod(out, kBankVersion);
  append_pod(out, static_cast<uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (size_t i = 0; i < order_.size(); ++i) {
    append_pod(out, order_[i]);
    for (int m = 0; m < meta_.n_profiles; ++m)
      append_pod(out, codes_[i * static_cast<size_t>(meta_.n_profiles) + static_cast<size_t>(m)]);
  }
  append_pod(out, crc32(out));
  write_file_atomic(p, out);
}

FeatureBank FeatureBank::read(const std::filesystem::path& p) {
  auto bytes = read_binary_file(p);
  if (bytes.size() < 4 + 2 + 4 + 4) raise(Errc::artifact, p.string() + ": truncated feature bank");
  if (std::memcmp(bytes.data(), kBankMagic, 4) != 0)
    raise(Errc::artifact, p.string() + ": bad feature bank magic");
  size_t off = 4;
  uint16_t version = read_pod<uint16_t>(bytes, off, "version");
  if (version != kBankVersion)
    raise(Errc::artifact, p.string() + ": unsupported feature bank version " + std::to_string(version));

  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (stored_crc != crc32({bytes.data(), bytes.size() - 4}))
    raise(Errc::artifact, p.string() + ": feature bank checksum mismatch");

  uint32_t header_len = read_pod<uint32_t>(bytes, off, "header length");
  if (off + header_len > bytes.size() - 4) raise(Errc::artifact, p.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(std::string(bytes.begin() + static_cast<long>(off),
                                               bytes.begin() + static_cast<long>(off + header_len)));
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::artifact, p.string() + ": malformed bank header: " + e.what());
  }
  off += header_len;

  FeatureBank bank;
  bank.meta_ = meta_from_json(header);
  if (bank.meta_.n_profiles < 1 ||
      static_cast<int>(bank.meta_.code_counts.size()) != bank.meta_.n_profiles)
    raise(Errc::artifact, p.string() + ": invalid bank header");

  size_t record_size = 4 + 2 * static_cast<size_t>(bank.meta_.n_profiles);
  size_t body = bytes.size() - 4 - off;
  if (body % record_size != 0) raise(Errc::artifact, p.string() + ": truncated record block");
  size_t n_records = body / record_size;
  uint32_t prev_user = 0;
  for (size_t i = 0; i < n_records; ++i) {
    uint32_t user = read_pod<uint32_t>(bytes, off, "record user");
    if (i > 0 && user <= prev_user)
      raise(Errc::artifact, p.string() + ": record block not sorted by user id");
    prev_user = user;
    bank.index_.emplace(user, bank.order_.size());
    for (int m = 0; m < bank.meta_.n_profiles; ++m) {
      uint16_t c = read_pod<uint16_t>(bytes, off, "record code");
      if (c >= static_cast<uint16_t>(bank.meta_.code_counts[static_cast<size_t>(m)]))
        raise(Errc::artifact, p.string() + ": stored index " + std::to_string(c) +
                                  " out of range for profile " + std::to_string(m));
      bank.codes_.push_back(c);
    }
    bank.order_.push_back(user);
  }
  return bank;
}

void write_bank(const std::filesystem::path& p, const Assignment& assignment, BankMeta meta) {
  FeatureBank::from_assignment(assignment, std::move(meta)).write(p);
}

FeatureBank read_bank(const std::filesystem::path& p) { return FeatureBank::read(p); }

}  // namespace userip
