#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <chrono>
#include <filesystem>

#include "doctest.h"
#include "userip/bank.hpp"

using namespace userip;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / ("uip_bank_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

BankMeta make_meta() {
  BankMeta meta;
  meta.n_profiles = 2;
  meta.code_counts = {4, 3};
  meta.theta_checksum = "deadbeef";
  meta.codebook_checksum = "cafef00d";
  return meta;
}

Assignment make_assignment(int n_users, uint64_t seed) {
  Assignment a;
  Rng rng(seed);
  for (int u = 0; u < n_users; ++u) {
    a.users.push_back(static_cast<uint32_t>(u));
    a.codes.push_back({rng.uniform_int(0, 3), rng.uniform_int(0, 2)});
  }
  return a;
}

}  // namespace

TEST_CASE("empty assignment writes a valid zero-record bank") {
  auto dir = temp_dir();
  Assignment empty;
  write_bank(dir / "bank.uipb", empty, make_meta());
  FeatureBank bank = read_bank(dir / "bank.uipb");
  CHECK(bank.size() == 0);
  CHECK_FALSE(bank.lookup(0).has_value());
  CHECK(bank.meta().code_counts == std::vector<int>{4, 3});
  fs::remove_all(dir);
}

TEST_CASE("write then read returns an identical mapping") {
  auto dir = temp_dir();
  Assignment a = make_assignment(257, 7);
  write_bank(dir / "bank.uipb", a, make_meta());
  FeatureBank bank = read_bank(dir / "bank.uipb");
  REQUIRE(bank.size() == 257);
  for (size_t i = 0; i < a.users.size(); ++i) {
    auto codes = bank.lookup(a.users[i]);
    REQUIRE(codes.has_value());
    CHECK(*codes == a.codes[i]);
  }
  CHECK_FALSE(bank.lookup(9999).has_value());
  fs::remove_all(dir);
}

TEST_CASE("records come out sorted regardless of assignment order") {
  auto dir = temp_dir();
  Assignment a;
  a.users = {42, 3, 17};
  a.codes = {{1, 2}, {0, 0}, {3, 1}};
  write_bank(dir / "bank.uipb", a, make_meta());
  FeatureBank bank = read_bank(dir / "bank.uipb");
  CHECK(bank.users() == std::vector<uint32_t>{3, 17, 42});
  CHECK(*bank.lookup(42) == std::vector<int>{1, 2});
  fs::remove_all(dir);
}

TEST_CASE("ten-thousand-user bank round-trips with matching checksum") {
  auto dir = temp_dir();
  Assignment a = make_assignment(10000, 11);
  write_bank(dir / "bank.uipb", a, make_meta());
  uint32_t written = file_crc32(dir / "bank.uipb");

  FeatureBank bank = read_bank(dir / "bank.uipb");
  CHECK(bank.size() == 10000);
  // re-serialize: byte-identical content
  bank.write(dir / "again.uipb");
  CHECK(file_crc32(dir / "again.uipb") == written);
  fs::remove_all(dir);
}

TEST_CASE("corruption and version mismatches raise distinct artifact errors") {
  auto dir = temp_dir();
  Assignment a = make_assignment(64, 13);
  write_bank(dir / "bank.uipb", a, make_meta());
  auto bytes = read_binary_file(dir / "bank.uipb");

  // flip a code byte inside the record block: CRC must catch it
  auto corrupted = bytes;
  corrupted[corrupted.size() - 10] ^= 0xFF;
  write_file_atomic(dir / "corrupt.uipb", corrupted);
  CHECK_THROWS_WITH_AS(static_cast<void>(read_bank(dir / "corrupt.uipb")),
                       doctest::Contains("checksum"), Error);

  // out-of-range index with a refreshed CRC: range validation must catch it
  auto bad_index = bytes;
  size_t record_block_start = bad_index.size() - 4 - 64 * 8;
  bad_index[record_block_start + 4] = 0xEE;  // c_1 beyond K_1
  bad_index[record_block_start + 5] = 0x00;
  uint32_t crc = crc32({bad_index.data(), bad_index.size() - 4});
  std::memcpy(bad_index.data() + bad_index.size() - 4, &crc, 4);
  write_file_atomic(dir / "badindex.uipb", bad_index);
  CHECK_THROWS_WITH_AS(static_cast<void>(read_bank(dir / "badindex.uipb")),
                       doctest::Contains("out of range"), Error);

  // version bump with refreshed CRC
  auto bad_version = bytes;
  bad_version[4] = 0x77;
  crc = crc32({bad_version.data(), bad_version.size() - 4});
  std::memcpy(bad_version.data() + bad_version.size() - 4, &crc, 4);
  write_file_atomic(dir / "badversion.uipb", bad_version);
  CHECK_THROWS_WITH_AS(static_cast<void>(read_bank(dir / "badversion.uipb")),
                       doctest::Contains("version"), Error);

  // truncated record block
  auto truncated = bytes;
  truncated.resize(truncated.size() - 7);
  crc = crc32({truncated.data(), truncated.size() - 4});
  std::memcpy(truncated.data() + truncated.size() - 4, &crc, 4);
  write_file_atomic(dir / "truncated.uipb", truncated);
  CHECK_THROWS_WITH_AS(static_cast<void>(read_bank(dir / "truncated.uipb")),
                       doctest::Contains("truncated"), Error);
  fs::remove_all(dir);
}

TEST_CASE("partial writes leave no visible file") {
  auto dir = temp_dir();
  Assignment a;
  a.users = {1};
  a.codes = {{9, 0}};  // out of range: from_assignment throws before any write
  CHECK_THROWS_AS(write_bank(dir / "never.uipb", a, make_meta()), Error);
  CHECK_FALSE(fs::exists(dir / "never.uipb"));
  CHECK_FALSE(fs::exists(dir / "never.uipb.tmp"));
  fs::remove_all(dir);
}

TEST_CASE("one million lookups stay under a second") {
  auto dir = temp_dir();
  Assignment a = make_assignment(10000, 17);
  write_bank(dir / "bank.uipb", a, make_meta());
  FeatureBank bank = read_bank(dir / "bank.uipb");

  Rng rng(19);
  std::vector<uint32_t> queries(1000000);
  for (auto& q : queries) q = static_cast<uint32_t>(rng.uniform_int(0, 10999));  // ~9% misses

  auto start = std::chrono::steady_clock::now();
  long hits = 0;
  int acc = 0;
  for (uint32_t q : queries) {
    auto codes = bank.lookup(q);
    if (codes) {
      ++hits;
      acc += (*codes)[0];
    }
  }
  double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  INFO("1M lookups in " << seconds << "s, hits=" << hits << " acc=" << acc);
  CHECK(hits > 0);
  CHECK(seconds < 1.0);
  fs::remove_all(dir);
}
