#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace userip {

// Error taxonomy shared by all modules. The CLI maps kinds to exit codes.
enum class Errc {
  config,      // bad parameters, malformed config, shape mismatch
  artifact,    // missing/corrupt/mismatched upstream artifact
  divergence,  // numerical divergence guard tripped
  io,          // filesystem failure
};

class Error : public std::runtime_error {
 public:
  Error(Errc kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Errc kind() const { return kind_; }

 private:
  Errc kind_;
};

[[noreturn]] inline void raise(Errc kind, const std::string& msg) { throw Error(kind, msg); }

// ---------------------------------------------------------------------------
// Seeded RNG. Hand-rolled transforms on top of mt19937_64 so that streams are
// stable across standard libraries.
// ---------------------------------------------------------------------------

uint64_t mix_seed(uint64_t seed, uint64_t stream);

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // [lo, hi] inclusive
  int uniform_int(int lo, int hi);

  double gaussian(double mu = 0.0, double sigma = 1.0);

  // index into a cumulative weight table (last entry = total mass)
  int categorical_cdf(std::span<const double> cdf);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Checksums and file helpers
// ---------------------------------------------------------------------------

uint32_t crc32(std::span<const unsigned char> data, uint32_t seed = 0);
uint32_t crc32_str(const std::string& s);
std::string hex32(uint32_t v);

std::string read_text_file(const std::filesystem::path& p);
std::vector<unsigned char> read_binary_file(const std::filesystem::path& p);
// temp file + rename; partial writes leave no visible file
void write_file_atomic(const std::filesystem::path& p, std::span<const unsigned char> bytes);
void write_text_file_atomic(const std::filesystem::path& p, const std::string& text);
uint32_t file_crc32(const std::filesystem::path& p);

// ---------------------------------------------------------------------------
// Versioned checkpoint container: magic "UIPC", version u16, header length
// u32, JSON header, little-endian f64 payload, trailing CRC32 over everything
// before the trailer. The header records kind, metadata, and the name/shape of
// every block in payload order.
// ---------------------------------------------------------------------------

struct TensorBlock {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::string kind;
  std::string meta_json;  // module-specific metadata (serialized JSON object)
  std::vector<TensorBlock> blocks;
};

void save_checkpoint(const std::filesystem::path& p, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& p, const std::string& expected_kind);
// checksum of the parameter payload only (not the header), for freeze contracts
uint32_t payload_crc32(const CheckpointData& data);

}  // namespace userip
