#include "userip/common.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace userip {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over seed xor stream
  uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) raise(Errc::config, "uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  // rejection sampling to avoid modulo bias
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return lo + static_cast<int>(x % span);
}

double Rng::gaussian(double mu, double sigma) {
  if (has_spare_) {
    has_spare_ = false;
    return mu + sigma * spare_;
  }
  double u1, u2;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return mu + sigma * r * std::cos(a);
}

int Rng::categorical_cdf(std::span<const double> cdf) {
  if (cdf.empty()) raise(Errc::config, "categorical: empty table");
  double total = cdf.back();
  double x = uniform01() * total;
  size_t lo = 0, hi = cdf.size() - 1;
  while (lo < hi) {
    size_t mid = (lo + hi) / 2;
    if (cdf[mid] <= x)
      lo = mid + 1;
    else
      hi = mid;
  }
  return static_cast<int>(lo);
}

// ---------------------------------------------------------------------------

namespace {

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> t{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

const std::array<uint32_t, 256>& crc_table() {
  static const auto t = make_crc_table();
  return t;
}

}  // namespace

uint32_t crc32(std::span<const unsigned char> data, uint32_t seed) {
  const auto& t = crc_table();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (unsigned char b : data) c = t[(c ^ b) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

uint32_t crc32_str(const std::string& s) {
  return crc32({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

std::string hex32(uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) raise(Errc::io, "cannot open " + p.string());
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

std::vector<unsigned char> read_binary_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) raise(Errc::io, "cannot open " + p.string());
  std::vector<unsigned char> v((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return v;
}

void write_file_atomic(const std::filesystem::path& p, std::span<const unsigned char> bytes) {
  namespace fs = std::filesystem;
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) raise(Errc::io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      fs::remove(tmp);
      raise(Errc::io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) {
    fs::remove(tmp);
    raise(Errc::io, "rename failed for " + p.string() + ": " + ec.message());
  }
}

void write_text_file_atomic(const std::filesystem::path& p, const std::string& text) {
  write_file_atomic(p, {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

uint32_t file_crc32(const std::filesystem::path& p) {
  auto bytes = read_binary_file(p);
  return crc32(bytes);
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'U', 'I', 'P', 'C'};
constexpr uint16_t kCkptVersion = 1;

template <class T>
void append_pod(std::vector<unsigned char>& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& p, const CheckpointData& data) {
  nlohmann::json header;
  header["kind"] = data.kind;
  header["meta"] = data.meta_json.empty() ? nlohmann::json::object()
                                          : nlohmann::json::parse(data.meta_json);
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : data.blocks) {
    size_t n = 1;
    for (int d : b.shape) n *= static_cast<size_t>(d);
    if (n != b.values.size()) raise(Errc::config, "checkpoint block " + b.name + ": shape/size mismatch");
    blocks.push_back({{"name", b.name}, {"shape", b.shape}});
  }
  header["blocks"] = blocks;
  std::string hjson = header.dump();

  std::vector<unsigned char> out;
  out.insert(out.end(), kCkptMagic, kCkptMagic + 4);
  append_pod(out, kCkptVersion);
  append_pod(out, static_cast<uint32_t>(hjson.size()));
  out.insert(out.end(), hjson.begin(), hjson.end());
  for (const auto& b : data.blocks) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(b.values.data());
    out.insert(out.end(), bytes, bytes + b.values.size() * sizeof(double));
  }
  append_pod(out, crc32(out));
  write_file_atomic(p, out);
}

CheckpointData load_checkpoint(const std::filesystem::path& p, const std::string& expected_kind) {
  auto bytes = read_binary_file(p);
  if (bytes.size() < 4 + 2 + 4 + 4) raise(Errc::artifact, p.string() + ": truncated checkpoint");
  if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0) raise(Errc::artifact, p.string() + ": bad magic");
  uint16_t version;
  std::memcpy(&version, bytes.data() + 4, 2);
  if (version != kCkptVersion)
    raise(Errc::artifact, p.string() + ": unsupported checkpoint version " + std::to_string(version));
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  uint32_t computed = crc32({bytes.data(), bytes.size() - 4});
  if (stored_crc != computed) raise(Errc::artifact, p.string() + ": checksum mismatch");

  uint32_t hlen;
  std::memcpy(&hlen, bytes.data() + 6, 4);
  size_t off = 10;
  if (off + hlen > bytes.size() - 4) raise(Errc::artifact, p.string() + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(std::string(bytes.begin() + off, bytes.begin() + off + hlen));
  off += hlen;

  CheckpointData data;
  data.kind = header.at("kind").get<std::string>();
  if (!expected_kind.empty() && data.kind != expected_kind)
    raise(Errc::artifact, p.string() + ": checkpoint kind '" + data.kind + "', expected '" + expected_kind + "'");
  data.meta_json = header.at("meta").dump();
  for (const auto& bj : header.at("blocks")) {
    TensorBlock b;
    b.name = bj.at("name").get<std::string>();
    b.shape = bj.at("shape").get<std::vector<int>>();
    size_t n = 1;
    for (int d : b.shape) n *= static_cast<size_t>(d);
    if (off + n * sizeof(double) > bytes.size() - 4)
      raise(Errc::artifact, p.string() + ": truncated payload at block " + b.name);
    b.values.resize(n);
    std::memcpy(b.values.data(), bytes.data() + off, n * sizeof(double));
    off += n * sizeof(double);
    data.blocks.push_back(std::move(b));
  }
  if (off != bytes.size() - 4) raise(Errc::artifact, p.string() + ": trailing bytes in payload");
  return data;
}

uint32_t payload_crc32(const CheckpointData& data) {
  uint32_t c = 0;
  for (const auto& b : data.blocks) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(b.values.data());
    c = crc32({bytes, b.values.size() * sizeof(double)}, c);
  }
  return c;
}

}  // namespace userip
