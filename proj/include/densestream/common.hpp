#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace densestream {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

// Graph buffers are typically a few MB each; glibc would mmap/munmap them and
// every batch would re-fault its working set. Raising the thresholds keeps
// freed arenas reusable. Call once per process before heavy tensor work.
inline void tune_malloc_for_tensors() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Exit-code mapping: data_error -> 2, numeric_error -> 3 (see tools/densestream.cpp).
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;

  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

// Voxel index in (z, y, x) axis order, matching the C-order voxel layout.
struct Index3 {
  int z = 0;
  int y = 0;
  int x = 0;
  friend bool operator==(const Index3&, const Index3&) = default;
};

inline std::string index_to_string(Index3 i) {
  std::ostringstream os;
  os << "(z=" << i.z << ", y=" << i.y << ", x=" << i.x << ")";
  return os.str();
}

// round-half-up, the convention for world->voxel conversion
inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

// ---------------------------------------------------------------------------
// file helpers

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw data_error("read failure: " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const void* data,
                             std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot open file for writing: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw data_error("write failure: " + path.string());
}

inline std::string read_file_text(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_file_text(const std::filesystem::path& path, std::string_view text) {
  write_file_bytes(path, text.data(), text.size());
}

inline std::vector<float> read_f32le(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  if (bytes.size() % 4 != 0)
    throw data_error("raw float file size not a multiple of 4: " + path.string());
  std::vector<float> out(bytes.size() / 4);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline void write_f32le(const std::filesystem::path& path, const std::vector<float>& v) {
  write_file_bytes(path, v.data(), v.size() * 4);
}

// ---------------------------------------------------------------------------
// content digests (FNV-1a 64): cheap content-addressing for stage manifests

inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::string digest_file(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

inline std::string digest_string(std::string_view s) { return to_hex(fnv1a64(s)); }

// ---------------------------------------------------------------------------
// CSV helpers (plain comma-separated, no quoting; none of our fields contain commas)

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw data_error("cannot parse number '" + s + "' in " + context);
  }
}

inline long long parse_int(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw data_error("cannot parse integer '" + s + "' in " + context);
  }
}

inline std::string format_fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace densestream
