#pragma once

// Shared plumbing for the library: error types that the CLI maps to exit
// codes, counter-based random streams, byte-order checked file I/O, FNV-1a
// hashing, and a chunked parallel_for honouring the EQDISTILL_THREADS cap.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and this code assumes a little-endian host");

namespace eqdistill {

// Exit-code contract: config/shape/contract problems -> 2, file problems -> 3,
// numerical blow-ups (solver or training divergence) -> 4.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct shape_error : config_error {
  using config_error::config_error;
};
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Random streams.
//
// Data generation needs a counter-based scheme: record i is produced from
// mix64(seed, i), so any worker can generate any record and the file bytes
// never depend on the thread count. splitmix64 is the mixer of choice: tiny,
// fast, and passes BigCrush as a stream generator.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from (seed, index) pairs.
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2)) ^ b;
  splitmix64(s);
  return splitmix64(s);
}

// uniform in [0, 1)
inline double uniform01(std::uint64_t& state) {
  return double(splitmix64(state) >> 11) * 0x1.0p-53;
}

// Unbounded integer draw in [0, n) via the 128-bit multiply trick; avoids the
// modulo bias of `x % n` without a rejection loop.
inline std::uint64_t uniform_below(std::uint64_t& state, std::uint64_t n) {
  return std::uint64_t((static_cast<__uint128_t>(splitmix64(state)) * n) >> 64);
}

// Standard-normal stream: splitmix64 counter state plus Box-Muller, hand
// rolled because std::normal_distribution is not reproducible across
// standard library implementations.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : state_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform01(state_);  // (0, 1]: keeps the log finite
    double u2 = uniform01(state_);
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal truncated to +-2 sigma by resampling, scaled by std_dev.
  double next_truncated(double std_dev) {
    double z = next();
    while (std::abs(z) > 2.0) z = next();
    return z * std_dev;
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Fisher-Yates permutation of [0, n), deterministic in (n, seed).
inline std::vector<std::uint32_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::uint32_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::uint32_t(i);
  std::uint64_t state = seed;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = std::size_t(uniform_below(state, i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64): dataset checksums and checkpoint config fingerprints.

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for checksum: " + path);
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, std::size_t(in.gcount()), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Little-endian binary I/O. The static_assert above pins the host byte order,
// so raw writes of integral/float types produce the on-disk format directly.

inline void write_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), std::streamsize(n));
  if (!out) throw io_error("short write");
}

inline void read_bytes(std::istream& in, void* data, std::size_t n) {
  in.read(static_cast<char*>(data), std::streamsize(n));
  if (std::size_t(in.gcount()) != n) throw io_error("truncated file: wanted " + std::to_string(n) + " bytes");
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  static_assert(std::is_arithmetic_v<T>);
  write_bytes(out, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  static_assert(std::is_arithmetic_v<T>);
  T v;
  read_bytes(in, &v, sizeof(T));
  return v;
}

inline void write_str(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, std::uint32_t(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline std::string read_str(std::istream& in) {
  auto n = read_pod<std::uint32_t>(in);
  std::string s(n, '\0');
  read_bytes(in, s.data(), n);
  return s;
}

// ---------------------------------------------------------------------------
// Threading. EQDISTILL_THREADS, when set, overrides the hardware count; the
// generation and training paths are written so results do not depend on it.

inline unsigned worker_count() {
  if (const char* env = std::getenv("EQDISTILL_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v >= 1 && v <= 1024) return unsigned(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Splits [0, n) into one contiguous chunk per worker and runs them on
// std::threads (caller's thread does the first chunk). fn(begin, end) must be
// safe to run concurrently on disjoint ranges.
inline void parallel_for(std::size_t n, unsigned workers,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  workers = std::max(1u, std::min<unsigned>(workers, unsigned(n)));
  if (workers == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::size_t base = n / workers, extra = n % workers;
  std::size_t begin = 0;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (unsigned w = 0; w < workers; ++w) {
    std::size_t len = base + (w < extra ? 1 : 0);
    ranges.emplace_back(begin, begin + len);
    begin += len;
  }
  for (unsigned w = 1; w < workers; ++w)
    pool.emplace_back([&fn, r = ranges[w]] { fn(r.first, r.second); });
  fn(ranges[0].first, ranges[0].second);
  for (auto& t : pool) t.join();
}

inline double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

}  // namespace eqdistill
