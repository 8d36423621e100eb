#pragma once

// Analytic teacher: an isotropic Gaussian mixture whose posterior-mean
// denoiser is available in closed form, integrated along the probability-flow
// ODE dx/dsigma = (x - D(x; sigma)) / sigma with Heun steps on the usual
// power-law sigma grid. Teacher math runs in double throughout; records are
// stored as float32.
//
// Pair files ("GETP") are written with counter-based seeding: record i is a
// pure function of (seed, first_record + i), so worker count and scheduling
// cannot change a single byte of the output.

#include <cstdint>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eqdistill/common.hpp"

namespace eqdistill {

struct MixtureSpec {
  std::size_t height = 8, width = 8, channels = 1;
  double std_dev = 0.1;                    // shared per-component std s
  std::vector<double> weights;             // mixing weights, must sum to 1
  std::vector<std::vector<double>> means;  // one flattened image per component
  std::vector<std::uint32_t> labels;       // per component; empty = unconditional

  std::size_t dim() const { return height * width * channels; }
  std::size_t components() const { return weights.size(); }
  bool conditional() const { return !labels.empty(); }

  std::size_t n_classes() const {
    std::uint32_t top = 0;
    for (auto l : labels) top = std::max(top, l);
    return labels.empty() ? 0 : std::size_t(top) + 1;
  }

  void validate() const {
    if (!height || !width || !channels) throw config_error("mixture: image dims must be positive");
    if (!(std_dev > 0)) throw config_error("mixture: std_dev must be positive");
    if (weights.empty()) throw config_error("mixture: no components");
    if (means.size() != weights.size())
      throw config_error("mixture: " + std::to_string(means.size()) + " means for " +
                         std::to_string(weights.size()) + " weights");
    long double sum = 0;
    for (double w : weights) {
      if (!(w >= 0)) throw config_error("mixture: weights must be non-negative");
      sum += w;
    }
    if (std::abs(double(sum - 1.0L)) > 1e-12)
      throw config_error("mixture: weights sum to " + std::to_string(double(sum)) + ", not 1");
    for (const auto& m : means)
      if (m.size() != dim())
        throw config_error("mixture: mean of size " + std::to_string(m.size()) + " for dim " +
                           std::to_string(dim()));
    if (!labels.empty()) {
      if (labels.size() != weights.size())
        throw config_error("mixture: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(weights.size()) + " components");
      std::vector<bool> seen(n_classes(), false);
      for (std::size_t j = 0; j < labels.size(); ++j)
        if (weights[j] > 0) seen[labels[j]] = true;
      for (std::size_t y = 0; y < seen.size(); ++y)
        if (!seen[y])
          throw config_error("mixture: class " + std::to_string(y) + " has no probability mass");
    }
  }
};

// Built-in mixture for desk runs: components are +-0.7 block patterns on a
// coarse grid (each cell spans `cell` pixels), bit patterns drawn
// deterministically from the seed and kept pairwise distinct. With the
// default std 0.1 the components are far apart, so class-restricted
// generation and nearest-mean classification are unambiguous.
inline MixtureSpec default_mixture(std::size_t components = 8, std::size_t classes = 4,
                                   std::size_t h = 8, std::size_t w = 8, std::size_t c = 1,
                                   double std_dev = 0.1, std::uint64_t seed = 7,
                                   std::size_t cell = 2) {
  if (!components) throw config_error("default_mixture: need at least one component");
  if (classes > components || (classes && components % classes))
    throw config_error("default_mixture: classes must divide components");
  if (h % cell || w % cell) throw config_error("default_mixture: cell must tile the image");
  MixtureSpec m;
  m.height = h;
  m.width = w;
  m.channels = c;
  m.std_dev = std_dev;
  std::size_t gy = h / cell, gx = w / cell;
  std::uint64_t state = mix64(seed, 0x6d69786564ull);
  std::vector<std::uint64_t> used;
  for (std::size_t j = 0; j < components; ++j) {
    std::uint64_t bits;
    do {
      bits = splitmix64(state) & ((gy * gx >= 64) ? ~0ull : ((1ull << (gy * gx)) - 1));
    } while (std::find(used.begin(), used.end(), bits) != used.end());
    used.push_back(bits);
    std::vector<double> mean(m.dim());
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t cell_idx = (y / cell) * gx + (x / cell);
        double v = (bits >> (cell_idx % 64)) & 1 ? 0.7 : -0.7;
        for (std::size_t ch = 0; ch < c; ++ch) mean[(y * w + x) * c + ch] = v;
      }
    m.means.push_back(std::move(mean));
    m.weights.push_back(1.0 / double(components));
    if (classes) m.labels.push_back(std::uint32_t(j % classes));
  }
  return m;
}

namespace detail {

// Log responsibilities over the (optionally class-restricted) components of
// the sigma-smoothed mixture at x, via log-sum-exp.
inline void responsibilities(const std::vector<double>& x, double sigma, const MixtureSpec& m,
                             std::optional<std::uint32_t> label, std::vector<double>& r) {
  double var = m.std_dev * m.std_dev + sigma * sigma;
  std::size_t k = m.components();
  r.assign(k, -std::numeric_limits<double>::infinity());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    if (label && m.labels[j] != *label) continue;
    double d2 = 0;
    const auto& mu = m.means[j];
    for (std::size_t i = 0; i < x.size(); ++i) {
      double d = x[i] - mu[i];
      d2 += d * d;
    }
    r[j] = std::log(m.weights[j]) - d2 / (2.0 * var);
    top = std::max(top, r[j]);
  }
  double z = 0;
  for (double v : r) z += std::isfinite(v) ? std::exp(v - top) : 0.0;
  double logz = top + std::log(z);
  for (double& v : r) v = std::isfinite(v) ? std::exp(v - logz) : 0.0;
}

}  // namespace detail

// Posterior mean E[x0 | x] under x = x0 + sigma * eps with x0 from the
// mixture: sum_j r_j (s^2 x + sigma^2 mu_j) / (s^2 + sigma^2). At sigma = 0
// the observation is exact and the denoiser is the identity. A label
// restricts the posterior to that class's components.
inline std::vector<double> gmm_denoiser(const std::vector<double>& x, double sigma,
                                        const MixtureSpec& m,
                                        std::optional<std::uint32_t> label = {}) {
  m.validate();
  if (x.size() != m.dim())
    throw config_error("denoiser: input size " + std::to_string(x.size()) + " for mixture dim " +
                       std::to_string(m.dim()));
  if (sigma < 0) throw config_error("denoiser: sigma must be non-negative");
  if (label && (!m.conditional() || *label >= m.n_classes()))
    throw config_error("denoiser: label " + std::to_string(*label) + " invalid for this mixture");
  if (sigma == 0) return x;
  double s2 = m.std_dev * m.std_dev, var = s2 + sigma * sigma;
  std::vector<double> r;
  detail::responsibilities(x, sigma, m, label, r);
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t j = 0; j < m.components(); ++j) {
    if (r[j] == 0.0) continue;
    const auto& mu = m.means[j];
    double a = r[j] * s2 / var, b = r[j] * sigma * sigma / var;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += a * x[i] + b * mu[i];
  }
  return out;
}

// Probability-flow right-hand side dx/dsigma = (x - D(x; sigma)) / sigma,
// which equals -sigma * grad log p_sigma(x).
inline std::vector<double> pf_ode_rhs(const std::vector<double>& x, double sigma,
                                      const MixtureSpec& m,
                                      std::optional<std::uint32_t> label = {}) {
  if (!(sigma > 0)) throw config_error("pf_ode_rhs: sigma must be positive");
  std::vector<double> d = gmm_denoiser(x, sigma, m, label);
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = (x[i] - d[i]) / sigma;
  return d;
}

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  std::size_t steps = 18;  // integration intervals; the grid has steps+1 nodes

  void validate() const {
    if (!(sigma_min > 0) || !(sigma_max > sigma_min))
      throw config_error("schedule: need 0 < sigma_min < sigma_max");
    if (!(rho > 0)) throw config_error("schedule: rho must be positive");
    if (!steps) throw config_error("schedule: steps must be at least 1");
  }

  // Power-law grid from sigma_max down to sigma_min, then an exact 0. The
  // endpoints are pinned rather than recomputed through pow so they compare
  // equal to the configured values.
  std::vector<double> sigmas() const {
    validate();
    std::vector<double> s(steps + 1);
    double a = std::pow(sigma_max, 1.0 / rho), b = std::pow(sigma_min, 1.0 / rho);
    for (std::size_t i = 0; i < steps; ++i) {
      double t = steps == 1 ? 0.0 : double(i) / double(steps - 1);
      s[i] = std::pow(a + t * (b - a), rho);
    }
    s[0] = sigma_max;
    if (steps > 1) s[steps - 1] = sigma_min;
    s[steps] = 0.0;
    return s;
  }

  // Heun takes two evaluations per interval except the final step to 0,
  // which must be plain Euler (the RHS is singular at sigma = 0).
  std::size_t nfe() const { return 2 * steps - 1; }
};

inline std::size_t nfe_count(std::size_t steps) { return 2 * steps - 1; }

// Integrates the PF-ODE from sigma_max to 0 starting at sigma_max * unit
// noise. Heun predictor-corrector per interval, Euler on the last.
inline std::vector<double> heun_sample(const std::vector<double>& unit_noise, const MixtureSpec& m,
                                       const NoiseSchedule& sched,
                                       std::optional<std::uint32_t> label = {},
                                       std::size_t* nfe_out = nullptr) {
  m.validate();
  sched.validate();
  if (unit_noise.size() != m.dim())
    throw config_error("heun_sample: noise size " + std::to_string(unit_noise.size()) +
                       " for mixture dim " + std::to_string(m.dim()));
  std::vector<double> sig = sched.sigmas();
  std::vector<double> x(unit_noise.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = sig[0] * unit_noise[i];
  std::size_t nfe = 0;
  std::vector<double> xe(x.size());
  for (std::size_t i = 0; i + 1 < sig.size(); ++i) {
    double s0 = sig[i], s1 = sig[i + 1], h = s1 - s0;
    std::vector<double> d = pf_ode_rhs(x, s0, m, label);
    ++nfe;
    for (std::size_t t = 0; t < x.size(); ++t) xe[t] = x[t] + h * d[t];
    if (s1 == 0.0) {
      x = xe;
    } else {
      std::vector<double> d2 = pf_ode_rhs(xe, s1, m, label);
      ++nfe;
      for (std::size_t t = 0; t < x.size(); ++t) x[t] += h * 0.5 * (d[t] + d2[t]);
    }
    for (double v : x)
      if (!std::isfinite(v))
        throw divergence_error("heun_sample: non-finite state after step " + std::to_string(i) +
                               " (sigma " + std::to_string(s1) + ")");
  }
  if (nfe_out) *nfe_out = nfe;
  return x;
}

// Direct draw from the mixture (no ODE): picks a component by weight, within
// the class when a label is given. Used for reference samples in evaluation.
inline std::vector<double> sample_mixture(const MixtureSpec& m, std::uint64_t& rng_state,
                                          std::optional<std::uint32_t> label = {},
                                          std::uint32_t* component_out = nullptr) {
  if (label && (!m.conditional() || *label >= m.n_classes()))
    throw config_error("sample_mixture: label " + std::to_string(*label) + " invalid for this mixture");
  double u = uniform01(rng_state);
  double total = 1.0;
  if (label) {
    total = 0;
    for (std::size_t j = 0; j < m.components(); ++j)
      if (m.labels[j] == *label) total += m.weights[j];
  }
  std::size_t pick = 0;
  double acc = 0;
  for (std::size_t j = 0; j < m.components(); ++j) {
    if (label && m.labels[j] != *label) continue;
    acc += m.weights[j] / total;
    pick = j;
    if (u < acc) break;
  }
  if (component_out) *component_out = std::uint32_t(pick);
  GaussianStream g(splitmix64(rng_state));
  std::vector<double> x = m.means[pick];
  for (auto& v : x) v += m.std_dev * g.next();
  return x;
}

// ---------------------------------------------------------------------------
// Pair dataset ("GETP"): header then fixed-size records. All integers little
// endian; samples are float32. Conditional files carry a u32 label per
// record.
//
//   magic "GETP" | u32 version=1 | u64 count | u32 h | u32 w | u32 c |
//   u8 conditional | records: f32 noise[h*w*c], f32 image[h*w*c] (, u32 label)

constexpr char kPairMagic[4] = {'G', 'E', 'T', 'P'};
constexpr std::uint32_t kPairVersion = 1;

struct PairDataset {
  std::size_t height = 0, width = 0, channels = 0;
  bool conditional = false;
  std::vector<float> noises;  // count * dim, record-major
  std::vector<float> images;
  std::vector<std::uint32_t> labels;  // empty when unconditional

  std::size_t dim() const { return height * width * channels; }
  std::size_t count() const { return dim() ? noises.size() / dim() : 0; }
  const float* noise(std::size_t i) const { return noises.data() + i * dim(); }
  const float* image(std::size_t i) const { return images.data() + i * dim(); }

  static PairDataset load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open dataset: " + path);
    char magic[4];
    read_bytes(in, magic, 4);
    if (std::memcmp(magic, kPairMagic, 4) != 0) throw io_error("not a pair dataset: " + path);
    auto version = read_pod<std::uint32_t>(in);
    if (version != kPairVersion)
      throw io_error("unsupported dataset version " + std::to_string(version) + ": " + path);
    auto count = read_pod<std::uint64_t>(in);
    PairDataset d;
    d.height = read_pod<std::uint32_t>(in);
    d.width = read_pod<std::uint32_t>(in);
    d.channels = read_pod<std::uint32_t>(in);
    d.conditional = read_pod<std::uint8_t>(in) != 0;
    if (!d.dim()) throw io_error("dataset has empty image dims: " + path);
    d.noises.resize(count * d.dim());
    d.images.resize(count * d.dim());
    if (d.conditional) d.labels.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      read_bytes(in, d.noises.data() + i * d.dim(), d.dim() * sizeof(float));
      read_bytes(in, d.images.data() + i * d.dim(), d.dim() * sizeof(float));
      if (d.conditional) d.labels[i] = read_pod<std::uint32_t>(in);
    }
    return d;
  }
};

struct GenSummary {
  std::size_t count = 0;
  std::uint64_t nfe_total = 0;
  std::uint64_t checksum = 0;  // FNV-1a over the whole file
};

// Generates `count` (noise, ODE endpoint) pairs and writes them to path.
// Record g = first_record + i is a pure function of (seed, g): its own
// Gaussian stream supplies the label draw and the unit noise, so any worker
// partition yields identical bytes. first_record carves out disjoint streams
// (held-out sets) without a second seed.
inline GenSummary generate_pairs(const MixtureSpec& m, const NoiseSchedule& sched,
                                 std::size_t count, std::uint64_t seed, bool conditional,
                                 const std::string& path, std::size_t first_record = 0,
                                 unsigned workers = worker_count()) {
  m.validate();
  sched.validate();
  if (!count) throw config_error("generate_pairs: count must be at least 1");
  if (conditional && !m.conditional())
    throw config_error("generate_pairs: conditional output needs a labelled mixture");
  std::size_t dim = m.dim();
  std::size_t rec_bytes = 2 * dim * sizeof(float) + (conditional ? sizeof(std::uint32_t) : 0);

  std::ostringstream head;
  write_bytes(head, kPairMagic, 4);
  write_pod<std::uint32_t>(head, kPairVersion);
  write_pod<std::uint64_t>(head, count);
  write_pod<std::uint32_t>(head, std::uint32_t(m.height));
  write_pod<std::uint32_t>(head, std::uint32_t(m.width));
  write_pod<std::uint32_t>(head, std::uint32_t(m.channels));
  write_pod<std::uint8_t>(head, conditional ? 1 : 0);
  std::string header = head.str();

  std::vector<unsigned char> body(count * rec_bytes);
  std::size_t classes = m.n_classes();
  parallel_for(count, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> noise(dim);
    for (std::size_t i = begin; i < end; ++i) {
      std::uint64_t g = first_record + i;
      GaussianStream rng(mix64(seed, g));
      std::optional<std::uint32_t> label;
      if (conditional) {
        // Class from the class-weight marginal, then the class-restricted ODE:
        // the label is exact by construction.
        std::uint64_t st = rng.state();
        double u = uniform01(st);
        rng = GaussianStream(st);
        double acc = 0;
        std::uint32_t y = 0;
        for (std::uint32_t cls = 0; cls < classes; ++cls) {
          double wy = 0;
          for (std::size_t j = 0; j < m.components(); ++j)
            if (m.labels[j] == cls) wy += m.weights[j];
          acc += wy;
          y = cls;
          if (u < acc) break;
        }
        label = y;
      }
      for (auto& v : noise) v = rng.next();
      std::vector<double> x0 = heun_sample(noise, m, sched, label);
      unsigned char* rec = body.data() + i * rec_bytes;
      float* fn = reinterpret_cast<float*>(rec);
      for (std::size_t t = 0; t < dim; ++t) fn[t] = float(noise[t]);
      float* fi = fn + dim;
      for (std::size_t t = 0; t < dim; ++t) fi[t] = float(x0[t]);
      if (conditional) std::memcpy(rec + 2 * dim * sizeof(float), &*label, sizeof(std::uint32_t));
    }
  });

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write dataset: " + path);
  write_bytes(out, header.data(), header.size());
  write_bytes(out, body.data(), body.size());
  out.close();
  if (!out) throw io_error("short write: " + path);

  GenSummary s;
  s.count = count;
  s.nfe_total = std::uint64_t(count) * sched.nfe();
  s.checksum = fnv1a64(body.data(), body.size(), fnv1a64(header.data(), header.size()));
  return s;
}

// ---------------------------------------------------------------------------
// Text mixture files: whitespace tokens, '#' comments to end of line.
//
//   mixture v1
//   <h> <w> <c> <std_dev> <n_components> <conditional 0|1>
//   per component: <weight> [<label>] <dim doubles>

inline void save_mixture(const MixtureSpec& m, const std::string& path) {
  m.validate();
  std::ofstream out(path);
  if (!out) throw io_error("cannot write mixture: " + path);
  out << "mixture v1\n";
  out << m.height << " " << m.width << " " << m.channels << " " << m.std_dev << " "
      << m.components() << " " << (m.conditional() ? 1 : 0) << "\n";
  out.precision(17);
  for (std::size_t j = 0; j < m.components(); ++j) {
    out << m.weights[j];
    if (m.conditional()) out << " " << m.labels[j];
    for (double v : m.means[j]) out << " " << v;
    out << "\n";
  }
  if (!out) throw io_error("short write: " + path);
}

inline MixtureSpec load_mixture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open mixture: " + path);
  std::string text, line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    text += line;
    text += '\n';
  }
  std::istringstream s(text);
  std::string word, ver;
  s >> word >> ver;
  if (word != "mixture" || ver != "v1") throw io_error("not a v1 mixture file: " + path);
  MixtureSpec m;
  std::size_t k = 0;
  int conditional = 0;
  s >> m.height >> m.width >> m.channels >> m.std_dev >> k >> conditional;
  if (!s) throw io_error("bad mixture header: " + path);
  for (std::size_t j = 0; j < k; ++j) {
    double w;
    s >> w;
    m.weights.push_back(w);
    if (conditional) {
      std::uint32_t l;
      s >> l;
      m.labels.push_back(l);
    }
    std::vector<double> mean(m.height * m.width * m.channels);
    for (auto& v : mean) s >> v;
    if (!s) throw io_error("truncated mixture component " + std::to_string(j) + ": " + path);
    m.means.push_back(std::move(mean));
  }
  m.validate();
  return m;
}

}  // namespace eqdistill
