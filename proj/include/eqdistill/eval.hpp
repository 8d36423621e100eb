#pragma once

// Evaluation of distilled students: held-out L1 fidelity, sliced Wasserstein
// distance between sample sets, conditional class accuracy, the NFE
// accounting table, wall-clock throughput, and portable-map image grids.

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "eqdistill/distill.hpp"

namespace eqdistill {

namespace detail {

// Exact squared 2-Wasserstein distance between two 1-D empirical
// distributions given as sorted samples, via the quantile coupling. Equal
// counts reduce to the mean squared gap of paired order statistics.
inline double w2_squared_sorted(const std::vector<double>& a, const std::vector<double>& b) {
  std::size_t na = a.size(), nb = b.size();
  if (na == nb) {
    long double acc = 0;
    for (std::size_t i = 0; i < na; ++i) {
      long double d = a[i] - b[i];
      acc += d * d;
    }
    return double(acc / na);
  }
  long double acc = 0, q = 0;
  std::size_t ia = 0, ib = 0;
  while (ia < na && ib < nb) {
    long double qa = (long double)(ia + 1) / na, qb = (long double)(ib + 1) / nb;
    long double next = std::min(qa, qb);
    long double d = a[ia] - b[ib];
    acc += (next - q) * d * d;
    q = next;
    if (qa <= next + 1e-18L) ++ia;
    if (qb <= next + 1e-18L) ++ib;
  }
  return double(acc);
}

}  // namespace detail

// Average over seeded random unit projections of the exact 1-D 2-Wasserstein
// distance between the projected sample sets. Symmetric, non-negative, zero
// on identical multisets.
inline double sliced_wasserstein(const std::vector<std::vector<double>>& a,
                                 const std::vector<std::vector<double>>& b,
                                 std::size_t n_proj = 128, std::uint64_t seed = 1234) {
  if (a.empty() || b.empty()) throw config_error("sliced_wasserstein: empty sample set");
  if (!n_proj) throw config_error("sliced_wasserstein: need at least one projection");
  std::size_t d = a.front().size();
  for (const auto& v : a)
    if (v.size() != d) throw config_error("sliced_wasserstein: ragged sample set");
  for (const auto& v : b)
    if (v.size() != d) throw config_error("sliced_wasserstein: dimensionality mismatch");
  if (!d) throw config_error("sliced_wasserstein: zero-dimensional samples");

  std::vector<double> dir(d), pa(a.size()), pb(b.size());
  long double total = 0;
  for (std::size_t p = 0; p < n_proj; ++p) {
    GaussianStream g(mix64(seed, p));
    double norm = 0;
    do {
      for (auto& x : dir) x = g.next();
      norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
    } while (!(norm > 0));
    for (auto& x : dir) x /= norm;
    for (std::size_t i = 0; i < a.size(); ++i)
      pa[i] = std::inner_product(dir.begin(), dir.end(), a[i].begin(), 0.0);
    for (std::size_t i = 0; i < b.size(); ++i)
      pb[i] = std::inner_product(dir.begin(), dir.end(), b[i].begin(), 0.0);
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    total += std::sqrt(detail::w2_squared_sorted(pa, pb));
  }
  return double(total / n_proj);
}

namespace detail {

inline std::size_t config_patch(const ModelConfig& cfg) {
  if (const auto* g = std::get_if<GETConfig>(&cfg)) return g->patch;
  return std::get<ViTConfig>(cfg).patch;
}

inline std::size_t config_classes(const ModelConfig& cfg) {
  if (const auto* g = std::get_if<GETConfig>(&cfg)) return g->n_classes;
  return std::get<ViTConfig>(cfg).n_classes;
}

// Applies a solver-step override; only equilibrium models have that knob.
inline ModelConfig override_k(const ModelConfig& cfg, std::optional<std::size_t> k) {
  if (!k) return cfg;
  if (!std::holds_alternative<GETConfig>(cfg))
    throw config_error("solver-step override applies only to equilibrium models");
  GETConfig g = std::get<GETConfig>(cfg);
  if (!*k) throw config_error("solver-step override must be at least 1");
  g.unroll_steps = *k;
  return g;
}

}  // namespace detail

// Mean L1 between student outputs on held-out noises and the teacher images,
// averaged over every element of the dataset.
template <typename S>
double l1_fidelity(const ModelParams<S>& params, const ModelConfig& cfg, const PairDataset& data,
                   std::optional<std::size_t> k_override = {}, std::size_t batch = 64) {
  if (!batch) throw config_error("l1_fidelity: batch must be at least 1");
  ModelConfig eff = detail::override_k(cfg, k_override);
  check_data_matches_model<S>(data, eff);
  if (!data.count()) throw config_error("l1_fidelity: empty dataset");
  std::size_t patch = detail::config_patch(eff);
  NoGradGuard<S> guard;
  long double total = 0;
  std::size_t elems = 0;
  Tensor<S> noise, target;
  std::vector<std::uint32_t> labels;
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < data.count(); at += batch) {
    idx.clear();
    for (std::size_t i = at; i < std::min(at + batch, data.count()); ++i) idx.push_back(i);
    detail::build_batch(data, idx, patch, noise, target, labels, data.conditional);
    Tensor<S> pred = forward_batched(params, eff, noise, labels);
    const S* p = pred.data();
    const S* t = target.data();
    for (std::size_t i = 0; i < pred.numel(); ++i) total += std::abs((long double)(p[i]) - t[i]);
    elems += pred.numel();
  }
  return double(total / elems);
}

// Fraction of generated samples whose nearest mixture mean matches the label
// they were asked for. Needs a conditional model and a labelled mixture.
template <typename S>
double class_accuracy(const ModelParams<S>& params, const ModelConfig& cfg, const MixtureSpec& m,
                      std::size_t per_class, std::optional<std::size_t> k_override = {},
                      std::uint64_t seed = 555, std::size_t batch = 64) {
  m.validate();
  std::size_t classes = detail::config_classes(cfg);
  if (!classes) throw config_error("class_accuracy: model is unconditional");
  if (!m.conditional() || m.n_classes() != classes)
    throw config_error("class_accuracy: mixture has " + std::to_string(m.n_classes()) +
                       " classes, model has " + std::to_string(classes));
  if (!per_class) throw config_error("class_accuracy: per_class must be at least 1");
  ModelConfig eff = detail::override_k(cfg, k_override);
  std::size_t patch = detail::config_patch(eff);
  std::size_t dim = m.dim();
  std::size_t n = (m.height / patch) * (m.width / patch), pd = patch * patch * m.channels;

  NoGradGuard<S> guard;
  std::size_t hits = 0, total = 0;
  std::vector<S> buf(dim);
  for (std::uint32_t y = 0; y < classes; ++y) {
    for (std::size_t at = 0; at < per_class; at += batch) {
      std::size_t bsz = std::min(batch, per_class - at);
      Tensor<S> noise({bsz * n, pd});
      std::vector<std::uint32_t> labels(bsz, y);
      for (std::size_t b = 0; b < bsz; ++b) {
        GaussianStream g(mix64(seed, (std::uint64_t(y) << 32) + at + b));
        for (auto& v : buf) v = S(g.next());
        Tensor<S> img({m.height, m.width, m.channels}, buf);
        Tensor<S> rows = patchify(img, patch);
        std::memcpy(noise.data() + b * n * pd, rows.data(), n * pd * sizeof(S));
      }
      Tensor<S> pred = forward_batched(params, eff, noise, labels);
      for (std::size_t b = 0; b < bsz; ++b) {
        Tensor<S> img = unpatchify(slice_rows(pred, b * n, (b + 1) * n), m.height, m.width,
                                   m.channels, patch);
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < m.components(); ++j) {
          double d2 = 0;
          for (std::size_t i = 0; i < dim; ++i) {
            double d = double(img.data()[i]) - m.means[j][i];
            d2 += d * d;
          }
          if (d2 < best) {
            best = d2;
            best_j = j;
          }
        }
        hits += m.labels[best_j] == y;
        ++total;
      }
    }
  }
  return double(hits) / double(total);
}

// NFE accounting for offline distillation against the two online baselines:
// progressive distillation (12 halving stages of 50k iterations plus a 100k
// final stage, two teacher calls per sample) and consistency distillation
// (one teacher call per sample per iteration).
struct NfeTable {
  std::uint64_t offline = 0;
  std::uint64_t progressive = 0;
  std::uint64_t consistency = 0;
};

inline NfeTable nfe_report(std::uint64_t count, std::size_t steps, std::uint64_t pd_batch = 128,
                           std::uint64_t cd_batch = 512, std::uint64_t cd_iters = 800000) {
  NfeTable t;
  t.offline = count * std::uint64_t(nfe_count(steps));
  t.progressive = 2 * pd_batch * (12ull * 50000ull + 100000ull);
  t.consistency = cd_batch * cd_iters;
  return t;
}

// Median wall-clock samples/second of the one-step student, measured over
// `trials` timed runs after `warmup` untimed ones.
template <typename S>
double throughput(const ModelParams<S>& params, const ModelConfig& cfg, std::size_t batch,
                  std::size_t trials = 5, std::size_t warmup = 1, std::uint64_t seed = 99) {
  if (trials < 3) throw config_error("throughput: need at least 3 trials");
  if (!batch) throw config_error("throughput: batch must be at least 1");
  std::size_t patch = detail::config_patch(cfg);
  std::size_t classes = detail::config_classes(cfg);
  std::size_t h, w, c;
  if (const auto* g = std::get_if<GETConfig>(&cfg)) {
    h = g->height;
    w = g->width;
    c = g->channels;
  } else {
    const auto& v = std::get<ViTConfig>(cfg);
    h = v.height;
    w = v.width;
    c = v.channels;
  }
  std::size_t n = (h / patch) * (w / patch), pd = patch * patch * c;
  Tensor<S> noise({batch * n, pd});
  GaussianStream g(mix64(seed, 0x7468726f75ull));
  for (std::size_t i = 0; i < noise.numel(); ++i) noise.data()[i] = S(g.next());
  std::vector<std::uint32_t> labels;
  if (classes) {
    std::uint64_t st = seed;
    for (std::size_t b = 0; b < batch; ++b)
      labels.push_back(std::uint32_t(uniform_below(st, std::uint64_t(classes))));
  }

  NoGradGuard<S> guard;
  std::vector<double> rates;
  for (std::size_t t = 0; t < warmup + trials; ++t) {
    double t0 = now_seconds();
    Tensor<S> out = forward_batched(params, cfg, noise, labels);
    double dt = now_seconds() - t0;
    (void)out;
    if (t >= warmup) rates.push_back(double(batch) / std::max(dt, 1e-12));
  }
  std::sort(rates.begin(), rates.end());
  return rates[rates.size() / 2];
}

// ---------------------------------------------------------------------------
// Report plumbing

struct EvalReport {
  double l1_fidelity = 0;
  double sliced_wasserstein = 0;
  std::optional<double> class_accuracy;  // conditional models only
  std::size_t params = 0;
  std::size_t flops = 0;
  NfeTable nfe;
  double samples_per_second = 0;

  std::string table() const {
    std::ostringstream o;
    o << std::setprecision(6);
    o << std::left << std::setw(22) << "metric" << "value\n";
    o << std::left << std::setw(22) << "l1_fidelity" << l1_fidelity << "\n";
    o << std::left << std::setw(22) << "sliced_wasserstein" << sliced_wasserstein << "\n";
    if (class_accuracy)
      o << std::left << std::setw(22) << "class_accuracy" << *class_accuracy << "\n";
    o << std::left << std::setw(22) << "params" << params << "\n";
    o << std::left << std::setw(22) << "flops" << flops << "\n";
    o << std::left << std::setw(22) << "nfe_offline" << nfe.offline << "\n";
    o << std::left << std::setw(22) << "nfe_progressive" << nfe.progressive << "\n";
    o << std::left << std::setw(22) << "nfe_consistency" << nfe.consistency << "\n";
    o << std::left << std::setw(22) << "samples_per_second" << samples_per_second << "\n";
    return o.str();
  }

  std::string csv() const {
    std::ostringstream o;
    o << std::setprecision(17);
    o << "metric,value\n";
    o << "l1_fidelity," << l1_fidelity << "\n";
    o << "sliced_wasserstein," << sliced_wasserstein << "\n";
    if (class_accuracy) o << "class_accuracy," << *class_accuracy << "\n";
    o << "params," << params << "\n";
    o << "flops," << flops << "\n";
    o << "nfe_offline," << nfe.offline << "\n";
    o << "nfe_progressive," << nfe.progressive << "\n";
    o << "nfe_consistency," << nfe.consistency << "\n";
    o << "samples_per_second," << samples_per_second << "\n";
    return o.str();
  }
};

// ---------------------------------------------------------------------------
// Image grids: P5 graymap for one channel, P6 pixmap for three. Values are
// mapped from [-1, 1] to bytes with clamping.

template <typename S>
void write_image_grid(const std::vector<std::vector<S>>& images, std::size_t h, std::size_t w,
                      std::size_t c, std::size_t cols, const std::string& path) {
  if (images.empty()) throw config_error("image grid: no images");
  if (c != 1 && c != 3) throw config_error("image grid: only 1 or 3 channels supported");
  if (!cols) throw config_error("image grid: cols must be at least 1");
  for (const auto& img : images)
    if (img.size() != h * w * c) throw config_error("image grid: image size mismatch");
  std::size_t rows = (images.size() + cols - 1) / cols;
  std::size_t gw = cols * w, gh = rows * h;
  std::vector<unsigned char> canvas(gh * gw * c, 0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::size_t r0 = (i / cols) * h, c0 = (i % cols) * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double v = (double(images[i][(y * w + x) * c + ch]) + 1.0) * 127.5;
          v = std::min(255.0, std::max(0.0, std::round(v)));
          canvas[((r0 + y) * gw + (c0 + x)) * c + ch] = (unsigned char)(v);
        }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write image grid: " + path);
  out << (c == 1 ? "P5" : "P6") << "\n" << gw << " " << gh << "\n255\n";
  write_bytes(out, canvas.data(), canvas.size());
  out.close();
  if (!out) throw io_error("short write: " + path);
}

}  // namespace eqdistill
