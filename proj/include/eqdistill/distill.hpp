#pragma once

// Distillation training: L1 regression from stored noise to the teacher's
// ODE endpoint, AdamW without schedule tricks, an EMA copy of the weights
// for evaluation, and resumable checkpoints.
//
// Determinism contract: a run is a pure function of (dataset, model config,
// train config, init seed). Batches are derived from the iteration counter
// alone (epoch permutations are re-derivable from the data seed), so resuming
// from a checkpoint continues the exact run, bit for bit.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "eqdistill/model.hpp"
#include "eqdistill/teacher.hpp"

namespace eqdistill {

template <typename S>
Tensor<S> l1_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  return mean_all(abs_t(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
struct AdamWState {
  std::vector<std::vector<S>> m, v;
  std::uint64_t step = 0;

  void init(const std::vector<Tensor<S>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), S(0));
      v.emplace_back(p.numel(), S(0));
    }
    step = 0;
  }
};

// One decoupled-weight-decay Adam step with bias correction. Every parameter
// must carry a finite gradient; anything else is a training failure.
template <typename S>
void adamw_step(std::vector<Tensor<S>>& params, AdamWState<S>& st, const AdamWConfig& cfg) {
  if (st.m.size() != params.size())
    throw config_error("adamw: optimizer state tracks " + std::to_string(st.m.size()) +
                       " tensors, model has " + std::to_string(params.size()));
  ++st.step;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad())
      throw divergence_error("adamw: parameter " + std::to_string(i) + " has no gradient");
    const auto& g = p.grad();
    auto& mi = st.m[i];
    auto& vi = st.v[i];
    S* pv = p.data();
    for (std::size_t t = 0; t < g.size(); ++t) {
      double gt = double(g[t]);
      if (!std::isfinite(gt))
        throw divergence_error("adamw: non-finite gradient in parameter " + std::to_string(i));
      double mt = cfg.beta1 * double(mi[t]) + (1.0 - cfg.beta1) * gt;
      double vt = cfg.beta2 * double(vi[t]) + (1.0 - cfg.beta2) * gt * gt;
      mi[t] = S(mt);
      vi[t] = S(vt);
      double update = (mt / bc1) / (std::sqrt(vt / bc2) + cfg.eps) + cfg.weight_decay * double(pv[t]);
      pv[t] = S(double(pv[t]) - cfg.lr * update);
    }
  }
}

// ---------------------------------------------------------------------------
// EMA: shadow weights tracked from initialisation, used for every evaluation.

template <typename S>
struct EmaState {
  std::vector<std::vector<S>> shadow;
  double momentum = 0.9999;

  void init(const std::vector<Tensor<S>>& params, double mom) {
    momentum = mom;
    shadow.clear();
    for (const auto& p : params) shadow.push_back(p.value());
  }

  void update(const std::vector<Tensor<S>>& params) {
    if (shadow.size() != params.size()) throw config_error("ema: state does not match model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const S* pv = params[i].data();
      auto& sh = shadow[i];
      for (std::size_t t = 0; t < sh.size(); ++t)
        sh[t] = S(momentum * double(sh[t]) + (1.0 - momentum) * double(pv[t]));
    }
  }
};

template <typename S>
ModelParams<S> clone_params(const ModelParams<S>& p) {
  ModelParams<S> q;
  for (const auto& e : p.entries) q.add(e.name, Tensor<S>(e.tensor.shape(), e.tensor.value()), e.learned);
  return q;
}

// A copy of the model with the EMA weights swapped into the learned slots.
template <typename S>
ModelParams<S> with_ema(const ModelParams<S>& p, const EmaState<S>& ema) {
  ModelParams<S> q = clone_params(p);
  std::size_t i = 0;
  for (auto& e : q.entries) {
    if (!e.learned) continue;
    if (i >= ema.shadow.size() || ema.shadow[i].size() != e.tensor.numel())
      throw config_error("ema: shadow does not match parameter " + e.name);
    e.tensor.mutable_value() = ema.shadow[i];
    ++i;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Train configuration and state

struct TrainConfig {
  std::size_t iterations = 20000;
  std::size_t batch = 128;
  AdamWConfig opt;
  double ema_momentum = 0.9999;
  std::uint64_t data_seed = 1;
  std::uint64_t init_seed = 2;
  std::size_t checkpoint_interval = 5000;  // 0 = final checkpoint only
  bool checkpointed_unroll = false;        // O(1) retained-activation mode
  std::string run_dir = ".";

  void validate() const {
    if (!iterations) throw config_error("train: iterations must be positive");
    if (!batch) throw config_error("train: batch must be positive");
    if (!(opt.lr > 0)) throw config_error("train: lr must be positive");
    if (!(ema_momentum >= 0 && ema_momentum < 1))
      throw config_error("train: ema momentum must lie in [0, 1)");
  }
};

template <typename S>
struct TrainState {
  std::uint64_t iteration = 0;
  ModelParams<S> params;
  AdamWState<S> opt;
  EmaState<S> ema;
};

// ---------------------------------------------------------------------------
// Checkpoints ("GETC")
//
//   magic "GETC" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u64 config_hash |
//   str canonical_config | u64 iteration | str rng_descriptor | u32 n_entries |
//   entries: str name | u32 rank | u64 dims[rank] | payload scalar[numel]
//
// The config hash is FNV-1a of the canonical config text stored right after
// it; entries cover learned parameters, both Adam moments, and the EMA
// shadow. Payloads are written in the run's own precision so a resumed f64
// run continues bit-exactly.

constexpr char kCkptMagic[4] = {'G', 'E', 'T', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename S>
constexpr std::uint8_t dtype_byte() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? 0 : 1;
}

namespace detail {

template <typename S>
void write_entry(std::ostream& out, const std::string& name, const Shape& shape,
                 const std::vector<S>& data) {
  write_str(out, name);
  write_pod<std::uint32_t>(out, std::uint32_t(shape.size()));
  for (auto d : shape) write_pod<std::uint64_t>(out, d);
  write_bytes(out, data.data(), data.size() * sizeof(S));
}

template <typename S>
std::pair<std::string, std::vector<S>> read_entry(std::istream& in) {
  std::string name = read_str(in);
  auto rank = read_pod<std::uint32_t>(in);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) numel *= read_pod<std::uint64_t>(in);
  std::vector<S> data(numel);
  read_bytes(in, data.data(), numel * sizeof(S));
  return {std::move(name), std::move(data)};
}

}  // namespace detail

template <typename S>
void save_checkpoint(const TrainState<S>& st, const ModelConfig& cfg, std::uint64_t data_seed,
                     const std::string& path) {
  std::string cfg_text = canonical(cfg);
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write checkpoint: " + tmp);
    write_bytes(out, kCkptMagic, 4);
    write_pod<std::uint32_t>(out, kCkptVersion);
    write_pod<std::uint8_t>(out, dtype_byte<S>());
    write_pod<std::uint64_t>(out, fnv1a64(cfg_text));
    write_str(out, cfg_text);
    write_pod<std::uint64_t>(out, st.iteration);
    write_str(out, "splitmix:data_seed=" + std::to_string(data_seed));

    std::vector<const ParamEntry<S>*> learned;
    for (const auto& e : st.params.entries)
      if (e.learned) learned.push_back(&e);
    write_pod<std::uint32_t>(out, std::uint32_t(learned.size() * 4));
    for (std::size_t i = 0; i < learned.size(); ++i) {
      const auto& e = *learned[i];
      detail::write_entry(out, "param/" + e.name, e.tensor.shape(), e.tensor.value());
      detail::write_entry(out, "adam_m/" + e.name, e.tensor.shape(), st.opt.m.at(i));
      detail::write_entry(out, "adam_v/" + e.name, e.tensor.shape(), st.opt.v.at(i));
      detail::write_entry(out, "ema/" + e.name, e.tensor.shape(), st.ema.shadow.at(i));
    }
    write_pod<std::uint64_t>(out, st.opt.step);
    out.close();
    if (!out) throw io_error("short write: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t iteration = 0;
  std::uint64_t data_seed = 0;
};

// Loads a checkpoint into a fresh state. When expected is given, its
// canonical text must match the stored one; the error shows both sides.
template <typename S>
TrainState<S> load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected,
                              CheckpointInfo* info_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path);
  char magic[4];
  read_bytes(in, magic, 4);
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw io_error("not a checkpoint file: " + path);
  auto version = read_pod<std::uint32_t>(in);
  if (version != kCkptVersion)
    throw io_error("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  auto dtype = read_pod<std::uint8_t>(in);
  if (dtype != dtype_byte<S>())
    throw config_error(std::string("checkpoint precision is ") + (dtype ? "f64" : "f32") +
                       ", run wants " + (dtype_byte<S>() ? "f64" : "f32"));
  auto stored_hash = read_pod<std::uint64_t>(in);
  std::string cfg_text = read_str(in);
  if (stored_hash != fnv1a64(cfg_text)) throw io_error("checkpoint config hash mismatch: " + path);
  ModelConfig cfg = parse_canonical(cfg_text);
  if (expected) {
    std::string want = canonical(*expected);
    if (want != cfg_text)
      throw config_error("config mismatch: checkpoint built for '" + cfg_text + "', run configured as '" +
                         want + "'");
  }

  TrainState<S> st;
  st.iteration = read_pod<std::uint64_t>(in);
  std::string rng = read_str(in);
  std::uint64_t data_seed = 0;
  {
    auto pos = rng.find("data_seed=");
    if (rng.rfind("splitmix:", 0) != 0 || pos == std::string::npos)
      throw io_error("unrecognised random-stream state '" + rng + "': " + path);
    data_seed = std::stoull(rng.substr(pos + 10));
  }

  // Rebuild the skeleton (derived tensors included), then overwrite the
  // learned slots from the file. Init seed is irrelevant: every learned value
  // comes from the checkpoint.
  st.params = init_params<S>(cfg, 0);
  auto learned = st.params.learned();
  st.opt.init(learned);
  st.ema.shadow.assign(learned.size(), {});

  std::vector<std::string> learned_names;
  for (const auto& e : st.params.entries)
    if (e.learned) learned_names.push_back(e.name);

  auto n_entries = read_pod<std::uint32_t>(in);
  if (n_entries != learned_names.size() * 4)
    throw io_error("checkpoint holds " + std::to_string(n_entries) + " entries, expected " +
                   std::to_string(learned_names.size() * 4) + ": " + path);
  for (std::size_t i = 0; i < learned_names.size(); ++i) {
    for (const std::string kind : {"param/", "adam_m/", "adam_v/", "ema/"}) {
      auto [name, data] = detail::read_entry<S>(in);
      std::string want = kind + learned_names[i];
      if (name != want)
        throw io_error("checkpoint entry '" + name + "' where '" + want + "' was expected: " + path);
      auto& slot = st.params.at(learned_names[i]);
      if (data.size() != slot.numel())
        throw io_error("checkpoint entry '" + name + "' has wrong size: " + path);
      if (kind == "param/")
        slot.mutable_value() = std::move(data);
      else if (kind == "adam_m/")
        st.opt.m[i] = std::move(data);
      else if (kind == "adam_v/")
        st.opt.v[i] = std::move(data);
      else
        st.ema.shadow[i] = std::move(data);
    }
  }
  st.opt.step = read_pod<std::uint64_t>(in);
  if (info_out) *info_out = {cfg, st.iteration, data_seed};
  return st;
}

// ---------------------------------------------------------------------------
// Batch extraction

namespace detail {

// Stacks the chosen records into [B*N x P*P*C] noise and target matrices
// (and labels when conditional), using the same patch permutation as the
// model's patchify.
template <typename S>
void build_batch(const PairDataset& data, const std::vector<std::size_t>& idx, std::size_t patch,
                 Tensor<S>& noise_out, Tensor<S>& target_out, std::vector<std::uint32_t>& labels_out,
                 bool want_labels) {
  std::size_t h = data.height, w = data.width, c = data.channels;
  std::size_t n = (h / patch) * (w / patch), pd = patch * patch * c;
  noise_out = Tensor<S>({idx.size() * n, pd});
  target_out = Tensor<S>({idx.size() * n, pd});
  labels_out.clear();
  std::vector<S> tmp(h * w * c);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    for (int which = 0; which < 2; ++which) {
      const float* src = which ? data.image(idx[b]) : data.noise(idx[b]);
      for (std::size_t t = 0; t < tmp.size(); ++t) tmp[t] = S(src[t]);
      Tensor<S> img({h, w, c}, tmp);
      Tensor<S> rows = patchify(img, patch);
      std::memcpy((which ? target_out : noise_out).data() + b * n * pd, rows.data(),
                  n * pd * sizeof(S));
    }
    if (want_labels) labels_out.push_back(data.labels[idx[b]]);
  }
}

}  // namespace detail

// Record index stream: global position g covers epoch g / count at offset
// g % count of that epoch's permutation. Pure function of (data_seed, g).
class BatchSchedule {
 public:
  BatchSchedule(std::size_t count, std::uint64_t data_seed)
      : count_(count), data_seed_(data_seed) {
    if (!count_) throw config_error("batch schedule: empty dataset");
  }

  std::size_t index_at(std::uint64_t g) {
    std::uint64_t epoch = g / count_;
    if (epoch != cached_epoch_ || perm_.empty()) {
      perm_ = permutation(count_, mix64(data_seed_, epoch));
      cached_epoch_ = epoch;
    }
    return perm_[g % count_];
  }

 private:
  std::size_t count_;
  std::uint64_t data_seed_;
  std::uint64_t cached_epoch_ = ~0ull;
  std::vector<std::uint32_t> perm_;
};

// ---------------------------------------------------------------------------
// Training loop

template <typename S>
struct IterationLog {
  std::uint64_t iteration;
  double loss;
  double grad_norm;
};

template <typename S>
void check_data_matches_model(const PairDataset& data, const ModelConfig& cfg) {
  std::size_t h, w, c, classes;
  if (const auto* g = std::get_if<GETConfig>(&cfg)) {
    h = g->height;
    w = g->width;
    c = g->channels;
    classes = g->n_classes;
  } else {
    const auto& v = std::get<ViTConfig>(cfg);
    h = v.height;
    w = v.width;
    c = v.channels;
    classes = v.n_classes;
  }
  if (data.height != h || data.width != w || data.channels != c)
    throw config_error("dataset is " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                       "x" + std::to_string(data.channels) + ", model wants " + std::to_string(h) + "x" +
                       std::to_string(w) + "x" + std::to_string(c));
  if ((classes > 0) != data.conditional)
    throw config_error(classes > 0 ? "conditional model but unconditional dataset"
                                   : "unconditional model but conditional dataset");
  if (classes > 0)
    for (auto l : data.labels)
      if (l >= classes)
        throw config_error("dataset label " + std::to_string(l) + " out of range for " +
                           std::to_string(classes) + " classes");
}

// Runs (or resumes) the distillation and leaves checkpoints plus metrics.csv
// in run_dir. Returns the final state. The per-iteration log rows are also
// handed to `progress` when given.
template <typename S>
TrainState<S> train(const PairDataset& data, const ModelConfig& cfg, const TrainConfig& tcfg,
                    const std::optional<std::string>& resume_path = {},
                    const std::function<void(const IterationLog<S>&)>& progress = nullptr) {
  tcfg.validate();
  check_data_matches_model<S>(data, cfg);
  std::size_t patch = std::holds_alternative<GETConfig>(cfg) ? std::get<GETConfig>(cfg).patch
                                                             : std::get<ViTConfig>(cfg).patch;
  bool conditional = data.conditional;

  TrainState<S> st;
  if (resume_path) {
    CheckpointInfo info;
    st = load_checkpoint<S>(*resume_path, cfg, &info);
    if (info.data_seed != tcfg.data_seed)
      throw config_error("checkpoint was trained with data_seed " + std::to_string(info.data_seed) +
                         ", run wants " + std::to_string(tcfg.data_seed));
    if (st.iteration > tcfg.iterations)
      throw config_error("checkpoint is at iteration " + std::to_string(st.iteration) +
                         ", past the requested " + std::to_string(tcfg.iterations));
    st.ema.momentum = tcfg.ema_momentum;
  } else {
    st.params = init_params<S>(cfg, tcfg.init_seed);
    auto learned = st.params.learned();
    st.opt.init(learned);
    st.ema.init(learned, tcfg.ema_momentum);
  }
  auto learned = st.params.learned();
  std::vector<std::string> learned_names;
  for (const auto& e : st.params.entries)
    if (e.learned) learned_names.push_back(e.name);

  std::filesystem::create_directories(tcfg.run_dir);
  std::string metrics_path = tcfg.run_dir + "/metrics.csv";
  bool fresh_log = !std::filesystem::exists(metrics_path) || !resume_path;
  std::ofstream metrics(metrics_path, fresh_log ? std::ios::trunc : std::ios::app);
  if (!metrics) throw io_error("cannot write metrics log: " + metrics_path);
  if (fresh_log) metrics << "iteration,loss,grad_norm,wallclock_seconds\n";

  BatchSchedule schedule(data.count(), tcfg.data_seed);
  double t0 = now_seconds();
  std::vector<std::size_t> idx(tcfg.batch);
  Tensor<S> noise, target;
  std::vector<std::uint32_t> labels;

  auto save_at = [&](const std::string& name) {
    save_checkpoint(st, cfg, tcfg.data_seed, tcfg.run_dir + "/" + name);
  };

  while (st.iteration < tcfg.iterations) {
    std::uint64_t it = st.iteration;
    for (std::size_t j = 0; j < tcfg.batch; ++j)
      idx[j] = schedule.index_at(it * std::uint64_t(tcfg.batch) + j);
    detail::build_batch(data, idx, patch, noise, target, labels, conditional);

    double loss_val, grad_norm;
    {
      Tape<S> tape;
      Tensor<S> pred = forward_batched(st.params, cfg, noise, labels, tcfg.checkpointed_unroll);
      Tensor<S> loss = l1_loss(pred, target);
      loss_val = double(loss.item());
      if (!std::isfinite(loss_val))
        throw divergence_error("training diverged: non-finite loss at iteration " + std::to_string(it));
      tape.backward(loss);
    }
    long double gn2 = 0;
    for (std::size_t i = 0; i < learned.size(); ++i) {
      if (!learned[i].has_grad())
        throw divergence_error("no gradient reached parameter " + learned_names[i]);
      for (S g : learned[i].grad()) {
        if (!std::isfinite(double(g)))
          throw divergence_error("training diverged: non-finite gradient in " + learned_names[i] +
                                 " at iteration " + std::to_string(it));
        gn2 += (long double)(g) * g;
      }
    }
    grad_norm = std::sqrt(double(gn2));

    adamw_step(learned, st.opt, tcfg.opt);
    st.ema.update(learned);
    st.params.zero_grads();
    st.iteration = it + 1;

    metrics << st.iteration << "," << loss_val << "," << grad_norm << ","
            << (now_seconds() - t0) << "\n";
    if (progress) progress({st.iteration, loss_val, grad_norm});

    if (tcfg.checkpoint_interval && st.iteration % tcfg.checkpoint_interval == 0 &&
        st.iteration < tcfg.iterations) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "ckpt_%08llu.getc", (unsigned long long)st.iteration);
      save_at(buf);
    }
  }
  metrics.flush();
  if (!metrics) throw io_error("short write: " + metrics_path);
  save_at("final.getc");
  return st;
}

}  // namespace eqdistill
