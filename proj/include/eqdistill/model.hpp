#pragma once

// The two architectures: a weight-tied equilibrium transformer driven by an
// injection transformer (the distillation student), and a plain ViT baseline.
//
// Layout conventions. Tokens from a whole batch are stacked into one
// [B*N x D] matrix so every linear layer is a single GEMM; attention is
// confined to each sample's N-row block by the fused multihead_attention op.
// Injection follows the additive scheme: the equilibrium block computes
// q,k,v = LN(z) W_qkv + u, where u carries the injected tokens (and the class
// embedding when conditional). W_qkv has no bias; u plays that role.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "eqdistill/fixed_point.hpp"
#include "eqdistill/tensor.hpp"

namespace eqdistill {

template <typename S>
constexpr S kLnEps = S(1e-6);

// FFN expansion of the injection transformer and of ViT blocks. Only the
// equilibrium FFN width is a tunable.
constexpr std::size_t kInjExpansion = 4;

struct GETConfig {
  std::size_t height = 8, width = 8, channels = 1;
  std::size_t patch = 2;
  std::size_t dim = 64;               // token width D
  std::size_t injection_depth = 2;    // blocks in the injection transformer
  std::size_t equilibrium_depth = 2;  // weight-tied blocks per solver step
  std::size_t expansion = 4;          // equilibrium FFN multiplier
  std::size_t heads = 0;              // 0 resolves to dim/64, floored at 1
  std::size_t n_classes = 0;          // 0 = unconditional
  std::size_t unroll_steps = 6;       // K applications of the equilibrium stack

  std::size_t tokens() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t head_count() const { return heads ? heads : std::max<std::size_t>(1, dim / 64); }

  void validate() const {
    if (!height || !width || !channels || !patch || !dim)
      throw config_error("get: height, width, channels, patch and dim must be positive");
    if (height % patch || width % patch)
      throw config_error("get: patch " + std::to_string(patch) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
    if (dim % 2) throw config_error("get: dim must be even for the sinusoidal position table");
    if (dim % head_count())
      throw config_error("get: dim " + std::to_string(dim) + " not divisible by " +
                         std::to_string(head_count()) + " heads");
    if (!equilibrium_depth) throw config_error("get: equilibrium_depth must be at least 1");
    if (!expansion) throw config_error("get: expansion must be at least 1");
    if (!unroll_steps) throw config_error("get: unroll_steps must be at least 1");
  }
};

struct ViTConfig {
  std::size_t height = 8, width = 8, channels = 1;
  std::size_t patch = 2;
  std::size_t dim = 64;
  std::size_t depth = 4;  // sequential blocks, no weight tying
  std::size_t expansion = 4;
  std::size_t heads = 0;
  std::size_t n_classes = 0;

  std::size_t tokens() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t head_count() const { return heads ? heads : std::max<std::size_t>(1, dim / 64); }

  void validate() const {
    if (!height || !width || !channels || !patch || !dim)
      throw config_error("vit: height, width, channels, patch and dim must be positive");
    if (height % patch || width % patch)
      throw config_error("vit: patch " + std::to_string(patch) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
    if (dim % 2) throw config_error("vit: dim must be even for the sinusoidal position table");
    if (dim % head_count())
      throw config_error("vit: dim " + std::to_string(dim) + " not divisible by " +
                         std::to_string(head_count()) + " heads");
    if (!depth) throw config_error("vit: depth must be at least 1");
    if (!expansion) throw config_error("vit: expansion must be at least 1");
  }
};

using ModelConfig = std::variant<GETConfig, ViTConfig>;

// ---------------------------------------------------------------------------
// Parameter registry: named tensors in a fixed order. The order doubles as
// the RNG consumption order at init and the serialisation order in
// checkpoints, so it must stay stable.

template <typename S>
struct ParamEntry {
  std::string name;
  Tensor<S> tensor;
  bool learned;
};

template <typename S>
struct ModelParams {
  std::vector<ParamEntry<S>> entries;
  std::unordered_map<std::string, std::size_t> index;

  void add(std::string name, Tensor<S> t, bool learned) {
    if (index.count(name)) throw config_error("duplicate parameter: " + name);
    t.set_requires_grad(learned);
    index.emplace(name, entries.size());
    entries.push_back({std::move(name), std::move(t), learned});
  }

  Tensor<S>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw config_error("unknown parameter: " + name);
    return entries[it->second].tensor;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw config_error("unknown parameter: " + name);
    return entries[it->second].tensor;
  }

  std::vector<Tensor<S>> learned() const {
    std::vector<Tensor<S>> out;
    for (const auto& e : entries)
      if (e.learned) out.push_back(e.tensor);
    return out;
  }

  std::size_t learned_elems() const {
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.learned) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries) e.tensor.zero_grad();
  }
};

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

template <typename S>
Tensor<S> trunc_normal_tensor(Shape shape, GaussianStream& rng, double std_dev = 0.02) {
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = S(rng.next_truncated(std_dev));
  return Tensor<S>(std::move(shape), std::move(v));
}

template <typename S>
void add_block_params(ModelParams<S>& p, const std::string& prefix, std::size_t d,
                      std::size_t expansion, GaussianStream& rng) {
  std::size_t e = expansion * d;
  p.add(prefix + ".ln1.gamma", Tensor<S>::full({d}, S(1)), true);
  p.add(prefix + ".ln1.beta", Tensor<S>::zeros({d}), true);
  p.add(prefix + ".attn.w_qkv", trunc_normal_tensor<S>({d, 3 * d}, rng), true);
  p.add(prefix + ".attn.w_out", trunc_normal_tensor<S>({d, d}, rng), true);
  p.add(prefix + ".attn.b_out", Tensor<S>::zeros({d}), true);
  p.add(prefix + ".ln2.gamma", Tensor<S>::full({d}, S(1)), true);
  p.add(prefix + ".ln2.beta", Tensor<S>::zeros({d}), true);
  p.add(prefix + ".ffn.w1", trunc_normal_tensor<S>({d, e}, rng), true);
  p.add(prefix + ".ffn.b1", Tensor<S>::zeros({e}), true);
  p.add(prefix + ".ffn.w2", trunc_normal_tensor<S>({e, d}, rng), true);
  p.add(prefix + ".ffn.b2", Tensor<S>::zeros({d}), true);
}

}  // namespace detail

// Interleaved sinusoidal position table [N x D]: even columns sine, odd
// columns cosine, wavelengths geometric in 10000^(2i/D). Row 0 alternates
// 0, 1, 0, 1. Fixed, never trained.
template <typename S>
Tensor<S> sinusoidal_pos_encoding(std::size_t n_tokens, std::size_t dim) {
  if (!n_tokens || !dim) throw config_error("position table: dims must be positive");
  if (dim % 2) throw config_error("position table: dim must be even");
  std::vector<S> v(n_tokens * dim);
  for (std::size_t p = 0; p < n_tokens; ++p)
    for (std::size_t j = 0; j < dim; ++j) {
      double angle = double(p) / std::pow(10000.0, double(2 * (j / 2)) / double(dim));
      v[p * dim + j] = S(j % 2 ? std::cos(angle) : std::sin(angle));
    }
  return Tensor<S>({n_tokens, dim}, std::move(v));
}

// Weights are truncated normal (std 0.02, clipped at two sigma) from a single
// stream consumed in registry order; biases and the decoder start at zero,
// layer norms at identity. The zero decoder makes the untrained model emit
// exactly zero, which the distillation loss relies on as its baseline.
template <typename S>
ModelParams<S> init_get_params(const GETConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  GaussianStream rng(mix64(seed, 0x6765745f696e6974ull));
  ModelParams<S> p;
  std::size_t d = cfg.dim, pd = cfg.patch_dim();
  p.add("embed.weight", detail::trunc_normal_tensor<S>({pd, d}, rng), true);
  p.add("embed.bias", Tensor<S>::zeros({d}), true);
  p.add("pos", sinusoidal_pos_encoding<S>(cfg.tokens(), d), false);
  for (std::size_t i = 0; i < cfg.injection_depth; ++i)
    detail::add_block_params(p, "inj." + std::to_string(i), d, kInjExpansion, rng);
  for (std::size_t l = 0; l < cfg.equilibrium_depth; ++l) {
    p.add("inj_out." + std::to_string(l) + ".weight", detail::trunc_normal_tensor<S>({d, 3 * d}, rng),
          true);
    p.add("inj_out." + std::to_string(l) + ".bias", Tensor<S>::zeros({3 * d}), true);
  }
  for (std::size_t l = 0; l < cfg.equilibrium_depth; ++l)
    detail::add_block_params(p, "eq." + std::to_string(l), d, cfg.expansion, rng);
  if (cfg.n_classes)
    p.add("class_table", detail::trunc_normal_tensor<S>({cfg.n_classes, 3 * d}, rng), true);
  p.add("final_ln.gamma", Tensor<S>::full({d}, S(1)), true);
  p.add("final_ln.beta", Tensor<S>::zeros({d}), true);
  p.add("decoder.weight", Tensor<S>::zeros({d, pd}), true);
  p.add("decoder.bias", Tensor<S>::zeros({pd}), true);
  return p;
}

template <typename S>
ModelParams<S> init_vit_params(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  GaussianStream rng(mix64(seed, 0x7669745f696e6974ull));
  ModelParams<S> p;
  std::size_t d = cfg.dim, pd = cfg.patch_dim();
  p.add("embed.weight", detail::trunc_normal_tensor<S>({pd, d}, rng), true);
  p.add("embed.bias", Tensor<S>::zeros({d}), true);
  p.add("pos", sinusoidal_pos_encoding<S>(cfg.tokens(), d), false);
  for (std::size_t i = 0; i < cfg.depth; ++i)
    detail::add_block_params(p, "blk." + std::to_string(i), d, cfg.expansion, rng);
  if (cfg.n_classes)
    p.add("class_table", detail::trunc_normal_tensor<S>({cfg.n_classes, 3 * d}, rng), true);
  p.add("final_ln.gamma", Tensor<S>::full({d}, S(1)), true);
  p.add("final_ln.beta", Tensor<S>::zeros({d}), true);
  p.add("decoder.weight", Tensor<S>::zeros({d, pd}), true);
  p.add("decoder.bias", Tensor<S>::zeros({pd}), true);
  return p;
}

// ---------------------------------------------------------------------------
// Fused multi-head attention
//
// qkv is [B*N x 3D] with the q, k, v slabs side by side (exactly what one
// GEMM against W_qkv plus the additive injection produces). Attention mixes
// rows only within each sample's N-token block. One tape node covers every
// sample and head; backward re-derives the standard attention gradients from
// the saved softmax probabilities.

template <typename S>
Tensor<S> multihead_attention(const Tensor<S>& qkv, std::size_t n_tokens, std::size_t heads) {
  detail::require_rank2(qkv, "multihead_attention");
  std::size_t rows = qkv.shape()[0], c3 = qkv.shape()[1];
  if (!n_tokens || rows % n_tokens)
    throw shape_error("multihead_attention: " + std::to_string(rows) + " rows not a multiple of " +
                      std::to_string(n_tokens) + " tokens");
  if (c3 % 3) throw shape_error("multihead_attention: width " + std::to_string(c3) + " not 3*D");
  std::size_t d = c3 / 3;
  if (!heads || d % heads)
    throw shape_error("multihead_attention: D " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  std::size_t batch = rows / n_tokens, dh = d / heads, n = n_tokens;
  S scl = S(1) / S(std::sqrt(double(dh)));

  using StrideT = Eigen::OuterStride<>;
  using SMap = Eigen::Map<EMat<S>, 0, StrideT>;
  using SCMap = Eigen::Map<const EMat<S>, 0, StrideT>;

  Tensor<S> out({rows, d});
  auto probs = std::make_shared<std::vector<S>>(batch * heads * n * n);
  EMat<S> scores(n, n);
  for (std::size_t b = 0; b < batch; ++b) {
    const S* base = qkv.data() + b * n * c3;
    for (std::size_t h = 0; h < heads; ++h) {
      SCMap Q(base + h * dh, n, dh, StrideT(c3));
      SCMap K(base + d + h * dh, n, dh, StrideT(c3));
      SCMap V(base + 2 * d + h * dh, n, dh, StrideT(c3));
      scores.noalias() = Q * K.transpose();
      scores *= scl;
      for (std::size_t i = 0; i < n; ++i) {
        S* row = scores.data() + i * n;
        S m = row[0];
        for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        S z = 0;
        for (std::size_t j = 0; j < n; ++j) {
          row[j] = std::exp(row[j] - m);
          z += row[j];
        }
        S inv = S(1) / z;
        for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
      }
      std::memcpy(probs->data() + (b * heads + h) * n * n, scores.data(), n * n * sizeof(S));
      SMap O(out.data() + b * n * d + h * dh, n, dh, StrideT(d));
      O.noalias() = scores * V;
    }
  }
  check_finite(out, "multihead_attention");

  record_node<S>(
      {qkv.impl()}, out, qkv.numel() + out.numel() + probs->size(),
      [qi = qkv.impl(), oi = out.impl(), probs, batch, heads, n, d, dh, c3, scl] {
        if (!qi->requires_grad) return;
        ensure_grad(*qi);
        EMat<S> dp(n, n), ds(n, n), tmp(n, dh);
        for (std::size_t b = 0; b < batch; ++b) {
          const S* base = qi->value.data() + b * n * c3;
          S* gbase = qi->grad.data() + b * n * c3;
          for (std::size_t h = 0; h < heads; ++h) {
            SCMap Q(base + h * dh, n, dh, StrideT(c3));
            SCMap K(base + d + h * dh, n, dh, StrideT(c3));
            SCMap V(base + 2 * d + h * dh, n, dh, StrideT(c3));
            SCMap dO(oi->grad.data() + b * n * d + h * dh, n, dh, StrideT(d));
            ECMap<S> P(probs->data() + (b * heads + h) * n * n, n, n);
            SMap dQ(gbase + h * dh, n, dh, StrideT(c3));
            SMap dK(gbase + d + h * dh, n, dh, StrideT(c3));
            SMap dV(gbase + 2 * d + h * dh, n, dh, StrideT(c3));
            dV.noalias() += P.transpose() * dO;
            dp.noalias() = dO * V.transpose();
            for (std::size_t i = 0; i < n; ++i) {
              S dot = 0;
              for (std::size_t j = 0; j < n; ++j) dot += dp(i, j) * P(i, j);
              for (std::size_t j = 0; j < n; ++j) ds(i, j) = P(i, j) * (dp(i, j) - dot);
            }
            tmp.noalias() = ds * K;
            dQ.noalias() += scl * tmp;
            tmp.noalias() = ds.transpose() * Q;
            dK.noalias() += scl * tmp;
          }
        }
      });
  return out;
}

// Full attention sublayer with additive injection: q,k,v = x W_qkv + u, then
// multi-head mixing and the output projection. u may be undefined (vanilla
// attention), one row (broadcast), or one row per token.
template <typename S>
Tensor<S> attention_with_injection(const Tensor<S>& x, const Tensor<S>& u, const Tensor<S>& w_qkv,
                                   const Tensor<S>& w_out, const Tensor<S>& b_out,
                                   std::size_t n_tokens, std::size_t heads) {
  Tensor<S> qkv = matmul(x, w_qkv);
  if (u.defined()) {
    if (u.rank() == 2 && u.shape()[0] == qkv.shape()[0])
      qkv = add(qkv, u);
    else
      qkv = add_row(qkv, u);
  }
  Tensor<S> mixed = multihead_attention(qkv, n_tokens, heads);
  return add_row(matmul(mixed, w_out), b_out);
}

// ---------------------------------------------------------------------------
// Blocks and forwards

template <typename S>
struct BlockRefs {
  Tensor<S> ln1_g, ln1_b, w_qkv, w_out, b_out, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <typename S>
BlockRefs<S> block_refs(const ModelParams<S>& p, const std::string& prefix) {
  return {p.at(prefix + ".ln1.gamma"), p.at(prefix + ".ln1.beta"), p.at(prefix + ".attn.w_qkv"),
          p.at(prefix + ".attn.w_out"), p.at(prefix + ".attn.b_out"), p.at(prefix + ".ln2.gamma"),
          p.at(prefix + ".ln2.beta"),  p.at(prefix + ".ffn.w1"),     p.at(prefix + ".ffn.b1"),
          p.at(prefix + ".ffn.w2"),    p.at(prefix + ".ffn.b2")};
}

// Pre-LN block: z + Attn(LN(z), u), then + FFN(LN(.)).
template <typename S>
Tensor<S> transformer_block(const Tensor<S>& z, const Tensor<S>& u, const BlockRefs<S>& p,
                            std::size_t n_tokens, std::size_t heads) {
  Tensor<S> h = layer_norm(z, p.ln1_g, p.ln1_b, kLnEps<S>);
  Tensor<S> attn = attention_with_injection(h, u, p.w_qkv, p.w_out, p.b_out, n_tokens, heads);
  Tensor<S> z1 = add(z, attn);
  Tensor<S> f = layer_norm(z1, p.ln2_g, p.ln2_b, kLnEps<S>);
  f = add_row(matmul(f, p.w1), p.b1);
  f = gelu(f);
  f = add_row(matmul(f, p.w2), p.b2);
  return add(z1, f);
}

// Injection pass: runs the injection blocks on the embedded tokens h with the
// class injection c (undefined when unconditional), then one linear D -> 3D
// per equilibrium block. Returns the injection tensors n_l; the forward adds
// c on top of each to form the u_l fed to the equilibrium blocks.
template <typename S>
std::vector<Tensor<S>> injection_transform(const Tensor<S>& h, const Tensor<S>& c,
                                           const ModelParams<S>& params, const GETConfig& cfg) {
  cfg.validate();
  if (c.defined() && !cfg.n_classes)
    throw config_error("class injection supplied to an unconditional model");
  std::size_t n = cfg.tokens(), heads = cfg.head_count();
  Tensor<S> x = h;
  for (std::size_t i = 0; i < cfg.injection_depth; ++i)
    x = transformer_block(x, c, block_refs(params, "inj." + std::to_string(i)), n, heads);
  std::vector<Tensor<S>> out;
  out.reserve(cfg.equilibrium_depth);
  for (std::size_t l = 0; l < cfg.equilibrium_depth; ++l)
    out.push_back(add_row(matmul(x, params.at("inj_out." + std::to_string(l) + ".weight")),
                          params.at("inj_out." + std::to_string(l) + ".bias")));
  return out;
}

namespace detail {

// Replicates an [N x D] table batch times into [B*N x D]; value only, used
// for the (non-learned) position table.
template <typename S>
Tensor<S> tile_rows(const Tensor<S>& t, std::size_t reps) {
  std::size_t n = t.shape().at(0), d = t.shape().at(1);
  Tensor<S> out({reps * n, d});
  for (std::size_t b = 0; b < reps; ++b)
    std::memcpy(out.data() + b * n * d, t.data(), n * d * sizeof(S));
  return out;
}

template <typename S>
Tensor<S> embed_tokens(const Tensor<S>& patches, const ModelParams<S>& p, std::size_t batch) {
  Tensor<S> h = add_row(matmul(patches, p.at("embed.weight")), p.at("embed.bias"));
  return add(h, tile_rows(p.at("pos"), batch));
}

// Per-sample class rows expanded to one row per token, [B*N x 3D].
template <typename S>
Tensor<S> class_injection(const ModelParams<S>& p, const std::vector<std::uint32_t>& labels,
                          std::size_t n_tokens) {
  std::vector<std::uint32_t> ids;
  ids.reserve(labels.size() * n_tokens);
  for (auto l : labels)
    for (std::size_t t = 0; t < n_tokens; ++t) ids.push_back(l);
  return gather_rows(p.at("class_table"), ids);
}

template <typename S>
void check_labels(std::size_t n_classes, const std::vector<std::uint32_t>& labels,
                  std::size_t batch) {
  if (n_classes == 0) {
    if (!labels.empty()) throw config_error("labels supplied to an unconditional model");
    return;
  }
  if (labels.size() != batch)
    throw config_error("conditional model needs one label per sample: got " +
                       std::to_string(labels.size()) + " for batch " + std::to_string(batch));
  for (auto l : labels)
    if (l >= n_classes)
      throw config_error("label " + std::to_string(l) + " out of range for " +
                         std::to_string(n_classes) + " classes");
}

template <typename S>
Tensor<S> decode_tokens(const Tensor<S>& z, const ModelParams<S>& p) {
  Tensor<S> o = layer_norm(z, p.at("final_ln.gamma"), p.at("final_ln.beta"), kLnEps<S>);
  return add_row(matmul(o, p.at("decoder.weight")), p.at("decoder.bias"));
}

}  // namespace detail

// Batched student forward in patch space: patches is [B*N x P*P*C] stacked
// noise, the result is the predicted clean image in the same layout. The
// K-step equilibrium unroll optionally runs as one checkpoint segment.
template <typename S>
Tensor<S> get_forward_batched(const ModelParams<S>& params, const GETConfig& cfg,
                              const Tensor<S>& patches, const std::vector<std::uint32_t>& labels,
                              bool checkpointed_unroll = false) {
  cfg.validate();
  std::size_t n = cfg.tokens(), d = cfg.dim;
  if (patches.rank() != 2 || patches.shape()[1] != cfg.patch_dim() || patches.shape()[0] % n)
    throw shape_error("get_forward: patches " + shape_str(patches.shape()) + " for " +
                      std::to_string(n) + " tokens of " + std::to_string(cfg.patch_dim()));
  std::size_t batch = patches.shape()[0] / n;
  detail::check_labels<S>(cfg.n_classes, labels, batch);
  std::size_t heads = cfg.head_count();

  Tensor<S> h = detail::embed_tokens(patches, params, batch);
  Tensor<S> c;
  if (cfg.n_classes) c = detail::class_injection(params, labels, n);

  // One injection per equilibrium block, fixed across solver steps.
  std::vector<Tensor<S>> nl = injection_transform(h, c, params, cfg);
  std::vector<Tensor<S>> u(cfg.equilibrium_depth);
  std::vector<BlockRefs<S>> blocks(cfg.equilibrium_depth);
  for (std::size_t l = 0; l < cfg.equilibrium_depth; ++l) {
    u[l] = c.defined() ? add(nl[l], c) : nl[l];
    blocks[l] = block_refs(params, "eq." + std::to_string(l));
  }

  auto f = [u, blocks, n, heads](const Tensor<S>& z) {
    Tensor<S> zz = z;
    for (std::size_t l = 0; l < u.size(); ++l) zz = transformer_block(zz, u[l], blocks[l], n, heads);
    return zz;
  };
  Tensor<S> z0 = Tensor<S>::zeros({batch * n, d});
  Tensor<S> z = unrolled_forward<S>(f, z0, cfg.unroll_steps, checkpointed_unroll);
  return detail::decode_tokens(z, params);
}

template <typename S>
Tensor<S> vit_forward_batched(const ModelParams<S>& params, const ViTConfig& cfg,
                              const Tensor<S>& patches, const std::vector<std::uint32_t>& labels) {
  cfg.validate();
  std::size_t n = cfg.tokens();
  if (patches.rank() != 2 || patches.shape()[1] != cfg.patch_dim() || patches.shape()[0] % n)
    throw shape_error("vit_forward: patches " + shape_str(patches.shape()) + " for " +
                      std::to_string(n) + " tokens of " + std::to_string(cfg.patch_dim()));
  std::size_t batch = patches.shape()[0] / n;
  detail::check_labels<S>(cfg.n_classes, labels, batch);
  std::size_t heads = cfg.head_count();

  Tensor<S> h = detail::embed_tokens(patches, params, batch);
  Tensor<S> c;
  if (cfg.n_classes) c = detail::class_injection(params, labels, n);
  for (std::size_t i = 0; i < cfg.depth; ++i)
    h = transformer_block(h, c, block_refs(params, "blk." + std::to_string(i)), n, heads);
  return detail::decode_tokens(h, params);
}

template <typename S>
Tensor<S> forward_batched(const ModelParams<S>& params, const ModelConfig& cfg,
                          const Tensor<S>& patches, const std::vector<std::uint32_t>& labels,
                          bool checkpointed_unroll = false) {
  if (const auto* g = std::get_if<GETConfig>(&cfg))
    return get_forward_batched(params, *g, patches, labels, checkpointed_unroll);
  return vit_forward_batched(params, std::get<ViTConfig>(cfg), patches, labels);
}

// Single-image forward: {H,W,C} noise in, {H,W,C} prediction out.
template <typename S>
Tensor<S> get_forward(const Tensor<S>& noise, std::optional<std::uint32_t> label,
                      const ModelParams<S>& params, const GETConfig& cfg,
                      bool checkpointed_unroll = false) {
  Tensor<S> patches = patchify(noise, cfg.patch);
  std::vector<std::uint32_t> labels;
  if (label) labels.push_back(*label);
  Tensor<S> out = get_forward_batched(params, cfg, patches, labels, checkpointed_unroll);
  return unpatchify(out, cfg.height, cfg.width, cfg.channels, cfg.patch);
}

template <typename S>
Tensor<S> vit_forward(const Tensor<S>& noise, std::optional<std::uint32_t> label,
                      const ModelParams<S>& params, const ViTConfig& cfg) {
  Tensor<S> patches = patchify(noise, cfg.patch);
  std::vector<std::uint32_t> labels;
  if (label) labels.push_back(*label);
  Tensor<S> out = vit_forward_batched(params, cfg, patches, labels);
  return unpatchify(out, cfg.height, cfg.width, cfg.channels, cfg.patch);
}

template <typename S>
Tensor<S> model_forward(const Tensor<S>& noise, std::optional<std::uint32_t> label,
                        const ModelParams<S>& params, const ModelConfig& cfg) {
  if (const auto* g = std::get_if<GETConfig>(&cfg)) return get_forward(noise, label, params, *g);
  return vit_forward(noise, label, params, std::get<ViTConfig>(cfg));
}

// ---------------------------------------------------------------------------
// Accounting

namespace detail {

inline std::size_t block_param_count(std::size_t d, std::size_t expansion) {
  std::size_t e = expansion * d;
  // ln1 + qkv + out proj (+bias) + ln2 + ffn (+biases)
  return 2 * d + 3 * d * d + d * d + d + 2 * d + d * e + e + e * d + d;
}

// Matmul MACs for one block over n tokens, counting 1 MAC as 1 FLOP.
inline std::size_t block_flops(std::size_t n, std::size_t d, std::size_t expansion) {
  return n * d * 3 * d        // qkv projection
         + 2 * n * n * d      // scores and the value mix, summed over heads
         + n * d * d          // output projection
         + 2 * n * d * expansion * d;  // ffn
}

}  // namespace detail

// Exact learned-parameter counts. The sinusoidal position table is excluded
// (it never trains); the class table counts only when conditional.
inline std::size_t count_get_params(const GETConfig& cfg) {
  cfg.validate();
  std::size_t d = cfg.dim, pd = cfg.patch_dim();
  std::size_t total = pd * d + d;  // patch embedding
  total += cfg.injection_depth * detail::block_param_count(d, kInjExpansion);
  total += cfg.equilibrium_depth * (d * 3 * d + 3 * d);  // injection outputs
  total += cfg.equilibrium_depth * detail::block_param_count(d, cfg.expansion);
  if (cfg.n_classes) total += cfg.n_classes * 3 * d;
  total += 2 * d;           // final layer norm
  total += d * pd + pd;     // decoder
  return total;
}

inline std::size_t count_vit_params(const ViTConfig& cfg) {
  cfg.validate();
  std::size_t d = cfg.dim, pd = cfg.patch_dim();
  std::size_t total = pd * d + d;
  total += cfg.depth * detail::block_param_count(d, cfg.expansion);
  if (cfg.n_classes) total += cfg.n_classes * 3 * d;
  total += 2 * d;
  total += d * pd + pd;
  return total;
}

inline std::size_t count_params(const ModelConfig& cfg) {
  if (const auto* g = std::get_if<GETConfig>(&cfg)) return count_get_params(*g);
  return count_vit_params(std::get<ViTConfig>(cfg));
}

// Forward-pass matmul MACs for one image (1 MAC = 1 FLOP). The equilibrium
// stack is counted once per solver step: weight tying shares parameters, not
// compute.
inline std::size_t count_get_flops(const GETConfig& cfg) {
  cfg.validate();
  std::size_t n = cfg.tokens(), d = cfg.dim, pd = cfg.patch_dim();
  std::size_t total = n * pd * d;  // embedding
  total += cfg.injection_depth * detail::block_flops(n, d, kInjExpansion);
  total += cfg.equilibrium_depth * n * d * 3 * d;  // injection outputs
  total += cfg.unroll_steps * cfg.equilibrium_depth * detail::block_flops(n, d, cfg.expansion);
  total += n * d * pd;  // decoder
  return total;
}

inline std::size_t count_vit_flops(const ViTConfig& cfg) {
  cfg.validate();
  std::size_t n = cfg.tokens(), d = cfg.dim, pd = cfg.patch_dim();
  return n * pd * d + cfg.depth * detail::block_flops(n, d, cfg.expansion) + n * d * pd;
}

inline std::size_t count_flops(const ModelConfig& cfg) {
  if (const auto* g = std::get_if<GETConfig>(&cfg)) return count_get_flops(*g);
  return count_vit_flops(std::get<ViTConfig>(cfg));
}

// ---------------------------------------------------------------------------
// Canonical config text: round-trippable, and the string whose FNV-1a hash
// fingerprints a checkpoint.

inline std::string canonical(const GETConfig& c) {
  std::ostringstream s;
  s << "get h=" << c.height << " w=" << c.width << " c=" << c.channels << " p=" << c.patch
    << " d=" << c.dim << " li=" << c.injection_depth << " le=" << c.equilibrium_depth
    << " e=" << c.expansion << " heads=" << c.head_count() << " classes=" << c.n_classes
    << " k=" << c.unroll_steps;
  return s.str();
}

inline std::string canonical(const ViTConfig& c) {
  std::ostringstream s;
  s << "vit h=" << c.height << " w=" << c.width << " c=" << c.channels << " p=" << c.patch
    << " d=" << c.dim << " depth=" << c.depth << " e=" << c.expansion
    << " heads=" << c.head_count() << " classes=" << c.n_classes;
  return s.str();
}

inline std::string canonical(const ModelConfig& c) {
  if (const auto* g = std::get_if<GETConfig>(&c)) return canonical(*g);
  return canonical(std::get<ViTConfig>(c));
}

inline ModelConfig parse_canonical(const std::string& text) {
  std::istringstream in(text);
  std::string kind;
  in >> kind;
  std::unordered_map<std::string, std::size_t> kv;
  std::string tok;
  while (in >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw io_error("bad model config text: " + text);
    kv[tok.substr(0, eq)] = std::stoull(tok.substr(eq + 1));
  }
  auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw io_error("model config text missing '" + std::string(k) + "': " + text);
    return it->second;
  };
  if (kind == "get") {
    GETConfig c;
    c.height = get("h");
    c.width = get("w");
    c.channels = get("c");
    c.patch = get("p");
    c.dim = get("d");
    c.injection_depth = get("li");
    c.equilibrium_depth = get("le");
    c.expansion = get("e");
    c.heads = get("heads");
    c.n_classes = get("classes");
    c.unroll_steps = get("k");
    c.validate();
    return c;
  }
  if (kind == "vit") {
    ViTConfig c;
    c.height = get("h");
    c.width = get("w");
    c.channels = get("c");
    c.patch = get("p");
    c.dim = get("d");
    c.depth = get("depth");
    c.expansion = get("e");
    c.heads = get("heads");
    c.n_classes = get("classes");
    c.validate();
    return c;
  }
  throw io_error("unknown model kind in config text: " + text);
}

template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  if (const auto* g = std::get_if<GETConfig>(&cfg)) return init_get_params<S>(*g, seed);
  return init_vit_params<S>(std::get<ViTConfig>(cfg), seed);
}

}  // namespace eqdistill
