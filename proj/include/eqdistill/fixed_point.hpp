#pragma once

// Fixed-point machinery for equilibrium models: plain and Anderson-accelerated
// forward solvers, a differentiable K-step unroll (optionally checkpointed),
// and implicit gradients through the equilibrium via the adjoint equation.

#include <fstream>
#include <functional>
#include <vector>

#include "eqdistill/tensor.hpp"

namespace eqdistill {

struct SolverConfig {
  std::size_t max_iters = 40;
  double tol = 1e-6;          // convergence threshold on the relative residual
  std::size_t unroll_steps = 6;  // K for the training-time unroll
  std::size_t anderson_m = 5;    // history length; 0 degenerates to damped iteration
  double beta = 1.0;             // mixing/damping factor in (0, 1]
  double ridge = 1e-10;          // regulariser for the Anderson least-squares solve

  void validate() const {
    if (max_iters < 1) throw config_error("solver: max_iters must be at least 1");
    if (!(tol > 0)) throw config_error("solver: tol must be positive");
    if (unroll_steps < 1) throw config_error("solver: unroll_steps must be at least 1");
    if (anderson_m > max_iters) throw config_error("solver: anderson_m must not exceed max_iters");
    if (!(beta > 0) || beta > 1) throw config_error("solver: beta must lie in (0, 1]");
    if (!(ridge >= 0)) throw config_error("solver: ridge must be non-negative");
  }
};

template <typename S>
struct FixedPointResult {
  Tensor<S> z_star;
  S residual = S(0);         // relative residual at the returned iterate
  std::size_t n_iters = 0;   // map evaluations performed
  bool converged = false;    // residual <= tol
  std::vector<S> trace;      // residual after each evaluation
  std::size_t ls_fallbacks = 0;  // Anderson steps that fell back to damped iteration
};

// ||f(z) - z|| / (||z|| + 1e-8), flat L2.
template <typename S>
S relative_residual(const Tensor<S>& fz, const Tensor<S>& z) {
  if (fz.shape() != z.shape())
    throw shape_error("fixed-point map changed shape: " + shape_str(z.shape()) + " -> " +
                      shape_str(fz.shape()));
  long double num = 0, den = 0;
  const S* a = fz.data();
  const S* b = z.data();
  for (std::size_t i = 0; i < z.numel(); ++i) {
    long double d = (long double)(a[i]) - b[i];
    num += d * d;
    den += (long double)(b[i]) * b[i];
  }
  return S(std::sqrt(double(num)) / (std::sqrt(double(den)) + 1e-8));
}

// One residual per line, "iteration,residual".
template <typename S>
void export_residual_trace(const FixedPointResult<S>& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write residual trace: " + path);
  out << "iteration,residual\n";
  for (std::size_t i = 0; i < r.trace.size(); ++i) out << i << "," << double(r.trace[i]) << "\n";
  if (!out) throw io_error("short write: " + path);
}

template <typename S>
void throw_if_nonfinite(S res, std::size_t iter) {
  if (!std::isfinite(double(res)))
    throw divergence_error("fixed-point iteration produced non-finite residual at iteration " +
                           std::to_string(iter));
}

// Plain iteration z <- f(z). Stops once the relative residual drops to tol.
template <typename S>
FixedPointResult<S> solve_naive(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                                const Tensor<S>& z0, const SolverConfig& cfg) {
  cfg.validate();
  NoGradGuard<S> guard;
  FixedPointResult<S> r;
  Tensor<S> z = z0;
  for (std::size_t k = 0; k < cfg.max_iters; ++k) {
    Tensor<S> fz = f(z);
    S res = relative_residual(fz, z);
    throw_if_nonfinite(res, k);
    r.trace.push_back(res);
    r.z_star = fz;
    r.residual = res;
    r.n_iters = k + 1;
    if (double(res) <= cfg.tol) {
      r.converged = true;
      break;
    }
    z = fz;
  }
  return r;
}

// Anderson acceleration in difference form. With residual F_k = f(x_k) - x_k
// and the last m difference columns dX_j = x_{k-m+j+1} - x_{k-m+j},
// dF_j = F_{k-m+j+1} - F_{k-m+j}, solve the regularised normal equations
//   (dF^T dF + ridge I) gamma = dF^T F_k
// and step x_{k+1} = x_k + beta F_k - (dX + beta dF) gamma. With an empty
// history (or m = 0) this is a damped naive step, and gamma -> 0 as the
// residual vanishes, so the method never undershoots plain iteration near
// convergence. A non-finite solve falls back to one damped naive step and is
// counted in ls_fallbacks.
template <typename S>
FixedPointResult<S> solve_anderson(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                                   const Tensor<S>& z0, const SolverConfig& cfg) {
  cfg.validate();
  NoGradGuard<S> guard;
  FixedPointResult<S> r;
  const std::size_t n = z0.numel();
  std::vector<std::vector<double>> dx_cols, df_cols;
  std::vector<double> prev_x, prev_f;
  Tensor<S> x = z0;
  for (std::size_t k = 0; k < cfg.max_iters; ++k) {
    Tensor<S> gx = f(x);
    S res = relative_residual(gx, x);
    throw_if_nonfinite(res, k);
    r.trace.push_back(res);
    r.z_star = gx;
    r.residual = res;
    r.n_iters = k + 1;
    if (double(res) <= cfg.tol) {
      r.converged = true;
      break;
    }

    std::vector<double> fvec(n);
    for (std::size_t i = 0; i < n; ++i) fvec[i] = double(gx.data()[i]) - double(x.data()[i]);
    if (!prev_x.empty() && cfg.anderson_m > 0) {
      std::vector<double> dx(n), df(n);
      for (std::size_t i = 0; i < n; ++i) {
        dx[i] = double(x.data()[i]) - prev_x[i];
        df[i] = fvec[i] - prev_f[i];
      }
      dx_cols.push_back(std::move(dx));
      df_cols.push_back(std::move(df));
      if (dx_cols.size() > cfg.anderson_m) {
        dx_cols.erase(dx_cols.begin());
        df_cols.erase(df_cols.begin());
      }
    }
    prev_x.resize(n);
    for (std::size_t i = 0; i < n; ++i) prev_x[i] = double(x.data()[i]);
    prev_f = fvec;

    const std::size_t m = dx_cols.size();
    std::vector<double> gamma;
    if (m > 0) {
      Eigen::MatrixXd normal(m, m);
      Eigen::VectorXd rhs(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i; j < m; ++j) {
          long double dot = 0;
          for (std::size_t t = 0; t < n; ++t) dot += (long double)df_cols[i][t] * df_cols[j][t];
          normal(i, j) = normal(j, i) = double(dot);
        }
        long double dot = 0;
        for (std::size_t t = 0; t < n; ++t) dot += (long double)df_cols[i][t] * fvec[t];
        rhs[i] = double(dot);
      }
      for (std::size_t i = 0; i < m; ++i) normal(i, i) += cfg.ridge;
      Eigen::VectorXd y = normal.ldlt().solve(rhs);
      bool ok = true;
      for (std::size_t i = 0; i < m; ++i) ok = ok && std::isfinite(y[i]);
      if (ok) {
        gamma.assign(y.data(), y.data() + m);
      } else {
        ++r.ls_fallbacks;
      }
    }

    Tensor<S> next(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double acc = double(x.data()[i]) + cfg.beta * fvec[i];
      for (std::size_t j = 0; j < gamma.size(); ++j)
        acc -= gamma[j] * (dx_cols[j][i] + cfg.beta * df_cols[j][i]);
      next.data()[i] = S(acc);
    }
    x = next;
  }
  return r;
}

// Differentiable K-step unroll z_K = f(...f(z0)). With checkpointed set, the
// whole unroll becomes one checkpoint segment: the forward keeps only z0 and
// z_K, and backward replays the K steps once. Gradients are bit-identical to
// the uncheckpointed unroll because replay is exact.
template <typename S>
Tensor<S> unrolled_forward(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& z0,
                           std::size_t steps, bool checkpointed = false) {
  if (steps < 1) throw config_error("unrolled_forward: steps must be at least 1");
  if (!checkpointed) {
    Tensor<S> z = z0;
    for (std::size_t k = 0; k < steps; ++k) z = f(z);
    return z;
  }
  return checkpoint_segment<S>(
      [f, z0, steps] {
        Tensor<S> z = z0;
        for (std::size_t k = 0; k < steps; ++k) z = f(z);
        return z;
      },
      {z0});
}

template <typename S>
struct ImplicitGradResult {
  std::vector<std::vector<S>> grads;  // one per requested leaf, in order
  S residual = S(0);                  // adjoint iteration residual at exit
  std::size_t n_iters = 0;            // vector-Jacobian products evaluated
  bool converged = false;
};

// Gradients through the equilibrium without unrolling: records f once at
// z_star, solves the adjoint fixed point v = upstream + J^T v by iterating
// vector-Jacobian products on the recorded graph, then takes one final sweep
// seeded with v to collect d(loss)/d(leaf) for every requested leaf.
//
// Existing gradients on the leaves are clobbered (the sweeps clear and refill
// them); results are returned by value instead.
template <typename S>
ImplicitGradResult<S> implicit_grad(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                                    const Tensor<S>& z_star, const std::vector<S>& upstream,
                                    const std::vector<Tensor<S>>& leaves, const SolverConfig& cfg) {
  cfg.validate();
  Tape<S> tape;
  Tensor<S> z_leaf = Tensor<S>::param(z_star.shape(), z_star.value());
  Tensor<S> y = f(z_leaf);
  if (y.shape() != z_star.shape())
    throw shape_error("implicit_grad: map changed shape: " + shape_str(z_star.shape()) + " -> " +
                      shape_str(y.shape()));
  if (upstream.size() != y.numel())
    throw shape_error("implicit_grad: upstream has " + std::to_string(upstream.size()) +
                      " elements, state has " + std::to_string(y.numel()));

  std::size_t n = y.numel();
  std::vector<S> v = upstream, vnext(n);
  ImplicitGradResult<S> r;
  for (std::size_t k = 0; k < cfg.max_iters; ++k) {
    tape.clear_grads();
    tape.backward(y, v);
    const S* jv = z_leaf.has_grad() ? z_leaf.grad().data() : nullptr;
    long double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i) {
      vnext[i] = upstream[i] + (jv ? jv[i] : S(0));
      long double d = (long double)(vnext[i]) - v[i];
      num += d * d;
      den += (long double)(vnext[i]) * vnext[i];
    }
    S res = S(std::sqrt(double(num)) / (std::sqrt(double(den)) + 1e-8));
    throw_if_nonfinite(res, k);
    v.swap(vnext);
    r.residual = res;
    r.n_iters = k + 1;
    if (double(res) <= cfg.tol) {
      r.converged = true;
      break;
    }
  }
  if (!r.converged)
    throw divergence_error("adjoint iteration did not reach tol " + std::to_string(cfg.tol) +
                           " in " + std::to_string(cfg.max_iters) + " steps (residual " +
                           std::to_string(double(r.residual)) + ")");

  tape.clear_grads();
  tape.backward(y, v);
  for (const auto& leaf : leaves) {
    if (leaf.has_grad())
      r.grads.push_back(leaf.grad());
    else
      r.grads.push_back(std::vector<S>(leaf.numel(), S(0)));
  }
  return r;
}

}  // namespace eqdistill
