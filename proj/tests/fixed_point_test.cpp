#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "eqdistill/fixed_point.hpp"

using namespace eqdistill;
using T = Tensor<double>;

namespace {

using Map = std::function<T(const T&)>;

T randp(const Shape& shape, std::uint64_t seed, double sc) {
  GaussianStream gs(seed);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = sc * gs.next();
  return T::param(shape, std::move(v));
}

// Row-vector affine map x -> x A + b with the spectral norm of A rescaled to
// the requested value, so contraction is guaranteed by construction.
struct AffineMap {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;

  static AffineMap random(std::size_t n, std::uint64_t seed, double norm) {
    GaussianStream gs(seed);
    Eigen::MatrixXd raw(n, n);
    Eigen::VectorXd rhs(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) raw(i, j) = gs.next();
      rhs(i) = gs.next();
    }
    double top = raw.jacobiSvd().singularValues()(0);
    return {raw * (norm / top), rhs};
  }

  Map fn() const {
    return [this](const T& x) {
      std::size_t n = std::size_t(b.size());
      T out({1, n});
      for (std::size_t j = 0; j < n; ++j) {
        double acc = b(Eigen::Index(j));
        for (std::size_t i = 0; i < n; ++i) acc += x.data()[i] * a(Eigen::Index(i), Eigen::Index(j));
        out.data()[j] = acc;
      }
      return out;
    };
  }

  // Fixed point of x = x A + b, i.e. (I - A^T) x^T = b.
  std::vector<double> fixed_point() const {
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(a.rows(), a.cols()) - a.transpose();
    Eigen::VectorXd x = lhs.fullPivLu().solve(b);
    return std::vector<double>(x.data(), x.data() + x.size());
  }
};

}  // namespace

TEST(FixedPoint, ConfigValidation) {
  SolverConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.max_iters = 0;
  EXPECT_THROW(cfg.validate(), config_error);
  cfg = SolverConfig{};
  cfg.tol = 0.0;
  EXPECT_THROW(cfg.validate(), config_error);
  cfg = SolverConfig{};
  cfg.anderson_m = cfg.max_iters + 1;
  EXPECT_THROW(cfg.validate(), config_error);
  cfg = SolverConfig{};
  cfg.beta = 1.5;
  EXPECT_THROW(cfg.validate(), config_error);
  cfg = SolverConfig{};
  cfg.unroll_steps = 0;
  EXPECT_THROW(cfg.validate(), config_error);
}

TEST(FixedPoint, NaiveConvergesOnContraction) {
  Map f = [](const T& x) {
    T out({1, 1});
    out.data()[0] = 0.5 * x.data()[0] + 1.0;
    return out;
  };
  SolverConfig cfg;
  cfg.tol = 1e-10;
  cfg.max_iters = 100;
  auto r = solve_naive<double>(f, T({1, 1}, {0.0}), cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.z_star.data()[0], 2.0, 1e-8);
  EXPECT_LE(double(r.residual), cfg.tol);
  EXPECT_LE(r.n_iters, cfg.max_iters);
  EXPECT_EQ(r.trace.size(), r.n_iters);
}

TEST(FixedPoint, NaiveReportsNonConvergence) {
  // Expanding map: |f'| = 2, iterates run away and the tolerance is never met.
  Map f = [](const T& x) {
    T out({1, 1});
    out.data()[0] = 2.0 * x.data()[0] + 1.0;
    return out;
  };
  SolverConfig cfg;
  cfg.max_iters = 15;
  auto r = solve_naive<double>(f, T({1, 1}, {1.0}), cfg);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.n_iters, cfg.max_iters);
  EXPECT_GT(double(r.residual), cfg.tol);
}

TEST(FixedPoint, NaiveResidualDecaysMonotonically) {
  // For a linear contraction the residual shrinks by the contraction factor
  // every step, so the trace must be strictly decreasing.
  AffineMap map = AffineMap::random(6, 17, 0.8);
  Map f = map.fn();
  SolverConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_iters = 60;
  auto r = solve_naive<double>(f, T::zeros({1, 6}), cfg);
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LT(r.trace[i], r.trace[i - 1]);
}

TEST(FixedPoint, AndersonMatchesLinearSolveOracle) {
  AffineMap map = AffineMap::random(8, 3, 0.9);
  auto oracle = map.fixed_point();
  Map f = map.fn();
  SolverConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_iters = 200;
  auto r = solve_anderson<double>(f, T::zeros({1, 8}), cfg);
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(r.z_star.data()[i], oracle[i], 1e-8);
}

TEST(FixedPoint, AndersonBeatsNaiveOnStiffContraction) {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    AffineMap map = AffineMap::random(8, seed, 0.95);
    Map f = map.fn();
    SolverConfig cfg;
    cfg.tol = 1e-10;
    cfg.max_iters = 1000;
    auto naive = solve_naive<double>(f, T::zeros({1, 8}), cfg);
    auto fast = solve_anderson<double>(f, T::zeros({1, 8}), cfg);
    EXPECT_TRUE(naive.converged);
    EXPECT_TRUE(fast.converged);
    EXPECT_LT(fast.n_iters, naive.n_iters) << "seed " << seed;
  }
}

TEST(FixedPoint, AndersonWithoutHistoryIsDampedIteration) {
  AffineMap map = AffineMap::random(5, 21, 0.7);
  Map f = map.fn();
  SolverConfig cfg;
  cfg.anderson_m = 0;
  cfg.beta = 1.0;
  cfg.tol = 1e-9;
  cfg.max_iters = 100;
  auto plain = solve_naive<double>(f, T::zeros({1, 5}), cfg);
  auto damped = solve_anderson<double>(f, T::zeros({1, 5}), cfg);
  ASSERT_EQ(plain.trace.size(), damped.trace.size());
  for (std::size_t i = 0; i < plain.trace.size(); ++i)
    EXPECT_DOUBLE_EQ(plain.trace[i], damped.trace[i]);
  EXPECT_EQ(damped.ls_fallbacks, 0u);
}

TEST(FixedPoint, ResidualTraceExport) {
  Map f = [](const T& x) {
    T out({1, 1});
    out.data()[0] = 0.5 * x.data()[0] + 1.0;
    return out;
  };
  SolverConfig cfg;
  cfg.tol = 1e-8;
  cfg.max_iters = 50;
  auto r = solve_naive<double>(f, T({1, 1}, {0.0}), cfg);
  std::string path = testing::TempDir() + "trace.csv";
  export_residual_trace(r, path);

  std::ifstream in(path);
  ASSERT_TRUE(in.good());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,residual");
  std::size_t rows = 0;
  double last = 0.0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string idx, val;
    std::getline(row, idx, ',');
    std::getline(row, val, ',');
    EXPECT_EQ(idx, std::to_string(rows));
    last = std::stod(val);
    ++rows;
  }
  EXPECT_EQ(rows, r.n_iters);
  EXPECT_NEAR(last, double(r.residual), 1e-15);
  std::remove(path.c_str());
}

TEST(FixedPoint, ShapeChangeRejected) {
  Map f = [](const T&) { return T::zeros({1, 3}); };
  SolverConfig cfg;
  EXPECT_THROW(solve_naive<double>(f, T::zeros({1, 2}), cfg), shape_error);
}

TEST(FixedPoint, DivergenceToNonFiniteThrows) {
  Map f = [](const T& x) {
    T out({1, 1});
    out.data()[0] = x.data()[0] * 1e200;
    return out;
  };
  SolverConfig cfg;
  cfg.max_iters = 40;
  EXPECT_THROW(solve_naive<double>(f, T({1, 1}, {1.0}), cfg), divergence_error);
}

TEST(FixedPoint, UnrollGeometricOracle) {
  // z_{k+1} = 0.5 z_k + 1 from z_0 = 0 gives z_6 = 2 - 2^-5 = 1.96875.
  T c = T::param({1, 1}, {1.0});
  T z0 = T::param({1, 1}, {0.0});
  Map f = [&](const T& z) { return add(scale(z, 0.5), c); };
  T z6 = unrolled_forward<double>(f, z0, 6);
  EXPECT_DOUBLE_EQ(z6.data()[0], 1.96875);

  // dz_6/dz_0 = 0.5^6 and dz_6/dc = sum of 0.5^j for j < 6.
  Tape<double> tape;
  T out = unrolled_forward<double>(f, z0, 6);
  tape.backward(out);
  EXPECT_DOUBLE_EQ(z0.grad()[0], std::pow(0.5, 6));
  EXPECT_DOUBLE_EQ(c.grad()[0], 1.96875);
}

TEST(FixedPoint, UnrollRejectsZeroSteps) {
  Map f = [](const T& z) { return z; };
  EXPECT_THROW(unrolled_forward<double>(f, T::zeros({1, 1}), 0), config_error);
}

TEST(FixedPoint, CheckpointedUnrollMatchesPlainBitwise) {
  T w = randp({4, 4}, 5, 0.3);
  T b = randp({1, 4}, 6, 0.1);
  T z0 = randp({2, 4}, 7, 1.0);
  Map f = [&](const T& z) { return gelu(add_row(matmul(z, w), b)); };

  std::vector<double> plain_out, plain_gw, plain_gb, plain_gz;
  {
    Tape<double> tape;
    T out = unrolled_forward<double>(f, z0, 5, false);
    plain_out = out.value();
    tape.backward(sum_all(out));
    plain_gw = w.grad();
    plain_gb = b.grad();
    plain_gz = z0.grad();
  }
  w.zero_grad();
  b.zero_grad();
  z0.zero_grad();
  {
    Tape<double> tape;
    T out = unrolled_forward<double>(f, z0, 5, true);
    EXPECT_EQ(out.value(), plain_out);
    tape.backward(sum_all(out));
    EXPECT_EQ(w.grad(), plain_gw);
    EXPECT_EQ(b.grad(), plain_gb);
    EXPECT_EQ(z0.grad(), plain_gz);
  }
}

TEST(FixedPoint, UnrollGradientsMatchFiniteDifferences) {
  for (std::size_t steps : {1u, 3u, 6u}) {
    T w = randp({3, 3}, 100 + steps, 0.25);
    T b = randp({1, 3}, 200 + steps, 0.1);
    T z0 = randp({1, 3}, 300 + steps, 1.0);
    Map f = [&](const T& z) { return gelu(add_row(matmul(z, w), b)); };

    for (T leaf : {w, b, z0}) leaf.zero_grad();
    std::vector<std::vector<double>> got;
    {
      Tape<double> tape;
      T loss = sum_all(unrolled_forward<double>(f, z0, steps));
      tape.backward(loss);
      for (const T& leaf : {w, b, z0}) got.push_back(leaf.grad());
    }
    auto fd = finite_difference_grad<double>(
        [&] { return sum_all(unrolled_forward<double>(f, z0, steps)).item(); }, {w, b, z0}, 1e-6);
    for (std::size_t t = 0; t < fd.size(); ++t)
      for (std::size_t i = 0; i < fd[t].size(); ++i) {
        double denom = 1.0 + std::abs(fd[t][i]);
        EXPECT_NEAR(got[t][i], fd[t][i], 1e-6 * denom) << "steps " << steps;
      }
  }
}

TEST(FixedPoint, ImplicitGradScalarOracle) {
  // f(z) = 0.5 z + c with c = 2: the fixed point is 4 and, by the implicit
  // function theorem, dz*/dc = 1 / (1 - 0.5) = 2.
  T c = T::param({1, 1}, {2.0});
  Map f = [&](const T& z) { return add(scale(z, 0.5), c); };
  SolverConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_iters = 200;
  auto sol = solve_naive<double>(f, T::zeros({1, 1}), cfg);
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.z_star.data()[0], 4.0, 1e-10);

  auto ig = implicit_grad<double>(f, sol.z_star, {1.0}, {c}, cfg);
  EXPECT_TRUE(ig.converged);
  ASSERT_EQ(ig.grads.size(), 1u);
  EXPECT_NEAR(ig.grads[0][0], 2.0, 1e-9);
}

TEST(FixedPoint, ImplicitGradMatchesLongUnroll) {
  T w = randp({4, 4}, 41, 0.3);
  T b = randp({1, 4}, 42, 0.2);
  Map f = [&](const T& z) { return add(gelu(matmul(z, w)), b); };

  SolverConfig cfg;
  cfg.tol = 1e-13;
  cfg.max_iters = 500;
  auto sol = solve_anderson<double>(f, T::zeros({1, 4}), cfg);
  ASSERT_TRUE(sol.converged);

  std::vector<double> upstream(4, 1.0);
  auto ig = implicit_grad<double>(f, sol.z_star, upstream, {w, b}, cfg);
  ASSERT_TRUE(ig.converged);

  w.zero_grad();
  b.zero_grad();
  std::vector<std::vector<double>> unrolled;
  {
    Tape<double> tape;
    T loss = sum_all(unrolled_forward<double>(f, T::zeros({1, 4}), 200));
    tape.backward(loss);
    unrolled = {w.grad(), b.grad()};
  }
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < unrolled[t].size(); ++i) {
      double denom = 1.0 + std::abs(unrolled[t][i]);
      EXPECT_NEAR(ig.grads[t][i], unrolled[t][i], 1e-6 * denom);
    }
}

TEST(FixedPoint, ImplicitGradRequiresAdjointConvergence) {
  // At an expanding fixed point the adjoint iteration cannot settle.
  Map f = [](const T& z) { return scale(z, 2.0); };
  SolverConfig cfg;
  cfg.max_iters = 30;
  T z_star = T::zeros({1, 1});
  EXPECT_THROW(implicit_grad<double>(f, z_star, {1.0}, {}, cfg), divergence_error);
}

TEST(FixedPoint, RelativeResidualZeroAtFixedPoint) {
  T z({1, 2}, {3.0, -1.0});
  EXPECT_DOUBLE_EQ(double(relative_residual<double>(z, z)), 0.0);
  T moved({1, 2}, {3.0, 0.0});
  EXPECT_GT(double(relative_residual<double>(moved, z)), 0.0);
}
