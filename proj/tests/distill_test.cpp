#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "eqdistill/distill.hpp"

using namespace eqdistill;
using T = Tensor<double>;

namespace {

GETConfig micro_get(std::size_t classes = 0) {
  GETConfig cfg;
  cfg.height = 4;
  cfg.width = 4;
  cfg.channels = 1;
  cfg.patch = 2;
  cfg.dim = 8;
  cfg.injection_depth = 1;
  cfg.equilibrium_depth = 1;
  cfg.expansion = 2;
  cfg.heads = 1;
  cfg.n_classes = classes;
  cfg.unroll_steps = 2;
  return cfg;
}

std::string make_pairs(std::size_t count, bool conditional, std::uint64_t seed,
                       const std::string& name) {
  MixtureSpec m = default_mixture(4, 2, 4, 4, 1, 0.1, 7);
  NoiseSchedule sched;
  sched.steps = 18;
  std::string path = testing::TempDir() + name;
  generate_pairs(m, sched, count, seed, conditional, path);
  return path;
}

TrainState<double> fresh_state(const ModelConfig& cfg, std::uint64_t seed) {
  TrainState<double> st;
  st.params = init_params<double>(cfg, seed);
  auto learned = st.params.learned();
  st.opt.init(learned);
  st.ema.init(learned, 0.999);
  return st;
}

}  // namespace

TEST(Distill, L1LossExamples) {
  T same({1, 3}, {1, 2, 3});
  EXPECT_DOUBLE_EQ(l1_loss(same, same).item(), 0.0);
  T pred({1, 2}, {0, 0});
  T target({1, 2}, {1, -3});
  EXPECT_DOUBLE_EQ(l1_loss(pred, target).item(), 2.0);
  EXPECT_THROW(l1_loss(pred, T({1, 3}, {1, 2, 3})), shape_error);
}

TEST(Distill, L1GradientIsScaledSign) {
  T pred = T::param({1, 3}, {0.0, 0.0, 5.0});
  T target({1, 3}, {1.0, -3.0, 5.0});
  Tape<double> tape;
  tape.backward(l1_loss(pred, target));
  ASSERT_TRUE(pred.has_grad());
  EXPECT_DOUBLE_EQ(pred.grad()[0], -1.0 / 3.0);
  EXPECT_DOUBLE_EQ(pred.grad()[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(pred.grad()[2], 0.0);  // tie takes the zero subgradient
}

TEST(Distill, AdamWFirstStepIsSignedLearningRate) {
  T p = T::param({1, 1}, {1.0});
  std::vector<T> params = {p};
  AdamWState<double> st;
  st.init(params);
  AdamWConfig cfg;
  cfg.lr = 1e-3;
  {
    Tape<double> tape;
    tape.backward(scale(p, 0.5));  // d/dp = 0.5
  }
  adamw_step(params, st, cfg);
  // Bias correction cancels at step 1, so the update is sign(g) up to eps.
  EXPECT_NEAR(p.value()[0], 1.0 - cfg.lr, 1e-9);
  EXPECT_EQ(st.step, 1u);
}

TEST(Distill, AdamWZeroGradientLeavesParamsUnchanged) {
  T p = T::param({1, 2}, {0.5, -0.25});
  std::vector<T> params = {p};
  AdamWState<double> st;
  st.init(params);
  {
    Tape<double> tape;
    tape.backward(sum_all(scale(p, 0.0)));
  }
  adamw_step(params, st, AdamWConfig{});
  EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.value()[1], -0.25);
}

TEST(Distill, AdamWDecayIsDecoupled) {
  auto run = [](double decay) {
    T p = T::param({1, 1}, {2.0});
    std::vector<T> params = {p};
    AdamWState<double> st;
    st.init(params);
    AdamWConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = decay;
    {
      Tape<double> tape;
      tape.backward(scale(p, 1.0));
    }
    adamw_step(params, st, cfg);
    return p.value()[0];
  };
  // Decay adds exactly lr * decay * theta on top of the Adam step.
  EXPECT_NEAR(run(0.0) - run(0.1), 1e-3 * 0.1 * 2.0, 1e-15);
}

TEST(Distill, AdamWRejectsBadGradients) {
  T p = T::param({1, 1}, {1.0});
  std::vector<T> params = {p};
  AdamWState<double> st;
  st.init(params);
  EXPECT_THROW(adamw_step(params, st, AdamWConfig{}), divergence_error);  // no grad at all

  {
    Tape<double> tape;
    tape.backward(scale(p, std::numeric_limits<double>::quiet_NaN()));
  }
  try {
    adamw_step(params, st, AdamWConfig{});
    FAIL() << "expected divergence_error";
  } catch (const divergence_error& e) {
    EXPECT_NE(std::string(e.what()).find("parameter"), std::string::npos);
  }
}

TEST(Distill, EmaExamples) {
  T p = T::param({1, 1}, {2.0});
  std::vector<T> params = {p};
  EmaState<double> ema;
  ema.init(params, 0.9999);
  ema.shadow[0][0] = 1.0;
  ema.update(params);
  EXPECT_DOUBLE_EQ(ema.shadow[0][0], 1.0001);

  ema.init(params, 0.0);
  ema.shadow[0][0] = 7.0;
  ema.update(params);
  EXPECT_DOUBLE_EQ(ema.shadow[0][0], 2.0);  // momentum 0 copies the params

  ema.init(params, 1.0);
  ema.shadow[0][0] = 7.0;
  ema.update(params);
  EXPECT_DOUBLE_EQ(ema.shadow[0][0], 7.0);  // momentum 1 never moves
}

TEST(Distill, EmaConvergesGeometricallyWhenIdle) {
  T p = T::param({1, 1}, {2.0});
  std::vector<T> params = {p};
  EmaState<double> ema;
  ema.init(params, 0.99);
  ema.shadow[0][0] = 1.0;
  for (int i = 0; i < 100; ++i) ema.update(params);
  double bound = std::pow(0.99, 100) * 1.0;
  EXPECT_NEAR(ema.shadow[0][0], 2.0 - bound, 1e-12);
}

TEST(Distill, WithEmaSwapsLearnedSlotsOnly) {
  GETConfig cfg = micro_get();
  auto params = init_params<double>(ModelConfig(cfg), 3);
  auto learned = params.learned();
  EmaState<double> ema;
  ema.init(learned, 0.5);
  for (auto& sh : ema.shadow)
    for (auto& v : sh) v = 42.0;
  auto swapped = with_ema(params, ema);
  for (const auto& e : swapped.entries) {
    if (e.learned)
      for (double v : e.tensor.value()) EXPECT_DOUBLE_EQ(v, 42.0);
  }
  EXPECT_EQ(swapped.at("pos").value(), params.at("pos").value());

  ema.shadow.pop_back();
  EXPECT_THROW(with_ema(params, ema), config_error);
}

TEST(Distill, CheckpointRoundTripIsBitwise) {
  ModelConfig cfg = micro_get(2);
  auto st = fresh_state(cfg, 11);
  st.iteration = 7;
  st.opt.step = 7;
  st.opt.m[0][0] = 0.5;
  st.opt.v[0][0] = 0.25;
  st.ema.shadow[1][0] = -3.0;
  std::string path = testing::TempDir() + "round.getc";
  save_checkpoint(st, cfg, 42, path);

  CheckpointInfo info;
  auto ld = load_checkpoint<double>(path, cfg, &info);
  EXPECT_EQ(ld.iteration, 7u);
  EXPECT_EQ(ld.opt.step, 7u);
  EXPECT_EQ(info.iteration, 7u);
  EXPECT_EQ(info.data_seed, 42u);
  EXPECT_EQ(canonical(info.config), canonical(cfg));
  ASSERT_EQ(ld.params.entries.size(), st.params.entries.size());
  for (std::size_t i = 0; i < st.params.entries.size(); ++i)
    EXPECT_EQ(ld.params.entries[i].tensor.value(), st.params.entries[i].tensor.value())
        << st.params.entries[i].name;
  EXPECT_EQ(ld.opt.m, st.opt.m);
  EXPECT_EQ(ld.opt.v, st.opt.v);
  EXPECT_EQ(ld.ema.shadow, st.ema.shadow);
  std::remove(path.c_str());
}

TEST(Distill, CheckpointCorruptMagicRejected) {
  std::string path = testing::TempDir() + "bad.getc";
  std::ofstream out(path, std::ios::binary);
  out << "XXXX not a checkpoint";
  out.close();
  EXPECT_THROW(load_checkpoint<double>(path, {}), io_error);
  std::remove(path.c_str());
}

TEST(Distill, CheckpointTruncationRejected) {
  ModelConfig cfg = micro_get();
  auto st = fresh_state(cfg, 1);
  std::string path = testing::TempDir() + "trunc.getc";
  save_checkpoint(st, cfg, 1, path);
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  EXPECT_THROW(load_checkpoint<double>(path, {}), io_error);
  std::remove(path.c_str());
}

TEST(Distill, CheckpointConfigMismatchShowsBothSides) {
  ModelConfig get_cfg = micro_get();
  auto st = fresh_state(get_cfg, 1);
  std::string path = testing::TempDir() + "mismatch.getc";
  save_checkpoint(st, get_cfg, 1, path);

  ViTConfig vit;
  vit.height = 4;
  vit.width = 4;
  vit.patch = 2;
  vit.dim = 8;
  vit.depth = 1;
  vit.expansion = 2;
  vit.heads = 1;
  try {
    load_checkpoint<double>(path, ModelConfig(vit));
    FAIL() << "expected config_error";
  } catch (const config_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("get h="), std::string::npos);
    EXPECT_NE(msg.find("vit h="), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Distill, CheckpointPrecisionMismatchRejected) {
  ModelConfig cfg = micro_get();
  TrainState<float> st;
  st.params = init_params<float>(cfg, 1);
  auto learned = st.params.learned();
  st.opt.init(learned);
  st.ema.init(learned, 0.999);
  std::string path = testing::TempDir() + "f32.getc";
  save_checkpoint(st, cfg, 1, path);
  EXPECT_THROW(load_checkpoint<double>(path, cfg), config_error);
  EXPECT_NO_THROW(load_checkpoint<float>(path, cfg));
  std::remove(path.c_str());
}

TEST(Distill, BatchScheduleShufflesEpochs) {
  BatchSchedule sched(8, 1);
  std::vector<std::size_t> first, second;
  for (std::uint64_t g = 0; g < 8; ++g) first.push_back(sched.index_at(g));
  for (std::uint64_t g = 8; g < 16; ++g) second.push_back(sched.index_at(g));
  auto sorted = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  std::vector<std::size_t> all = {0, 1, 2, 3, 4, 5, 6, 7};
  EXPECT_EQ(sorted(first), all);
  EXPECT_EQ(sorted(second), all);
  EXPECT_NE(first, second);
  // Pure function of (seed, g): a second pass re-derives the same stream.
  BatchSchedule again(8, 1);
  EXPECT_EQ(again.index_at(3), first[3]);
  EXPECT_EQ(again.index_at(11), second[3]);
  EXPECT_THROW(BatchSchedule(0, 1), config_error);
}

TEST(Distill, BuildBatchUsesPatchLayout) {
  PairDataset d;
  d.height = 4;
  d.width = 4;
  d.channels = 1;
  d.conditional = true;
  d.noises.resize(16);
  d.images.resize(16);
  for (std::size_t i = 0; i < 16; ++i) {
    d.noises[i] = float(i);
    d.images[i] = float(16 + i);
  }
  d.labels = {3};

  Tensor<double> noise, target;
  std::vector<std::uint32_t> labels;
  detail::build_batch(d, {0}, 2, noise, target, labels, true);
  EXPECT_EQ(noise.shape(), Shape({4, 4}));
  std::vector<double> row0 = {0, 1, 4, 5};  // top-left patch in raster order
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(noise.value()[i], row0[i]);
    EXPECT_DOUBLE_EQ(target.value()[i], 16 + row0[i]);
  }
  ASSERT_EQ(labels.size(), 1u);
  EXPECT_EQ(labels[0], 3u);
}

TEST(Distill, DataModelMismatchRejectedBeforeTraining) {
  std::string path = make_pairs(4, false, 5, "mismatch.getp");
  auto data = PairDataset::load(path);
  GETConfig wrong = micro_get();
  wrong.height = 8;
  wrong.width = 8;
  TrainConfig tcfg;
  tcfg.iterations = 1;
  tcfg.batch = 2;
  EXPECT_THROW(train<double>(data, ModelConfig(wrong), tcfg), config_error);

  GETConfig cond = micro_get(2);
  EXPECT_THROW(check_data_matches_model<double>(data, ModelConfig(cond)), config_error);
  std::remove(path.c_str());
}

TEST(Distill, OverfittingEightPairs) {
  std::string path = make_pairs(8, false, 9, "overfit.getp");
  auto data = PairDataset::load(path);
  GETConfig cfg = micro_get();
  TrainConfig tcfg;
  tcfg.iterations = 12000;
  tcfg.batch = 8;
  tcfg.opt.lr = 1e-3;
  tcfg.checkpoint_interval = 0;
  tcfg.run_dir = testing::TempDir() + "overfit_run";

  std::vector<double> losses;
  auto st = train<double>(data, ModelConfig(cfg), tcfg, {},
                          [&](const IterationLog<double>& log) { losses.push_back(log.loss); });
  ASSERT_EQ(losses.size(), 12000u);
  for (double l : losses) EXPECT_TRUE(std::isfinite(l));
  // Memorizing one batch: strict descent early, then grinding down to near zero.
  for (std::size_t i = 1; i < 50; ++i) EXPECT_LT(losses[i], losses[i - 1]) << "step " << i;
  EXPECT_LT(*std::min_element(losses.begin(), losses.end()), 0.01);
  EXPECT_EQ(st.iteration, 12000u);
  EXPECT_TRUE(std::filesystem::exists(tcfg.run_dir + "/metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(tcfg.run_dir + "/final.getc"));
  std::filesystem::remove_all(tcfg.run_dir);
  std::remove(path.c_str());
}

TEST(Distill, ResumeReproducesUninterruptedRunBitExactly) {
  std::string path = make_pairs(16, true, 13, "resume.getp");
  auto data = PairDataset::load(path);
  ModelConfig cfg = micro_get(2);

  TrainConfig straight;
  straight.iterations = 40;
  straight.batch = 4;
  straight.checkpoint_interval = 0;
  straight.run_dir = testing::TempDir() + "run_straight";
  train<double>(data, cfg, straight);

  TrainConfig half = straight;
  half.iterations = 20;
  half.run_dir = testing::TempDir() + "run_resumed";
  train<double>(data, cfg, half);
  TrainConfig full = half;
  full.iterations = 40;
  train<double>(data, cfg, full, half.run_dir + "/final.getc");

  EXPECT_EQ(fnv1a64_file(straight.run_dir + "/final.getc"),
            fnv1a64_file(full.run_dir + "/final.getc"));

  // Wrong data seed on resume is refused.
  TrainConfig bad = full;
  bad.data_seed = 99;
  EXPECT_THROW(train<double>(data, cfg, bad, half.run_dir + "/final.getc"), config_error);

  std::filesystem::remove_all(straight.run_dir);
  std::filesystem::remove_all(full.run_dir);
  std::remove(path.c_str());
}

TEST(Distill, ConstantMemoryModeIsBitIdentical) {
  std::string path = make_pairs(16, false, 17, "o1.getp");
  auto data = PairDataset::load(path);
  ModelConfig cfg = micro_get();

  auto run = [&](bool checkpointed, const std::string& dir, std::vector<double>& losses,
                 std::vector<double>& norms) {
    TrainConfig tcfg;
    tcfg.iterations = 5;
    tcfg.batch = 4;
    tcfg.checkpoint_interval = 0;
    tcfg.checkpointed_unroll = checkpointed;
    tcfg.run_dir = testing::TempDir() + dir;
    auto st = train<double>(data, cfg, tcfg, {}, [&](const IterationLog<double>& log) {
      losses.push_back(log.loss);
      norms.push_back(log.grad_norm);
    });
    std::filesystem::remove_all(tcfg.run_dir);
    return st;
  };
  std::vector<double> l_plain, n_plain, l_ckpt, n_ckpt;
  auto plain = run(false, "o1_plain", l_plain, n_plain);
  auto ckpt = run(true, "o1_ckpt", l_ckpt, n_ckpt);
  EXPECT_EQ(l_plain, l_ckpt);
  EXPECT_EQ(n_plain, n_ckpt);
  for (std::size_t i = 0; i < plain.params.entries.size(); ++i)
    EXPECT_EQ(plain.params.entries[i].tensor.value(), ckpt.params.entries[i].tensor.value());
  std::remove(path.c_str());
}

TEST(Distill, CheckpointedUnrollRetainsConstantInSolverDepth) {
  GETConfig cfg = micro_get();
  auto params = init_params<double>(ModelConfig(cfg), 23);
  Tensor<double> patches({cfg.tokens(), cfg.patch_dim()},
                         std::vector<double>(cfg.tokens() * cfg.patch_dim(), 0.3));

  auto retained = [&](std::size_t k, bool checkpointed) {
    GETConfig c = cfg;
    c.unroll_steps = k;
    Tape<double> tape;
    get_forward_batched(params, c, patches, {}, checkpointed);
    return tape.retained_elems();
  };
  EXPECT_GT(retained(6, false), retained(2, false));
  EXPECT_EQ(retained(6, true), retained(2, true));
  EXPECT_LT(retained(6, true), retained(6, false));
}
