// Command-line surface: gen-data, train, sample, eval. Every run is a pure
// function of its config file, flags, and seeds; exit codes are 0 success,
// 2 usage or config error, 3 I/O error, 4 numeric divergence.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "eqdistill/eval.hpp"
#include "eqdistill/run_config.hpp"

namespace eq = eqdistill;

namespace {

struct Args {
  std::string config_path, out, resume, checkpoint, heldout, precision = "f32";
  std::size_t count = 0, n = 16;
  std::size_t k = 0;
  std::uint32_t label = 0;
  std::uint64_t seed = 0;
  bool has_k = false, has_label = false, has_config = false, has_resume = false;

  std::optional<std::size_t> k_opt() const {
    return has_k ? std::optional<std::size_t>(k) : std::nullopt;
  }
};

int run_gen_data(const Args& a) {
  eq::RunConfig rc = eq::RunConfig::parse_file(a.config_path);
  std::cout << "resolved config:\n" << rc.resolved() << std::flush;
  eq::MixtureSpec m = rc.mixture();
  eq::NoiseSchedule sched = rc.schedule();
  eq::GenSummary s = eq::generate_pairs(m, sched, a.count, a.seed, rc.conditional(), a.out);
  std::cout << "records " << s.count << "\n";
  std::cout << "nfe_total " << s.nfe_total << "\n";
  std::cout << "checksum " << std::hex << std::setw(16) << std::setfill('0') << s.checksum
            << std::dec << std::setfill(' ') << "\n";
  return 0;
}

template <typename S>
int run_train(const Args& a) {
  eq::RunConfig rc = eq::RunConfig::parse_file(a.config_path);
  std::cout << "resolved config:\n" << rc.resolved() << std::flush;
  eq::PairDataset data = eq::PairDataset::load(rc.dataset_path());
  eq::ModelConfig mc = rc.model();
  eq::TrainConfig tc = rc.training();
  std::filesystem::create_directories(tc.run_dir);
  {
    std::ofstream log(tc.run_dir + "/config_resolved.txt");
    if (!log) throw eq::io_error("cannot write resolved config in " + tc.run_dir);
    log << rc.resolved();
  }
  std::size_t stride = std::max<std::size_t>(1, tc.checkpoint_interval);
  auto progress = [&](const eq::IterationLog<S>& row) {
    if (row.iteration % stride == 0 || row.iteration == tc.iterations)
      std::cout << "iteration " << row.iteration << " loss " << double(row.loss) << " grad_norm "
                << row.grad_norm << std::endl;
  };
  eq::TrainState<S> st = eq::train<S>(
      data, mc, tc, a.has_resume ? std::optional<std::string>(a.resume) : std::nullopt, progress);
  std::cout << "final checkpoint " << tc.run_dir << "/final.getc (iteration " << st.iteration
            << ")\n";
  return 0;
}

template <typename S>
int run_sample(const Args& a) {
  eq::CheckpointInfo info;
  std::optional<eq::ModelConfig> expected;
  if (a.has_config) expected = eq::RunConfig::parse_file(a.config_path).model();
  eq::TrainState<S> st = eq::load_checkpoint<S>(a.checkpoint, expected, &info);
  eq::ModelParams<S> weights = eq::with_ema(st.params, st.ema);
  eq::ModelConfig cfg = eq::detail::override_k(info.config, a.k_opt());
  if (!a.n) throw eq::config_error("sample: --n must be at least 1");

  std::size_t patch = eq::detail::config_patch(cfg);
  std::size_t classes = eq::detail::config_classes(cfg);
  std::size_t h, w, c;
  if (const auto* g = std::get_if<eq::GETConfig>(&cfg)) {
    h = g->height;
    w = g->width;
    c = g->channels;
  } else {
    const auto& v = std::get<eq::ViTConfig>(cfg);
    h = v.height;
    w = v.width;
    c = v.channels;
  }
  if (a.has_label && !classes) throw eq::config_error("labels supplied to an unconditional model");

  std::size_t tokens = (h / patch) * (w / patch), pd = patch * patch * c;
  eq::Tensor<S> noise({a.n * tokens, pd});
  std::vector<S> buf(h * w * c);
  std::vector<std::uint32_t> labels;
  for (std::size_t i = 0; i < a.n; ++i) {
    eq::GaussianStream g(eq::mix64(a.seed, i));
    for (auto& v : buf) v = S(g.next());
    eq::Tensor<S> img({h, w, c}, buf);
    eq::Tensor<S> rows = eq::patchify(img, patch);
    std::memcpy(noise.data() + i * tokens * pd, rows.data(), tokens * pd * sizeof(S));
    if (classes) labels.push_back(a.has_label ? a.label : std::uint32_t(i % classes));
  }
  eq::NoGradGuard<S> guard;
  eq::Tensor<S> pred = eq::forward_batched(weights, cfg, noise, labels);

  std::vector<std::vector<S>> images;
  for (std::size_t i = 0; i < a.n; ++i) {
    eq::Tensor<S> img = eq::unpatchify(eq::slice_rows(pred, i * tokens, (i + 1) * tokens), h, w, c,
                                       patch);
    images.push_back(img.value());
  }
  std::size_t cols = 1;
  while (cols * cols < a.n) ++cols;
  eq::write_image_grid(images, h, w, c, cols, a.out);

  std::string raw_path = a.out + ".raw";
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  if (!raw) throw eq::io_error("cannot write raw samples: " + raw_path);
  for (const auto& img : images)
    for (S v : img) {
      float f = float(v);
      eq::write_pod<float>(raw, f);
    }
  raw.close();
  if (!raw) throw eq::io_error("short write: " + raw_path);

  std::cout << "wrote " << a.out << " (" << a.n << " samples, " << h << "x" << w << "x" << c
            << ", grid " << cols << " wide) and " << raw_path << " (float32)\n";
  return 0;
}

template <typename S>
int run_eval(const Args& a) {
  eq::CheckpointInfo info;
  std::optional<eq::RunConfig> rc;
  std::optional<eq::ModelConfig> expected;
  if (a.has_config) {
    rc = eq::RunConfig::parse_file(a.config_path);
    expected = rc->model();
  }
  eq::TrainState<S> st = eq::load_checkpoint<S>(a.checkpoint, expected, &info);
  eq::ModelParams<S> weights = eq::with_ema(st.params, st.ema);
  eq::ModelConfig cfg = eq::detail::override_k(info.config, a.k_opt());
  eq::PairDataset heldout = eq::PairDataset::load(a.heldout);

  std::size_t n_proj = rc ? rc->projections() : 128;
  std::uint64_t sw_seed = rc ? rc->eval_seed() : 1234;
  std::size_t sw_cap = rc ? rc->eval_samples() : 2048;
  std::size_t steps = rc ? rc->schedule().steps : eq::NoiseSchedule{}.steps;

  eq::EvalReport r;
  r.l1_fidelity = eq::l1_fidelity(weights, info.config, heldout, a.k_opt());
  r.params = eq::count_params(info.config);
  r.flops = eq::count_flops(cfg);
  r.nfe = eq::nfe_report(heldout.count(), steps);

  // Student outputs on held-out noises against the stored teacher images,
  // both in patch-row layout.
  {
    std::size_t patch = eq::detail::config_patch(cfg);
    std::size_t cap = std::min(sw_cap, heldout.count());
    std::vector<std::vector<double>> student, teacher;
    eq::NoGradGuard<S> guard;
    eq::Tensor<S> noise, target;
    std::vector<std::uint32_t> labels;
    std::vector<std::size_t> idx;
    const std::size_t batch = 64;
    for (std::size_t at = 0; at < cap; at += batch) {
      idx.clear();
      for (std::size_t i = at; i < std::min(at + batch, cap); ++i) idx.push_back(i);
      eq::detail::build_batch(heldout, idx, patch, noise, target, labels, heldout.conditional);
      eq::Tensor<S> pred = eq::forward_batched(weights, cfg, noise, labels);
      std::size_t per = pred.numel() / idx.size();
      for (std::size_t b = 0; b < idx.size(); ++b) {
        student.emplace_back(pred.data() + b * per, pred.data() + (b + 1) * per);
        teacher.emplace_back(target.data() + b * per, target.data() + (b + 1) * per);
      }
    }
    r.sliced_wasserstein = eq::sliced_wasserstein(student, teacher, n_proj, sw_seed);
  }

  if (rc && eq::detail::config_classes(cfg)) {
    eq::MixtureSpec m = rc->mixture();
    r.class_accuracy = eq::class_accuracy(weights, info.config, m, rc->per_class(), a.k_opt());
  }
  r.samples_per_second = eq::throughput(weights, cfg, 64);

  std::cout << r.table() << "\n" << r.csv() << std::flush;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Args a;
  CLI::App app{"one-step distillation of a deterministic diffusion sampler"};
  app.require_subcommand(1);
  app.add_option("--seed", a.seed, "global random seed");
  app.add_option("--precision", a.precision, "float width")
      ->check(CLI::IsMember({"f32", "f64"}));

  CLI::App* gen = app.add_subcommand("gen-data", "generate (noise, image) pairs from the teacher");
  gen->fallthrough();
  gen->add_option("--config", a.config_path, "run config file")->required();
  gen->add_option("--count", a.count, "number of records")->required();
  gen->add_option("--out", a.out, "output dataset path")->required();

  CLI::App* train = app.add_subcommand("train", "distill the student on a pair dataset");
  train->fallthrough();
  train->add_option("--config", a.config_path, "run config file")->required();
  train->add_option("--resume", a.resume, "checkpoint to resume from");

  CLI::App* sample = app.add_subcommand("sample", "draw one-step samples from a checkpoint");
  sample->fallthrough();
  sample->add_option("checkpoint", a.checkpoint, "trained checkpoint")->required();
  sample->add_option("--n", a.n, "number of samples");
  sample->add_option("--k", a.k, "equilibrium solver steps override");
  sample->add_option("--label", a.label, "class label for every sample");
  sample->add_option("--out", a.out, "image grid path (.raw appended for tensors)")->required();
  sample->add_option("--config", a.config_path, "config to cross-check against the checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a held-out dataset");
  eval->fallthrough();
  eval->add_option("checkpoint", a.checkpoint, "trained checkpoint")->required();
  eval->add_option("heldout", a.heldout, "held-out pair dataset")->required();
  eval->add_option("--k", a.k, "equilibrium solver steps override");
  eval->add_option("--config", a.config_path, "run config for teacher-side metrics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  a.has_k = sample->count("--k") || eval->count("--k");
  a.has_label = sample->count("--label") > 0;
  a.has_config = gen->count("--config") || train->count("--config") || sample->count("--config") ||
                 eval->count("--config");
  a.has_resume = train->count("--resume") > 0;
  bool f64 = a.precision == "f64";

  try {
    if (gen->parsed()) return run_gen_data(a);
    if (train->parsed()) return f64 ? run_train<double>(a) : run_train<float>(a);
    if (sample->parsed()) return f64 ? run_sample<double>(a) : run_sample<float>(a);
    if (eval->parsed()) return f64 ? run_eval<double>(a) : run_eval<float>(a);
  } catch (const eq::io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const eq::divergence_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const eq::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
