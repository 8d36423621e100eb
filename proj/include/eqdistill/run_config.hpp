#pragma once

// Flat text run configuration: "[section]" headers and "key = value" lines,
// '#' starts a comment anywhere. Unknown sections and keys are rejected so a
// typo cannot silently fall back to a default, and the fully resolved
// document (defaults filled in) can be logged verbatim.

#include <array>
#include <map>

#include "eqdistill/distill.hpp"
#include "eqdistill/teacher.hpp"

namespace eqdistill {

namespace detail {

struct ConfigKey {
  const char* section;
  const char* key;
  const char* fallback;
};

// Every key the parser accepts, with its default. Keys that do not apply to
// the chosen model type are simply unused.
inline const std::array<ConfigKey, 42>& config_registry() {
  static const std::array<ConfigKey, 42> keys = {{
      {"teacher", "mixture_file", ""},
      {"teacher", "components", "8"},
      {"teacher", "classes", "4"},
      {"teacher", "height", "8"},
      {"teacher", "width", "8"},
      {"teacher", "channels", "1"},
      {"teacher", "std_dev", "0.1"},
      {"teacher", "seed", "7"},
      {"teacher", "cell", "2"},
      {"teacher", "conditional", "false"},
      {"teacher", "sigma_min", "0.002"},
      {"teacher", "sigma_max", "80"},
      {"teacher", "rho", "7"},
      {"teacher", "steps", "18"},
      {"model", "type", "get"},
      {"model", "height", "8"},
      {"model", "width", "8"},
      {"model", "channels", "1"},
      {"model", "patch", "2"},
      {"model", "dim", "64"},
      {"model", "heads", "0"},
      {"model", "classes", "0"},
      {"model", "injection_depth", "2"},
      {"model", "equilibrium_depth", "2"},
      {"model", "depth", "4"},
      {"model", "expansion", "4"},
      {"model", "unroll_steps", "6"},
      {"training", "iterations", "20000"},
      {"training", "batch", "128"},
      {"training", "lr", "1e-4"},
      {"training", "weight_decay", "0"},
      {"training", "ema_momentum", "0.9999"},
      {"training", "data_seed", "1"},
      {"training", "init_seed", "2"},
      {"training", "checkpoint_interval", "5000"},
      {"training", "checkpointed_unroll", "false"},
      {"eval", "projections", "128"},
      {"eval", "seed", "1234"},
      {"eval", "samples", "2048"},
      {"eval", "per_class", "200"},
      {"paths", "dataset", "pairs.getp"},
      {"paths", "run_dir", "run"},
  }};
  return keys;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

class RunConfig {
 public:
  static RunConfig parse_text(const std::string& text) {
    RunConfig rc;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw config_error("config line " + std::to_string(lineno) + ": malformed section header");
        section = detail::trim(line.substr(1, line.size() - 2));
        if (!rc.known_section(section))
          throw config_error("config line " + std::to_string(lineno) + ": unknown section [" +
                             section + "]");
        continue;
      }
      std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
      if (section.empty())
        throw config_error("config line " + std::to_string(lineno) + ": key outside any section");
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (!rc.known_key(section, key))
        throw config_error("config line " + std::to_string(lineno) + ": unknown key " + section +
                           "." + key);
      rc.values_[section][key] = value;
    }
    return rc;
  }

  static RunConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
  }

  // The whole document with defaults applied, in registry order.
  std::string resolved() const {
    std::ostringstream o;
    std::string last;
    for (const auto& k : detail::config_registry()) {
      if (k.section != last) {
        if (!last.empty()) o << "\n";
        o << "[" << k.section << "]\n";
        last = k.section;
      }
      o << k.key << " = " << get(k.section, k.key) << "\n";
    }
    return o.str();
  }

  // ---- teacher ----

  MixtureSpec mixture() const {
    std::string file = get("teacher", "mixture_file");
    MixtureSpec m =
        file.empty()
            ? default_mixture(u64("teacher", "components"), u64("teacher", "classes"),
                              u64("teacher", "height"), u64("teacher", "width"),
                              u64("teacher", "channels"), real("teacher", "std_dev"),
                              u64("teacher", "seed"), u64("teacher", "cell"))
            : load_mixture(file);
    m.validate();
    return m;
  }

  NoiseSchedule schedule() const {
    NoiseSchedule s;
    s.sigma_min = real("teacher", "sigma_min");
    s.sigma_max = real("teacher", "sigma_max");
    s.rho = real("teacher", "rho");
    s.steps = u64("teacher", "steps");
    s.validate();
    return s;
  }

  bool conditional() const { return flag("teacher", "conditional"); }

  // ---- model ----

  ModelConfig model() const {
    std::string type = get("model", "type");
    if (type == "get") {
      GETConfig g;
      g.height = u64("model", "height");
      g.width = u64("model", "width");
      g.channels = u64("model", "channels");
      g.patch = u64("model", "patch");
      g.dim = u64("model", "dim");
      g.heads = u64("model", "heads");
      g.n_classes = u64("model", "classes");
      g.injection_depth = u64("model", "injection_depth");
      g.equilibrium_depth = u64("model", "equilibrium_depth");
      g.expansion = u64("model", "expansion");
      g.unroll_steps = u64("model", "unroll_steps");
      g.validate();
      return g;
    }
    if (type == "vit") {
      ViTConfig v;
      v.height = u64("model", "height");
      v.width = u64("model", "width");
      v.channels = u64("model", "channels");
      v.patch = u64("model", "patch");
      v.dim = u64("model", "dim");
      v.heads = u64("model", "heads");
      v.n_classes = u64("model", "classes");
      v.depth = u64("model", "depth");
      v.expansion = u64("model", "expansion");
      v.validate();
      return v;
    }
    throw config_error("model.type must be get or vit, got " + type);
  }

  // ---- training ----

  TrainConfig training() const {
    TrainConfig t;
    t.iterations = u64("training", "iterations");
    t.batch = u64("training", "batch");
    t.opt.lr = real("training", "lr");
    t.opt.weight_decay = real("training", "weight_decay");
    t.ema_momentum = real("training", "ema_momentum");
    t.data_seed = u64("training", "data_seed");
    t.init_seed = u64("training", "init_seed");
    t.checkpoint_interval = u64("training", "checkpoint_interval");
    t.checkpointed_unroll = flag("training", "checkpointed_unroll");
    t.run_dir = get("paths", "run_dir");
    t.validate();
    return t;
  }

  // ---- eval ----

  std::size_t projections() const { return u64("eval", "projections"); }
  std::uint64_t eval_seed() const { return u64("eval", "seed"); }
  std::size_t eval_samples() const { return u64("eval", "samples"); }
  std::size_t per_class() const { return u64("eval", "per_class"); }

  // ---- paths ----

  std::string dataset_path() const { return get("paths", "dataset"); }
  std::string run_dir() const { return get("paths", "run_dir"); }

  std::string get(const std::string& section, const std::string& key) const {
    auto s = values_.find(section);
    if (s != values_.end()) {
      auto k = s->second.find(key);
      if (k != s->second.end()) return k->second;
    }
    for (const auto& d : detail::config_registry())
      if (section == d.section && key == d.key) return d.fallback;
    throw config_error("unknown config key " + section + "." + key);
  }

 private:
  std::uint64_t u64(const std::string& section, const std::string& key) const {
    std::string v = get(section, key);
    try {
      std::size_t used = 0;
      unsigned long long x = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw config_error(section + "." + key + " must be a non-negative integer, got '" + v + "'");
    }
  }

  double real(const std::string& section, const std::string& key) const {
    std::string v = get(section, key);
    try {
      std::size_t used = 0;
      double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw config_error(section + "." + key + " must be a number, got '" + v + "'");
    }
  }

  bool flag(const std::string& section, const std::string& key) const {
    std::string v = get(section, key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error(section + "." + key + " must be a boolean, got '" + v + "'");
  }

  bool known_section(const std::string& s) const {
    for (const auto& d : detail::config_registry())
      if (s == d.section) return true;
    return false;
  }

  bool known_key(const std::string& s, const std::string& k) const {
    for (const auto& d : detail::config_registry())
      if (s == d.section && k == d.key) return true;
    return false;
  }

  std::map<std::string, std::map<std::string, std::string>> values_;
};

}  // namespace eqdistill
