#pragma once

// Plain-text key=value run configuration. Every key is declared in one
// schema table; unknown keys and unparsable values are rejected. The echo
// lists every key in schema order and can be loaded back verbatim.

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cbit/encoder.hpp"
#include "cbit/error.hpp"
#include "cbit/training.hpp"

namespace cbit {

struct RunConfig {
  std::string data = "data";
  std::string runs_dir = "runs";
  std::string name = "run";
  ModelConfig model;
  TrainConfig train;

  RunConfig() {
    model.max_len = 15;
    model.dim = 256;
    model.layers = 2;
    model.heads = 2;
    model.dropout = 0.3;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

// Shortest representation that parses back to the same double.
inline std::string real_str(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string ks_str(const std::vector<std::size_t>& ks) {
  std::string s;
  for (std::size_t i = 0; i < ks.size(); ++i) s += (i ? "," : "") + std::to_string(ks[i]);
  return s;
}

inline std::vector<std::size_t> parse_ks(const std::string& key, const std::string& v) {
  std::vector<std::size_t> ks;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const std::size_t k = parse_count(key, trim(part));
    if (k == 0) throw ConfigError(key + ": cutoffs must be positive");
    ks.push_back(k);
  }
  if (ks.empty()) throw ConfigError(key + ": empty cutoff list");
  return ks;
}

}  // namespace detail

enum class KeyKind { count, real, flag, text, choice };

struct ConfigKey {
  std::string key;
  KeyKind kind;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_schema() {
  using namespace detail;
  static const std::vector<ConfigKey> schema = [] {
    std::vector<ConfigKey> s;
    auto count = [&](const char* k, const char* help, auto field) {
      s.push_back({k, KeyKind::count, help, [field](const RunConfig& c) { return std::to_string(field(c)); },
                   [field, k](RunConfig& c, const std::string& v) { field(c) = parse_count(k, v); }});
    };
    auto real = [&](const char* k, const char* help, auto field) {
      s.push_back({k, KeyKind::real, help, [field](const RunConfig& c) { return real_str(field(c)); },
                   [field, k](RunConfig& c, const std::string& v) { field(c) = parse_real(k, v); }});
    };
    auto flag = [&](const char* k, const char* help, auto field) {
      s.push_back({k, KeyKind::flag, help,
                   [field](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); },
                   [field, k](RunConfig& c, const std::string& v) { field(c) = parse_flag(k, v); }});
    };
    auto text = [&](const char* k, const char* help, auto field) {
      s.push_back({k, KeyKind::text, help, [field](const RunConfig& c) { return field(c); },
                   [field, k](RunConfig& c, const std::string& v) {
                     if (v.empty()) throw ConfigError(std::string(k) + ": must not be empty");
                     field(c) = v;
                   }});
    };

    text("data", "preprocessed dataset directory", [](auto& c) -> auto& { return c.data; });
    text("runs_dir", "parent directory of run directories", [](auto& c) -> auto& { return c.runs_dir; });
    text("name", "run name (runs_dir/name)", [](auto& c) -> auto& { return c.name; });

    count("slide_window", "window length T", [](auto& c) -> auto& { return c.model.max_len; });
    count("dim", "hidden dimension d", [](auto& c) -> auto& { return c.model.dim; });
    count("layers", "Transformer blocks L", [](auto& c) -> auto& { return c.model.layers; });
    count("heads", "attention heads h", [](auto& c) -> auto& { return c.model.heads; });
    real("dropout", "dropout ratio", [](auto& c) -> auto& { return c.model.dropout; });
    real("init_std", "truncated-normal init std", [](auto& c) -> auto& { return c.model.init_std; });
    flag("key_padding_mask", "mask padding keys in attention", [](auto& c) -> auto& { return c.model.key_padding_mask; });

    count("epochs", "training epochs", [](auto& c) -> auto& { return c.train.epochs; });
    count("batch_size", "windows per batch N", [](auto& c) -> auto& { return c.train.batch_size; });
    real("learning_rate", "Adam learning rate", [](auto& c) -> auto& { return c.train.learning_rate; });
    real("adam_beta1", "Adam beta1", [](auto& c) -> auto& { return c.train.adam_beta1; });
    real("adam_beta2", "Adam beta2", [](auto& c) -> auto& { return c.train.adam_beta2; });
    real("adam_eps", "Adam epsilon", [](auto& c) -> auto& { return c.train.adam_eps; });
    real("decay_gamma", "learning-rate decay factor", [](auto& c) -> auto& { return c.train.decay_gamma; });
    count("decay_every", "epochs between decays", [](auto& c) -> auto& { return c.train.decay_every; });
    count("num_views", "masked views per window m", [](auto& c) -> auto& { return c.train.num_views; });
    real("mask_prob", "cloze mask proportion rho", [](auto& c) -> auto& { return c.train.mask_prob; });
    real("tau", "contrastive temperature", [](auto& c) -> auto& { return c.train.tau; });
    real("alpha", "theta smoothing rate", [](auto& c) -> auto& { return c.train.alpha; });
    real("lambda", "contrastive rescaling factor", [](auto& c) -> auto& { return c.train.lambda; });
    flag("contrastive", "enable the contrastive loss", [](auto& c) -> auto& { return c.train.contrastive; });
    s.push_back({"representation", KeyKind::choice, "flatten|mean_pool",
                 [](const RunConfig& c) {
                   return std::string(c.train.representation == Representation::flatten ? "flatten" : "mean_pool");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "flatten") c.train.representation = Representation::flatten;
                   else if (v == "mean_pool") c.train.representation = Representation::mean_pool;
                   else throw ConfigError("representation: expected flatten or mean_pool, got '" + v + "'");
                 }});
    s.push_back({"cl_reduction", KeyKind::choice, "mean|sum",
                 [](const RunConfig& c) { return std::string(c.train.cl_reduction == Reduction::mean ? "mean" : "sum"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "mean") c.train.cl_reduction = Reduction::mean;
                   else if (v == "sum") c.train.cl_reduction = Reduction::sum;
                   else throw ConfigError("cl_reduction: expected mean or sum, got '" + v + "'");
                 }});
    s.push_back({"negatives", KeyKind::choice, "sequence|target: items a cloze negative must avoid",
                 [](const RunConfig& c) {
                   return std::string(c.train.negatives == NegativeExclusion::sequence ? "sequence" : "target");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "sequence") c.train.negatives = NegativeExclusion::sequence;
                   else if (v == "target") c.train.negatives = NegativeExclusion::target;
                   else throw ConfigError("negatives: expected sequence or target, got '" + v + "'");
                 }});
    count("stride", "slide-window stride", [](auto& c) -> auto& { return c.train.stride; });
    s.push_back({"seed", KeyKind::count, "global seed",
                 [](const RunConfig& c) { return std::to_string(c.train.seed); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.seed = parse_count("seed", v);
                   c.model.seed = c.train.seed;
                 }});
    real("clip_norm", "global gradient-norm clip, 0 = off", [](auto& c) -> auto& { return c.train.clip_norm; });
    flag("filter_seen", "drop context items from the ranking", [](auto& c) -> auto& { return c.train.eval.filter_seen; });
    s.push_back({"ks", KeyKind::text, "metric cutoffs, comma separated",
                 [](const RunConfig& c) { return ks_str(c.train.eval.ks); },
                 [](RunConfig& c, const std::string& v) { c.train.eval.ks = parse_ks("ks", v); }});
    count("eval_batch_size", "histories per evaluation forward", [](auto& c) -> auto& { return c.train.eval.batch_size; });
    return s;
  }();
  return schema;
}

inline const ConfigKey& find_key(const std::string& key) {
  for (const auto& k : config_schema())
    if (k.key == key) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, detail::trim(value));
}

// Lines of key=value; '#' starts a comment, blank lines are ignored.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& origin = "config") {
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + " line " + std::to_string(n) + ": expected key=value");
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + " line " + std::to_string(n) + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  apply_config_text(cfg, in, path);
}

inline std::string config_echo(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_schema()) out += k.key + "=" + k.get(cfg) + "\n";
  return out;
}

// Checks everything that does not depend on the dataset (vocab size is
// filled in once the data is loaded).
inline void validate_run_config(const RunConfig& cfg) {
  ModelConfig m = cfg.model;
  if (m.vocab_size == 0) m.vocab_size = data::kFirstItem + 1;
  m.validate();
  cfg.train.validate();
  if (cfg.name.find('/') != std::string::npos) throw ConfigError("name must not contain '/'");
}

}  // namespace cbit
