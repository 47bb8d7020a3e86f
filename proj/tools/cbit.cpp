// cbit: preprocess, train, evaluate, dump-attention, config.
//
// Exit codes: 0 success, 1 usage or config error, 2 data or I/O error,
// 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbit/cbit.hpp"

namespace fs = std::filesystem;
using namespace cbit;

namespace {

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

// Every schema key becomes a --dashed flag. Values are kept as text and
// applied after the config file so flags win; a repeated flag keeps its
// last value.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
    for (const auto& k : config_schema()) {
      auto* opt = cmd.add_option(dashed(k.key), values[k.key], k.help)
                      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
      if (k.kind == KeyKind::flag) opt->expected(0, 1);
      options[k.key] = opt;
    }
  }

  bool given(const std::string& key) const { return options.at(key)->count() > 0; }

  // Defaults, then dataset hints, then config file, then flags.
  RunConfig resolve(const std::optional<std::size_t>& dataset_T = std::nullopt) const {
    RunConfig cfg;
    if (dataset_T) cfg.model.max_len = *dataset_T;
    if (!config_path.empty()) load_config_file(cfg, config_path);
    for (const auto& k : config_schema()) {
      if (!given(k.key)) continue;
      std::string v = values.at(k.key);
      if (k.kind == KeyKind::flag && v.empty()) v = "true";
      set_config_value(cfg, k.key, v);
    }
    return cfg;
  }
};

std::optional<std::size_t> dataset_window_hint(const fs::path& dir) {
  std::ifstream in(dir / "dataset.txt");
  std::string magic, version;
  std::size_t users = 0, items = 0, T = 0;
  if (in >> magic >> version >> users >> items) {
    std::string rest;
    std::getline(in, rest);
    std::istringstream tail(rest);
    if (tail >> T) return T;
  }
  return std::nullopt;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<std::size_t> parse_ks_arg(const std::string& text) {
  RunConfig tmp;
  set_config_value(tmp, "ks", text);
  return tmp.train.eval.ks;
}

nlohmann::ordered_json report_json(const MetricsReport& rep) {
  nlohmann::ordered_json j;
  j["users"] = rep.users;
  for (const auto& [k, e] : rep.at) j["metrics"][std::to_string(k)] = {{"hr", e.hr}, {"ndcg", e.ndcg}};
  return j;
}

// ---- preprocess -----------------------------------------------------------

struct PreprocessArgs {
  std::string input, out, format = "triplet";
  std::size_t min_user = 5, min_item = 5, slide_window = 0;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const auto format = data::parse_format(a.format);
  const data::FilterOptions filter{a.min_user, a.min_item};
  const auto ds = data::load_interactions(a.input, format, filter);
  std::optional<std::size_t> T;
  if (a.slide_window > 0) T = a.slide_window;
  data::save_dataset(a.out, ds, T);
  const std::string line = data::format_stats(ds.stats());
  write_text(fs::path(a.out) / "stats.txt", line + "\n");
  std::cout << line << '\n';
  return 0;
}

// ---- train ----------------------------------------------------------------

int cmd_train(const ConfigFlags& flags) {
  // Config problems surface before the dataset is touched.
  RunConfig cfg = flags.resolve();
  validate_run_config(cfg);
  cfg = flags.resolve(dataset_window_hint(cfg.data));
  validate_run_config(cfg);

  const auto loaded = data::load_dataset(cfg.data);
  cfg.model.vocab_size = loaded.dataset.vocab_size();
  cfg.model.validate();
  const auto split = data::leave_one_out(loaded.dataset);

  const fs::path run_dir = fs::path(cfg.runs_dir) / cfg.name;
  fs::create_directories(run_dir);
  write_text(run_dir / "config.echo", config_echo(cfg));

  std::ofstream log(run_dir / "train.log", std::ios::trunc);
  if (!log) throw DataError("cannot write " + (run_dir / "train.log").string());
  log << kTrainLogHeader << '\n';
  std::cout << kTrainLogHeader << '\n';

  FitHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec, bool improved, const ModelParams& params) {
    const std::string line = format_epoch(rec);
    log << line << '\n' << std::flush;
    std::cout << line << (improved ? "\t*" : "") << '\n' << std::flush;
    if (improved) save_checkpoint(run_dir / "best.ckpt", cfg.model, params);
  };
  const FitResult res = fit(cfg.model, init_params(cfg.model), split, cfg.train, hooks);

  std::ostringstream metrics;
  metrics << "split\tK\tHR\tNDCG\n";
  write_metrics(metrics, "validation", evaluate_split(res.best, cfg.model, split, SplitName::validation, cfg.train.eval));
  write_metrics(metrics, "test", evaluate_split(res.best, cfg.model, split, SplitName::test, cfg.train.eval));
  write_text(run_dir / "metrics.tsv", metrics.str());
  std::cout << "best_epoch\t" << res.best_epoch << '\n' << metrics.str();
  return 0;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint, data = "data", split = "test", ks = "5,10,20", out;
  bool filter_seen = false;
  std::size_t batch_size = 256;
};

Checkpoint load_matching_checkpoint(const std::string& path, const data::InteractionDataset& ds) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.config.vocab_size != ds.vocab_size())
    throw DataError("checkpoint " + path + " was trained on " + std::to_string(ck.config.num_items()) +
                    " items but the dataset has " + std::to_string(ds.num_items()) +
                    " (vocab sizes " + std::to_string(ck.config.vocab_size) + " vs " +
                    std::to_string(ds.vocab_size()) + ")");
  return ck;
}

int cmd_evaluate(const EvaluateArgs& a) {
  EvalOptions opt;
  opt.ks = parse_ks_arg(a.ks);
  opt.filter_seen = a.filter_seen;
  opt.batch_size = a.batch_size;
  if (opt.batch_size == 0) throw ConfigError("--batch-size must be positive");
  std::vector<std::pair<std::string, SplitName>> splits;
  if (a.split == "validation" || a.split == "both") splits.emplace_back("validation", SplitName::validation);
  if (a.split == "test" || a.split == "both") splits.emplace_back("test", SplitName::test);

  const auto loaded = data::load_dataset(a.data);
  const Checkpoint ck = load_matching_checkpoint(a.checkpoint, loaded.dataset);
  const auto split = data::leave_one_out(loaded.dataset);

  std::ostringstream rows;
  nlohmann::ordered_json summary;
  summary["checkpoint"] = a.checkpoint;
  summary["filter_seen"] = a.filter_seen;
  for (const auto& [name, which] : splits) {
    const auto rep = evaluate_split(ck.params, ck.config, split, which, opt);
    write_metrics(rows, name, rep);
    summary["splits"][name] = report_json(rep);
  }
  std::cout << rows.str() << "#summary " << summary.dump() << '\n';
  if (!a.out.empty()) write_text(a.out, rows.str());
  return 0;
}

// ---- dump-attention -------------------------------------------------------

struct AttentionArgs {
  std::string checkpoint, data = "data", out;
  std::size_t samples = 1;
  std::uint64_t seed = 42;
  bool average_heads = false;
};

int cmd_dump_attention(const AttentionArgs& a) {
  if (a.samples == 0) throw ConfigError("--samples must be positive");
  const auto loaded = data::load_dataset(a.data);
  const Checkpoint ck = load_matching_checkpoint(a.checkpoint, loaded.dataset);
  const auto split = data::leave_one_out(loaded.dataset);

  // Test contexts of a seeded sample of users, without replacement.
  std::vector<std::size_t> users(split.test.size());
  for (std::size_t i = 0; i < users.size(); ++i) users[i] = i;
  Rng rng(a.seed);
  rng.shuffle(users.begin(), users.end());
  users.resize(std::min(a.samples, users.size()));
  std::sort(users.begin(), users.end());
  std::vector<std::span<const std::size_t>> histories;
  for (std::size_t u : users) histories.emplace_back(split.test[u].context);

  auto maps = average_attention(ck.params, ck.config, histories);
  if (a.average_heads) maps = head_average(maps, ck.config.heads);

  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw DataError("cannot write " + a.out);
  write_attention(out, maps, ck.config.heads, a.average_heads);
  if (!out) throw DataError("write failed for " + a.out);
  std::cout << "wrote " << maps.size() << " matrices over " << histories.size() << " contexts to " << a.out << '\n';
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"CBiT sequential recommender"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "filter a raw interaction file and write a dataset directory");
  c_pre->add_option("--input", pre.input, "raw interactions")->required()->check(CLI::ExistingFile);
  c_pre->add_option("--out", pre.out, "output dataset directory")->required();
  c_pre->add_option("--format", pre.format, "triplet (user item timestamp) or sequence (user item...)")
      ->check(CLI::IsMember({"triplet", "sequence"}))
      ->capture_default_str();
  c_pre->add_option("--min-user", pre.min_user, "minimum interactions per user")->capture_default_str();
  c_pre->add_option("--min-item", pre.min_item, "minimum users per item")->capture_default_str();
  c_pre->add_option("--slide-window", pre.slide_window, "window length recorded in the dataset header");

  ConfigFlags train_flags;
  auto* c_train = app.add_subcommand("train", "train a model into runs_dir/name");
  train_flags.attach(c_train[0]);

  ConfigFlags config_flags;
  auto* c_config = app.add_subcommand("config", "print the resolved configuration");
  config_flags.attach(c_config[0]);

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "whole-set HR@K and NDCG@K of a checkpoint");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", ev.data, "dataset directory")->capture_default_str();
  c_eval->add_option("--split", ev.split)->check(CLI::IsMember({"validation", "test", "both"}))->capture_default_str();
  c_eval->add_option("--ks", ev.ks, "comma-separated cutoffs")->capture_default_str();
  c_eval->add_flag("--filter-seen", ev.filter_seen, "drop context items from the ranking");
  c_eval->add_option("--batch-size", ev.batch_size, "histories per forward pass")->capture_default_str();
  c_eval->add_option("--out", ev.out, "also write the metric rows here");

  AttentionArgs att;
  auto* c_att = app.add_subcommand("dump-attention", "average attention maps over sampled test contexts");
  c_att->add_option("--checkpoint", att.checkpoint)->required()->check(CLI::ExistingFile);
  c_att->add_option("--data", att.data, "dataset directory")->capture_default_str();
  c_att->add_option("--samples", att.samples, "number of contexts")->capture_default_str();
  c_att->add_option("--out", att.out, "output text file")->required();
  c_att->add_option("--seed", att.seed, "sampling seed")->capture_default_str();
  c_att->add_flag("--average-heads", att.average_heads, "also average over heads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*c_pre) return cmd_preprocess(pre);
  if (*c_train) return cmd_train(train_flags);
  if (*c_config) {
    RunConfig cfg = config_flags.resolve();
    validate_run_config(cfg);
    std::cout << config_echo(cfg);
    return 0;
  }
  if (*c_eval) return cmd_evaluate(ev);
  if (*c_att) return cmd_dump_attention(att);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 2;
  }
}
