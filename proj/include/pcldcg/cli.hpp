// Copyright 2026 The pcldcg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pcldcg/checkpoint.hpp"
#include "pcldcg/config.hpp"
#include "pcldcg/data.hpp"
#include "pcldcg/errors.hpp"
#include "pcldcg/eval.hpp"
#include "pcldcg/gradcheck_suite.hpp"
#include "pcldcg/training.hpp"

namespace pcldcg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace fs = std::filesystem;

struct SynthArgs {
  std::size_t users = 1000, items = 1000, categories = 10;
  std::string tiers = "low:6,mid:16,high:40";
  std::string breadth = "tier";
  double preferred_share = 0.9;
  std::uint64_t seed = 0;
  std::string out;
  bool overwrite = false;
};

struct TrainArgs {
  std::string config, data, out, resume, write_default_config;
  bool force = false;
};

struct EvalArgs {
  std::string checkpoint, data, out, n = "10,20";
  std::uint64_t seed = 0;
  bool all_users = false;
};

struct ExportArgs {
  std::string checkpoint, data, out, prototypes;
};

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::string inject_fault;
};

inline std::vector<std::size_t> parse_cutoffs(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t n = 0;
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), n);
    if (ec != std::errc() || p != part.data() + part.size() || n == 0) {
      throw ParameterError("--n expects positive integers separated by commas, got '" + s + "'");
    }
    out.push_back(n);
  }
  if (out.empty()) throw ParameterError("--n needs at least one cutoff");
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline int run_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig cfg;
  cfg.n_users = a.users;
  cfg.n_items = a.items;
  cfg.n_categories = a.categories;
  cfg.tiers = parse_tiers(a.tiers);
  cfg.preferred_share = a.preferred_share;
  if (a.breadth == "tier") cfg.breadth = BreadthMode::kTier;
  else if (a.breadth == "random") cfg.breadth = BreadthMode::kRandom;
  else throw ParameterError("--breadth must be tier or random");
  Rng rng = make_rng(a.seed, Stream::kData);
  auto data = generate_synthetic(cfg, rng);

  const fs::path dir(a.out);
  const fs::path files[] = {dir / "interactions.csv", dir / "items.csv", dir / "users.csv"};
  if (!a.overwrite) {
    for (const auto& f : files) {
      if (fs::exists(f)) throw IoError("'" + f.string() + "' exists; pass --overwrite to replace it");
    }
  }
  fs::create_directories(dir);
  export_interactions(data.log, files[0].string());
  std::ostringstream items, users;
  write_item_truth(data, items);
  write_user_truth(data, users);
  write_text(files[1].string(), items.str());
  write_text(files[2].string(), users.str());

  char line[128];
  out << "dataset    #users    #items  #interactions  #categories\n";
  std::snprintf(line, sizeof line, "synthetic %7zu %9zu %14zu %12zu\n", cfg.n_users, cfg.n_items,
                data.log.records.size(), cfg.n_categories);
  out << line;
  return kExitOk;
}

inline Corpus load_corpus(const std::string& path, std::size_t n_max) {
  return build_corpus(ingest_interactions(path).log, n_max);
}

inline int run_train(const TrainArgs& a, std::ostream& out) {
  if (!a.write_default_config.empty()) {
    write_text(a.write_default_config, to_text(TrainConfig{}, /*with_docs=*/true));
    out << "wrote " << a.write_default_config << "\n";
    return kExitOk;
  }
  if (a.data.empty() || a.out.empty()) throw CLI::ValidationError("train", "--data and --out are required");
  if (a.config.empty() && a.resume.empty()) throw CLI::ValidationError("train", "--config or --resume is required");

  TrainState state;
  std::optional<TrainConfig> requested;
  if (!a.config.empty()) requested = load_config(a.config);
  if (!a.resume.empty()) {
    auto ck = decode_checkpoint(read_file(a.resume));
    if (requested) check_config_hash(ck.config_hash, config_hash(*requested), a.force);
    state = state_from_tensors(ck);
    if (requested) {
      state.config = *requested;
      state.key.momentum = requested->alpha_m;
      state.adam.lr = requested->lr;
      state.adam.beta1 = requested->adam_beta1;
      state.adam.beta2 = requested->adam_beta2;
    }
    spdlog::info("resuming from {} after epoch {}", a.resume, state.epoch);
  }
  const TrainConfig& cfg = requested ? *requested : state.config;
  Corpus corpus = load_corpus(a.data, cfg.n_max);
  if (a.resume.empty()) {
    state = init_state(cfg, corpus);
  } else if (state.model.config().n_items != corpus.vocab.n_items()) {
    throw ConfigError("checkpoint has " + std::to_string(state.model.config().n_items) + " items but the data has " +
                      std::to_string(corpus.vocab.n_items()));
  }

  fs::create_directories(a.out);
  const std::string ckpt = (fs::path(a.out) / "model.ckpt").string();
  const std::string log_path = (fs::path(a.out) / "epochs.jsonl").string();
  std::ofstream log(log_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write '" + log_path + "'");
  write_text((fs::path(a.out) / "config.cfg").string(), to_text(state.config));
  if (state.epoch == 0) save_checkpoint(state, ckpt);

  try {
    train(state, corpus, [&](const TrainState& s, const EpochLog& e) {
      log << epoch_log_json(e) << '\n';
      log.flush();
      save_checkpoint(const_cast<TrainState&>(s), ckpt);
    });
  } catch (const DivergenceError& e) {
    spdlog::error("training diverged: {}; last good checkpoint kept at {}", e.what(), ckpt);
    throw;
  }
  out << "trained " << state.epoch << " epochs; checkpoint " << ckpt << "\n";
  return kExitOk;
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  auto state = load_checkpoint(a.checkpoint);
  Corpus corpus = load_corpus(a.data, state.config.n_max);
  if (state.model.config().n_items != corpus.vocab.n_items()) {
    throw ConfigError("checkpoint has " + std::to_string(state.model.config().n_items) + " items but the data has " +
                      std::to_string(corpus.vocab.n_items()));
  }
  EvalOptions opt;
  opt.cutoffs = parse_cutoffs(a.n);
  opt.seed = a.seed;
  opt.ainpu_all_users = a.all_users;
  auto report = evaluate(state.model, corpus, opt, config_hash(state.config));
  const std::string text = report.to_json().dump(2) + "\n";
  out << text;
  if (!a.out.empty()) write_text(a.out, text);
  return kExitOk;
}

inline int run_export(const ExportArgs& a, std::ostream& out) {
  auto state = load_checkpoint(a.checkpoint);
  Corpus corpus = load_corpus(a.data, state.config.n_max);
  if (state.model.config().n_items != corpus.vocab.n_items()) {
    throw ConfigError("checkpoint and data disagree on the item count");
  }
  export_embeddings(build_index(state.model), corpus.vocab, a.out);
  out << "wrote " << corpus.vocab.n_items() << " item embeddings to " << a.out << "\n";
  if (!a.prototypes.empty()) {
    if (state.prototypes.empty()) throw ContractError("checkpoint holds no prototypes");
    std::ofstream p(a.prototypes);
    if (!p) throw IoError("cannot write '" + a.prototypes + "'");
    write_prototypes_csv(state.prototypes, p);
    out << "wrote " << state.prototypes.n_clusters() << " prototypes to " << a.prototypes << "\n";
  }
  return kExitOk;
}

inline int run_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  SuiteOptions opt;
  opt.seed = a.seed;
  opt.inject_fault = a.inject_fault;
  bool ok = true;
  char line[256];
  for (const auto& c : run_gradcheck_suite(opt)) {
    std::snprintf(line, sizeof line, "%-4s %-28s max_rel_error=%.3e\n", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                  c.result.max_rel_error);
    out << line;
    if (!c.passed) {
      out << "     worst " << c.result.worst_parameter << "[" << c.result.worst_index
          << "]: analytic=" << c.result.worst_analytic << " numeric=" << c.result.worst_numeric << "\n";
    }
    ok = ok && c.passed;
  }
  return ok ? kExitOk : kExitFailure;
}

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"pcldcg: multi-interest two-tower candidate generation with prototype contrastive learning"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic interaction log with planted categories");
  synth->add_option("--users", sa.users, "number of users")->capture_default_str();
  synth->add_option("--items", sa.items, "number of items")->capture_default_str();
  synth->add_option("--categories", sa.categories, "number of planted categories")->capture_default_str();
  synth->add_option("--tiers", sa.tiers, "activeness tiers as name:interactions,...")->capture_default_str();
  synth->add_option("--breadth", sa.breadth, "preferred-category count: tier (grows with tier) or random")
      ->capture_default_str();
  synth->add_option("--preferred-share", sa.preferred_share, "share of interactions in preferred categories")
      ->capture_default_str();
  synth->add_option("--seed", sa.seed, "random seed")->capture_default_str();
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_flag("--overwrite", sa.overwrite, "replace existing output files");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train a model and write checkpoint plus epoch log");
  trn->add_option("--config", ta.config, "config file (flat key = value)");
  trn->add_option("--data", ta.data, "interactions CSV or JSONL");
  trn->add_option("--out", ta.out, "output directory for model.ckpt and epochs.jsonl");
  trn->add_option("--resume", ta.resume, "checkpoint to continue from");
  trn->add_flag("--force", ta.force, "accept a checkpoint written with a different config");
  trn->add_option("--write-default-config", ta.write_default_config, "write the default config to a file and exit");
  trn->footer("Config keys:\n" + describe_keys());

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "leave-last-out HR@N, NDCG@N and AINPU against 100 sampled negatives");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  ev->add_option("--data", ea.data, "interactions CSV or JSONL used for training")->required();
  ev->add_option("--n", ea.n, "comma-separated cutoffs")->capture_default_str();
  ev->add_option("--seed", ea.seed, "seed for negative sampling")->capture_default_str();
  ev->add_option("--out", ea.out, "also write the report to this file");
  ev->add_flag("--all-users", ea.all_users, "average AINPU over all users instead of test users");

  ExportArgs xa;
  auto* ex = app.add_subcommand("export", "write item embeddings (and prototypes) as CSV");
  ex->add_option("--checkpoint", xa.checkpoint, "checkpoint file")->required();
  ex->add_option("--data", xa.data, "interactions CSV or JSONL used for training")->required();
  ex->add_option("--out", xa.out, "embedding CSV path")->required();
  ex->add_option("--prototypes", xa.prototypes, "prototype CSV path");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of every primitive and the full model");
  gc->add_option("--seed", ga.seed, "seed for the random check points")->capture_default_str();
  gc->add_option("--inject-fault", ga.inject_fault, "")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (synth->parsed()) return run_synth(sa, out);
    if (trn->parsed()) return run_train(ta, out);
    if (ev->parsed()) return run_eval(ea, out);
    if (ex->parsed()) return run_export(xa, out);
    if (gc->parsed()) return run_gradcheck(ga, out);
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "parameter error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace pcldcg::cli
