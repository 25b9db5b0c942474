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

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pcldcg/errors.hpp"
#include "pcldcg/model.hpp"

namespace pcldcg {

enum class NegativeSampling { kUniform, kPopularity };

/// Everything a training run depends on. Keys of the text form match the
/// member names.
struct TrainConfig {
  // Architecture.
  std::size_t d = 32;
  std::size_t d_e = 16;
  std::size_t K = 5;
  std::size_t L = 2;
  std::size_t n_max = 50;
  // Optimization.
  std::size_t B = 256;
  std::size_t epochs = 30;
  double lr = 1e-3;
  // Temperatures and loss weights.
  double T_aisl = 1.0;
  double T_ssl = 0.1;
  double alpha_m = 0.999;
  double alpha_self = 0.1;
  double beta_p = 0.1;
  // Prototypes.
  std::size_t n_clusters = 10;
  std::size_t r = 5;
  double keep_ratio = 0.8;
  std::size_t J_neg = 4;
  Relaxation relaxation_mode = Relaxation::kTailCumsum;
  double gamma_init = 5.0;
  double tau_min = 0.05;
  std::size_t refresh_every = 1;
  std::uint64_t seed = 42;

  // Optional keys.
  std::size_t d_f = 8;
  std::size_t aisl_hidden = 32;
  std::size_t tower_hidden = 64;
  std::size_t n_buckets = 8;
  bool use_position = true;
  CombineMode score_combine = CombineMode::kTelescoped;
  std::size_t positions_per_user = 4;
  std::size_t J_self = 0;  // 0: in-batch negatives
  std::size_t cluster_cap = 0;  // 0: cluster every item
  std::size_t kmeans_iters = 50;
  NegativeSampling negative_sampling = NegativeSampling::kUniform;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double divergence_threshold = 1e3;
};

namespace config_detail {

struct Key {
  std::string name;
  bool required;
  std::string doc;
  std::function<void(TrainConfig&, std::string_view)> parse;
  std::function<std::string(const TrainConfig&)> format;
};

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("key '" + std::string(key) + "': expected a non-negative integer, got '" +
                      std::string(s) + "'");
  }
  return v;
}

inline double parse_real(std::string_view key, std::string_view s) {
  std::string text(s);
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
    throw ConfigError("key '" + std::string(key) + "': expected a finite number, got '" + text + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("key '" + std::string(key) + "': expected true or false, got '" + std::string(s) + "'");
}

template <typename T>
Key size_key(const char* name, bool required, const char* doc, T TrainConfig::*m) {
  return {name, required, doc,
          [m, name](TrainConfig& c, std::string_view s) { c.*m = T(parse_uint(name, s)); },
          [m](const TrainConfig& c) { return std::to_string(c.*m); }};
}

inline Key real_key(const char* name, bool required, const char* doc, double TrainConfig::*m) {
  return {name, required, doc,
          [m, name](TrainConfig& c, std::string_view s) { c.*m = parse_real(name, s); },
          [m](const TrainConfig& c) { return fmt_double(c.*m); }};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    using C = TrainConfig;
    std::vector<Key> k = {
        size_key("d", true, "output embedding width of both towers", &C::d),
        size_key("d_e", true, "item-id and category embedding width", &C::d_e),
        size_key("K", true, "number of interest embeddings per user", &C::K),
        size_key("L", true, "number of layers in the interest selection MLP", &C::L),
        size_key("n_max", true, "maximum behavior history length", &C::n_max),
        size_key("B", true, "mini-batch size (positives per step)", &C::B),
        size_key("epochs", true, "training epochs", &C::epochs),
        real_key("lr", true, "Adam learning rate", &C::lr),
        real_key("T_aisl", true, "temperature of the soft interest mask", &C::T_aisl),
        real_key("T_ssl", true, "InfoNCE temperature", &C::T_ssl),
        real_key("alpha_m", true, "key-encoder momentum, in (0, 1)", &C::alpha_m),
        real_key("alpha_self", true, "weight of the InfoNCE loss", &C::alpha_self),
        real_key("beta_p", true, "weight of the prototype loss", &C::beta_p),
        size_key("n_clusters", true, "number of k-means prototypes |C|", &C::n_clusters),
        size_key("r", true, "negative prototypes per item", &C::r),
        real_key("keep_ratio", true, "share of feature coordinates kept by augmentation", &C::keep_ratio),
        size_key("J_neg", true, "sampled negatives per positive in the main loss", &C::J_neg),
        {"relaxation_mode", true, "soft mask relaxation: tail_cumsum or softmax",
         [](C& c, std::string_view s) {
           if (s == "tail_cumsum") c.relaxation_mode = Relaxation::kTailCumsum;
           else if (s == "softmax") c.relaxation_mode = Relaxation::kSoftmax;
           else throw ConfigError("key 'relaxation_mode': expected tail_cumsum or softmax, got '" + std::string(s) + "'");
         },
         [](const C& c) {
           return std::string(c.relaxation_mode == Relaxation::kTailCumsum ? "tail_cumsum" : "softmax");
         }},
        real_key("gamma_init", true, "initial logit scale", &C::gamma_init),
        real_key("tau_min", true, "lower clamp of prototype temperatures", &C::tau_min),
        size_key("refresh_every", true, "epochs between prototype refreshes", &C::refresh_every),
        size_key("seed", true, "master random seed", &C::seed),
        size_key("d_f", false, "activity/demographic feature embedding width", &C::d_f),
        size_key("aisl_hidden", false, "hidden width of the interest selection MLP", &C::aisl_hidden),
        size_key("tower_hidden", false, "hidden width of the item tower", &C::tower_hidden),
        size_key("n_buckets", false, "number of log2 activity buckets", &C::n_buckets),
        {"use_position", false, "add recency position embeddings to behaviors",
         [](C& c, std::string_view s) { c.use_position = parse_bool("use_position", s); },
         [](const C& c) { return std::string(c.use_position ? "true" : "false"); }},
        {"score_combine", false, "interest combination: telescoped or penalty",
         [](C& c, std::string_view s) {
           if (s == "telescoped") c.score_combine = CombineMode::kTelescoped;
           else if (s == "penalty") c.score_combine = CombineMode::kPenalty;
           else throw ConfigError("key 'score_combine': expected telescoped or penalty, got '" + std::string(s) + "'");
         },
         [](const C& c) {
           return std::string(c.score_combine == CombineMode::kTelescoped ? "telescoped" : "penalty");
         }},
        size_key("positions_per_user", false, "training targets drawn per user per epoch", &C::positions_per_user),
        size_key("J_self", false, "sampled InfoNCE negatives; 0 uses the other in-batch items", &C::J_self),
        size_key("cluster_cap", false, "items clustered per refresh; 0 clusters all", &C::cluster_cap),
        size_key("kmeans_iters", false, "maximum Lloyd iterations per refresh", &C::kmeans_iters),
        {"negative_sampling", false, "main-loss negatives: uniform or popularity",
         [](C& c, std::string_view s) {
           if (s == "uniform") c.negative_sampling = NegativeSampling::kUniform;
           else if (s == "popularity") c.negative_sampling = NegativeSampling::kPopularity;
           else throw ConfigError("key 'negative_sampling': expected uniform or popularity, got '" + std::string(s) + "'");
         },
         [](const C& c) {
           return std::string(c.negative_sampling == NegativeSampling::kUniform ? "uniform" : "popularity");
         }},
        real_key("adam_beta1", false, "Adam first-moment decay", &C::adam_beta1),
        real_key("adam_beta2", false, "Adam second-moment decay", &C::adam_beta2),
        real_key("divergence_threshold", false, "abort when the total loss exceeds this", &C::divergence_threshold),
    };
    return k;
  }();
  return table;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace config_detail

/// Range checks; throws ConfigError naming the offending key.
inline void validate(const TrainConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.d >= 1, "d must be >= 1");
  need(c.d_e >= 1, "d_e must be >= 1");
  need(c.d_f >= 1, "d_f must be >= 1");
  need(c.K >= 1, "K must be >= 1");
  need(c.L >= 1, "L must be >= 1");
  need(c.n_max >= 1, "n_max must be >= 1");
  need(c.B >= 1, "B must be >= 1");
  need(c.lr > 0, "lr must be > 0");
  need(c.T_aisl > 0, "T_aisl must be > 0");
  need(c.T_ssl > 0, "T_ssl must be > 0");
  need(c.alpha_m > 0 && c.alpha_m < 1, "alpha_m must lie in (0, 1)");
  need(c.alpha_self >= 0, "alpha_self must be >= 0");
  need(c.beta_p >= 0, "beta_p must be >= 0");
  need(c.alpha_self == 0 || c.B >= 2 || c.J_self > 0, "B must be >= 2 when alpha_self > 0");
  need(c.beta_p == 0 || c.n_clusters >= 2, "n_clusters must be >= 2 when beta_p > 0");
  need(c.beta_p == 0 || (c.r >= 1 && c.r <= c.n_clusters - 1), "r must lie in [1, n_clusters - 1]");
  need(c.keep_ratio > 0 && c.keep_ratio <= 1, "keep_ratio must lie in (0, 1]");
  need(c.J_neg >= 1, "J_neg must be >= 1");
  need(c.tau_min > 0, "tau_min must be > 0");
  need(c.refresh_every >= 1, "refresh_every must be >= 1");
  need(c.aisl_hidden >= 1 && c.tower_hidden >= 1, "hidden widths must be >= 1");
  need(c.n_buckets >= 1, "n_buckets must be >= 1");
  need(c.positions_per_user >= 1, "positions_per_user must be >= 1");
  need(c.kmeans_iters >= 1, "kmeans_iters must be >= 1");
  need(c.adam_beta1 >= 0 && c.adam_beta1 < 1, "adam_beta1 must lie in [0, 1)");
  need(c.adam_beta2 >= 0 && c.adam_beta2 < 1, "adam_beta2 must lie in [0, 1)");
  need(c.divergence_threshold > 0, "divergence_threshold must be > 0");
}

/// Parses `key = value` lines. '#' starts a comment. Every required key must
/// appear exactly once; unknown keys are errors.
inline TrainConfig parse_config(std::string_view text) {
  std::map<std::string_view, const config_detail::Key*> by_name;
  for (const auto& k : config_detail::keys()) by_name[k.name] = &k;
  TrainConfig c;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view s = line;
    if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = config_detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = config_detail::trim(s.substr(0, eq));
    const auto value = config_detail::trim(s.substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second) {
      throw ConfigError("config key '" + std::string(key) + "' given twice");
    }
    it->second->parse(c, value);
  }
  for (const auto& k : config_detail::keys()) {
    if (k.required && !seen.count(k.name)) throw ConfigError("missing config key '" + k.name + "'");
  }
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key in table order as `key = value`; parse_config(to_text(c)) == c.
inline std::string to_text(const TrainConfig& c, bool with_docs = false) {
  std::string out;
  for (const auto& k : config_detail::keys()) {
    if (with_docs) out += "# " + k.doc + (k.required ? "" : " (optional)") + "\n";
    out += k.name + " = " + k.format(c) + "\n";
  }
  return out;
}

/// One line per key, for --help.
inline std::string describe_keys() {
  std::string out;
  for (const auto& k : config_detail::keys()) {
    std::string name = k.name;
    name.resize(std::max<std::size_t>(name.size(), 22), ' ');
    out += "  " + name + k.doc + (k.required ? "" : " (optional)") + "\n";
  }
  return out;
}

/// FNV-1a over the canonical text.
inline std::uint64_t config_hash(const TrainConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_text(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline ModelConfig model_config(const TrainConfig& c, std::size_t n_items, std::size_t n_categories) {
  ModelConfig m;
  m.n_items = n_items;
  m.n_categories = n_categories;
  m.n_buckets = c.n_buckets;
  m.d = c.d;
  m.d_e = c.d_e;
  m.d_f = c.d_f;
  m.K = c.K;
  m.L = c.L;
  m.aisl_hidden = c.aisl_hidden;
  m.tower_hidden = c.tower_hidden;
  m.n_max = c.n_max;
  m.T_aisl = c.T_aisl;
  m.gamma_init = c.gamma_init;
  m.relaxation = c.relaxation_mode;
  m.combine = c.score_combine;
  m.use_position = c.use_position;
  return m;
}

}  // namespace pcldcg
