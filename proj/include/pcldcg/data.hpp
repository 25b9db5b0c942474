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

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "pcldcg/errors.hpp"
#include "pcldcg/rng.hpp"

namespace pcldcg {

// ---------------------------------------------------------------------------
// Interaction logs
// ---------------------------------------------------------------------------

/// One user-item event. An empty category means the item has none.
struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  std::string category;

  friend bool operator==(const Interaction&, const Interaction&) = default;
  friend auto operator<=>(const Interaction&, const Interaction&) = default;
};

struct InteractionLog {
  std::vector<Interaction> records;
};

struct IngestReport {
  std::size_t rows = 0;
  std::size_t loaded = 0;
  std::size_t malformed = 0;
  std::size_t duplicates = 0;
  std::vector<std::string> malformed_examples;  // first five, "line N: text"
};

struct IngestResult {
  InteractionLog log;
  IngestReport report;
};

enum class LogFormat { kAuto, kCsv, kJsonl };

inline constexpr std::string_view kInteractionsHeader = "user_id,item_id,timestamp,category";
inline constexpr double kMaxMalformedShare = 0.10;

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

inline bool parse_timestamp(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && out >= 0;
}

// Deduplicates (user, item, timestamp) and fills the report.
class LogBuilder {
 public:
  explicit LogBuilder(IngestReport& report) : report_(report) {}

  void accept(Interaction rec) {
    auto key = std::make_tuple(rec.user_id, rec.item_id, rec.timestamp);
    if (!seen_.insert(std::move(key)).second) {
      ++report_.duplicates;
      return;
    }
    log_.records.push_back(std::move(rec));
    ++report_.loaded;
  }

  void reject(std::size_t line_no, std::string_view text) {
    ++report_.malformed;
    if (report_.malformed_examples.size() < 5) {
      report_.malformed_examples.push_back("line " + std::to_string(line_no) + ": " +
                                           std::string(text));
    }
  }

  InteractionLog take() { return std::move(log_); }

 private:
  IngestReport& report_;
  InteractionLog log_;
  std::set<std::tuple<std::string, std::string, std::int64_t>> seen_;
};

inline void finish_report(const IngestReport& report, const std::string& source) {
  if (report.duplicates > 0) {
    spdlog::warn("{}: dropped {} duplicate (user, item, timestamp) rows", source,
                 report.duplicates);
  }
  if (report.malformed > 0) {
    spdlog::warn("{}: skipped {} malformed rows", source, report.malformed);
  }
  if (report.rows > 0 && double(report.malformed) > kMaxMalformedShare * double(report.rows)) {
    std::string msg = source + ": " + std::to_string(report.malformed) + " of " +
                      std::to_string(report.rows) + " rows are malformed; first offenders:";
    for (const auto& ex : report.malformed_examples) msg += "\n  " + ex;
    throw DataError(msg);
  }
}

}  // namespace detail

inline IngestResult parse_interactions_csv(std::istream& in, const std::string& source = "<csv>") {
  IngestResult result;
  detail::LogBuilder builder(result.report);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) return result;
  ++line_no;
  if (detail::trim_cr(line) != kInteractionsHeader) {
    throw DataError(source + ": expected header '" + std::string(kInteractionsHeader) +
                    "', got '" + std::string(detail::trim_cr(line)) + "'");
  }
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view text = detail::trim_cr(line);
    if (text.empty()) continue;
    ++result.report.rows;
    auto fields = detail::split(text, ',');
    Interaction rec;
    if ((fields.size() != 3 && fields.size() != 4) || fields[0].empty() || fields[1].empty() ||
        !detail::parse_timestamp(fields[2], rec.timestamp)) {
      builder.reject(line_no, text);
      continue;
    }
    rec.user_id = fields[0];
    rec.item_id = fields[1];
    if (fields.size() == 4) rec.category = fields[3];
    builder.accept(std::move(rec));
  }
  result.log = builder.take();
  detail::finish_report(result.report, source);
  return result;
}

inline IngestResult parse_interactions_jsonl(std::istream& in,
                                             const std::string& source = "<jsonl>") {
  IngestResult result;
  detail::LogBuilder builder(result.report);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view text = detail::trim_cr(line);
    if (text.empty()) continue;
    ++result.report.rows;
    auto j = nlohmann::json::parse(text, nullptr, false);
    Interaction rec;
    bool ok = j.is_object() && j.contains("user_id") && j["user_id"].is_string() &&
              j.contains("item_id") && j["item_id"].is_string() && j.contains("timestamp");
    if (ok) {
      const auto& ts = j["timestamp"];
      if (ts.is_number_integer()) {
        rec.timestamp = ts.get<std::int64_t>();
        ok = rec.timestamp >= 0;
      } else if (ts.is_string()) {
        ok = detail::parse_timestamp(ts.get<std::string>(), rec.timestamp);
      } else {
        ok = false;
      }
    }
    if (ok && j.contains("category") && !j["category"].is_null()) {
      ok = j["category"].is_string();
      if (ok) rec.category = j["category"].get<std::string>();
    }
    if (ok) {
      rec.user_id = j["user_id"].get<std::string>();
      rec.item_id = j["item_id"].get<std::string>();
      ok = !rec.user_id.empty() && !rec.item_id.empty();
    }
    if (!ok) {
      builder.reject(line_no, text);
      continue;
    }
    builder.accept(std::move(rec));
  }
  result.log = builder.take();
  detail::finish_report(result.report, source);
  return result;
}

/// Loads a CSV or JSON-lines interaction file. kAuto picks JSON-lines for a
/// ".jsonl" extension and CSV otherwise.
inline IngestResult ingest_interactions(const std::string& path, LogFormat format = LogFormat::kAuto) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open interactions file '" + path + "'");
  if (format == LogFormat::kAuto) {
    format = path.size() >= 6 && path.compare(path.size() - 6, 6, ".jsonl") == 0 ? LogFormat::kJsonl
                                                                                 : LogFormat::kCsv;
  }
  return format == LogFormat::kJsonl ? parse_interactions_jsonl(in, path)
                                     : parse_interactions_csv(in, path);
}

inline void write_interactions_csv(const InteractionLog& log, std::ostream& out) {
  out << kInteractionsHeader << '\n';
  for (const auto& r : log.records) {
    out << r.user_id << ',' << r.item_id << ',' << r.timestamp << ',' << r.category << '\n';
  }
}

inline void export_interactions(const InteractionLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_interactions_csv(log, out);
  if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Dense indices for users, items and categories, assigned in sorted id order
/// so they do not depend on row order.
struct Vocab {
  static constexpr std::size_t kNoCategory = static_cast<std::size_t>(-1);

  std::vector<std::string> users;
  std::vector<std::string> items;
  std::vector<std::string> categories;
  std::unordered_map<std::string, std::size_t> user_index;
  std::unordered_map<std::string, std::size_t> item_index;
  std::unordered_map<std::string, std::size_t> category_index;
  std::vector<std::size_t> user_counts;
  std::vector<std::size_t> item_counts;
  std::vector<std::size_t> category_counts;
  // Category of each item (first non-empty one seen), or kNoCategory.
  std::vector<std::size_t> item_category;

  std::size_t n_users() const { return users.size(); }
  std::size_t n_items() const { return items.size(); }
  std::size_t n_categories() const { return categories.size(); }
};

inline Vocab build_vocab(const InteractionLog& log) {
  std::set<std::string> us, is, cs;
  for (const auto& r : log.records) {
    us.insert(r.user_id);
    is.insert(r.item_id);
    if (!r.category.empty()) cs.insert(r.category);
  }
  Vocab v;
  v.users.assign(us.begin(), us.end());
  v.items.assign(is.begin(), is.end());
  v.categories.assign(cs.begin(), cs.end());
  for (std::size_t i = 0; i < v.users.size(); ++i) v.user_index[v.users[i]] = i;
  for (std::size_t i = 0; i < v.items.size(); ++i) v.item_index[v.items[i]] = i;
  for (std::size_t i = 0; i < v.categories.size(); ++i) v.category_index[v.categories[i]] = i;
  v.user_counts.assign(v.users.size(), 0);
  v.item_counts.assign(v.items.size(), 0);
  v.category_counts.assign(v.categories.size(), 0);
  v.item_category.assign(v.items.size(), Vocab::kNoCategory);
  for (const auto& r : log.records) {
    const std::size_t item = v.item_index.at(r.item_id);
    ++v.user_counts[v.user_index.at(r.user_id)];
    ++v.item_counts[item];
    if (!r.category.empty()) {
      const std::size_t c = v.category_index.at(r.category);
      ++v.category_counts[c];
      if (v.item_category[item] == Vocab::kNoCategory) v.item_category[item] = c;
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Sequences and splits
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultActivityBuckets = 8;

/// min(floor(log2(1 + count)), n_buckets - 1).
inline std::size_t activity_bucket(std::size_t count, std::size_t n_buckets = kDefaultActivityBuckets) {
  if (n_buckets == 0) throw ParameterError("activity buckets must be positive");
  std::size_t b = 0;
  std::uint64_t v = std::uint64_t(count) + 1;
  while (v > 1) {
    v >>= 1;
    ++b;
  }
  return std::min(b, n_buckets - 1);
}

struct UserSequence {
  std::size_t user = 0;
  std::vector<std::size_t> items;  // ascending by time, at most n_max
  std::size_t interaction_count = 0;  // before truncation
  std::vector<std::size_t> demographics;  // f_b; empty when unavailable
};

inline std::size_t activity_features(const UserSequence& seq,
                                     std::size_t n_buckets = kDefaultActivityBuckets) {
  return activity_bucket(seq.interaction_count, n_buckets);
}

/// Per-user item sequences sorted by time (stable, so equal timestamps keep
/// input order), keeping the most recent n_max.
inline std::vector<UserSequence> build_sequences(const InteractionLog& log, const Vocab& vocab,
                                                 std::size_t n_max) {
  if (n_max == 0) throw ParameterError("n_max must be positive");
  std::vector<std::vector<std::pair<std::int64_t, std::size_t>>> per_user(vocab.n_users());
  for (const auto& r : log.records) {
    per_user[vocab.user_index.at(r.user_id)].emplace_back(r.timestamp,
                                                          vocab.item_index.at(r.item_id));
  }
  std::vector<UserSequence> out;
  out.reserve(per_user.size());
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& events = per_user[u];
    if (events.empty()) continue;
    std::stable_sort(events.begin(), events.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    UserSequence s;
    s.user = u;
    s.interaction_count = events.size();
    const std::size_t start = events.size() > n_max ? events.size() - n_max : 0;
    for (std::size_t i = start; i < events.size(); ++i) s.items.push_back(events[i].second);
    out.push_back(std::move(s));
  }
  return out;
}

inline constexpr std::size_t kMinTestInteractions = 3;

struct TestCase {
  std::size_t user = 0;
  std::size_t target = 0;
  std::size_t train_sequence = 0;  // index into DatasetSplit::train
};

struct DatasetSplit {
  std::vector<UserSequence> train;
  std::vector<TestCase> test;
};

/// Leave-last-out: users with at least three interactions give their final
/// item to the test set; everyone else trains on the full sequence. Earlier
/// occurrences of a held-out item are removed from that user's training
/// sequence so the target never leaks.
inline DatasetSplit split_leave_last_out(const std::vector<UserSequence>& sequences) {
  DatasetSplit split;
  if (sequences.empty()) {
    spdlog::warn("split_leave_last_out: empty corpus");
    return split;
  }
  for (const auto& seq : sequences) {
    UserSequence train = seq;
    if (seq.interaction_count >= kMinTestInteractions && seq.items.size() >= 2) {
      const std::size_t target = seq.items.back();
      train.items.pop_back();
      std::erase(train.items, target);
      train.interaction_count = seq.interaction_count - 1;
      split.test.push_back({seq.user, target, split.train.size()});
    }
    split.train.push_back(std::move(train));
  }
  return split;
}

/// Sorted item indices each user interacted with, over the whole log.
inline std::vector<std::vector<std::size_t>> interaction_sets(const InteractionLog& log,
                                                              const Vocab& vocab) {
  std::vector<std::vector<std::size_t>> sets(vocab.n_users());
  for (const auto& r : log.records) {
    sets[vocab.user_index.at(r.user_id)].push_back(vocab.item_index.at(r.item_id));
  }
  for (auto& s : sets) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// A training target: item `sequence.items[position]` predicted from the items
/// before it.
struct TrainPosition {
  std::size_t sequence = 0;
  std::size_t position = 0;
};

struct BatchSample {
  std::size_t sequence = 0;  // index into DatasetSplit::train
  std::size_t position = 0;  // history is items[0, position)
  std::size_t candidate = 0;
  float label = 0.0f;
};

/// Draws negatives uniformly, or proportionally to item counts when
/// constructed with popularity weights.
class NegativeSampler {
 public:
  explicit NegativeSampler(std::size_t n_items) : n_items_(n_items), uniform_(0, n_items ? n_items - 1 : 0) {
    if (n_items < 2) throw ParameterError("negative sampling needs at least two items");
  }
  NegativeSampler(std::size_t n_items, const std::vector<std::size_t>& counts)
      : NegativeSampler(n_items) {
    std::vector<double> w(counts.begin(), counts.end());
    for (auto& x : w) x += 1.0;
    weighted_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    popularity_ = true;
  }

  /// An item different from `positive`.
  std::size_t draw(std::size_t positive, Rng& rng) {
    while (true) {
      std::size_t c = popularity_ ? weighted_(rng) : uniform_(rng);
      if (c != positive) return c;
    }
  }

  std::size_t n_items() const { return n_items_; }

 private:
  std::size_t n_items_;
  std::uniform_int_distribution<std::size_t> uniform_;
  std::discrete_distribution<std::size_t> weighted_;
  bool popularity_ = false;
};

/// Every position t >= 1 of every training sequence.
inline std::vector<TrainPosition> all_train_positions(const DatasetSplit& split) {
  std::vector<TrainPosition> out;
  for (std::size_t s = 0; s < split.train.size(); ++s) {
    for (std::size_t t = 1; t < split.train[s].items.size(); ++t) out.push_back({s, t});
  }
  return out;
}

/// Positive-first layout: for each positive, one row with label 1 followed by
/// `negatives_per_positive` rows with label 0.
inline std::vector<BatchSample> expand_with_negatives(const DatasetSplit& split,
                                                      std::span<const TrainPosition> positives,
                                                      std::size_t negatives_per_positive,
                                                      NegativeSampler& sampler, Rng& rng) {
  std::vector<BatchSample> out;
  out.reserve(positives.size() * (1 + negatives_per_positive));
  for (const auto& p : positives) {
    const std::size_t item = split.train.at(p.sequence).items.at(p.position);
    out.push_back({p.sequence, p.position, item, 1.0f});
    for (std::size_t j = 0; j < negatives_per_positive; ++j) {
      out.push_back({p.sequence, p.position, sampler.draw(item, rng), 0.0f});
    }
  }
  return out;
}

/// B uniformly chosen training positions, each followed by J_neg uniform
/// negatives.
inline std::vector<BatchSample> sample_training_batch(const DatasetSplit& split, std::size_t n_items,
                                                      std::size_t batch_size,
                                                      std::size_t negatives_per_positive, Rng& rng) {
  auto positions = all_train_positions(split);
  if (positions.empty()) throw ContractError("sample_training_batch: no training positions");
  std::uniform_int_distribution<std::size_t> pick(0, positions.size() - 1);
  std::vector<TrainPosition> chosen;
  for (std::size_t b = 0; b < batch_size; ++b) chosen.push_back(positions[pick(rng)]);
  NegativeSampler sampler(n_items);
  return expand_with_negatives(split, chosen, negatives_per_positive, sampler, rng);
}

inline constexpr std::size_t kEvalNegatives = 100;

struct EvalCandidates {
  std::vector<std::size_t> negatives;
  bool reduced = false;  // fewer than 100 eligible items existed
};

/// 100 distinct items outside `interacted` (sorted) and different from the
/// positive. With fewer eligible items, all of them are returned and the
/// result is flagged.
inline EvalCandidates sample_eval_candidates(std::span<const std::size_t> interacted,
                                             std::size_t positive, std::size_t n_items, Rng& rng,
                                             std::size_t count = kEvalNegatives) {
  auto excluded = [&](std::size_t i) {
    return i == positive || std::binary_search(interacted.begin(), interacted.end(), i);
  };
  std::size_t n_excluded = 0;
  for (std::size_t i : interacted) n_excluded += i < n_items ? 1 : 0;
  if (!std::binary_search(interacted.begin(), interacted.end(), positive) && positive < n_items)
    ++n_excluded;
  const std::size_t eligible = n_items - std::min(n_items, n_excluded);

  EvalCandidates out;
  if (eligible <= 2 * count) {
    std::vector<std::size_t> pool;
    pool.reserve(eligible);
    for (std::size_t i = 0; i < n_items; ++i)
      if (!excluded(i)) pool.push_back(i);
    if (pool.size() <= count) {
      out.negatives = std::move(pool);
      out.reduced = out.negatives.size() < count;
      return out;
    }
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, pool.size() - 1);
      std::swap(pool[i], pool[d(rng)]);
    }
    pool.resize(count);
    out.negatives = std::move(pool);
    return out;
  }
  std::uniform_int_distribution<std::size_t> d(0, n_items - 1);
  std::unordered_set<std::size_t> taken;
  while (out.negatives.size() < count) {
    const std::size_t c = d(rng);
    if (excluded(c) || !taken.insert(c).second) continue;
    out.negatives.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct ActivityTier {
  std::string name;
  std::size_t interactions = 0;
};

enum class BreadthMode {
  kTier,    // tier i (0-based) prefers min(i + 1, 3) categories
  kRandom,  // 1-3 categories uniformly, independent of tier
};

struct SynthConfig {
  std::size_t n_users = 1000;
  std::size_t n_items = 1000;
  std::size_t n_categories = 10;
  std::vector<ActivityTier> tiers = {{"low", 6}, {"mid", 16}, {"high", 40}};
  BreadthMode breadth = BreadthMode::kTier;
  double preferred_share = 0.9;
};

struct UserTruth {
  std::string user_id;
  std::string tier;
  std::size_t tier_index = 0;
  std::vector<std::size_t> preferred_categories;
};

struct SyntheticData {
  InteractionLog log;
  std::vector<std::string> item_ids;
  std::vector<std::size_t> item_category;  // by generator index
  std::vector<UserTruth> users;
};

/// Parses "low:5,high:50" into tiers.
inline std::vector<ActivityTier> parse_tiers(std::string_view text) {
  std::vector<ActivityTier> out;
  for (auto part : detail::split(text, ',')) {
    auto kv = detail::split(part, ':');
    std::size_t n = 0;
    if (kv.size() != 2 || kv[0].empty() ||
        std::from_chars(kv[1].data(), kv[1].data() + kv[1].size(), n).ec != std::errc() || n == 0) {
      throw ParameterError("bad tier '" + std::string(part) + "', expected name:count");
    }
    out.push_back({std::string(kv[0]), n});
  }
  if (out.empty()) throw ParameterError("at least one activeness tier is required");
  return out;
}

inline std::string category_name(std::size_t c) { return "c" + std::to_string(c); }

/// Items are split into contiguous, near-equal category blocks. Each user gets
/// a tier (uniformly), 1-3 preferred categories, and exactly the tier's count
/// of distinct items: `preferred_share` of draws from a preferred category,
/// the rest uniform over all items.
inline SyntheticData generate_synthetic(const SynthConfig& cfg, Rng& rng) {
  if (cfg.n_items == 0 || cfg.n_users == 0) throw ParameterError("synthetic data needs users and items");
  if (cfg.n_categories == 0 || cfg.n_categories > cfg.n_items) {
    throw ParameterError("n_categories (" + std::to_string(cfg.n_categories) +
                         ") must be in [1, n_items=" + std::to_string(cfg.n_items) + "]");
  }
  if (cfg.tiers.empty()) throw ParameterError("at least one activeness tier is required");
  for (const auto& t : cfg.tiers) {
    if (t.interactions == 0 || t.interactions > cfg.n_items) {
      throw ParameterError("tier '" + t.name + "' interaction count must be in [1, n_items]");
    }
  }
  if (!(cfg.preferred_share >= 0.0 && cfg.preferred_share <= 1.0)) {
    throw ParameterError("preferred_share must lie in [0, 1]");
  }

  SyntheticData out;
  const std::size_t C = cfg.n_categories;
  std::vector<std::vector<std::size_t>> members(C);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    const std::size_t c = i * C / cfg.n_items;
    out.item_ids.push_back("i" + std::to_string(i));
    out.item_category.push_back(c);
    members[c].push_back(i);
  }

  std::uniform_int_distribution<std::size_t> pick_tier(0, cfg.tiers.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_item(0, cfg.n_items - 1);
  std::bernoulli_distribution preferred(cfg.preferred_share);
  const std::size_t max_breadth = std::min<std::size_t>(3, C);
  std::uniform_int_distribution<std::size_t> pick_breadth(1, max_breadth);

  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    UserTruth truth;
    truth.user_id = "u" + std::to_string(u);
    truth.tier_index = pick_tier(rng);
    truth.tier = cfg.tiers[truth.tier_index].name;
    const std::size_t breadth = cfg.breadth == BreadthMode::kTier
                                    ? std::min(truth.tier_index + 1, max_breadth)
                                    : pick_breadth(rng);
    std::vector<std::size_t> cats(C);
    std::iota(cats.begin(), cats.end(), 0);
    for (std::size_t k = 0; k < breadth; ++k) {
      std::uniform_int_distribution<std::size_t> d(k, C - 1);
      std::swap(cats[k], cats[d(rng)]);
    }
    cats.resize(breadth);
    std::sort(cats.begin(), cats.end());
    truth.preferred_categories = cats;

    std::size_t preferred_pool = 0;
    for (std::size_t c : cats) preferred_pool += members[c].size();
    std::unordered_set<std::size_t> used;
    const std::size_t count = cfg.tiers[truth.tier_index].interactions;
    std::uniform_int_distribution<std::size_t> pick_cat(0, cats.size() - 1);
    std::size_t used_preferred = 0;
    for (std::size_t k = 0; k < count; ++k) {
      std::size_t item = 0;
      const bool from_preferred = preferred(rng) && used_preferred < preferred_pool;
      while (true) {
        if (from_preferred) {
          const auto& m = members[cats[pick_cat(rng)]];
          item = m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)];
        } else {
          item = pick_item(rng);
        }
        if (used.insert(item).second) break;
      }
      if (std::binary_search(cats.begin(), cats.end(), out.item_category[item])) ++used_preferred;
      out.log.records.push_back({truth.user_id, out.item_ids[item],
                                 std::int64_t(1'600'000'000 + 3600 * k),
                                 category_name(out.item_category[item])});
    }
    out.users.push_back(std::move(truth));
  }
  return out;
}

inline void write_item_truth(const SyntheticData& data, std::ostream& out) {
  out << "item_id,category\n";
  for (std::size_t i = 0; i < data.item_ids.size(); ++i) {
    out << data.item_ids[i] << ',' << category_name(data.item_category[i]) << '\n';
  }
}

inline void write_user_truth(const SyntheticData& data, std::ostream& out) {
  out << "user_id,tier,preferred_categories\n";
  for (const auto& u : data.users) {
    out << u.user_id << ',' << u.tier << ',';
    for (std::size_t k = 0; k < u.preferred_categories.size(); ++k) {
      if (k) out << ';';
      out << category_name(u.preferred_categories[k]);
    }
    out << '\n';
  }
}

}  // namespace pcldcg
