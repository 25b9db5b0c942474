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

#include <filesystem>
#include <string>

#include "pcldcg/config.hpp"
#include "pcldcg/data.hpp"
#include "pcldcg/training.hpp"

namespace pcldcg::testing {

inline InteractionLog synthetic_log(std::size_t users, std::size_t items, std::size_t categories,
                                    std::uint64_t seed) {
  SynthConfig sc;
  sc.n_users = users;
  sc.n_items = items;
  sc.n_categories = categories;
  sc.tiers = {{"low", 5}, {"mid", 10}, {"high", 16}};
  Rng rng(seed);
  return generate_synthetic(sc, rng).log;
}

/// A config small enough that a few epochs run in well under a second.
inline TrainConfig small_config() {
  TrainConfig c;
  c.d = 8;
  c.d_e = 6;
  c.d_f = 4;
  c.K = 3;
  c.n_max = 20;
  c.aisl_hidden = 8;
  c.tower_hidden = 16;
  c.B = 16;
  c.epochs = 2;
  c.n_clusters = 4;
  c.r = 2;
  c.J_neg = 2;
  c.positions_per_user = 1;
  c.kmeans_iters = 20;
  c.seed = 7;
  return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("pcldcg_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace pcldcg::testing
