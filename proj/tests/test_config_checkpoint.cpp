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

#include <cstring>
#include <functional>
#include <limits>
#include <string>

#include <gtest/gtest.h>

#include "pcldcg/checkpoint.hpp"
#include "pcldcg/config.hpp"
#include "support/fixtures.hpp"

namespace pcldcg {
namespace {

std::string without_line(const std::string& text, const std::string& key) {
  std::string out, line;
  std::istringstream in(text);
  while (std::getline(in, line)) {
    if (line.rfind(key + " =", 0) == 0) continue;
    out += line + "\n";
  }
  return out;
}

template <typename E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected exception was not thrown";
  return {};
}

TEST(Config, DefaultTextRoundTrips) {
  TrainConfig c;
  const auto text = to_text(c, /*with_docs=*/true);
  const auto back = parse_config(text);
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, NonDefaultValuesSurviveRoundTrip) {
  TrainConfig c;
  c.lr = 0.0123;
  c.T_ssl = 0.07;
  c.relaxation_mode = Relaxation::kSoftmax;
  c.score_combine = CombineMode::kPenalty;
  c.negative_sampling = NegativeSampling::kPopularity;
  c.use_position = false;
  c.seed = std::numeric_limits<std::uint64_t>::max();
  const auto back = parse_config(to_text(c));
  EXPECT_EQ(back.lr, 0.0123);
  EXPECT_EQ(back.T_ssl, 0.07);
  EXPECT_EQ(back.relaxation_mode, Relaxation::kSoftmax);
  EXPECT_EQ(back.score_combine, CombineMode::kPenalty);
  EXPECT_EQ(back.negative_sampling, NegativeSampling::kPopularity);
  EXPECT_FALSE(back.use_position);
  EXPECT_EQ(back.seed, std::numeric_limits<std::uint64_t>::max());
}

TEST(Config, MissingRequiredKeyIsNamed) {
  const auto text = without_line(to_text(TrainConfig{}), "K");
  const auto msg = message_of<ConfigError>([&] { parse_config(text); });
  EXPECT_NE(msg.find("'K'"), std::string::npos) << msg;
}

TEST(Config, OptionalKeysMayBeOmitted) {
  const auto text = without_line(without_line(to_text(TrainConfig{}), "tower_hidden"), "J_self");
  EXPECT_EQ(parse_config(text).tower_hidden, TrainConfig{}.tower_hidden);
}

TEST(Config, UnknownAndDuplicateKeysAreErrors) {
  const auto base = to_text(TrainConfig{});
  auto msg = message_of<ConfigError>([&] { parse_config(base + "learning_rate = 0.1\n"); });
  EXPECT_NE(msg.find("learning_rate"), std::string::npos);
  msg = message_of<ConfigError>([&] { parse_config(base + "d = 16\n"); });
  EXPECT_NE(msg.find("twice"), std::string::npos);
  EXPECT_THROW(parse_config(base + "no equals sign\n"), ConfigError);
}

TEST(Config, CommentsAndBlankLinesAreIgnored) {
  const auto text = "# header\n\n" + to_text(TrainConfig{}) + "   # trailing comment\n";
  EXPECT_EQ(to_text(parse_config(text)), to_text(TrainConfig{}));
}

TEST(Config, BadValuesAreRejected) {
  const auto base = without_line(to_text(TrainConfig{}), "alpha_m");
  EXPECT_THROW(parse_config(base + "alpha_m = 1.0\n"), ConfigError);
  EXPECT_THROW(parse_config(base + "alpha_m = 0\n"), ConfigError);
  EXPECT_THROW(parse_config(base + "alpha_m = fast\n"), ConfigError);
  const auto no_b = without_line(to_text(TrainConfig{}), "B");
  EXPECT_THROW(parse_config(no_b + "B = 1\n"), ConfigError);
  const auto no_r = without_line(to_text(TrainConfig{}), "r");
  EXPECT_THROW(parse_config(no_r + "r = 10\n"), ConfigError);
  const auto no_k = without_line(to_text(TrainConfig{}), "K");
  EXPECT_THROW(parse_config(no_k + "K = -3\n"), ConfigError);
}

TEST(Config, HashTracksEveryKey) {
  TrainConfig a, b;
  b.keep_ratio = 0.75;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = a;
  b.cluster_cap = 100;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, HelpListsEveryKey) {
  const auto help = describe_keys();
  for (const auto& line : {"d_e", "alpha_self", "beta_p", "relaxation_mode", "divergence_threshold"}) {
    EXPECT_NE(help.find(line), std::string::npos) << line;
  }
}

// --- container ----------------------------------------------------------------

TEST(Checkpoint, ContainerRoundTripsTensors) {
  TensorMap m;
  m["a"] = Tensor<float>({2, 3}, {1, -2, 3.5f, 0, 1e-30f, -1e30f});
  m["b.c"] = Tensor<float>({4}, {0.1f, 0.2f, 0.3f, 0.4f});
  const auto bytes = encode_checkpoint(m, 0x1234abcdULL);
  EXPECT_EQ(bytes.substr(0, 7), "PCLDCG1");
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config_hash, 0x1234abcdULL);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (const auto& [name, t] : m) {
    const auto& u = back.tensors.at(name);
    EXPECT_EQ(u.shape(), t.shape());
    EXPECT_EQ(0, std::memcmp(u.values().data(), t.values().data(), t.values().size() * sizeof(float)));
  }
  EXPECT_EQ(encode_checkpoint(back.tensors, back.config_hash), bytes);
}

TEST(Checkpoint, ByteTensorsAreExact) {
  const std::vector<std::uint64_t> big = {0, 1, std::numeric_limits<std::uint64_t>::max(), 0x0123456789abcdefULL};
  EXPECT_EQ(tensor_pods<std::uint64_t>(pod_tensor(big)), big);
  const std::vector<double> reals = {0.1, 1.0 / 3.0, -1e-300, 6.02214076e23};
  EXPECT_EQ(tensor_pods<double>(pod_tensor(reals)), reals);
  EXPECT_EQ(tensor_bytes(bytes_tensor("k = v\n\xff")), "k = v\n\xff");
}

TEST(Checkpoint, CorruptPayloadByteIsAnIntegrityError) {
  TensorMap m;
  m["w"] = Tensor<float>({8}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto bytes = encode_checkpoint(m, 9);
  bytes[bytes.size() - 10] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(bytes), IntegrityError);
}

TEST(Checkpoint, TruncationIsAnIntegrityError) {
  TensorMap m;
  m["w"] = Tensor<float>({8}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto bytes = encode_checkpoint(m, 9);
  for (std::size_t keep : {std::size_t(12), bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, keep)), IntegrityError) << keep;
  }
}

TEST(Checkpoint, ForeignFilesAndVersionsAreRefused) {
  EXPECT_THROW(decode_checkpoint("GIF89a..."), FormatError);
  TensorMap m;
  m["w"] = Tensor<float>({1}, {1});
  auto bytes = encode_checkpoint(m, 0);
  bytes[7] = 2;  // version u16, little endian
  const auto msg = message_of<FormatError>([&] { decode_checkpoint(bytes); });
  EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("version 1"), std::string::npos) << msg;
}

TEST(Checkpoint, ConfigHashGuard) {
  EXPECT_NO_THROW(check_config_hash(5, 5, false));
  EXPECT_THROW(check_config_hash(5, 6, false), ConfigError);
  EXPECT_NO_THROW(check_config_hash(5, 6, true));
}

// --- training state -------------------------------------------------------------

class StateCheckpoint : public ::testing::Test {
 protected:
  void SetUp() override {
    spdlog::set_level(spdlog::level::warn);
    corpus = build_corpus(testing::synthetic_log(120, 60, 4, 3), 20);
    state = init_state(testing::small_config(), corpus);
    train_epoch(state, corpus);  // populates Adam moments and prototypes
  }
  Corpus corpus;
  TrainState state;
  testing::TempDir dir{"ckpt"};
};

TEST_F(StateCheckpoint, SaveLoadSaveIsByteIdentical) {
  ASSERT_FALSE(state.prototypes.empty());
  save_checkpoint(state, dir.file("a.ckpt"));
  auto loaded = load_checkpoint(dir.file("a.ckpt"));
  save_checkpoint(loaded, dir.file("b.ckpt"));
  EXPECT_EQ(read_file(dir.file("a.ckpt")), read_file(dir.file("b.ckpt")));
  EXPECT_EQ(loaded.epoch, state.epoch);
  EXPECT_EQ(loaded.adam.step, state.adam.step);
  EXPECT_EQ(loaded.prototypes.tau, state.prototypes.tau);
  EXPECT_EQ(loaded.prototypes.assignment, state.prototypes.assignment);
  EXPECT_EQ(to_text(loaded.config), to_text(state.config));
}

TEST_F(StateCheckpoint, HeaderHashMatchesConfig) {
  const auto decoded = decode_checkpoint(encode_checkpoint(state_tensors(state), config_hash(state.config)));
  EXPECT_EQ(decoded.config_hash, config_hash(state.config));
  auto forged = encode_checkpoint(state_tensors(state), config_hash(state.config) ^ 1);
  EXPECT_THROW(state_from_tensors(decode_checkpoint(forged)), IntegrityError);
}

TEST_F(StateCheckpoint, MissingFileIsAnIoError) {
  EXPECT_THROW(load_checkpoint(dir.file("absent.ckpt")), IoError);
}

}  // namespace
}  // namespace pcldcg
