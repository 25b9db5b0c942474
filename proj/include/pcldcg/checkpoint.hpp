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

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>
#include <zlib.h>

#include "pcldcg/config.hpp"
#include "pcldcg/errors.hpp"
#include "pcldcg/training.hpp"

namespace pcldcg {

// Layout, all integers little-endian:
//   "PCLDCG1" | u16 version | u64 config hash | u32 tensor count |
//   tensor* | u32 CRC32 of every preceding byte
//   tensor = u32 name length | name | u32 rank | u64 dim * rank | f32 * numel
inline constexpr char kCheckpointMagic[] = "PCLDCG1";
inline constexpr std::size_t kMagicSize = 7;
inline constexpr std::uint16_t kCheckpointVersion = 1;

using TensorMap = std::map<std::string, Tensor<float>>;

namespace ckpt_detail {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(char((std::uint64_t(v) >> (8 * i)) & 0xff));
  }
  void put_f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put(u);
  }
  void put_raw(const std::string& s) { bytes_ += s; }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return T(v);
  }
  float get_f32() {
    const auto u = get<std::uint32_t>();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::string get_raw(std::size_t n) {
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IntegrityError("checkpoint is truncated");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view s) {
  return std::uint32_t(::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()), uInt(s.size())));
}

}  // namespace ckpt_detail

// --- byte payloads for non-float metadata ----------------------------------

inline Tensor<float> bytes_tensor(std::string_view bytes) {
  Tensor<float> t({bytes.size()});
  for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = float(std::uint8_t(bytes[i]));
  return t;
}

inline std::string tensor_bytes(const Tensor<float>& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (!(v >= 0 && v <= 255 && v == float(int(v)))) throw FormatError("byte tensor holds a non-byte value");
    s[i] = char(int(v));
  }
  return s;
}

template <typename T>
Tensor<float> pod_tensor(const std::vector<T>& values) {
  std::string s(values.size() * sizeof(T), '\0');
  if (!values.empty()) std::memcpy(s.data(), values.data(), s.size());
  return bytes_tensor(s);
}

template <typename T>
std::vector<T> tensor_pods(const Tensor<float>& t) {
  const auto s = tensor_bytes(t);
  if (s.size() % sizeof(T) != 0) throw FormatError("byte tensor has the wrong length");
  std::vector<T> out(s.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), s.data(), s.size());
  return out;
}

// --- raw container ----------------------------------------------------------

inline std::string encode_checkpoint(const TensorMap& tensors, std::uint64_t config_hash) {
  ckpt_detail::Writer w;
  w.put_raw(std::string(kCheckpointMagic, kMagicSize));
  w.put(kCheckpointVersion);
  w.put(config_hash);
  w.put(std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.put(std::uint32_t(name.size()));
    w.put_raw(name);
    w.put(std::uint32_t(t.shape().size()));
    for (auto d : t.shape()) w.put(std::uint64_t(d));
    for (float v : t.values()) w.put_f32(v);
  }
  w.put(ckpt_detail::crc32_of(w.bytes()));
  return std::move(w.bytes());
}

struct DecodedCheckpoint {
  std::uint64_t config_hash = 0;
  TensorMap tensors;
};

inline DecodedCheckpoint decode_checkpoint(std::string_view data) {
  if (data.size() < kMagicSize || data.substr(0, kMagicSize) != std::string_view(kCheckpointMagic, kMagicSize)) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  ckpt_detail::Reader header(data.substr(kMagicSize));
  const auto version = header.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  if (data.size() < kMagicSize + 2 + 8 + 4 + 4) throw IntegrityError("checkpoint is truncated");
  const auto body = data.substr(0, data.size() - 4);
  ckpt_detail::Reader tail(data.substr(data.size() - 4));
  if (tail.get<std::uint32_t>() != ckpt_detail::crc32_of(body)) {
    throw IntegrityError("checkpoint checksum mismatch (file is corrupt or truncated)");
  }
  ckpt_detail::Reader r(body.substr(kMagicSize + 2));
  DecodedCheckpoint out;
  out.config_hash = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_raw(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(std::size_t(r.get<std::uint64_t>()));
    if (numel(shape) * 4 > r.remaining()) throw IntegrityError("checkpoint is truncated in '" + name + "'");
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = r.get_f32();
    out.tensors.emplace(name, std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor");
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- training state -----------------------------------------------------------

inline TensorMap state_tensors(TrainState& s) {
  TensorMap m;
  m["meta.config"] = bytes_tensor(to_text(s.config));
  m["meta.epoch"] = pod_tensor(std::vector<std::uint64_t>{s.epoch});
  m["meta.n_categories"] = pod_tensor(std::vector<std::uint64_t>{s.model.config().n_categories});
  m["meta.item_category"] = pod_tensor(std::vector<std::uint64_t>(s.model.item_category().begin(),
                                                                   s.model.item_category().end()));
  auto params = s.model.parameters();
  for (const auto& p : params) m["model." + p.name] = p.tensor->cast<float>();
  const char* key_names[] = {"tower_w1", "tower_b1", "tower_w2", "tower_b2"};
  auto key = s.key.tensors();
  for (std::size_t i = 0; i < key.size(); ++i) m[std::string("key.") + key_names[i]] = *key[i];
  m["adam.step"] = pod_tensor(std::vector<std::uint64_t>{s.adam.step});
  for (std::size_t i = 0; i < s.adam.m.size(); ++i) {
    m["adam.m." + params[i].name] = s.adam.m[i];
    m["adam.v." + params[i].name] = s.adam.v[i];
  }
  if (!s.prototypes.empty()) {
    const auto& p = s.prototypes;
    m["proto.centroids"] = p.centroids;
    m["proto.assignment"] = pod_tensor(p.assignment);
    m["proto.sizes"] = pod_tensor(std::vector<std::uint64_t>(p.sizes.begin(), p.sizes.end()));
    m["proto.tau"] = pod_tensor(p.tau);
    m["proto.epoch"] = pod_tensor(std::vector<std::uint64_t>{p.epoch});
  }
  for (auto& [name, t] : m) t.set_requires_grad(false);
  return m;
}

inline void save_checkpoint(TrainState& s, const std::string& path) {
  write_file(path, encode_checkpoint(state_tensors(s), config_hash(s.config)));
}

/// A stored config that differs from `expected` is only accepted with `force`.
inline void check_config_hash(std::uint64_t stored, std::uint64_t expected, bool force) {
  if (stored == expected) return;
  spdlog::warn("checkpoint config hash {:016x} differs from the requested config {:016x}", stored, expected);
  if (!force) throw ConfigError("checkpoint was written with a different config; pass --force to continue anyway");
}

inline TrainState state_from_tensors(const DecodedCheckpoint& ck) {
  const auto& m = ck.tensors;
  auto get = [&](const std::string& name) -> const Tensor<float>& {
    auto it = m.find(name);
    if (it == m.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  };
  auto scalar_u64 = [&](const std::string& name) {
    auto v = tensor_pods<std::uint64_t>(get(name));
    if (v.size() != 1) throw FormatError("tensor '" + name + "' is not a scalar");
    return v[0];
  };
  TrainState s;
  s.config = parse_config(tensor_bytes(get("meta.config")));
  if (config_hash(s.config) != ck.config_hash) throw IntegrityError("header config hash does not match the stored config");
  s.epoch = scalar_u64("meta.epoch");
  auto cats64 = tensor_pods<std::uint64_t>(get("meta.item_category"));
  std::vector<std::size_t> cats(cats64.begin(), cats64.end());
  Rng unused(0);
  s.model = TwoTowerModel<float>(model_config(s.config, cats.size(), std::size_t(scalar_u64("meta.n_categories"))),
                                 cats, unused);
  auto assign = [&](const std::string& name, Tensor<float>& dst) {
    const auto& src = get(name);
    if (src.shape() != dst.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + to_string(src.shape()) + ", expected " +
                        to_string(dst.shape()));
    }
    const bool grad = dst.requires_grad();
    dst = src;
    dst.set_requires_grad(grad);
  };
  auto params = s.model.parameters();
  for (const auto& p : params) assign("model." + p.name, *p.tensor);
  s.key = KeyEncoderState<float>::copy_of(s.model.params().tower, s.config.alpha_m);
  const char* key_names[] = {"tower_w1", "tower_b1", "tower_w2", "tower_b2"};
  auto key = s.key.tensors();
  for (std::size_t i = 0; i < key.size(); ++i) assign(std::string("key.") + key_names[i], *key[i]);
  s.adam.lr = s.config.lr;
  s.adam.beta1 = s.config.adam_beta1;
  s.adam.beta2 = s.config.adam_beta2;
  s.adam.step = scalar_u64("adam.step");
  if (m.count("adam.m." + params[0].name)) {
    for (const auto& p : params) {
      s.adam.m.emplace_back(p.tensor->shape());
      s.adam.v.emplace_back(p.tensor->shape());
      assign("adam.m." + p.name, s.adam.m.back());
      assign("adam.v." + p.name, s.adam.v.back());
    }
  }
  if (m.count("proto.centroids")) {
    auto& p = s.prototypes;
    p.centroids = get("proto.centroids");
    p.assignment = tensor_pods<std::int64_t>(get("proto.assignment"));
    auto sizes = tensor_pods<std::uint64_t>(get("proto.sizes"));
    p.sizes.assign(sizes.begin(), sizes.end());
    p.tau = tensor_pods<double>(get("proto.tau"));
    p.epoch = scalar_u64("proto.epoch");
    if (p.tau.size() != p.sizes.size() || p.centroids.rows() != p.sizes.size()) {
      throw FormatError("prototype tensors disagree on the cluster count");
    }
  }
  return s;
}

inline TrainState load_checkpoint(const std::string& path) {
  return state_from_tensors(decode_checkpoint(read_file(path)));
}

}  // namespace pcldcg
