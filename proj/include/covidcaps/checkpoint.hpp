/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Binary checkpoint layout (all integers u32 little-endian):
//
//   "CCAP" | version | config_len | config text (config_len bytes)
//   then one record per tensor until end of file:
//   name_len | name | rank | dims[rank] | values (f32 LE, row-major)
//
// The config text is the canonical ArchitectureConfig text followed by one
// `trainable.<name>=0|1` line per non-buffer parameter.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "covidcaps/model.hpp"

namespace covidcaps {

inline constexpr char kCheckpointMagic[4] = {'C', 'C', 'A', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what,
                        pos_);
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <std::floating_point T>
std::string serialize_checkpoint(const ModelGraph<T>& model) {
  std::string config = to_canonical_text(model.config());
  for (const auto& p : model.params().entries()) {
    if (p.buffer) continue;
    config += "trainable." + p.name + "=" + (p.trainable ? "1" : "0") + "\n";
  }
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  for (const auto& p : model.params().entries()) {
    const auto& t = p.var.value();
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : t.data()) {
      detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

template <std::floating_point T>
ModelGraph<T> deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes);
  const std::string magic = in.raw(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const std::size_t version_at = in.offset();
  const auto version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version),
                      version_at);
  }
  const auto config_len = in.u32("config length");
  const std::size_t config_at = in.offset();
  const std::string text = in.raw(config_len, "config block");

  ArchitectureConfig cfg;
  std::map<std::string, std::string> kv;
  try {
    kv = parse_key_values(text);
    cfg = from_canonical_text(kv);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad config block: ") + e.what(), config_at);
  }
  ModelGraph<T> model;
  try {
    model = build_model<T>(cfg);
  } catch (const Error& e) {
    throw FormatError(std::string("config block does not build: ") + e.what(),
                      config_at);
  }

  std::set<std::string> seen;
  while (!in.at_end()) {
    const std::size_t record_at = in.offset();
    const auto name_len = in.u32("name length");
    const std::string name = in.raw(name_len, "name");
    if (!model.params().contains(name)) {
      throw FormatError("unknown parameter " + name, record_at);
    }
    auto& p = model.params().at(name);
    const auto rank = in.u32("rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.u32("dims"));
    if (shape != p.var.value().shape()) {
      throw FormatError("parameter " + name + " has shape " + shape_string(shape) +
                            ", model expects " + shape_string(p.var.value().shape()),
                        record_at);
    }
    Tensor<T> t(shape);
    for (T& v : t.data()) v = static_cast<T>(std::bit_cast<float>(in.u32("values")));
    p.var.mutable_value() = std::move(t);
    seen.insert(name);
  }
  for (auto& p : model.params().entries()) {
    if (!seen.count(p.name)) {
      throw FormatError("checkpoint lacks parameter " + p.name, bytes.size());
    }
    if (p.buffer) continue;
    auto it = kv.find("trainable." + p.name);
    if (it == kv.end()) {
      throw FormatError("config block lacks trainable flag for " + p.name, config_at);
    }
    p.trainable = it->second == "1";
    p.var.set_requires_grad(p.trainable);
  }
  return model;
}

template <std::floating_point T>
void save_checkpoint(const ModelGraph<T>& model, const std::string& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

template <std::floating_point T>
ModelGraph<T> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file_bytes(path));
}

}  // namespace covidcaps
