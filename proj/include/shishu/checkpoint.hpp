// SPDX-License-Identifier: Apache-2.0
//
// Single-file weight container:
//
//   magic "SHISHUCKPT" | u32 version | u64 config_len | config text |
//   u64 n_records | records...
//
// record: u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u32 rank |
//         u64 extents[rank] | raw row-major little-endian payload
//
// Parameters appear in enumeration order; shared groups are stored once
// under the group name. Integers are little-endian.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "shishu/io.hpp"
#include "shishu/model.hpp"

namespace shishu {

inline constexpr char kCheckpointMagic[10] = {'S', 'H', 'I', 'S', 'H', 'U', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

template <typename S>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<S, float>) return 0;
  else if constexpr (std::is_same_v<S, double>) return 1;
  else static_assert(sizeof(S) == 0, "unsupported scalar");
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ModelWeights<S>& m, const std::filesystem::path& path) {
  std::string out;
  out.append(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = m.config.canonical_text();
  detail::put_le<std::uint64_t>(out, cfg.size());
  out += cfg;

  std::uint64_t n_records = 0;
  for_each_parameter(m, [&n_records](const std::string&, const Tensor<S>&) { ++n_records; });
  detail::put_le<std::uint64_t>(out, n_records);

  for_each_parameter(m, [&out](const std::string& name, const Tensor<S>& t) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(detail::dtype_tag<S>()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index e : t.shape) detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    const std::size_t bytes = t.data->size() * sizeof(S);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, t.data->data(), bytes);
  });
  atomic_write_file(path, out);
}

template <typename S>
ModelWeights<S> load_checkpoint(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  std::size_t pos = 0;
  if (in.size() < sizeof kCheckpointMagic ||
      std::memcmp(in.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  pos = sizeof kCheckpointMagic;
  const auto version = detail::get_le<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto cfg_len = detail::get_le<std::uint64_t>(in, pos);
  if (pos + cfg_len > in.size()) throw std::runtime_error("checkpoint: truncated config block");
  const std::string cfg_text = in.substr(pos, cfg_len);
  pos += cfg_len;
  const ModelConfig cfg = parse_model_config(cfg_text);

  // Allocate the exact layout the config implies, then fill by name.
  ModelWeights<S> m = build_model<S>(cfg, 0);
  const auto n_records = detail::get_le<std::uint64_t>(in, pos);

  std::map<std::string, Tensor<S>*> by_name;
  for_each_parameter(m, [&by_name](const std::string& name, Tensor<S>& t) { by_name[name] = &t; });
  if (n_records != by_name.size())
    throw std::runtime_error("checkpoint: record count " + std::to_string(n_records) +
                             " does not match config-implied " + std::to_string(by_name.size()));

  for (std::uint64_t r = 0; r < n_records; ++r) {
    const auto name_len = detail::get_le<std::uint32_t>(in, pos);
    if (pos + name_len > in.size()) throw std::runtime_error("checkpoint: truncated name");
    const std::string name = in.substr(pos, name_len);
    pos += name_len;
    const auto tag = detail::get_le<std::uint8_t>(in, pos);
    if (tag != detail::dtype_tag<S>())
      throw std::runtime_error("checkpoint: dtype mismatch for " + name);
    const auto rank = detail::get_le<std::uint32_t>(in, pos);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<Index>(detail::get_le<std::uint64_t>(in, pos));
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: unexpected parameter " + name);
    Tensor<S>& t = *it->second;
    if (t.shape != shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ", file has " +
                               shape_str(shape) + ", config implies " + shape_str(t.shape));
    const std::size_t bytes = t.data->size() * sizeof(S);
    if (pos + bytes > in.size()) throw std::runtime_error("checkpoint: truncated payload for " + name);
    std::memcpy(t.data->data(), in.data() + pos, bytes);
    pos += bytes;
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw std::runtime_error("checkpoint: missing parameter " + by_name.begin()->first);
  return m;
}

}  // namespace shishu
