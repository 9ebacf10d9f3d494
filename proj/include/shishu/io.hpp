// SPDX-License-Identifier: Apache-2.0
//
// File plumbing shared by every artifact writer: atomic writes (no partial
// file is ever visible under its final name), a stable content hash for
// provenance lines, and the tool version string.

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace shishu {

inline constexpr const char* kToolVersion = "0.1.0";

// FNV-1a, 64-bit. Stable across platforms; used for config and weight hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// Write-temp-then-rename. The temp file lives next to the target so the
// rename stays within one filesystem.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("atomic_write_file: cannot open " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("atomic_write_file: short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_file: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shortest float form that still round-trips at CSV precision.
inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Comment header prepended to every CSV artifact. No timestamps: outputs are
// byte-reproducible for a fixed (seed, inputs).
inline std::string csv_provenance(std::uint64_t seed, std::uint64_t config_hash) {
  std::string s;
  s += "# tool_version=";
  s += kToolVersion;
  s += " seed=" + std::to_string(seed);
  s += " config_hash=" + hex64(config_hash);
  s += "\n";
  return s;
}

}  // namespace shishu
