// SPDX-License-Identifier: Apache-2.0
//
// Attention-budget ablation grids: a list of (bottom decoders, ShishuMLP
// layers, top decoders) stackings trained serially from one seed and corpus,
// with per-entry completion markers so an interrupted grid resumes to an
// identical summary.

#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "shishu/config.hpp"
#include "shishu/io.hpp"
#include "shishu/model.hpp"
#include "shishu/train.hpp"

namespace shishu {

struct AblationEntry {
  Index n_bottom = 0;
  Index n_top = 0;
  Index n_shishu = 0;

  Index total() const { return n_bottom + n_top + n_shishu; }

  // "b2_s10_t0" style tag, stable across runs.
  std::string tag() const {
    return "b" + std::to_string(n_bottom) + "_s" + std::to_string(n_shishu) + "_t" +
           std::to_string(n_top);
  }
};

struct AblationSpec {
  std::vector<AblationEntry> entries;
  ModelConfig model;  // layer fields filled per entry
  TrainConfig train;
};

namespace detail {

// "4+8" is bottom+shishu; "4+6+2" is bottom+shishu+top in stack order.
inline AblationEntry parse_entry(const std::string& text) {
  std::vector<long long> parts;
  std::string cur;
  for (char c : text + "+") {
    if (c == '+') {
      if (cur.empty()) throw std::invalid_argument("ablation: malformed entry '" + text + "'");
      std::size_t pos = 0;
      parts.push_back(std::stoll(cur, &pos));
      if (pos != cur.size()) throw std::invalid_argument("ablation: malformed entry '" + text + "'");
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (parts.size() != 2 && parts.size() != 3)
    throw std::invalid_argument("ablation: entry '" + text + "' needs 2 or 3 '+'-separated counts");
  AblationEntry e;
  e.n_bottom = static_cast<Index>(parts[0]);
  e.n_shishu = static_cast<Index>(parts[1]);
  e.n_top = parts.size() == 3 ? static_cast<Index>(parts[2]) : 0;
  if (e.n_bottom < 0 || e.n_shishu < 0 || e.n_top < 0)
    throw std::invalid_argument("ablation: negative layer count in '" + text + "'");
  return e;
}

}  // namespace detail

// The spec file is the shared config text plus an `entries` list; per-entry
// layer counts are the grid axis, so global layer keys are rejected.
inline AblationSpec parse_ablation_spec(const std::string& text) {
  auto kv = detail::parse_kv_text(text);
  const auto it = kv.find("entries");
  if (it == kv.end()) throw std::invalid_argument("ablation: spec has no entries key");
  const std::string entries_text = it->second;
  kv.erase("entries");
  for (const char* banned : {"n_layers", "n_decoder_layers", "n_top_decoder_layers"})
    if (kv.count(banned))
      throw std::invalid_argument(std::string("ablation: layer counts come from entries, not ") +
                                  banned);

  std::string rest;
  for (const auto& [k, v] : kv) rest += k + " = " + v + "\n";
  ParsedConfig base = parse_config_text(rest);

  AblationSpec spec;
  spec.model = base.model;
  spec.train = base.train;
  std::string cur;
  for (char c : entries_text + ",") {
    if (c == ',') {
      if (!cur.empty()) spec.entries.push_back(detail::parse_entry(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (spec.entries.empty()) throw std::invalid_argument("ablation: entries list is empty");
  const Index total = spec.entries.front().total();
  for (const auto& e : spec.entries)
    if (e.total() != total)
      throw std::invalid_argument("ablation: entries disagree on total layer count (" +
                                  std::to_string(e.total()) + " vs " + std::to_string(total) + ")");
  return spec;
}

inline ModelConfig entry_config(const AblationSpec& spec, const AblationEntry& e) {
  ModelConfig cfg = spec.model;
  cfg.n_layers = e.total();
  cfg.n_decoder_layers = e.n_bottom;
  cfg.n_top_decoder_layers = e.n_top;
  cfg.validate();
  return cfg;
}

struct AblationResult {
  AblationEntry entry;
  bool ok = false;
  bool resumed = false;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
  std::string error;
};

namespace detail {

// Full-precision form so resumed summaries are bit-identical.
inline std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string marker_text(const AblationResult& r) {
  std::string s = r.ok ? "ok" : "failed";
  s += '\n';
  s += format_full(r.train_loss) + "\n";
  s += format_full(r.val_loss) + "\n";
  s += format_full(r.val_ppl) + "\n";
  s += r.error + "\n";
  return s;
}

inline bool read_marker(const std::filesystem::path& p, AblationResult& r) {
  if (!std::filesystem::exists(p)) return false;
  std::istringstream in(read_file(p));
  std::string status;
  if (!std::getline(in, status)) return false;
  std::string tl, vl, vp;
  if (!std::getline(in, tl) || !std::getline(in, vl) || !std::getline(in, vp)) return false;
  std::getline(in, r.error);
  r.ok = status == "ok";
  r.train_loss = std::stod(tl);
  r.val_loss = std::stod(vl);
  r.val_ppl = std::stod(vp);
  r.resumed = true;
  return true;
}

}  // namespace detail

// Serial over entries. A completed entry leaves a marker file; rerunning
// skips it and reloads its numbers, so interrupted and uninterrupted runs
// emit the same summary. A failing entry is recorded and the grid continues.
inline std::vector<AblationResult> run_ablation(const AblationSpec& spec,
                                                const std::string& corpus_text,
                                                const std::filesystem::path& out_dir) {
  spec.train.validate();
  std::filesystem::create_directories(out_dir);
  std::vector<AblationResult> results;
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    const AblationEntry& e = spec.entries[i];
    const std::string name = "entry_" + std::to_string(i) + "_" + e.tag();
    const std::filesystem::path marker = out_dir / (name + ".done");

    AblationResult r;
    r.entry = e;
    if (detail::read_marker(marker, r)) {
      results.push_back(r);
      continue;
    }
    try {
      const ModelConfig cfg = entry_config(spec, e);
      auto model = build_model<float>(cfg, spec.train.seed);
      auto data = CorpusDataset::from_text(corpus_text, spec.train.block_size,
                                           spec.train.val_blocks, spec.train.seed);
      TrainResult tr = train(model, data, spec.train, out_dir / name);
      r.ok = true;
      r.train_loss = tr.rows.back().train_loss;
      r.val_loss = tr.final_val_loss;
      r.val_ppl = tr.final_val_ppl;
    } catch (const std::exception& ex) {
      r.ok = false;
      r.error = ex.what();
    }
    atomic_write_file(marker, detail::marker_text(r));
    results.push_back(r);
  }
  return results;
}

inline std::string ablation_summary_csv(const std::vector<AblationResult>& results,
                                        std::uint64_t seed, std::uint64_t config_hash) {
  std::string out = csv_provenance(seed, config_hash);
  out += "entry,n_bottom,n_top,n_shishu,train_loss,val_loss,val_ppl,status\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const AblationResult& r = results[i];
    out += std::to_string(i);
    out += ',' + std::to_string(r.entry.n_bottom);
    out += ',' + std::to_string(r.entry.n_top);
    out += ',' + std::to_string(r.entry.n_shishu);
    if (r.ok) {
      out += ',' + detail::format_full(r.train_loss);
      out += ',' + detail::format_full(r.val_loss);
      out += ',' + detail::format_full(r.val_ppl);
      out += ",ok";
    } else {
      out += ",,,,failed: " + r.error;
    }
    out += '\n';
  }
  return out;
}

}  // namespace shishu
