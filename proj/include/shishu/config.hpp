// SPDX-License-Identifier: Apache-2.0
//
// Structured text configs. One flat key = value file can carry model and
// training keys together; each struct picks up its own keys and any key
// belonging to neither set is an error.

#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "shishu/io.hpp"
#include "shishu/tensor.hpp"

namespace shishu {

struct ModelConfig {
  Index hidden_size = 0;
  Index intermediate_size = 0;
  Index n_layers = 0;
  // -1 means every layer is a decoder block.
  Index n_decoder_layers = -1;
  Index n_top_decoder_layers = 0;
  Index pair_size = 2;
  Index n_heads = 0;
  Index n_kv_heads = 0;
  double rms_eps = 1e-5;
  double rope_theta = 10000.0;
  Index vocab_size = 0;
  Index max_seq_len = 0;
  bool tie_embeddings = true;

  Index head_dim() const { return hidden_size / n_heads; }
  Index kv_width() const { return n_kv_heads * head_dim(); }
  Index bottom_decoders() const { return n_decoder_layers < 0 ? n_layers : n_decoder_layers; }

  void validate() const {
    if (hidden_size <= 0) throw std::invalid_argument("config: hidden_size must be positive");
    if (intermediate_size <= 0) throw std::invalid_argument("config: intermediate_size must be positive");
    if (n_layers <= 0) throw std::invalid_argument("config: n_layers must be positive");
    if (n_heads <= 0) throw std::invalid_argument("config: n_heads must be positive");
    if (n_kv_heads <= 0) throw std::invalid_argument("config: n_kv_heads must be positive");
    if (vocab_size <= 0) throw std::invalid_argument("config: vocab_size must be positive");
    if (max_seq_len <= 0) throw std::invalid_argument("config: max_seq_len must be positive");
    if (hidden_size % n_heads != 0)
      throw std::invalid_argument("config: hidden_size not divisible by n_heads");
    if (n_heads % n_kv_heads != 0)
      throw std::invalid_argument("config: n_heads not divisible by n_kv_heads");
    if (head_dim() % 2 != 0) throw std::invalid_argument("config: head_dim must be even");
    if (rms_eps < 0) throw std::invalid_argument("config: rms_eps must be non-negative");
    if (pair_size <= 0) throw std::invalid_argument("config: pair_size must be positive");
    const Index nb = bottom_decoders();
    if (nb < 0 || nb + n_top_decoder_layers > n_layers)
      throw std::invalid_argument("config: decoder layer counts exceed n_layers");
    if ((n_layers - nb - n_top_decoder_layers) % pair_size != 0)
      throw std::invalid_argument("config: mlp layer count not divisible by pair_size");
  }

  // Fixed key order and formatting; the checkpoint embeds this text and the
  // provenance hash is computed over it.
  std::string canonical_text() const {
    std::ostringstream ss;
    ss << "hidden_size = " << hidden_size << "\n";
    ss << "intermediate_size = " << intermediate_size << "\n";
    ss << "n_layers = " << n_layers << "\n";
    ss << "n_decoder_layers = " << bottom_decoders() << "\n";
    ss << "n_top_decoder_layers = " << n_top_decoder_layers << "\n";
    ss << "pair_size = " << pair_size << "\n";
    ss << "n_heads = " << n_heads << "\n";
    ss << "n_kv_heads = " << n_kv_heads << "\n";
    ss << "rms_eps = " << format_real(rms_eps) << "\n";
    ss << "rope_theta = " << format_real(rope_theta) << "\n";
    ss << "vocab_size = " << vocab_size << "\n";
    ss << "max_seq_len = " << max_seq_len << "\n";
    ss << "tie_embeddings = " << (tie_embeddings ? "true" : "false") << "\n";
    return ss.str();
  }

  std::uint64_t hash() const { return fnv1a64(canonical_text()); }

  static std::string format_real(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  }
};

struct TrainConfig {
  double learning_rate = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 5e-3;
  double warmup_ratio = 0.05;
  Index total_steps = 0;
  Index effective_batch = 32;
  // 0 means one micro-batch per step (micro == effective).
  Index micro_batch = 0;
  Index block_size = 256;
  std::uint64_t seed = 42;
  Index eval_interval = 50;
  double adam_eps = 1e-8;
  // 0 disables clipping.
  double grad_clip = 0.0;
  Index val_blocks = 8;
  // 0 means checkpoint at the end only.
  Index checkpoint_interval = 0;

  Index micro() const { return micro_batch <= 0 ? effective_batch : micro_batch; }

  void validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("config: learning_rate must be positive");
    if (total_steps <= 0) throw std::invalid_argument("config: total_steps must be positive");
    if (effective_batch <= 0) throw std::invalid_argument("config: effective_batch must be positive");
    if (effective_batch % micro() != 0)
      throw std::invalid_argument("config: effective_batch not divisible by micro_batch");
    if (block_size <= 0) throw std::invalid_argument("config: block_size must be positive");
    if (warmup_ratio < 0 || warmup_ratio >= 1)
      throw std::invalid_argument("config: warmup_ratio must be in [0, 1)");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("config: betas must be in [0, 1)");
    if (weight_decay < 0) throw std::invalid_argument("config: weight_decay must be non-negative");
    if (eval_interval <= 0) throw std::invalid_argument("config: eval_interval must be positive");
    if (val_blocks < 0) throw std::invalid_argument("config: val_blocks must be non-negative");
  }

  std::string canonical_text() const {
    std::ostringstream ss;
    ss << "learning_rate = " << ModelConfig::format_real(learning_rate) << "\n";
    ss << "beta1 = " << ModelConfig::format_real(beta1) << "\n";
    ss << "beta2 = " << ModelConfig::format_real(beta2) << "\n";
    ss << "weight_decay = " << ModelConfig::format_real(weight_decay) << "\n";
    ss << "warmup_ratio = " << ModelConfig::format_real(warmup_ratio) << "\n";
    ss << "total_steps = " << total_steps << "\n";
    ss << "effective_batch = " << effective_batch << "\n";
    ss << "micro_batch = " << micro() << "\n";
    ss << "block_size = " << block_size << "\n";
    ss << "seed = " << seed << "\n";
    ss << "eval_interval = " << eval_interval << "\n";
    ss << "adam_eps = " << ModelConfig::format_real(adam_eps) << "\n";
    ss << "grad_clip = " << ModelConfig::format_real(grad_clip) << "\n";
    ss << "val_blocks = " << val_blocks << "\n";
    ss << "checkpoint_interval = " << checkpoint_interval << "\n";
    return ss.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw std::invalid_argument("config: empty key or value at line " + std::to_string(lineno));
    if (kv.count(key)) throw std::invalid_argument("config: duplicate key '" + key + "'");
    kv[key] = val;
  }
  return kv;
}

inline Index to_index(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<Index>(x);
  } catch (...) {
    throw std::invalid_argument("config: key '" + key + "' needs an integer, got '" + v + "'");
  }
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw std::invalid_argument("config: key '" + key + "' needs a real, got '" + v + "'");
  }
}

inline bool to_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key + "' needs true/false, got '" + v + "'");
}

}  // namespace detail

// Parses a flat key = value block. Model keys fill `model`, training keys
// fill `train`; anything else is an error. `saw_train` reports whether any
// training key appeared (count-params style commands accept model-only files).
struct ParsedConfig {
  ModelConfig model;
  TrainConfig train;
  bool saw_train = false;
};

inline ParsedConfig parse_config_text(const std::string& text) {
  ParsedConfig out;
  auto kv = detail::parse_kv_text(text);
  for (const auto& [key, val] : kv) {
    // model keys
    if (key == "hidden_size") out.model.hidden_size = detail::to_index(key, val);
    else if (key == "intermediate_size") out.model.intermediate_size = detail::to_index(key, val);
    else if (key == "n_layers") out.model.n_layers = detail::to_index(key, val);
    else if (key == "n_decoder_layers") out.model.n_decoder_layers = detail::to_index(key, val);
    else if (key == "n_top_decoder_layers") out.model.n_top_decoder_layers = detail::to_index(key, val);
    else if (key == "pair_size") out.model.pair_size = detail::to_index(key, val);
    else if (key == "n_heads") out.model.n_heads = detail::to_index(key, val);
    else if (key == "n_kv_heads") out.model.n_kv_heads = detail::to_index(key, val);
    else if (key == "rms_eps") out.model.rms_eps = detail::to_real(key, val);
    else if (key == "rope_theta") out.model.rope_theta = detail::to_real(key, val);
    else if (key == "vocab_size") out.model.vocab_size = detail::to_index(key, val);
    else if (key == "max_seq_len") out.model.max_seq_len = detail::to_index(key, val);
    else if (key == "tie_embeddings") out.model.tie_embeddings = detail::to_flag(key, val);
    // training keys
    else if (key == "learning_rate") { out.train.learning_rate = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "beta1") { out.train.beta1 = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "beta2") { out.train.beta2 = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "weight_decay") { out.train.weight_decay = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "warmup_ratio") { out.train.warmup_ratio = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "total_steps") { out.train.total_steps = detail::to_index(key, val); out.saw_train = true; }
    else if (key == "effective_batch") { out.train.effective_batch = detail::to_index(key, val); out.saw_train = true; }
    else if (key == "micro_batch") { out.train.micro_batch = detail::to_index(key, val); out.saw_train = true; }
    else if (key == "block_size") { out.train.block_size = detail::to_index(key, val); out.saw_train = true; }
    else if (key == "seed") { out.train.seed = static_cast<std::uint64_t>(detail::to_index(key, val)); out.saw_train = true; }
    else if (key == "eval_interval") { out.train.eval_interval = detail::to_index(key, val); out.saw_train = true; }
    else if (key == "adam_eps") { out.train.adam_eps = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "grad_clip") { out.train.grad_clip = detail::to_real(key, val); out.saw_train = true; }
    else if (key == "val_blocks") { out.train.val_blocks = detail::to_index(key, val); out.saw_train = true; }
    else if (key == "checkpoint_interval") { out.train.checkpoint_interval = detail::to_index(key, val); out.saw_train = true; }
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  return out;
}

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig m = parse_config_text(text).model;
  m.validate();
  return m;
}

}  // namespace shishu
