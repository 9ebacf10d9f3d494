// SPDX-License-Identifier: Apache-2.0
//
// Latency measurement (forward, and forward+backward) across sequence
// lengths, an analytic byte-accounting memory model, and percentage
// reduction tables comparing a parent stack against its ShishuLM variant.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "shishu/io.hpp"
#include "shishu/model.hpp"
#include "shishu/tensor.hpp"

namespace shishu {

enum class BenchMode { kInference, kTraining };

inline const char* bench_mode_name(BenchMode m) {
  return m == BenchMode::kInference ? "inference" : "training";
}

struct BenchConfig {
  std::vector<Index> lengths{64, 128, 256, 512, 1024, 2048, 4096};
  Index batch = 1;
  Index warmup = 3;
  Index timed = 10;
  BenchMode mode = BenchMode::kInference;
  std::uint64_t seed = 42;

  void validate() const {
    if (lengths.empty()) throw std::invalid_argument("bench: no sequence lengths");
    if (batch < 1) throw std::invalid_argument("bench: batch must be positive");
    if (warmup < 0) throw std::invalid_argument("bench: negative warmup");
    if (timed < 1) throw std::invalid_argument("bench: need at least one timed rep");
  }
};

struct TimingRow {
  Index length = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double median_ms = 0.0;
};

namespace detail {

inline double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace detail

// Wall-clock per full-sequence step on seeded tokens. Training mode runs
// forward + cross-entropy + backward; inference runs graph-free forward.
template <typename S>
std::vector<TimingRow> time_model(ModelWeights<S>& m, const BenchConfig& cfg) {
  cfg.validate();
  std::vector<TimingRow> rows;
  for (Index t : cfg.lengths) {
    if (t > m.config.max_seq_len)
      throw std::invalid_argument("bench: length " + std::to_string(t) + " exceeds max_seq_len");
    RngState rng(cfg.seed ^ static_cast<std::uint64_t>(t));
    std::vector<std::int32_t> tokens(static_cast<std::size_t>(cfg.batch * t));
    for (auto& id : tokens)
      id = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(m.config.vocab_size)));
    std::vector<std::int32_t> targets(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i)
      targets[i] = tokens[(i + 1) % tokens.size()];

    auto one_step = [&] {
      if (cfg.mode == BenchMode::kInference) {
        NoGradGuard ng;
        Tensor<S> logits = model_forward(m, tokens, cfg.batch, t);
        (void)logits;
      } else {
        for_each_parameter(m, [](const std::string&, Tensor<S>& p) { p.zero_grad(); });
        Tensor<S> logits = model_forward(m, tokens, cfg.batch, t);
        Tensor<S> loss =
            cross_entropy(reshape(logits, {cfg.batch * t, m.config.vocab_size}), targets);
        backward(loss);
      }
    };

    for (Index w = 0; w < cfg.warmup; ++w) one_step();
    std::vector<double> ms(static_cast<std::size_t>(cfg.timed));
    for (Index r = 0; r < cfg.timed; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      one_step();
      const auto t1 = std::chrono::steady_clock::now();
      ms[static_cast<std::size_t>(r)] =
          std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    TimingRow row;
    row.length = t;
    double sum = 0.0;
    for (double x : ms) sum += x;
    row.mean_ms = sum / static_cast<double>(ms.size());
    double sq = 0.0;
    for (double x : ms) sq += (x - row.mean_ms) * (x - row.mean_ms);
    row.std_ms = std::sqrt(sq / static_cast<double>(ms.size()));
    row.median_ms = detail::median_of(ms);
    rows.push_back(row);
  }
  return rows;
}

struct MemoryModel {
  std::int64_t param_bytes = 0;
  std::int64_t grad_bytes = 0;
  std::int64_t optimizer_bytes = 0;
  std::int64_t activation_bytes = 0;
  std::int64_t kv_cache_bytes = 0;

  std::int64_t total() const {
    return param_bytes + grad_bytes + optimizer_bytes + activation_bytes + kv_cache_bytes;
  }
};

// Closed-form byte accounting. Activation constants mirror the op-by-op
// forward pass: a decoder materializes 13 [B,T,d] tensors, 5 [B,T,kv_width],
// 4 [B,T,inter], and 2 [B,H,T,T] score blocks when scores are materialized;
// a ShishuMLP layer 3 [B,T,d] and 4 [B,T,inter]. Training keeps every
// layer's activations alive for backward; graph-free inference is charged
// its peak layer plus logits. The KV cache covers T tokens per decoder in
// inference deployment; training runs cache-free.
inline MemoryModel memory_estimate(const ModelConfig& cfg, Index batch, Index t, BenchMode mode,
                                   bool materialize_scores = true, Index scalar_bytes = 4) {
  cfg.validate();
  if (batch < 1 || t < 1) throw std::invalid_argument("bench: batch and length must be positive");
  const std::int64_t w = scalar_bytes;
  const std::int64_t d = cfg.hidden_size;
  const std::int64_t inter = cfg.intermediate_size;
  const std::int64_t kvw = cfg.kv_width();
  const std::int64_t heads = cfg.n_heads;
  const std::int64_t bt = static_cast<std::int64_t>(batch) * t;

  const auto schedule = schedule_from_config(cfg);
  const std::int64_t n_dec = count_decoder_layers(schedule);
  const std::int64_t n_mlp = static_cast<std::int64_t>(schedule.size()) - n_dec;

  MemoryModel mm;
  mm.param_bytes = count_parameters(cfg) * w;

  const std::int64_t scores = materialize_scores ? 2 * bt * heads * t : 0;
  const std::int64_t dec_act = bt * (13 * d + 5 * kvw + 4 * inter) + scores;
  const std::int64_t mlp_act = bt * (3 * d + 4 * inter);
  const std::int64_t logits_act = bt * cfg.vocab_size + bt * d;  // head output + embedding

  if (mode == BenchMode::kTraining) {
    mm.grad_bytes = mm.param_bytes;
    mm.optimizer_bytes = 2 * mm.param_bytes;
    mm.activation_bytes = (n_dec * dec_act + n_mlp * mlp_act + logits_act) * w;
  } else {
    std::int64_t peak = logits_act;
    if (n_dec > 0) peak = std::max(peak, dec_act);
    if (n_mlp > 0) peak = std::max(peak, mlp_act);
    mm.activation_bytes = peak * w;
    mm.kv_cache_bytes = n_dec * 2 * static_cast<std::int64_t>(batch) * cfg.n_kv_heads * t *
                        cfg.head_dim() * w;
  }
  return mm;
}

struct ReductionRow {
  Index length = 0;
  double parent = 0.0;
  double shishu = 0.0;
  double pct_reduction = 0.0;
};

// 100 * (parent - shishu) / parent, cell by cell over matching lengths.
inline std::vector<ReductionRow> reduction_table(const std::vector<TimingRow>& parent,
                                                 const std::vector<TimingRow>& shishu) {
  if (parent.size() != shishu.size())
    throw std::invalid_argument("bench: mismatched result row counts");
  std::vector<ReductionRow> out;
  for (std::size_t i = 0; i < parent.size(); ++i) {
    if (parent[i].length != shishu[i].length)
      throw std::invalid_argument("bench: mismatched lengths in reduction table");
    if (parent[i].median_ms == 0.0) throw std::invalid_argument("bench: zero parent latency");
    ReductionRow r;
    r.length = parent[i].length;
    r.parent = parent[i].median_ms;
    r.shishu = shishu[i].median_ms;
    r.pct_reduction = 100.0 * (r.parent - r.shishu) / r.parent;
    out.push_back(r);
  }
  return out;
}

inline double pct_reduction(double parent, double shishu) {
  if (parent == 0.0) throw std::invalid_argument("bench: zero parent value");
  return 100.0 * (parent - shishu) / parent;
}

inline std::string latency_csv(BenchMode mode, const std::vector<ReductionRow>& rows,
                               std::uint64_t seed, std::uint64_t config_hash) {
  std::string out = csv_provenance(seed, config_hash);
  out += "mode,length,parent_ms,shishu_ms,pct_reduction\n";
  for (const auto& r : rows) {
    out += bench_mode_name(mode);
    out += ',' + std::to_string(r.length);
    out += ',' + format_metric(r.parent);
    out += ',' + format_metric(r.shishu);
    out += ',' + format_metric(r.pct_reduction);
    out += '\n';
  }
  return out;
}

inline std::string memory_csv(BenchMode mode, const std::vector<Index>& lengths,
                              const std::vector<std::int64_t>& parent_bytes,
                              const std::vector<std::int64_t>& shishu_bytes, std::uint64_t seed,
                              std::uint64_t config_hash) {
  if (lengths.size() != parent_bytes.size() || lengths.size() != shishu_bytes.size())
    throw std::invalid_argument("bench: mismatched memory table sizes");
  std::string out = csv_provenance(seed, config_hash);
  out += "mode,length,parent_bytes,shishu_bytes,pct_reduction\n";
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    out += bench_mode_name(mode);
    out += ',' + std::to_string(lengths[i]);
    out += ',' + std::to_string(parent_bytes[i]);
    out += ',' + std::to_string(shishu_bytes[i]);
    out += ',' + format_metric(pct_reduction(static_cast<double>(parent_bytes[i]),
                                             static_cast<double>(shishu_bytes[i])));
    out += '\n';
  }
  return out;
}

}  // namespace shishu
