// SPDX-License-Identifier: Apache-2.0
//
// Pre-training loop: AdamW with decoupled decay, linear warmup into cosine
// decay, gradient accumulation over micro-batches, byte-level corpus
// pipeline, and perplexity evaluation. Single-threaded and bit-deterministic
// for a fixed (seed, config, corpus).

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "shishu/checkpoint.hpp"
#include "shishu/config.hpp"
#include "shishu/io.hpp"
#include "shishu/model.hpp"
#include "shishu/tensor.hpp"

namespace shishu {

// Raw bytes are their own token ids; two specials round out the vocab.
struct ByteTokenizer {
  static constexpr Index kVocabSize = 258;
  static constexpr std::int32_t kBos = 256;
  static constexpr std::int32_t kEos = 257;

  static std::vector<std::int32_t> encode(const std::string& text) {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
    return ids;
  }

  static std::string decode(const std::vector<std::int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (std::int32_t id : ids)
      if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
  }
};

// Non-overlapping blocks of block_size + 1 token ids (input row plus the
// one-token shift for targets). The last val_blocks examples are held out;
// training order reshuffles deterministically each epoch.
struct CorpusDataset {
  std::vector<std::int32_t> tokens;
  Index block_size = 0;
  Index n_examples = 0;
  Index val_examples = 0;
  std::uint64_t seed = 0;
  std::vector<Index> order;
  Index cursor = 0;
  Index epoch = 0;

  static CorpusDataset from_tokens(std::vector<std::int32_t> ids, Index block_size, Index val_blocks,
                                   std::uint64_t seed) {
    if (block_size <= 0) throw std::invalid_argument("dataset: block_size must be positive");
    CorpusDataset d;
    d.tokens = std::move(ids);
    d.block_size = block_size;
    d.n_examples = (static_cast<Index>(d.tokens.size()) - 1) / block_size;
    if (d.n_examples < 1)
      throw std::invalid_argument("dataset: corpus too small for even one block of " +
                                  std::to_string(block_size) + " tokens");
    d.val_examples = val_blocks;
    if (d.val_examples < 0) d.val_examples = 0;
    if (d.val_examples > d.n_examples)
      throw std::invalid_argument("dataset: corpus too small to hold " + std::to_string(val_blocks) +
                                  " validation blocks");
    d.seed = seed;
    d.reshuffle();
    return d;
  }

  static CorpusDataset from_text(const std::string& text, Index block_size, Index val_blocks,
                                 std::uint64_t seed) {
    return from_tokens(ByteTokenizer::encode(text), block_size, val_blocks, seed);
  }

  Index train_examples() const { return n_examples - val_examples; }

  void reshuffle() {
    order.resize(static_cast<std::size_t>(train_examples()));
    for (Index i = 0; i < train_examples(); ++i) order[static_cast<std::size_t>(i)] = i;
    RngState rng(seed + static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL);
    rng.shuffle(order.begin(), order.end());
    cursor = 0;
  }

  // Example i spans tokens [i*block_size, i*block_size + block_size].
  void copy_example(Index example, std::int32_t* input_row, std::int32_t* target_row) const {
    const std::int32_t* base = tokens.data() + example * block_size;
    for (Index j = 0; j < block_size; ++j) {
      input_row[j] = base[j];
      target_row[j] = base[j + 1];
    }
  }

  // Next micro-batch in deterministic shuffled order, wrapping epochs.
  void next_batch(Index micro, std::vector<std::int32_t>& inputs, std::vector<std::int32_t>& targets) {
    if (train_examples() == 0) throw std::logic_error("dataset: no training blocks");
    inputs.resize(static_cast<std::size_t>(micro * block_size));
    targets.resize(static_cast<std::size_t>(micro * block_size));
    for (Index b = 0; b < micro; ++b) {
      if (cursor >= train_examples()) {
        ++epoch;
        reshuffle();
      }
      copy_example(order[static_cast<std::size_t>(cursor++)], inputs.data() + b * block_size,
                   targets.data() + b * block_size);
    }
  }
};

// Linear ramp 0 -> lr over warmup steps, then cosine to 0 at total_steps.
inline double lr_at(Index step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) throw std::invalid_argument("lr_at: step out of range");
  const Index warmup = static_cast<Index>(std::llround(cfg.warmup_ratio * static_cast<double>(cfg.total_steps)));
  if (warmup > 0 && step < warmup)
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= cfg.total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(cfg.total_steps - warmup);
  return cfg.learning_rate * (1.0 + std::cos(M_PI * progress)) / 2.0;
}

inline std::int64_t tokens_per_step(const TrainConfig& cfg) {
  return static_cast<std::int64_t>(cfg.effective_batch) * cfg.block_size;
}

// One moment pair per unique parameter, in enumeration order. Shared groups
// enumerate once, so a shared pair is updated exactly once per step.
template <typename S>
struct OptimizerState {
  std::vector<std::vector<S>> m1;
  std::vector<std::vector<S>> m2;
  Index t = 0;

  static OptimizerState init(ModelWeights<S>& model) {
    OptimizerState st;
    for_each_parameter(model, [&st](const std::string&, Tensor<S>& p) {
      st.m1.emplace_back(p.data->size(), S(0));
      st.m2.emplace_back(p.data->size(), S(0));
    });
    return st;
  }
};

template <typename S>
void zero_gradients(ModelWeights<S>& model) {
  for_each_parameter(model, [](const std::string&, Tensor<S>& p) { p.zero_grad(); });
}

template <typename S>
double gradient_norm(ModelWeights<S>& model) {
  double sq = 0.0;
  for_each_parameter(model, [&sq](const std::string&, Tensor<S>& p) {
    if (!p.grad) return;
    for (S g : *p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  });
  return std::sqrt(sq);
}

// Scales gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
template <typename S>
double clip_gradients(ModelWeights<S>& model, double max_norm) {
  const double norm = gradient_norm(model);
  if (norm > max_norm && norm > 0.0) {
    const S k = static_cast<S>(max_norm / norm);
    for_each_parameter(model, [k](const std::string&, Tensor<S>& p) {
      if (!p.grad) return;
      for (S& g : *p.grad) g *= k;
    });
  }
  return norm;
}

// Decoupled AdamW on one buffer: the decay multiplier touches the weight
// independently of the moment-based update, so zero gradients still shrink
// weights by exactly (1 - lr * wd).
template <typename S>
void adamw_update(S* w, const S* g, std::vector<S>& m1, std::vector<S>& m2, std::size_t n, double lr,
                  const TrainConfig& cfg, double bc1, double bc2, const std::string& name) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(g[i]))
      throw std::runtime_error("adamw: non-finite gradient in " + name + ", step aborted");
  const S decay = static_cast<S>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] *= decay;
    m1[i] = static_cast<S>(cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g[i]);
    m2[i] = static_cast<S>(cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
    const double mhat = static_cast<double>(m1[i]) / bc1;
    const double vhat = static_cast<double>(m2[i]) / bc2;
    w[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

template <typename S>
void adamw_step(ModelWeights<S>& model, OptimizerState<S>& st, double lr, const TrainConfig& cfg) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  std::size_t pi = 0;
  for_each_parameter(model, [&](const std::string& name, Tensor<S>& p) {
    if (!p.grad) throw std::logic_error("adamw: parameter " + name + " has no gradient buffer");
    std::vector<S>& m1 = st.m1[pi];
    std::vector<S>& m2 = st.m2[pi];
    ++pi;
    adamw_update(p.data->data(), p.grad->data(), m1, m2, p.data->size(), lr, cfg, bc1, bc2, name);
  });
}

// Mean NLL over the held-out blocks, evaluated one example at a time.
template <typename S>
double eval_loss(const ModelWeights<S>& model, const CorpusDataset& data) {
  if (data.val_examples == 0) throw std::invalid_argument("eval: no validation blocks");
  NoGradGuard ng;
  std::vector<std::int32_t> input(static_cast<std::size_t>(data.block_size));
  std::vector<std::int32_t> target(static_cast<std::size_t>(data.block_size));
  double total = 0.0;
  for (Index i = 0; i < data.val_examples; ++i) {
    data.copy_example(data.train_examples() + i, input.data(), target.data());
    Tensor<S> logits = model_forward(model, input, 1, data.block_size);
    total += static_cast<double>(
        cross_entropy(reshape(logits, {data.block_size, model.config.vocab_size}), target).value());
  }
  return total / static_cast<double>(data.val_examples);
}

template <typename S>
double eval_perplexity(const ModelWeights<S>& model, const CorpusDataset& data) {
  return std::exp(eval_loss(model, data));
}

struct MetricsRow {
  Index step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_ppl;
  std::int64_t tokens_seen = 0;
  std::int64_t wall_ms = 0;
};

// Body is byte-reproducible except the wall_ms column, which records real
// elapsed time per step.
inline std::string metrics_csv(const std::vector<MetricsRow>& rows, std::uint64_t seed,
                               std::uint64_t config_hash) {
  std::string out = csv_provenance(seed, config_hash);
  out += "step,lr,train_loss,val_loss,val_ppl,tokens_seen,wall_ms\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step);
    out += ',' + format_metric(r.lr);
    out += ',' + format_metric(r.train_loss);
    out += ',';
    if (r.val_loss) out += format_metric(*r.val_loss);
    out += ',';
    if (r.val_ppl) out += format_metric(*r.val_ppl);
    out += ',' + std::to_string(r.tokens_seen);
    out += ',' + std::to_string(r.wall_ms);
    out += '\n';
  }
  return out;
}

struct TrainResult {
  std::vector<MetricsRow> rows;
  double final_val_loss = 0.0;
  double final_val_ppl = 0.0;
};

// Micro-batched descent with gradient accumulation. The backward seed 1/k
// makes k accumulated micro-batches equal one k-times-larger batch. With a
// non-empty out_dir, writes metrics.csv and model.ckpt (plus periodic
// checkpoints) atomically.
template <typename S>
TrainResult train(ModelWeights<S>& model, CorpusDataset& data, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  if (data.block_size != cfg.block_size)
    throw std::invalid_argument("train: dataset block_size disagrees with config");
  const std::int64_t train_tokens = static_cast<std::int64_t>(data.train_examples()) * data.block_size;
  if (train_tokens < tokens_per_step(cfg))
    throw std::invalid_argument("train: corpus smaller than one optimizer step (" +
                                std::to_string(train_tokens) + " < " +
                                std::to_string(tokens_per_step(cfg)) + " tokens)");

  auto st = OptimizerState<S>::init(model);
  const Index micro = cfg.micro();
  const Index n_accum = cfg.effective_batch / micro;
  const Index t = cfg.block_size;
  const Index v = model.config.vocab_size;

  TrainResult result;
  std::vector<std::int32_t> inputs, targets;
  std::int64_t tokens_seen = 0;

  for (Index step = 1; step <= cfg.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    zero_gradients(model);
    double step_loss = 0.0;
    for (Index a = 0; a < n_accum; ++a) {
      data.next_batch(micro, inputs, targets);
      Tensor<S> logits = model_forward(model, inputs, micro, t);
      Tensor<S> loss = cross_entropy(reshape(logits, {micro * t, v}), targets);
      backward(loss, static_cast<S>(1.0 / static_cast<double>(n_accum)));
      step_loss += static_cast<double>(loss.value()) / static_cast<double>(n_accum);
    }
    if (!std::isfinite(step_loss))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    if (cfg.grad_clip > 0.0) clip_gradients(model, cfg.grad_clip);
    const double lr = lr_at(step, cfg);
    adamw_step(model, st, lr, cfg);
    tokens_seen += tokens_per_step(cfg);

    MetricsRow row;
    row.step = step;
    row.lr = lr;
    row.train_loss = step_loss;
    row.tokens_seen = tokens_seen;
    const bool eval_now = data.val_examples > 0 &&
                          (step % cfg.eval_interval == 0 || step == cfg.total_steps);
    if (eval_now) {
      row.val_loss = eval_loss(model, data);
      row.val_ppl = std::exp(*row.val_loss);
      result.final_val_loss = *row.val_loss;
      result.final_val_ppl = *row.val_ppl;
    }
    row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    result.rows.push_back(row);

    if (!out_dir.empty() && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 &&
        step != cfg.total_steps)
      save_checkpoint(model, out_dir / ("model_step" + std::to_string(step) + ".ckpt"));
  }

  if (!out_dir.empty()) {
    save_checkpoint(model, out_dir / "model.ckpt");
    atomic_write_file(out_dir / "metrics.csv",
                      metrics_csv(result.rows, cfg.seed, model.config.hash()));
  }
  return result;
}

}  // namespace shishu
