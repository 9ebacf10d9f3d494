// SPDX-License-Identifier: Apache-2.0
//
// Attention-linearity instruments: capture per-decoder-layer (input, output)
// pairs around the input-norm + attention sub-block, fit linear and scalar-
// identity surrogates to the captured map, and trace residual-stream cosine
// similarity. Captures are read-only over the model.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shishu/io.hpp"
#include "shishu/linalg.hpp"
#include "shishu/model.hpp"
#include "shishu/tensor.hpp"

namespace shishu {

// Which captured positions participate in a fit or statistic.
enum class RowWindow { kPrompt, kGenerated, kAll };

// Per-layer capture: row j of x holds the block input at position j, row j
// of z the attention output before the residual add, row j of post_residual
// their recorded sum. All in double regardless of model precision.
struct LayerIo {
  Index layer = 0;  // position in the layer stack
  std::vector<double> x;
  std::vector<double> z;
  std::vector<double> post_residual;
};

struct IoCapture {
  Index d = 0;
  Index prompt_rows = 0;
  Index gen_rows = 0;
  std::vector<LayerIo> layers;

  Index rows() const { return prompt_rows + gen_rows; }

  std::pair<Index, Index> window(RowWindow w) const {
    switch (w) {
      case RowWindow::kPrompt: return {0, prompt_rows};
      case RowWindow::kGenerated: return {prompt_rows, rows()};
      default: return {0, rows()};
    }
  }
};

namespace detail {

template <typename S>
void append_rows(std::vector<double>& dst, const Tensor<S>& t) {
  dst.reserve(dst.size() + t.data->size());
  for (S v : *t.data) dst.push_back(static_cast<double>(v));
}

}  // namespace detail

// Prefill on the prompt, then feed gen_steps greedy tokens one at a time,
// recording (x, z) at every decoder layer for all T + gen_steps positions.
template <typename S>
IoCapture collect_io_pairs(const ModelWeights<S>& m, const std::vector<std::int32_t>& prompt,
                           Index gen_steps) {
  if (prompt.empty()) throw std::invalid_argument("probe: prompt is empty");
  if (gen_steps < 0) throw std::invalid_argument("probe: negative generation count");
  const Index t = static_cast<Index>(prompt.size());
  if (t + gen_steps > m.config.max_seq_len)
    throw std::invalid_argument("probe: prompt plus generated tokens exceed max_seq_len");
  const Index n_dec = count_decoder_layers(m.schedule);
  if (n_dec == 0) throw std::invalid_argument("probe: model has no attention layers");

  IoCapture cap;
  cap.d = m.config.hidden_size;
  cap.prompt_rows = t;
  cap.gen_rows = gen_steps;
  cap.layers.resize(static_cast<std::size_t>(n_dec));

  // Hook layer ids are stack positions; map them to dense capture slots.
  std::vector<Index> slot_of(m.schedule.size(), -1);
  Index next = 0;
  for (std::size_t li = 0; li < m.schedule.size(); ++li)
    if (m.schedule[li].type == LayerKind::Type::kDecoder) {
      cap.layers[static_cast<std::size_t>(next)].layer = static_cast<Index>(li);
      slot_of[li] = next++;
    }

  ForwardHooks<S> hooks;
  hooks.on_attention = [&cap, &slot_of](Index layer, const Tensor<S>& x, const Tensor<S>& z) {
    LayerIo& io = cap.layers[static_cast<std::size_t>(slot_of[static_cast<std::size_t>(layer)])];
    detail::append_rows(io.x, x);
    detail::append_rows(io.z, z);
  };
  hooks.on_attention_residual = [&cap, &slot_of](Index layer, const Tensor<S>& y) {
    LayerIo& io = cap.layers[static_cast<std::size_t>(slot_of[static_cast<std::size_t>(layer)])];
    detail::append_rows(io.post_residual, y);
  };

  NoGradGuard ng;
  KVCache<S> cache = KVCache<S>::make(m.config, 1);
  Tensor<S> logits = model_forward(m, prompt, 1, t, &cache, &hooks);
  std::int32_t tok = argmax_row(logits.data->data() + (t - 1) * m.config.vocab_size,
                                m.config.vocab_size);
  for (Index g = 0; g < gen_steps; ++g) {
    Tensor<S> step = decode_step(m, {tok}, cache, &hooks);
    tok = argmax_row(step.data->data(), m.config.vocab_size);
  }
  return cap;
}

struct LinearFit {
  Tensor<double> w;  // [d x d], applied as z ~= W x
  double mse = 0.0;
  Index rows_fit = 0;
  bool ridged = false;
};

// Least-squares map from block inputs to attention outputs over the chosen
// rows (prompt rows by default).
inline LinearFit fit_linear(const IoCapture& cap, Index layer_slot,
                            RowWindow window = RowWindow::kPrompt) {
  const LayerIo& io = cap.layers.at(static_cast<std::size_t>(layer_slot));
  const auto [lo, hi] = cap.window(window);
  const Index n = hi - lo;
  if (n < 1) throw std::invalid_argument("probe: no rows in selected window");
  const Index d = cap.d;
  Tensor<double> x = Tensor<double>::zeros({n, d});
  Tensor<double> z = Tensor<double>::zeros({n, d});
  std::copy(io.x.begin() + lo * d, io.x.begin() + hi * d, x.data->begin());
  std::copy(io.z.begin() + lo * d, io.z.begin() + hi * d, z.data->begin());
  LstsqResult r = lstsq(x, z);
  return LinearFit{r.w, r.mse, n, r.ridged};
}

struct CosineStat {
  double mean = 0.0;
  Index rows_used = 0;
  Index rows_skipped = 0;
  std::string mode;  // "empirical" or "fitted"
};

// Mean cosine between the block input and the post-residual stream. With a
// fitted map the second vector is (W + I) x instead of the recorded x + z.
inline CosineStat residual_cosine(const IoCapture& cap, Index layer_slot,
                                  RowWindow window = RowWindow::kGenerated,
                                  const Tensor<double>* w = nullptr) {
  const LayerIo& io = cap.layers.at(static_cast<std::size_t>(layer_slot));
  const auto [lo, hi] = cap.window(window);
  if (hi - lo < 1) throw std::invalid_argument("probe: no rows in selected window");
  const Index d = cap.d;
  if (w && (w->shape != Shape{d, d})) throw std::invalid_argument("probe: fitted map shape mismatch");

  CosineStat st;
  st.mode = w ? "fitted" : "empirical";
  double sum = 0.0;
  std::vector<double> v(static_cast<std::size_t>(d));
  for (Index r = lo; r < hi; ++r) {
    const double* xr = io.x.data() + r * d;
    const double* zr = io.z.data() + r * d;
    if (w) {
      const double* wd = w->data->data();
      for (Index i = 0; i < d; ++i) {
        double acc = xr[i];  // the identity part of W + I
        for (Index j = 0; j < d; ++j) acc += wd[i * d + j] * xr[j];
        v[static_cast<std::size_t>(i)] = acc;
      }
    } else {
      for (Index i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] = xr[i] + zr[i];
    }
    double xx = 0.0, vv = 0.0, xv = 0.0;
    for (Index i = 0; i < d; ++i) {
      xx += xr[i] * xr[i];
      vv += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
      xv += xr[i] * v[static_cast<std::size_t>(i)];
    }
    if (xx == 0.0 || vv == 0.0) {
      ++st.rows_skipped;
      continue;
    }
    sum += xv / (std::sqrt(xx) * std::sqrt(vv));
    ++st.rows_used;
  }
  if (st.rows_used == 0) throw std::invalid_argument("probe: every row had a zero-norm vector");
  st.mean = sum / static_cast<double>(st.rows_used);
  return st;
}

struct ScalarFit {
  double alpha = 0.0;
  double mse = 0.0;  // mean over the d*d entries of (alpha*I - W)
};

// Frobenius-optimal multiple of the identity: alpha = trace(W) / d.
inline ScalarFit fit_scalar_identity(const Tensor<double>& w_prime) {
  if (w_prime.shape.size() != 2 || w_prime.shape[0] != w_prime.shape[1])
    throw std::invalid_argument("probe: scalar fit needs a square matrix");
  const Index d = w_prime.shape[0];
  const double* wd = w_prime.data->data();
  double tr = 0.0;
  for (Index i = 0; i < d; ++i) tr += wd[i * d + i];
  ScalarFit fit;
  fit.alpha = tr / static_cast<double>(d);
  double sq = 0.0;
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) {
      const double target = (i == j) ? fit.alpha : 0.0;
      const double diff = target - wd[i * d + j];
      sq += diff * diff;
    }
  fit.mse = sq / static_cast<double>(d * d);
  return fit;
}

// W' = W + I, the map the residual stream actually applies.
inline Tensor<double> plus_identity(const Tensor<double>& w) {
  if (w.shape.size() != 2 || w.shape[0] != w.shape[1])
    throw std::invalid_argument("probe: plus_identity needs a square matrix");
  Tensor<double> out = w.clone();
  for (Index i = 0; i < w.shape[0]; ++i) (*out.data)[i * w.shape[0] + i] += 1.0;
  return out;
}

// Max over scales of ||rmsnorm(alpha x) - rmsnorm(x)||_inf, rows pooled.
// Unit norm weight; alpha must be positive.
template <typename S>
double scale_invariance_report(const Tensor<S>& x, const std::vector<double>& alphas, double eps) {
  if (x.shape.size() != 2) throw std::invalid_argument("probe: expected [rows x d] input");
  const Index d = x.shape[1];
  Tensor<S> ones = Tensor<S>::full({d}, S(1));
  NoGradGuard ng;
  Tensor<S> base = rmsnorm(x, ones, static_cast<S>(eps));
  double worst = 0.0;
  for (double a : alphas) {
    if (a <= 0.0) throw std::invalid_argument("probe: scale must be positive");
    Tensor<S> scaled = rmsnorm(scale(x, static_cast<S>(a)), ones, static_cast<S>(eps));
    for (std::size_t i = 0; i < base.data->size(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>((*scaled.data)[i]) -
                                       static_cast<double>((*base.data)[i])));
  }
  return worst;
}

struct ProbeRow {
  Index layer = 0;
  Index rows_fit = 0;
  double linear_mse = 0.0;
  double cosine_mean = 0.0;
  std::string cosine_mode;
  double alpha = 0.0;
  double scalar_mse = 0.0;
};

struct ProbeReport {
  Index prompt_rows = 0;
  Index gen_rows = 0;
  std::vector<ProbeRow> rows;
};

struct ProbeOptions {
  // Fit over prompt rows only unless generated rows are pulled in.
  bool include_generated = false;
  // Cosine from the recorded activations; the fitted map is the alternative.
  bool fitted_cosine = false;
};

// Full per-layer sweep: linear fit, W + I projection onto alpha I, and the
// residual cosine trace (generated rows when present, else prompt rows).
template <typename S>
ProbeReport run_probe(const ModelWeights<S>& m, const std::vector<std::int32_t>& prompt,
                      Index gen_steps, const ProbeOptions& opt = {}) {
  IoCapture cap = collect_io_pairs(m, prompt, gen_steps);
  const RowWindow fit_window = opt.include_generated ? RowWindow::kAll : RowWindow::kPrompt;
  const RowWindow cos_window = cap.gen_rows > 0 ? RowWindow::kGenerated : RowWindow::kPrompt;

  ProbeReport report;
  report.prompt_rows = cap.prompt_rows;
  report.gen_rows = cap.gen_rows;
  for (std::size_t slot = 0; slot < cap.layers.size(); ++slot) {
    const LinearFit fit = fit_linear(cap, static_cast<Index>(slot), fit_window);
    const Tensor<double> w_prime = plus_identity(fit.w);
    const ScalarFit sf = fit_scalar_identity(w_prime);
    const CosineStat cs = residual_cosine(cap, static_cast<Index>(slot), cos_window,
                                          opt.fitted_cosine ? &fit.w : nullptr);
    ProbeRow row;
    row.layer = cap.layers[slot].layer;
    row.rows_fit = fit.rows_fit;
    row.linear_mse = fit.mse;
    row.cosine_mean = cs.mean;
    row.cosine_mode = cs.mode;
    row.alpha = sf.alpha;
    row.scalar_mse = sf.mse;
    report.rows.push_back(row);
  }
  return report;
}

inline std::string probe_csv(const ProbeReport& r, std::uint64_t seed, std::uint64_t config_hash) {
  std::string out = csv_provenance(seed, config_hash);
  out += "# prompt_rows=" + std::to_string(r.prompt_rows) +
         " gen_rows=" + std::to_string(r.gen_rows) +
         " scalar_mse_normalization=per_entry\n";
  out += "layer,rows_fit,linear_mse,cosine_mean,cosine_mode,alpha,scalar_mse\n";
  for (const auto& row : r.rows) {
    out += std::to_string(row.layer);
    out += ',' + std::to_string(row.rows_fit);
    out += ',' + format_metric(row.linear_mse);
    out += ',' + format_metric(row.cosine_mean);
    out += ',' + row.cosine_mode;
    out += ',' + format_metric(row.alpha);
    out += ',' + format_metric(row.scalar_mse);
    out += '\n';
  }
  return out;
}

}  // namespace shishu
