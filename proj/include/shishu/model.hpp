// SPDX-License-Identifier: Apache-2.0
//
// Decoder stack with a configurable layer schedule. Two block kinds:
//
//   decoder:  y = x + attn(norm_in(x));  out = y + mlp(norm_post(y))
//   mlp-only: out = x + mlp(norm(x))
//
// The mlp-only kind carries no attention and no KV cache, and consecutive
// blocks can share one weight group. Shared storage is structural: the
// schedule maps several layers onto the same group object, so "mutating one
// mutates all" holds by construction.

#pragma once

#include <cstdint>
#include <functional>
#include <type_traits>
#include <string>
#include <vector>

#include "shishu/config.hpp"
#include "shishu/io.hpp"
#include "shishu/tensor.hpp"

namespace shishu {

struct LayerKind {
  enum Type { kDecoder, kShishuMlp };
  Type type;
  // Decoder ordinal, or share-group id for mlp-only layers.
  Index index;
  bool operator==(const LayerKind&) const = default;
};

using LayerSchedule = std::vector<LayerKind>;

// n_bottom decoder layers, then shared mlp-only layers grouped in adjacent
// runs of pair_size, then n_top decoder layers.
inline LayerSchedule make_shishu_schedule(Index l_total, Index n_bottom, Index pair_size = 2,
                                          Index n_top = 0) {
  if (l_total <= 0) throw std::invalid_argument("schedule: l_total must be positive");
  if (n_bottom < 0 || n_top < 0 || n_bottom + n_top > l_total)
    throw std::invalid_argument("schedule: decoder counts exceed total layers");
  if (pair_size <= 0) throw std::invalid_argument("schedule: pair_size must be positive");
  const Index n_mlp = l_total - n_bottom - n_top;
  if (n_mlp % pair_size != 0)
    throw std::invalid_argument("schedule: " + std::to_string(n_mlp) +
                                " mlp layers not divisible by pair_size " + std::to_string(pair_size));
  LayerSchedule s;
  s.reserve(static_cast<std::size_t>(l_total));
  Index dec = 0;
  for (Index i = 0; i < n_bottom; ++i) s.push_back({LayerKind::kDecoder, dec++});
  for (Index g = 0; g < n_mlp / pair_size; ++g)
    for (Index r = 0; r < pair_size; ++r) s.push_back({LayerKind::kShishuMlp, g});
  for (Index i = 0; i < n_top; ++i) s.push_back({LayerKind::kDecoder, dec++});
  return s;
}

inline LayerSchedule schedule_from_config(const ModelConfig& cfg) {
  return make_shishu_schedule(cfg.n_layers, cfg.bottom_decoders(), cfg.pair_size,
                              cfg.n_top_decoder_layers);
}

inline Index count_decoder_layers(const LayerSchedule& s) {
  Index n = 0;
  for (const auto& l : s) n += l.type == LayerKind::kDecoder ? 1 : 0;
  return n;
}

inline Index count_share_groups(const LayerSchedule& s) {
  Index max_group = -1;
  for (const auto& l : s)
    if (l.type == LayerKind::kShishuMlp) max_group = std::max(max_group, l.index);
  return max_group + 1;
}

// Unique parameters implied by a config: embeddings, per-decoder-layer
// weights, one weight set per share group, final norm. Tied output head adds
// nothing; untied adds a second [V x d].
inline std::int64_t count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const LayerSchedule sched = schedule_from_config(cfg);
  const Index d = cfg.hidden_size;
  const Index inter = cfg.intermediate_size;
  const Index kvw = cfg.kv_width();
  const std::int64_t decoder_params = 2 * d + 2 * d * d + 2 * d * kvw + 3 * d * inter;
  const std::int64_t group_params = d + 3 * d * inter;
  std::int64_t total = cfg.vocab_size * d;
  if (!cfg.tie_embeddings) total += cfg.vocab_size * d;
  total += count_decoder_layers(sched) * decoder_params;
  total += count_share_groups(sched) * group_params;
  total += d;
  return total;
}

template <typename S>
struct DecoderLayerWeights {
  Tensor<S> input_norm;      // [d]
  Tensor<S> q;               // [d x d]
  Tensor<S> k;               // [d x kv_width]
  Tensor<S> v;               // [d x kv_width]
  Tensor<S> o;               // [d x d]
  Tensor<S> post_attn_norm;  // [d]
  Tensor<S> gate;            // [d x inter]
  Tensor<S> up;              // [d x inter]
  Tensor<S> down;            // [inter x d]
};

template <typename S>
struct MlpGroupWeights {
  Tensor<S> norm;  // [d]
  Tensor<S> gate;
  Tensor<S> up;
  Tensor<S> down;
};

template <typename S>
struct ModelWeights {
  ModelConfig config;
  LayerSchedule schedule;
  Tensor<S> embed;  // [V x d]
  std::vector<DecoderLayerWeights<S>> decoders;
  std::vector<MlpGroupWeights<S>> groups;
  Tensor<S> final_norm;  // [d]
  Tensor<S> lm_head;     // [V x d], only when untied
};

// Visits each unique parameter exactly once, in a fixed order shared by the
// initializer, the optimizer, the checkpoint format, and the weight hash.
template <typename S, typename Fn>
void for_each_parameter(ModelWeights<S>& m, Fn&& fn) {
  fn("embed", m.embed);
  for (std::size_t i = 0; i < m.decoders.size(); ++i) {
    auto& dw = m.decoders[i];
    const std::string p = "decoder." + std::to_string(i) + ".";
    fn(p + "input_norm", dw.input_norm);
    fn(p + "q", dw.q);
    fn(p + "k", dw.k);
    fn(p + "v", dw.v);
    fn(p + "o", dw.o);
    fn(p + "post_attn_norm", dw.post_attn_norm);
    fn(p + "gate", dw.gate);
    fn(p + "up", dw.up);
    fn(p + "down", dw.down);
  }
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    auto& gw = m.groups[g];
    const std::string p = "mlp_group." + std::to_string(g) + ".";
    fn(p + "norm", gw.norm);
    fn(p + "gate", gw.gate);
    fn(p + "up", gw.up);
    fn(p + "down", gw.down);
  }
  fn("final_norm", m.final_norm);
  if (!m.config.tie_embeddings) fn("lm_head", m.lm_head);
}

template <typename S, typename Fn>
void for_each_parameter(const ModelWeights<S>& m, Fn&& fn) {
  for_each_parameter(const_cast<ModelWeights<S>&>(m),
                     [&fn](const std::string& name, Tensor<S>& t) {
                       fn(name, static_cast<const Tensor<S>&>(t));
                     });
}

// Projection and embedding matrices drawn N(mean 0, std 0.02); norm scales
// start at 1 so the initial blocks pass signal through unchanged.
template <typename S>
ModelWeights<S> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights<S> m;
  m.config = cfg;
  m.schedule = schedule_from_config(cfg);
  m.decoders.resize(static_cast<std::size_t>(count_decoder_layers(m.schedule)));
  m.groups.resize(static_cast<std::size_t>(count_share_groups(m.schedule)));

  const Index d = cfg.hidden_size;
  const Index inter = cfg.intermediate_size;
  const Index kvw = cfg.kv_width();
  RngState rng(seed);
  const double std_init = 0.02;

  auto init = [&](const std::string& name, Tensor<S>& t) {
    Shape shape;
    if (name == "embed" || name == "lm_head") shape = {cfg.vocab_size, d};
    else if (name.ends_with("norm")) shape = {d};
    else if (name.ends_with(".q") || name.ends_with(".o")) shape = {d, d};
    else if (name.ends_with(".k") || name.ends_with(".v")) shape = {d, kvw};
    else if (name.ends_with("gate") || name.ends_with("up")) shape = {d, inter};
    else if (name.ends_with("down")) shape = {inter, d};
    else throw std::logic_error("build_model: unclassified parameter " + name);
    if (name.ends_with("norm")) {
      t = Tensor<S>::full(std::move(shape), S(1));
    } else {
      t = normal_init<S>(std::move(shape), 0.0, std_init, rng);
    }
    t.mark_parameter();
  };
  for_each_parameter(m, init);
  return m;
}

template <typename S>
std::int64_t count_unique_elements(const ModelWeights<S>& m) {
  std::int64_t n = 0;
  for_each_parameter(m, [&n](const std::string&, const Tensor<S>& t) { n += t.numel(); });
  return n;
}

template <typename S>
std::uint64_t weights_hash(const ModelWeights<S>& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_parameter(m, [&h](const std::string& name, const Tensor<S>& t) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data->data(), t.data->size() * sizeof(S), h);
  });
  return h;
}

// ---------------------------------------------------------------------------
// KV cache: one k/v slab per decoder layer, preallocated to max_seq_len.
// Cached keys are stored post-rotation. All layers advance in lockstep; the
// owner calls advance() once per forward.
// ---------------------------------------------------------------------------
template <typename S>
struct KVCache {
  Index batch = 0;
  Index n_kv_heads = 0;
  Index head_dim = 0;
  Index max_seq_len = 0;
  Index t_cached = 0;
  std::vector<std::vector<S>> k_store;  // per decoder layer: [B, KH, max, hd]
  std::vector<std::vector<S>> v_store;

  static KVCache make(const ModelConfig& cfg, Index batch) {
    KVCache c;
    c.batch = batch;
    c.n_kv_heads = cfg.n_kv_heads;
    c.head_dim = cfg.head_dim();
    c.max_seq_len = cfg.max_seq_len;
    const Index n_dec = count_decoder_layers(schedule_from_config(cfg));
    const std::size_t slab =
        static_cast<std::size_t>(batch * cfg.n_kv_heads * cfg.max_seq_len * cfg.head_dim());
    c.k_store.assign(static_cast<std::size_t>(n_dec), std::vector<S>(slab, S(0)));
    c.v_store.assign(static_cast<std::size_t>(n_dec), std::vector<S>(slab, S(0)));
    return c;
  }

  Index n_layers() const { return static_cast<Index>(k_store.size()); }

  // k, v: [B, KH, T, hd] written at positions [t_cached, t_cached + T).
  void write(Index layer, const Tensor<S>& k, const Tensor<S>& v) {
    if (layer < 0 || layer >= n_layers()) throw std::out_of_range("kv_cache: bad layer");
    const Index t = k.shape[2];
    if (t_cached + t > max_seq_len)
      throw std::runtime_error("kv_cache: overflow, " + std::to_string(t_cached + t) + " > " +
                               std::to_string(max_seq_len));
    for (Index b = 0; b < batch; ++b)
      for (Index h = 0; h < n_kv_heads; ++h) {
        const Index src_off = ((b * n_kv_heads + h) * t) * head_dim;
        const Index dst_off = ((b * n_kv_heads + h) * max_seq_len + t_cached) * head_dim;
        std::copy(k.ptr() + src_off, k.ptr() + src_off + t * head_dim,
                  k_store[static_cast<std::size_t>(layer)].data() + dst_off);
        std::copy(v.ptr() + src_off, v.ptr() + src_off + t * head_dim,
                  v_store[static_cast<std::size_t>(layer)].data() + dst_off);
      }
  }

  Tensor<S> view(const std::vector<S>& store, Index t_total) const {
    std::vector<S> out(static_cast<std::size_t>(batch * n_kv_heads * t_total * head_dim));
    for (Index b = 0; b < batch; ++b)
      for (Index h = 0; h < n_kv_heads; ++h) {
        const Index src_off = ((b * n_kv_heads + h) * max_seq_len) * head_dim;
        const Index dst_off = ((b * n_kv_heads + h) * t_total) * head_dim;
        std::copy(store.data() + src_off, store.data() + src_off + t_total * head_dim,
                  out.data() + dst_off);
      }
    return Tensor<S>({batch, n_kv_heads, t_total, head_dim}, std::move(out));
  }

  Tensor<S> k_view(Index layer, Index t_total) const {
    return view(k_store[static_cast<std::size_t>(layer)], t_total);
  }
  Tensor<S> v_view(Index layer, Index t_total) const {
    return view(v_store[static_cast<std::size_t>(layer)], t_total);
  }

  void advance(Index t) {
    if (t_cached + t > max_seq_len) throw std::runtime_error("kv_cache: overflow");
    t_cached += t;
  }

  void reset() { t_cached = 0; }

  // Live bytes: 2 slabs per decoder layer over the cached prefix.
  std::size_t bytes() const {
    return static_cast<std::size_t>(n_layers()) * 2u *
           static_cast<std::size_t>(batch * n_kv_heads * t_cached * head_dim) * sizeof(S);
  }
};

// Observation points used by the analysis instruments; never affects values.
template <typename S>
struct ForwardHooks {
  // Decoder layers only: schedule position, block input, attention branch
  // output (input-norm + attention + o-projection, pre-residual).
  std::function<void(Index layer, const Tensor<S>& x, const Tensor<S>& z)> on_attention;
  // Post-residual activation y = x + z for the same layer.
  std::function<void(Index layer, const Tensor<S>& y)> on_attention_residual;
};

// Attention branch including the input norm: o-projection of causal
// grouped-query attention over rope-rotated q/k. With a cache, new k/v are
// appended and attention runs over the whole cached prefix.
template <typename S>
Tensor<S> attention_forward(const Tensor<S>& x, const DecoderLayerWeights<S>& w,
                            const ModelConfig& cfg, std::type_identity_t<KVCache<S>*> cache,
                            Index decoder_ordinal,
                            const std::vector<Index>& positions) {
  const Index t = x.shape[1];
  if (static_cast<Index>(positions.size()) != t)
    throw std::invalid_argument("attention: position list length mismatch");
  const Index n_heads = cfg.n_heads;
  const Index n_kv = cfg.n_kv_heads;
  const Index hd = cfg.head_dim();

  Tensor<S> h = rmsnorm(x, w.input_norm, cfg.rms_eps);
  Tensor<S> q = to_heads(matmul(h, w.q), n_heads);
  Tensor<S> k = to_heads(matmul(h, w.k), n_kv);
  Tensor<S> v = to_heads(matmul(h, w.v), n_kv);
  q = rope_apply(q, positions, cfg.rope_theta);
  k = rope_apply(k, positions, cfg.rope_theta);

  Index offset = 0;
  if (cache) {
    offset = cache->t_cached;
    cache->write(decoder_ordinal, k, v);
    k = cache->k_view(decoder_ordinal, offset + t);
    v = cache->v_view(decoder_ordinal, offset + t);
  }
  const Index rep = n_heads / n_kv;
  if (rep > 1) {
    k = repeat_kv(k, rep);
    v = repeat_kv(v, rep);
  }
  Tensor<S> scores = scale(bmm(q, k, true), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
  Tensor<S> p = causal_softmax(scores, offset);
  Tensor<S> ctx = merge_heads(bmm(p, v));
  return matmul(ctx, w.o);
}

template <typename S>
Tensor<S> mlp_forward(const Tensor<S>& h, const Tensor<S>& gate, const Tensor<S>& up,
                      const Tensor<S>& down) {
  return matmul(mul(silu(matmul(h, gate)), matmul(h, up)), down);
}

template <typename S>
Tensor<S> decoder_block_forward(const Tensor<S>& x, const DecoderLayerWeights<S>& w,
                                const ModelConfig& cfg, std::type_identity_t<KVCache<S>*> cache,
                                Index decoder_ordinal, const std::vector<Index>& positions,
                                std::type_identity_t<const ForwardHooks<S>*> hooks = nullptr,
                                Index layer = -1) {
  Tensor<S> z = attention_forward(x, w, cfg, cache, decoder_ordinal, positions);
  if (hooks && hooks->on_attention) hooks->on_attention(layer, x, z);
  Tensor<S> y = add(x, z);
  if (hooks && hooks->on_attention_residual) hooks->on_attention_residual(layer, y);
  Tensor<S> h = rmsnorm(y, w.post_attn_norm, cfg.rms_eps);
  return add(y, mlp_forward(h, w.gate, w.up, w.down));
}

// No attention, no input norm beyond the group's own: x + mlp(norm(x)).
// Strictly tokenwise, so output at a position depends only on that token.
template <typename S>
Tensor<S> shishu_mlp_block_forward(const Tensor<S>& x, const MlpGroupWeights<S>& w,
                                   const ModelConfig& cfg) {
  Tensor<S> h = rmsnorm(x, w.norm, cfg.rms_eps);
  return add(x, mlp_forward(h, w.gate, w.up, w.down));
}

// tokens: row-major [batch x t]. With a cache, positions continue from the
// cached length and the cache advances by t.
template <typename S>
Tensor<S> model_forward(const ModelWeights<S>& m, const std::vector<std::int32_t>& tokens,
                        Index batch, Index t, std::type_identity_t<KVCache<S>*> cache = nullptr,
                        std::type_identity_t<const ForwardHooks<S>*> hooks = nullptr) {
  if (batch <= 0 || t <= 0) throw std::invalid_argument("model_forward: empty token block");
  if (static_cast<Index>(tokens.size()) != batch * t)
    throw std::invalid_argument("model_forward: token count mismatch");
  const Index offset = cache ? cache->t_cached : 0;
  if (offset + t > m.config.max_seq_len)
    throw std::runtime_error("model_forward: sequence exceeds max_seq_len");
  if (cache && cache->n_layers() != count_decoder_layers(m.schedule))
    throw std::invalid_argument("model_forward: cache/schedule mismatch");

  std::vector<Index> positions(static_cast<std::size_t>(t));
  for (Index i = 0; i < t; ++i) positions[static_cast<std::size_t>(i)] = offset + i;

  Tensor<S> x = embedding(tokens, {batch, t}, m.embed);
  for (std::size_t li = 0; li < m.schedule.size(); ++li) {
    const LayerKind& lk = m.schedule[li];
    if (lk.type == LayerKind::kDecoder) {
      x = decoder_block_forward(x, m.decoders[static_cast<std::size_t>(lk.index)], m.config, cache,
                                lk.index, positions, hooks, static_cast<Index>(li));
    } else {
      x = shishu_mlp_block_forward(x, m.groups[static_cast<std::size_t>(lk.index)], m.config);
    }
  }
  x = rmsnorm(x, m.final_norm, m.config.rms_eps);
  Tensor<S> logits = m.config.tie_embeddings ? matmul(x, m.embed, false, true)
                                             : matmul(x, m.lm_head, false, true);
  if (cache) cache->advance(t);
  return logits;
}

// One incremental token per batch row; logits [B x V] for the new position.
template <typename S>
Tensor<S> decode_step(const ModelWeights<S>& m, const std::vector<std::int32_t>& token_batch,
                      KVCache<S>& cache, std::type_identity_t<const ForwardHooks<S>*> hooks = nullptr) {
  const Index batch = static_cast<Index>(token_batch.size());
  Tensor<S> logits = model_forward(m, token_batch, batch, 1, &cache, hooks);
  return reshape(logits, {batch, m.config.vocab_size});
}

inline std::int32_t argmax_row(const float* row, Index v) {
  Index best = 0;
  for (Index i = 1; i < v; ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<std::int32_t>(best);
}

inline std::int32_t argmax_row(const double* row, Index v) {
  Index best = 0;
  for (Index i = 1; i < v; ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<std::int32_t>(best);
}

struct SamplingConfig {
  // 0 = greedy argmax. Positive temperature enables sampling.
  double temperature = 0.0;
  // 0 = no truncation.
  Index top_k = 0;
  std::uint64_t seed = 42;
};

template <typename S>
std::int32_t sample_token(const S* row, Index v, const SamplingConfig& sc, RngState& rng) {
  if (sc.temperature <= 0.0) return argmax_row(row, v);
  std::vector<std::pair<double, Index>> scored(static_cast<std::size_t>(v));
  for (Index i = 0; i < v; ++i) scored[static_cast<std::size_t>(i)] = {static_cast<double>(row[i]), i};
  Index pool = v;
  if (sc.top_k > 0 && sc.top_k < v) {
    std::partial_sort(scored.begin(), scored.begin() + sc.top_k, scored.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    pool = sc.top_k;
  }
  double m = scored[0].first;
  for (Index i = 1; i < pool; ++i) m = std::max(m, scored[static_cast<std::size_t>(i)].first);
  double z = 0.0;
  std::vector<double> p(static_cast<std::size_t>(pool));
  for (Index i = 0; i < pool; ++i) {
    p[static_cast<std::size_t>(i)] = std::exp((scored[static_cast<std::size_t>(i)].first - m) / sc.temperature);
    z += p[static_cast<std::size_t>(i)];
  }
  double u = rng.next_double() * z;
  for (Index i = 0; i < pool; ++i) {
    u -= p[static_cast<std::size_t>(i)];
    if (u <= 0.0) return static_cast<std::int32_t>(scored[static_cast<std::size_t>(i)].second);
  }
  return static_cast<std::int32_t>(scored[static_cast<std::size_t>(pool - 1)].second);
}

// Prefill the prompt, then decode n tokens. Returns only the generated ids.
template <typename S>
std::vector<std::int32_t> generate(const ModelWeights<S>& m, const std::vector<std::int32_t>& prompt,
                                   Index n, const SamplingConfig& sc = {}) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  NoGradGuard ng;
  const Index v = m.config.vocab_size;
  KVCache<S> cache = KVCache<S>::make(m.config, 1);
  RngState rng(sc.seed);
  std::vector<std::int32_t> out;
  if (n <= 0) return out;
  Tensor<S> logits = model_forward(m, prompt, 1, static_cast<Index>(prompt.size()), &cache);
  const S* last = logits.ptr() + (prompt.size() - 1) * static_cast<std::size_t>(v);
  std::int32_t next = sample_token(last, v, sc, rng);
  out.push_back(next);
  for (Index i = 1; i < n; ++i) {
    Tensor<S> step = decode_step(m, {next}, cache);
    next = sample_token(step.ptr(), v, sc, rng);
    out.push_back(next);
  }
  return out;
}

}  // namespace shishu
