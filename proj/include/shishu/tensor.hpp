// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode gradients.
//
// Every op is a pure function: inputs are never mutated and outputs are
// freshly allocated. Kernels are single-threaded with a fixed accumulation
// order (ascending inner index), so a given seed and call sequence is
// bit-reproducible run to run. Any non-finite value produced by an op is an
// error, never a silent state.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace shishu {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) {
    if (d < 0) throw std::invalid_argument("tensor: negative extent");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Thread-local autograd switch. Cache-backed decoding and evaluation run
// under NoGradGuard so no graph is recorded.
inline bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct Tensor;

// One recorded op. `backward` reads out_grad and accumulates into the
// parents' grad buffers.
template <typename S>
struct Node {
  std::vector<Tensor<S>> parents;
  std::shared_ptr<std::vector<S>> out_data;
  std::shared_ptr<std::vector<S>> out_grad;
  Shape out_shape;
  std::function<void(Node<S>&)> backward;
};

template <typename S>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;  // allocated on first use
  std::shared_ptr<Node<S>> node;
  bool requires_grad = false;

  Tensor() = default;

  Tensor(Shape s, std::vector<S> values) : shape(std::move(s)) {
    if (shape_numel(shape) != static_cast<Index>(values.size()))
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match value count " + std::to_string(values.size()));
    data = std::make_shared<std::vector<S>>(std::move(values));
  }

  static Tensor zeros(Shape s) {
    Index n = shape_numel(s);
    return Tensor(std::move(s), std::vector<S>(static_cast<std::size_t>(n), S(0)));
  }

  static Tensor full(Shape s, S v) {
    Index n = shape_numel(s);
    return Tensor(std::move(s), std::vector<S>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  Index numel() const { return data ? static_cast<Index>(data->size()) : 0; }
  std::size_t rank() const { return shape.size(); }
  Index dim(std::size_t i) const { return shape.at(i); }

  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }

  S value() const {
    if (numel() != 1) throw std::logic_error("tensor: value() on non-scalar");
    return (*data)[0];
  }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<S>>(data->size(), S(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), S(0));
  }

  S* grad_ptr() {
    ensure_grad();
    return grad->data();
  }

  // Same buffers, no history.
  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  // Deep copy of the values, no history.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<S>>(*data);
    return t;
  }

  // Grad storage is allocated here so every later copy of this tensor
  // (ops capture parents by value) accumulates into the same buffer.
  Tensor& mark_parameter() {
    requires_grad = true;
    ensure_grad();
    return *this;
  }
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.data->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>((*x.data)[i]);
  return Tensor<To>(x.shape, std::move(out));
}

namespace detail {

template <typename S>
inline void check_finite(const std::vector<S>& v, const char* op) {
  for (const S& x : v)
    if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": non-finite value produced");
}

template <typename S>
inline bool any_requires_grad(const std::vector<Tensor<S>>& ts) {
  for (const auto& t : ts)
    if (t.requires_grad) return true;
  return false;
}

// Wrap freshly computed values into a tensor, recording the op when autograd
// is on and some parent participates.
template <typename S>
Tensor<S> make_result(Shape shape, std::vector<S> values, std::vector<Tensor<S>> parents,
                      std::function<void(Node<S>&)> bw, const char* op) {
  check_finite(values, op);
  Tensor<S> out(std::move(shape), std::move(values));
  if (grad_enabled() && bw && any_requires_grad(parents)) {
    out.requires_grad = true;
    out.ensure_grad();
    auto node = std::make_shared<Node<S>>();
    node->parents = std::move(parents);
    node->out_data = out.data;
    node->out_grad = out.grad;
    node->out_shape = out.shape;
    node->backward = std::move(bw);
    out.node = node;
  }
  return out;
}

// C[M x N] (+)= op(A) . op(B).
// A is stored [M x K] row-major, or [K x M] when trans_a; B is [K x N], or
// [N x K] when trans_b. Per-entry accumulation runs in ascending k, matching
// a naive triple loop exactly.
template <typename S>
void gemm(S* c, const S* a, const S* b, Index m, Index n, Index k, bool trans_a, bool trans_b,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, S(0));
  if (!trans_a && !trans_b) {
    for (Index i = 0; i < m; ++i) {
      S* crow = c + i * n;
      const S* arow = a + i * k;
      for (Index p = 0; p < k; ++p) {
        const S av = arow[p];
        const S* brow = b + p * n;
        for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (Index i = 0; i < m; ++i) {
      const S* arow = a + i * k;
      S* crow = c + i * n;
      for (Index j = 0; j < n; ++j) {
        const S* brow = b + j * k;
        S acc = S(0);
        for (Index p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (Index p = 0; p < k; ++p) {
      const S* arow = a + p * m;
      const S* brow = b + p * n;
      for (Index i = 0; i < m; ++i) {
        const S av = arow[i];
        S* crow = c + i * n;
        for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    throw std::logic_error("gemm: trans_a && trans_b not supported");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Deterministic RNG: xoshiro256** seeded through splitmix64. The integer
// stream is platform-independent; normal draws use the Marsaglia polar
// method (libm log/sqrt only).
// ---------------------------------------------------------------------------
struct RngState {
  static constexpr const char* algorithm = "xoshiro256** (splitmix64-seeded)";

  std::uint64_t seed_value = 0;
  std::uint64_t s[4] = {0, 0, 0, 0};
  bool has_spare = false;
  double spare = 0.0;

  explicit RngState(std::uint64_t seed) : seed_value(seed) {
    std::uint64_t x = seed;
    for (auto& si : s) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      si = z ^ (z >> 31);
    }
  }

  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53 mantissa bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) via rejection.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("rng: next_below(0)");
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double next_normal() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    double u, v, q;
    do {
      u = 2.0 * next_double() - 1.0;
      v = 2.0 * next_double() - 1.0;
      q = u * u + v * v;
    } while (q >= 1.0 || q == 0.0);
    const double f = std::sqrt(-2.0 * std::log(q) / q);
    spare = v * f;
    has_spare = true;
    return u * f;
  }

  template <typename It>
  void shuffle(It begin, It end) {
    const auto n = static_cast<std::uint64_t>(end - begin);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = next_below(i);
      std::swap(begin[i - 1], begin[j]);
    }
  }
};

// ---------------------------------------------------------------------------
// Backward driver. Reverse post-order over recorded nodes; each node sees its
// full output gradient before propagating.
// ---------------------------------------------------------------------------
template <typename S>
void backward(Tensor<S>& root, S seed = S(1)) {
  if (root.numel() != 1) throw std::logic_error("backward: root must be a scalar");
  root.ensure_grad();
  (*root.grad)[0] += seed;
  if (!root.node) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.node.get(), 0);
  visited.insert(root.node.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx].node.get();
      ++idx;
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<S> out(a.data->size());
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  return detail::make_result<S>(
      a.shape, std::move(out), {a, b},
      [](Node<S>& n) {
        const std::vector<S>& g = *n.out_grad;
        for (int side = 0; side < 2; ++side) {
          Tensor<S>& p = n.parents[side];
          if (!p.requires_grad) continue;
          S* pg = p.grad_ptr();
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
      },
      "add");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<S> out(a.data->size());
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return detail::make_result<S>(
      a.shape, std::move(out), {a, b},
      [](Node<S>& n) {
        const std::vector<S>& g = *n.out_grad;
        Tensor<S>& a_ = n.parents[0];
        Tensor<S>& b_ = n.parents[1];
        if (a_.requires_grad) {
          S* pg = a_.grad_ptr();
          const S* pb_ = b_.ptr();
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * pb_[i];
        }
        if (b_.requires_grad) {
          S* pg = b_.grad_ptr();
          const S* pa_ = a_.ptr();
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * pa_[i];
        }
      },
      "mul");
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * c;
  return detail::make_result<S>(
      x.shape, std::move(out), {x},
      [c](Node<S>& n) {
        Tensor<S>& p = n.parents[0];
        if (!p.requires_grad) return;
        const std::vector<S>& g = *n.out_grad;
        S* pg = p.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * c;
      },
      "scale");
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  double acc = 0.0;
  const S* px = x.ptr();
  for (Index i = 0; i < x.numel(); ++i) acc += static_cast<double>(px[i]);
  return detail::make_result<S>(
      {1}, {static_cast<S>(acc)}, {x},
      [](Node<S>& n) {
        Tensor<S>& p = n.parents[0];
        if (!p.requires_grad) return;
        const S g = (*n.out_grad)[0];
        S* pg = p.grad_ptr();
        for (std::size_t i = 0; i < p.data->size(); ++i) pg[i] += g;
      },
      "sum");
}

// Shares the underlying values; gradient flows through unchanged.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw std::invalid_argument("reshape: " + shape_str(x.shape) + " -> " + shape_str(s) +
                                " changes element count");
  Tensor<S> out;
  out.shape = std::move(s);
  out.data = x.data;
  if (grad_enabled() && x.requires_grad) {
    out.requires_grad = true;
    out.ensure_grad();
    auto node = std::make_shared<Node<S>>();
    node->parents = {x};
    node->out_data = out.data;
    node->out_grad = out.grad;
    node->out_shape = out.shape;
    node->backward = [](Node<S>& n) {
      Tensor<S>& p = n.parents[0];
      if (!p.requires_grad) return;
      const std::vector<S>& g = *n.out_grad;
      S* pg = p.grad_ptr();
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    };
    out.node = node;
  }
  return out;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S sig = S(1) / (S(1) + std::exp(-px[i]));
    out[i] = px[i] * sig;
  }
  return detail::make_result<S>(
      x.shape, std::move(out), {x},
      [](Node<S>& n) {
        Tensor<S>& p = n.parents[0];
        if (!p.requires_grad) return;
        const std::vector<S>& g = *n.out_grad;
        const S* px = p.ptr();
        S* pg = p.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const S sig = S(1) / (S(1) + std::exp(-px[i]));
          pg[i] += g[i] * sig * (S(1) + px[i] * (S(1) - sig));
        }
      },
      "silu");
}

// y = weight ⊙ x / sqrt(mean(x^2) + eps), per vector over the last extent.
// eps = 0 is allowed; an all-zero vector then produces an error (division by
// zero surfaces as the non-finite check).
template <typename S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& weight, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("rmsnorm: rank-0 input");
  const Index d = x.shape.back();
  if (d == 0) throw std::invalid_argument("rmsnorm: zero feature extent");
  if (weight.numel() != d)
    throw std::invalid_argument("rmsnorm: weight length " + std::to_string(weight.numel()) +
                                " != feature extent " + std::to_string(d));
  if (eps < 0) throw std::invalid_argument("rmsnorm: negative eps");
  const Index rows = x.numel() / d;
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  const S* pw = weight.ptr();
  for (Index r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    double ms = 0.0;
    for (Index c = 0; c < d; ++c) ms += static_cast<double>(xr[c]) * static_cast<double>(xr[c]);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    S* yr = out.data() + r * d;
    for (Index c = 0; c < d; ++c) yr[c] = pw[c] * static_cast<S>(static_cast<double>(xr[c]) * inv);
  }
  return detail::make_result<S>(
      x.shape, std::move(out), {x, weight},
      [eps, d](Node<S>& n) {
        Tensor<S>& xp = n.parents[0];
        Tensor<S>& wp = n.parents[1];
        const std::vector<S>& g = *n.out_grad;
        const S* px = xp.ptr();
        const S* pw = wp.ptr();
        const Index rows = static_cast<Index>(g.size()) / d;
        S* xg = xp.requires_grad ? xp.grad_ptr() : nullptr;
        S* wg = wp.requires_grad ? wp.grad_ptr() : nullptr;
        for (Index r = 0; r < rows; ++r) {
          const S* xr = px + r * d;
          const S* gr = g.data() + r * d;
          double ms = 0.0;
          for (Index c = 0; c < d; ++c) ms += static_cast<double>(xr[c]) * static_cast<double>(xr[c]);
          const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
          if (wg) {
            for (Index c = 0; c < d; ++c)
              wg[c] += gr[c] * static_cast<S>(static_cast<double>(xr[c]) * inv);
          }
          if (xg) {
            double dot = 0.0;  // sum_c g_c w_c x_c
            for (Index c = 0; c < d; ++c)
              dot += static_cast<double>(gr[c]) * static_cast<double>(pw[c]) * static_cast<double>(xr[c]);
            const double k = dot * inv * inv * inv / static_cast<double>(d);
            S* xgr = xg + r * d;
            for (Index c = 0; c < d; ++c)
              xgr[c] += static_cast<S>(static_cast<double>(gr[c]) * static_cast<double>(pw[c]) * inv -
                                       static_cast<double>(xr[c]) * k);
          }
        }
      },
      "rmsnorm");
}

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax_rows: rank-0 input");
  const Index n = x.shape.back();
  if (n == 0) throw std::invalid_argument("softmax_rows: zero row extent");
  const Index rows = x.numel() / n;
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  for (Index r = 0; r < rows; ++r) {
    const S* xr = px + r * n;
    S m = xr[0];
    for (Index c = 1; c < n; ++c) m = std::max(m, xr[c]);
    double z = 0.0;
    S* yr = out.data() + r * n;
    for (Index c = 0; c < n; ++c) {
      yr[c] = std::exp(xr[c] - m);
      z += static_cast<double>(yr[c]);
    }
    const double invz = 1.0 / z;
    for (Index c = 0; c < n; ++c) yr[c] = static_cast<S>(static_cast<double>(yr[c]) * invz);
  }
  return detail::make_result<S>(
      x.shape, std::move(out), {x},
      [n](Node<S>& n_) {
        Tensor<S>& p = n_.parents[0];
        if (!p.requires_grad) return;
        const std::vector<S>& g = *n_.out_grad;
        const std::vector<S>& y = *n_.out_data;
        S* pg = p.grad_ptr();
        const Index rows = static_cast<Index>(g.size()) / n;
        for (Index r = 0; r < rows; ++r) {
          const S* yr = y.data() + r * n;
          const S* gr = g.data() + r * n;
          double dot = 0.0;
          for (Index c = 0; c < n; ++c) dot += static_cast<double>(gr[c]) * static_cast<double>(yr[c]);
          S* pgr = pg + r * n;
          for (Index c = 0; c < n; ++c)
            pgr[c] += static_cast<S>(static_cast<double>(yr[c]) * (static_cast<double>(gr[c]) - dot));
        }
      },
      "softmax_rows");
}

// Softmax over the causally valid prefix of each score row: row r of a
// [.., Tq, Tk] block attends to columns [0, offset + r]. Masked columns are
// exactly zero, so later positions can never leak backward.
template <typename S>
Tensor<S> causal_softmax(const Tensor<S>& scores, Index offset) {
  if (scores.rank() < 2) throw std::invalid_argument("causal_softmax: need rank >= 2");
  const Index tk = scores.shape[scores.rank() - 1];
  const Index tq = scores.shape[scores.rank() - 2];
  if (offset < 0 || offset + tq > tk)
    throw std::invalid_argument("causal_softmax: offset " + std::to_string(offset) +
                                " with Tq=" + std::to_string(tq) + " exceeds Tk=" + std::to_string(tk));
  const Index batches = scores.numel() / (tq * tk);
  std::vector<S> out(scores.data->size(), S(0));
  const S* px = scores.ptr();
  for (Index b = 0; b < batches; ++b) {
    for (Index r = 0; r < tq; ++r) {
      const Index valid = offset + r + 1;
      const S* xr = px + (b * tq + r) * tk;
      S* yr = out.data() + (b * tq + r) * tk;
      S m = xr[0];
      for (Index c = 1; c < valid; ++c) m = std::max(m, xr[c]);
      double z = 0.0;
      for (Index c = 0; c < valid; ++c) {
        yr[c] = std::exp(xr[c] - m);
        z += static_cast<double>(yr[c]);
      }
      const double invz = 1.0 / z;
      for (Index c = 0; c < valid; ++c) yr[c] = static_cast<S>(static_cast<double>(yr[c]) * invz);
    }
  }
  return detail::make_result<S>(
      scores.shape, std::move(out), {scores},
      [tq, tk, offset](Node<S>& n) {
        Tensor<S>& p = n.parents[0];
        if (!p.requires_grad) return;
        const std::vector<S>& g = *n.out_grad;
        const std::vector<S>& y = *n.out_data;
        S* pg = p.grad_ptr();
        const Index batches = static_cast<Index>(g.size()) / (tq * tk);
        for (Index b = 0; b < batches; ++b) {
          for (Index r = 0; r < tq; ++r) {
            const Index valid = offset + r + 1;
            const S* yr = y.data() + (b * tq + r) * tk;
            const S* gr = g.data() + (b * tq + r) * tk;
            S* pgr = pg + (b * tq + r) * tk;
            double dot = 0.0;
            for (Index c = 0; c < valid; ++c) dot += static_cast<double>(gr[c]) * static_cast<double>(yr[c]);
            for (Index c = 0; c < valid; ++c)
              pgr[c] += static_cast<S>(static_cast<double>(yr[c]) * (static_cast<double>(gr[c]) - dot));
          }
        }
      },
      "causal_softmax");
}

// a: [..leading.., k] x b: [k, n] (or [n, k] with trans_b). Leading dims fold
// into the row count. trans_a is only meaningful for rank-2 a.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() < 2 || b.rank() != 2) throw std::invalid_argument("matmul: need a rank>=2, b rank 2");
  if (trans_a && a.rank() != 2) throw std::invalid_argument("matmul: trans_a requires rank-2 a");
  const Index m = trans_a ? a.shape[1] : a.numel() / a.shape.back();
  const Index k = trans_a ? a.shape[0] : a.shape.back();
  const Index kb = trans_b ? b.shape[1] : b.shape[0];
  const Index n = trans_b ? b.shape[0] : b.shape[1];
  if (k != kb)
    throw std::invalid_argument("matmul: inner extents disagree, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Shape out_shape;
  if (trans_a) {
    out_shape = {m, n};
  } else {
    out_shape.assign(a.shape.begin(), a.shape.end() - 1);
    out_shape.push_back(n);
  }
  std::vector<S> out(static_cast<std::size_t>(m * n));
  detail::gemm(out.data(), a.ptr(), b.ptr(), m, n, k, trans_a, trans_b, false);
  return detail::make_result<S>(
      std::move(out_shape), std::move(out), {a, b},
      [m, n, k, trans_a, trans_b](Node<S>& nd) {
        Tensor<S>& ap = nd.parents[0];
        Tensor<S>& bp = nd.parents[1];
        const S* g = nd.out_grad->data();
        const S* pa = ap.ptr();
        const S* pb = bp.ptr();
        if (!trans_a && !trans_b) {
          if (ap.requires_grad) detail::gemm(ap.grad_ptr(), g, pb, m, k, n, false, true, true);
          if (bp.requires_grad) detail::gemm(bp.grad_ptr(), pa, g, k, n, m, true, false, true);
        } else if (!trans_a && trans_b) {
          if (ap.requires_grad) detail::gemm(ap.grad_ptr(), g, pb, m, k, n, false, false, true);
          if (bp.requires_grad) detail::gemm(bp.grad_ptr(), g, pa, n, k, m, true, false, true);
        } else {  // trans_a && !trans_b
          if (ap.requires_grad) detail::gemm(ap.grad_ptr(), pb, g, k, m, n, false, true, true);
          if (bp.requires_grad) detail::gemm(bp.grad_ptr(), pa, g, k, n, m, false, false, true);
        }
      },
      "matmul");
}

// Batched matmul: a [..batch.., m, k] x b [..batch.., k, n] (or [.., n, k]
// with trans_b), identical leading dims.
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw std::invalid_argument("bmm: rank mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  for (std::size_t i = 0; i + 2 < a.rank(); ++i)
    if (a.shape[i] != b.shape[i]) throw std::invalid_argument("bmm: leading dims disagree");
  const Index m = a.shape[a.rank() - 2];
  const Index k = a.shape[a.rank() - 1];
  const Index kb = trans_b ? b.shape[b.rank() - 1] : b.shape[b.rank() - 2];
  const Index n = trans_b ? b.shape[b.rank() - 2] : b.shape[b.rank() - 1];
  if (k != kb) throw std::invalid_argument("bmm: inner extents disagree");
  const Index batches = a.numel() / (m * k);
  Shape out_shape(a.shape.begin(), a.shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<S> out(static_cast<std::size_t>(batches * m * n));
  for (Index t = 0; t < batches; ++t)
    detail::gemm(out.data() + t * m * n, a.ptr() + t * m * k, b.ptr() + t * k * n, m, n, k, false,
                 trans_b, false);
  return detail::make_result<S>(
      std::move(out_shape), std::move(out), {a, b},
      [m, n, k, batches, trans_b](Node<S>& nd) {
        Tensor<S>& ap = nd.parents[0];
        Tensor<S>& bp = nd.parents[1];
        const S* g = nd.out_grad->data();
        const S* pa = ap.ptr();
        const S* pb = bp.ptr();
        for (Index t = 0; t < batches; ++t) {
          const S* gt = g + t * m * n;
          const S* at = pa + t * m * k;
          const S* bt = pb + t * k * n;
          if (!trans_b) {
            if (ap.requires_grad) detail::gemm(ap.grad_ptr() + t * m * k, gt, bt, m, k, n, false, true, true);
            if (bp.requires_grad) detail::gemm(bp.grad_ptr() + t * k * n, at, gt, k, n, m, true, false, true);
          } else {
            if (ap.requires_grad) detail::gemm(ap.grad_ptr() + t * m * k, gt, bt, m, k, n, false, false, true);
            if (bp.requires_grad) detail::gemm(bp.grad_ptr() + t * k * n, gt, at, n, k, m, true, false, true);
          }
        }
      },
      "bmm");
}

// [B, T, H*hd] -> [B, H, T, hd]
template <typename S>
Tensor<S> to_heads(const Tensor<S>& x, Index n_heads) {
  if (x.rank() != 3) throw std::invalid_argument("to_heads: need [B, T, H*hd]");
  const Index bsz = x.shape[0], t = x.shape[1], width = x.shape[2];
  if (width % n_heads != 0) throw std::invalid_argument("to_heads: width not divisible by head count");
  const Index hd = width / n_heads;
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  for (Index b = 0; b < bsz; ++b)
    for (Index h = 0; h < n_heads; ++h)
      for (Index i = 0; i < t; ++i) {
        const S* src = px + (b * t + i) * width + h * hd;
        S* dst = out.data() + ((b * n_heads + h) * t + i) * hd;
        std::copy(src, src + hd, dst);
      }
  return detail::make_result<S>(
      {bsz, n_heads, t, hd}, std::move(out), {x},
      [bsz, t, width, n_heads, hd](Node<S>& nd) {
        Tensor<S>& p = nd.parents[0];
        if (!p.requires_grad) return;
        const S* g = nd.out_grad->data();
        S* pg = p.grad_ptr();
        for (Index b = 0; b < bsz; ++b)
          for (Index h = 0; h < n_heads; ++h)
            for (Index i = 0; i < t; ++i) {
              const S* src = g + ((b * n_heads + h) * t + i) * hd;
              S* dst = pg + (b * t + i) * width + h * hd;
              for (Index c = 0; c < hd; ++c) dst[c] += src[c];
            }
      },
      "to_heads");
}

// [B, H, T, hd] -> [B, T, H*hd]
template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  if (x.rank() != 4) throw std::invalid_argument("merge_heads: need [B, H, T, hd]");
  const Index bsz = x.shape[0], h_ = x.shape[1], t = x.shape[2], hd = x.shape[3];
  const Index width = h_ * hd;
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  for (Index b = 0; b < bsz; ++b)
    for (Index h = 0; h < h_; ++h)
      for (Index i = 0; i < t; ++i) {
        const S* src = px + ((b * h_ + h) * t + i) * hd;
        S* dst = out.data() + (b * t + i) * width + h * hd;
        std::copy(src, src + hd, dst);
      }
  return detail::make_result<S>(
      {bsz, t, width}, std::move(out), {x},
      [bsz, h_, t, hd, width](Node<S>& nd) {
        Tensor<S>& p = nd.parents[0];
        if (!p.requires_grad) return;
        const S* g = nd.out_grad->data();
        S* pg = p.grad_ptr();
        for (Index b = 0; b < bsz; ++b)
          for (Index h = 0; h < h_; ++h)
            for (Index i = 0; i < t; ++i) {
              const S* src = g + (b * t + i) * width + h * hd;
              S* dst = pg + ((b * h_ + h) * t + i) * hd;
              for (Index c = 0; c < hd; ++c) dst[c] += src[c];
            }
      },
      "merge_heads");
}

// Repeat each KV head `rep` times consecutively: [B, KH, T, hd] -> [B, KH*rep, T, hd].
template <typename S>
Tensor<S> repeat_kv(const Tensor<S>& x, Index rep) {
  if (x.rank() != 4) throw std::invalid_argument("repeat_kv: need [B, KH, T, hd]");
  if (rep < 1) throw std::invalid_argument("repeat_kv: rep < 1");
  const Index bsz = x.shape[0], kh = x.shape[1], t = x.shape[2], hd = x.shape[3];
  const Index plane = t * hd;
  std::vector<S> out(static_cast<std::size_t>(bsz * kh * rep * plane));
  const S* px = x.ptr();
  for (Index b = 0; b < bsz; ++b)
    for (Index h = 0; h < kh; ++h) {
      const S* src = px + (b * kh + h) * plane;
      for (Index r = 0; r < rep; ++r) {
        S* dst = out.data() + ((b * kh + h) * rep + r) * plane;
        std::copy(src, src + plane, dst);
      }
    }
  return detail::make_result<S>(
      {bsz, kh * rep, t, hd}, std::move(out), {x},
      [bsz, kh, rep, plane](Node<S>& nd) {
        Tensor<S>& p = nd.parents[0];
        if (!p.requires_grad) return;
        const S* g = nd.out_grad->data();
        S* pg = p.grad_ptr();
        for (Index b = 0; b < bsz; ++b)
          for (Index h = 0; h < kh; ++h) {
            S* dst = pg + (b * kh + h) * plane;
            for (Index r = 0; r < rep; ++r) {
              const S* src = g + ((b * kh + h) * rep + r) * plane;
              for (Index i = 0; i < plane; ++i) dst[i] += src[i];
            }
          }
      },
      "repeat_kv");
}

// Rotary embedding over channel pairs (2i, 2i+1) of the last extent: each
// pair rotates by positions[t] * theta^(-2i/hd). Position 0 is the exact
// identity; every rotation preserves the pair norm.
template <typename S>
Tensor<S> rope_apply(const Tensor<S>& x, const std::vector<Index>& positions, double theta) {
  if (x.rank() < 2) throw std::invalid_argument("rope_apply: need [.., T, hd]");
  const Index hd = x.shape[x.rank() - 1];
  const Index t = x.shape[x.rank() - 2];
  if (hd % 2 != 0) throw std::invalid_argument("rope_apply: odd head_dim");
  if (static_cast<Index>(positions.size()) != t)
    throw std::invalid_argument("rope_apply: position list length mismatch");
  const Index half = hd / 2;
  // Angle table, shared by forward and backward.
  auto trig = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t * half * 2));
  for (Index i = 0; i < t; ++i)
    for (Index j = 0; j < half; ++j) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
      const double ang = static_cast<double>(positions[i]) * freq;
      (*trig)[(i * half + j) * 2] = std::cos(ang);
      (*trig)[(i * half + j) * 2 + 1] = std::sin(ang);
    }
  const Index planes = x.numel() / (t * hd);
  std::vector<S> out(x.data->size());
  const S* px = x.ptr();
  for (Index p = 0; p < planes; ++p)
    for (Index i = 0; i < t; ++i) {
      const S* src = px + (p * t + i) * hd;
      S* dst = out.data() + (p * t + i) * hd;
      for (Index j = 0; j < half; ++j) {
        const double c = (*trig)[(i * half + j) * 2];
        const double s = (*trig)[(i * half + j) * 2 + 1];
        const double x0 = static_cast<double>(src[2 * j]);
        const double x1 = static_cast<double>(src[2 * j + 1]);
        dst[2 * j] = static_cast<S>(c * x0 - s * x1);
        dst[2 * j + 1] = static_cast<S>(s * x0 + c * x1);
      }
    }
  return detail::make_result<S>(
      x.shape, std::move(out), {x},
      [trig, t, hd, half](Node<S>& nd) {
        Tensor<S>& p = nd.parents[0];
        if (!p.requires_grad) return;
        const S* g = nd.out_grad->data();
        S* pg = p.grad_ptr();
        const Index planes = static_cast<Index>(nd.out_grad->size()) / (t * hd);
        for (Index pl = 0; pl < planes; ++pl)
          for (Index i = 0; i < t; ++i) {
            const S* gr = g + (pl * t + i) * hd;
            S* dst = pg + (pl * t + i) * hd;
            for (Index j = 0; j < half; ++j) {
              const double c = (*trig)[(i * half + j) * 2];
              const double s = (*trig)[(i * half + j) * 2 + 1];
              const double g0 = static_cast<double>(gr[2 * j]);
              const double g1 = static_cast<double>(gr[2 * j + 1]);
              dst[2 * j] += static_cast<S>(c * g0 + s * g1);
              dst[2 * j + 1] += static_cast<S>(-s * g0 + c * g1);
            }
          }
      },
      "rope_apply");
}

// Row gather: out[i] = table[tokens[i]]. tokens laid out row-major over any
// leading shape; the table is [V, d].
template <typename S>
Tensor<S> embedding(const std::vector<std::int32_t>& tokens, Shape token_shape, const Tensor<S>& table) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [V, d]");
  if (shape_numel(token_shape) != static_cast<Index>(tokens.size()))
    throw std::invalid_argument("embedding: token shape mismatch");
  const Index v = table.shape[0], d = table.shape[1];
  for (std::int32_t id : tokens)
    if (id < 0 || id >= v)
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(v));
  std::vector<S> out(tokens.size() * static_cast<std::size_t>(d));
  const S* pt = table.ptr();
  for (std::size_t i = 0; i < tokens.size(); ++i)
    std::copy(pt + static_cast<Index>(tokens[i]) * d, pt + (static_cast<Index>(tokens[i]) + 1) * d,
              out.data() + static_cast<Index>(i) * d);
  Shape out_shape = std::move(token_shape);
  out_shape.push_back(d);
  return detail::make_result<S>(
      std::move(out_shape), std::move(out), {table},
      [tokens, d](Node<S>& nd) {
        Tensor<S>& p = nd.parents[0];
        if (!p.requires_grad) return;
        const S* g = nd.out_grad->data();
        S* pg = p.grad_ptr();
        for (std::size_t i = 0; i < tokens.size(); ++i) {
          S* dst = pg + static_cast<Index>(tokens[i]) * d;
          const S* src = g + static_cast<Index>(i) * d;
          for (Index c = 0; c < d; ++c) dst[c] += src[c];
        }
      },
      "embedding");
}

inline constexpr std::int32_t kIgnoreIndex = -1;

// Mean negative log-likelihood over non-ignored positions. logits: [.., V]
// with one target per row; gradient is (softmax - onehot) / count.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<std::int32_t>& targets,
                        std::int32_t ignore_index = kIgnoreIndex) {
  if (logits.rank() < 1) throw std::invalid_argument("cross_entropy: rank-0 logits");
  const Index v = logits.shape.back();
  const Index rows = logits.numel() / v;
  if (static_cast<Index>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: target count " + std::to_string(targets.size()) +
                                " != rows " + std::to_string(rows));
  Index count = 0;
  double loss = 0.0;
  const S* px = logits.ptr();
  for (Index r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || t >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                              std::to_string(v));
    const S* xr = px + r * v;
    double m = static_cast<double>(xr[0]);
    for (Index c = 1; c < v; ++c) m = std::max(m, static_cast<double>(xr[c]));
    double z = 0.0;
    for (Index c = 0; c < v; ++c) z += std::exp(static_cast<double>(xr[c]) - m);
    loss += m + std::log(z) - static_cast<double>(xr[t]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target ignored");
  loss /= static_cast<double>(count);
  return detail::make_result<S>(
      {1}, {static_cast<S>(loss)}, {logits},
      [targets, ignore_index, v, count](Node<S>& nd) {
        Tensor<S>& p = nd.parents[0];
        if (!p.requires_grad) return;
        const double g0 = static_cast<double>((*nd.out_grad)[0]) / static_cast<double>(count);
        const S* px = p.ptr();
        S* pg = p.grad_ptr();
        const Index rows = static_cast<Index>(targets.size());
        for (Index r = 0; r < rows; ++r) {
          const std::int32_t t = targets[r];
          if (t == ignore_index) continue;
          const S* xr = px + r * v;
          S* gr = pg + r * v;
          double m = static_cast<double>(xr[0]);
          for (Index c = 1; c < v; ++c) m = std::max(m, static_cast<double>(xr[c]));
          double z = 0.0;
          for (Index c = 0; c < v; ++c) z += std::exp(static_cast<double>(xr[c]) - m);
          const double invz = 1.0 / z;
          for (Index c = 0; c < v; ++c) {
            const double soft = std::exp(static_cast<double>(xr[c]) - m) * invz;
            gr[c] += static_cast<S>(g0 * (soft - (c == t ? 1.0 : 0.0)));
          }
        }
      },
      "cross_entropy");
}

// Deterministic Gaussian fill. Draws consume the rng stream in row-major
// element order, so the same seed always yields the same tensor.
template <typename S>
Tensor<S> normal_init(Shape shape, double mean, double std, RngState& rng) {
  if (std < 0) throw std::invalid_argument("normal_init: negative std");
  const Index n = shape_numel(shape);
  std::vector<S> out(static_cast<std::size_t>(n));
  for (auto& x : out) x = static_cast<S>(mean + std * rng.next_normal());
  return Tensor<S>(std::move(shape), std::move(out));
}

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h. A non-positive
// h selects the default per-element step max(1e-5, 1e-3 |x_i|). Meant to run
// in double precision.
template <typename S>
Tensor<S> finite_diff_grad(const std::function<S(const Tensor<S>&)>& f, const Tensor<S>& x,
                           S h = S(-1)) {
  Tensor<S> probe = x.clone();
  std::vector<S> g(x.data->size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const S xi = (*x.data)[i];
    const S hi = h > S(0) ? h : std::max(S(1e-5), S(1e-3) * std::abs(xi));
    (*probe.data)[i] = xi + hi;
    const S fp = f(probe);
    (*probe.data)[i] = xi - hi;
    const S fm = f(probe);
    (*probe.data)[i] = xi;
    g[i] = (fp - fm) / (S(2) * hi);
  }
  return Tensor<S>(x.shape, std::move(g));
}

}  // namespace shishu
