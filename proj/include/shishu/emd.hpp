// SPDX-License-Identifier: Apache-2.0
//
// Earth Mover's Distance over univariate discrete distributions, and the
// adjacent-layer weight-similarity ratios r_i = EMD_i / min(range_i,
// range_i+1) with per-family pairwise distance matrices.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "shishu/io.hpp"
#include "shishu/model.hpp"
#include "shishu/tensor.hpp"

namespace shishu {

struct DiscreteDistribution {
  std::vector<double> points;  // strictly increasing
  std::vector<double> masses;  // non-negative, summing to 1 within 1e-9

  void validate() const {
    if (points.empty() || points.size() != masses.size())
      throw std::invalid_argument("emd: empty or mismatched distribution");
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (i > 0 && points[i] <= points[i - 1])
        throw std::invalid_argument("emd: support points must be strictly increasing");
      if (masses[i] < 0.0) throw std::invalid_argument("emd: negative mass");
      total += masses[i];
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::invalid_argument("emd: masses sum to " + format_metric(total) + ", expected 1");
  }
};

// Optimal transport cost by monotone north-west matching, which is exact for
// the absolute-difference cost on the line. Kept independent of emd_1d as a
// cross-checking oracle.
inline double emd_lp(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  p.validate();
  q.validate();
  double cost = 0.0;
  std::size_t i = 0, j = 0;
  double pr = p.masses[0], qr = q.masses[0];
  while (i < p.points.size() && j < q.points.size()) {
    const double moved = std::min(pr, qr);
    cost += moved * std::abs(p.points[i] - q.points[j]);
    pr -= moved;
    qr -= moved;
    if (pr <= 1e-15) {
      ++i;
      pr = i < p.masses.size() ? p.masses[i] : 0.0;
    }
    if (qr <= 1e-15) {
      ++j;
      qr = j < q.masses.size() ? q.masses[j] : 0.0;
    }
  }
  return cost;
}

// Closed form on the line: the area between the two CDFs, swept over the
// merged support.
inline double emd_1d(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  p.validate();
  q.validate();
  double cost = 0.0, fp = 0.0, fq = 0.0;
  std::size_t i = 0, j = 0;
  double prev = std::min(p.points[0], q.points[0]);
  while (i < p.points.size() || j < q.points.size()) {
    double x;
    if (i < p.points.size() && j < q.points.size())
      x = std::min(p.points[i], q.points[j]);
    else
      x = i < p.points.size() ? p.points[i] : q.points[j];
    cost += std::abs(fp - fq) * (x - prev);
    while (i < p.points.size() && p.points[i] == x) fp += p.masses[i++];
    while (j < q.points.size() && q.points[j] == x) fq += q.masses[j++];
    prev = x;
  }
  return cost;
}

constexpr Index kEmdMaxSamples = 65536;

// Empirical distribution of a weight tensor: every retained value gets equal
// mass, equal values merge. Above max_samples a seeded uniform subsample
// keeps the cost bounded without histogram binning.
template <typename S>
DiscreteDistribution weight_distribution(const Tensor<S>& w, Index max_samples = kEmdMaxSamples,
                                         std::uint64_t seed = 42) {
  if (!w.data || w.data->empty()) throw std::invalid_argument("emd: empty weight tensor");
  if (max_samples < 1) throw std::invalid_argument("emd: max_samples must be positive");
  std::vector<double> vals(w.data->begin(), w.data->end());
  if (vals.size() > static_cast<std::size_t>(max_samples)) {
    RngState rng(seed);
    for (std::size_t k = 0; k < static_cast<std::size_t>(max_samples); ++k)
      std::swap(vals[k], vals[k + static_cast<std::size_t>(rng.next_below(
                                      static_cast<std::uint64_t>(vals.size() - k)))]);
    vals.resize(static_cast<std::size_t>(max_samples));
  }
  std::sort(vals.begin(), vals.end());
  DiscreteDistribution d;
  const double unit = 1.0 / static_cast<double>(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!d.points.empty() && vals[i] == d.points.back())
      d.masses.back() += unit;
    else {
      d.points.push_back(vals[i]);
      d.masses.push_back(unit);
    }
  }
  return d;
}

template <typename S>
double layer_range(const Tensor<S>& w) {
  if (!w.data || w.data->empty()) throw std::invalid_argument("emd: empty weight tensor");
  const auto [lo, hi] = std::minmax_element(w.data->begin(), w.data->end());
  return static_cast<double>(*hi) - static_cast<double>(*lo);
}

struct FamilyScores {
  std::string family;
  std::vector<double> delta;  // per layer
  std::vector<double> emd;    // per adjacent pair
  std::vector<double> r;      // per adjacent pair, NaN when undefined
  std::vector<bool> r_defined;
  double r_max = 0.0;  // over defined ratios only
  Index undefined_count = 0;
  std::vector<double> matrix;  // n_layers x n_layers pairwise EMD
};

struct EMDReport {
  Index n_layers = 0;
  std::vector<FamilyScores> families;  // gate, up, down

  double r_max_x100(const std::string& family) const {
    for (const auto& f : families)
      if (f.family == family) return 100.0 * f.r_max;
    throw std::invalid_argument("emd: unknown family " + family);
  }
};

// Walks the layer stack; every layer carries MLP weights, either its own
// (decoder) or its share group's (ShishuMLP), so a shared pair contributes
// two identical consecutive rows.
template <typename S>
EMDReport r_scores(const ModelWeights<S>& m, Index max_samples = kEmdMaxSamples,
                   std::uint64_t seed = 42) {
  const Index n = static_cast<Index>(m.schedule.size());
  if (n < 2) throw std::invalid_argument("emd: need at least two layers to compare");

  EMDReport report;
  report.n_layers = n;
  const char* families[3] = {"gate", "up", "down"};
  for (int fi = 0; fi < 3; ++fi) {
    FamilyScores fs;
    fs.family = families[fi];
    std::vector<DiscreteDistribution> dist(static_cast<std::size_t>(n));
    for (Index li = 0; li < n; ++li) {
      const LayerKind& lk = m.schedule[static_cast<std::size_t>(li)];
      const Tensor<S>* w = nullptr;
      if (lk.type == LayerKind::Type::kDecoder) {
        const auto& d = m.decoders[static_cast<std::size_t>(lk.index)];
        w = fi == 0 ? &d.gate : fi == 1 ? &d.up : &d.down;
      } else {
        const auto& g = m.groups[static_cast<std::size_t>(lk.index)];
        w = fi == 0 ? &g.gate : fi == 1 ? &g.up : &g.down;
      }
      dist[static_cast<std::size_t>(li)] =
          weight_distribution(*w, max_samples,
                              seed + 1000003ULL * static_cast<std::uint64_t>(li) +
                                  static_cast<std::uint64_t>(fi));
      fs.delta.push_back(layer_range(*w));
    }

    fs.matrix.assign(static_cast<std::size_t>(n * n), 0.0);
    for (Index a = 0; a < n; ++a)
      for (Index b = a + 1; b < n; ++b) {
        const double e = emd_1d(dist[static_cast<std::size_t>(a)], dist[static_cast<std::size_t>(b)]);
        fs.matrix[static_cast<std::size_t>(a * n + b)] = e;
        fs.matrix[static_cast<std::size_t>(b * n + a)] = e;
      }

    fs.r_max = 0.0;
    for (Index i = 0; i + 1 < n; ++i) {
      const double e = fs.matrix[static_cast<std::size_t>(i * n + i + 1)];
      fs.emd.push_back(e);
      const double dmin = std::min(fs.delta[static_cast<std::size_t>(i)],
                                   fs.delta[static_cast<std::size_t>(i) + 1]);
      if (dmin <= 0.0) {
        fs.r.push_back(std::numeric_limits<double>::quiet_NaN());
        fs.r_defined.push_back(false);
        ++fs.undefined_count;
      } else {
        fs.r.push_back(e / dmin);
        fs.r_defined.push_back(true);
        fs.r_max = std::max(fs.r_max, e / dmin);
      }
    }
    report.families.push_back(std::move(fs));
  }
  return report;
}

inline std::string emd_scores_csv(const EMDReport& r, std::uint64_t seed, std::uint64_t config_hash) {
  std::string out = csv_provenance(seed, config_hash);
  for (const auto& f : r.families) {
    out += "# family=" + f.family + " r_max_x100=" + format_metric(100.0 * f.r_max) +
           " undefined=" + std::to_string(f.undefined_count) + "\n";
  }
  out += "family,i,emd,delta_i,delta_j,r_i\n";
  for (const auto& f : r.families)
    for (std::size_t i = 0; i < f.emd.size(); ++i) {
      out += f.family;
      out += ',' + std::to_string(i);
      out += ',' + format_metric(f.emd[i]);
      out += ',' + format_metric(f.delta[i]);
      out += ',' + format_metric(f.delta[i + 1]);
      out += ',';
      out += f.r_defined[i] ? format_metric(f.r[i]) : "undefined";
      out += '\n';
    }
  return out;
}

inline std::string emd_matrix_csv(const EMDReport& r, const std::string& family, std::uint64_t seed,
                                  std::uint64_t config_hash) {
  for (const auto& f : r.families) {
    if (f.family != family) continue;
    std::string out = csv_provenance(seed, config_hash);
    out += "# family=" + family + " layers=" + std::to_string(r.n_layers) + "\n";
    for (Index a = 0; a < r.n_layers; ++a) {
      for (Index b = 0; b < r.n_layers; ++b) {
        if (b) out += ',';
        out += format_metric(f.matrix[static_cast<std::size_t>(a * r.n_layers + b)]);
      }
      out += '\n';
    }
    return out;
  }
  throw std::invalid_argument("emd: unknown family " + family);
}

}  // namespace shishu
