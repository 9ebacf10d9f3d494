// SPDX-License-Identifier: Apache-2.0
//
// Dense least-squares used by the linear-map probes. Solved in double
// precision via the normal equations. A near-singular Gram matrix falls back
// to a small ridge term instead of failing so the probe can still report on
// degenerate capture windows.

#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "shishu/tensor.hpp"

namespace shishu {

struct LstsqResult {
  // Row-major [d_out x d_in]: the map applied as z ~= W x.
  Tensor<double> w;
  // Mean squared residual over all entries of the target block.
  double mse = 0.0;
  // True when the ridge fallback engaged.
  bool ridged = false;
  double rcond = 0.0;
};

// Minimize ||X W^T - Z||_F^2 over W for row-stacked samples X [n x d_in],
// Z [n x d_out]. rcond below `rcond_floor` triggers ridge with `ridge_lambda`.
inline LstsqResult lstsq(const Tensor<double>& x, const Tensor<double>& z,
                         double rcond_floor = 1e-12, double ridge_lambda = 1e-8) {
  if (x.rank() != 2 || z.rank() != 2) throw std::invalid_argument("lstsq: need rank-2 inputs");
  const Index n = x.shape[0];
  if (z.shape[0] != n) throw std::invalid_argument("lstsq: sample counts disagree");
  if (n == 0) throw std::invalid_argument("lstsq: no samples");
  const Index din = x.shape[1];
  const Index dout = z.shape[1];

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> xm(x.ptr(), n, din);
  Eigen::Map<const Mat> zm(z.ptr(), n, dout);

  Mat gram = xm.transpose() * xm;          // [din x din]
  const Mat rhs = xm.transpose() * zm;     // [din x dout]

  Eigen::SelfAdjointEigenSolver<Mat> es(gram, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double emax = ev(ev.size() - 1);
  const double emin = ev(0);
  const double rcond = emax > 0.0 ? std::max(emin, 0.0) / emax : 0.0;

  LstsqResult out;
  out.rcond = rcond;
  if (rcond < rcond_floor) {
    out.ridged = true;
    for (Index i = 0; i < din; ++i) gram(i, i) += ridge_lambda;
  }

  const Mat wt = Eigen::LDLT<Mat>(gram).solve(rhs);  // [din x dout] = W^T
  const Mat resid = xm * wt - zm;
  out.mse = resid.squaredNorm() / static_cast<double>(n * dout);

  std::vector<double> wv(static_cast<std::size_t>(dout * din));
  for (Index r = 0; r < dout; ++r)
    for (Index c = 0; c < din; ++c) wv[static_cast<std::size_t>(r * din + c)] = wt(c, r);
  out.w = Tensor<double>({dout, din}, std::move(wv));
  return out;
}

}  // namespace shishu
