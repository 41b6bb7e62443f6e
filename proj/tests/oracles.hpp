#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "ctdet/context_transformer.hpp"
#include "ctdet/evaluation.hpp"
#include "test_util.hpp"

namespace ctdet::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Mat residual(const Mat& x, const Mat& w) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j)
      for (std::size_t k = 0; k < w.size(); ++k) out[i][j] += x[i][k] * w[k][j];
  return out;
}

// Scalar-loop evaluation of the whole attention chain (dot metric, residual
// embeddings, shared classifier), returning target probabilities.
inline Mat reference_chain(const Mat& p, const Mat& q, const Mat& wf, const Mat& wg, const Mat& wh,
                    const Mat& wphi, const Mat& theta) {
  const Mat fp = residual(p, wf), gq = residual(q, wg), hq = residual(q, wh);
  const std::size_t dp = p.size(), dq = q.size(), cs = p[0].size(), ct = theta[0].size();
  Mat out(dp, std::vector<double>(ct));
  for (std::size_t i = 0; i < dp; ++i) {
    std::vector<double> a(dq);
    for (std::size_t j = 0; j < dq; ++j)
      for (std::size_t c = 0; c < cs; ++c) a[j] += fp[i][c] * gq[j][c];
    const double mx = *std::max_element(a.begin(), a.end());
    double z = 0;
    for (auto& v : a) z += (v = std::exp(v - mx));
    std::vector<double> l(cs, 0.0);
    for (std::size_t j = 0; j < dq; ++j)
      for (std::size_t c = 0; c < cs; ++c) l[c] += a[j] / z * hq[j][c];
    std::vector<double> fused(p[i]);
    for (std::size_t c = 0; c < cs; ++c)
      for (std::size_t k = 0; k < cs; ++k) fused[c] += l[k] * wphi[k][c];
    std::vector<double> y(ct, 0.0);
    for (std::size_t t = 0; t < ct; ++t)
      for (std::size_t c = 0; c < cs; ++c) y[t] += fused[c] * theta[c][t];
    const double my = *std::max_element(y.begin(), y.end());
    double zy = 0;
    for (auto& v : y) zy += (v = std::exp(v - my));
    for (std::size_t t = 0; t < ct; ++t) out[i][t] = y[t] / zy;
  }
  return out;
}

inline CtParams<double> random_params(std::size_t cs, std::size_t ct, std::mt19937_64& rng, double scale = 0.3) {
  CtParams<double> p;
  p.wf = random_tensor({cs, cs}, rng, -scale, scale, true);
  p.wg = random_tensor({cs, cs}, rng, -scale, scale, true);
  p.wh = random_tensor({cs, cs}, rng, -scale, scale, true);
  p.wphi = random_tensor({cs, cs}, rng, -scale, scale, true);
  p.theta = {random_tensor({cs, ct}, rng, -1, 1, true)};
  return p;
}

// Per GT: every admissible detection listed, stably sorted by score, the
// head of the list decides.
inline std::map<int, ConfusionTriple> confusion_oracle(const std::vector<std::vector<Detection>>& dets,
                                                const std::vector<std::vector<Annotation>>& gts,
                                                double floor) {
  std::map<int, ConfusionTriple> out;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    for (const auto& g : gts[s]) {
      std::vector<Detection> ok;
      for (const auto& d : dets[s])
        if (d.score >= floor && iou(d.box, g.box) >= 0.5) ok.push_back(d);
      std::stable_sort(ok.begin(), ok.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
      auto& t = out[g.cls];
      if (ok.empty()) ++t.missed;
      else if (ok.front().cls == g.cls) ++t.correct;
      else ++t.confused;
    }
  }
  return out;
}

}  // namespace ctdet::testing
