#pragma once

// Brute-force reference implementations used only by the test suite.
// Everything here is written as plain nested loops straight from the metric
// and loss definitions, independent of the library's optimized code paths.

#include <cmath>
#include <cstdint>
#include <vector>

#include "bsnet/metrics.hpp"

namespace oracle {

using bsnet::BinaryMask;
using bsnet::ProbMap;

inline double ref_dsc(const BinaryMask& p, const BinaryMask& g) {
  double inter = 0, sp = 0, sg = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) {
      sp += p.at(i, j);
      sg += g.at(i, j);
      if (p.at(i, j) && g.at(i, j)) inter += 1;
    }
  if (sp + sg == 0) return 1.0;
  return 2.0 * inter / (sp + sg);
}

inline double ref_sen(const BinaryMask& p, const BinaryMask& g) {
  double tp = 0, fn = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) {
      if (g.at(i, j) && p.at(i, j)) tp += 1;
      if (g.at(i, j) && !p.at(i, j)) fn += 1;
    }
  if (tp + fn == 0) return 1.0;
  return tp / (tp + fn);
}

inline double ref_prec(const BinaryMask& p, const BinaryMask& g) {
  double tp = 0, fp = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) {
      if (p.at(i, j) && g.at(i, j)) tp += 1;
      if (p.at(i, j) && !g.at(i, j)) fp += 1;
    }
  if (tp + fp == 0) return 1.0;
  return tp / (tp + fp);
}

inline double ref_mae(const ProbMap& p, const BinaryMask& g) {
  double acc = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) acc += std::fabs(p.at(i, j) - double(g.at(i, j)));
  return acc / (double(g.h) * g.w);
}

// ---- structure measure, transcribed from its published definition ----

inline double ref_ssim_block(const ProbMap& p, const BinaryMask& g, int i0, int i1, int j0,
                             int j1) {
  std::vector<double> xs, ys;
  for (int i = i0; i < i1; ++i)
    for (int j = j0; j < j1; ++j) {
      xs.push_back(p.at(i, j));
      ys.push_back(double(g.at(i, j)));
    }
  long n = long(xs.size());
  if (n == 0) return 0.0;
  double mx = 0, my = 0;
  for (long k = 0; k < n; ++k) {
    mx += xs[size_t(k)];
    my += ys[size_t(k)];
  }
  mx /= double(n);
  my /= double(n);
  double vx = 0, vy = 0, cxy = 0;
  for (long k = 0; k < n; ++k) {
    vx += (xs[size_t(k)] - mx) * (xs[size_t(k)] - mx);
    vy += (ys[size_t(k)] - my) * (ys[size_t(k)] - my);
    cxy += (xs[size_t(k)] - mx) * (ys[size_t(k)] - my);
  }
  double dn = n > 1 ? double(n - 1) : 1.0;
  vx /= dn;
  vy /= dn;
  cxy /= dn;
  double num = 4.0 * mx * my * cxy;
  double den = (mx * mx + my * my) * (vx + vy);
  if (num != 0.0) return num / (den + 1e-20);
  return den == 0.0 ? 1.0 : 0.0;
}

inline double ref_s_object_half(const ProbMap& p, const BinaryMask& g, bool fg) {
  std::vector<double> vals;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j)
      if (bool(g.at(i, j)) == fg) vals.push_back(fg ? p.at(i, j) : 1.0 - p.at(i, j));
  if (vals.empty()) return 0.0;
  double m = 0;
  for (double v : vals) m += v;
  m /= double(vals.size());
  double var = 0;
  for (double v : vals) var += (v - m) * (v - m);
  double sd = vals.size() > 1 ? std::sqrt(var / double(vals.size() - 1)) : 0.0;
  return 2.0 * m / (m * m + 1.0 + 2.0 * sd + 1e-20);
}

inline double ref_s_measure(const ProbMap& p, const BinaryMask& g, double alpha = 0.5) {
  double y = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) y += g.at(i, j);
  y /= double(g.h) * g.w;
  double mp = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) mp += p.at(i, j);
  mp /= double(g.h) * g.w;
  if (y == 0.0) return 1.0 - mp;
  if (y == 1.0) return mp;

  double fgn = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) fgn += g.at(i, j);
  double u = fgn / (double(g.h) * g.w);
  double so = u * ref_s_object_half(p, g, true) + (1.0 - u) * ref_s_object_half(p, g, false);

  double total = 0, sx = 0, sy = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j)
      if (g.at(i, j)) {
        total += 1;
        sy += i + 1;
        sx += j + 1;
      }
  int cx = total == 0 ? int(std::llround(g.w / 2.0)) : int(std::llround(sx / total));
  int cy = total == 0 ? int(std::llround(g.h / 2.0)) : int(std::llround(sy / total));
  double area = double(g.h) * g.w;
  double w1 = double(cx) * cy / area;
  double w2 = double(g.w - cx) * cy / area;
  double w3 = double(cx) * (g.h - cy) / area;
  double w4 = 1.0 - w1 - w2 - w3;
  double sr = w1 * ref_ssim_block(p, g, 0, cy, 0, cx) + w2 * ref_ssim_block(p, g, 0, cy, cx, g.w) +
              w3 * ref_ssim_block(p, g, cy, g.h, 0, cx) +
              w4 * ref_ssim_block(p, g, cy, g.h, cx, g.w);
  double q = (1.0 - alpha) * so + alpha * sr;
  return q > 0.0 ? q : 0.0;
}

inline double ref_e_measure(const BinaryMask& p, const BinaryMask& g) {
  double n = double(g.h) * g.w;
  double sg = 0, sp = 0;
  for (int i = 0; i < g.h; ++i)
    for (int j = 0; j < g.w; ++j) {
      sg += g.at(i, j);
      sp += p.at(i, j);
    }
  double acc = 0;
  if (sg == 0) {
    for (int i = 0; i < g.h; ++i)
      for (int j = 0; j < g.w; ++j) acc += 1.0 - p.at(i, j);
  } else if (sg == n) {
    for (int i = 0; i < g.h; ++i)
      for (int j = 0; j < g.w; ++j) acc += p.at(i, j);
  } else {
    double mg = sg / n, mp = sp / n;
    for (int i = 0; i < g.h; ++i)
      for (int j = 0; j < g.w; ++j) {
        double dg = g.at(i, j) - mg, dp = p.at(i, j) - mp;
        double align = 2.0 * dg * dp / (dg * dg + dp * dp + 1e-20);
        acc += (align + 1.0) * (align + 1.0) / 4.0;
      }
  }
  return acc / (n - 1.0 + 1e-20);
}

// ---- Hausdorff: O(n^2) pairwise max-min over boundary pixel sets ----

inline std::vector<std::pair<int, int>> ref_boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<int, int>> pts;
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      bool edge = i == 0 || i == m.h - 1 || j == 0 || j == m.w - 1;
      if (!edge)
        edge = !m.at(i - 1, j) || !m.at(i + 1, j) || !m.at(i, j - 1) || !m.at(i, j + 1);
      if (edge) pts.emplace_back(i, j);
    }
  return pts;
}

inline double ref_hausdorff(const BinaryMask& p, const BinaryMask& g) {
  auto bp = ref_boundary_pixels(p);
  auto bg = ref_boundary_pixels(g);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty())
    return std::sqrt(double(g.h - 1) * (g.h - 1) + double(g.w - 1) * (g.w - 1));
  auto directed = [](const std::vector<std::pair<int, int>>& a,
                     const std::vector<std::pair<int, int>>& b) {
    double worst = 0;
    for (auto& [ai, aj] : a) {
      double best = 1e300;
      for (auto& [bi, bj] : b) {
        double d = double(ai - bi) * (ai - bi) + double(aj - bj) * (aj - bj);
        if (d < best) best = d;
      }
      if (best > worst) worst = best;
    }
    return worst;
  };
  return std::sqrt(std::max(directed(bp, bg), directed(bg, bp)));
}

// ---- losses, double-loop references on a single (1,1,H,W) instance ----

inline std::vector<double> ref_alpha(const std::vector<double>& gt, int H, int W, int window) {
  int r = window / 2;
  std::vector<double> a(size_t(H) * W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double sum = 0, cnt = 0;
      for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj) {
          int ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
          sum += gt[size_t(ii) * W + jj];
          cnt += 1;
        }
      a[size_t(i) * W + j] = std::fabs(sum / cnt - gt[size_t(i) * W + j]);
    }
  return a;
}

// weighted BCE for one image: sum((1+gamma*a)*ce) / sum(gamma*a); falls back
// to mean cross-entropy when the denominator is zero.
inline double ref_wbce(const std::vector<double>& pred, const std::vector<double>& gt, int H,
                       int W, int window, double gamma, double eps = 1e-7) {
  auto a = ref_alpha(gt, H, W, window);
  double num = 0, den = 0, plain = 0;
  for (int k = 0; k < H * W; ++k) {
    double p = pred[size_t(k)];
    if (p < eps) p = eps;
    if (p > 1.0 - eps) p = 1.0 - eps;
    double ce = -(gt[size_t(k)] * std::log(p) + (1.0 - gt[size_t(k)]) * std::log(1.0 - p));
    num += (1.0 + gamma * a[size_t(k)]) * ce;
    den += gamma * a[size_t(k)];
    plain += ce;
  }
  if (den == 0.0) return plain / double(H * W);
  return num / den;
}

inline double ref_wiou(const std::vector<double>& pred, const std::vector<double>& gt, int H,
                       int W, int window, double gamma, double eps = 1e-7) {
  auto a = ref_alpha(gt, H, W, window);
  double inter = 0, uni = 0;
  for (int k = 0; k < H * W; ++k) {
    double p = pred[size_t(k)];
    if (p < eps) p = eps;
    if (p > 1.0 - eps) p = 1.0 - eps;
    double w = 1.0 + gamma * a[size_t(k)];
    inter += w * gt[size_t(k)] * p;
    uni += w * (gt[size_t(k)] + p - gt[size_t(k)] * p);
  }
  return 1.0 - inter / uni;
}

inline double ref_bce_logits(const std::vector<double>& logits, const std::vector<double>& gt) {
  double acc = 0;
  for (size_t k = 0; k < logits.size(); ++k) {
    double x = logits[k], y = gt[k];
    // stable form: max(x,0) - x*y + log(1+exp(-|x|))
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
  }
  return acc / double(logits.size());
}

}  // namespace oracle
