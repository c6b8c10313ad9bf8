#pragma once

// Segmentation evaluation: DSC, sensitivity, precision, S-measure,
// E-measure, MAE and Hausdorff distance, plus dataset-level reporting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace bsnet {

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;  // values 0/1, row-major

  uint8_t at(int i, int j) const { return v[static_cast<size_t>(i * w + j)]; }
  size_t size() const { return v.size(); }
};

struct ProbMap {
  int h = 0, w = 0;
  std::vector<double> v;  // values in [0,1]

  double at(int i, int j) const { return v[static_cast<size_t>(i * w + j)]; }
};

inline BinaryMask binarize(const ProbMap& p, double threshold = 0.5) {
  BinaryMask m{p.h, p.w, {}};
  m.v.resize(p.v.size());
  for (size_t i = 0; i < p.v.size(); ++i) m.v[i] = p.v[i] > threshold ? 1 : 0;
  return m;
}

namespace detail {
inline void check_same_shape(int h1, int w1, int h2, int w2, const char* what) {
  if (h1 != h2 || w1 != w2)
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace detail

// ------------------------------------------------------------- count metrics

// 2|G ∩ S| / (|G| + |S|); both masks empty counts as perfect agreement.
inline double dsc(const BinaryMask& pred, const BinaryMask& gt) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "dsc");
  int64_t inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    a += pred.v[i];
    b += gt.v[i];
    inter += pred.v[i] & gt.v[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

inline double sensitivity(const BinaryMask& pred, const BinaryMask& gt, bool* flagged = nullptr) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "sensitivity");
  int64_t tp = 0, fn = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt.v[i]) (pred.v[i] ? tp : fn)++;
  }
  if (tp + fn == 0) {  // empty GT: vacuously perfect recall
    if (flagged) *flagged = true;
    return 1.0;
  }
  if (flagged) *flagged = false;
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

inline double precision(const BinaryMask& pred, const BinaryMask& gt, bool* flagged = nullptr) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "precision");
  int64_t tp = 0, fp = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (pred.v[i]) (gt.v[i] ? tp : fp)++;
  }
  if (tp + fp == 0) {
    if (flagged) *flagged = true;
    return 1.0;
  }
  if (flagged) *flagged = false;
  return static_cast<double>(tp) / static_cast<double>(tp + fp);
}

inline double mae(const ProbMap& pred, const ProbMap& gt) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "mae");
  double acc = 0.0;
  for (size_t i = 0; i < pred.v.size(); ++i) acc += std::abs(pred.v[i] - gt.v[i]);
  return acc / static_cast<double>(pred.v.size());
}

// ----------------------------------------------------------------- S-measure

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// object score: 2*mean / (mean^2 + 1 + 2*sample_std)
inline double s_object_score(const std::vector<double>& vals) {
  if (vals.empty()) return 0.0;
  double m = mean_of(vals);
  double var = 0.0;
  for (double x : vals) var += (x - m) * (x - m);
  double sd = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
  return 2.0 * m / (m * m + 1.0 + 2.0 * sd + 1e-20);
}

inline double s_object(const ProbMap& pred, const BinaryMask& gt) {
  std::vector<double> fg, bg;
  for (size_t i = 0; i < gt.size(); ++i)
    (gt.v[i] ? fg : bg).push_back(gt.v[i] ? pred.v[i] : 1.0 - pred.v[i]);
  double u = static_cast<double>(fg.size()) / static_cast<double>(gt.size());
  return u * s_object_score(fg) + (1.0 - u) * s_object_score(bg);
}

struct BlockStats {
  double mean_p = 0, mean_g = 0, var_p = 0, var_g = 0, cov = 0;
  int64_t n = 0;
};

inline double region_ssim(const ProbMap& pred, const BinaryMask& gt, int i0, int i1, int j0,
                          int j1) {
  int64_t n = static_cast<int64_t>(i1 - i0) * (j1 - j0);
  if (n <= 0) return 0.0;
  double mp = 0, mg = 0;
  for (int i = i0; i < i1; ++i)
    for (int j = j0; j < j1; ++j) {
      mp += pred.at(i, j);
      mg += gt.at(i, j);
    }
  mp /= static_cast<double>(n);
  mg /= static_cast<double>(n);
  double vp = 0, vg = 0, cov = 0;
  for (int i = i0; i < i1; ++i)
    for (int j = j0; j < j1; ++j) {
      double dp = pred.at(i, j) - mp, dg = gt.at(i, j) - mg;
      vp += dp * dp;
      vg += dg * dg;
      cov += dp * dg;
    }
  double denom_n = n > 1 ? static_cast<double>(n - 1) : 1.0;
  vp /= denom_n;
  vg /= denom_n;
  cov /= denom_n;
  double a = 4.0 * mp * mg * cov;
  double b = (mp * mp + mg * mg) * (vp + vg);
  if (a != 0.0) return a / (b + 1e-20);
  return (a == 0.0 && b == 0.0) ? 1.0 : 0.0;
}

inline double s_region(const ProbMap& pred, const BinaryMask& gt) {
  // centroid of the GT foreground (1-based convention, rounded)
  double total = 0, sx = 0, sy = 0;
  for (int i = 0; i < gt.h; ++i)
    for (int j = 0; j < gt.w; ++j)
      if (gt.at(i, j)) {
        total += 1.0;
        sy += static_cast<double>(i + 1);
        sx += static_cast<double>(j + 1);
      }
  int cx, cy;
  if (total == 0) {
    cx = static_cast<int>(std::llround(gt.w / 2.0));
    cy = static_cast<int>(std::llround(gt.h / 2.0));
  } else {
    cx = static_cast<int>(std::llround(sx / total));
    cy = static_cast<int>(std::llround(sy / total));
  }
  double area = static_cast<double>(gt.h) * gt.w;
  double w1 = static_cast<double>(cx) * cy / area;
  double w2 = static_cast<double>(gt.w - cx) * cy / area;
  double w3 = static_cast<double>(cx) * (gt.h - cy) / area;
  double w4 = 1.0 - w1 - w2 - w3;
  return w1 * region_ssim(pred, gt, 0, cy, 0, cx) + w2 * region_ssim(pred, gt, 0, cy, cx, gt.w) +
         w3 * region_ssim(pred, gt, cy, gt.h, 0, cx) +
         w4 * region_ssim(pred, gt, cy, gt.h, cx, gt.w);
}

}  // namespace detail

// Structure measure: S = (1-alpha)*S_object + alpha*S_region with alpha=0.5;
// degenerates to 1-mean / mean for uniform ground truth.
inline double s_measure(const ProbMap& pred, const BinaryMask& gt, double alpha = 0.5) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "s_measure");
  double y = 0.0;
  for (uint8_t g : gt.v) y += g;
  y /= static_cast<double>(gt.size());
  if (y == 0.0) return 1.0 - detail::mean_of(pred.v);
  if (y == 1.0) return detail::mean_of(pred.v);
  double q = (1.0 - alpha) * detail::s_object(pred, gt) + alpha * detail::s_region(pred, gt);
  return std::max(q, 0.0);
}

// ----------------------------------------------------------------- E-measure

// Enhanced-alignment measure over binary maps.
inline double e_measure(const BinaryMask& pred, const BinaryMask& gt) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "e_measure");
  size_t n = gt.size();
  int64_t gsum = 0, psum = 0;
  for (size_t i = 0; i < n; ++i) {
    gsum += gt.v[i];
    psum += pred.v[i];
  }
  double acc = 0.0;
  if (gsum == 0) {
    for (size_t i = 0; i < n; ++i) acc += 1.0 - static_cast<double>(pred.v[i]);
  } else if (gsum == static_cast<int64_t>(n)) {
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>(pred.v[i]);
  } else {
    double mg = static_cast<double>(gsum) / static_cast<double>(n);
    double mp = static_cast<double>(psum) / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
      double dg = static_cast<double>(gt.v[i]) - mg;
      double dp = static_cast<double>(pred.v[i]) - mp;
      double align = 2.0 * dg * dp / (dg * dg + dp * dp + 1e-20);
      acc += (align + 1.0) * (align + 1.0) / 4.0;
    }
  }
  return acc / (static_cast<double>(n) - 1.0 + 1e-20);
}

// ------------------------------------------------------- Hausdorff distance

// Boundary pixels: foreground with at least one background 4-neighbor; the
// image border counts as background.
inline BinaryMask mask_boundary(const BinaryMask& m) {
  BinaryMask b{m.h, m.w, std::vector<uint8_t>(m.size(), 0)};
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      bool edge = i == 0 || i == m.h - 1 || j == 0 || j == m.w - 1 || !m.at(i - 1, j) ||
                  !m.at(i + 1, j) || !m.at(i, j - 1) || !m.at(i, j + 1);
      if (edge) b.v[static_cast<size_t>(i * m.w + j)] = 1;
    }
  return b;
}

namespace detail {

// Felzenszwalb-Huttenlocher exact squared Euclidean distance transform.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<size_t>(n));
  std::vector<double> z(static_cast<size_t>(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      int p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + q * q) - (f[static_cast<size_t>(p)] + p * p)) /
          (2.0 * q - 2.0 * p);
      if (s <= z[static_cast<size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < q) ++k;
    int p = v[static_cast<size_t>(k)];
    d[static_cast<size_t>(q)] = (q - p) * static_cast<double>(q - p) + f[static_cast<size_t>(p)];
  }
}

// Squared distance to the nearest set pixel of `src`, for every pixel.
inline std::vector<double> edt_sq(const BinaryMask& src) {
  const double inf = 1e18;
  std::vector<double> grid(src.size());
  for (size_t i = 0; i < src.size(); ++i) grid[i] = src.v[i] ? 0.0 : inf;
  std::vector<double> col(static_cast<size_t>(src.h)), dcol(static_cast<size_t>(src.h));
  for (int j = 0; j < src.w; ++j) {
    for (int i = 0; i < src.h; ++i) col[static_cast<size_t>(i)] = grid[static_cast<size_t>(i * src.w + j)];
    edt_1d(col, dcol);
    for (int i = 0; i < src.h; ++i) grid[static_cast<size_t>(i * src.w + j)] = dcol[static_cast<size_t>(i)];
  }
  std::vector<double> row(static_cast<size_t>(src.w)), drow(static_cast<size_t>(src.w));
  for (int i = 0; i < src.h; ++i) {
    for (int j = 0; j < src.w; ++j) row[static_cast<size_t>(j)] = grid[static_cast<size_t>(i * src.w + j)];
    edt_1d(row, drow);
    for (int j = 0; j < src.w; ++j) grid[static_cast<size_t>(i * src.w + j)] = drow[static_cast<size_t>(j)];
  }
  return grid;
}

}  // namespace detail

inline double image_diagonal(int h, int w) {
  return std::sqrt(static_cast<double>(h - 1) * (h - 1) + static_cast<double>(w - 1) * (w - 1));
}

// Symmetric Hausdorff distance between mask boundaries, Euclidean pixels.
// Both boundaries empty -> 0; exactly one empty -> image diagonal (flagged).
inline double hausdorff(const BinaryMask& pred, const BinaryMask& gt, bool* flagged = nullptr) {
  detail::check_same_shape(pred.h, pred.w, gt.h, gt.w, "hausdorff");
  BinaryMask pb = mask_boundary(pred);
  BinaryMask gb = mask_boundary(gt);
  int64_t np = 0, ng = 0;
  for (uint8_t x : pb.v) np += x;
  for (uint8_t x : gb.v) ng += x;
  if (flagged) *flagged = false;
  if (np == 0 && ng == 0) return 0.0;
  if (np == 0 || ng == 0) {
    if (flagged) *flagged = true;
    return image_diagonal(gt.h, gt.w);
  }
  auto directed = [](const BinaryMask& from, const std::vector<double>& dist_sq_to) {
    double worst = 0.0;
    for (size_t i = 0; i < from.size(); ++i)
      if (from.v[i]) worst = std::max(worst, dist_sq_to[i]);
    return worst;
  };
  std::vector<double> d_to_g = detail::edt_sq(gb);
  std::vector<double> d_to_p = detail::edt_sq(pb);
  return std::sqrt(std::max(directed(pb, d_to_g), directed(gb, d_to_p)));
}

// --------------------------------------------------------------- reporting

struct ImageMetrics {
  std::string name;
  double dsc = 0, sen = 0, prec = 0, s_alpha = 0, e_phi = 0, mae = 0, hd = 0;
  bool sen_flagged = false, prec_flagged = false, hd_flagged = false;
};

struct MetricReport {
  std::vector<ImageMetrics> per_image;
  ImageMetrics mean;  // name = "mean"
  int64_t image_count = 0;
  int64_t warning_count = 0;           // unmatched / skipped files
  std::vector<std::string> warnings;
  double images_per_second = 0.0;
};

inline ImageMetrics compute_image_metrics(const std::string& name, const ProbMap& pred,
                                          const BinaryMask& gt, double threshold = 0.5) {
  ImageMetrics m;
  m.name = name;
  BinaryMask bp = binarize(pred, threshold);
  m.dsc = dsc(bp, gt);
  m.sen = sensitivity(bp, gt, &m.sen_flagged);
  m.prec = precision(bp, gt, &m.prec_flagged);
  m.s_alpha = s_measure(pred, gt);
  m.e_phi = e_measure(bp, gt);
  ProbMap gtp{gt.h, gt.w, std::vector<double>(gt.size())};
  for (size_t i = 0; i < gt.size(); ++i) gtp.v[i] = gt.v[i];
  m.mae = mae(pred, gtp);
  m.hd = hausdorff(bp, gt, &m.hd_flagged);
  return m;
}

inline void finalize_report(MetricReport& r) {
  r.image_count = static_cast<int64_t>(r.per_image.size());
  r.mean = ImageMetrics{};
  r.mean.name = "mean";
  if (r.per_image.empty()) return;
  for (const auto& m : r.per_image) {
    r.mean.dsc += m.dsc;
    r.mean.sen += m.sen;
    r.mean.prec += m.prec;
    r.mean.s_alpha += m.s_alpha;
    r.mean.e_phi += m.e_phi;
    r.mean.mae += m.mae;
    r.mean.hd += m.hd;
  }
  double n = static_cast<double>(r.per_image.size());
  r.mean.dsc /= n;
  r.mean.sen /= n;
  r.mean.prec /= n;
  r.mean.s_alpha /= n;
  r.mean.e_phi /= n;
  r.mean.mae /= n;
  r.mean.hd /= n;
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "name,dsc,sen,prec,s_alpha,e_phi,mae,hd\n";
  auto row = [&](const ImageMetrics& m) {
    out << m.name << ',' << m.dsc << ',' << m.sen << ',' << m.prec << ',' << m.s_alpha << ','
        << m.e_phi << ',' << m.mae << ',' << m.hd << '\n';
  };
  for (const auto& m : r.per_image) row(m);
  row(r.mean);
  return out.str();
}

}  // namespace bsnet
