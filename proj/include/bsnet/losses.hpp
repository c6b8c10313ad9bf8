#pragma once

// Deep-supervision objective: weighted BCE + weighted IoU on the side
// outputs and the semantic attention map, plus plain BCE on the boundary map.

#include <cmath>
#include <stdexcept>

#include "bsnet/ops.hpp"
#include "bsnet/tensor.hpp"

namespace bsnet {

constexpr double kProbEps = 1e-7;     // probability clamp before logs
constexpr double kDefaultGamma = 5.0;
constexpr int kImportanceWindow = 31;

namespace detail {

inline void check_binary(const Tensor& gt, const char* what) {
  for (double v : gt.vec())
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument(std::string(what) + ": ground truth must be binary");
}

inline void check_finite(const Tensor& t, const char* what) {
  for (double v : t.vec())
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace detail

// alpha_ij = |window mean of gt around (i,j) - gt_ij|, truncated at borders.
// Pure value computation; the result carries no gradient.
inline Tensor pixel_importance(const Tensor& gt, int window = kImportanceWindow) {
  if (window % 2 == 0 || window < 1)
    throw std::invalid_argument("pixel_importance: window must be odd and positive");
  detail::check_binary(gt, "pixel_importance");
  const Shape& s = gt.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (C != 1) throw std::invalid_argument("pixel_importance: expects single-channel gt");
  int64_t r = window / 2;
  Tensor out = Tensor::zeros(s);
  // summed-area table per plane
  std::vector<double> sat(static_cast<size_t>((H + 1) * (W + 1)));
  for (int64_t n = 0; n < N; ++n) {
    const double* g = gt.data() + n * H * W;
    double* o = out.data() + n * H * W;
    for (int64_t i = 0; i <= W; ++i) sat[static_cast<size_t>(i)] = 0.0;
    for (int64_t i = 1; i <= H; ++i) {
      sat[static_cast<size_t>(i * (W + 1))] = 0.0;
      for (int64_t j = 1; j <= W; ++j)
        sat[static_cast<size_t>(i * (W + 1) + j)] =
            g[(i - 1) * W + (j - 1)] + sat[static_cast<size_t>((i - 1) * (W + 1) + j)] +
            sat[static_cast<size_t>(i * (W + 1) + j - 1)] -
            sat[static_cast<size_t>((i - 1) * (W + 1) + j - 1)];
    }
    for (int64_t i = 0; i < H; ++i) {
      int64_t i0 = std::max<int64_t>(0, i - r), i1 = std::min<int64_t>(H - 1, i + r);
      for (int64_t j = 0; j < W; ++j) {
        int64_t j0 = std::max<int64_t>(0, j - r), j1 = std::min<int64_t>(W - 1, j + r);
        double sum = sat[static_cast<size_t>((i1 + 1) * (W + 1) + j1 + 1)] -
                     sat[static_cast<size_t>(i0 * (W + 1) + j1 + 1)] -
                     sat[static_cast<size_t>((i1 + 1) * (W + 1) + j0)] +
                     sat[static_cast<size_t>(i0 * (W + 1) + j0)];
        double cnt = static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
        o[i * W + j] = std::abs(sum / cnt - g[i * W + j]);
      }
    }
  }
  return out;
}

// Weighted BCE, normalized per image by sum(gamma*alpha). When that sum is
// zero (uniform ground truth) the weighting is vacuous and the term falls
// back to plain mean BCE for that image.
inline Tensor weighted_bce(const Tensor& pred_prob, const Tensor& gt, const Tensor& alpha,
                           double gamma = kDefaultGamma) {
  if (pred_prob.shape() != gt.shape() || gt.shape() != alpha.shape())
    throw std::invalid_argument("weighted_bce: shape mismatch");
  detail::check_finite(pred_prob, "weighted_bce");
  const Shape& s = gt.shape();
  int64_t N = s[0], CHW = s[1] * s[2] * s[3];
  // fold (1+gamma*alpha), the per-image denominator, and the batch mean into
  // one constant per-pixel weight
  Tensor w = Tensor::zeros(s);
  for (int64_t n = 0; n < N; ++n) {
    double denom = 0.0;
    for (int64_t i = 0; i < CHW; ++i) denom += gamma * alpha.data()[n * CHW + i];
    for (int64_t i = 0; i < CHW; ++i) {
      double base = 1.0 + gamma * alpha.data()[n * CHW + i];
      w.data()[n * CHW + i] = denom > 0.0
                                  ? base / (denom * static_cast<double>(N))
                                  : 1.0 / (static_cast<double>(CHW) * static_cast<double>(N));
    }
  }
  Tensor p = clamp(pred_prob, kProbEps, 1.0 - kProbEps);
  Tensor ce = neg(add(mul(gt, log_op(p)),
                      mul(add_scalar(neg(gt), 1.0), log_op(add_scalar(neg(p), 1.0)))));
  return sum_all(mul(w, ce));
}

// Weighted IoU loss per image, averaged over the batch.
inline Tensor weighted_iou(const Tensor& pred_prob, const Tensor& gt, const Tensor& alpha,
                           double gamma = kDefaultGamma) {
  if (pred_prob.shape() != gt.shape() || gt.shape() != alpha.shape())
    throw std::invalid_argument("weighted_iou: shape mismatch");
  detail::check_finite(pred_prob, "weighted_iou");
  Tensor w = add_scalar(mul_scalar(alpha, gamma), 1.0);  // constant, no grad
  Tensor p = clamp(pred_prob, kProbEps, 1.0 - kProbEps);
  Tensor inter = sum_per_image(mul(mul(gt, p), w));
  Tensor uni = sum_per_image(mul(sub(add(gt, p), mul(gt, p)), w));
  return mean_all(add_scalar(neg(div(inter, uni)), 1.0));
}

inline Tensor boundary_bce(const Tensor& boundary_logits, const Tensor& boundary_gt) {
  Tensor logits = boundary_logits;
  const Shape& ls = logits.shape();
  const Shape& gs = boundary_gt.shape();
  if (ls[2] != gs[2] || ls[3] != gs[3]) logits = upsample_bilinear(logits, gs[2], gs[3]);
  return bce_with_logits_mean(logits, boundary_gt);
}

struct LossBreakdown {
  Tensor total;
  // per head k in {S3,S4,S5,A_SE}: [wbce, wiou]
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>> heads;
  Tensor boundary;

  double total_value() const { return total.item(); }
};

// Supervised heads, all at ground-truth resolution, probabilities in (0,1).
struct LossHeads {
  std::vector<std::pair<std::string, Tensor>> maps;  // {S3,S4,S5,A_SE}
  Tensor boundary_logits;
};

inline LossBreakdown total_loss(const LossHeads& heads, const Tensor& gt,
                                const Tensor& boundary_gt, double gamma = kDefaultGamma,
                                int window = kImportanceWindow) {
  detail::check_binary(gt, "total_loss");
  detail::check_binary(boundary_gt, "total_loss(boundary)");
  Tensor alpha = pixel_importance(gt, window);
  LossBreakdown out;
  out.boundary = boundary_bce(heads.boundary_logits, boundary_gt);
  Tensor total = out.boundary;
  for (const auto& [name, pred] : heads.maps) {
    Tensor wbce = weighted_bce(pred, gt, alpha, gamma);
    Tensor wiou = weighted_iou(pred, gt, alpha, gamma);
    total = add(total, add(wbce, wiou));
    out.heads.emplace_back(name, std::make_pair(wbce, wiou));
  }
  out.total = total;
  return out;
}

}  // namespace bsnet
