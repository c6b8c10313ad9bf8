#pragma once

// Dual-branch semantic enhancement: fuses the three high-level pyramid
// levels into a single attention map at the X3 scale.

#include "bsnet/nn.hpp"

namespace bsnet {

enum class DilatedActivation { sigmoid, relu };

struct DSEOutput {
  Tensor a_t;   // top-level semantic preservation, (N,1,S/8,S/8)
  Tensor a_p;   // progressive semantic integration, (N,1,S/8,S/8)
  Tensor a_se;  // fused attention map, (N,1,S/8,S/8)
};

class DSE : public Module {
 public:
  DSE() = default;
  DSE(int64_t channels, DilatedActivation act, Rng& rng) : act_(act) {
    at_conv_ = Conv2d::make(2, 1, 3, 1, 1, 1, /*bias=*/true, rng);
    dc3_ = Conv2d::make(channels, channels, 3, 1, 8, 8, true, rng);
    dc4_ = Conv2d::make(channels, channels, 3, 1, 4, 4, true, rng);
    dc5_ = Conv2d::make(channels, channels, 3, 1, 2, 2, true, rng);
    fuse45_ = Conv2d::make(2 * channels, channels, 3, 1, 1, 1, true, rng);
    fuse345_ = Conv2d::make(2 * channels, channels, 3, 1, 1, 1, true, rng);
    ap_conv_ = Conv2d::make(channels, 1, 1, 1, 0, 1, true, rng);
  }

  // Spatial attention over the 4x-upsampled top features: channel avg/max
  // pooling, concat, 3x3 conv, sigmoid.
  Tensor top_level_preservation(const Tensor& x5) const {
    Tensor up = upsample_by(x5, 4);
    Tensor desc = concat_channels({channel_mean(up), channel_max(up)});
    return sigmoid(at_conv_.forward(desc));
  }

  // Dilated enhancement (rates 8/4/2 on X3/X4/X5), then top-down fusion.
  Tensor progressive_integration(const Tensor& x3, const Tensor& x4, const Tensor& x5) const {
    auto act = [&](const Tensor& t) { return act_ == DilatedActivation::sigmoid ? sigmoid(t) : relu(t); };
    Tensor fdc3 = act(dc3_.forward(x3));
    Tensor fdc4 = act(dc4_.forward(x4));
    Tensor fdc5 = act(dc5_.forward(x5));
    Tensor f45 = fuse45_.forward(concat_channels({upsample_by(fdc5, 2), fdc4}));
    Tensor f345 = fuse345_.forward(concat_channels({upsample_by(f45, 2), fdc3}));
    return sigmoid(ap_conv_.forward(f345));
  }

  static Tensor semantic_attention(const Tensor& a_t, const Tensor& a_p) {
    if (a_t.shape() != a_p.shape())
      throw std::invalid_argument("semantic_attention: shape mismatch " +
                                  shape_str(a_t.shape()) + " vs " + shape_str(a_p.shape()));
    return mul_scalar(add(a_t, a_p), 0.5);
  }

  DSEOutput forward(const Tensor& x3, const Tensor& x4, const Tensor& x5) const {
    DSEOutput out;
    out.a_t = top_level_preservation(x5);
    out.a_p = progressive_integration(x3, x4, x5);
    out.a_se = semantic_attention(out.a_t, out.a_p);
    return out;
  }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    at_conv_.visit_params(join_name(p, "at_conv"), fn);
    dc3_.visit_params(join_name(p, "dc3"), fn);
    dc4_.visit_params(join_name(p, "dc4"), fn);
    dc5_.visit_params(join_name(p, "dc5"), fn);
    fuse45_.visit_params(join_name(p, "fuse45"), fn);
    fuse345_.visit_params(join_name(p, "fuse345"), fn);
    ap_conv_.visit_params(join_name(p, "ap_conv"), fn);
  }

 private:
  DilatedActivation act_ = DilatedActivation::sigmoid;
  Conv2d at_conv_, dc3_, dc4_, dc5_, fuse45_, fuse345_, ap_conv_;
};

}  // namespace bsnet
