#pragma once

// Boundary head, mirror-symmetric boundary guidance, decoder recursion and
// prediction heads; BSNet ties everything together.

#include <map>
#include <memory>

#include "bsnet/dse.hpp"
#include "bsnet/encoder.hpp"
#include "bsnet/nn.hpp"

namespace bsnet {

enum class RefineMode { residual, bare };

struct NetConfig {
  BackboneConfig backbone;
  int64_t boundary_channels = 32;
  bool dse_on = true;
  bool mbg_on = true;
  bool mbg_left_on = true;   // F_bf branch (boundary masked by encoder features)
  bool mbg_right_on = true;  // F_fb branch (encoder mask applied to boundary)
  int boundary_source = 2;   // pyramid level feeding the boundary head: 1, 2 or 5
  int output_stage = 3;      // deepest decoding stage producing the final map
  DilatedActivation dse_dilated_act = DilatedActivation::sigmoid;
  RefineMode refinement = RefineMode::residual;

  void validate() const {
    backbone.validate();
    if (boundary_channels < 1) throw std::invalid_argument("NetConfig: boundary_channels >= 1");
    if (boundary_source != 1 && boundary_source != 2 && boundary_source != 5)
      throw std::invalid_argument("NetConfig: boundary_source must be 1, 2 or 5");
    if (output_stage < 1 || output_stage > 3)
      throw std::invalid_argument("NetConfig: output_stage must be 1, 2 or 3");
    if (mbg_on && !mbg_left_on && !mbg_right_on)
      throw std::invalid_argument("NetConfig: MBG needs at least one branch enabled");
  }
};

struct BoundaryFeatures {
  Tensor features;  // F_b at the X2 scale
  Tensor logits;    // single-channel boundary logits at the X2 scale
};

// X2 (or the configured source) -> three 3x3 conv+ReLU layers -> 1x1 conv
// producing the one-channel boundary map.
class BoundaryHead : public Module {
 public:
  BoundaryHead() = default;
  BoundaryHead(int64_t in_ch, int64_t width, Rng& rng) {
    c1_ = Conv2d::make(in_ch, width, 3, 1, 1, 1, true, rng);
    c2_ = Conv2d::make(width, width, 3, 1, 1, 1, true, rng);
    c3_ = Conv2d::make(width, width, 3, 1, 1, 1, true, rng);
    head_ = Conv2d::make(width, 1, 1, 1, 0, 1, true, rng);
  }

  BoundaryFeatures forward(const Tensor& x) const {
    Tensor f = relu(c1_.forward(x));
    f = relu(c2_.forward(f));
    f = relu(c3_.forward(f));
    return {f, head_.forward(f)};
  }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    c1_.visit_params(join_name(p, "c1"), fn);
    c2_.visit_params(join_name(p, "c2"), fn);
    c3_.visit_params(join_name(p, "c3"), fn);
    head_.visit_params(join_name(p, "head"), fn);
  }

 private:
  Conv2d c1_, c2_, c3_, head_;
};

// One MBG instance at level s. Right branch: encoder-derived mask applied to
// the compressed boundary features. Left branch: boundary-derived mask
// applied to the upsampled encoder features. Output is the channel concat of
// the enabled branches at the X2 scale.
class MBGStage : public Module {
 public:
  MBGStage() = default;
  MBGStage(int64_t enc_ch, int64_t boundary_ch, bool left_on, bool right_on, Rng& rng)
      : left_on_(left_on), right_on_(right_on) {
    compress_ = Conv2d::make(boundary_ch, enc_ch, 1, 1, 0, 1, true, rng);
    wconv_ = Conv2d::make(enc_ch, enc_ch, 3, 1, 1, 1, true, rng);  // right-branch mask
    bconv_ = Conv2d::make(enc_ch, enc_ch, 3, 1, 1, 1, true, rng);  // left-branch mask
  }

  Tensor forward(const Tensor& f_b, const Tensor& x_s, int64_t up_factor) const {
    Tensor fb_c = compress_.forward(f_b);
    std::vector<Tensor> branches;
    if (right_on_) {
      Tensor w = upsample_by(wconv_.forward(x_s), up_factor);
      branches.push_back(relu(mul(w, fb_c)));
    }
    if (left_on_) {
      Tensor mask = bconv_.forward(fb_c);
      branches.push_back(mul(upsample_by(x_s, up_factor), mask));
    }
    return branches.size() == 1 ? branches[0] : concat_channels(branches);
  }

  int64_t out_channels(int64_t enc_ch) const {
    return enc_ch * ((left_on_ ? 1 : 0) + (right_on_ ? 1 : 0));
  }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    compress_.visit_params(join_name(p, "compress"), fn);
    wconv_.visit_params(join_name(p, "right_mask"), fn);
    bconv_.visit_params(join_name(p, "left_mask"), fn);
  }

 private:
  Conv2d compress_, wconv_, bconv_;
  bool left_on_ = true, right_on_ = true;
};

// F_d^s = prev + conv3x3(concat(F_B^s, conv3x3(prev))), prev already aligned
// to the X2 scale.
class DecodeStage : public Module {
 public:
  DecodeStage() = default;
  DecodeStage(int64_t fb_ch, int64_t channels, Rng& rng) {
    inner_ = Conv2d::make(channels, channels, 3, 1, 1, 1, true, rng);
    fuse_ = Conv2d::make(fb_ch + channels, channels, 3, 1, 1, 1, true, rng);
  }

  Tensor forward(const Tensor& f_B, const Tensor& prev) const {
    return add(prev, fuse_.forward(concat_channels({f_B, inner_.forward(prev)})));
  }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    inner_.visit_params(join_name(p, "inner"), fn);
    fuse_.visit_params(join_name(p, "fuse"), fn);
  }

 private:
  Conv2d inner_, fuse_;
};

struct Predictions {
  Tensor s3, s4, s5;   // full-resolution probability maps
  Tensor extra;        // deepest extra-stage output when output_stage < 3
  Tensor final_map;    // the designated result (S3, or the extra stage's map)
  Tensor a_t, a_p;     // defined only when the DSE is enabled
  Tensor a_se;         // at the X3 scale
  Tensor ase_full;     // A_SE upsampled to input size (a supervised head)
  Tensor boundary_logits;  // at the X2 scale
  Tensor boundary_prob;    // sigmoid(logits) upsampled to input size
  FeaturePyramid pyramid;
  BoundaryFeatures boundary;
  std::map<int, Tensor> f_B;  // per decoded stage
  std::map<int, Tensor> f_d;
};

class BSNet : public Module {
 public:
  BSNet(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int64_t C = cfg.backbone.channels;
    encoder_ = std::make_unique<Encoder>(cfg.backbone, rng);
    dse_ = DSE(C, cfg.dse_dilated_act, rng);
    auto raw_ch = (cfg.backbone.variant == BackboneVariant::tiny)
                      ? TinyBackbone(rng).stage_channels()
                      : std::array<int64_t, 5>{64, 256, 512, 1024, 2048};
    enc_ch_ = {raw_ch[0], C, C, C, C};  // X1 raw, X2..X5 post-RFB
    boundary_head_ = BoundaryHead(enc_ch_[static_cast<size_t>(cfg.boundary_source - 1)],
                                  cfg.boundary_channels, rng);
    ase_proj_ = Conv2d::make(1, C, 1, 1, 0, 1, true, rng);
    base_att_ = Conv2d::make(C, 1, 1, 1, 0, 1, true, rng);
    for (int s = 1; s <= 5; ++s) {
      if (!decodes_stage(s)) continue;
      int64_t ech = enc_ch_[static_cast<size_t>(s - 1)];
      mbg_[s] = MBGStage(ech, cfg.boundary_channels, cfg.mbg_left_on, cfg.mbg_right_on, rng);
      int64_t fb_ch = cfg.mbg_on ? mbg_[s].out_channels(ech) : 2 * ech;
      base_skip_[s] = Conv2d::make(ech, 2 * ech, 3, 1, 1, 1, true, rng);
      decode_[s] = DecodeStage(fb_ch, C, rng);
      head_[s] = Conv2d::make(C, 1, 1, 1, 0, 1, true, rng);
    }
  }

  // Standalone MBG fusion at level s (used directly by tests/tools).
  Tensor mbg_fuse(const Tensor& f_b, const Tensor& x_s, int s) const {
    if (mbg_.find(s) == mbg_.end())
      throw std::invalid_argument("mbg_fuse: no MBG instance at level " + std::to_string(s));
    return mbg_.at(s).forward(f_b, x_s, up_factor(s));
  }

  Predictions forward(const Tensor& image) {
    Predictions out;
    const int64_t H = image.shape()[2], W = image.shape()[3];
    out.pyramid = encoder_->forward(image);
    const auto& p = out.pyramid;

    if (cfg_.dse_on) {
      DSEOutput d = dse_.forward(p.x3, p.x4, p.x5);
      out.a_t = d.a_t;
      out.a_p = d.a_p;
      out.a_se = d.a_se;
    } else {
      out.a_se = sigmoid(base_att_.forward(upsample_by(p.x5, 4)));
    }
    out.ase_full = upsample_bilinear(out.a_se, H, W);

    Tensor bsrc;
    switch (cfg_.boundary_source) {
      case 1: bsrc = p.x1; break;
      case 2: bsrc = p.x2; break;
      default: bsrc = upsample_by(p.x5, 8); break;  // bring X5 to the X2 scale
    }
    out.boundary = boundary_head_.forward(bsrc);
    out.boundary_logits = out.boundary.logits;
    out.boundary_prob = upsample_bilinear(sigmoid(out.boundary_logits), H, W);

    // F_d^6 = A_SE: 2x upsample to the X2 scale, 1x1 projection to C channels
    Tensor prev = ase_proj_.forward(upsample_by(out.a_se, 2));
    Tensor refine = upsample_by(out.a_se, 2);
    for (int s = 5; s >= cfg_.output_stage; --s) {
      if (!decodes_stage(s)) continue;
      const Tensor& xs = level(p, s);
      Tensor fB = cfg_.mbg_on
                      ? mbg_.at(s).forward(out.boundary.features, xs, up_factor(s))
                      : base_skip_.at(s).forward(upsample_by(xs, up_factor(s)));
      Tensor d = decode_.at(s).forward(fB, prev);
      if (cfg_.dse_on)
        d = mul(d, cfg_.refinement == RefineMode::residual ? add_scalar(refine, 1.0) : refine);
      out.f_B[s] = fB;
      out.f_d[s] = d;
      prev = d;
    }

    auto head_map = [&](int s) {
      return sigmoid(upsample_bilinear(head_.at(s).forward(out.f_d.at(s)), H, W));
    };
    out.s3 = head_map(3);
    out.s4 = head_map(4);
    out.s5 = head_map(5);
    out.final_map = out.s3;
    if (cfg_.output_stage < 3) {
      out.extra = head_map(cfg_.output_stage);
      out.final_map = out.extra;
    }
    return out;
  }

  const NetConfig& config() const { return cfg_; }
  Encoder& encoder() { return *encoder_; }
  DSE& dse() { return dse_; }

  void load_pretrained_backbone(const std::string& path) {
    encoder_->load_pretrained_weights(path, "encoder");
  }

  void visit_params(const std::string& pre, const ParamVisitor& fn) override {
    encoder_->visit_params(join_name(pre, "encoder"), fn);
    dse_.visit_params(join_name(pre, "dse"), fn);
    boundary_head_.visit_params(join_name(pre, "boundary_head"), fn);
    ase_proj_.visit_params(join_name(pre, "ase_proj"), fn);
    base_att_.visit_params(join_name(pre, "base_att"), fn);
    for (auto& [s, m] : mbg_) m.visit_params(join_name(pre, "mbg" + std::to_string(s)), fn);
    for (auto& [s, m] : base_skip_)
      m.visit_params(join_name(pre, "base_skip" + std::to_string(s)), fn);
    for (auto& [s, m] : decode_) m.visit_params(join_name(pre, "decode" + std::to_string(s)), fn);
    for (auto& [s, m] : head_) m.visit_params(join_name(pre, "head" + std::to_string(s)), fn);
  }
  void visit_buffers(const std::string& pre, const ParamVisitor& fn) override {
    encoder_->visit_buffers(join_name(pre, "encoder"), fn);
  }
  void set_training(bool t) override { encoder_->set_training(t); }

 private:
  bool decodes_stage(int s) const { return s >= 3 || s >= cfg_.output_stage; }
  static int64_t up_factor(int s) { return s >= 2 ? (int64_t{1} << (s - 2)) : 1; }
  static const Tensor& level(const FeaturePyramid& p, int s) {
    switch (s) {
      case 1: return p.x1;
      case 2: return p.x2;
      case 3: return p.x3;
      case 4: return p.x4;
      default: return p.x5;
    }
  }
  NetConfig cfg_;
  std::array<int64_t, 5> enc_ch_{};
  std::unique_ptr<Encoder> encoder_;
  DSE dse_;
  BoundaryHead boundary_head_;
  Conv2d ase_proj_, base_att_;
  std::map<int, MBGStage> mbg_;
  std::map<int, Conv2d> base_skip_;
  std::map<int, DecodeStage> decode_;
  std::map<int, Conv2d> head_;
};

}  // namespace bsnet
