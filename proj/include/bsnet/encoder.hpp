#pragma once

// Feature extractor: residual multi-scale backbone (full Res2Net-50 style or
// a tiny 4-stage variant with the same stride schedule) followed by
// receptive-field blocks that bring stages 2-5 to a common channel width.

#include <array>
#include <memory>
#include <stdexcept>

#include "bsnet/checkpoint.hpp"
#include "bsnet/nn.hpp"

namespace bsnet {

enum class BackboneVariant { full, tiny };

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::tiny;
  int64_t channels = 32;  // common width after RFB enhancement
  std::string pretrained_weights_path;

  void validate() const {
    if (channels < 8) throw std::invalid_argument("BackboneConfig: channels must be >= 8");
  }
};

struct FeaturePyramid {
  Tensor x1, x2, x3, x4, x5;
};

// Multi-branch dilated-convolution block with a residual path. Output keeps
// the input spatial size and maps to `out_ch` channels.
class RFB : public Module {
 public:
  RFB() = default;
  RFB(int64_t in_ch, int64_t out_ch, Rng& rng) {
    b0_ = {ConvBnRelu(in_ch, out_ch, 1, 1, 0, 0, 1, rng)};
    b1_ = {ConvBnRelu(in_ch, out_ch, 1, 1, 0, 0, 1, rng),
           ConvBnRelu(out_ch, out_ch, 1, 3, 0, 1, 1, rng),
           ConvBnRelu(out_ch, out_ch, 3, 1, 1, 0, 1, rng),
           ConvBnRelu(out_ch, out_ch, 3, 3, 3, 3, 3, rng)};
    b2_ = {ConvBnRelu(in_ch, out_ch, 1, 1, 0, 0, 1, rng),
           ConvBnRelu(out_ch, out_ch, 1, 5, 0, 2, 1, rng),
           ConvBnRelu(out_ch, out_ch, 5, 1, 2, 0, 1, rng),
           ConvBnRelu(out_ch, out_ch, 3, 3, 5, 5, 5, rng)};
    b3_ = {ConvBnRelu(in_ch, out_ch, 1, 1, 0, 0, 1, rng),
           ConvBnRelu(out_ch, out_ch, 1, 7, 0, 3, 1, rng),
           ConvBnRelu(out_ch, out_ch, 7, 1, 3, 0, 1, rng),
           ConvBnRelu(out_ch, out_ch, 3, 3, 7, 7, 7, rng)};
    fuse_ = ConvBnRelu(4 * out_ch, out_ch, 3, 3, 1, 1, 1, rng);
    res_ = ConvBnRelu(in_ch, out_ch, 1, 1, 0, 0, 1, rng);
  }

  Tensor forward(const Tensor& x) {
    auto run = [&](std::vector<ConvBnRelu>& branch) {
      Tensor y = x;
      for (auto& layer : branch) y = layer.forward(y);
      return y;
    };
    Tensor cat = concat_channels({run(b0_), run(b1_), run(b2_), run(b3_)});
    return relu(add(fuse_.forward_linear(cat), res_.forward_linear(x)));
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
    visit_all([&](const std::string& n, Module& m) { m.visit_params(join_name(prefix, n), fn); });
  }
  void visit_buffers(const std::string& prefix, const ParamVisitor& fn) override {
    visit_all([&](const std::string& n, Module& m) { m.visit_buffers(join_name(prefix, n), fn); });
  }
  void set_training(bool training) override {
    visit_all([&](const std::string&, Module& m) { m.set_training(training); });
  }

 private:
  void visit_all(const std::function<void(const std::string&, Module&)>& fn) {
    auto branch = [&](const char* name, std::vector<ConvBnRelu>& b) {
      for (size_t i = 0; i < b.size(); ++i) fn(std::string(name) + "." + std::to_string(i), b[i]);
    };
    branch("branch0", b0_);
    branch("branch1", b1_);
    branch("branch2", b2_);
    branch("branch3", b3_);
    fn("fuse", fuse_);
    fn("res", res_);
  }

  std::vector<ConvBnRelu> b0_, b1_, b2_, b3_;
  ConvBnRelu fuse_, res_;
};

// Raw stage outputs before RFB enhancement: r1 at S/4 (post-maxpool stem),
// r2 at S/4, r3 at S/8, r4 at S/16, r5 at S/32.
class Backbone : public Module {
 public:
  virtual std::array<Tensor, 5> forward(const Tensor& x) = 0;
  virtual std::array<int64_t, 5> stage_channels() const = 0;
};

// ------------------------------------------------------------- tiny variant

class BasicBlock : public Module {
 public:
  BasicBlock() = default;
  BasicBlock(int64_t in_ch, int64_t out_ch, int64_t stride, Rng& rng) {
    conv1_ = Conv2d::make(in_ch, out_ch, 3, stride, 1, 1, /*bias=*/false, rng);
    bn1_ = BatchNorm2d(out_ch);
    conv2_ = Conv2d::make(out_ch, out_ch, 3, 1, 1, 1, /*bias=*/false, rng);
    bn2_ = BatchNorm2d(out_ch);
    has_down_ = (stride != 1 || in_ch != out_ch);
    if (has_down_) {
      down_conv_ = Conv2d::make(in_ch, out_ch, 1, stride, 0, 1, /*bias=*/false, rng);
      down_bn_ = BatchNorm2d(out_ch);
    }
  }

  Tensor forward(const Tensor& x) {
    Tensor y = relu(bn1_.forward(conv1_.forward(x)));
    y = bn2_.forward(conv2_.forward(y));
    Tensor skip = has_down_ ? down_bn_.forward(down_conv_.forward(x)) : x;
    return relu(add(y, skip));
  }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    conv1_.visit_params(join_name(p, "conv1"), fn);
    bn1_.visit_params(join_name(p, "bn1"), fn);
    conv2_.visit_params(join_name(p, "conv2"), fn);
    bn2_.visit_params(join_name(p, "bn2"), fn);
    if (has_down_) {
      down_conv_.visit_params(join_name(p, "downsample.conv"), fn);
      down_bn_.visit_params(join_name(p, "downsample.bn"), fn);
    }
  }
  void visit_buffers(const std::string& p, const ParamVisitor& fn) override {
    bn1_.visit_buffers(join_name(p, "bn1"), fn);
    bn2_.visit_buffers(join_name(p, "bn2"), fn);
    if (has_down_) down_bn_.visit_buffers(join_name(p, "downsample.bn"), fn);
  }
  void set_training(bool t) override {
    bn1_.set_training(t);
    bn2_.set_training(t);
    if (has_down_) down_bn_.set_training(t);
  }

 private:
  Conv2d conv1_, conv2_, down_conv_;
  BatchNorm2d bn1_, bn2_, down_bn_;
  bool has_down_ = false;
};

class TinyBackbone : public Backbone {
 public:
  explicit TinyBackbone(Rng& rng) {
    stem_ = Conv2d::make(3, 16, 3, 2, 1, 1, /*bias=*/false, rng);
    stem_bn_ = BatchNorm2d(16);
    stages_ = {BasicBlock(16, 16, 1, rng), BasicBlock(16, 32, 2, rng),
               BasicBlock(32, 64, 2, rng), BasicBlock(64, 128, 2, rng)};
  }

  std::array<Tensor, 5> forward(const Tensor& x) override {
    Tensor s = relu(stem_bn_.forward(stem_.forward(x)));
    Tensor r1 = max_pool2d(s, 3, 2, 1);
    Tensor r2 = stages_[0].forward(r1);
    Tensor r3 = stages_[1].forward(r2);
    Tensor r4 = stages_[2].forward(r3);
    Tensor r5 = stages_[3].forward(r4);
    return {r1, r2, r3, r4, r5};
  }
  std::array<int64_t, 5> stage_channels() const override { return {16, 16, 32, 64, 128}; }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    stem_.visit_params(join_name(p, "conv1"), fn);
    stem_bn_.visit_params(join_name(p, "bn1"), fn);
    for (size_t i = 0; i < stages_.size(); ++i)
      stages_[i].visit_params(join_name(p, "layer" + std::to_string(i + 1)), fn);
  }
  void visit_buffers(const std::string& p, const ParamVisitor& fn) override {
    stem_bn_.visit_buffers(join_name(p, "bn1"), fn);
    for (size_t i = 0; i < stages_.size(); ++i)
      stages_[i].visit_buffers(join_name(p, "layer" + std::to_string(i + 1)), fn);
  }
  void set_training(bool t) override {
    stem_bn_.set_training(t);
    for (auto& s : stages_) s.set_training(t);
  }

 private:
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<BasicBlock> stages_;
};

// ------------------------------------------------------------- full variant

// Res2Net bottleneck: the 1x1-reduced features are split into `scale` groups
// processed by a hierarchy of 3x3 convolutions.
class Res2NetBlock : public Module {
 public:
  Res2NetBlock() = default;
  Res2NetBlock(int64_t in_ch, int64_t planes, int64_t stride, bool stage, Rng& rng)
      : stride_(stride), stage_(stage) {
    width_ = planes * 26 / 64;
    int64_t w = width_ * kScale;
    conv1_ = Conv2d::make(in_ch, w, 1, 1, 0, 1, false, rng);
    bn1_ = BatchNorm2d(w);
    for (int i = 0; i < kScale - 1; ++i) {
      convs_.push_back(Conv2d::make(width_, width_, 3, stride, 1, 1, false, rng));
      bns_.emplace_back(width_);
    }
    int64_t out_ch = planes * 4;
    conv3_ = Conv2d::make(w, out_ch, 1, 1, 0, 1, false, rng);
    bn3_ = BatchNorm2d(out_ch);
    has_down_ = (stride != 1 || in_ch != out_ch);
    if (has_down_) {
      down_conv_ = Conv2d::make(in_ch, out_ch, 1, stride, 0, 1, false, rng);
      down_bn_ = BatchNorm2d(out_ch);
    }
  }

  Tensor forward(const Tensor& x) {
    Tensor out = relu(bn1_.forward(conv1_.forward(x)));
    std::vector<Tensor> parts;
    Tensor sp;
    for (int i = 0; i < kScale - 1; ++i) {
      Tensor piece = slice_channels(out, i * width_, (i + 1) * width_);
      sp = (i == 0 || stage_) ? piece : add(sp, piece);
      sp = relu(bns_[static_cast<size_t>(i)].forward(convs_[static_cast<size_t>(i)].forward(sp)));
      parts.push_back(sp);
    }
    Tensor last = slice_channels(out, (kScale - 1) * width_, kScale * width_);
    parts.push_back(stage_ ? avg_pool2d(last, 3, stride_, 1) : last);
    Tensor y = bn3_.forward(conv3_.forward(concat_channels(parts)));
    Tensor skip = has_down_ ? down_bn_.forward(down_conv_.forward(x)) : x;
    return relu(add(y, skip));
  }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    conv1_.visit_params(join_name(p, "conv1"), fn);
    bn1_.visit_params(join_name(p, "bn1"), fn);
    for (size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].visit_params(join_name(p, "convs." + std::to_string(i)), fn);
      bns_[i].visit_params(join_name(p, "bns." + std::to_string(i)), fn);
    }
    conv3_.visit_params(join_name(p, "conv3"), fn);
    bn3_.visit_params(join_name(p, "bn3"), fn);
    if (has_down_) {
      down_conv_.visit_params(join_name(p, "downsample.conv"), fn);
      down_bn_.visit_params(join_name(p, "downsample.bn"), fn);
    }
  }
  void visit_buffers(const std::string& p, const ParamVisitor& fn) override {
    bn1_.visit_buffers(join_name(p, "bn1"), fn);
    for (size_t i = 0; i < bns_.size(); ++i)
      bns_[i].visit_buffers(join_name(p, "bns." + std::to_string(i)), fn);
    bn3_.visit_buffers(join_name(p, "bn3"), fn);
    if (has_down_) down_bn_.visit_buffers(join_name(p, "downsample.bn"), fn);
  }
  void set_training(bool t) override {
    bn1_.set_training(t);
    for (auto& b : bns_) b.set_training(t);
    bn3_.set_training(t);
    if (has_down_) down_bn_.set_training(t);
  }

 private:
  static constexpr int kScale = 4;
  int64_t width_ = 0, stride_ = 1;
  bool stage_ = false, has_down_ = false;
  Conv2d conv1_, conv3_, down_conv_;
  BatchNorm2d bn1_, bn3_, down_bn_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> bns_;
};

class Res2NetBackbone : public Backbone {
 public:
  explicit Res2NetBackbone(Rng& rng) {
    stem_ = Conv2d::make(3, 64, 7, 2, 3, 1, false, rng);
    stem_bn_ = BatchNorm2d(64);
    auto make_layer = [&](std::vector<Res2NetBlock>& layer, int64_t in_ch, int64_t planes,
                          int blocks, int64_t stride) {
      layer.emplace_back(in_ch, planes, stride, /*stage=*/true, rng);
      for (int i = 1; i < blocks; ++i)
        layer.emplace_back(planes * 4, planes, 1, /*stage=*/false, rng);
    };
    make_layer(layer1_, 64, 64, 3, 1);
    make_layer(layer2_, 256, 128, 4, 2);
    make_layer(layer3_, 512, 256, 6, 2);
    make_layer(layer4_, 1024, 512, 3, 2);
  }

  std::array<Tensor, 5> forward(const Tensor& x) override {
    Tensor s = relu(stem_bn_.forward(stem_.forward(x)));
    Tensor r1 = max_pool2d(s, 3, 2, 1);
    auto run = [](std::vector<Res2NetBlock>& layer, Tensor t) {
      for (auto& b : layer) t = b.forward(t);
      return t;
    };
    Tensor r2 = run(layer1_, r1);
    Tensor r3 = run(layer2_, r2);
    Tensor r4 = run(layer3_, r3);
    Tensor r5 = run(layer4_, r4);
    return {r1, r2, r3, r4, r5};
  }
  std::array<int64_t, 5> stage_channels() const override { return {64, 256, 512, 1024, 2048}; }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    visit_all([&](const std::string& n, Module& m) { m.visit_params(join_name(p, n), fn); });
  }
  void visit_buffers(const std::string& p, const ParamVisitor& fn) override {
    visit_all([&](const std::string& n, Module& m) { m.visit_buffers(join_name(p, n), fn); });
  }
  void set_training(bool t) override {
    visit_all([&](const std::string&, Module& m) { m.set_training(t); });
  }

 private:
  void visit_all(const std::function<void(const std::string&, Module&)>& fn) {
    fn("conv1", stem_);
    fn("bn1", stem_bn_);
    auto layer = [&](const char* name, std::vector<Res2NetBlock>& l) {
      for (size_t i = 0; i < l.size(); ++i) fn(std::string(name) + "." + std::to_string(i), l[i]);
    };
    layer("layer1", layer1_);
    layer("layer2", layer2_);
    layer("layer3", layer3_);
    layer("layer4", layer4_);
  }

  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<Res2NetBlock> layer1_, layer2_, layer3_, layer4_;
};

// --------------------------------------------------------------- the encoder

class Encoder : public Module {
 public:
  Encoder() = default;
  Encoder(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    if (cfg.variant == BackboneVariant::tiny)
      backbone_ = std::make_unique<TinyBackbone>(rng);
    else
      backbone_ = std::make_unique<Res2NetBackbone>(rng);
    auto ch = backbone_->stage_channels();
    for (int i = 0; i < 4; ++i)
      rfbs_.emplace_back(ch[static_cast<size_t>(i + 1)], cfg.channels, rng);
  }

  FeaturePyramid forward(const Tensor& image) {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != 3)
      throw std::invalid_argument("encoder: expects a (N,3,H,W) image tensor");
    if (s[2] % 32 != 0 || s[3] % 32 != 0)
      throw std::invalid_argument("encoder: spatial side must be divisible by 32, got " +
                                  shape_str(s));
    auto raw = backbone_->forward(image);
    FeaturePyramid p;
    p.x1 = raw[0];
    p.x2 = rfbs_[0].forward(raw[1]);
    p.x3 = rfbs_[1].forward(raw[2]);
    p.x4 = rfbs_[2].forward(raw[3]);
    p.x5 = rfbs_[3].forward(raw[4]);
    return p;
  }

  // Replaces backbone parameters from a checkpoint; RFB weights untouched.
  // `own_prefix` is this encoder's name inside the checkpoint namespace.
  void load_pretrained_weights(const std::string& path,
                               const std::string& own_prefix = "encoder") {
    auto entries = load_checkpoint(path);
    auto state = named_state(own_prefix);
    apply_checkpoint(state, entries, join_name(own_prefix, "backbone"));
  }

  const BackboneConfig& config() const { return cfg_; }

  void visit_params(const std::string& p, const ParamVisitor& fn) override {
    backbone_->visit_params(join_name(p, "backbone"), fn);
    for (size_t i = 0; i < rfbs_.size(); ++i)
      rfbs_[i].visit_params(join_name(p, "rfb" + std::to_string(i + 2)), fn);
  }
  void visit_buffers(const std::string& p, const ParamVisitor& fn) override {
    backbone_->visit_buffers(join_name(p, "backbone"), fn);
    for (size_t i = 0; i < rfbs_.size(); ++i)
      rfbs_[i].visit_buffers(join_name(p, "rfb" + std::to_string(i + 2)), fn);
  }
  void set_training(bool t) override {
    backbone_->set_training(t);
    for (auto& r : rfbs_) r.set_training(t);
  }

 private:
  BackboneConfig cfg_;
  std::unique_ptr<Backbone> backbone_;
  std::vector<RFB> rfbs_;
};

}  // namespace bsnet
