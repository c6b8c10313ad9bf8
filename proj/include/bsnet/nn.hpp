#pragma once

// Layer abstractions on top of the tensor engine.

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bsnet/ops.hpp"
#include "bsnet/tensor.hpp"

namespace bsnet {

using Rng = std::mt19937_64;

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

class Module {
 public:
  virtual ~Module() = default;
  // Trainable parameters.
  virtual void visit_params(const std::string& prefix, const ParamVisitor& fn) = 0;
  // Non-trainable state (batch-norm running stats); default: none.
  virtual void visit_buffers(const std::string&, const ParamVisitor&) {}
  virtual void set_training(bool) {}

  std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix = "") {
    std::vector<std::pair<std::string, Tensor>> out;
    visit_params(prefix, [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
  }
  // Params + buffers, the full serializable state.
  std::vector<std::pair<std::string, Tensor>> named_state(const std::string& prefix = "") {
    auto out = named_params(prefix);
    visit_buffers(prefix, [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
  }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline Tensor kaiming_normal(Shape shape, int64_t fan, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan)));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.vec()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(int64_t in_ch, int64_t out_ch, int64_t kh, int64_t kw, Conv2dSpec spec, bool bias,
         Rng& rng)
      : spec_(spec) {
    int64_t fan_out = out_ch * kh * kw;
    weight_ = kaiming_normal({out_ch, in_ch, kh, kw}, fan_out, rng);
    if (bias) {
      bias_ = Tensor::zeros({out_ch});
      bias_.set_requires_grad(true);
    }
  }
  static Conv2d make(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride, int64_t pad,
                     int64_t dilation, bool bias, Rng& rng) {
    Conv2dSpec sp;
    sp.stride_h = sp.stride_w = stride;
    sp.pad_h = sp.pad_w = pad;
    sp.dil_h = sp.dil_w = dilation;
    return Conv2d(in_ch, out_ch, k, k, sp, bias, rng);
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight_, bias_, spec_); }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
    fn(join_name(prefix, "weight"), weight_);
    if (bias_.defined()) fn(join_name(prefix, "bias"), bias_);
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;  // undefined when bias-free
  Conv2dSpec spec_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t channels) {
    gamma_ = Tensor::full({channels}, 1.0);
    gamma_.set_requires_grad(true);
    beta_ = Tensor::zeros({channels});
    beta_.set_requires_grad(true);
    running_mean_ = Tensor::zeros({channels});
    running_var_ = Tensor::full({channels}, 1.0);
  }

  Tensor forward(const Tensor& x) {
    if (training_)
      return batch_norm_train(x, gamma_, beta_, running_mean_, running_var_, momentum_, eps_);
    return batch_norm_eval(x, gamma_, beta_, running_mean_, running_var_, eps_);
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
    fn(join_name(prefix, "weight"), gamma_);
    fn(join_name(prefix, "bias"), beta_);
  }
  void visit_buffers(const std::string& prefix, const ParamVisitor& fn) override {
    fn(join_name(prefix, "running_mean"), running_mean_);
    fn(join_name(prefix, "running_var"), running_var_);
  }
  void set_training(bool training) override { training_ = training; }

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  bool training_ = false;
};

// conv + BN + ReLU, the basic block used inside RFB.
class ConvBnRelu : public Module {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(int64_t in_ch, int64_t out_ch, int64_t kh, int64_t kw, int64_t ph, int64_t pw,
             int64_t dilation, Rng& rng) {
    Conv2dSpec sp;
    sp.pad_h = ph;
    sp.pad_w = pw;
    sp.dil_h = sp.dil_w = dilation;
    conv_ = Conv2d(in_ch, out_ch, kh, kw, sp, /*bias=*/false, rng);
    bn_ = BatchNorm2d(out_ch);
  }

  Tensor forward(const Tensor& x) { return relu(bn_.forward(conv_.forward(x))); }
  Tensor forward_linear(const Tensor& x) { return bn_.forward(conv_.forward(x)); }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
    conv_.visit_params(join_name(prefix, "conv"), fn);
    bn_.visit_params(join_name(prefix, "bn"), fn);
  }
  void visit_buffers(const std::string& prefix, const ParamVisitor& fn) override {
    bn_.visit_buffers(join_name(prefix, "bn"), fn);
  }
  void set_training(bool training) override { bn_.set_training(training); }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

}  // namespace bsnet
