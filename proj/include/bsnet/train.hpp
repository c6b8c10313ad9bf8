#pragma once

// Optimization loop with deep supervision, checkpointing and validation.

#include <chrono>
#include <fstream>
#include <optional>

#include "bsnet/checkpoint.hpp"
#include "bsnet/data.hpp"
#include "bsnet/losses.hpp"
#include "bsnet/net.hpp"

namespace bsnet {

class Adam {
 public:
  explicit Adam(std::vector<std::pair<std::string, Tensor>> params, double lr,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    slots_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      slots_[i].m.assign(static_cast<size_t>(params_[i].second.numel()), 0.0);
      slots_[i].v.assign(static_cast<size_t>(params_[i].second.numel()), 0.0);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // Optional global grad-norm clipping before the update.
  void clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : params_)
      for (double g : p.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    double scale = max_norm / norm;
    for (auto& [name, p] : params_)
      for (double& g : p.grad()) g *= scale;
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].second;
      auto& g = p.grad();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      double* w = p.data();
      for (size_t k = 0; k < g.size(); ++k) {
        m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
        v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
        w[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
      p.detach_();
    }
  }

  double lr() const { return lr_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Slot> slots_;
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

struct TrainConfig {
  NetConfig net;
  int epochs = 90;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double gamma = kDefaultGamma;
  int importance_window = kImportanceWindow;
  uint64_t seed = 0;
  int input_side = kDefaultInputSide;
  std::vector<double> scales = {0.75, 1.0, 1.25};
  bool multiscale = true;
  std::optional<double> gradient_clip;
  int max_steps = -1;  // caps total optimizer steps when >= 0
  AugmentConfig augment;
  BoundaryExtractor boundary_gt = BoundaryExtractor::canny;
  bool validate_each_epoch = false;

  void validate() const {
    net.validate();
    if (epochs < 1 || batch_size < 1 || learning_rate <= 0.0 || gamma < 0.0)
      throw std::invalid_argument("TrainConfig: positive epochs/batch/lr required");
    if (input_side % 32 != 0) throw std::invalid_argument("TrainConfig: input_side % 32 != 0");
  }
};

struct StepRecord {
  int64_t step = 0;
  int epoch = 0;
  double total = 0, boundary = 0;
  double wbce_sum = 0, wiou_sum = 0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::string final_checkpoint;
  int epochs_run = 0;
  bool aborted_nan = false;
};

struct NanLossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline LossHeads heads_from_predictions(const Predictions& p) {
  LossHeads h;
  h.maps = {{"S3", p.s3}, {"S4", p.s4}, {"S5", p.s5}, {"A_SE", p.ase_full}};
  if (p.extra.defined()) h.maps.emplace_back("S_out", p.extra);
  h.boundary_logits = p.boundary_logits;
  return h;
}

// Evaluates the final prediction map over a sample list; predictions are
// resized back to each sample's native resolution before scoring.
inline MetricReport validate(BSNet& model, const std::vector<SampleRecord>& samples,
                             int side) {
  NoGradGuard ng;
  model.set_training(false);
  MetricReport r;
  auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : samples) {
    Tensor input = preprocess(s.image, side);
    Predictions p = model.forward(input);
    cv::Mat pm(side, side, CV_64F);
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j)
        pm.at<double>(i, j) = p.final_map.data()[static_cast<int64_t>(i) * side + j];
    cv::Mat native;
    cv::resize(pm, native, cv::Size(s.mask.w, s.mask.h), 0, 0, cv::INTER_LINEAR);
    ProbMap prob{s.mask.h, s.mask.w, std::vector<double>(s.mask.size())};
    for (int i = 0; i < s.mask.h; ++i)
      for (int j = 0; j < s.mask.w; ++j)
        prob.v[static_cast<size_t>(i) * s.mask.w + j] =
            std::clamp(native.at<double>(i, j), 0.0, 1.0);
    r.per_image.push_back(compute_image_metrics(s.name, prob, s.mask));
  }
  auto t1 = std::chrono::steady_clock::now();
  finalize_report(r);
  double secs = std::chrono::duration<double>(t1 - t0).count();
  r.images_per_second = secs > 0 ? static_cast<double>(r.per_image.size()) / secs : 0.0;
  return r;
}

inline TrainResult train(BSNet& model, const std::vector<SampleRecord>& train_samples,
                         const TrainConfig& cfg, const std::string& out_dir,
                         const std::vector<SampleRecord>* val_samples = nullptr) {
  cfg.validate();
  if (train_samples.empty()) throw std::invalid_argument("train: empty training set");
  fs::create_directories(out_dir);
  Adam opt(model.named_params(), cfg.learning_rate);
  Rng data_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  std::ofstream steps_log(fs::path(out_dir) / "steps.jsonl");
  std::ofstream epochs_log(fs::path(out_dir) / "epochs.csv");
  epochs_log << "epoch,mean_total";
  if (val_samples) epochs_log << ",val_dsc,val_mae";
  epochs_log << "\n";

  TrainResult result;
  auto save = [&](const std::string& name) {
    std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(path, model.named_state());
    return path;
  };
  result.final_checkpoint = save("last.ckpt");  // step-0 state, kept on abort

  std::vector<size_t> order(train_samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int64_t step = 0;
  double best_val_dsc = -1.0;
  std::uniform_int_distribution<size_t> scale_pick(0, cfg.scales.empty() ? 0 : cfg.scales.size() - 1);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.set_training(true);
    std::shuffle(order.begin(), order.end(), data_rng);
    double epoch_total = 0.0;
    int64_t epoch_steps = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
      if (cfg.max_steps >= 0 && step >= cfg.max_steps) break;
      std::vector<SampleRecord> batch_samples;
      for (size_t k = off; k < std::min(order.size(), off + static_cast<size_t>(cfg.batch_size)); ++k)
        batch_samples.push_back(augment(train_samples[order[k]], cfg.augment, data_rng));
      double scale = (cfg.multiscale && !cfg.scales.empty()) ? cfg.scales[scale_pick(data_rng)] : 1.0;
      int side = multiscale_side(cfg.input_side, scale);
      Batch batch = make_batch(batch_samples, side, cfg.boundary_gt);

      Predictions preds = model.forward(batch.images);
      LossBreakdown loss = total_loss(heads_from_predictions(preds), batch.masks,
                                      batch.boundaries, cfg.gamma, cfg.importance_window);
      double total = loss.total_value();
      if (!std::isfinite(total)) {
        result.aborted_nan = true;
        throw NanLossError("training aborted: non-finite loss at step " + std::to_string(step) +
                           "; last-good checkpoint: " + result.final_checkpoint);
      }
      opt.zero_grad();
      loss.total.backward();
      if (cfg.gradient_clip) opt.clip_grad_norm(*cfg.gradient_clip);
      opt.step();

      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.total = total;
      rec.boundary = loss.boundary.item();
      for (const auto& [name, pair] : loss.heads) {
        rec.wbce_sum += pair.first.item();
        rec.wiou_sum += pair.second.item();
      }
      result.steps.push_back(rec);
      json j{{"step", rec.step},         {"epoch", rec.epoch},   {"total", rec.total},
             {"boundary", rec.boundary}, {"wbce", rec.wbce_sum}, {"wiou", rec.wiou_sum},
             {"side", side}};
      steps_log << j.dump() << "\n";
      epoch_total += total;
      ++epoch_steps;
      ++step;
    }
    if (epoch_steps > 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
      save(name);
      result.final_checkpoint = save("last.ckpt");
    }
    epochs_log << epoch << ',' << (epoch_steps ? epoch_total / static_cast<double>(epoch_steps) : 0.0);
    if (val_samples) {
      MetricReport vr = validate(model, *val_samples, cfg.input_side);
      epochs_log << ',' << vr.mean.dsc << ',' << vr.mean.mae;
      if (vr.mean.dsc > best_val_dsc) {
        best_val_dsc = vr.mean.dsc;
        save("best_val.ckpt");  // model selection beyond the fixed-epoch protocol
      }
    }
    epochs_log << "\n";
    result.epochs_run = epoch;
    if (cfg.max_steps >= 0 && step >= cfg.max_steps) break;
  }
  return result;
}

struct FpsReport {
  double images_per_second = 0;
  double seconds_per_image = 0;
  int n_images = 0, warmup = 0, side = 0;
  std::string device;
};

inline std::string cpu_description() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) return "cpu: " + line.substr(pos + 2);
    }
  }
  return "cpu: unknown";
}

// Single-image throughput: FPS = 1 / mean per-image latency after warmup.
inline FpsReport bench_fps(BSNet& model, int n_images, int warmup,
                           int side = kDefaultInputSide, uint64_t seed = 0) {
  NoGradGuard ng;
  model.set_training(false);
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor input = Tensor::zeros({1, 3, side, side});
  for (auto& v : input.vec()) v = dist(rng);
  for (int i = 0; i < warmup; ++i) model.forward(input);
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n_images; ++i) model.forward(input);
  auto t1 = std::chrono::steady_clock::now();
  double secs = std::chrono::duration<double>(t1 - t0).count();
  FpsReport r;
  r.n_images = n_images;
  r.warmup = warmup;
  r.side = side;
  r.seconds_per_image = secs / static_cast<double>(n_images);
  r.images_per_second = 1.0 / r.seconds_per_image;
  r.device = cpu_description();
  return r;
}

}  // namespace bsnet
