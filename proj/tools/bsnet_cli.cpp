// Command-line front end: prepare / train / eval / infer / bench-fps /
// ablate. Every run echoes its fully resolved configuration into the output
// directory so results can be reproduced from the artifacts alone.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "bsnet/config.hpp"
#include "bsnet/train.hpp"

using namespace bsnet;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "out";
  uint64_t seed = 0;
  bool deterministic = false;
};

Config resolve_config(const CommonArgs& args) {
  Config cfg;
  if (!args.config_path.empty()) cfg = Config::load(args.config_path);
  cfg.apply_overrides(args.sets);
  cfg.set("run.seed", std::to_string(args.seed));
  cfg.set("run.deterministic", args.deterministic ? "true" : "false");
  return cfg;
}

void echo_config(const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "resolved_config.txt");
  out << cfg.dump();
}

const std::set<std::string> kKnownKeys = {
    "run.seed",          "run.deterministic",   "net.backbone",        "net.channels",
    "net.boundary_channels", "net.dse_on",      "net.mbg_on",          "net.mbg_left_on",
    "net.mbg_right_on",  "net.boundary_source", "net.output_stage",    "net.dilated_act",
    "net.refinement",    "net.pretrained",      "train.epochs",        "train.batch_size",
    "train.learning_rate", "train.gamma",       "train.input_side",    "train.scales",
    "train.multiscale",  "train.grad_clip",     "train.max_steps",     "train.hflip_prob",
    "train.vflip_prob",  "train.boundary_gt",   "train.validate",      "data.train_count",
    "data.train_fraction", "data.extractor",    "eval.threshold",      "bench.n",
    "bench.warmup",      "bench.side",          "ablate.grid",
};

void reject_unknown_keys(const Config& cfg) {
  for (const auto& [k, v] : cfg.items())
    if (!kKnownKeys.count(k))
      throw std::runtime_error("unknown config key: " + k);
}

NetConfig net_config_from(const Config& c) {
  NetConfig n;
  std::string variant = c.get_str("net.backbone", "full");
  if (variant == "tiny")
    n.backbone.variant = BackboneVariant::tiny;
  else if (variant == "full")
    n.backbone.variant = BackboneVariant::full;
  else
    throw std::runtime_error("net.backbone must be 'full' or 'tiny', got: " + variant);
  n.backbone.channels = c.get_int("net.channels", n.backbone.channels);
  n.backbone.pretrained_weights_path = c.get_str("net.pretrained", "");
  n.boundary_channels = c.get_int("net.boundary_channels", n.boundary_channels);
  n.dse_on = c.get_bool("net.dse_on", true);
  n.mbg_on = c.get_bool("net.mbg_on", true);
  n.mbg_left_on = c.get_bool("net.mbg_left_on", true);
  n.mbg_right_on = c.get_bool("net.mbg_right_on", true);
  n.boundary_source = static_cast<int>(c.get_int("net.boundary_source", 2));
  n.output_stage = static_cast<int>(c.get_int("net.output_stage", 3));
  std::string act = c.get_str("net.dilated_act", "sigmoid");
  n.dse_dilated_act = act == "relu" ? DilatedActivation::relu : DilatedActivation::sigmoid;
  n.refinement = c.get_str("net.refinement", "residual") == "bare" ? RefineMode::bare
                                                                   : RefineMode::residual;
  n.validate();
  return n;
}

TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.net = net_config_from(c);
  t.epochs = static_cast<int>(c.get_int("train.epochs", 90));
  t.batch_size = static_cast<int>(c.get_int("train.batch_size", 8));
  t.learning_rate = c.get_double("train.learning_rate", 1e-4);
  t.gamma = c.get_double("train.gamma", kDefaultGamma);
  t.seed = static_cast<uint64_t>(c.get_int("run.seed", 0));
  t.input_side = static_cast<int>(c.get_int("train.input_side", kDefaultInputSide));
  t.scales = c.get_doubles("train.scales", {0.75, 1.0, 1.25});
  t.multiscale = c.get_bool("train.multiscale", true);
  if (c.has("train.grad_clip")) t.gradient_clip = c.get_double("train.grad_clip", 0.0);
  t.max_steps = static_cast<int>(c.get_int("train.max_steps", -1));
  t.augment.hflip_prob = c.get_double("train.hflip_prob", 0.5);
  t.augment.vflip_prob = c.get_double("train.vflip_prob", 0.0);
  t.boundary_gt = boundary_extractor_from_string(c.get_str("train.boundary_gt", "canny"));
  t.validate_each_epoch = c.get_bool("train.validate", false);
  t.validate();
  return t;
}

BSNet build_model(const Config& c, uint64_t seed) {
  NetConfig n = net_config_from(c);
  Rng rng(seed);
  BSNet model(n, rng);
  if (!n.backbone.pretrained_weights_path.empty())
    model.load_pretrained_backbone(n.backbone.pretrained_weights_path);
  return model;
}

void load_weights(BSNet& model, const std::string& path) {
  auto entries = load_checkpoint(path);
  auto state = model.named_state();
  apply_checkpoint(state, entries, "");
}

// Minimal line-plot SVG of the per-step training loss.
void write_loss_curve_svg(const std::string& path, const std::vector<StepRecord>& steps) {
  if (steps.empty()) return;
  const int W = 800, H = 400, M = 44;
  double lo = steps[0].total, hi = steps[0].total;
  for (const auto& s : steps) {
    lo = std::min(lo, s.total);
    hi = std::max(hi, s.total);
  }
  if (hi == lo) hi = lo + 1.0;
  std::ofstream out(path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>"
      << "training loss per step</text>\n";
  out << "<line x1='" << M << "' y1='" << H - M << "' x2='" << W - M / 2 << "' y2='" << H - M
      << "' stroke='black'/>\n";
  out << "<line x1='" << M << "' y1='" << H - M << "' x2='" << M << "' y2='" << M / 2
      << "' stroke='black'/>\n";
  out << "<text x='8' y='" << M / 2 + 4 << "' font-size='11'>" << hi << "</text>\n";
  out << "<text x='8' y='" << H - M << "' font-size='11'>" << lo << "</text>\n";
  out << "<polyline fill='none' stroke='steelblue' stroke-width='1.5' points='";
  double n = static_cast<double>(steps.size());
  for (size_t i = 0; i < steps.size(); ++i) {
    double px = M + (W - 1.5 * M) * (static_cast<double>(i) / std::max(1.0, n - 1));
    double py = (H - M) - (H - 1.5 * M) * ((steps[i].total - lo) / (hi - lo));
    out << px << ',' << py << ' ';
  }
  out << "'/>\n</svg>\n";
}

// Prediction boundary in red, ground-truth boundary in green, overlaid on
// the slice at native resolution.
void write_overlay_png(const std::string& path, const cv::Mat& gray01, const BinaryMask& pred,
                       const BinaryMask& gt) {
  cv::Mat img8;
  gray01.convertTo(img8, CV_8U, 255.0);
  cv::Mat color;
  cv::cvtColor(img8, color, cv::COLOR_GRAY2BGR);
  BinaryMask pb = mask_boundary(pred);
  BinaryMask gb = mask_boundary(gt);
  for (int i = 0; i < pb.h; ++i)
    for (int j = 0; j < pb.w; ++j) {
      if (gb.at(i, j)) color.at<cv::Vec3b>(i, j) = {0, 200, 0};
      if (pb.at(i, j)) color.at<cv::Vec3b>(i, j) = {0, 0, 230};
    }
  cv::imwrite(path, color);
}

MetricReport eval_model_on_split(BSNet& model, const std::vector<SampleRecord>& samples,
                                 int side, const std::string& out_dir, double threshold,
                                 bool overlays) {
  NoGradGuard ng;
  model.set_training(false);
  fs::create_directories(fs::path(out_dir) / "predictions");
  if (overlays) fs::create_directories(fs::path(out_dir) / "overlays");
  MetricReport r;
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
    write_prob_map((fs::path(out_dir) / "predictions" / s.name).string(), prob);
    if (overlays)
      write_overlay_png((fs::path(out_dir) / "overlays" / s.name).string(), s.image,
                        binarize(prob, threshold), s.mask);
    r.per_image.push_back(compute_image_metrics(s.name, prob, s.mask, threshold));
  }
  finalize_report(r);
  return r;
}

void write_report(const MetricReport& r, const std::string& out_dir) {
  std::ofstream csv(fs::path(out_dir) / "metrics.csv");
  csv << report_csv(r);
  std::ofstream js(fs::path(out_dir) / "metrics.json");
  js << report_to_json(r).dump(2) << "\n";
}

// ------------------------------------------------------------------ commands

int cmd_prepare(const CommonArgs& args, const std::vector<std::string>& raw_dirs) {
  Config cfg = resolve_config(args);
  reject_unknown_keys(cfg);
  echo_config(cfg, args.out_dir);
  SplitSpec spec;
  spec.seed = args.seed;
  spec.train_count = static_cast<int>(cfg.get_int("data.train_count", -1));
  spec.train_fraction = cfg.get_double("data.train_fraction", spec.train_fraction);
  BoundaryExtractor ex = boundary_extractor_from_string(cfg.get_str("data.extractor", "canny"));
  DatasetManifest m = ingest(raw_dirs, args.out_dir, spec, ex);
  std::cout << "prepared " << m.train_count << " train / " << m.test_count
            << " test pairs; warnings: " << m.warning_count << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_root) {
  Config cfg = resolve_config(args);
  reject_unknown_keys(cfg);
  echo_config(cfg, args.out_dir);
  TrainConfig tc = train_config_from(cfg);
  auto train_samples = load_split(data_root, "train");
  auto test_samples = load_split(data_root, "test");
  BSNet model = build_model(cfg, args.seed);
  TrainResult r = train(model, train_samples, tc, args.out_dir,
                        tc.validate_each_epoch ? &test_samples : nullptr);
  write_loss_curve_svg((fs::path(args.out_dir) / "loss_curve.svg").string(), r.steps);
  std::cout << "trained " << r.epochs_run << " epochs (" << r.steps.size()
            << " steps); final checkpoint: " << r.final_checkpoint << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& data_root, const std::string& weights,
             const std::string& split) {
  Config cfg = resolve_config(args);
  reject_unknown_keys(cfg);
  echo_config(cfg, args.out_dir);
  auto samples = load_split(data_root, split);
  BSNet model = build_model(cfg, args.seed);
  if (!weights.empty()) load_weights(model, weights);
  int side = static_cast<int>(cfg.get_int("train.input_side", kDefaultInputSide));
  double threshold = cfg.get_double("eval.threshold", 0.5);
  MetricReport r = eval_model_on_split(model, samples, side, args.out_dir, threshold, true);
  write_report(r, args.out_dir);
  std::cout << report_csv(r);
  return 0;
}

int cmd_infer(const CommonArgs& args, const std::vector<std::string>& images,
              const std::string& weights) {
  Config cfg = resolve_config(args);
  reject_unknown_keys(cfg);
  echo_config(cfg, args.out_dir);
  BSNet model = build_model(cfg, args.seed);
  if (!weights.empty()) load_weights(model, weights);
  model.set_training(false);
  NoGradGuard ng;
  int side = static_cast<int>(cfg.get_int("train.input_side", kDefaultInputSide));
  double threshold = cfg.get_double("eval.threshold", 0.5);
  for (const auto& path : images) {
    cv::Mat gray = read_gray(path);
    Predictions p = model.forward(preprocess(gray, side));
    cv::Mat pm(side, side, CV_64F);
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j)
        pm.at<double>(i, j) = p.final_map.data()[static_cast<int64_t>(i) * side + j];
    cv::Mat native;
    cv::resize(pm, native, cv::Size(gray.cols, gray.rows), 0, 0, cv::INTER_LINEAR);
    BinaryMask mask{gray.rows, gray.cols,
                    std::vector<uint8_t>(static_cast<size_t>(gray.rows) * gray.cols)};
    for (int i = 0; i < gray.rows; ++i)
      for (int j = 0; j < gray.cols; ++j)
        mask.v[static_cast<size_t>(i) * gray.cols + j] =
            native.at<double>(i, j) > threshold ? 1 : 0;
    std::string name = fs::path(path).stem().string() + "_mask.png";
    write_mask((fs::path(args.out_dir) / name).string(), mask);
    std::cout << "wrote " << name << "\n";
  }
  return 0;
}

int cmd_bench(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  reject_unknown_keys(cfg);
  echo_config(cfg, args.out_dir);
  BSNet model = build_model(cfg, args.seed);
  int n = static_cast<int>(cfg.get_int("bench.n", 20));
  int warmup = static_cast<int>(cfg.get_int("bench.warmup", 3));
  int side = static_cast<int>(cfg.get_int("bench.side", kDefaultInputSide));
  FpsReport r = bench_fps(model, n, warmup, side, args.seed);
  json j{{"images_per_second", r.images_per_second},
         {"seconds_per_image", r.seconds_per_image},
         {"n_images", r.n_images},
         {"warmup", r.warmup},
         {"side", r.side},
         {"device", r.device}};
  std::ofstream out(fs::path(args.out_dir) / "fps.json");
  out << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct AblateCell {
  std::string name;
  std::vector<std::string> overrides;
};

std::vector<AblateCell> ablate_grid(const std::string& grid) {
  std::vector<AblateCell> cells;
  if (grid == "modules") {
    cells = {{"baseline", {"net.dse_on=false", "net.mbg_on=false"}},
             {"dse", {"net.mbg_on=false"}},
             {"dse_mbg", {}}};
  } else if (grid == "branches") {
    cells = {{"both", {}},
             {"right_only", {"net.mbg_left_on=false"}},
             {"left_only", {"net.mbg_right_on=false"}}};
  } else if (grid == "sources") {
    for (const char* src : {"1", "2", "5"})
      for (const char* ex : {"canny", "sobel", "roberts"})
        cells.push_back({std::string("x") + src + "_" + ex,
                         {std::string("net.boundary_source=") + src,
                          std::string("train.boundary_gt=") + ex}});
  } else if (grid == "stages") {
    for (const char* st : {"3", "2", "1"})
      cells.push_back({std::string("stage") + st, {std::string("net.output_stage=") + st}});
  } else {
    throw std::runtime_error("ablate.grid must be modules|branches|sources|stages, got: " + grid);
  }
  return cells;
}

int cmd_ablate(const CommonArgs& args, const std::string& data_root) {
  Config base_cfg = resolve_config(args);
  reject_unknown_keys(base_cfg);
  echo_config(base_cfg, args.out_dir);
  std::string grid = base_cfg.get_str("ablate.grid", "modules");
  auto cells = ablate_grid(grid);

  auto train_samples = load_split(data_root, "train");
  auto test_samples = load_split(data_root, "test");

  std::ofstream table(fs::path(args.out_dir) / ("table_" + grid + ".csv"));
  table << "cell,dsc,sen,prec,s_alpha,e_phi,mae,hd\n";
  for (const auto& cell : cells) {
    fs::path cell_dir = fs::path(args.out_dir) / cell.name;
    fs::path done = cell_dir / "metrics.json";
    MetricReport r;
    if (fs::exists(done)) {  // resume: keep completed cells
      json j;
      std::ifstream(done.string()) >> j;
      r.mean.dsc = j["mean"]["dsc"];
      r.mean.sen = j["mean"]["sen"];
      r.mean.prec = j["mean"]["prec"];
      r.mean.s_alpha = j["mean"]["s_alpha"];
      r.mean.e_phi = j["mean"]["e_phi"];
      r.mean.mae = j["mean"]["mae"];
      r.mean.hd = j["mean"]["hd"];
      std::cout << cell.name << ": reusing completed cell\n";
    } else {
      Config cfg = resolve_config(args);
      cfg.apply_overrides(cell.overrides);
      echo_config(cfg, cell_dir.string());
      TrainConfig tc = train_config_from(cfg);
      BSNet model = build_model(cfg, args.seed);
      TrainResult tr = train(model, train_samples, tc, cell_dir.string());
      write_loss_curve_svg((cell_dir / "loss_curve.svg").string(), tr.steps);
      int side = static_cast<int>(cfg.get_int("train.input_side", kDefaultInputSide));
      r = eval_model_on_split(model, test_samples, side, cell_dir.string(),
                              cfg.get_double("eval.threshold", 0.5), false);
      write_report(r, cell_dir.string());
      std::cout << cell.name << ": dsc " << r.mean.dsc << "\n";
    }
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", cell.name.c_str(),
                  r.mean.dsc, r.mean.sen, r.mean.prec, r.mean.s_alpha, r.mean.e_phi, r.mean.mae,
                  r.mean.hd);
    table << row;
    table.flush();
  }
  std::cout << "wrote table_" << grid << ".csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bsnet: boundary-guided lung-infection segmentation"};
  app.require_subcommand(1);
  app.fallthrough();  // let --out/--set/... appear after the subcommand

  CommonArgs args;
  app.add_option("--config", args.config_path, "key=value config file");
  app.add_option("--set", args.sets, "override, e.g. --set train.epochs=5")->take_all();
  app.add_option("--out", args.out_dir, "output directory");
  app.add_option("--seed", args.seed, "run seed");
  app.add_flag("--deterministic", args.deterministic, "single-threaded deterministic mode");

  std::vector<std::string> raw_dirs, images;
  std::string data_root, weights, split = "test";

  auto* prepare = app.add_subcommand("prepare", "normalize raw datasets into a split");
  prepare->add_option("dirs", raw_dirs, "raw dirs with images/ and masks/")->required();

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", data_root, "prepared dataset root")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_cmd->add_option("--data", data_root, "prepared dataset root")->required();
  eval_cmd->add_option("--weights", weights, "checkpoint to load");
  eval_cmd->add_option("--split", split, "train or test");

  auto* infer_cmd = app.add_subcommand("infer", "segment individual slices");
  infer_cmd->add_option("images", images, "input images")->required();
  infer_cmd->add_option("--weights", weights, "checkpoint to load");

  auto* bench = app.add_subcommand("bench-fps", "measure single-image throughput");
  (void)bench;

  auto* ablate = app.add_subcommand("ablate", "run a toggle grid and emit a table");
  ablate->add_option("--data", data_root, "prepared dataset root")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) return cmd_prepare(args, raw_dirs);
    if (train_cmd->parsed()) return cmd_train(args, data_root);
    if (eval_cmd->parsed()) return cmd_eval(args, data_root, weights, split);
    if (infer_cmd->parsed()) return cmd_infer(args, images, weights);
    if (bench->parsed()) return cmd_bench(args);
    if (ablate->parsed()) return cmd_ablate(args, data_root);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
