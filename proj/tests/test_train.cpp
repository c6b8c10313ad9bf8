// Optimizer behaviour, deterministic training, checkpoint round-trips and
// the throughput benchmark.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "bsnet/config.hpp"
#include "bsnet/train.hpp"

using namespace bsnet;
namespace stdfs = std::filesystem;

namespace {

std::vector<SampleRecord> toy_samples(int count, int side = 48) {
  std::vector<SampleRecord> out;
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<int> pos(6, side - 20);
  for (int k = 0; k < count; ++k) {
    SampleRecord s;
    s.name = "toy" + std::to_string(k);
    int a = pos(rng), b = a + 12;
    s.mask = BinaryMask{side, side, std::vector<uint8_t>(static_cast<size_t>(side) * side, 0)};
    s.image = cv::Mat(side, side, CV_64F, cv::Scalar(0.2));
    for (int i = a; i < b; ++i)
      for (int j = a; j < b; ++j) {
        s.mask.v[static_cast<size_t>(i) * side + j] = 1;
        s.image.at<double>(i, j) = 0.9;  // bright lesion on dark background
      }
    s.boundary = extract_boundary_gt(s.mask, BoundaryExtractor::neighbor);
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig fast_cfg(int steps) {
  TrainConfig cfg;
  cfg.net.backbone.variant = BackboneVariant::tiny;
  cfg.net.backbone.channels = 16;
  cfg.epochs = 1000;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.input_side = 64;
  cfg.multiscale = false;
  cfg.augment.hflip_prob = 0.0;
  cfg.max_steps = steps;
  return cfg;
}

}  // namespace

TEST_CASE("adam minimizes a quadratic") {
  Tensor w = Tensor::from({4}, {4.0, -3.0, 2.0, -1.0});
  w.set_requires_grad(true);
  Adam opt({{"w", w}}, 0.1);
  for (int it = 0; it < 400; ++it) {
    opt.zero_grad();
    Tensor loss = sum_all(mul(w, w));
    loss.backward();
    opt.step();
  }
  for (int64_t k = 0; k < 4; ++k) REQUIRE(std::fabs(w.data()[k]) < 1e-3);
}

TEST_CASE("gradient clipping caps the global norm") {
  Tensor w = Tensor::from({2}, {1.0, 1.0});
  w.set_requires_grad(true);
  Adam opt({{"w", w}}, 0.1);
  Tensor loss = sum_all(mul_scalar(w, 100.0));
  loss.backward();
  opt.clip_grad_norm(1.0);
  double norm = 0;
  for (double g : w.grad()) norm += g * g;
  REQUIRE_THAT(std::sqrt(norm), Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto samples = toy_samples(4);
  stdfs::path root = stdfs::temp_directory_path() / "bsnet_det";
  stdfs::remove_all(root);
  TrainConfig cfg = fast_cfg(6);

  auto run = [&](const std::string& name) {
    Rng rng(cfg.seed);
    BSNet net(cfg.net, rng);
    return train(net, samples, cfg, (root / name).string());
  };
  TrainResult a = run("a");
  TrainResult b = run("b");
  REQUIRE(a.steps.size() == b.steps.size());
  for (size_t i = 0; i < a.steps.size(); ++i) {
    REQUIRE(a.steps[i].total == b.steps[i].total);
    REQUIRE(a.steps[i].boundary == b.steps[i].boundary);
  }
  REQUIRE(stdfs::exists(root / "a" / "steps.jsonl"));
  REQUIRE(stdfs::exists(root / "a" / "last.ckpt"));
  stdfs::remove_all(root);
}

TEST_CASE("loss log additivity holds per step") {
  auto samples = toy_samples(4);
  stdfs::path root = stdfs::temp_directory_path() / "bsnet_add";
  stdfs::remove_all(root);
  TrainConfig cfg = fast_cfg(3);
  Rng rng(1);
  BSNet net(cfg.net, rng);
  TrainResult r = train(net, samples, cfg, root.string());
  for (const auto& s : r.steps)
    REQUIRE_THAT(s.total, Catch::Matchers::WithinRel(s.wbce_sum + s.wiou_sum + s.boundary, 1e-9));
  stdfs::remove_all(root);
}

TEST_CASE("checkpoint round-trip reproduces validation metrics") {
  auto samples = toy_samples(4);
  stdfs::path root = stdfs::temp_directory_path() / "bsnet_rt";
  stdfs::remove_all(root);
  TrainConfig cfg = fast_cfg(5);
  Rng rng(2);
  BSNet net(cfg.net, rng);
  TrainResult r = train(net, samples, cfg, root.string());

  MetricReport before = validate(net, samples, cfg.input_side);

  Rng rng2(777);  // a fresh differently-initialized model
  BSNet net2(cfg.net, rng2);
  auto entries = load_checkpoint(r.final_checkpoint);
  auto state = net2.named_state();
  apply_checkpoint(state, entries, "");
  MetricReport after = validate(net2, samples, cfg.input_side);
  REQUIRE(after.mean.dsc == before.mean.dsc);
  REQUIRE(after.mean.mae == before.mean.mae);
  REQUIRE(after.mean.hd == before.mean.hd);
  stdfs::remove_all(root);
}

TEST_CASE("train writes per-epoch checkpoints and validation rows") {
  auto samples = toy_samples(2);
  stdfs::path root = stdfs::temp_directory_path() / "bsnet_ep";
  stdfs::remove_all(root);
  TrainConfig cfg = fast_cfg(-1);
  cfg.epochs = 2;
  cfg.batch_size = 2;
  Rng rng(3);
  BSNet net(cfg.net, rng);
  TrainResult r = train(net, samples, cfg, root.string(), &samples);
  REQUIRE(r.epochs_run == 2);
  REQUIRE(stdfs::exists(root / "epoch_001.ckpt"));
  REQUIRE(stdfs::exists(root / "epoch_002.ckpt"));
  REQUIRE(stdfs::exists(root / "best_val.ckpt"));
  std::ifstream csv(root / "epochs.csv");
  std::string header;
  std::getline(csv, header);
  REQUIRE(header == "epoch,mean_total,val_dsc,val_mae");
  stdfs::remove_all(root);
}

TEST_CASE("config parsing, overrides and echo") {
  stdfs::path root = stdfs::temp_directory_path() / "bsnet_cfgp";
  stdfs::create_directories(root);
  {
    std::ofstream out(root / "run.cfg");
    out << "# comment line\n";
    out << "train.learning_rate = 1e-4\n";
    out << "net.backbone = tiny   # trailing comment\n";
    out << "train.scales = 0.75,1.0,1.25\n";
    out << "train.deterministic = true\n";
  }
  Config c = Config::load((root / "run.cfg").string());
  REQUIRE(c.get_double("train.learning_rate", 0) == 1e-4);
  REQUIRE(c.get_str("net.backbone", "") == "tiny");
  REQUIRE(c.get_bool("train.deterministic", false));
  REQUIRE(c.get_doubles("train.scales", {}).size() == 3);
  c.apply_overrides({"train.learning_rate=5e-5"});
  REQUIRE(c.get_double("train.learning_rate", 0) == 5e-5);
  REQUIRE_THROWS(c.apply_overrides({"not-an-assignment"}));
  REQUIRE(c.dump().find("train.learning_rate = 5e-5") != std::string::npos);
  stdfs::remove_all(root);
}

TEST_CASE("bench fps reports positive throughput with device metadata") {
  NetConfig cfg;
  cfg.backbone.variant = BackboneVariant::tiny;
  cfg.backbone.channels = 16;
  Rng rng(4);
  BSNet net(cfg, rng);
  FpsReport r = bench_fps(net, 3, 1, 64);
  REQUIRE(r.images_per_second > 0.0);
  REQUIRE(r.n_images == 3);
  REQUIRE(r.device.rfind("cpu:", 0) == 0);
  REQUIRE_THAT(r.seconds_per_image * r.images_per_second, Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("train config validation") {
  TrainConfig cfg = fast_cfg(1);
  cfg.input_side = 60;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = fast_cfg(1);
  cfg.learning_rate = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}
