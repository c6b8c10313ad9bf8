#pragma once

// Dataset ingest, boundary ground-truth derivation, preprocessing and
// training-time augmentation. All image I/O goes through OpenCV.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsnet/metrics.hpp"
#include "bsnet/nn.hpp"
#include "bsnet/tensor.hpp"

namespace bsnet {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int kDefaultInputSide = 352;
// ImageNet statistics; the backbone loads natural-image pretrained weights.
constexpr double kNormMean[3] = {0.485, 0.456, 0.406};
constexpr double kNormStd[3] = {0.229, 0.224, 0.225};

enum class BoundaryExtractor { canny, sobel, roberts, neighbor };

inline BoundaryExtractor boundary_extractor_from_string(const std::string& s) {
  if (s == "canny") return BoundaryExtractor::canny;
  if (s == "sobel") return BoundaryExtractor::sobel;
  if (s == "roberts") return BoundaryExtractor::roberts;
  if (s == "neighbor") return BoundaryExtractor::neighbor;
  throw std::invalid_argument("unknown boundary extractor: " + s);
}
inline std::string to_string(BoundaryExtractor e) {
  switch (e) {
    case BoundaryExtractor::canny: return "canny";
    case BoundaryExtractor::sobel: return "sobel";
    case BoundaryExtractor::roberts: return "roberts";
    default: return "neighbor";
  }
}

// ------------------------------------------------------------------- file IO

inline cv::Mat read_gray(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE | cv::IMREAD_ANYDEPTH);
  if (img.empty()) throw std::runtime_error("cannot read image: " + path);
  cv::Mat out;
  double maxv = img.depth() == CV_16U ? 65535.0 : 255.0;
  img.convertTo(out, CV_64F, 1.0 / maxv);
  return out;  // values in [0,1]
}

// Binarizes at 127/255; sets *warned when non-binary values were present.
inline BinaryMask read_mask(const std::string& path, bool* warned = nullptr) {
  cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw std::runtime_error("cannot read mask: " + path);
  if (warned) *warned = false;
  BinaryMask m{img.rows, img.cols, std::vector<uint8_t>(static_cast<size_t>(img.rows) * img.cols)};
  for (int i = 0; i < img.rows; ++i)
    for (int j = 0; j < img.cols; ++j) {
      uint8_t v = img.at<uint8_t>(i, j);
      if (v != 0 && v != 255 && warned) *warned = true;
      m.v[static_cast<size_t>(i) * img.cols + j] = v > 127 ? 1 : 0;
    }
  return m;
}

inline void write_mask(const std::string& path, const BinaryMask& m) {
  cv::Mat img(m.h, m.w, CV_8U);
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) img.at<uint8_t>(i, j) = m.at(i, j) ? 255 : 0;
  if (!cv::imwrite(path, img)) throw std::runtime_error("cannot write mask: " + path);
}

inline void write_prob_map(const std::string& path, const ProbMap& p) {
  cv::Mat img(p.h, p.w, CV_8U);
  for (int i = 0; i < p.h; ++i)
    for (int j = 0; j < p.w; ++j)
      img.at<uint8_t>(i, j) = static_cast<uint8_t>(std::lround(std::clamp(p.at(i, j), 0.0, 1.0) * 255.0));
  if (!cv::imwrite(path, img)) throw std::runtime_error("cannot write map: " + path);
}

inline ProbMap read_prob_map(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw std::runtime_error("cannot read map: " + path);
  ProbMap p{img.rows, img.cols, std::vector<double>(static_cast<size_t>(img.rows) * img.cols)};
  for (int i = 0; i < img.rows; ++i)
    for (int j = 0; j < img.cols; ++j)
      p.v[static_cast<size_t>(i) * img.cols + j] = img.at<uint8_t>(i, j) / 255.0;
  return p;
}

inline uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash missing file: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

// --------------------------------------------------------- boundary extract

inline BinaryMask extract_boundary_gt(const BinaryMask& mask, BoundaryExtractor extractor) {
  if (extractor == BoundaryExtractor::neighbor) return mask_boundary(mask);
  cv::Mat m(mask.h, mask.w, CV_8U);
  for (int i = 0; i < mask.h; ++i)
    for (int j = 0; j < mask.w; ++j) m.at<uint8_t>(i, j) = mask.at(i, j) ? 255 : 0;
  cv::Mat edges;
  switch (extractor) {
    case BoundaryExtractor::canny:
      cv::Canny(m, edges, 50, 150);
      break;
    case BoundaryExtractor::sobel: {
      cv::Mat gx, gy;
      cv::Sobel(m, gx, CV_32F, 1, 0, 3);
      cv::Sobel(m, gy, CV_32F, 0, 1, 3);
      cv::Mat mag;
      cv::magnitude(gx, gy, mag);
      cv::threshold(mag, mag, 254.0, 255.0, cv::THRESH_BINARY);
      mag.convertTo(edges, CV_8U);
      break;
    }
    case BoundaryExtractor::roberts: {
      cv::Mat k1 = (cv::Mat_<float>(2, 2) << 1, 0, 0, -1);
      cv::Mat k2 = (cv::Mat_<float>(2, 2) << 0, 1, -1, 0);
      cv::Mat g1, g2, mf;
      m.convertTo(mf, CV_32F);
      cv::filter2D(mf, g1, CV_32F, k1);
      cv::filter2D(mf, g2, CV_32F, k2);
      cv::Mat mag = cv::abs(g1) + cv::abs(g2);
      cv::threshold(mag, mag, 254.0, 255.0, cv::THRESH_BINARY);
      mag.convertTo(edges, CV_8U);
      break;
    }
    default:
      break;
  }
  BinaryMask out{mask.h, mask.w, std::vector<uint8_t>(mask.size())};
  bool any = false;
  for (int i = 0; i < mask.h; ++i)
    for (int j = 0; j < mask.w; ++j) {
      uint8_t v = edges.at<uint8_t>(i, j) > 0 ? 1 : 0;
      out.v[static_cast<size_t>(i) * mask.w + j] = v;
      any = any || v;
    }
  // operators that miss frame-touching foreground still need a boundary on
  // a full-frame mask; fall back to the neighbor rule there
  if (!any) {
    bool has_fg = false;
    for (uint8_t v : mask.v) has_fg = has_fg || v;
    if (has_fg) return mask_boundary(mask);
  }
  return out;
}

// ---------------------------------------------------------------- preprocess

// Resize to side x side (bilinear), replicate to 3 channels, normalize.
inline Tensor preprocess(const cv::Mat& gray01, int side = kDefaultInputSide) {
  cv::Mat r;
  cv::resize(gray01, r, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
  Tensor t = Tensor::zeros({1, 3, side, side});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j)
        t.data()[(static_cast<int64_t>(c) * side + i) * side + j] =
            (r.at<double>(i, j) - kNormMean[c]) / kNormStd[c];
  return t;
}

inline Tensor preprocess_file(const std::string& path, int side = kDefaultInputSide) {
  return preprocess(read_gray(path), side);
}

// ---------------------------------------------------------------- records

struct SampleRecord {
  std::string name;
  cv::Mat image;  // grayscale in [0,1], CV_64F
  BinaryMask mask;
  BinaryMask boundary;
  std::string source_id;
};

struct AugmentConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.0;  // off by default
};

inline void flip_mask_h(BinaryMask& m) {
  for (int i = 0; i < m.h; ++i)
    std::reverse(m.v.begin() + static_cast<int64_t>(i) * m.w,
                 m.v.begin() + static_cast<int64_t>(i + 1) * m.w);
}
inline void flip_mask_v(BinaryMask& m) {
  for (int i = 0; i < m.h / 2; ++i)
    std::swap_ranges(m.v.begin() + static_cast<int64_t>(i) * m.w,
                     m.v.begin() + static_cast<int64_t>(i + 1) * m.w,
                     m.v.begin() + static_cast<int64_t>(m.h - 1 - i) * m.w);
}

// Joint geometric augmentation of image, mask and boundary.
inline SampleRecord augment(SampleRecord s, const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < cfg.hflip_prob) {
    cv::flip(s.image, s.image, 1);
    flip_mask_h(s.mask);
    flip_mask_h(s.boundary);
  }
  if (cfg.vflip_prob > 0.0 && u(rng) < cfg.vflip_prob) {
    cv::flip(s.image, s.image, 0);
    flip_mask_v(s.mask);
    flip_mask_v(s.boundary);
  }
  return s;
}

// Side length for a multi-scale step: round(S*scale/32)*32.
inline int multiscale_side(int base_side, double scale) {
  int side = static_cast<int>(std::llround(base_side * scale / 32.0)) * 32;
  if (side < 32) throw std::invalid_argument("multiscale_side: resulting side < 32");
  return side;
}

struct Batch {
  Tensor images;      // (N,3,side,side) normalized
  Tensor masks;       // (N,1,side,side) binary
  Tensor boundaries;  // (N,1,side,side) binary
};

inline BinaryMask resize_mask_nearest(const BinaryMask& m, int side) {
  cv::Mat src(m.h, m.w, CV_8U);
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) src.at<uint8_t>(i, j) = m.at(i, j);
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(side, side), 0, 0, cv::INTER_NEAREST);
  BinaryMask out{side, side, std::vector<uint8_t>(static_cast<size_t>(side) * side)};
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) out.v[static_cast<size_t>(i) * side + j] = dst.at<uint8_t>(i, j);
  return out;
}

inline Batch make_batch(const std::vector<SampleRecord>& samples, int side,
                        BoundaryExtractor extractor = BoundaryExtractor::neighbor) {
  int64_t n = static_cast<int64_t>(samples.size());
  Batch b;
  b.images = Tensor::zeros({n, 3, side, side});
  b.masks = Tensor::zeros({n, 1, side, side});
  b.boundaries = Tensor::zeros({n, 1, side, side});
  for (int64_t k = 0; k < n; ++k) {
    Tensor img = preprocess(samples[static_cast<size_t>(k)].image, side);
    std::copy(img.data(), img.data() + img.numel(), b.images.data() + k * 3 * side * side);
    BinaryMask m = resize_mask_nearest(samples[static_cast<size_t>(k)].mask, side);
    // the boundary must stay one pixel wide at the working resolution,
    // so re-derive it from the resized mask rather than resizing the band
    BinaryMask bd = samples[static_cast<size_t>(k)].boundary;
    if (bd.h != side || bd.w != side) bd = extract_boundary_gt(m, extractor);
    for (int64_t i = 0; i < static_cast<int64_t>(side) * side; ++i) {
      b.masks.data()[k * side * side + i] = m.v[static_cast<size_t>(i)];
      b.boundaries.data()[k * side * side + i] = bd.v[static_cast<size_t>(i)];
    }
  }
  return b;
}

// ------------------------------------------------------------------- ingest

struct SplitSpec {
  int train_count = -1;          // -1: use train_fraction
  double train_fraction = 718.0 / 1018.0;
  uint64_t seed = 0;
};

struct ManifestEntry {
  std::string name, split, source_id;
  uint64_t image_hash = 0, mask_hash = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int64_t train_count = 0, test_count = 0;
  uint64_t seed = 0;
  std::string extractor;
  uint64_t content_hash = 0;
  std::vector<std::string> excluded;  // images without masks etc.
  int64_t warning_count = 0;
};

inline json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["train_count"] = m.train_count;
  j["test_count"] = m.test_count;
  j["seed"] = m.seed;
  j["boundary_extractor"] = m.extractor;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(m.content_hash));
  j["content_hash"] = buf;
  j["warning_count"] = m.warning_count;
  j["excluded"] = m.excluded;
  json files = json::array();
  for (const auto& e : m.entries) {
    files.push_back({{"name", e.name},
                     {"split", e.split},
                     {"source", e.source_id},
                     {"image_hash", e.image_hash},
                     {"mask_hash", e.mask_hash}});
  }
  j["files"] = files;
  return j;
}

// Normalizes raw dirs (each holding images/ and masks/ with matching names)
// into <out_root>/<split>/{images,masks,boundaries}/ and writes manifest.json.
inline DatasetManifest ingest(const std::vector<std::string>& raw_dirs,
                              const std::string& out_root, const SplitSpec& spec,
                              BoundaryExtractor extractor = BoundaryExtractor::canny) {
  struct Pair {
    std::string name, image_path, mask_path, source;
  };
  std::vector<Pair> pairs;
  DatasetManifest manifest;
  manifest.seed = spec.seed;
  manifest.extractor = to_string(extractor);
  for (const auto& dir : raw_dirs) {
    fs::path images = fs::path(dir) / "images";
    fs::path masks = fs::path(dir) / "masks";
    if (!fs::is_directory(images) || !fs::is_directory(masks))
      throw std::runtime_error("raw dir must contain images/ and masks/: " + dir);
    std::string source = fs::path(dir).filename().string();
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(images))
      if (e.is_regular_file()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
      fs::path mp = masks / n;
      if (!fs::exists(mp)) {
        manifest.excluded.push_back(source + "/" + n);
        ++manifest.warning_count;
        continue;
      }
      pairs.push_back({source + "_" + n, (images / n).string(), mp.string(), source});
    }
  }
  if (pairs.empty()) throw std::runtime_error("ingest: no image/mask pairs found");

  // deterministic split: sort by name, shuffle with the split seed
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.name < b.name; });
  Rng rng(spec.seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  int64_t total = static_cast<int64_t>(pairs.size());
  int64_t n_train = spec.train_count >= 0
                        ? spec.train_count
                        : static_cast<int64_t>(std::llround(spec.train_fraction * static_cast<double>(total)));
  n_train = std::clamp<int64_t>(n_train, 0, total);

  for (const char* split : {"train", "test"})
    for (const char* sub : {"images", "masks", "boundaries"})
      fs::create_directories(fs::path(out_root) / split / sub);

  uint64_t chash = 1469598103934665603ull;
  auto mix = [&chash](uint64_t h) {
    for (int b = 0; b < 8; ++b) {
      chash ^= (h >> (8 * b)) & 0xff;
      chash *= 1099511628211ull;
    }
  };
  for (int64_t i = 0; i < total; ++i) {
    const Pair& p = pairs[static_cast<size_t>(i)];
    std::string split = i < n_train ? "train" : "test";
    fs::path base = fs::path(out_root) / split;
    std::string out_name = fs::path(p.name).stem().string() + ".png";
    cv::Mat gray = read_gray(p.image_path);
    cv::Mat img8;
    gray.convertTo(img8, CV_8U, 255.0);
    cv::imwrite((base / "images" / out_name).string(), img8);
    bool warned = false;
    BinaryMask mask = read_mask(p.mask_path, &warned);
    if (warned) ++manifest.warning_count;
    write_mask((base / "masks" / out_name).string(), mask);
    write_mask((base / "boundaries" / out_name).string(), extract_boundary_gt(mask, extractor));
    ManifestEntry e;
    e.name = out_name;
    e.split = split;
    e.source_id = p.source;
    e.image_hash = fnv1a_file((base / "images" / out_name).string());
    e.mask_hash = fnv1a_file((base / "masks" / out_name).string());
    mix(e.image_hash);
    mix(e.mask_hash);
    manifest.entries.push_back(std::move(e));
    (split == "train" ? manifest.train_count : manifest.test_count)++;
  }
  manifest.content_hash = chash;
  std::ofstream out(fs::path(out_root) / "manifest.json");
  out << manifest_to_json(manifest).dump(2) << "\n";
  return manifest;
}

inline std::vector<SampleRecord> load_split(const std::string& root, const std::string& split) {
  fs::path base = fs::path(root) / split;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(base / "images"))
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::vector<SampleRecord> out;
  for (const auto& n : names) {
    SampleRecord r;
    r.name = n;
    r.image = read_gray((base / "images" / n).string());
    r.mask = read_mask((base / "masks" / n).string());
    fs::path bp = base / "boundaries" / n;
    r.boundary = fs::exists(bp) ? read_mask(bp.string())
                                : extract_boundary_gt(r.mask, BoundaryExtractor::neighbor);
    out.push_back(std::move(r));
  }
  return out;
}

// --------------------------------------------------------- dataset evaluate

inline MetricReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir,
                                     double threshold = 0.5) {
  auto list_pngs = [](const std::string& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
  };
  auto preds = list_pngs(pred_dir);
  auto gts = list_pngs(gt_dir);
  MetricReport r;
  std::vector<std::string> matched;
  std::set_intersection(preds.begin(), preds.end(), gts.begin(), gts.end(),
                        std::back_inserter(matched));
  for (const auto& n : preds)
    if (!std::binary_search(gts.begin(), gts.end(), n)) {
      r.warnings.push_back("prediction without ground truth: " + n);
      ++r.warning_count;
    }
  for (const auto& n : gts)
    if (!std::binary_search(preds.begin(), preds.end(), n)) {
      r.warnings.push_back("ground truth without prediction: " + n);
      ++r.warning_count;
    }
  auto t0 = std::chrono::steady_clock::now();
  for (const auto& n : matched) {
    ProbMap pred = read_prob_map((fs::path(pred_dir) / n).string());
    BinaryMask gt = read_mask((fs::path(gt_dir) / n).string());
    if (pred.h != gt.h || pred.w != gt.w) {
      r.warnings.push_back("size mismatch, skipped: " + n);
      ++r.warning_count;
      continue;
    }
    r.per_image.push_back(compute_image_metrics(n, pred, gt, threshold));
  }
  auto t1 = std::chrono::steady_clock::now();
  finalize_report(r);
  double secs = std::chrono::duration<double>(t1 - t0).count();
  r.images_per_second = secs > 0 ? static_cast<double>(r.per_image.size()) / secs : 0.0;
  return r;
}

inline json report_to_json(const MetricReport& r) {
  json j;
  auto row = [](const ImageMetrics& m) {
    return json{{"name", m.name},   {"dsc", m.dsc},     {"sen", m.sen}, {"prec", m.prec},
                {"s_alpha", m.s_alpha}, {"e_phi", m.e_phi}, {"mae", m.mae}, {"hd", m.hd}};
  };
  json per = json::array();
  for (const auto& m : r.per_image) per.push_back(row(m));
  j["per_image"] = per;
  j["mean"] = row(r.mean);
  j["image_count"] = r.image_count;
  j["warning_count"] = r.warning_count;
  j["warnings"] = r.warnings;
  j["images_per_second"] = r.images_per_second;
  return j;
}

}  // namespace bsnet
