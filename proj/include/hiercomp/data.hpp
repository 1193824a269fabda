#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "binary_io.hpp"
#include "digest.hpp"
#include "png.hpp"
#include "random.hpp"
#include "scramble.hpp"
#include "tensor.hpp"

namespace hiercomp {

inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kImageValues = 3 * kImagePixels;
inline constexpr std::size_t kNumClasses = 10;
inline constexpr std::size_t kCifarRecordBytes = 1 + kImageValues;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Per-channel mean. Integer sums are exact, so the result is bitwise
// independent of pixel order.
inline std::array<float, 3> color_mean(std::span<const std::uint8_t> planar) {
  const std::size_t hw = planar.size() / 3;
  std::array<float, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += planar[c * hw + p];
    out[c] = static_cast<float>(static_cast<double>(s) / (255.0 * static_cast<double>(hw)));
  }
  return out;
}

// Same for float images; double accumulation in index order.
inline std::array<double, 3> color_mean(const Tensor<float>& chw) {
  const std::size_t hw = chw.size() / 3;
  std::array<double, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += chw[c * hw + p];
    out[c] = s / static_cast<double>(hw);
  }
  return out;
}

struct LabeledImage {
  Tensor<float> pixels;  // [3 x 32 x 32] in [0,1]
  int class_label = 0;
  std::array<float, 3> color_label{};
};

// Images stored as bytes, N x 3072, planar R,G,B as in the CIFAR records.
struct RawSplit {
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * kImageValues, kImageValues);
  }
  void push(std::span<const std::uint8_t> planar, std::uint8_t label) {
    pixels.insert(pixels.end(), planar.begin(), planar.end());
    labels.push_back(label);
  }
  RawSplit head(std::size_t n) const {
    n = std::min(n, size());
    return {std::vector<std::uint8_t>(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * kImageValues)),
            std::vector<std::uint8_t>(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n))};
  }
};

inline Tensor<float> to_float_image(std::span<const std::uint8_t> planar) {
  Tensor<float> t({3, kImageSide, kImageSide});
  for (std::size_t i = 0; i < planar.size(); ++i) t[i] = static_cast<float>(planar[i]) / 255.0f;
  return t;
}

// ---- CIFAR-10 binary version ---------------------------------------------

inline RawSplit read_cifar_batch(std::span<const std::uint8_t> bytes, std::string_view source = "cifar") {
  RawSplit out;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  if (bytes.size() % kCifarRecordBytes != 0)
    throw DataError(std::string(source) + ": truncated record at byte offset " +
                    std::to_string(n * kCifarRecordBytes) + " (" + std::to_string(bytes.size()) + " bytes total)");
  out.pixels.reserve(n * kImageValues);
  out.labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kCifarRecordBytes;
    if (bytes[off] >= kNumClasses)
      throw DataError(std::string(source) + ": label " + std::to_string(bytes[off]) + " at byte offset " +
                      std::to_string(off));
    out.push(bytes.subspan(off + 1, kImageValues), bytes[off]);
  }
  return out;
}

inline std::vector<std::uint8_t> write_cifar_batch(const RawSplit& split) {
  std::vector<std::uint8_t> out;
  out.reserve(split.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < split.size(); ++i) {
    out.push_back(split.labels[i]);
    auto img = split.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

inline constexpr std::array<const char*, 5> kCifarTrainFiles = {"data_batch_1.bin", "data_batch_2.bin",
                                                                 "data_batch_3.bin", "data_batch_4.bin",
                                                                 "data_batch_5.bin"};
inline constexpr const char* kCifarTestFile = "test_batch.bin";

struct CifarOptions {
  std::size_t records_per_file = 10000;
  std::size_t train_limit = 50000;
  std::size_t test_limit = 10000;
};

struct CifarData {
  RawSplit train;
  RawSplit test;
};

// Accepts the extracted directory or its parent holding cifar-10-batches-bin.
inline std::filesystem::path resolve_cifar_dir(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / kCifarTestFile)) return dir;
  if (std::filesystem::exists(dir / "cifar-10-batches-bin" / kCifarTestFile)) return dir / "cifar-10-batches-bin";
  throw DataError("cifar: " + (dir / kCifarTestFile).string() + " not found");
}

inline CifarData load_cifar10(const std::filesystem::path& dir, const CifarOptions& opt = {}) {
  const auto root = resolve_cifar_dir(dir);
  auto load = [&](const char* name, std::size_t limit, RawSplit& into) {
    if (into.size() >= limit) return;
    const auto path = root / name;
    if (!std::filesystem::exists(path)) throw DataError("cifar: missing " + path.string());
    const auto bytes = read_file(path.string());
    RawSplit part = read_cifar_batch(bytes, path.string());
    if (part.size() != opt.records_per_file)
      throw DataError("cifar: " + path.string() + " holds " + std::to_string(part.size()) + " records, expected " +
                      std::to_string(opt.records_per_file));
    part = part.head(limit - into.size());
    into.pixels.insert(into.pixels.end(), part.pixels.begin(), part.pixels.end());
    into.labels.insert(into.labels.end(), part.labels.begin(), part.labels.end());
  };
  CifarData out;
  for (const char* f : kCifarTrainFiles) load(f, opt.train_limit, out.train);
  load(kCifarTestFile, opt.test_limit, out.test);
  return out;
}

inline void save_cifar10(const std::filesystem::path& dir, const CifarData& data, std::size_t records_per_file) {
  std::filesystem::create_directories(dir);
  if (data.train.size() != records_per_file * kCifarTrainFiles.size() || data.test.size() != records_per_file)
    throw DataError("save_cifar10: split sizes do not fill the files");
  for (std::size_t f = 0; f < kCifarTrainFiles.size(); ++f) {
    RawSplit part;
    for (std::size_t i = f * records_per_file; i < (f + 1) * records_per_file; ++i)
      part.push(data.train.image(i), data.train.labels[i]);
    write_file((dir / kCifarTrainFiles[f]).string(), write_cifar_batch(part));
  }
  write_file((dir / kCifarTestFile).string(), write_cifar_batch(data.test));
}

// Class-structured stand-in for CIFAR-10: each class owns a small oriented
// stripe motif stamped at random positions over a tinted noisy background.
// Local structure carries the class, so scrambling hurts local models on it.
inline RawSplit synthetic_split(std::size_t n, std::uint64_t seed) {
  RawSplit out;
  out.pixels.reserve(n * kImageValues);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, i));
    const auto label = static_cast<std::uint8_t>(uniform_index(rng, kNumClasses));
    const double angle = 3.14159265358979 * static_cast<double>(label % 5) / 5.0;
    const double freq = label < 5 ? 0.9 : 1.8;
    std::array<double, 3> tint{};
    for (auto& t : tint) t = uniform(rng, 0.25, 0.75);
    std::vector<std::uint8_t> img(kImageValues);
    std::vector<double> motif(kImagePixels, 0.0);
    for (int stamp = 0; stamp < 4; ++stamp) {
      const auto cy = static_cast<double>(uniform_index(rng, kImageSide));
      const auto cx = static_cast<double>(uniform_index(rng, kImageSide));
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double r2 = dx * dx + dy * dy;
          if (r2 > 25.0) continue;
          const double u = dx * std::cos(angle) + dy * std::sin(angle);
          motif[y * kImageSide + x] = 0.45 * std::cos(freq * u);
        }
    }
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < kImagePixels; ++p) {
        const double v = tint[c] + motif[p] + uniform(rng, -0.08, 0.08);
        img[c * kImagePixels + p] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    out.push(img, label);
  }
  return out;
}

// ---- tasks ----------------------------------------------------------------

enum class Task : std::uint8_t { ObjectRecognition, StylizedObjectRecognition, TexturePerception, ColorEstimation };
enum class Split : std::uint8_t { Train, Test };

inline constexpr std::array<Task, 4> kAllTasks = {Task::ObjectRecognition, Task::StylizedObjectRecognition,
                                                  Task::TexturePerception, Task::ColorEstimation};

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::ObjectRecognition: return "object";
    case Task::StylizedObjectRecognition: return "stylized";
    case Task::TexturePerception: return "texture";
    case Task::ColorEstimation: return "color";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  for (Task t : kAllTasks)
    if (task_name(t) == s) return t;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (object|stylized|texture|color)");
}

inline std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

inline bool is_classification(Task t) { return t != Task::ColorEstimation; }
inline std::size_t task_output_dim(Task t) { return is_classification(t) ? kNumClasses : 3; }
inline bool needs_generated_images(Task t) {
  return t == Task::TexturePerception || t == Task::StylizedObjectRecognition;
}

struct TaskDataset {
  Task task = Task::ObjectRecognition;
  Split split = Split::Train;
  ScrambleSpec scramble;
  std::vector<std::uint8_t> pixels;  // scrambled, N x 3072
  std::vector<int> labels;
  std::vector<std::array<float, 3>> colors;  // from the unscrambled pixels

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * kImageValues, kImageValues);
  }
  LabeledImage item(std::size_t i) const { return {to_float_image(image(i)), labels.at(i), colors.at(i)}; }
};

// ---- generated image sets (texturized / stylized) -------------------------

struct GeneratedFile {
  std::filesystem::path path;
  int class_label = 0;
};

// Index of `<split>_<index>_<class>.png` files in `dir`.
inline std::map<std::size_t, GeneratedFile> scan_generated(const std::filesystem::path& dir, Split split) {
  if (!std::filesystem::is_directory(dir)) throw DataError("generated images: missing directory " + dir.string());
  const std::string prefix = std::string(split_name(split)) + "_";
  std::map<std::size_t, GeneratedFile> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (!name.starts_with(prefix) || !name.ends_with(".png")) continue;
    const std::string stem = name.substr(prefix.size(), name.size() - prefix.size() - 4);
    const auto us = stem.find('_');
    if (us == std::string::npos) throw DataError("generated images: bad file name " + name);
    try {
      std::size_t used = 0;
      const auto index = std::stoull(stem.substr(0, us), &used);
      const int label = std::stoi(stem.substr(us + 1));
      if (used != us || label < 0 || label >= static_cast<int>(kNumClasses)) throw std::invalid_argument(name);
      out[index] = {entry.path(), label};
    } catch (const std::logic_error&) {
      throw DataError("generated images: bad file name " + name);
    }
  }
  return out;
}

// manifest.json: {"mode", "seed", "files": {"<name>.png": "<sha256 hex>", ...}}
inline nlohmann::json load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("generated images: missing " + path.string());
  try {
    auto j = nlohmann::json::parse(in);
    if (!j.contains("files") || !j["files"].is_object()) throw DataError("manifest: no 'files' object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest: " + std::string(e.what()));
  }
}

inline RawSplit load_generated(const std::filesystem::path& dir, Split split, const RawSplit& source) {
  const auto files = scan_generated(dir, split);
  const auto manifest = load_manifest(dir);
  const auto& hashes = manifest["files"];
  RawSplit out;
  out.pixels.reserve(source.size() * kImageValues);
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto it = files.find(i);
    if (it == files.end())
      throw DataError("generated images: no " + std::string(split_name(split)) + " image with index " +
                      std::to_string(i) + " in " + dir.string());
    const auto& f = it->second;
    const std::string name = f.path.filename().string();
    if (f.class_label != source.labels[i])
      throw DataError("generated images: " + name + " labelled " + std::to_string(f.class_label) +
                      ", source image has class " + std::to_string(source.labels[i]));
    const auto bytes = read_file(f.path.string());
    if (!hashes.contains(name)) throw DataError("manifest: no entry for " + name);
    if (hashes[name].get<std::string>() != sha256_hex(bytes)) throw DataError("manifest: hash mismatch for " + name);
    const Image8 img = read_png_rgb(f.path.string());
    if (img.width != kImageSide || img.height != kImageSide)
      throw DataError("generated images: " + name + " is not 32x32");
    out.push(img.planar, source.labels[i]);
  }
  return out;
}

// Scrambles once and stores the result; color targets come from the
// unscrambled pixels.
inline TaskDataset make_task_dataset(Task task, Split split, const RawSplit& raw, const ScrambleSpec& scramble,
                                     const std::filesystem::path& generated_dir = {}) {
  scramble.validate();
  if (scramble.image_side != kImageSide) throw std::invalid_argument("make_task_dataset: scramble side must be 32");
  RawSplit source_storage;
  const RawSplit* source = &raw;
  if (needs_generated_images(task)) {
    if (generated_dir.empty())
      throw DataError(std::string(task_name(task)) + " task needs a generated image directory");
    source_storage = load_generated(generated_dir, split, raw);
    source = &source_storage;
  }
  const PermutationMap map = build_permutation(scramble);
  TaskDataset ds;
  ds.task = task;
  ds.split = split;
  ds.scramble = scramble;
  ds.pixels.resize(source->pixels.size());
  ds.labels.reserve(source->size());
  ds.colors.reserve(source->size());
  for (std::size_t i = 0; i < source->size(); ++i) {
    const auto src = source->image(i);
    std::uint8_t* dst = ds.pixels.data() + i * kImageValues;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < kImagePixels; ++p) dst[c * kImagePixels + map[p]] = src[c * kImagePixels + p];
    ds.labels.push_back(source->labels[i]);
    ds.colors.push_back(color_mean(src));
  }
  return ds;
}

// ---- augmentation ---------------------------------------------------------

struct AugmentConfig {
  std::array<double, 2> crop_area_ratio{0.7, 1.0};
  double flip_probability = 0.5;
  std::array<float, 3> normalize_mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> normalize_std{0.229f, 0.224f, 0.225f};

  void validate() const {
    const auto [lo, hi] = crop_area_ratio;
    if (!(lo > 0 && lo <= hi && hi <= 1)) throw std::invalid_argument("augment: crop area ratio must satisfy 0 < lo <= hi <= 1");
    if (!(flip_probability >= 0 && flip_probability <= 1))
      throw std::invalid_argument("augment: flip probability must be in [0,1]");
    for (float s : normalize_std)
      if (!(s > 0)) throw std::invalid_argument("augment: normalization std must be positive");
  }
};

// In place on [3 x H x W] (or a batch of them).
inline void normalize(Tensor<float>& x, const AugmentConfig& cfg) {
  const std::size_t hw = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
  for (std::size_t k = 0; k < x.size() / hw; ++k) {
    const std::size_t c = k % 3;
    float* p = x.data() + k * hw;
    for (std::size_t i = 0; i < hw; ++i) p[i] = (p[i] - cfg.normalize_mean[c]) / cfg.normalize_std[c];
  }
}

inline void denormalize(Tensor<float>& x, const AugmentConfig& cfg) {
  const std::size_t hw = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
  for (std::size_t k = 0; k < x.size() / hw; ++k) {
    const std::size_t c = k % 3;
    float* p = x.data() + k * hw;
    for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * cfg.normalize_std[c] + cfg.normalize_mean[c];
  }
}

// Square crop with area fraction ~ U[crop_area_ratio], bilinear resize back
// (half-pixel centers), optional horizontal flip, then normalization.
inline Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& cfg, Rng& rng) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
    throw ShapeError("augment: expected [3xSxS], got " + to_string(image.shape()));
  const std::size_t n = image.dim(1);
  const double side_n = static_cast<double>(n);
  const double area = uniform(rng, cfg.crop_area_ratio[0], cfg.crop_area_ratio[1]);
  const double s = side_n * std::sqrt(area);
  const double y0 = uniform(rng, 0.0, side_n - s);
  const double x0 = uniform(rng, 0.0, side_n - s);
  const bool flip = bernoulli(rng, cfg.flip_probability);
  const double scale = s / side_n;

  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [&](double origin) {
    std::vector<Tap> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      double src = origin + (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, side_n - 1);
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, n - 1);
      out[i] = {i0, i1, src - static_cast<double>(i0)};
    }
    return out;
  };
  const auto ty = taps(y0);
  const auto tx = taps(x0);

  Tensor<float> out(image.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    const float* src = image.data() + c * n * n;
    float* dst = out.data() + c * n * n;
    for (std::size_t y = 0; y < n; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < n; ++x) {
        const auto& b = tx[x];
        const double top = src[a.i0 * n + b.i0] + b.w1 * (src[a.i0 * n + b.i1] - src[a.i0 * n + b.i0]);
        const double bot = src[a.i1 * n + b.i0] + b.w1 * (src[a.i1 * n + b.i1] - src[a.i1 * n + b.i0]);
        dst[y * n + (flip ? n - 1 - x : x)] = static_cast<float>(top + a.w1 * (bot - top));
      }
    }
  }
  normalize(out, cfg);
  return out;
}

// Test-time path: normalization only.
inline Tensor<float> test_transform(const Tensor<float>& image, const AugmentConfig& cfg) {
  Tensor<float> out = image;
  normalize(out, cfg);
  return out;
}

// ---- batching -------------------------------------------------------------

inline Rng batch_rng(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
  return Rng(mix_seed(seed, epoch, batch));
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(mix_seed(seed, epoch, 0xE90C));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  return idx;
}

struct Batch {
  Tensor<float> inputs;   // [B x 3 x 32 x 32], normalized
  std::vector<int> labels;
  Tensor<float> targets;  // [B x 3] color means
  std::size_t size() const noexcept { return labels.size(); }
};

// `rng` null selects the test-time transform.
inline Batch make_batch(const TaskDataset& ds, std::span<const std::size_t> indices, const AugmentConfig& cfg,
                        Rng* rng) {
  Batch b;
  const std::size_t B = indices.size();
  b.inputs = Tensor<float>({B, 3, kImageSide, kImageSide});
  b.targets = Tensor<float>({B, 3});
  b.labels.reserve(B);
  for (std::size_t k = 0; k < B; ++k) {
    const std::size_t i = indices[k];
    const Tensor<float> img = to_float_image(ds.image(i));
    const Tensor<float> x = rng ? augment(img, cfg, *rng) : test_transform(img, cfg);
    std::copy(x.data(), x.data() + kImageValues, b.inputs.data() + k * kImageValues);
    b.labels.push_back(ds.labels[i]);
    for (std::size_t c = 0; c < 3; ++c) b.targets[k * 3 + c] = ds.colors[i][c];
  }
  return b;
}

// ---- compositional regression task ----------------------------------------

// Two-input constituent: a*tanh(b*u + c*v + d), or u + v when `additive`.
struct Constituent {
  double a = 1, b = 1, c = 1, d = 0;
  bool additive = false;
  double operator()(double u, double v) const { return additive ? u + v : a * std::tanh(b * u + c * v + d); }
};

// Seven constituents of the binary tree over 8 inputs, in order:
// leaves (x1,x2) (x3,x4) (x5,x6) (x7,x8), then the two middle nodes, then the root.
using HierarchicalParams = std::array<Constituent, 7>;

inline HierarchicalParams random_hierarchical_params(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xC0DE));
  HierarchicalParams p;
  for (auto& f : p) f = {uniform(rng, 0.5, 1.5), uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5), uniform(rng, -0.5, 0.5)};
  return p;
}

inline double hierarchical_function(std::span<const double, 8> x, const HierarchicalParams& p) {
  std::array<double, 8> level = {};
  std::copy(x.begin(), x.end(), level.begin());
  std::size_t width = 8, node = 0;
  while (width > 1) {
    for (std::size_t i = 0; i < width / 2; ++i) level[i] = p[node++](level[2 * i], level[2 * i + 1]);
    width /= 2;
  }
  return level[0];
}

struct RegressionSet {
  Tensor<double> inputs;   // [N x 8], uniform in [-1, 1]
  Tensor<double> targets;  // [N x 1]
};

inline RegressionSet make_compositional_dataset(std::size_t n, const HierarchicalParams& params, std::uint64_t seed) {
  RegressionSet out{Tensor<double>({n, 8}), Tensor<double>({n, 1})};
  Rng rng(mix_seed(seed, 0xDA7A));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 8; ++j) out.inputs[i * 8 + j] = uniform(rng, -1.0, 1.0);
    out.targets[i] = hierarchical_function(std::span<const double, 8>(out.inputs.data() + i * 8, 8), params);
  }
  return out;
}

}  // namespace hiercomp
