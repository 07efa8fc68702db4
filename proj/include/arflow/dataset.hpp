#pragma once

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "arflow/config.hpp"
#include "arflow/errors.hpp"
#include "arflow/image_io.hpp"
#include "arflow/rectified_flow.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

struct ImagePair {
  std::filesystem::path blur;
  std::filesystem::path sharp;
};

/// <root>/blur/* and <root>/sharp/* matched by file name.
struct DatasetIndex {
  std::filesystem::path root;
  std::vector<ImagePair> pairs;

  static DatasetIndex scan(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const fs::path blur_dir = root / "blur", sharp_dir = root / "sharp";
    if (!fs::is_directory(blur_dir)) throw DataError(blur_dir.string() + ": missing blur directory");
    if (!fs::is_directory(sharp_dir)) throw DataError(sharp_dir.string() + ": missing sharp directory");
    DatasetIndex idx;
    idx.root = root;
    for (const auto& e : fs::directory_iterator(blur_dir)) {
      if (!e.is_regular_file() || !is_image_path(e.path())) continue;
      const fs::path sharp = sharp_dir / e.path().filename();
      if (!fs::exists(sharp)) throw DataError(e.path().string() + ": no sharp counterpart " + sharp.string());
      idx.pairs.push_back({e.path(), sharp});
    }
    std::sort(idx.pairs.begin(), idx.pairs.end(),
              [](const ImagePair& a, const ImagePair& b) { return a.blur.filename() < b.blur.filename(); });
    if (idx.pairs.empty()) throw DataError(blur_dir.string() + ": no .png or .ppm images");
    return idx;
  }
};

struct LoadedPair {
  std::string name;
  Image blur;
  Image sharp;
};

/// Decodes every pair and checks that blur and sharp agree in size.
inline std::vector<LoadedPair> load_pairs(const DatasetIndex& index) {
  std::vector<LoadedPair> out;
  out.reserve(index.pairs.size());
  for (const auto& p : index.pairs) {
    LoadedPair lp{p.blur.filename().string(), read_image(p.blur), read_image(p.sharp)};
    if (lp.blur.width != lp.sharp.width || lp.blur.height != lp.sharp.height)
      throw DataError(p.blur.string() + ": blur is " + std::to_string(lp.blur.width) + "x" +
                      std::to_string(lp.blur.height) + " but sharp is " + std::to_string(lp.sharp.width) + "x" +
                      std::to_string(lp.sharp.height));
    out.push_back(std::move(lp));
  }
  return out;
}

struct CropSpec {
  std::size_t y0 = 0, x0 = 0, size = 0;
  bool flip_h = false, flip_v = false;
};

/// Crop then flip, written into item `item` of a [B, 3, size, size] buffer in [-1, 1].
template <typename T>
void crop_flip_into(const Image& img, const CropSpec& c, std::vector<T>& dst, std::size_t item) {
  const std::size_t n = c.size, plane = n * n;
  T* out = dst.data() + item * 3 * plane;
  for (std::size_t y = 0; y < n; ++y) {
    const std::size_t sy = c.y0 + (c.flip_v ? n - 1 - y : y);
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t sx = c.x0 + (c.flip_h ? n - 1 - x : x);
      for (std::size_t ch = 0; ch < 3; ++ch)
        out[ch * plane + y * n + x] = static_cast<T>(normalize_pixel(img.at(sy, sx, ch)));
    }
  }
}

template <typename T>
struct Batch {
  Tensor<T> blur;
  Tensor<T> sharp;
};

/// Draws a crop position and flip flags for an image of the given size.
inline CropSpec random_crop(const LoadedPair& p, const TrainConfig& cfg, Rng& rng) {
  if (p.blur.height < cfg.crop_size || p.blur.width < cfg.crop_size)
    throw DataError(p.name + ": " + std::to_string(p.blur.width) + "x" + std::to_string(p.blur.height) +
                    " is smaller than the " + std::to_string(cfg.crop_size) + " crop");
  CropSpec c;
  c.size = cfg.crop_size;
  c.y0 = std::uniform_int_distribution<std::size_t>(0, p.blur.height - cfg.crop_size)(rng);
  c.x0 = std::uniform_int_distribution<std::size_t>(0, p.blur.width - cfg.crop_size)(rng);
  c.flip_h = std::bernoulli_distribution(cfg.flip_h)(rng);
  c.flip_v = std::bernoulli_distribution(cfg.flip_v)(rng);
  return c;
}

/// Aligned crop and flips shared by blur and sharp, one draw per selected pair.
template <typename T = float>
Batch<T> load_and_augment(const std::vector<LoadedPair>& pairs, const std::vector<std::size_t>& picks,
                          const TrainConfig& cfg, Rng& rng) {
  detail::require(!picks.empty(), "load_and_augment: empty batch");
  const std::size_t n = cfg.crop_size;
  std::vector<T> blur(picks.size() * 3 * n * n), sharp(blur.size());
  for (std::size_t b = 0; b < picks.size(); ++b) {
    const LoadedPair& p = pairs.at(picks[b]);
    const CropSpec c = random_crop(p, cfg, rng);
    crop_flip_into(p.blur, c, blur, b);
    crop_flip_into(p.sharp, c, sharp, b);
  }
  const Shape shape{picks.size(), 3, n, n};
  return {Tensor<T>(shape, std::move(blur)), Tensor<T>(shape, std::move(sharp))};
}

/// Epoch-wise shuffled sampling without replacement.
class BatchSampler {
 public:
  explicit BatchSampler(std::size_t count) : order_(count) {
    detail::require(count > 0, "BatchSampler: empty dataset");
    for (std::size_t i = 0; i < count; ++i) order_[i] = i;
    pos_ = count;
  }

  std::vector<std::size_t> next(std::size_t batch, Rng& rng) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

}  // namespace arflow
