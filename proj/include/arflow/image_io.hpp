#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

/// 8-bit interleaved RGB.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

// PPM header tokens are separated by whitespace and may be interleaved with # comments.
inline std::string ppm_token(std::istream& in, const std::string& file) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw DataError(file + ": truncated PPM header");
  return tok;
}

inline std::size_t ppm_number(std::istream& in, const std::string& file) {
  const std::string tok = ppm_token(in, file);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw DataError(file + ": bad PPM header field '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace detail

inline bool is_image_path(const std::filesystem::path& p) {
  const std::string ext = detail::lower_extension(p);
  return ext == ".png" || ext == ".ppm";
}

/// Binary P6, maxval 255.
inline Image read_ppm(const std::filesystem::path& path) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(file + ": cannot open");
  if (detail::ppm_token(in, file) != "P6") throw DataError(file + ": not a binary PPM (P6)");
  const std::size_t w = detail::ppm_number(in, file);
  const std::size_t h = detail::ppm_number(in, file);
  const std::size_t maxval = detail::ppm_number(in, file);
  if (w == 0 || h == 0) throw DataError(file + ": empty image");
  if (maxval != 255) throw DataError(file + ": only maxval 255 is supported, got " + std::to_string(maxval));
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw DataError(file + ": truncated pixel data");
  return img;
}

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw DataError(path.string() + ": write failed");
}

inline Image read_png(const std::filesystem::path& path) {
  const std::string file = path.string();
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, file.c_str()))
    throw DataError(file + ": cannot decode PNG (" + pi.message + ")");
  pi.format = PNG_FORMAT_RGB;
  Image img(pi.width, pi.height);
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw DataError(file + ": cannot decode PNG (" + msg + ")");
  }
  return img;
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, img.rgb.data(), 0, nullptr))
    throw DataError(path.string() + ": cannot write PNG (" + pi.message + ")");
}

/// Dispatches on the extension (.png or .ppm).
inline Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError(path.string() + ": no such file");
  const std::string ext = detail::lower_extension(path);
  if (ext == ".ppm") return read_ppm(path);
  if (ext == ".png") return read_png(path);
  throw DataError(path.string() + ": unsupported image format (expected .png or .ppm)");
}

inline void write_image(const Image& img, const std::filesystem::path& path) {
  const std::string ext = detail::lower_extension(path);
  if (ext == ".ppm") return write_ppm(img, path);
  if (ext == ".png") return write_png(img, path);
  throw DataError(path.string() + ": unsupported image format (expected .png or .ppm)");
}

/// Linear map of [0, 255] onto [-1, 1].
inline double normalize_pixel(double v) { return v / 127.5 - 1.0; }

/// [0, 255] -> [-1, 1] as a [1, 3, H, W] tensor.
template <typename T = float>
Tensor<T> image_to_tensor(const Image& img) {
  const std::size_t hw = img.width * img.height;
  Buffer<T> v(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      v[c * hw + i] = static_cast<T>(normalize_pixel(img.rgb[i * 3 + c]));
  return Tensor<T>(Shape{1, 3, img.height, img.width}, std::move(v));
}

/// Clamps to [-1, 1] and rounds to 8 bits. Takes the first item of a batch.
template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
  detail::require(t.rank() == 4 && t.dim(1) == 3, "tensor_to_image: expected [B, 3, H, W], got " + shape_str(t.shape()));
  const std::size_t h = t.dim(2), w = t.dim(3), hw = h * w;
  Image img(w, h);
  auto d = t.data();
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      double v = static_cast<double>(d[c * hw + i]);
      v = std::isnan(v) ? 0.0 : std::clamp(v, -1.0, 1.0);
      img.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
    }
  return img;
}

}  // namespace arflow
