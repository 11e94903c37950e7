#ifndef DENSFORMER_IMAGE_HPP
#define DENSFORMER_IMAGE_HPP

// Image buffers, NetPBM (P5/P6) I/O, AWGN synthesis, patch sampling and the
// PSNR/SSIM metrics. Metrics are computed on 8-bit quantized pixels.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "densformer/rng.hpp"
#include "densformer/tensor.hpp"

namespace densformer {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x C floats, row-major with interleaved channels. Nominal range is
/// [0, 1]; noisy training images may leave it until they are quantized.
struct ImageBuffer {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {
    if (h == 0 || w == 0 || (c != 1 && c != 3)) throw ImageError("image: need positive extents and 1 or 3 channels");
  }

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  std::size_t size() const { return pixels.size(); }

  bool same_geometry(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const ImageBuffer&) const = default;
};

inline std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline std::vector<std::uint8_t> quantize(const ImageBuffer& img) {
  std::vector<std::uint8_t> out(img.size());
  std::transform(img.pixels.begin(), img.pixels.end(), out.begin(), [](float v) { return quantize(v); });
  return out;
}

namespace detail {

inline void skip_space_and_comments(const std::vector<std::uint8_t>& buf, std::size_t& pos) {
  while (pos < buf.size()) {
    if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(buf[pos])) {
      ++pos;
    } else {
      break;
    }
  }
}

inline std::size_t read_header_int(const std::vector<std::uint8_t>& buf, std::size_t& pos, const char* what) {
  skip_space_and_comments(buf, pos);
  if (pos >= buf.size() || !std::isdigit(buf[pos])) throw ImageError(std::string("pnm: malformed header (") + what + ")");
  std::size_t v = 0;
  while (pos < buf.size() && std::isdigit(buf[pos])) {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (v > (1u << 24)) throw ImageError(std::string("pnm: ") + what + " too large");
    ++pos;
  }
  return v;
}

}  // namespace detail

/// Parses a binary P5 (gray) or P6 (RGB) image with maxval 255.
inline ImageBuffer decode_pnm(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    throw ImageError("pnm: not a binary P5/P6 file");
  }
  const std::size_t channels = buf[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  if (pos >= buf.size() || !(std::isspace(buf[pos]) || buf[pos] == '#')) throw ImageError("pnm: malformed header");
  const std::size_t w = detail::read_header_int(buf, pos, "width");
  const std::size_t h = detail::read_header_int(buf, pos, "height");
  const std::size_t maxval = detail::read_header_int(buf, pos, "maxval");
  if (w == 0 || h == 0) throw ImageError("pnm: zero extent");
  if (maxval != 255) throw ImageError("pnm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw ImageError("pnm: malformed header (raster separator)");
  ++pos;
  const std::size_t need = w * h * channels;
  if (buf.size() - pos < need) {
    throw ImageError("pnm: truncated payload (" + std::to_string(buf.size() - pos) + " of " + std::to_string(need) +
                     " bytes)");
  }
  ImageBuffer img(h, w, channels);
  for (std::size_t i = 0; i < need; ++i) img.pixels[i] = static_cast<float>(buf[pos + i]) / 255.0f;
  return img;
}

inline std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto bytes = quantize(img);
  out.insert(out.end(), bytes.begin(), bytes.end());
  return out;
}

inline ImageBuffer load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_pnm(buf);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

/// Writes P5/P6, quantizing round(clamp(v, 0, 1) * 255).
inline void save_image(const std::filesystem::path& path, const ImageBuffer& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("write failed for " + path.string());
}

/// Adds N(0, (sigma/255)^2) to every element; no clamping.
inline ImageBuffer add_awgn(const ImageBuffer& img, double sigma, Rng& rng) {
  if (sigma < 0) throw std::invalid_argument("add_awgn: sigma must be >= 0");
  ImageBuffer out = img;
  if (sigma == 0) return out;
  const double s = sigma / 255.0;
  for (float& v : out.pixels) v = static_cast<float>(v + s * rng.normal());
  return out;
}

inline ImageBuffer crop_image(const ImageBuffer& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > img.height || left + w > img.width) throw ImageError("crop: window outside image");
  ImageBuffer out(h, w, img.channels);
  for (std::size_t y = 0; y < h; ++y) {
    const auto src = img.pixels.begin() + static_cast<std::ptrdiff_t>(((top + y) * img.width + left) * img.channels);
    std::copy_n(src, w * img.channels, out.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * img.channels));
  }
  return out;
}

struct PatchOrigin {
  std::size_t top = 0;
  std::size_t left = 0;
};

/// Uniformly random size x size crop; origin drawn top first, then left.
inline PatchOrigin sample_patch_origin(const ImageBuffer& img, std::size_t size, Rng& rng) {
  if (size == 0 || img.height < size || img.width < size) {
    throw ImageError("sample_patch: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " smaller than patch " + std::to_string(size));
  }
  PatchOrigin o;
  o.top = rng.uniform_int(img.height - size + 1);
  o.left = rng.uniform_int(img.width - size + 1);
  return o;
}

inline ImageBuffer sample_patch(const ImageBuffer& img, std::size_t size, Rng& rng) {
  const auto o = sample_patch_origin(img, size, rng);
  return crop_image(img, o.top, o.left, size, size);
}

/// PSNR in dB over all elements after 8-bit quantization; +inf when equal.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  if (!a.same_geometry(b)) throw ImageError("psnr: image dimensions differ");
  const auto qa = quantize(a), qb = quantize(b);
  double se = 0.0;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    const double d = static_cast<double>(qa[i]) - static_cast<double>(qb[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(qa.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// "inf" for the identical-image sentinel, else two decimals.
inline std::string format_psnr(double db) {
  if (std::isinf(db)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", db);
  return buf;
}

inline std::string format_ssim(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", s);
  return buf;
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

inline std::vector<double> gaussian_window_1d(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    total += (g[i] = std::exp(-d * d / (2.0 * sigma * sigma)));
  }
  for (double& v : g) v /= total;
  return g;
}

/// Mean SSIM over all valid window positions (no padding) with a normalized
/// Gaussian window, evaluated on quantized pixels rescaled to [0, 1];
/// channels are averaged.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimOptions& opt = {}) {
  if (!a.same_geometry(b)) throw ImageError("ssim: image dimensions differ");
  const std::size_t win = opt.window;
  if (a.height < win || a.width < win) throw ImageError("ssim: image smaller than the window");
  const auto g = gaussian_window_1d(win, opt.sigma);
  const double c1 = opt.k1 * opt.k1, c2 = opt.k2 * opt.k2;
  const auto qa = quantize(a), qb = quantize(b);
  const std::size_t h = a.height, w = a.width, ch = a.channels;
  const std::size_t oh = h - win + 1, ow = w - win + 1;
  // Separable filtering of x, y, x^2, y^2, xy: horizontal pass then vertical.
  std::vector<std::array<double, 5>> rows(h * ow), full(oh * ow);
  double total = 0.0;
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::array<double, 5> acc{};
        for (std::size_t k = 0; k < win; ++k) {
          const std::size_t i = (y * w + x + k) * ch + c;
          const double va = qa[i] / 255.0, vb = qb[i] / 255.0;
          acc[0] += g[k] * va;
          acc[1] += g[k] * vb;
          acc[2] += g[k] * va * va;
          acc[3] += g[k] * vb * vb;
          acc[4] += g[k] * va * vb;
        }
        rows[y * ow + x] = acc;
      }
    }
    double channel_sum = 0.0;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::array<double, 5> m{};
        for (std::size_t k = 0; k < win; ++k) {
          const auto& r = rows[(y + k) * ow + x];
          for (int j = 0; j < 5; ++j) m[j] += g[k] * r[j];
        }
        const double va = m[2] - m[0] * m[0], vb = m[3] - m[1] * m[1], cov = m[4] - m[0] * m[1];
        channel_sum += ((2 * m[0] * m[1] + c1) * (2 * cov + c2)) /
                       ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
      }
    }
    total += channel_sum / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(ch);
}

/// Stacks same-geometry images into an NCHW tensor.
template <class T>
Tensor<T> images_to_tensor(const std::vector<ImageBuffer>& images) {
  if (images.empty()) throw ImageError("images_to_tensor: empty batch");
  const auto& f = images.front();
  Buffer<T> data(images.size() * f.size());
  const std::size_t hw = f.height * f.width;
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (!images[n].same_geometry(f)) throw ImageError("images_to_tensor: mixed geometry in batch");
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < f.channels; ++c) {
        data[(n * f.channels + c) * hw + p] = static_cast<T>(images[n].pixels[p * f.channels + c]);
      }
    }
  }
  return Tensor<T>(Shape{images.size(), f.channels, f.height, f.width}, std::move(data));
}

template <class T>
Tensor<T> image_to_tensor(const ImageBuffer& img) {
  return images_to_tensor<T>({img});
}

template <class T>
ImageBuffer tensor_to_image(const Tensor<T>& t, std::size_t index = 0) {
  if (t.rank() != 4 || index >= t.dim(0)) throw ImageError("tensor_to_image: need NCHW tensor");
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3), hw = h * w;
  ImageBuffer img(h, w, c);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      img.pixels[p * c + ch] = static_cast<float>(t[(index * c + ch) * hw + p]);
    }
  }
  return img;
}

/// .pgm/.ppm files of a directory, sorted by file name.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw ImageError("not a directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace densformer

#endif  // DENSFORMER_IMAGE_HPP
