#ifndef DENSFORMER_TESTS_SUPPORT_HPP
#define DENSFORMER_TESTS_SUPPORT_HPP

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "densformer/image.hpp"
#include "densformer/model.hpp"

namespace testsupport {

using namespace densformer;

template <class T = float>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

/// Piecewise-smooth test image: a gentle gradient, a few flat rectangles and
/// a soft disc, kept inside [0.05, 0.95].
inline ImageBuffer synthetic_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  ImageBuffer img(h, w, c);
  std::vector<double> base(c), gx(c), gy(c);
  for (std::size_t k = 0; k < c; ++k) {
    base[k] = rng.uniform(0.3, 0.6);
    gx[k] = rng.uniform(-0.2, 0.2);
    gy[k] = rng.uniform(-0.2, 0.2);
  }
  struct Rect {
    std::size_t y0, x0, y1, x1;
    double v;
  };
  std::vector<Rect> rects;
  for (int i = 0; i < 4; ++i) {
    const std::size_t y0 = rng.uniform_int(h), x0 = rng.uniform_int(w);
    rects.push_back({y0, x0, y0 + 1 + rng.uniform_int(h / 2 + 1), x0 + 1 + rng.uniform_int(w / 2 + 1),
                     rng.uniform(-0.3, 0.3)});
  }
  const double cy = rng.uniform(0, static_cast<double>(h)), cx = rng.uniform(0, static_cast<double>(w));
  const double rad = rng.uniform(0.15, 0.35) * static_cast<double>(std::min(h, w));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(h), fx = static_cast<double>(x) / static_cast<double>(w);
      double extra = 0;
      for (const auto& r : rects) {
        if (y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1) extra += r.v;
      }
      const double d = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
      extra += 0.25 / (1.0 + std::exp((d - rad) / 1.5));
      for (std::size_t k = 0; k < c; ++k) {
        const double v = base[k] + gx[k] * fx + gy[k] * fy + extra * (k == 1 ? 0.8 : 1.0);
        img.at(y, x, k) = static_cast<float>(std::clamp(v, 0.05, 0.95));
      }
    }
  }
  return img;
}

/// Image whose pixels are exact multiples of 1/255.
inline ImageBuffer quantized(const ImageBuffer& img) {
  ImageBuffer out = img;
  const auto q = quantize(img);
  for (std::size_t i = 0; i < q.size(); ++i) out.pixels[i] = static_cast<float>(q[i]) / 255.0f;
  return out;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("densformer_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// A small fast model for plumbing tests.
inline ModelConfig small_config(std::size_t in_channels = 1) {
  ModelConfig m;
  m.channels = 8;
  m.in_channels = in_channels;
  m.groups = 2;
  m.blocks = 1;
  m.layers = 1;
  m.attention.window = 4;
  m.attention.heads = 2;
  return m;
}

/// Every parameter redrawn from U(lo, hi) so no branch is trivially zero.
template <class T>
void randomize(ParamStore<T>& store, std::uint64_t seed, double lo = -0.2, double hi = 0.2) {
  Rng rng(seed);
  for (auto& e : store) {
    for (T& v : e.tensor.mutable_data()) v = static_cast<T>(rng.uniform(lo, hi));
  }
}

}  // namespace testsupport

#endif  // DENSFORMER_TESTS_SUPPORT_HPP
