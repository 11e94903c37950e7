#ifndef DENSFORMER_INFERENCE_HPP
#define DENSFORMER_INFERENCE_HPP

// Whole-image denoising. Images larger than a tile are cut into overlapping
// tiles; each tile goes through the network on its own and overlapping
// outputs are averaged.

#include "densformer/image.hpp"
#include "densformer/model.hpp"

namespace densformer {

inline constexpr std::size_t kDefaultTile = 160;
inline constexpr std::size_t kDefaultOverlap = 16;

/// Start offsets of tiles of `tile` pixels stepping by tile - overlap; the
/// last tile is pulled back to end at the border.
inline std::vector<std::size_t> tile_starts(std::size_t extent, std::size_t tile, std::size_t overlap) {
  if (tile == 0 || overlap >= tile) throw std::invalid_argument("tile_starts: need tile > overlap");
  if (extent <= tile) return {0};
  std::vector<std::size_t> out;
  const std::size_t step = tile - overlap;
  for (std::size_t s = 0;; s += step) {
    if (s + tile >= extent) {
      out.push_back(extent - tile);
      break;
    }
    out.push_back(s);
  }
  return out;
}

template <class T>
ImageBuffer denoise_untiled(const ImageBuffer& img, const ParamStore<T>& params, const ModelConfig& cfg) {
  NoGradGuard guard;
  return tensor_to_image(densformer_forward(image_to_tensor<T>(img), params, cfg));
}

template <class T>
ImageBuffer denoise(const ImageBuffer& img, const ParamStore<T>& params, const ModelConfig& cfg,
                    std::size_t tile = kDefaultTile, std::size_t overlap = kDefaultOverlap) {
  if (img.channels != cfg.in_channels) {
    throw ImageError("denoise: image has " + std::to_string(img.channels) + " channels, model expects " +
                     std::to_string(cfg.in_channels));
  }
  if (img.height <= tile && img.width <= tile) return denoise_untiled(img, params, cfg);
  const auto ys = tile_starts(img.height, tile, overlap);
  const auto xs = tile_starts(img.width, tile, overlap);
  std::vector<double> acc(img.size(), 0.0);
  std::vector<std::uint32_t> count(img.height * img.width, 0);
  for (std::size_t y0 : ys) {
    for (std::size_t x0 : xs) {
      const std::size_t th = std::min(tile, img.height), tw = std::min(tile, img.width);
      const ImageBuffer out = denoise_untiled(crop_image(img, y0, x0, th, tw), params, cfg);
      for (std::size_t y = 0; y < th; ++y) {
        for (std::size_t x = 0; x < tw; ++x) {
          ++count[(y0 + y) * img.width + x0 + x];
          for (std::size_t c = 0; c < img.channels; ++c) {
            acc[((y0 + y) * img.width + x0 + x) * img.channels + c] += out.at(y, x, c);
          }
        }
      }
    }
  }
  ImageBuffer result(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    result.pixels[i] = static_cast<float>(acc[i] / count[i / img.channels]);
  }
  return result;
}

}  // namespace densformer

#endif  // DENSFORMER_INFERENCE_HPP
