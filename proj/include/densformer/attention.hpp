#ifndef DENSFORMER_ATTENTION_HPP
#define DENSFORMER_ATTENTION_HPP

// Window multi-head self-attention (W-MSA): window partitioning, Q/K/V
// generation for the four transformer variants, relative position bias and
// the fused per-window attention kernel.

#include <cstdint>
#include <optional>
#include <string_view>

#include "densformer/nn_ops.hpp"

namespace densformer {

enum class Variant { vanilla, vanilla_c, lewin, enhanced_lewin };

/// How the per-head M^2 x M^2 logit bias is parameterized.
enum class BiasMode {
  offset_tied,  // (2M-1)^2 x heads table indexed by the 2-D token offset
  free,         // heads x M^2 x M^2 matrix, one free scalar per token pair
};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::vanilla: return "vanilla";
    case Variant::vanilla_c: return "vanilla_c";
    case Variant::lewin: return "lewin";
    case Variant::enhanced_lewin: return "enhanced_lewin";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (Variant v : {Variant::vanilla, Variant::vanilla_c, Variant::lewin, Variant::enhanced_lewin}) {
    if (s == to_string(v)) return v;
  }
  return std::nullopt;
}

inline std::string_view to_string(BiasMode m) { return m == BiasMode::free ? "free" : "offset_tied"; }

inline std::optional<BiasMode> parse_bias_mode(std::string_view s) {
  if (s == "free") return BiasMode::free;
  if (s == "offset_tied") return BiasMode::offset_tied;
  return std::nullopt;
}

/// Q/K/V pass through depthwise conv + layer norm after the linear map.
inline bool uses_conv_projection(Variant v) { return v == Variant::vanilla_c || v == Variant::enhanced_lewin; }

struct AttentionConfig {
  std::size_t window = 8;
  std::size_t heads = 4;
  Variant variant = Variant::enhanced_lewin;
  BiasMode bias_mode = BiasMode::free;

  std::size_t head_dim(std::size_t channels) const { return channels / heads; }

  void validate(std::size_t channels) const {
    if (window == 0 || heads == 0) throw std::invalid_argument("attention: window and heads must be >= 1");
    if (channels % heads != 0) {
      throw std::invalid_argument("attention: channels " + std::to_string(channels) + " not divisible by heads " +
                                  std::to_string(heads));
    }
  }
};

/// x [N, C, H, W] -> [N * (H/M) * (W/M), M*M, C]; windows and the tokens inside
/// each window are both row-major.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t m) {
  detail::check_nchw(x.shape(), "window_partition");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (m == 0 || h % m != 0 || w % m != 0) {
    throw ShapeError("window_partition: " + shape_str(x.shape()) + " not divisible by window " + std::to_string(m));
  }
  const std::size_t nwh = h / m, nww = w / m;
  std::vector<std::uint32_t> dst(x.numel());  // input offset -> output offset
  Buffer<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        const std::size_t win_row = (b * nwh + y / m) * nww;
        const std::size_t tok_row = (y % m) * m;
        const std::size_t src_row = ((b * c + ch) * h + y) * w;
        for (std::size_t xx = 0; xx < w; ++xx) {
          const std::size_t o = ((win_row + xx / m) * m * m + tok_row + xx % m) * c + ch;
          dst[src_row + xx] = static_cast<std::uint32_t>(o);
          out[o] = px[src_row + xx];
        }
      }
    }
  }
  auto xn = x.node();
  return detail::make_result<T>(Shape{n * nwh * nww, m * m, c}, std::move(out), {x},
                                [xn, dst = std::move(dst)](const Node<T>& self) {
                                  if (T* gx = detail::grad_of(xn)) {
                                    for (std::size_t i = 0; i < dst.size(); ++i) gx[i] += self.grad[dst[i]];
                                  }
                                });
}

/// Inverse of window_partition for an H x W map.
template <class T>
Tensor<T> window_merge(const Tensor<T>& windows, std::size_t m, std::size_t h, std::size_t w) {
  if (windows.rank() != 3 || m == 0 || windows.dim(1) != m * m || h % m != 0 || w % m != 0) {
    throw ShapeError("window_merge: inconsistent geometry " + shape_str(windows.shape()));
  }
  const std::size_t per_image = (h / m) * (w / m);
  if (windows.dim(0) % per_image != 0) throw ShapeError("window_merge: window count does not match H x W");
  const std::size_t n = windows.dim(0) / per_image, c = windows.dim(2);
  const std::size_t nwh = h / m, nww = w / m;
  std::vector<std::uint32_t> src(windows.numel());  // output offset -> input offset
  Buffer<T> out(windows.numel());
  const T* pw = windows.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        const std::size_t win_row = (b * nwh + y / m) * nww;
        const std::size_t tok_row = (y % m) * m;
        const std::size_t dst_row = ((b * c + ch) * h + y) * w;
        for (std::size_t xx = 0; xx < w; ++xx) {
          const std::size_t i = ((win_row + xx / m) * m * m + tok_row + xx % m) * c + ch;
          src[dst_row + xx] = static_cast<std::uint32_t>(i);
          out[dst_row + xx] = pw[i];
        }
      }
    }
  }
  auto wn = windows.node();
  return detail::make_result<T>(Shape{n, c, h, w}, std::move(out), {windows},
                                [wn, src = std::move(src)](const Node<T>& self) {
                                  if (T* g = detail::grad_of(wn)) {
                                    for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                                  }
                                });
}

/// index[i * M^2 + j] = row of the offset table for the 2-D offset between
/// token i and token j of an M x M window.
inline std::vector<std::uint32_t> relative_position_index(std::size_t m) {
  const std::size_t n = m * m, side = 2 * m - 1;
  std::vector<std::uint32_t> index(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t dy = i / m + (m - 1) - j / m;
      const std::size_t dx = i % m + (m - 1) - j % m;
      index[i * n + j] = static_cast<std::uint32_t>(dy * side + dx);
    }
  }
  return index;
}

template <class T>
struct RelativePositionBias {
  std::size_t window = 0;
  std::size_t heads = 0;
  BiasMode mode = BiasMode::offset_tied;
  Tensor<T> table;  // offset_tied: [(2M-1)^2, heads]; free: [heads, M^2, M^2]
  std::vector<std::uint32_t> index;

  static Shape table_shape(std::size_t m, std::size_t heads, BiasMode mode) {
    if (mode == BiasMode::free) return {heads, m * m, m * m};
    return {(2 * m - 1) * (2 * m - 1), heads};
  }
};

template <class T>
RelativePositionBias<T> make_relative_bias(Tensor<T> table, std::size_t m, std::size_t heads, BiasMode mode) {
  if (table.shape() != RelativePositionBias<T>::table_shape(m, heads, mode)) {
    throw ShapeError("relative bias: table shape " + shape_str(table.shape()) + " does not match window " +
                     std::to_string(m));
  }
  RelativePositionBias<T> r{m, heads, mode, std::move(table), {}};
  if (mode == BiasMode::offset_tied) r.index = relative_position_index(m);
  return r;
}

/// B[head][i][j] = table[index[i][j]][head] (the free table is B itself).
template <class T>
Tensor<T> relative_bias_materialize(const RelativePositionBias<T>& r) {
  if (r.mode == BiasMode::free) return r.table;
  const std::size_t n = r.window * r.window, heads = r.heads;
  Buffer<T> out(heads * n * n);
  const T* tab = r.table.data().data();
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t ij = 0; ij < n * n; ++ij) out[hd * n * n + ij] = tab[r.index[ij] * heads + hd];
  }
  auto tn = r.table.node();
  return detail::make_result<T>(Shape{heads, n, n}, std::move(out), {r.table},
                                [tn, index = r.index, heads, n](const Node<T>& self) {
                                  if (T* g = detail::grad_of(tn)) {
                                    for (std::size_t hd = 0; hd < heads; ++hd) {
                                      for (std::size_t ij = 0; ij < n * n; ++ij) {
                                        g[index[ij] * heads + hd] += self.grad[hd * n * n + ij];
                                      }
                                    }
                                  }
                                });
}

/// softmax(Q K^T / sqrt(d) + B) V per window and head; q/k/v are
/// [windows, n, C] with head h owning channels [h*d, (h+1)*d).
template <class T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias,
                           std::size_t heads) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("window_attention: q/k/v must share a [windows, n, C] shape");
  }
  const std::size_t nw = q.dim(0), n = q.dim(1), c = q.dim(2);
  if (heads == 0 || c % heads != 0) throw ShapeError("window_attention: channels not divisible by heads");
  if (bias.defined() && bias.shape() != Shape{heads, n, n}) {
    throw ShapeError("window_attention: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t d = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(c));
  const auto ni = static_cast<Eigen::Index>(n), di = static_cast<Eigen::Index>(d);
  Buffer<T> out(q.numel());
  Buffer<T> probs(nw * heads * n * n);
  for (std::size_t b = 0; b < nw; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = b * n * c + hd * d;
      const ConstStridedMap<T> qh(q.data().data() + off, ni, di, stride);
      const ConstStridedMap<T> kh(k.data().data() + off, ni, di, stride);
      const ConstStridedMap<T> vh(v.data().data() + off, ni, di, stride);
      auto p = MatrixMap<T>(probs.data() + (b * heads + hd) * n * n, ni, ni);
      p.noalias() = (qh * kh.transpose()) * sc;
      if (bias.defined()) p += ConstMatrixMap<T>(bias.data().data() + hd * n * n, ni, ni);
      for (Eigen::Index r = 0; r < ni; ++r) {
        auto row = p.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      StridedMap<T>(out.data() + off, ni, di, stride).noalias() = p * vh;
    }
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      q.shape(), std::move(out), {q, k, v, bias},
      [qn, kn, vn, bn, probs = std::move(probs), nw, n, c, heads, d, sc](const Node<T>& self) {
        T* gq = detail::grad_of(qn);
        T* gk = detail::grad_of(kn);
        T* gv = detail::grad_of(vn);
        T* gb = bn ? detail::grad_of(bn) : nullptr;
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(c));
        const auto ni = static_cast<Eigen::Index>(n), di = static_cast<Eigen::Index>(d);
        RowMatrix<T> dp(ni, ni);
        for (std::size_t b = 0; b < nw; ++b) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = b * n * c + hd * d;
            const ConstStridedMap<T> dout(self.grad.data() + off, ni, di, stride);
            const auto p = ConstMatrixMap<T>(probs.data() + (b * heads + hd) * n * n, ni, ni);
            if (gv) StridedMap<T>(gv + off, ni, di, stride).noalias() += p.transpose() * dout;
            if (!gq && !gk && !gb) continue;
            dp.noalias() = dout * ConstStridedMap<T>(vn->data.data() + off, ni, di, stride).transpose();
            // dS = P .* (dP - rowsum(dP .* P))
            for (Eigen::Index r = 0; r < ni; ++r) {
              const T dot = dp.row(r).dot(p.row(r));
              dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
            }
            if (gb) MatrixMap<T>(gb + hd * n * n, ni, ni) += dp;
            if (gq) {
              StridedMap<T>(gq + off, ni, di, stride).noalias() +=
                  sc * (dp * ConstStridedMap<T>(kn->data.data() + off, ni, di, stride));
            }
            if (gk) {
              StridedMap<T>(gk + off, ni, di, stride).noalias() +=
                  sc * (dp.transpose() * ConstStridedMap<T>(qn->data.data() + off, ni, di, stride));
            }
          }
        }
      });
}

template <class T>
struct QkvProjector {
  LinearParams<T> wq, wk, wv;  // [C, C], no bias
  // Present only for the conv-enhanced variants.
  std::optional<DepthwiseConv2dParams<T>> dq, dk, dv;
  std::optional<LayerNormParams<T>> nq, nk, nv;
};

template <class T>
struct Qkv {
  Tensor<T> q, k, v;
};

/// Linear maps over channels; the conv-enhanced variants follow each with a
/// 3x3 depthwise conv and a channel layer norm. Spatial size is unchanged.
template <class T>
Qkv<T> qkv_project(const Tensor<T>& x, const QkvProjector<T>& p, Variant variant) {
  auto one = [&](const LinearParams<T>& lin, const std::optional<DepthwiseConv2dParams<T>>& dw,
                 const std::optional<LayerNormParams<T>>& ln) {
    Tensor<T> t = channel_linear(x, lin);
    if (!uses_conv_projection(variant)) return t;
    if (!dw || !ln) throw std::invalid_argument("qkv_project: conv variant needs depthwise and norm parameters");
    return layer_norm(depthwise_conv2d(t, *dw), *ln, kLayerNormEps, 1);
  };
  return {one(p.wq, p.dq, p.nq), one(p.wk, p.dk, p.nk), one(p.wv, p.dv, p.nv)};
}

template <class T>
struct WmsaParams {
  QkvProjector<T> qkv;
  RelativePositionBias<T> bias;
  LinearParams<T> proj;  // [C, C] + bias
};

/// W-MSA on a spatial map. Extents that are not multiples of the window are
/// reflect-padded at the bottom/right before partitioning and cropped after.
template <class T>
Tensor<T> wmsa(const Tensor<T>& x, const AttentionConfig& cfg, const WmsaParams<T>& p) {
  detail::check_nchw(x.shape(), "wmsa");
  cfg.validate(x.dim(1));
  const std::size_t m = cfg.window, h = x.dim(2), w = x.dim(3);
  const std::size_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
  auto [q, k, v] = qkv_project(x, p.qkv, cfg.variant);
  if (hp != h || wp != w) {
    q = pad_reflect(q, 0, hp - h, 0, wp - w);
    k = pad_reflect(k, 0, hp - h, 0, wp - w);
    v = pad_reflect(v, 0, hp - h, 0, wp - w);
  }
  Tensor<T> attn = window_attention(window_partition(q, m), window_partition(k, m), window_partition(v, m),
                                    relative_bias_materialize(p.bias), cfg.heads);
  Tensor<T> merged = window_merge(attn, m, hp, wp);
  if (hp != h || wp != w) merged = crop(merged, 0, 0, h, w);
  return channel_linear(merged, p.proj);
}

enum class AttentionMode { global, window };

/// Scalar multiplications in the score (Q K^T) and apply (P V) stages, with
/// projections excluded: global 2 (HW)^2 C, window 2 HW M^2 C. Window mode
/// counts the padded extents.
inline std::uint64_t attention_mult_count(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t m,
                                          AttentionMode mode) {
  if (h == 0 || w == 0 || c == 0 || (mode == AttentionMode::window && m == 0)) {
    throw std::invalid_argument("attention_mult_count: extents must be positive");
  }
  if (mode == AttentionMode::global) return 2 * (h * w) * (h * w) * c;
  const std::uint64_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
  return 2 * (hp * wp) * (m * m) * c;
}

}  // namespace densformer

#endif  // DENSFORMER_ATTENTION_HPP
