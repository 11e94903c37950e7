#ifndef DENSFORMER_NN_OPS_HPP
#define DENSFORMER_NN_OPS_HPP

// Convolutions, linear maps, layer norm, softmax and GELU.
//
// Spatial tensors are NCHW. Convolutions run at stride 1 with "same" output
// size; the border is reflect-padded.

#include <cmath>
#include <numbers>

#include <unsupported/Eigen/SpecialFunctions>

#include "densformer/ops.hpp"

namespace densformer {

template <class T>
struct Conv2dParams {
  Tensor<T> weight;  // [C_out, C_in, k, k]
  Tensor<T> bias;    // [C_out] or undefined
};

template <class T>
struct DepthwiseConv2dParams {
  Tensor<T> weight;  // [C, 1, k, k]
  Tensor<T> bias;    // [C] or undefined
};

template <class T>
struct LinearParams {
  Tensor<T> weight;  // [d_in, d_out]
  Tensor<T> bias;    // [d_out] or undefined
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

namespace detail {

inline void check_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + shape_str(s));
}

// Reflect-padded copy of one H x W plane with a border of p pixels.
template <class T>
void pad_plane(const T* src, std::size_t h, std::size_t w, std::size_t p, T* dst) {
  const std::size_t pw = w + 2 * p;
  for (std::size_t y = 0; y < h + 2 * p; ++y) {
    const T* row = src + static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(p), h)) * w;
    T* out = dst + y * pw;
    for (std::size_t x = 0; x < p; ++x) {
      out[x] = row[reflect_index(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(p), w)];
      out[p + w + x] = row[reflect_index(static_cast<std::ptrdiff_t>(w + x), w)];
    }
    std::copy(row, row + w, out + p);
  }
}

// Adjoint of pad_plane: folds a padded-plane gradient back onto the source.
template <class T>
void fold_plane(const T* padded, std::size_t h, std::size_t w, std::size_t p, T* dst) {
  const std::size_t pw = w + 2 * p;
  for (std::size_t y = 0; y < h + 2 * p; ++y) {
    T* row = dst + static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(p), h)) * w;
    const T* in = padded + y * pw;
    for (std::size_t x = 0; x < p; ++x) {
      row[reflect_index(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(p), w)] += in[x];
      row[reflect_index(static_cast<std::ptrdiff_t>(w + x), w)] += in[p + w + x];
    }
    for (std::size_t x = 0; x < w; ++x) row[x] += in[p + x];
  }
}

// cols[(c*k + ky)*k + kx][y*W + x] = xpad[c][y + ky][x + kx]
template <class T>
void im2col(const T* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, Buffer<T>& padded,
            Buffer<T>& cols) {
  const std::size_t p = k / 2;
  const std::size_t ph = h + 2 * p, pw = w + 2 * p;
  padded.resize(ph * pw);
  cols.resize(c_in * k * k * h * w);
  for (std::size_t c = 0; c < c_in; ++c) {
    pad_plane(x + c * h * w, h, w, p, padded.data());
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols.data() + ((c * k + ky) * k + kx) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          std::copy_n(padded.data() + (y + ky) * pw + kx, w, dst + y * w);
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, Buffer<T>& padded,
            T* dx) {
  const std::size_t p = k / 2;
  const std::size_t pw = w + 2 * p;
  padded.resize((h + 2 * p) * pw);
  for (std::size_t c = 0; c < c_in; ++c) {
    std::fill(padded.begin(), padded.end(), T(0));
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = cols + ((c * k + ky) * k + kx) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          T* row = padded.data() + (y + ky) * pw + kx;
          for (std::size_t x = 0; x < w; ++x) row[x] += src[y * w + x];
        }
      }
    }
    fold_plane(padded.data(), h, w, p, dx + c * h * w);
  }
}

}  // namespace detail

/// Cross-correlation with an odd square kernel, stride 1, reflect "same" padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_nchw(x.shape(), "conv2d");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: weight must be [C_out, C_in, k, k] with odd k, got " + shape_str(weight.shape()));
  }
  const std::size_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t c_out = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c_in) {
    throw ShapeError("conv2d: input has " + std::to_string(c_in) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.numel() != c_out) throw ShapeError("conv2d: bias size mismatch");
  const std::size_t hw = h * w, kk = c_in * k * k;
  Buffer<T> out(n * c_out * hw);
  Buffer<T> padded, cols;
  const auto wm = ConstMatrixMap<T>(weight.data().data(), c_out, kk);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = x.data().data() + b * c_in * hw;
    auto yb = MatrixMap<T>(out.data() + b * c_out * hw, c_out, hw);
    if (k == 1) {
      yb.noalias() = wm * ConstMatrixMap<T>(xb, c_in, hw);
    } else {
      detail::im2col(xb, c_in, h, w, k, padded, cols);
      yb.noalias() = wm * ConstMatrixMap<T>(cols.data(), kk, hw);
    }
    if (bias.defined()) {
      for (std::size_t c = 0; c < c_out; ++c) yb.row(static_cast<Eigen::Index>(c)).array() += bias[c];
    }
  }
  auto xn = x.node(), wn = weight.node();
  std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      Shape{n, c_out, h, w}, std::move(out), {x, weight, bias},
      [xn, wn, bn, n, c_in, c_out, h, w, k](const Node<T>& self) {
        const std::size_t hw = h * w, kk = c_in * k * k;
        T* gx = detail::grad_of(xn);
        T* gw = detail::grad_of(wn);
        T* gb = bn ? detail::grad_of(bn) : nullptr;
        Buffer<T> padded, cols, dcols;
        const auto wm = ConstMatrixMap<T>(wn->data.data(), c_out, kk);
        for (std::size_t b = 0; b < n; ++b) {
          const auto dy = ConstMatrixMap<T>(self.grad.data() + b * c_out * hw, c_out, hw);
          const T* xb = xn->data.data() + b * c_in * hw;
          if (gb) {
            for (std::size_t c = 0; c < c_out; ++c) gb[c] += dy.row(static_cast<Eigen::Index>(c)).sum();
          }
          if (k == 1) {
            if (gw) MatrixMap<T>(gw, c_out, kk).noalias() += dy * ConstMatrixMap<T>(xb, c_in, hw).transpose();
            if (gx) MatrixMap<T>(gx + b * c_in * hw, c_in, hw).noalias() += wm.transpose() * dy;
            continue;
          }
          if (gw) {
            detail::im2col(xb, c_in, h, w, k, padded, cols);
            MatrixMap<T>(gw, c_out, kk).noalias() += dy * ConstMatrixMap<T>(cols.data(), kk, hw).transpose();
          }
          if (gx) {
            dcols.resize(kk * hw);
            MatrixMap<T>(dcols.data(), kk, hw).noalias() = wm.transpose() * dy;
            detail::col2im(dcols.data(), c_in, h, w, k, padded, gx + b * c_in * hw);
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  return conv2d(x, p.weight, p.bias);
}

/// Per-channel (groups == C) convolution, stride 1, reflect "same" padding.
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_nchw(x.shape(), "depthwise_conv2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (weight.rank() != 4 || weight.dim(0) != c || weight.dim(1) != 1 || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) % 2 == 0) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) + " does not match " +
                     std::to_string(c) + " channels");
  }
  if (bias.defined() && bias.numel() != c) throw ShapeError("depthwise_conv2d: bias size mismatch");
  const std::size_t k = weight.dim(2), p = k / 2, pw = w + 2 * p, hw = h * w;
  Buffer<T> out(x.numel());
  Buffer<T> padded((h + 2 * p) * pw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      detail::pad_plane(x.data().data() + (b * c + ch) * hw, h, w, p, padded.data());
      const T* kw = weight.data().data() + ch * k * k;
      T* y = out.data() + (b * c + ch) * hw;
      std::fill(y, y + hw, bias.defined() ? bias[ch] : T(0));
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = kw[ky * k + kx];
          for (std::size_t yy = 0; yy < h; ++yy) {
            const T* src = padded.data() + (yy + ky) * pw + kx;
            T* dst = y + yy * w;
            for (std::size_t xx = 0; xx < w; ++xx) dst[xx] += wv * src[xx];
          }
        }
      }
    }
  }
  auto xn = x.node(), wn = weight.node();
  std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, weight, bias}, [xn, wn, bn, n, c, h, w, k](const Node<T>& self) {
        const std::size_t p = k / 2, pw = w + 2 * p, hw = h * w;
        T* gx = detail::grad_of(xn);
        T* gw = detail::grad_of(wn);
        T* gb = bn ? detail::grad_of(bn) : nullptr;
        Buffer<T> padded((h + 2 * p) * pw), dpad((h + 2 * p) * pw);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* dy = self.grad.data() + (b * c + ch) * hw;
            if (gb) {
              T s = T(0);
              for (std::size_t i = 0; i < hw; ++i) s += dy[i];
              gb[ch] += s;
            }
            if (gw) detail::pad_plane(xn->data.data() + (b * c + ch) * hw, h, w, p, padded.data());
            if (gx) std::fill(dpad.begin(), dpad.end(), T(0));
            const T* kw = wn->data.data() + ch * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const T wv = kw[ky * k + kx];
                T acc = T(0);
                for (std::size_t yy = 0; yy < h; ++yy) {
                  const T* g = dy + yy * w;
                  if (gw) {
                    const T* src = padded.data() + (yy + ky) * pw + kx;
                    for (std::size_t xx = 0; xx < w; ++xx) acc += g[xx] * src[xx];
                  }
                  if (gx) {
                    T* dst = dpad.data() + (yy + ky) * pw + kx;
                    for (std::size_t xx = 0; xx < w; ++xx) dst[xx] += wv * g[xx];
                  }
                }
                if (gw) gw[ch * k * k + ky * k + kx] += acc;
              }
            }
            if (gx) detail::fold_plane(dpad.data(), h, w, p, gx + (b * c + ch) * hw);
          }
        }
      });
}

template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const DepthwiseConv2dParams<T>& p) {
  return depthwise_conv2d(x, p.weight, p.bias);
}

/// x[..., d_in] * W[d_in, d_out] + b over the trailing axis.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2) throw ShapeError("linear: bad ranks");
  const std::size_t d_in = weight.dim(0), d_out = weight.dim(1);
  if (x.dim(-1) != d_in) {
    throw ShapeError("linear: trailing extent " + std::to_string(x.dim(-1)) + " != " + std::to_string(d_in));
  }
  if (bias.defined() && bias.numel() != d_out) throw ShapeError("linear: bias size mismatch");
  const std::size_t rows = x.numel() / d_in;
  Buffer<T> out(rows * d_out);
  auto y = MatrixMap<T>(out.data(), rows, d_out);
  y.noalias() = ConstMatrixMap<T>(x.data().data(), rows, d_in) * ConstMatrixMap<T>(weight.data().data(), d_in, d_out);
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), d_out);
  }
  Shape shape = x.shape();
  shape.back() = d_out;
  auto xn = x.node(), wn = weight.node();
  std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(std::move(shape), std::move(out), {x, weight, bias},
                                [xn, wn, bn, rows, d_in, d_out](const Node<T>& self) {
                                  const auto dy = ConstMatrixMap<T>(self.grad.data(), rows, d_out);
                                  if (T* gx = detail::grad_of(xn)) {
                                    MatrixMap<T>(gx, rows, d_in).noalias() +=
                                        dy * ConstMatrixMap<T>(wn->data.data(), d_in, d_out).transpose();
                                  }
                                  if (T* gw = detail::grad_of(wn)) {
                                    MatrixMap<T>(gw, d_in, d_out).noalias() +=
                                        ConstMatrixMap<T>(xn->data.data(), rows, d_in).transpose() * dy;
                                  }
                                  if (T* gb = bn ? detail::grad_of(bn) : nullptr) {
                                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, d_out) += dy.colwise().sum();
                                  }
                                });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return linear(x, p.weight, p.bias);
}

/// The same per-token linear map applied along the channel axis of an NCHW
/// tensor, so spatial layout never has to be transposed to tokens.
template <class T>
Tensor<T> channel_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_nchw(x.shape(), "channel_linear");
  const std::size_t n = x.dim(0), d_in = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (weight.rank() != 2 || weight.dim(0) != d_in) {
    throw ShapeError("channel_linear: weight " + shape_str(weight.shape()) + " vs " + std::to_string(d_in) +
                     " channels");
  }
  const std::size_t d_out = weight.dim(1);
  if (bias.defined() && bias.numel() != d_out) throw ShapeError("channel_linear: bias size mismatch");
  Buffer<T> out(n * d_out * hw);
  const auto wt = ConstMatrixMap<T>(weight.data().data(), d_in, d_out).transpose();
  for (std::size_t b = 0; b < n; ++b) {
    auto y = MatrixMap<T>(out.data() + b * d_out * hw, d_out, hw);
    y.noalias() = wt * ConstMatrixMap<T>(x.data().data() + b * d_in * hw, d_in, hw);
    if (bias.defined()) {
      for (std::size_t c = 0; c < d_out; ++c) y.row(static_cast<Eigen::Index>(c)).array() += bias[c];
    }
  }
  auto xn = x.node(), wn = weight.node();
  std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      Shape{n, d_out, x.dim(2), x.dim(3)}, std::move(out), {x, weight, bias},
      [xn, wn, bn, n, d_in, d_out, hw](const Node<T>& self) {
        T* gx = detail::grad_of(xn);
        T* gw = detail::grad_of(wn);
        T* gb = bn ? detail::grad_of(bn) : nullptr;
        const auto wm = ConstMatrixMap<T>(wn->data.data(), d_in, d_out);
        for (std::size_t b = 0; b < n; ++b) {
          const auto dy = ConstMatrixMap<T>(self.grad.data() + b * d_out * hw, d_out, hw);
          if (gx) MatrixMap<T>(gx + b * d_in * hw, d_in, hw).noalias() += wm * dy;
          if (gw) {
            MatrixMap<T>(gw, d_in, d_out).noalias() +=
                ConstMatrixMap<T>(xn->data.data() + b * d_in * hw, d_in, hw) * dy.transpose();
          }
          if (gb) {
            for (std::size_t c = 0; c < d_out; ++c) gb[c] += dy.row(static_cast<Eigen::Index>(c)).sum();
          }
        }
      });
}

template <class T>
Tensor<T> channel_linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return channel_linear(x, p.weight, p.bias);
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each token over `axis` (biased variance), then applies
/// gamma/beta. axis = -1 is the usual token-major form; axis = 1 normalizes
/// over channels of an NCHW map.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kLayerNormEps,
                     std::ptrdiff_t axis = -1) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const auto r = static_cast<std::ptrdiff_t>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("layer_norm: axis out of range");
  const std::size_t d = x.shape()[static_cast<std::size_t>(axis)];
  std::size_t outer = 1, inner = 1;
  for (std::ptrdiff_t i = 0; i < axis; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (std::ptrdiff_t i = axis + 1; i < r; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  if ((gamma.defined() && gamma.numel() != d) || (beta.defined() && beta.numel() != d)) {
    throw ShapeError("layer_norm: affine size mismatch");
  }
  const std::size_t tokens = outer * inner;
  Buffer<T> xhat(x.numel()), out(x.numel()), rstd(tokens);
  const T* px = x.data().data();
  const T inv_d = T(1) / static_cast<T>(d);
  Buffer<T> mu(inner), var(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * d * inner;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t c = 0; c < d; ++c) {
      const T* row = px + base + c * inner;
      for (std::size_t i = 0; i < inner; ++i) mu[i] += row[i];
    }
    for (std::size_t i = 0; i < inner; ++i) mu[i] *= inv_d;
    for (std::size_t c = 0; c < d; ++c) {
      const T* row = px + base + c * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T dv = row[i] - mu[i];
        var[i] += dv * dv;
      }
    }
    for (std::size_t i = 0; i < inner; ++i) rstd[o * inner + i] = T(1) / std::sqrt(var[i] * inv_d + static_cast<T>(eps));
    for (std::size_t c = 0; c < d; ++c) {
      const T g = gamma.defined() ? gamma[c] : T(1);
      const T bt = beta.defined() ? beta[c] : T(0);
      const std::size_t off = base + c * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T v = (px[off + i] - mu[i]) * rstd[o * inner + i];
        xhat[off + i] = v;
        out[off + i] = v * g + bt;
      }
    }
  }
  auto xn = x.node();
  std::shared_ptr<Node<T>> gn = gamma.defined() ? gamma.node() : nullptr;
  std::shared_ptr<Node<T>> bn = beta.defined() ? beta.node() : nullptr;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), outer, inner, d](const Node<T>& self) {
        T* gx = detail::grad_of(xn);
        T* gg = gn ? detail::grad_of(gn) : nullptr;
        T* gb = bn ? detail::grad_of(bn) : nullptr;
        const T* dy = self.grad.data();
        const T inv_d = T(1) / static_cast<T>(d);
        Buffer<T> m1(inner), m2(inner);
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = o * d * inner;
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (std::size_t c = 0; c < d; ++c) {
            const T g = gn ? gn->data[c] : T(1);
            const std::size_t off = base + c * inner;
            T sg = T(0), sb = T(0);
            for (std::size_t i = 0; i < inner; ++i) {
              const T dxh = dy[off + i] * g;
              m1[i] += dxh;
              m2[i] += dxh * xhat[off + i];
              sg += dy[off + i] * xhat[off + i];
              sb += dy[off + i];
            }
            if (gg) gg[c] += sg;
            if (gb) gb[c] += sb;
          }
          if (!gx) continue;
          for (std::size_t c = 0; c < d; ++c) {
            const T g = gn ? gn->data[c] : T(1);
            const std::size_t off = base + c * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const T dxh = dy[off + i] * g;
              gx[off + i] += rstd[o * inner + i] * (dxh - m1[i] * inv_d - xhat[off + i] * m2[i] * inv_d);
            }
          }
        }
      });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p, double eps = kLayerNormEps,
                     std::ptrdiff_t axis = -1) {
  return layer_norm(x, p.gamma, p.beta, eps, axis);
}

/// Max-subtracted softmax over the trailing axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  Buffer<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += (o[i] = std::exp(in[i] - mx));
    const T inv = T(1) / s;
    for (std::size_t i = 0; i < n; ++i) o[i] *= inv;
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn, n, rows](const Node<T>& self) {
    T* gx = detail::grad_of(xn);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = T(0);
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[i] * (g[i] - dot);
    }
  });
}

/// Exact GELU, x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Array>;
  using ConstArrayMap = Eigen::Map<const Array>;
  static constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  static constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  const auto n = static_cast<Eigen::Index>(x.numel());
  const ConstArrayMap xv(x.data().data(), n);
  Buffer<T> cdf(x.numel()), out(x.numel());
  ArrayMap(cdf.data(), n) = T(0.5) * (T(1) + (xv * inv_sqrt2).erf());
  ArrayMap(out.data(), n) = xv * ConstArrayMap(cdf.data(), n);
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn, cdf = std::move(cdf), n](const Node<T>& self) {
    if (T* g = detail::grad_of(xn)) {
      const ConstArrayMap v(xn->data.data(), n);
      ArrayMap(g, n) += ConstArrayMap(self.grad.data(), n) *
                        (ConstArrayMap(cdf.data(), n) + v * inv_sqrt_2pi * (T(-0.5) * v * v).exp());
    }
  });
}

}  // namespace densformer

#endif  // DENSFORMER_NN_OPS_HPP
