#ifndef DENSFORMER_OPS_HPP
#define DENSFORMER_OPS_HPP

// Elementwise arithmetic, reductions, matmul and layout ops with exact
// backward rules.

#include <Eigen/Core>

#include "densformer/tensor.hpp"

namespace densformer {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

/// Index into an extent of n under mirror reflection (no edge repeat),
/// folding as many times as needed.
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Shapes equal, or one side is a scalar / trailing suffix of the other.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (shape_numel(b) == 1 || is_suffix(b, a)) return a;
  if (shape_numel(a) == 1 || is_suffix(a, b)) return b;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

template <class T, class Fwd, class GradA, class GradB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, GradA grad_a,
                    GradB grad_b) {
  Shape shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  Buffer<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i % na], pb[i % nb]);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(std::move(shape), std::move(out), {a, b},
                        [an, bn, na, nb, grad_a, grad_b](const Node<T>& self) {
                          const std::size_t n = self.data.size();
                          const T* g = self.grad.data();
                          const T* pa = an->data.data();
                          const T* pb = bn->data.data();
                          if (T* ga = grad_of(an)) {
                            for (std::size_t i = 0; i < n; ++i) ga[i % na] += grad_a(g[i], pa[i % na], pb[i % nb]);
                          }
                          if (T* gb = grad_of(bn)) {
                            for (std::size_t i = 0; i < n; ++i) gb[i % nb] += grad_b(g[i], pa[i % na], pb[i % nb]);
                          }
                        });
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  Buffer<T> out(a.numel());
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), {a}, [an, deriv](const Node<T>& self) {
    if (T* ga = grad_of(an)) {
      const T* pa = an->data.data();
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += self.grad[i] * deriv(pa[i], self.data[i]);
    }
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

/// |x| with subgradient 0 at the kink.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::abs(x); }, [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  auto an = a.node();
  return detail::make_result<T>(Shape{}, {total}, {a}, [an](const Node<T>& self) {
    if (T* ga = detail::grad_of(an)) {
      const T g = self.grad[0];
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Buffer<T> out(m * n);
  const auto ea = ConstMatrixMap<T>(a.data().data(), m, k);
  const auto eb = ConstMatrixMap<T>(b.data().data(), k, n);
  MatrixMap<T>(out.data(), m, n).noalias() = ea * eb;
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(Shape{m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const Node<T>& self) {
    const auto dc = ConstMatrixMap<T>(self.grad.data(), m, n);
    if (T* ga = detail::grad_of(an)) {
      MatrixMap<T>(ga, m, k).noalias() += dc * ConstMatrixMap<T>(bn->data.data(), k, n).transpose();
    }
    if (T* gb = detail::grad_of(bn)) {
      MatrixMap<T>(gb, k, n).noalias() += ConstMatrixMap<T>(an->data.data(), m, k).transpose() * dc;
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  auto an = a.node();
  return detail::make_result<T>(std::move(shape), Buffer<T>(a.data().begin(), a.data().end()), {a},
                                [an](const Node<T>& self) {
                                  if (T* ga = detail::grad_of(an)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                                  }
                                });
}

/// Axis permutation: output axis i is input axis perm[i].
template <class T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("transpose: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  Shape out_shape(r);
  Shape src_stride(r);  // input stride to step along each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.shape()[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t n = a.numel();
  // Output position i maps to input offset map[i].
  std::vector<std::size_t> map(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      map[i] = off;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        off += src_stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        off -= src_stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
  Buffer<T> out(n);
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[map[i]];
  auto an = a.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a},
                                [an, map = std::move(map)](const Node<T>& self) {
                                  if (T* ga = detail::grad_of(an)) {
                                    for (std::size_t i = 0; i < map.size(); ++i) ga[map[i]] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 overload needs a matrix");
  return transpose(a, {1, 0});
}

/// Reflect-pads the last two axes.
template <class T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                      std::size_t right) {
  if (x.rank() < 2) throw ShapeError("pad_reflect: need rank >= 2");
  const std::size_t h = x.dim(-2), w = x.dim(-1);
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  std::vector<std::size_t> src(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const auto sy = reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(top), h);
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const auto sx = reflect_index(static_cast<std::ptrdiff_t>(xx) - static_cast<std::ptrdiff_t>(left), w);
      src[y * ow + xx] = static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx);
    }
  }
  Buffer<T> out(planes * oh * ow);
  const T* px = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh * ow; ++i) out[p * oh * ow + i] = px[p * h * w + src[i]];
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {x},
                                [xn, src = std::move(src), planes, h, w](const Node<T>& self) {
                                  if (T* gx = detail::grad_of(xn)) {
                                    const std::size_t plane_out = src.size();
                                    for (std::size_t p = 0; p < planes; ++p) {
                                      for (std::size_t i = 0; i < plane_out; ++i) {
                                        gx[p * h * w + src[i]] += self.grad[p * plane_out + i];
                                      }
                                    }
                                  }
                                });
}

/// Crops an h x w window at (top, left) from the last two axes.
template <class T>
Tensor<T> crop(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (x.rank() < 2) throw ShapeError("crop: need rank >= 2");
  const std::size_t ih = x.dim(-2), iw = x.dim(-1);
  if (top + h > ih || left + w > iw) throw ShapeError("crop: window exceeds " + shape_str(x.shape()));
  const std::size_t planes = x.numel() / (ih * iw);
  Buffer<T> out(planes * h * w);
  const T* px = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* row = px + p * ih * iw + (top + y) * iw + left;
      std::copy(row, row + w, out.begin() + static_cast<std::ptrdiff_t>((p * h + y) * w));
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = h;
  shape[shape.size() - 1] = w;
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {x},
                                [xn, planes, ih, iw, top, left, h, w](const Node<T>& self) {
                                  if (T* gx = detail::grad_of(xn)) {
                                    for (std::size_t p = 0; p < planes; ++p) {
                                      for (std::size_t y = 0; y < h; ++y) {
                                        T* row = gx + p * ih * iw + (top + y) * iw + left;
                                        const T* g = self.grad.data() + (p * h + y) * w;
                                        for (std::size_t xx = 0; xx < w; ++xx) row[xx] += g[xx];
                                      }
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) throw ShapeError("concat: extent mismatch off the concat axis");
    }
    shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = shape[axis] * inner;
  Buffer<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * row, row, out.data() + o * out_row + off);
    }
    off += row;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result_n<T>(
      std::move(shape), std::move(out), parts,
      [nodes = std::move(nodes), offsets = std::move(offsets), outer, out_row](const Node<T>& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          T* g = detail::grad_of(nodes[k]);
          if (!g) continue;
          const std::size_t row = nodes[k]->data.size() / outer;
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = self.grad.data() + o * out_row + offsets[k];
            for (std::size_t i = 0; i < row; ++i) g[o * row + i] += src[i];
          }
        }
      });
}

}  // namespace densformer

#endif  // DENSFORMER_OPS_HPP
