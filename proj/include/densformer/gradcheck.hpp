#ifndef DENSFORMER_GRADCHECK_HPP
#define DENSFORMER_GRADCHECK_HPP

// Central-difference gradient checks in double precision: a per-op suite and
// an end-to-end check of the whole network on a small configuration.

#include <functional>

#include "densformer/training.hpp"

namespace densformer {

inline constexpr double kFiniteDiffStep = 1e-4;
inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-4;

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                       double h = kFiniteDiffStep) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: step must be > 0");
  NoGradGuard guard;
  std::vector<double> base(x.data().begin(), x.data().end());
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto probe = base;
    probe[i] = base[i] + h;
    const double up = f(Tensor<double>(x.shape(), probe));
    probe[i] = base[i] - h;
    const double down = f(Tensor<double>(x.shape(), probe));
    out[i] = (up - down) / (2 * h);
  }
  return Tensor<double>(x.shape(), std::move(out));
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish. NaN anywhere gives NaN.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (std::isnan(diff) || std::isnan(denom)) return std::numeric_limits<double>::quiet_NaN();
  return denom == 0 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

struct GradCheckResult {
  std::string name;
  double rel_error = 0;
  double tolerance = 0;
  bool passed() const { return rel_error < tolerance; }  // false for NaN
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares analytic and numeric gradients of sum(f(inputs) * R) with a fixed
/// random R, over every element of every input.
inline GradCheckResult check_op_gradient(const std::string& name, const GradFn& f, const std::vector<Tensor<double>>& inputs,
                                         std::uint64_t seed, double tol = kOpTolerance) {
  Tensor<double> weights;
  {
    NoGradGuard guard;
    Shape out_shape = f(inputs).shape();
    Rng rng(seed ^ 0xC0FFEEULL);
    std::vector<double> w(shape_numel(out_shape));
    for (double& v : w) v = rng.uniform(-1.0, 1.0);
    weights = Tensor<double>(out_shape, std::move(w));
  }
  auto& tape = Tape<double>::active();
  tape.reset();
  std::vector<Tensor<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(x.detach().set_requires_grad(true));
  Tensor<double> loss = sum(mul(f(leaves), weights));
  backward(loss);
  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto g = leaves[i].has_grad() ? std::vector<double>(leaves[i].grad().begin(), leaves[i].grad().end())
                                        : std::vector<double>(leaves[i].numel(), 0.0);
    analytic.insert(analytic.end(), g.begin(), g.end());
    auto partial = [&](const Tensor<double>& xi) {
      auto args = inputs;
      args[i] = xi;
      return sum(mul(f(args), weights)).item();
    };
    const auto n = finite_diff_grad(partial, inputs[i]);
    numeric.insert(numeric.end(), n.data().begin(), n.data().end());
  }
  tape.reset();
  return {name, relative_error(analytic, numeric), tol};
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Values in [0.2, 1] with a random sign, so |.| stays away from its kink.
inline Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace detail

/// Every differentiable op on random inputs in [-1, 1].
inline std::vector<GradCheckResult> op_gradient_suite(std::uint64_t seed = 1, double tol = kOpTolerance) {
  using detail::random_tensor;
  using V = std::vector<Tensor<double>>;
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, const GradFn& f, V inputs) {
    out.push_back(check_op_gradient(name, f, inputs, seed + out.size(), tol));
  };
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };

  run("add", [](const V& x) { return add(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  run("add_broadcast", [](const V& x) { return add(x[0], x[1]); }, {r({2, 3, 4}), r({4})});
  run("sub", [](const V& x) { return sub(x[0], x[1]); }, {r({3, 4}), r({4})});
  run("mul", [](const V& x) { return mul(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  run("mul_broadcast", [](const V& x) { return mul(x[0], x[1]); }, {r({2, 5}), r({5})});
  run("scale", [](const V& x) { return scale(x[0], 1.7); }, {r({6})});
  run("add_scalar", [](const V& x) { return add_scalar(x[0], -0.3); }, {r({6})});
  run("abs", [](const V& x) { return abs(x[0]); }, {detail::away_from_zero({7}, rng)});
  run("sum", [](const V& x) { return sum(x[0]); }, {r({2, 3})});
  run("mean", [](const V& x) { return mean(x[0]); }, {r({2, 3})});
  run("matmul", [](const V& x) { return matmul(x[0], x[1]); }, {r({4, 5}), r({5, 3})});
  run("reshape", [](const V& x) { return reshape(x[0], {3, 4}); }, {r({2, 6})});
  run("transpose", [](const V& x) { return transpose(x[0], {2, 0, 1}); }, {r({2, 3, 4})});
  run("pad_reflect", [](const V& x) { return pad_reflect(x[0], 1, 2, 2, 1); }, {r({1, 2, 4, 5})});
  run("crop", [](const V& x) { return crop(x[0], 1, 2, 3, 2); }, {r({1, 2, 5, 5})});
  run("concat", [](const V& x) { return concat(V{x[0], x[1]}, 1); }, {r({2, 3, 2}), r({2, 1, 2})});
  run("conv2d_3x3", [](const V& x) { return conv2d(x[0], x[1], x[2]); }, {r({2, 3, 5, 6}), r({4, 3, 3, 3}), r({4})});
  run("conv2d_1x1", [](const V& x) { return conv2d(x[0], x[1], x[2]); }, {r({1, 4, 3, 3}), r({2, 4, 1, 1}), r({2})});
  run("depthwise_conv2d", [](const V& x) { return depthwise_conv2d(x[0], x[1], x[2]); },
      {r({2, 3, 5, 4}), r({3, 1, 3, 3}), r({3})});
  run("linear", [](const V& x) { return linear(x[0], x[1], x[2]); }, {r({2, 3, 4}), r({4, 5}), r({5})});
  run("channel_linear", [](const V& x) { return channel_linear(x[0], x[1], x[2]); },
      {r({2, 3, 2, 3}), r({3, 4}), r({4})});
  run("layer_norm_last", [](const V& x) { return layer_norm(x[0], x[1], x[2]); }, {r({3, 6}), r({6}), r({6})});
  run("layer_norm_channel", [](const V& x) { return layer_norm(x[0], x[1], x[2], kLayerNormEps, 1); },
      {r({2, 4, 2, 3}), r({4}), r({4})});
  run("softmax", [](const V& x) { return softmax(x[0]); }, {r({3, 5})});
  run("gelu", [](const V& x) { return gelu(x[0]); }, {r({9})});
  run("l1_loss", [](const V& x) { return l1_loss(x[0], x[1]); },
      {detail::away_from_zero({6}, rng), Tensor<double>(Shape{6}, 0.0)});
  run("window_partition", [](const V& x) { return window_partition(x[0], 2); }, {r({1, 3, 4, 4})});
  run("window_merge", [](const V& x) { return window_merge(x[0], 2, 4, 6); }, {r({6, 4, 3})});
  run("window_attention", [](const V& x) { return window_attention(x[0], x[1], x[2], x[3], 2); },
      {r({3, 4, 4}), r({3, 4, 4}), r({3, 4, 4}), r({2, 4, 4})});
  {
    const auto table = r(RelativePositionBias<double>::table_shape(2, 2, BiasMode::offset_tied));
    run("relative_bias_offset_tied",
        [](const V& x) { return relative_bias_materialize(make_relative_bias(x[0], 2, 2, BiasMode::offset_tied)); },
        {table});
  }
  for (Variant var : {Variant::vanilla, Variant::vanilla_c, Variant::lewin, Variant::enhanced_lewin}) {
    for (BiasMode mode : {BiasMode::offset_tied, BiasMode::free}) {
      const std::size_t c = 4, m = 2, heads = 2;
      V in{r({1, c, 3, 5}), r({c, c}), r({c, c}), r({c, c}), r(RelativePositionBias<double>::table_shape(m, heads, mode)),
           r({c, c}), r({c})};
      const bool conv = uses_conv_projection(var);
      if (conv) {
        for (int i = 0; i < 3; ++i) {
          in.push_back(r({c, 1, 3, 3}));
          in.push_back(r({c}));
          in.push_back(r({c}));
          in.push_back(r({c}));
        }
      }
      AttentionConfig cfg{m, heads, var, mode};
      run(std::string("wmsa_") + std::string(to_string(var)) + "_" + std::string(to_string(mode)),
          [cfg, conv](const V& x) {
            WmsaParams<double> p;
            p.qkv.wq = {x[1], {}};
            p.qkv.wk = {x[2], {}};
            p.qkv.wv = {x[3], {}};
            p.bias = make_relative_bias(x[4], cfg.window, cfg.heads, cfg.bias_mode);
            p.proj = {x[5], x[6]};
            if (conv) {
              p.qkv.dq = DepthwiseConv2dParams<double>{x[7], x[8]};
              p.qkv.nq = LayerNormParams<double>{x[9], x[10]};
              p.qkv.dk = DepthwiseConv2dParams<double>{x[11], x[12]};
              p.qkv.nk = LayerNormParams<double>{x[13], x[14]};
              p.qkv.dv = DepthwiseConv2dParams<double>{x[15], x[16]};
              p.qkv.nv = LayerNormParams<double>{x[17], x[18]};
            }
            return wmsa(x[0], cfg, p);
          },
          in);
    }
  }
  run("leff",
      [](const V& x) {
        FfnParams<double> p{{x[1], x[2]}, DepthwiseConv2dParams<double>{x[3], x[4]}, {x[5], x[6]}};
        return leff_forward_tokens(x[0], 2, 3, p);
      },
      {r({6, 2}), r({2, 8}), r({8}), r({8, 1, 3, 3}), r({8}), r({8, 2}), r({2})});
  return out;
}

/// The smallest network the end-to-end check uses: one group, block and
/// layer, 8 channels, 4x4 windows.
inline ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.in_channels = 1;
  cfg.groups = cfg.blocks = cfg.layers = 1;
  cfg.attention.window = 4;
  cfg.attention.heads = 2;
  return cfg;
}

struct ModelGradCheck {
  GradCheckResult result;
  std::size_t sampled = 0;
};

/// End-to-end check on a [1, C_in, size, size] input with every parameter
/// randomized (the zero-initialized ones included). Loss is sum(out * R);
/// `samples` scalars are drawn across the whole store.
inline ModelGradCheck model_gradient_check(const ModelConfig& cfg, std::uint64_t seed = 7, std::size_t samples = 24,
                                           std::size_t size = 8, double tol = kModelTolerance) {
  cfg.validate();
  Rng rng(seed);
  ParamStore<double> params;
  for (const auto& spec : param_layout(cfg)) {
    auto t = detail::random_tensor(spec.shape, rng, -0.5, 0.5);
    if (spec.init == InitKind::ones) t = add_scalar(t, 1.0).detach();
    params.add(spec.name, t);
  }
  const auto input = detail::random_tensor({1, cfg.in_channels, size, size}, rng, 0.0, 1.0);
  const auto weights = detail::random_tensor({1, cfg.in_channels, size, size}, rng);
  auto loss_of = [&] { return sum(mul(densformer_forward(input, params, cfg), weights)); };

  auto& tape = Tape<double>::active();
  tape.reset();
  params.zero_grad();
  backward(loss_of());

  struct Pick {
    std::size_t entry, index;
  };
  std::vector<Pick> picks;
  const std::size_t total = params.scalar_count();
  for (std::size_t s = 0; s < std::min(samples, total); ++s) {
    std::size_t flat = rng.uniform_int(total), e = 0;
    for (const auto& entry : params) {
      if (flat < entry.tensor.numel()) break;
      flat -= entry.tensor.numel();
      ++e;
    }
    picks.push_back({e, flat});
  }
  std::vector<Tensor<double>*> by_index;
  for (auto& entry : params) by_index.push_back(&entry.tensor);
  std::vector<double> analytic, numeric;
  {
    NoGradGuard guard;
    for (const auto& p : picks) {
      Tensor<double>& t = *by_index[p.entry];
      analytic.push_back(t.has_grad() ? t.grad()[p.index] : 0.0);
      double& v = t.mutable_data()[p.index];
      const double orig = v;
      v = orig + kFiniteDiffStep;
      const double up = loss_of().item();
      v = orig - kFiniteDiffStep;
      const double down = loss_of().item();
      v = orig;
      numeric.push_back((up - down) / (2 * kFiniteDiffStep));
    }
  }
  tape.reset();
  return {{"model_" + std::string(to_string(cfg.attention.variant)), relative_error(analytic, numeric), tol},
          picks.size()};
}

}  // namespace densformer

#endif  // DENSFORMER_GRADCHECK_HPP
