#ifndef DENSFORMER_MODEL_HPP
#define DENSFORMER_MODEL_HPP

// The DenSformer network: shallow conv, densely connected Sformer groups of
// Sformer blocks of ETransformer layers, and a residual reconstruction conv.
//
//   F0   = conv3x3(I_in)
//   I_g  = fuse(O_0 .. O_{g-1})  (dense/cross), O_{g-1} (local); O_0 = F0
//   O_g  = blocks(I_g) + I_g      (no group residual for cross)
//   I_out = I_in + conv3x3(O_G + F0)

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>

#include "densformer/attention.hpp"
#include "densformer/rng.hpp"

namespace densformer {

enum class FfnKind { mlp, leff };
enum class Connection { dense, local, cross };

inline std::string_view to_string(FfnKind f) { return f == FfnKind::mlp ? "mlp" : "leff"; }
inline std::optional<FfnKind> parse_ffn(std::string_view s) {
  if (s == "mlp") return FfnKind::mlp;
  if (s == "leff") return FfnKind::leff;
  return std::nullopt;
}

inline std::string_view to_string(Connection c) {
  switch (c) {
    case Connection::dense: return "dense";
    case Connection::local: return "local";
    case Connection::cross: return "cross";
  }
  return "?";
}
inline std::optional<Connection> parse_connection(std::string_view s) {
  for (Connection c : {Connection::dense, Connection::local, Connection::cross}) {
    if (s == to_string(c)) return c;
  }
  return std::nullopt;
}

/// Feed-forward kind that goes with a transformer variant in the ablation.
inline FfnKind default_ffn(Variant v) {
  return (v == Variant::lewin || v == Variant::enhanced_lewin) ? FfnKind::leff : FfnKind::mlp;
}

struct ModelConfig {
  std::size_t channels = 64;
  std::size_t in_channels = 3;
  std::size_t groups = 4;
  std::size_t blocks = 4;  // Sformer blocks per group
  std::size_t layers = 4;  // ETransformer layers per block
  AttentionConfig attention;
  FfnKind ffn = FfnKind::leff;
  std::size_t ffn_ratio = 4;
  Connection connection = Connection::dense;
  // Feed the FFN branch LN(X_{l-1}) instead of LN(X'_l).
  bool ffn_from_layer_input = false;

  void set_variant(Variant v) {
    attention.variant = v;
    ffn = default_ffn(v);
  }

  void validate() const {
    if (channels == 0 || groups == 0 || blocks == 0 || layers == 0 || ffn_ratio == 0) {
      throw std::invalid_argument("model config: counts must be >= 1");
    }
    if (in_channels != 1 && in_channels != 3) throw std::invalid_argument("model config: in_channels must be 1 or 3");
    attention.validate(channels);
  }

  bool operator==(const ModelConfig& o) const {
    return channels == o.channels && in_channels == o.in_channels && groups == o.groups && blocks == o.blocks &&
           layers == o.layers && attention.window == o.attention.window && attention.heads == o.attention.heads &&
           attention.variant == o.attention.variant && attention.bias_mode == o.attention.bias_mode &&
           ffn == o.ffn && ffn_ratio == o.ffn_ratio && connection == o.connection &&
           ffn_from_layer_input == o.ffn_from_layer_input;
  }
};

template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  ParamStore() = default;
  // Copies are deep: parameters are values, not shared handles.
  ParamStore(const ParamStore& o) {
    for (const auto& e : o.entries_) add(e.name, e.tensor.detach());
  }
  ParamStore& operator=(const ParamStore& o) {
    if (this != &o) {
      ParamStore tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  void add(std::string name, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(t)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("param store: no tensor named " + name);
    return entries_[it->second].tensor;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamStore&>(*this).get(name));
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Deep copy (no shared storage, no gradients).
  template <class U = T>
  ParamStore<U> clone_as() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, cast<U>(e.tensor));
    return out;
  }

  bool values_equal(const ParamStore& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = o.entries_[i];
      if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) return false;
      if (!std::equal(a.tensor.data().begin(), a.tensor.data().end(), b.tensor.data().begin())) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class InitKind { conv_uniform, trunc_normal, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
  std::size_t fan_in = 0;
};

inline constexpr double kWeightStd = 0.02;

namespace detail {

inline std::string layer_prefix(std::size_t g, std::size_t b, std::size_t l) {
  return "g" + std::to_string(g) + ".b" + std::to_string(b) + ".l" + std::to_string(l) + ".";
}
inline std::string block_prefix(std::size_t g, std::size_t b) {
  return "g" + std::to_string(g) + ".b" + std::to_string(b) + ".";
}

inline void conv_specs(std::vector<ParamSpec>& out, const std::string& name, std::size_t c_out, std::size_t c_in,
                       std::size_t k, bool zero = false) {
  out.push_back({name + ".weight", {c_out, c_in, k, k}, zero ? InitKind::zeros : InitKind::conv_uniform, c_in * k * k});
  out.push_back({name + ".bias", {c_out}, InitKind::zeros});
}

inline void linear_specs(std::vector<ParamSpec>& out, const std::string& name, std::size_t d_in, std::size_t d_out,
                         bool bias) {
  out.push_back({name + ".weight", {d_in, d_out}, InitKind::trunc_normal, d_in});
  if (bias) out.push_back({name + ".bias", {d_out}, InitKind::zeros});
}

inline void norm_specs(std::vector<ParamSpec>& out, const std::string& name, std::size_t d) {
  out.push_back({name + ".gamma", {d}, InitKind::ones});
  out.push_back({name + ".beta", {d}, InitKind::zeros});
}

}  // namespace detail

/// Every learnable tensor of the model, in construction order.
inline std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  using namespace detail;
  const std::size_t c = cfg.channels, hidden = c * cfg.ffn_ratio, m = cfg.attention.window;
  std::vector<ParamSpec> out;
  conv_specs(out, "pre", c, cfg.in_channels, 3);
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    if (cfg.connection != Connection::local && g > 0) conv_specs(out, "fuse" + std::to_string(g), c, (g + 1) * c, 1);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = layer_prefix(g, b, l);
        norm_specs(out, p + "norm1", c);
        for (const char* which : {"q", "k", "v"}) {
          out.push_back({p + "attn.w" + which, {c, c}, InitKind::trunc_normal, c});
          if (uses_conv_projection(cfg.attention.variant)) {
            conv_specs(out, p + "attn.d" + which, c, 1, 3);
            norm_specs(out, p + "attn.n" + which, c);
          }
        }
        out.push_back({p + "attn.rel_bias",
                       RelativePositionBias<float>::table_shape(m, cfg.attention.heads, cfg.attention.bias_mode),
                       InitKind::zeros});
        linear_specs(out, p + "attn.proj", c, c, true);
        norm_specs(out, p + "norm2", c);
        linear_specs(out, p + "ffn.fc1", c, hidden, true);
        if (cfg.ffn == FfnKind::leff) conv_specs(out, p + "ffn.dw", hidden, 1, 3);
        linear_specs(out, p + "ffn.fc2", hidden, c, true);
      }
      conv_specs(out, block_prefix(g, b) + "conv", c, c, 3);
    }
  }
  conv_specs(out, "rec", cfg.in_channels, c, 3, /*zero=*/true);
  return out;
}

/// Exact number of learnable scalars of the model built from `cfg`.
inline std::size_t param_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : param_layout(cfg)) n += shape_numel(s.shape);
  return n;
}

/// Linear/attention weights ~ N(0, 0.02) truncated at 2 sigma; conv weights
/// U(+-1/sqrt(fan_in)); biases, bias tables and the reconstruction conv zero;
/// norm gains one. Draws follow layout order from a single stream.
template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<T> store;
  for (const auto& spec : param_layout(cfg)) {
    Buffer<T> v(shape_numel(spec.shape));
    switch (spec.init) {
      case InitKind::zeros: break;
      case InitKind::ones: std::fill(v.begin(), v.end(), T(1)); break;
      case InitKind::conv_uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case InitKind::trunc_normal:
        for (T& x : v) {
          double z;
          do {
            z = rng.normal();
          } while (std::abs(z) > 2.0);
          x = static_cast<T>(z * kWeightStd);
        }
        break;
    }
    store.add(spec.name, Tensor<T>(spec.shape, std::move(v)));
  }
  return store;
}

template <class T>
struct FfnParams {
  LinearParams<T> fc1;
  std::optional<DepthwiseConv2dParams<T>> dw;  // LeFF only
  LinearParams<T> fc2;
};

template <class T>
struct ETransformerParams {
  LayerNormParams<T> norm1;
  WmsaParams<T> attn;
  LayerNormParams<T> norm2;
  FfnParams<T> ffn;
};

template <class T>
ETransformerParams<T> etransformer_params(const ParamStore<T>& s, const std::string& p, const ModelConfig& cfg) {
  auto norm = [&](const std::string& n) { return LayerNormParams<T>{s.get(n + ".gamma"), s.get(n + ".beta")}; };
  auto conv = [&](const std::string& n) { return DepthwiseConv2dParams<T>{s.get(n + ".weight"), s.get(n + ".bias")}; };
  auto lin = [&](const std::string& n) { return LinearParams<T>{s.get(n + ".weight"), s.get(n + ".bias")}; };
  ETransformerParams<T> e;
  e.norm1 = norm(p + "norm1");
  e.norm2 = norm(p + "norm2");
  auto& qkv = e.attn.qkv;
  qkv.wq = {s.get(p + "attn.wq"), {}};
  qkv.wk = {s.get(p + "attn.wk"), {}};
  qkv.wv = {s.get(p + "attn.wv"), {}};
  if (uses_conv_projection(cfg.attention.variant)) {
    qkv.dq = conv(p + "attn.dq");
    qkv.dk = conv(p + "attn.dk");
    qkv.dv = conv(p + "attn.dv");
    qkv.nq = norm(p + "attn.nq");
    qkv.nk = norm(p + "attn.nk");
    qkv.nv = norm(p + "attn.nv");
  }
  e.attn.bias = make_relative_bias(s.get(p + "attn.rel_bias"), cfg.attention.window, cfg.attention.heads,
                                   cfg.attention.bias_mode);
  e.attn.proj = lin(p + "attn.proj");
  e.ffn.fc1 = lin(p + "ffn.fc1");
  if (cfg.ffn == FfnKind::leff) e.ffn.dw = conv(p + "ffn.dw");
  e.ffn.fc2 = lin(p + "ffn.fc2");
  return e;
}

/// Two-layer MLP over channels: linear (C -> rC), GELU, linear (rC -> C).
template <class T>
Tensor<T> mlp_forward(const Tensor<T>& x, const FfnParams<T>& p) {
  return channel_linear(gelu(channel_linear(x, p.fc1)), p.fc2);
}

/// LeFF on a spatial map: linear expansion, GELU, 3x3 depthwise conv, GELU,
/// linear projection back to C.
template <class T>
Tensor<T> leff_forward(const Tensor<T>& x, const FfnParams<T>& p) {
  if (!p.dw) throw std::invalid_argument("leff_forward: missing depthwise parameters");
  Tensor<T> t = gelu(channel_linear(x, p.fc1));
  t = gelu(depthwise_conv2d(t, *p.dw));
  return channel_linear(t, p.fc2);
}

/// LeFF on a token sequence [n, C] or [N, n, C] whose tokens tile an
/// h x w map row-major.
template <class T>
Tensor<T> leff_forward_tokens(const Tensor<T>& tokens, std::size_t h, std::size_t w, const FfnParams<T>& p) {
  if (tokens.rank() != 2 && tokens.rank() != 3) throw ShapeError("leff_forward_tokens: need [n, C] or [N, n, C]");
  const bool batched = tokens.rank() == 3;
  const std::size_t n = batched ? tokens.dim(0) : 1, count = tokens.dim(-2), c = tokens.dim(-1);
  if (h * w != count) {
    throw ShapeError("leff_forward_tokens: " + std::to_string(count) + " tokens do not tile a " + std::to_string(h) +
                     "x" + std::to_string(w) + " map");
  }
  Tensor<T> map = reshape(transpose(reshape(tokens, {n, count, c}), {0, 2, 1}), {n, c, h, w});
  Tensor<T> out = leff_forward(map, p);
  const std::size_t c_out = out.dim(1);
  Tensor<T> seq = transpose(reshape(out, {n, c_out, count}), {0, 2, 1});
  return batched ? seq : reshape(seq, {count, c_out});
}

template <class T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnParams<T>& p, FfnKind kind) {
  return kind == FfnKind::leff ? leff_forward(x, p) : mlp_forward(x, p);
}

/// X' = W-MSA(LN(X)) + X;  X_out = FFN(LN(X')) + X'.
template <class T>
Tensor<T> etransformer_forward(const Tensor<T>& x, const ETransformerParams<T>& p, const ModelConfig& cfg) {
  Tensor<T> x1 = add(wmsa(layer_norm(x, p.norm1, kLayerNormEps, 1), cfg.attention, p.attn), x);
  const Tensor<T>& ffn_in = cfg.ffn_from_layer_input ? x : x1;
  return add(ffn_forward(layer_norm(ffn_in, p.norm2, kLayerNormEps, 1), p.ffn, cfg.ffn), x1);
}

template <class T>
Tensor<T> etransformer_forward(const Tensor<T>& x, const ParamStore<T>& s, const std::string& prefix,
                               const ModelConfig& cfg) {
  return etransformer_forward(x, etransformer_params(s, prefix, cfg), cfg);
}

/// F_out = conv3x3(ETLayers(F)) + F.
template <class T>
Tensor<T> sformer_block_forward(const Tensor<T>& f, const ParamStore<T>& s, std::size_t g, std::size_t b,
                                const ModelConfig& cfg) {
  Tensor<T> t = f;
  for (std::size_t l = 0; l < cfg.layers; ++l) t = etransformer_forward(t, s, detail::layer_prefix(g, b, l), cfg);
  const std::string conv = detail::block_prefix(g, b) + "conv";
  return add(conv2d(t, s.get(conv + ".weight"), s.get(conv + ".bias")), f);
}

/// Blocks(I) + I; the cross scheme drops the group residual.
template <class T>
Tensor<T> sformer_group_forward(const Tensor<T>& in, const ParamStore<T>& s, std::size_t g, const ModelConfig& cfg) {
  Tensor<T> t = in;
  for (std::size_t b = 0; b < cfg.blocks; ++b) t = sformer_block_forward(t, s, g, b, cfg);
  return cfg.connection == Connection::cross ? t : add(t, in);
}

/// Channel concatenation of every earlier output followed by a 1x1 conv to C.
template <class T>
Tensor<T> dense_fuse(const std::vector<Tensor<T>>& prev, const Conv2dParams<T>& p) {
  if (prev.empty()) throw ShapeError("dense_fuse: no inputs");
  for (const auto& t : prev) {
    if (t.shape() != prev.front().shape()) throw ShapeError("dense_fuse: input shapes differ");
  }
  Tensor<T> cat = prev.size() == 1 ? prev.front() : concat(prev, 1);
  return conv2d(cat, p);
}

template <class T>
Tensor<T> densformer_forward(const Tensor<T>& input, const ParamStore<T>& s, const ModelConfig& cfg) {
  detail::check_nchw(input.shape(), "densformer_forward");
  if (input.dim(1) != cfg.in_channels) {
    throw ShapeError("densformer_forward: image has " + std::to_string(input.dim(1)) + " channels, model expects " +
                     std::to_string(cfg.in_channels));
  }
  Tensor<T> f0 = conv2d(input, s.get("pre.weight"), s.get("pre.bias"));
  std::vector<Tensor<T>> outs{f0};
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    Tensor<T> in = outs.back();
    if (cfg.connection != Connection::local && g > 0) {
      const std::string f = "fuse" + std::to_string(g);
      in = dense_fuse(outs, Conv2dParams<T>{s.get(f + ".weight"), s.get(f + ".bias")});
    }
    outs.push_back(sformer_group_forward(in, s, g, cfg));
  }
  Tensor<T> deep = add(outs.back(), f0);
  return add(input, conv2d(deep, s.get("rec.weight"), s.get("rec.bias")));
}

}  // namespace densformer

#endif  // DENSFORMER_MODEL_HPP
