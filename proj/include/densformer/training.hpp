#ifndef DENSFORMER_TRAINING_HPP
#define DENSFORMER_TRAINING_HPP

// L1 objective, ADAM, the step-halving learning-rate schedule, dihedral
// augmentation and the training loop.

#include <functional>
#include <optional>
#include <ostream>

#include "densformer/config.hpp"
#include "densformer/image.hpp"

namespace densformer {

/// Mean absolute error over every element.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

/// lr0 * 0.5^floor(iter / halve_every)
inline double lr_at(std::size_t iter, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(0.5, static_cast<double>(iter / cfg.halve_every));
}

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;  // aligned with the parameter store order
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;

  static AdamState zeros_for(const ParamStore<T>& params) {
    AdamState s;
    for (const auto& e : params) {
      s.m.emplace_back(e.tensor.numel(), T(0));
      s.v.emplace_back(e.tensor.numel(), T(0));
    }
    return s;
  }

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected ADAM update over all parameters in store order, then
/// clears the gradients.
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) state = AdamState<T>::zeros_for(params);
  for (const auto& e : params) {
    if (!e.tensor.has_grad()) throw TapeError("adam_step: parameter " + e.name + " has no gradient");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  std::size_t i = 0;
  for (auto& e : params) {
    auto p = e.tensor.mutable_data();
    const auto g = e.tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      p[j] = static_cast<T>(p[j] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    e.tensor.zero_grad();
    ++i;
  }
}

/// One of the 8 dihedral transforms: horizontal flip when t >= 4, then
/// (t % 4) quarter turns counter-clockwise. Quarter turns need a square image.
inline ImageBuffer dihedral(const ImageBuffer& img, unsigned t) {
  if (t >= 8) throw std::invalid_argument("dihedral: transform index must be < 8");
  const unsigned turns = t % 4;
  if (turns % 2 == 1 && img.height != img.width) throw ImageError("dihedral: rotation needs a square image");
  ImageBuffer out(img.height, img.width, img.channels);
  const std::size_t n = img.height;  // == width whenever turns is odd
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      std::size_t sy = y, sx = x;
      switch (turns) {
        case 1: sy = x; sx = n - 1 - y; break;
        case 2: sy = img.height - 1 - y; sx = img.width - 1 - x; break;
        case 3: sy = n - 1 - x; sx = y; break;
        default: break;
      }
      if (t >= 4) sx = img.width - 1 - sx;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

inline ImageBuffer augment(const ImageBuffer& patch, Rng& rng) {
  return dihedral(patch, static_cast<unsigned>(rng.uniform_int(8)));
}

struct TrainLogRow {
  std::size_t iter = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> val_psnr;

  bool operator==(const TrainLogRow&) const = default;
};

inline void write_log_header(std::ostream& os) { os << "iter,lr,loss,val_psnr\n"; }

inline void write_log_row(std::ostream& os, const TrainLogRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,", r.iter, r.lr, r.loss);
  os << buf;
  if (r.val_psnr) os << format_psnr(*r.val_psnr);
  os << '\n';
}

/// Everything needed to resume training bit-exactly.
struct TrainState {
  ModelConfig model;
  TrainConfig train;
  ParamStore<float> params;
  AdamState<float> adam;
  std::size_t iteration = 0;
  std::uint64_t rng_state = 0;
};

/// Seed of the fixed validation noise, derived from the run seed.
inline std::uint64_t validation_seed(std::uint64_t seed) { return seed ^ 0x5A17F00D5EEDULL; }

/// Runs sample -> noise -> augment -> forward -> L1 -> backward -> ADAM.
/// Per sample the stream is consumed as: image index, patch origin, sigma
/// choice (only when several), noise, dihedral index.
class Trainer {
 public:
  Trainer(const ModelConfig& model, const TrainConfig& train, std::vector<ImageBuffer> data,
          std::optional<ImageBuffer> validation = std::nullopt)
      : Trainer(fresh_state(model, train), std::move(data), std::move(validation)) {}

  Trainer(TrainState state, std::vector<ImageBuffer> data, std::optional<ImageBuffer> validation = std::nullopt)
      : state_(std::move(state)), data_(std::move(data)), rng_(state_.rng_state) {
    state_.model.validate();
    state_.train.validate();
    if (data_.empty()) throw ImageError("train: dataset is empty");
    for (const auto& img : data_) {
      if (img.channels != state_.model.in_channels) {
        throw ImageError("train: image channels " + std::to_string(img.channels) + " != model in_channels " +
                         std::to_string(state_.model.in_channels));
      }
      if (img.height < state_.train.patch || img.width < state_.train.patch) {
        throw ImageError("train: image smaller than the training patch");
      }
    }
    if (state_.adam.m.size() != state_.params.size()) state_.adam = AdamState<float>::zeros_for(state_.params);
    if (!validation) {
      const auto& f = data_.front();
      const std::size_t p = state_.train.patch;
      validation = crop_image(f, (f.height - p) / 2, (f.width - p) / 2, p, p);
    }
    val_clean_ = *validation;
    Rng vr(validation_seed(state_.train.seed));
    val_noisy_ = add_awgn(val_clean_, state_.train.sigmas.front(), vr);
  }

  static TrainState fresh_state(const ModelConfig& model, const TrainConfig& train) {
    TrainState s;
    s.model = model;
    s.train = train;
    s.params = init_params<float>(model, train.seed);
    s.adam = AdamState<float>::zeros_for(s.params);
    s.rng_state = train.seed;
    return s;
  }

  TrainLogRow step() {
    const auto& tc = state_.train;
    std::vector<ImageBuffer> clean, noisy;
    for (std::size_t b = 0; b < tc.batch; ++b) {
      const auto& img = data_[rng_.uniform_int(data_.size())];
      const auto o = sample_patch_origin(img, tc.patch, rng_);
      ImageBuffer c = crop_image(img, o.top, o.left, tc.patch, tc.patch);
      const double sigma = tc.sigmas.size() > 1 ? tc.sigmas[rng_.uniform_int(tc.sigmas.size())] : tc.sigmas.front();
      ImageBuffer n = add_awgn(c, sigma, rng_);
      const auto t = static_cast<unsigned>(rng_.uniform_int(8));
      clean.push_back(dihedral(c, t));
      noisy.push_back(dihedral(n, t));
    }
    auto& tape = Tape<float>::active();
    tape.reset();
    Tensor<float> pred = densformer_forward(images_to_tensor<float>(noisy), state_.params, state_.model);
    Tensor<float> loss = l1_loss(pred, images_to_tensor<float>(clean));
    TrainLogRow row;
    row.iter = state_.iteration;
    row.loss = loss.item();
    if (!std::isfinite(row.loss)) {
      tape.reset();
      throw NumericalError("train: non-finite loss " + std::to_string(row.loss) + " at iteration " +
                           std::to_string(row.iter));
    }
    backward(loss);
    row.lr = lr_at(state_.iteration, tc);
    adam_step(state_.params, state_.adam, row.lr, tc);
    tape.reset();
    ++state_.iteration;
    state_.rng_state = rng_.state();
    if ((tc.val_every > 0 && state_.iteration % tc.val_every == 0) || state_.iteration == tc.max_iters) {
      row.val_psnr = validate();
    }
    return row;
  }

  /// Steps until `max_iters` (or `until`, when smaller) is reached.
  std::vector<TrainLogRow> run(std::optional<std::size_t> until = std::nullopt,
                               const std::function<void(const TrainLogRow&)>& on_row = {}) {
    const std::size_t stop = std::min(until.value_or(state_.train.max_iters), state_.train.max_iters);
    std::vector<TrainLogRow> rows;
    while (state_.iteration < stop) {
      rows.push_back(step());
      if (on_row) on_row(rows.back());
    }
    return rows;
  }

  /// PSNR of the denoised fixed validation patch against its clean version.
  double validate() const {
    NoGradGuard guard;
    Tensor<float> out = densformer_forward(image_to_tensor<float>(val_noisy_), state_.params, state_.model);
    return psnr(tensor_to_image(out), val_clean_);
  }

  const TrainState& state() const { return state_; }
  const ImageBuffer& validation_clean() const { return val_clean_; }
  const ImageBuffer& validation_noisy() const { return val_noisy_; }

 private:
  TrainState state_;
  std::vector<ImageBuffer> data_;
  Rng rng_;
  ImageBuffer val_clean_;
  ImageBuffer val_noisy_;
};

struct TrainOutcome {
  TrainState state;
  std::vector<TrainLogRow> log;
};

inline TrainOutcome train_loop(const ModelConfig& model, const TrainConfig& train, std::vector<ImageBuffer> dataset,
                               std::optional<ImageBuffer> validation = std::nullopt) {
  Trainer trainer(model, train, std::move(dataset), std::move(validation));
  auto log = trainer.run();
  return {trainer.state(), std::move(log)};
}

}  // namespace densformer

#endif  // DENSFORMER_TRAINING_HPP
