#ifndef DENSFORMER_CLI_HPP
#define DENSFORMER_CLI_HPP

// Command-line front end: train, denoise, eval, gradcheck, ablate.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical abort or failed
// gradient check.

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

#include "densformer/checkpoint.hpp"
#include "densformer/gradcheck.hpp"
#include "densformer/inference.hpp"

namespace densformer::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumerical = 3 };

struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
};

inline std::vector<ImageBuffer> load_dataset(const std::string& dir) {
  std::vector<ImageBuffer> out;
  for (const auto& p : list_images(dir)) out.push_back(load_image(p));
  if (out.empty()) throw ImageError("no .pgm/.ppm images in " + dir);
  for (const auto& img : out) {
    if (img.channels != out.front().channels) throw ImageError("dataset mixes gray and color images");
  }
  return out;
}

/// Defaults, then the config file, then explicit flags. in_channels follows
/// the data unless the file sets it.
inline ResolvedConfig resolve_config(const std::string& config_path, const std::vector<ImageBuffer>* data) {
  ResolvedConfig r;
  KeyValues kv;
  if (!config_path.empty()) kv = read_key_value_file(config_path);
  apply_key_values(kv, r.model, r.train);
  const bool has_in = std::any_of(kv.begin(), kv.end(), [](const auto& e) { return e.first == "in_channels"; });
  if (data && !has_in) r.model.in_channels = data->front().channels;
  return r;
}

inline void print_config(std::ostream& os, const ResolvedConfig& r) {
  os << "# resolved config\n" << format_key_values(to_key_values(r.model)) << format_key_values(to_key_values(r.train));
}

inline void print_model_config(std::ostream& os, const ModelConfig& m) {
  os << "# resolved config\n" << format_key_values(to_key_values(m));
}

struct TrainOptions {
  std::string data, config, out, log;
  std::optional<double> sigma;
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> seed;
};

inline int cmd_train(const TrainOptions& o, std::ostream& out) {
  const auto data = load_dataset(o.data);
  auto r = resolve_config(o.config, &data);
  if (o.sigma) r.train.sigmas = {*o.sigma};
  if (o.iters) r.train.max_iters = *o.iters;
  if (o.seed) r.train.seed = *o.seed;
  r.model.validate();
  r.train.validate();
  print_config(out, r);

  const std::string log_path =
      o.log.empty() ? std::filesystem::path(o.out).replace_extension(".csv").string() : o.log;
  std::ofstream log(log_path);
  if (!log) throw ImageError("cannot write log " + log_path);
  write_log_header(log);
  Trainer trainer(r.model, r.train, data);
  out << "# params=" << param_count(r.model) << " log=" << log_path << "\n";
  trainer.run(std::nullopt, [&](const TrainLogRow& row) {
    write_log_row(log, row);
    if (row.val_psnr) out << "iter " << row.iter + 1 << " loss " << row.loss << " val_psnr " << format_psnr(*row.val_psnr) << "\n";
    const auto done = trainer.state().iteration;
    if (r.train.ckpt_every > 0 && done % r.train.ckpt_every == 0 && done < r.train.max_iters) {
      save_checkpoint(o.out, trainer.state());
    }
  });
  save_checkpoint(o.out, trainer.state());
  out << "# checkpoint " << o.out << "\n";
  return kOk;
}

inline int cmd_denoise(const std::string& ckpt, const std::string& in, const std::string& out_path, std::ostream& out) {
  const TrainState s = load_checkpoint(ckpt);
  print_config(out, {s.model, s.train});
  const ImageBuffer img = load_image(in);
  save_image(out_path, denoise(img, s.params, s.model));
  out << "# wrote " << out_path << "\n";
  return kOk;
}

struct EvalRow {
  std::string image;
  double noisy_psnr = 0, psnr = 0, ssim = 0;
};

/// Noise is drawn from one stream seeded with `seed`, images in name order.
inline std::vector<EvalRow> evaluate(const TrainState& s, const std::string& dir, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EvalRow> rows;
  for (const auto& p : list_images(dir)) {
    const ImageBuffer clean = load_image(p);
    const ImageBuffer noisy = add_awgn(clean, sigma, rng);
    const ImageBuffer restored = denoise(noisy, s.params, s.model);
    rows.push_back({p.filename().string(), psnr(noisy, clean), psnr(restored, clean), ssim(restored, clean)});
  }
  if (rows.empty()) throw ImageError("no .pgm/.ppm images in " + dir);
  return rows;
}

inline int cmd_eval(const std::string& ckpt, const std::string& dir, double sigma, std::uint64_t seed,
                    std::ostream& out) {
  const TrainState s = load_checkpoint(ckpt);
  print_config(out, {s.model, s.train});
  out << "# eval sigma=" << detail::format_double(sigma) << " seed=" << seed << "\n";
  const auto rows = evaluate(s, dir, sigma, seed);
  out << "image,noisy_psnr,psnr,ssim\n";
  double np = 0, p = 0, ss = 0;
  for (const auto& r : rows) {
    out << r.image << "," << format_psnr(r.noisy_psnr) << "," << format_psnr(r.psnr) << "," << format_ssim(r.ssim) << "\n";
    np += r.noisy_psnr;
    p += r.psnr;
    ss += r.ssim;
  }
  const double n = static_cast<double>(rows.size());
  out << "mean," << format_psnr(np / n) << "," << format_psnr(p / n) << "," << format_ssim(ss / n) << "\n";
  return kOk;
}

inline int cmd_gradcheck(const std::string& config, std::optional<double> tol, std::uint64_t seed, std::ostream& out) {
  ModelConfig m = tiny_model_config();
  TrainConfig unused;
  if (!config.empty()) apply_key_values(read_key_value_file(config), m, unused);
  m.validate();
  print_model_config(out, m);
  auto results = op_gradient_suite(seed, tol.value_or(kOpTolerance));
  results.push_back(model_gradient_check(m, seed, 24, 2 * m.attention.window, tol.value_or(kModelTolerance)).result);
  out << "check,rel_error,tolerance,status\n";
  bool ok = true;
  for (const auto& r : results) {
    out << r.name << "," << std::setprecision(3) << r.rel_error << "," << r.tolerance << ","
        << (r.passed() ? "PASS" : "FAIL") << "\n";
    ok = ok && r.passed();
  }
  out << (ok ? "gradcheck PASS" : "gradcheck FAIL") << "\n";
  return ok ? kOk : kNumerical;
}

struct AblationRow {
  std::string setting;
  std::size_t params = 0;
  double noisy_psnr = 0;
  double psnr = 0;
};

inline std::vector<std::pair<std::string, ModelConfig>> ablation_settings(const std::string& axis,
                                                                          const ModelConfig& base) {
  std::vector<std::pair<std::string, ModelConfig>> out;
  if (axis == "connection") {
    for (Connection c : {Connection::dense, Connection::local, Connection::cross}) {
      ModelConfig m = base;
      m.connection = c;
      out.emplace_back(std::string(to_string(c)), m);
    }
  } else if (axis == "variant") {
    for (Variant v : {Variant::vanilla, Variant::vanilla_c, Variant::lewin, Variant::enhanced_lewin}) {
      ModelConfig m = base;
      m.set_variant(v);
      out.emplace_back(std::string(to_string(v)), m);
    }
  } else if (axis == "layers") {
    for (std::size_t l : {1, 2, 4, 6, 8}) {
      ModelConfig m = base;
      m.layers = l;
      out.emplace_back(std::to_string(l), m);
    }
  } else {
    throw ConfigError("ablate: unknown axis '" + axis + "' (connection, variant, layers)");
  }
  return out;
}

/// Trains every setting of one axis with the same data, seed and budget.
inline std::vector<AblationRow> run_ablation(const std::string& axis, const ResolvedConfig& base,
                                             const std::vector<ImageBuffer>& data) {
  std::vector<AblationRow> rows;
  for (const auto& [name, m] : ablation_settings(axis, base.model)) {
    m.validate();
    Trainer trainer(m, base.train, data);
    trainer.run();
    rows.push_back({name, param_count(m), psnr(trainer.validation_noisy(), trainer.validation_clean()),
                    trainer.validate()});
  }
  return rows;
}

struct AblateOptions {
  std::string axis, data, config;
  std::optional<double> sigma;
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> seed;
};

inline int cmd_ablate(const AblateOptions& o, std::ostream& out) {
  ablation_settings(o.axis, ModelConfig{});  // reject a bad axis before loading data
  const auto data = load_dataset(o.data);
  auto r = resolve_config(o.config, &data);
  if (o.sigma) r.train.sigmas = {*o.sigma};
  if (o.iters) r.train.max_iters = *o.iters;
  if (o.seed) r.train.seed = *o.seed;
  r.train.validate();
  print_config(out, r);
  out << "axis,setting,params,noisy_psnr,val_psnr\n";
  for (const auto& row : run_ablation(o.axis, r, data)) {
    out << o.axis << "," << row.setting << "," << row.params << "," << format_psnr(row.noisy_psnr) << ","
        << format_psnr(row.psnr) << "\n";
  }
  return kOk;
}

/// Parses argv and runs one subcommand, mapping errors to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"densformer: transformer image denoising"};
  app.require_subcommand(1);

  TrainOptions train;
  auto* t = app.add_subcommand("train", "train a model and write a checkpoint plus CSV log");
  t->add_option("--data", train.data, "directory of .pgm/.ppm training images")->required();
  t->add_option("--sigma", train.sigma, "noise level on the 0-255 scale");
  t->add_option("--config", train.config, "key=value config file");
  t->add_option("--out", train.out, "checkpoint path")->required();
  t->add_option("--iters", train.iters, "training iterations");
  t->add_option("--seed", train.seed, "random seed");
  t->add_option("--log", train.log, "CSV log path (default: checkpoint path with .csv)");

  std::string ckpt, in_path, out_path, clean_dir;
  auto* d = app.add_subcommand("denoise", "denoise one image with a checkpoint");
  d->add_option("--ckpt", ckpt)->required();
  d->add_option("--in", in_path)->required();
  d->add_option("--out", out_path)->required();

  double eval_sigma = 0;
  std::uint64_t eval_seed = 0;
  auto* e = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on noisy copies of clean images");
  e->add_option("--ckpt", ckpt)->required();
  e->add_option("--clean", clean_dir)->required();
  e->add_option("--sigma", eval_sigma)->required();
  e->add_option("--seed", eval_seed);

  std::string gc_config;
  std::optional<double> gc_tol;
  std::uint64_t gc_seed = 1;
  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  g->add_option("--config", gc_config, "model key=value file (default: the tiny config)");
  g->add_option("--tol", gc_tol, "relative error tolerance");
  g->add_option("--seed", gc_seed);

  AblateOptions ab;
  auto* a = app.add_subcommand("ablate", "train one setting per value of an ablation axis");
  a->add_option("--axis", ab.axis, "connection, variant or layers")->required();
  a->add_option("--data", ab.data)->required();
  a->add_option("--config", ab.config);
  a->add_option("--sigma", ab.sigma);
  a->add_option("--iters", ab.iters);
  a->add_option("--seed", ab.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n" << app.help();
    return kUsage;
  }

  try {
    if (*t) return cmd_train(train, out);
    if (*d) return cmd_denoise(ckpt, in_path, out_path, out);
    if (*e) return cmd_eval(ckpt, clean_dir, eval_sigma, eval_seed, out);
    if (*g) return cmd_gradcheck(gc_config, gc_tol, gc_seed, out);
    if (*a) return cmd_ablate(ab, out);
  } catch (const NumericalError& ex) {
    err << "numerical error: " << ex.what() << "\n";
    return kNumerical;
  } catch (const ImageError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const CheckpointError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const ShapeError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kUsage;
  } catch (const std::exception& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  }
  return kUsage;
}

}  // namespace densformer::cli

#endif  // DENSFORMER_CLI_HPP
