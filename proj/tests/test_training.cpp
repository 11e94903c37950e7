#include <gtest/gtest.h>

#include <map>

#include "densformer/checkpoint.hpp"
#include "densformer/gradcheck.hpp"
#include "support.hpp"

using namespace densformer;
using testsupport::random_tensor;
using testsupport::small_config;
using testsupport::synthetic_image;
using testsupport::TempDir;

namespace {

TrainConfig quick_train(std::size_t iters = 6) {
  TrainConfig t;
  t.batch = 2;
  t.patch = 8;
  t.max_iters = iters;
  t.val_every = 3;
  t.seed = 5;
  t.lr0 = 1e-3;
  return t;
}

std::vector<ImageBuffer> tiny_data(std::size_t c = 1) {
  return {synthetic_image(12, 14, c, 1), synthetic_image(10, 10, c, 2)};
}

ParamStore<float> scalar_store(float v) {
  ParamStore<float> s;
  s.add("p", Tensor<float>({1}, {v}));
  return s;
}

}  // namespace

TEST(L1Loss, Examples) {
  Tensor<float> a({2}, {1, -1}), z({2}, 0.0f);
  EXPECT_EQ(l1_loss(a, a).item(), 0.0f);
  EXPECT_FLOAT_EQ(l1_loss(a, z).item(), 1.0f);
  EXPECT_THROW(l1_loss(a, Tensor<float>({3}, 0.0f)), ShapeError);
}

TEST(L1Loss, GradientIsSignOverCount) {
  Tensor<double> p({4}, {0.5, -0.25, 2.0, -1.0}), t({4}, 0.0);
  p.set_requires_grad(true);
  backward(l1_loss(p, t));
  const std::vector<double> want{0.25, -0.25, 0.25, -0.25};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.grad()[i], want[i]);
  auto fd = finite_diff_grad([&](const Tensor<double>& x) { return l1_loss(x, t).item(); },
                             Tensor<double>({4}, {0.5, -0.25, 2.0, -1.0}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(fd[i], want[i], 1e-9);
}

TEST(LrSchedule, HalvesEveryInterval) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(0, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(19999, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(20000, c), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(39999, c), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(40000, c), 2.5e-5);
  for (std::size_t i = 0; i < 100000; i += 997) EXPECT_GE(lr_at(i, c), lr_at(i + 997, c));
}

TEST(Adam, FirstStepClosedForm) {
  TrainConfig c;
  auto s = scalar_store(0.0f);
  backward(sum(s.get("p")));
  auto st = AdamState<float>::zeros_for(s);
  adam_step(s, st, 1e-4, c);
  EXPECT_NEAR(s.get("p")[0], -1e-4 / (1 + 1e-8), 1e-11);
  EXPECT_EQ(st.step, 1u);
  EXPECT_FALSE(s.get("p").has_grad() && s.get("p").grad()[0] != 0.0f);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  TrainConfig c;
  auto s = scalar_store(0.75f);
  backward(sum(scale(s.get("p"), 0.0f)));
  auto st = AdamState<float>::zeros_for(s);
  adam_step(s, st, 1e-3, c);
  EXPECT_EQ(s.get("p")[0], 0.75f);
}

TEST(Adam, MissingGradientThrows) {
  TrainConfig c;
  auto s = scalar_store(1.0f);
  AdamState<float> st;
  EXPECT_THROW(adam_step(s, st, 1e-4, c), TapeError);
}

TEST(Adam, EarlyStepsBoundedAndVariancePositive) {
  TrainConfig c;
  Rng rng(3);
  ParamStore<float> s;
  s.add("w", random_tensor({64}, rng));
  auto st = AdamState<float>::zeros_for(s);
  for (int k = 0; k < 20; ++k) {
    const std::vector<float> before(s.get("w").data().begin(), s.get("w").data().end());
    auto target = random_tensor({64}, rng, -3, 3);
    backward(l1_loss(mul(s.get("w"), s.get("w")), target));
    adam_step(s, st, 1e-3, c);
    Tape<float>::active().reset();
    for (std::size_t i = 0; i < 64; ++i) {
      ASSERT_LE(std::abs(s.get("w")[i] - before[i]), 2e-3);
      ASSERT_GE(st.v[0][i], 0.0f);
    }
    EXPECT_EQ(st.step, static_cast<std::uint64_t>(k + 1));
  }
}

TEST(Adam, IdenticalRunsIdenticalTrajectories) {
  auto run = [] {
    TrainConfig c;
    Rng rng(4);
    ParamStore<float> s;
    s.add("w", random_tensor({16}, rng));
    AdamState<float> st;
    for (int k = 0; k < 10; ++k) {
      backward(sum(abs(add_scalar(mul(s.get("w"), s.get("w")), -0.3f))));
      adam_step(s, st, 1e-2, c);
      Tape<float>::active().reset();
    }
    return std::vector<float>(s.get("w").data().begin(), s.get("w").data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Dihedral, IdentityAndKnownRotation) {
  ImageBuffer img(2, 2, 1);
  img.pixels = {1, 2, 3, 4};
  EXPECT_EQ(dihedral(img, 0), img);
  // one quarter turn counter-clockwise: [[2,4],[1,3]]
  EXPECT_EQ(dihedral(img, 1).pixels, (std::vector<float>{2, 4, 1, 3}));
  EXPECT_EQ(dihedral(img, 2).pixels, (std::vector<float>{4, 3, 2, 1}));
  EXPECT_EQ(dihedral(img, 4).pixels, (std::vector<float>{2, 1, 4, 3}));
  EXPECT_THROW(dihedral(img, 8), std::invalid_argument);
  EXPECT_THROW(dihedral(ImageBuffer(2, 3, 1), 1), ImageError);
}

TEST(Dihedral, HalfTurnIsInvolutionAndFlipsToo) {
  auto img = synthetic_image(9, 9, 3, 7);
  EXPECT_EQ(dihedral(dihedral(img, 2), 2), img);
  for (unsigned t = 4; t < 8; ++t) EXPECT_EQ(dihedral(dihedral(img, t), t), img) << t;
  EXPECT_EQ(dihedral(dihedral(img, 1), 3), img);
}

TEST(Dihedral, PixelHistogramInvariant) {
  auto img = testsupport::quantized(synthetic_image(10, 10, 1, 8));
  std::map<float, int> h0;
  for (float v : img.pixels) ++h0[v];
  for (unsigned t = 0; t < 8; ++t) {
    std::map<float, int> h;
    for (float v : dihedral(img, t).pixels) ++h[v];
    EXPECT_EQ(h, h0) << t;
  }
}

TEST(Dihedral, AugmentDrawsAllEightUniformly) {
  ImageBuffer img(2, 2, 1);
  img.pixels = {1, 2, 3, 4};
  std::map<std::vector<float>, int> seen;
  Rng rng(9);
  for (int i = 0; i < 8000; ++i) ++seen[augment(img, rng).pixels];
  ASSERT_EQ(seen.size(), 8u);
  for (const auto& [k, n] : seen) EXPECT_NEAR(n, 1000, 150);
}

TEST(Trainer, LossFiniteAndLogShape) {
  auto out = train_loop(small_config(), quick_train(), tiny_data());
  ASSERT_EQ(out.log.size(), 6u);
  for (std::size_t i = 0; i < out.log.size(); ++i) {
    EXPECT_EQ(out.log[i].iter, i);
    EXPECT_TRUE(std::isfinite(out.log[i].loss));
    EXPECT_EQ(out.log[i].val_psnr.has_value(), (i + 1) % 3 == 0);
  }
  EXPECT_EQ(out.state.iteration, 6u);
  EXPECT_EQ(out.state.adam.step, 6u);
}

TEST(Trainer, SameSeedIdenticalRuns) {
  auto a = train_loop(small_config(3), quick_train(), tiny_data(3));
  auto b = train_loop(small_config(3), quick_train(), tiny_data(3));
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(encode_checkpoint(a.state), encode_checkpoint(b.state));
  auto t = quick_train();
  t.seed = 6;
  EXPECT_NE(train_loop(small_config(3), t, tiny_data(3)).log, a.log);
}

TEST(Trainer, MultipleSigmasAndBatchOne) {
  auto t = quick_train(3);
  t.sigmas = {15, 25, 50};
  t.batch = 1;
  auto out = train_loop(small_config(), t, tiny_data());
  EXPECT_EQ(out.log.size(), 3u);
}

TEST(Trainer, RejectsBadData) {
  EXPECT_THROW(Trainer(small_config(), quick_train(), {}), ImageError);
  EXPECT_THROW(Trainer(small_config(3), quick_train(), tiny_data(1)), ImageError);
  auto t = quick_train();
  t.patch = 20;
  EXPECT_THROW(Trainer(small_config(), t, tiny_data()), ImageError);
}

TEST(Trainer, NanLossAborts) {
  auto state = Trainer::fresh_state(small_config(), quick_train());
  state.params.get("rec.bias").mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer tr(std::move(state), tiny_data());
  EXPECT_THROW(tr.step(), NumericalError);
}

TEST(Checkpoint, SaveLoadSaveByteIdentical) {
  TempDir dir;
  auto out = train_loop(small_config(3), quick_train(4), tiny_data(3));
  save_checkpoint(dir.file("a.dsf"), out.state);
  const auto loaded = load_checkpoint(dir.file("a.dsf"));
  save_checkpoint(dir.file("b.dsf"), loaded);
  EXPECT_EQ(encode_checkpoint(loaded), encode_checkpoint(out.state));
  EXPECT_TRUE(loaded.params.values_equal(out.state.params));
  EXPECT_EQ(loaded.adam, out.state.adam);
  EXPECT_EQ(loaded.model, out.state.model);
  EXPECT_EQ(loaded.train, out.state.train);
  EXPECT_EQ(loaded.iteration, out.state.iteration);
  EXPECT_EQ(loaded.rng_state, out.state.rng_state);
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = encode_checkpoint(Trainer::fresh_state(small_config(), quick_train()));
  ASSERT_GT(bytes.size(), 10u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DSF1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  const std::uint32_t len = bytes[6] | bytes[7] << 8 | bytes[8] << 16 | static_cast<std::uint32_t>(bytes[9]) << 24;
  const std::string text(bytes.begin() + 10, bytes.begin() + 10 + len);
  EXPECT_NE(text.find("channels=8\n"), std::string::npos);
  // first tensor record: name length, name, dtype, rank, dims
  std::size_t p = 10 + len;
  const std::size_t nl = bytes[p] | bytes[p + 1] << 8;
  EXPECT_EQ(std::string(bytes.begin() + static_cast<long>(p) + 2, bytes.begin() + static_cast<long>(p + 2 + nl)),
            "pre.weight");
  p += 2 + nl;
  EXPECT_EQ(bytes[p], 1);
  EXPECT_EQ(bytes[p + 1], 4);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto m = small_config(3);
  const auto t = quick_train(7);
  Trainer full(m, t, tiny_data(3));
  const auto full_log = full.run();

  Trainer first(m, t, tiny_data(3));
  auto head = first.run(3);
  Trainer second(decode_checkpoint(encode_checkpoint(first.state())), tiny_data(3));
  auto tail = second.run();
  head.insert(head.end(), tail.begin(), tail.end());
  EXPECT_EQ(head, full_log);
  EXPECT_EQ(encode_checkpoint(second.state()), encode_checkpoint(full.state()));
}

TEST(Checkpoint, CorruptionIsRejected) {
  const auto good = encode_checkpoint(Trainer::fresh_state(small_config(), quick_train()));

  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);

  bad = good;
  bad[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);

  for (std::size_t cut : {std::size_t{3}, std::size_t{9}, good.size() / 2, good.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<long>(cut))),
                 CheckpointError)
        << cut;
  }
}

TEST(Checkpoint, UnknownAndMissingTensorNames) {
  auto s = Trainer::fresh_state(small_config(), quick_train());
  auto bytes = encode_checkpoint(s);
  // Rename "pre.weight" to "pre.weighz": same length, unknown name.
  const std::string from = "pre.weight";
  auto it = std::search(bytes.begin(), bytes.end(), from.begin(), from.end());
  ASSERT_NE(it, bytes.end());
  *(it + 9) = 'z';
  try {
    decode_checkpoint(bytes);
    FAIL() << "expected an error";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown tensor"), std::string::npos) << e.what();
  }

  // A checkpoint whose config asks for more groups than it stores tensors for.
  auto text_bytes = encode_checkpoint(s);
  const std::string key = "groups=2";
  auto k = std::search(text_bytes.begin(), text_bytes.end(), key.begin(), key.end());
  ASSERT_NE(k, text_bytes.end());
  *(k + 7) = '3';
  EXPECT_THROW(decode_checkpoint(text_bytes), CheckpointError);
}

TEST(Checkpoint, MissingFileIsAnError) {
  TempDir dir;
  EXPECT_THROW(load_checkpoint(dir.file("none.dsf")), CheckpointError);
}
