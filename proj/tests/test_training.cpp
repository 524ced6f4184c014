#include <gtest/gtest.h>

#include <functional>

#include "histoseg/synthetic.hpp"
#include "histoseg/training.hpp"

using namespace histoseg;

namespace {

ErrorKind error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected histoseg::Error";
  return ErrorKind::InvalidArgument;
}

BinaryMask random_mask(std::size_t h, std::size_t w, SeededRng& rng, double density = 0.4) {
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) m.set(i, rng.uniform() < density);
  return m;
}

std::vector<double> as_values(const BinaryMask& m) {
  std::vector<double> v(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0 : 0.0;
  return v;
}

RasterImage random_rgb(std::size_t h, std::size_t w, SeededRng& rng) {
  RasterImage img(h, w, 3);
  for (auto& v : img.pixels()) v = static_cast<double>(rng.uniform_index(256));
  return img;
}

std::vector<TrainingSample> tiny_dataset(std::size_t n, std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const RasterImage img = random_rgb(24, 24, rng);
    TrainingSample s{extract_pair(img, {4, 4}, 16, 4), random_mask(16, 16, rng)};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(SoftJaccard, PerfectPredictionIsZero) {
  SeededRng rng(1);
  const auto y = as_values(random_mask(6, 6, rng));
  EXPECT_EQ(jaccard_distance_loss(y, y, 1.0).loss, 0.0);
}

TEST(SoftJaccard, AllZeroPredictionAgainstFourOnes) {
  const std::vector<double> p(9, 0.0);
  std::vector<double> y(9, 0.0);
  for (int i : {0, 2, 4, 8}) y[i] = 1.0;
  EXPECT_NEAR(jaccard_distance_loss(p, y, 1.0).loss, 0.8, 1e-15);
}

TEST(SoftJaccard, GradientMatchesFiniteDifferences) {
  SeededRng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> p(64);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    const auto y = as_values(random_mask(8, 8, rng));
    const auto lg = jaccard_distance_loss(p, y, 1.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double h = 1e-5, orig = p[i];
      p[i] = orig + h;
      const double lp = jaccard_distance_loss(p, y, 1.0).loss;
      p[i] = orig - h;
      const double lm = jaccard_distance_loss(p, y, 1.0).loss;
      p[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_LE(std::abs(fd - lg.grad[i]) / std::max(std::abs(lg.grad[i]), 1e-12), 1e-6);
    }
  }
}

TEST(SoftJaccard, EqualsHardDistanceOnBinaryInputsWithoutSmoothing) {
  SeededRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const BinaryMask a = random_mask(5, 7, rng), b = random_mask(5, 7, rng);
    if (a.count() == 0 && b.count() == 0) continue;
    EXPECT_EQ(jaccard_distance_loss(as_values(a), as_values(b), 0.0).loss, hard_jaccard_distance(b, a));
  }
}

TEST(SoftJaccard, Validation) {
  const std::vector<double> p{0.5, 0.5}, y{1.0, 0.0};
  EXPECT_EQ(error_kind([&] { jaccard_distance_loss(p, std::vector<double>{1.0}, 1.0); }), ErrorKind::ShapeMismatch);
  EXPECT_EQ(error_kind([&] { jaccard_distance_loss(std::vector<double>{1.5, 0.5}, y, 1.0); }),
            ErrorKind::InvalidArgument);
  EXPECT_EQ(error_kind([&] { jaccard_distance_loss(p, std::vector<double>{0.5, 0.0}, 1.0); }),
            ErrorKind::InvalidArgument);
  EXPECT_EQ(error_kind([] { jaccard_distance_loss(Tensor({2, 2}), Tensor({4}), 1.0); }), ErrorKind::ShapeMismatch);
}

TEST(SoftJaccard, LossRange) {
  SeededRng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(16);
    for (auto& v : p) v = rng.uniform();
    const double l = jaccard_distance_loss(p, as_values(random_mask(4, 4, rng)), 1.0).loss;
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1.0);
  }
}

TEST(HardJaccard, Examples) {
  BinaryMask a(2, 2), b(2, 2);
  EXPECT_EQ(hard_jaccard_distance(a, b), 0.0);
  a.set(0, true);
  a.set(1, true);
  a.set(2, true);
  b.set(0, true);
  b.set(1, true);
  b.set(3, true);
  EXPECT_EQ(hard_jaccard_distance(a, b), 0.5);
  EXPECT_EQ(hard_jaccard_distance(a, a), 0.0);
  BinaryMask c(2, 2), d(2, 2);
  c.set(0, true);
  d.set(3, true);
  EXPECT_EQ(hard_jaccard_distance(c, d), 1.0);
  EXPECT_EQ(error_kind([&] { hard_jaccard_distance(a, BinaryMask(3, 2)); }), ErrorKind::ShapeMismatch);
}

TEST(AmsGrad, FirstStepByHand) {
  Tensor theta({1}, 0.0);
  std::vector<Tensor*> params{&theta};
  OptimizerState state;
  amsgrad_step(params, {Tensor({1}, 1.0)}, state, TrainConfig{});
  const double expected = -0.001 * 0.1 / (std::sqrt(0.001) + 1e-8);
  EXPECT_NEAR(theta[0], expected, 1e-12);
  EXPECT_NEAR(theta[0], -0.00316228, 1e-8);
  EXPECT_EQ(state.t, 1u);
}

TEST(AmsGrad, ZeroGradientLeavesParametersUnchanged) {
  Tensor theta({3}, std::vector<double>{1.0, -2.0, 0.5});
  const Tensor before = theta;
  std::vector<Tensor*> params{&theta};
  OptimizerState state;
  amsgrad_step(params, {Tensor({3}, 0.0)}, state, TrainConfig{});
  EXPECT_EQ(theta, before);
}

TEST(AmsGrad, RunningMaxNeverDecreases) {
  Tensor theta({4}, 0.0);
  std::vector<Tensor*> params{&theta};
  OptimizerState state;
  SeededRng rng(5);
  std::vector<double> prev(4, 0.0);
  amsgrad_step(params, {Tensor({4}, 1.0)}, state, TrainConfig{});
  for (int s = 0; s < 2000; ++s) {
    Tensor g({4});
    for (auto& v : g.data()) v = rng.normal() * (s % 100 == 0 ? 10.0 : 0.1);
    amsgrad_step(params, {g}, state, TrainConfig{});
    for (std::size_t i = 0; i < 4; ++i) {
      ASSERT_GE(state.v_hat[0][i], prev[i]);
      ASSERT_GE(state.v_hat[0][i], state.v[0][i]);
      prev[i] = state.v_hat[0][i];
    }
  }
}

TEST(AmsGrad, NonFiniteGradientRejectedWithoutSideEffects) {
  Tensor a({2}, 1.0), b({2}, 2.0);
  std::vector<Tensor*> params{&a, &b};
  OptimizerState state;
  amsgrad_step(params, {Tensor({2}, 0.5), Tensor({2}, 0.5)}, state, TrainConfig{});
  const Tensor a0 = a, b0 = b;
  const OptimizerState s0 = state;
  Tensor bad({2}, 0.1);
  bad[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(error_kind([&] { amsgrad_step(params, {Tensor({2}, 0.1), bad}, state, TrainConfig{}); }),
            ErrorKind::Divergence);
  EXPECT_EQ(a, a0);
  EXPECT_EQ(b, b0);
  EXPECT_EQ(state.t, s0.t);
  EXPECT_EQ(state.v_hat[0], s0.v_hat[0]);
}

TEST(AmsGrad, ModelOverloadBumpsVersion) {
  Model m = build_model({8, 2, 1, 1, 0});
  std::vector<Tensor> grads;
  for (const Tensor* p : std::as_const(m).parameters()) grads.push_back(Tensor::ones_like(*p));
  OptimizerState state;
  const auto v0 = m.version();
  amsgrad_step(m, grads, state, TrainConfig{});
  EXPECT_EQ(m.version(), v0 + 1);
}

TEST(Augment, GroupProperties) {
  SeededRng rng(6);
  const RasterImage img = random_rgb(5, 7, rng);
  const BinaryMask mask = random_mask(5, 7, rng);
  EXPECT_EQ(apply_transform(apply_transform(img, Transform::FlipHorizontal), Transform::FlipHorizontal), img);
  EXPECT_EQ(apply_transform(apply_transform(img, Transform::FlipVertical), Transform::FlipVertical), img);
  RasterImage r = img;
  BinaryMask rm = mask;
  for (int i = 0; i < 4; ++i) {
    r = apply_transform(r, Transform::Rotate90);
    rm = apply_transform(rm, Transform::Rotate90);
  }
  EXPECT_EQ(r, img);
  EXPECT_EQ(rm, mask);
  EXPECT_EQ(apply_transform(apply_transform(img, Transform::Rotate90), Transform::Rotate90),
            apply_transform(img, Transform::Rotate180));
  EXPECT_EQ(apply_transform(img, Transform::Rotate90).height(), 7u);
}

TEST(Augment, Rotate90IsCounterClockwise) {
  RasterImage img(2, 3, 1, std::vector<double>{1, 2, 3, 4, 5, 6});
  // 1 2 3        3 6
  // 4 5 6  ->    2 5
  //              1 4
  EXPECT_EQ(apply_transform(img, Transform::Rotate90).pixels(), (std::vector<double>{3, 6, 2, 5, 1, 4}));
}

TEST(Augment, PairStaysConsistentUnderEveryTransform) {
  SeededRng rng(7);
  const RasterImage img = random_rgb(30, 30, rng);
  const PatchPair pair = extract_pair(img, {6, 9}, 12, 5);
  const BinaryMask mask = random_mask(12, 12, rng);
  for (Transform t : kAugmentations) {
    const TrainingSample s = apply_transform(TrainingSample{pair, mask}, t);
    EXPECT_EQ(center_crop(s.pair.global_raw, 12), s.pair.local);
    const RasterImage mask_img = apply_transform(mask_to_image(mask), t);
    EXPECT_EQ(mask_from_image(mask_img), s.mask);
  }
}

TEST(Augment, DrawsAllFiveTransformsUniformly) {
  SeededRng rng(8);
  const RasterImage img = random_rgb(20, 20, rng);
  const PatchPair pair = extract_pair(img, {4, 4}, 8, 2);
  const BinaryMask mask = random_mask(8, 8, rng);
  std::vector<RasterImage> images;
  for (Transform t : kAugmentations) images.push_back(apply_transform(pair.local, t));
  std::vector<int> hits(5, 0);
  SeededRng draw(9);
  for (int i = 0; i < 5000; ++i) {
    const TrainingSample s = augment(pair, mask, draw);
    for (std::size_t k = 0; k < 5; ++k)
      if (s.pair.local == images[k]) {
        hits[k]++;
        break;
      }
  }
  for (int n : hits) EXPECT_NEAR(n, 1000, 120);
  EXPECT_EQ(error_kind([&] { augment(pair, BinaryMask(7, 8), draw); }), ErrorKind::ShapeMismatch);
}

TEST(Train, ZeroEpochsReturnsModelUnchanged) {
  const Model m = build_model({16, 4, 1, 2, 1});
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train(m, tiny_dataset(3, 1), cfg);
  EXPECT_EQ(r.model, m);
  EXPECT_TRUE(r.history.epochs.empty());
}

TEST(Train, DeterministicForEqualSeeds) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 4;
  const auto data = tiny_dataset(5, 2);
  const TrainResult a = train(build_model({16, 4, 1, 2, 1}), data, cfg);
  const TrainResult b = train(build_model({16, 4, 1, 2, 1}), data, cfg);
  EXPECT_EQ(checkpoint_bytes(a.model), checkpoint_bytes(b.model));
  EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
  cfg.seed = 5;
  const TrainResult c = train(build_model({16, 4, 1, 2, 1}), data, cfg);
  EXPECT_NE(checkpoint_bytes(a.model), checkpoint_bytes(c.model));
}

TEST(Train, StepCountIncludesPartialBatch) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  Model m = build_model({16, 4, 1, 2, 1});
  const TrainResult r = train(m, tiny_dataset(5, 3), cfg);
  // each optimizer step bumps the version once: 2 epochs x ceil(5 / 2)
  EXPECT_EQ(r.model.version(), m.version() + 6);
  EXPECT_EQ(r.history.epochs.size(), 2u);
  for (const auto& e : r.history.epochs) {
    EXPECT_GE(e.mean_loss, 0.0);
    EXPECT_LE(e.mean_loss, 1.0);
    EXPECT_GE(e.mean_dice, 0.0);
    EXPECT_LE(e.mean_dice, 1.0);
  }
}

TEST(Train, RejectsBadInputs) {
  const Model m = build_model({16, 4, 1, 2, 1});
  EXPECT_EQ(error_kind([&] { train(m, {}, TrainConfig{}); }), ErrorKind::InvalidArgument);
  auto data = tiny_dataset(1, 4);
  data[0].mask = BinaryMask(8, 8);
  EXPECT_EQ(error_kind([&] { train(m, data, TrainConfig{}); }), ErrorKind::ShapeMismatch);
  TrainConfig bad;
  bad.threshold = 1.0;
  EXPECT_EQ(error_kind([&] { train(m, tiny_dataset(1, 4), bad); }), ErrorKind::InvalidArgument);
}

TEST(Train, HistoryCsvFormat) {
  TrainingHistory h;
  h.epochs.push_back({0.5, 0.25});
  h.epochs.push_back({0.125, 0.75});
  EXPECT_EQ(h.to_csv(), "epoch,mean_loss,mean_dice\n1,0.5,0.25\n2,0.125,0.75\n");
}

TEST(Train, LossDecreasesOnBlobPatches) {
  SeededRng rng(10);
  synthetic::BlobOptions opts;
  opts.blobs = 5;
  const auto slide = synthetic::make_blob_slide(32, 32, opts, rng);
  std::vector<TrainingSample> data;
  for (const auto& o : plan_patch_grid(32, 32, 16, 4).origins)
    data.push_back({extract_pair(slide.image, o, 16, 4), crop_mask(slide.mask, o.row, o.col, 16, 16)});
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 0.01;
  const TrainResult r = train(build_model({16, 4, 1, 4, 2}), data, cfg);
  EXPECT_LT(r.history.epochs.back().mean_loss, r.history.epochs.front().mean_loss);
}
