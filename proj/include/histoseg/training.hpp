#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/evaluation.hpp"
#include "histoseg/image.hpp"
#include "histoseg/model.hpp"
#include "histoseg/patching.hpp"
#include "histoseg/rng.hpp"
#include "histoseg/tensor.hpp"

namespace histoseg {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  double threshold = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double loss_smooth = 1.0;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    require(learning_rate > 0.0, ErrorKind::InvalidArgument, "learning_rate must be > 0");
    require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::InvalidArgument, "threshold must be in (0, 1)");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::InvalidArgument,
            "beta1 and beta2 must be in [0, 1)");
    require(epsilon > 0.0, ErrorKind::InvalidArgument, "epsilon must be > 0");
    require(loss_smooth >= 0.0, ErrorKind::InvalidArgument, "loss_smooth must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Loss

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Soft Jaccard distance 1 - (I + s) / (U + s) with I = sum(p*y) and
/// U = sum(p) + sum(y) - I, plus its gradient with respect to p.
inline LossAndGrad jaccard_distance_loss(std::span<const double> pred, std::span<const double> target,
                                         double smooth) {
  require(pred.size() == target.size(), ErrorKind::ShapeMismatch, "prediction and target sizes differ");
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(pred[i] >= 0.0 && pred[i] <= 1.0, ErrorKind::InvalidArgument, "predictions must lie in [0, 1]");
    require(target[i] == 0.0 || target[i] == 1.0, ErrorKind::InvalidArgument, "targets must be 0 or 1");
    inter += pred[i] * target[i];
    sum_p += pred[i];
    sum_y += target[i];
  }
  const double num = inter + smooth;
  const double den = sum_p + sum_y - inter + smooth;
  LossAndGrad out;
  if (den == 0.0) {  // smooth == 0 and both empty
    out.grad.assign(pred.size(), 0.0);
    return out;
  }
  // den - num = sum(p) + sum(y) - 2I, formed directly to avoid cancellation
  out.loss = (sum_p + sum_y - 2.0 * inter) / den;
  out.grad.resize(pred.size());
  const double den2 = den * den;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    // d num / dp = y, d den / dp = 1 - y
    out.grad[i] = -(target[i] * den - num * (1.0 - target[i])) / den2;
  }
  return out;
}

inline LossAndGrad jaccard_distance_loss(const Tensor& pred, const Tensor& target, double smooth) {
  require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch,
          "loss shapes " + shape_string(pred.shape()) + " and " + shape_string(target.shape()) + " differ");
  return jaccard_distance_loss(pred.data(), target.data(), smooth);
}

/// (|A u B| - |A n B|) / |A u B|; 0 when both masks are empty.
inline double hard_jaccard_distance(const BinaryMask& a, const BinaryMask& b) {
  require(a.same_dims(b), ErrorKind::ShapeMismatch, "mask dimensions differ");
  std::size_t uni = 0, inter = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    uni += (a[i] || b[i]) ? 1 : 0;
    inter += (a[i] && b[i]) ? 1 : 0;
  }
  if (uni == 0) return 0.0;
  return static_cast<double>(uni - inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// AMSGrad

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::vector<Tensor> v_hat;
  std::uint64_t t = 0;
};

/// One AMSGrad update without bias correction:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  v_hat <- max(v_hat, v)
///   theta <- theta - lr m / (sqrt(v_hat) + eps)
/// Nothing is modified if any gradient is non-finite.
inline void amsgrad_step(std::span<Tensor* const> params, const std::vector<Tensor>& grads, OptimizerState& state,
                         const TrainConfig& config) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch, "parameter and gradient counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require(params[k]->shape() == grads[k].shape(), ErrorKind::ShapeMismatch,
            "gradient " + std::to_string(k) + " shape does not match its parameter");
    for (double g : grads[k].data())
      require(std::isfinite(g), ErrorKind::Divergence, "non-finite gradient in parameter " + std::to_string(k));
  }
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.push_back(Tensor::zeros_like(*p));
      state.v.push_back(Tensor::zeros_like(*p));
      state.v_hat.push_back(Tensor::zeros_like(*p));
    }
  }
  require(state.m.size() == params.size(), ErrorKind::ShapeMismatch, "optimizer state does not match parameters");
  const double b1 = config.beta1, b2 = config.beta2, lr = config.learning_rate, eps = config.epsilon;
  for (std::size_t k = 0; k < params.size(); ++k) {
    double* theta = params[k]->ptr();
    const double* g = grads[k].ptr();
    double* m = state.m[k].ptr();
    double* v = state.v[k].ptr();
    double* vh = state.v_hat[k].ptr();
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      vh[i] = std::max(vh[i], v[i]);
      theta[i] -= lr * m[i] / (std::sqrt(vh[i]) + eps);
    }
  }
  ++state.t;
}

inline void amsgrad_step(Model& model, const std::vector<Tensor>& grads, OptimizerState& state,
                         const TrainConfig& config) {
  const auto params = model.parameters();
  amsgrad_step(std::span<Tensor* const>(params), grads, state, config);
  model.touch();
}

// ---------------------------------------------------------------------------
// Augmentation

enum class Transform { Identity, FlipHorizontal, FlipVertical, Rotate90, Rotate180 };

inline constexpr Transform kAugmentations[] = {Transform::Identity, Transform::FlipHorizontal,
                                               Transform::FlipVertical, Transform::Rotate90, Transform::Rotate180};

/// Source coordinate for output (r, c) of an H x W input. Rotate90 is
/// counter-clockwise and swaps the output dimensions.
inline std::pair<std::size_t, std::size_t> transform_source(Transform t, std::size_t r, std::size_t c, std::size_t h,
                                                            std::size_t w) {
  switch (t) {
    case Transform::Identity: return {r, c};
    case Transform::FlipHorizontal: return {r, w - 1 - c};
    case Transform::FlipVertical: return {h - 1 - r, c};
    case Transform::Rotate90: return {c, w - 1 - r};
    case Transform::Rotate180: return {h - 1 - r, w - 1 - c};
  }
  return {r, c};
}

inline RasterImage apply_transform(const RasterImage& img, Transform t) {
  const std::size_t h = img.height(), w = img.width(), ch = img.channels();
  const bool swap = t == Transform::Rotate90;
  RasterImage out(swap ? w : h, swap ? h : w, ch);
  for (std::size_t r = 0; r < out.height(); ++r)
    for (std::size_t c = 0; c < out.width(); ++c) {
      const auto [sr, sc] = transform_source(t, r, c, h, w);
      for (std::size_t k = 0; k < ch; ++k) out.at(r, c, k) = img.at(sr, sc, k);
    }
  return out;
}

inline BinaryMask apply_transform(const BinaryMask& mask, Transform t) {
  const std::size_t h = mask.height(), w = mask.width();
  const bool swap = t == Transform::Rotate90;
  BinaryMask out(swap ? w : h, swap ? h : w);
  for (std::size_t r = 0; r < out.height(); ++r)
    for (std::size_t c = 0; c < out.width(); ++c) {
      const auto [sr, sc] = transform_source(t, r, c, h, w);
      out.set(r, c, mask.at(sr, sc));
    }
  return out;
}

struct TrainingSample {
  PatchPair pair;
  BinaryMask mask;
};

inline TrainingSample apply_transform(const TrainingSample& s, Transform t) {
  return {{apply_transform(s.pair.local, t), apply_transform(s.pair.global_raw, t), s.pair.origin},
          apply_transform(s.mask, t)};
}

/// Draws one transform uniformly and applies it to local, global and mask alike.
inline TrainingSample augment(const PatchPair& pair, const BinaryMask& mask, SeededRng& rng) {
  require(mask.height() == pair.local.height() && mask.width() == pair.local.width(), ErrorKind::ShapeMismatch,
          "mask does not match the local patch");
  const Transform t = kAugmentations[rng.uniform_index(std::size(kAugmentations))];
  return apply_transform(TrainingSample{pair, mask}, t);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  double mean_loss = 0.0;
  double mean_dice = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const {
    std::string out = "epoch,mean_loss,mean_dice\n";
    char buf[96];
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e + 1, epochs[e].mean_loss, epochs[e].mean_dice);
      out += buf;
    }
    return out;
  }
};

struct TrainResult {
  Model model;
  TrainingHistory history;
};

inline Tensor mask_to_tensor(const std::vector<const BinaryMask*>& masks) {
  const std::size_t B = masks.size(), H = masks.front()->height(), W = masks.front()->width();
  Tensor t({B, H, W, 1});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H * W; ++i) t[b * H * W + i] = (*masks[b])[i] ? 1.0 : 0.0;
  return t;
}

/// Optional hook invoked after every epoch with (epoch index, record).
using EpochCallback = std::function<void(std::size_t, const EpochRecord&)>;

/// Mini-batch AMSGrad on the summed per-sample soft Jaccard loss. Sample order
/// is reshuffled every epoch and each sample's augmentation comes from its own
/// (seed, epoch, index) stream, so a run is a pure function of its inputs.
inline TrainResult train(Model model, const std::vector<TrainingSample>& dataset, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  require(!dataset.empty(), ErrorKind::InvalidArgument, "training dataset is empty");
  const ModelConfig& mc = model.config();
  for (const auto& s : dataset)
    require(s.pair.local.height() == mc.patch_size && s.pair.local.width() == mc.patch_size &&
                s.pair.global_raw.height() == mc.global_size() && s.pair.global_raw.width() == mc.global_size() &&
                s.mask.height() == mc.patch_size && s.mask.width() == mc.patch_size,
            ErrorKind::ShapeMismatch, "training sample does not match the model's patch and margin sizes");

  const SeededRng root(config.seed);
  OptimizerState state;
  TrainingHistory history;
  const std::size_t n = dataset.size();
  const std::size_t P = mc.patch_size;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng shuffle_rng = root.derive(1, epoch);
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    const SeededRng epoch_rng = root.derive(2, epoch);

    double loss_sum = 0.0, dice_sum = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::vector<TrainingSample> batch;
      batch.reserve(end - start);
      for (std::size_t j = start; j < end; ++j) {
        const TrainingSample& s = dataset[order[j]];
        if (config.augment) {
          SeededRng rng = epoch_rng.derive(order[j]);
          batch.push_back(augment(s.pair, s.mask, rng));
        } else {
          batch.push_back(s);
        }
      }
      std::vector<const PatchPair*> pairs;
      std::vector<const BinaryMask*> masks;
      for (const auto& s : batch) {
        pairs.push_back(&s.pair);
        masks.push_back(&s.mask);
      }
      const auto [local, global] = pack_batch(pairs);
      const Tensor target = mask_to_tensor(masks);

      ForwardCache cache;
      const Tensor probs = forward(model, local, global, cache);
      Tensor out_grad = Tensor::zeros_like(probs);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t off = b * P * P;
        const auto pb = probs.data().subspan(off, P * P);
        const auto lg = jaccard_distance_loss(pb, target.data().subspan(off, P * P), config.loss_smooth);
        if (!std::isfinite(lg.loss))
          fail(ErrorKind::Divergence, "non-finite loss at epoch " + std::to_string(epoch + 1) + " step " +
                                          std::to_string(step + 1));
        std::copy(lg.grad.begin(), lg.grad.end(), out_grad.ptr() + off);
        loss_sum += lg.loss;

        BinaryMask seg(P, P);
        for (std::size_t i = 0; i < P * P; ++i) seg.set(i, pb[i] > config.threshold);
        dice_sum += dice_coefficient(*masks[b], seg);
      }
      const std::vector<Tensor> grads = backward(model, cache, out_grad);
      try {
        amsgrad_step(model, grads, state, config);
      } catch (const Error& e) {
        rethrow_with_context(e, "epoch " + std::to_string(epoch + 1) + " step " + std::to_string(step + 1));
      }
      ++step;
    }
    history.epochs.push_back({loss_sum / static_cast<double>(n), dice_sum / static_cast<double>(n)});
    if (on_epoch) on_epoch(epoch, history.epochs.back());
  }
  return {std::move(model), std::move(history)};
}

}  // namespace histoseg
