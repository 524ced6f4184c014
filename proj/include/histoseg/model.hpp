#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/image.hpp"
#include "histoseg/patching.hpp"
#include "histoseg/rng.hpp"
#include "histoseg/tensor.hpp"
#include "json.hpp"

namespace histoseg {

struct ModelConfig {
  std::size_t patch_size = 256;
  std::size_t margin = 64;
  std::size_t levels = 3;
  std::size_t base_channels = 8;
  std::uint64_t seed = 0;

  std::size_t global_size() const { return patch_size + 2 * margin; }

  void validate() const {
    require(levels >= 1, ErrorKind::InvalidArgument, "levels must be >= 1");
    require(base_channels >= 1, ErrorKind::InvalidArgument, "base_channels must be >= 1");
    require(levels < 16 && patch_size > 0 && patch_size % (std::size_t{1} << levels) == 0,
            ErrorKind::InvalidArgument, "patch_size must be divisible by 2^levels");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Channel count of the fused input: 3 local + 3 resized global.
inline constexpr std::size_t kInputChannels = 6;
/// RGB intensities enter the network scaled to [0, 1].
inline constexpr double kInputScale = 1.0 / 255.0;

/// Same-padded square convolution. Weight layout is [ky][kx][in][out].
struct Conv2d {
  std::string name;
  std::size_t kernel = 3;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Tensor weight;
  Tensor bias;

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

struct LayerSpec {
  std::string kind;
  std::string name;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<Conv2d> convs) : config_(config), convs_(std::move(convs)) {}

  const ModelConfig& config() const { return config_; }
  const std::vector<Conv2d>& convs() const { return convs_; }
  std::vector<Conv2d>& convs() { return convs_; }

  const Conv2d& encoder_conv(std::size_t level, std::size_t j) const { return convs_[2 * level + j]; }
  const Conv2d& bottleneck_conv(std::size_t j) const { return convs_[2 * config_.levels + j]; }
  const Conv2d& decoder_conv(std::size_t level, std::size_t j) const {
    return convs_[2 * config_.levels + 2 + 2 * (config_.levels - 1 - level) + j];
  }
  const Conv2d& head() const { return convs_.back(); }

  /// Parameter tensors in declaration order: weight then bias of each conv.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& c : convs_) {
      out.push_back(&c.weight);
      out.push_back(&c.bias);
    }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& c : convs_) {
      out.push_back(&c.weight);
      out.push_back(&c.bias);
    }
    return out;
  }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& c : convs_) {
      out.push_back(c.name + ".weight");
      out.push_back(c.name + ".bias");
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : convs_) n += c.parameter_count();
    return n;
  }

  /// Bumped whenever parameters change through the optimizer; forward caches
  /// taken before the bump are rejected by backward().
  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

  friend bool operator==(const Model& a, const Model& b) {
    if (!(a.config_ == b.config_) || a.convs_.size() != b.convs_.size()) return false;
    for (std::size_t i = 0; i < a.convs_.size(); ++i)
      if (a.convs_[i].name != b.convs_[i].name || !(a.convs_[i].weight == b.convs_[i].weight) ||
          !(a.convs_[i].bias == b.convs_[i].bias))
        return false;
    return true;
  }

 private:
  ModelConfig config_;
  std::vector<Conv2d> convs_;
  std::uint64_t version_ = 0;
};

/// Ordered layer recipe for a config; recorded in checkpoints.
inline std::vector<LayerSpec> layer_list(const ModelConfig& cfg) {
  std::vector<LayerSpec> out;
  out.push_back({"resize_bilinear", "global_to_local"});
  out.push_back({"concat", "input_fusion"});
  for (std::size_t i = 0; i < cfg.levels; ++i) {
    const std::string p = "enc" + std::to_string(i);
    out.push_back({"conv3x3", p + ".conv1"});
    out.push_back({"relu", p + ".relu1"});
    out.push_back({"conv3x3", p + ".conv2"});
    out.push_back({"relu", p + ".relu2"});
    out.push_back({"maxpool2x2", p + ".pool"});
  }
  out.push_back({"conv3x3", "bottleneck.conv1"});
  out.push_back({"relu", "bottleneck.relu1"});
  out.push_back({"conv3x3", "bottleneck.conv2"});
  out.push_back({"relu", "bottleneck.relu2"});
  out.push_back({"add", "bottleneck.residual"});
  for (std::size_t k = cfg.levels; k-- > 0;) {
    const std::string p = "dec" + std::to_string(k);
    out.push_back({"upsample_nearest2x", p + ".up"});
    out.push_back({"concat", p + ".skip"});
    out.push_back({"conv3x3", p + ".conv1"});
    out.push_back({"relu", p + ".relu1"});
    out.push_back({"conv3x3", p + ".conv2"});
    out.push_back({"relu", p + ".relu2"});
  }
  out.push_back({"concat", "head.input_residual"});
  out.push_back({"conv1x1", "head.conv"});
  out.push_back({"sigmoid", "head.sigmoid"});
  return out;
}

namespace detail {

inline Conv2d make_conv(std::string name, std::size_t kernel, std::size_t in, std::size_t out) {
  Conv2d c;
  c.name = std::move(name);
  c.kernel = kernel;
  c.in_channels = in;
  c.out_channels = out;
  c.weight = Tensor({kernel, kernel, in, out});
  c.bias = Tensor({out});
  return c;
}

}  // namespace detail

/// Conv shapes for a config, in declaration order, with zero parameters.
inline std::vector<Conv2d> conv_recipe(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t L = cfg.levels, C = cfg.base_channels;
  auto width = [&](std::size_t level) { return C << level; };
  std::vector<Conv2d> convs;
  std::size_t in = kInputChannels;
  for (std::size_t i = 0; i < L; ++i) {
    const std::string p = "enc" + std::to_string(i);
    convs.push_back(detail::make_conv(p + ".conv1", 3, in, width(i)));
    convs.push_back(detail::make_conv(p + ".conv2", 3, width(i), width(i)));
    in = width(i);
  }
  convs.push_back(detail::make_conv("bottleneck.conv1", 3, width(L - 1), width(L)));
  convs.push_back(detail::make_conv("bottleneck.conv2", 3, width(L), width(L)));
  for (std::size_t k = L; k-- > 0;) {
    const std::string p = "dec" + std::to_string(k);
    convs.push_back(detail::make_conv(p + ".conv1", 3, width(k + 1) + width(k), width(k)));
    convs.push_back(detail::make_conv(p + ".conv2", 3, width(k), width(k)));
  }
  convs.push_back(detail::make_conv("head.conv", 1, width(0) + kInputChannels, 1));
  return convs;
}

/// He fan-in normal weights and zero biases, drawn from a per-conv substream
/// of the config seed.
inline Model build_model(const ModelConfig& config) {
  std::vector<Conv2d> convs = conv_recipe(config);
  const SeededRng root(config.seed);
  for (std::size_t i = 0; i < convs.size(); ++i) {
    SeededRng rng = root.derive(0x636f6e76ULL, i);
    const double fan_in = static_cast<double>(convs[i].kernel * convs[i].kernel * convs[i].in_channels);
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& w : convs[i].weight.data()) w = stddev * rng.normal();
  }
  return Model(config, std::move(convs));
}

// ---------------------------------------------------------------------------
// Layer primitives on NHWC tensors.

namespace detail {

inline Tensor conv2d_forward(const Tensor& in, const Conv2d& conv) {
  const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), Ci = in.dim(3);
  require(Ci == conv.in_channels, ErrorKind::ShapeMismatch, conv.name + ": input channel mismatch");
  const std::size_t Co = conv.out_channels, K = conv.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(K / 2);
  Tensor out({B, H, W, Co});
  const double* x = in.ptr();
  const double* w = conv.weight.ptr();
  const double* bias = conv.bias.ptr();
  double* y = out.ptr();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < H; ++oy)
      for (std::size_t ox = 0; ox < W; ++ox) {
        double* yo = y + ((b * H + oy) * W + ox) * Co;
        std::copy(bias, bias + Co, yo);
        for (std::size_t ky = 0; ky < K; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* xi = x + ((b * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * Ci;
            const double* wk = w + (ky * K + kx) * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double a = xi[ci];
              if (a == 0.0) continue;
              const double* wr = wk + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) yo[co] += a * wr[co];
            }
          }
        }
      }
  return out;
}

/// Accumulates weight/bias gradients; writes the input gradient when `din` is non-null.
inline void conv2d_backward(const Tensor& in, const Conv2d& conv, const Tensor& dout, Tensor& dweight,
                            Tensor& dbias, Tensor* din) {
  const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), Ci = in.dim(3);
  const std::size_t Co = conv.out_channels, K = conv.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(K / 2);
  const double* x = in.ptr();
  const double* w = conv.weight.ptr();
  const double* g = dout.ptr();
  double* dw = dweight.ptr();
  double* db = dbias.ptr();
  double* dx = din ? din->ptr() : nullptr;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < H; ++oy)
      for (std::size_t ox = 0; ox < W; ++ox) {
        const double* go = g + ((b * H + oy) * W + ox) * Co;
        for (std::size_t co = 0; co < Co; ++co) db[co] += go[co];
        for (std::size_t ky = 0; ky < K; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t pix = (b * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
            const double* xi = x + pix * Ci;
            const std::size_t koff = (ky * K + kx) * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double a = xi[ci];
              if (a != 0.0) {
                double* dwr = dw + koff + ci * Co;
                for (std::size_t co = 0; co < Co; ++co) dwr[co] += a * go[co];
              }
              if (dx) {
                const double* wr = w + koff + ci * Co;
                double s = 0.0;
                for (std::size_t co = 0; co < Co; ++co) s += wr[co] * go[co];
                dx[pix * Ci + ci] += s;
              }
            }
          }
        }
      }
}

inline void relu_inplace(Tensor& t) {
  for (auto& v : t.data()) v = v > 0.0 ? v : 0.0;
}

/// Masks `grad` where the post-activation output was not positive.
inline void relu_backward(const Tensor& activated, Tensor& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activated[i] > 0.0)) grad[i] = 0.0;
}

/// 2x2 stride-2 max pool; `argmax` stores the flat input index of each winner
/// (first maximum in scan order).
inline Tensor maxpool2_forward(const Tensor& in, std::vector<std::uint32_t>& argmax) {
  const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), C = in.dim(3);
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({B, Ho, Wo, C});
  argmax.assign(out.size(), 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x)
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t best = ((b * H + 2 * y) * W + 2 * x) * C + c;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((b * H + 2 * y + dy) * W + 2 * x + dx) * C + c;
              if (in[idx] > in[best]) best = idx;
            }
          const std::size_t o = ((b * Ho + y) * Wo + x) * C + c;
          out[o] = in[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
  return out;
}

inline Tensor maxpool2_backward(const Shape& in_shape, const std::vector<std::uint32_t>& argmax, const Tensor& dout) {
  Tensor din(in_shape);
  for (std::size_t o = 0; o < dout.size(); ++o) din[argmax[o]] += dout[o];
  return din;
}

inline Tensor upsample2_forward(const Tensor& in) {
  const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), C = in.dim(3);
  Tensor out({B, 2 * H, 2 * W, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t x = 0; x < 2 * W; ++x) {
        const double* src = in.ptr() + ((b * H + y / 2) * W + x / 2) * C;
        std::copy(src, src + C, out.ptr() + ((b * 2 * H + y) * 2 * W + x) * C);
      }
  return out;
}

inline Tensor upsample2_backward(const Tensor& dout) {
  const std::size_t B = dout.dim(0), H = dout.dim(1) / 2, W = dout.dim(2) / 2, C = dout.dim(3);
  Tensor din({B, H, W, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t x = 0; x < 2 * W; ++x) {
        const double* g = dout.ptr() + ((b * 2 * H + y) * 2 * W + x) * C;
        double* d = din.ptr() + ((b * H + y / 2) * W + x / 2) * C;
        for (std::size_t c = 0; c < C; ++c) d[c] += g[c];
      }
  return din;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const std::size_t N = a.dim(0) * a.dim(1) * a.dim(2), Ca = a.dim(3), Cb = b.dim(3);
  Tensor out({a.dim(0), a.dim(1), a.dim(2), Ca + Cb});
  for (std::size_t i = 0; i < N; ++i) {
    std::copy(a.ptr() + i * Ca, a.ptr() + (i + 1) * Ca, out.ptr() + i * (Ca + Cb));
    std::copy(b.ptr() + i * Cb, b.ptr() + (i + 1) * Cb, out.ptr() + i * (Ca + Cb) + Ca);
  }
  return out;
}

/// Splits a concatenated gradient back into its first `ca` and remaining channels.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& g, std::size_t ca) {
  const std::size_t N = g.dim(0) * g.dim(1) * g.dim(2), C = g.dim(3), cb = C - ca;
  Tensor a({g.dim(0), g.dim(1), g.dim(2), ca});
  Tensor b({g.dim(0), g.dim(1), g.dim(2), cb});
  for (std::size_t i = 0; i < N; ++i) {
    std::copy(g.ptr() + i * C, g.ptr() + i * C + ca, a.ptr() + i * ca);
    std::copy(g.ptr() + i * C + ca, g.ptr() + (i + 1) * C, b.ptr() + i * cb);
  }
  return {std::move(a), std::move(b)};
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline double sigmoid(double z) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(p, lo, hi);
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct EncoderLevelCache {
  Tensor act1, act2, pooled;
  std::vector<std::uint32_t> argmax;
};

struct DecoderLevelCache {
  Tensor fused;  // concat(upsampled, skip)
  Tensor act1, act2;
};

struct ForwardCache {
  ModelConfig config;
  std::uint64_t model_version = 0;
  std::size_t batch = 0;
  Tensor input;  // B x P x P x 6
  std::vector<EncoderLevelCache> encoder;
  Tensor bottleneck1, bottleneck2, bottleneck_out;
  std::vector<DecoderLevelCache> decoder;  // indexed by level
  Tensor head_input;
  Tensor probs;
};

/// Resizes each global view to the local size and stacks both along channels.
inline Tensor fuse_inputs(const ModelConfig& cfg, const Tensor& local_batch, const Tensor& global_batch) {
  const std::size_t P = cfg.patch_size, G = cfg.global_size();
  require(local_batch.rank() == 4 && global_batch.rank() == 4, ErrorKind::ShapeMismatch,
          "forward expects rank-4 NHWC batches");
  const std::size_t B = local_batch.dim(0);
  require(global_batch.dim(0) == B, ErrorKind::ShapeMismatch, "local and global batch sizes differ");
  require(local_batch.shape() == Shape({B, P, P, 3}), ErrorKind::ShapeMismatch,
          "local batch must be " + shape_string({B, P, P, 3}) + ", got " + shape_string(local_batch.shape()));
  require(global_batch.shape() == Shape({B, G, G, 3}), ErrorKind::ShapeMismatch,
          "global batch must be " + shape_string({B, G, G, 3}) + ", got " + shape_string(global_batch.shape()));
  Tensor fused({B, P, P, kInputChannels});
  for (std::size_t b = 0; b < B; ++b) {
    const double* g = global_batch.ptr() + b * G * G * 3;
    RasterImage resized = resize_bilinear(RasterImage(G, G, 3, std::vector<double>(g, g + G * G * 3)), P, P);
    for (std::size_t i = 0; i < P * P; ++i) {
      double* dst = fused.ptr() + (b * P * P + i) * kInputChannels;
      const double* l = local_batch.ptr() + (b * P * P + i) * 3;
      std::copy(l, l + 3, dst);
      std::copy(resized.pixels().data() + i * 3, resized.pixels().data() + i * 3 + 3, dst + 3);
    }
  }
  return fused;
}

/// Inputs are NHWC batches already scaled by kInputScale. Returns B x P x P x 1
/// probabilities; the cache holds everything backward() needs.
inline Tensor forward(const Model& model, const Tensor& local_batch, const Tensor& global_batch, ForwardCache& cache) {
  using namespace detail;
  const ModelConfig& cfg = model.config();
  const std::size_t L = cfg.levels;
  cache = ForwardCache{};
  cache.config = cfg;
  cache.model_version = model.version();
  cache.input = fuse_inputs(cfg, local_batch, global_batch);
  cache.batch = cache.input.dim(0);

  cache.encoder.resize(L);
  const Tensor* x = &cache.input;
  for (std::size_t i = 0; i < L; ++i) {
    auto& e = cache.encoder[i];
    e.act1 = conv2d_forward(*x, model.encoder_conv(i, 0));
    relu_inplace(e.act1);
    e.act2 = conv2d_forward(e.act1, model.encoder_conv(i, 1));
    relu_inplace(e.act2);
    e.pooled = maxpool2_forward(e.act2, e.argmax);
    x = &e.pooled;
  }
  cache.bottleneck1 = conv2d_forward(*x, model.bottleneck_conv(0));
  relu_inplace(cache.bottleneck1);
  cache.bottleneck2 = conv2d_forward(cache.bottleneck1, model.bottleneck_conv(1));
  relu_inplace(cache.bottleneck2);
  cache.bottleneck_out = cache.bottleneck1 + cache.bottleneck2;

  cache.decoder.resize(L);
  x = &cache.bottleneck_out;
  for (std::size_t k = L; k-- > 0;) {
    auto& d = cache.decoder[k];
    d.fused = concat_channels(upsample2_forward(*x), cache.encoder[k].act2);
    d.act1 = conv2d_forward(d.fused, model.decoder_conv(k, 0));
    relu_inplace(d.act1);
    d.act2 = conv2d_forward(d.act1, model.decoder_conv(k, 1));
    relu_inplace(d.act2);
    x = &d.act2;
  }
  cache.head_input = concat_channels(*x, cache.input);
  cache.probs = conv2d_forward(cache.head_input, model.head());
  for (auto& v : cache.probs.data()) v = sigmoid(v);
  return cache.probs;
}

inline Tensor forward(const Model& model, const Tensor& local_batch, const Tensor& global_batch) {
  ForwardCache cache;
  return forward(model, local_batch, global_batch, cache);
}

/// Gradients of sum(output_grad * probs) for every parameter, in
/// Model::parameters() order. Batch contributions are summed.
inline std::vector<Tensor> backward(const Model& model, const ForwardCache& cache, const Tensor& output_grad) {
  using namespace detail;
  require(cache.config == model.config() && cache.model_version == model.version() &&
              cache.encoder.size() == model.config().levels && !cache.probs.data().empty(),
          ErrorKind::StaleCache, "forward cache does not belong to this model state");
  require(output_grad.shape() == cache.probs.shape(), ErrorKind::ShapeMismatch,
          "output gradient shape " + shape_string(output_grad.shape()) + " does not match output " +
              shape_string(cache.probs.shape()));
  const std::size_t L = model.config().levels;
  const auto& convs = model.convs();
  std::vector<Tensor> grads;
  grads.reserve(2 * convs.size());
  for (const auto& c : convs) {
    grads.push_back(Tensor::zeros_like(c.weight));
    grads.push_back(Tensor::zeros_like(c.bias));
  }
  auto gw = [&](std::size_t conv_index) -> Tensor& { return grads[2 * conv_index]; };
  auto gb = [&](std::size_t conv_index) -> Tensor& { return grads[2 * conv_index + 1]; };
  const std::size_t head_idx = convs.size() - 1;
  auto enc_idx = [&](std::size_t i, std::size_t j) { return 2 * i + j; };
  auto bott_idx = [&](std::size_t j) { return 2 * L + j; };
  auto dec_idx = [&](std::size_t k, std::size_t j) { return 2 * L + 2 + 2 * (L - 1 - k) + j; };

  // sigmoid
  Tensor dlogit = output_grad;
  for (std::size_t i = 0; i < dlogit.size(); ++i) {
    const double p = cache.probs[i];
    dlogit[i] *= p * (1.0 - p);
  }
  Tensor dhead_in = Tensor::zeros_like(cache.head_input);
  conv2d_backward(cache.head_input, convs[head_idx], dlogit, gw(head_idx), gb(head_idx), &dhead_in);
  // The input half of the head concat feeds no parameters.
  Tensor dx = split_channels(dhead_in, model.config().base_channels).first;

  std::vector<Tensor> dskip(L);
  for (std::size_t k = 0; k < L; ++k) {
    const auto& d = cache.decoder[k];
    relu_backward(d.act2, dx);
    Tensor dact1 = Tensor::zeros_like(d.act1);
    conv2d_backward(d.act1, convs[dec_idx(k, 1)], dx, gw(dec_idx(k, 1)), gb(dec_idx(k, 1)), &dact1);
    relu_backward(d.act1, dact1);
    Tensor dfused = Tensor::zeros_like(d.fused);
    conv2d_backward(d.fused, convs[dec_idx(k, 0)], dact1, gw(dec_idx(k, 0)), gb(dec_idx(k, 0)), &dfused);
    const std::size_t up_channels = d.fused.dim(3) - cache.encoder[k].act2.dim(3);
    auto [dup, ds] = split_channels(dfused, up_channels);
    dskip[k] = std::move(ds);
    dx = upsample2_backward(dup);
  }

  // bottleneck: out = b1 + relu(conv(b1))
  Tensor db2 = dx;
  relu_backward(cache.bottleneck2, db2);
  Tensor db1 = dx;
  conv2d_backward(cache.bottleneck1, convs[bott_idx(1)], db2, gw(bott_idx(1)), gb(bott_idx(1)), &db1);
  relu_backward(cache.bottleneck1, db1);
  const Tensor& bott_in = cache.encoder[L - 1].pooled;
  Tensor dpool = Tensor::zeros_like(bott_in);
  conv2d_backward(bott_in, convs[bott_idx(0)], db1, gw(bott_idx(0)), gb(bott_idx(0)), &dpool);

  for (std::size_t i = L; i-- > 0;) {
    const auto& e = cache.encoder[i];
    Tensor dact2 = maxpool2_backward(e.act2.shape(), e.argmax, dpool);
    add_into(dact2, dskip[i]);
    relu_backward(e.act2, dact2);
    Tensor dact1 = Tensor::zeros_like(e.act1);
    conv2d_backward(e.act1, convs[enc_idx(i, 1)], dact2, gw(enc_idx(i, 1)), gb(enc_idx(i, 1)), &dact1);
    relu_backward(e.act1, dact1);
    const Tensor& in = i == 0 ? cache.input : cache.encoder[i - 1].pooled;
    if (i == 0) {
      conv2d_backward(in, convs[enc_idx(0, 0)], dact1, gw(enc_idx(0, 0)), gb(enc_idx(0, 0)), nullptr);
    } else {
      dpool = Tensor::zeros_like(in);
      conv2d_backward(in, convs[enc_idx(i, 0)], dact1, gw(enc_idx(i, 0)), gb(enc_idx(i, 0)), &dpool);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Patch-level inference.

/// Packs patch pairs into scaled NHWC batches.
inline std::pair<Tensor, Tensor> pack_batch(const std::vector<const PatchPair*>& pairs) {
  require(!pairs.empty(), ErrorKind::InvalidArgument, "cannot pack an empty batch");
  const RasterImage& l0 = pairs.front()->local;
  const RasterImage& g0 = pairs.front()->global_raw;
  const std::size_t B = pairs.size();
  Tensor local({B, l0.height(), l0.width(), 3});
  Tensor global({B, g0.height(), g0.width(), 3});
  const std::size_t ln = l0.pixels().size(), gn = g0.pixels().size();
  for (std::size_t b = 0; b < B; ++b) {
    const PatchPair& p = *pairs[b];
    require(p.local.same_dims(l0) && p.global_raw.same_dims(g0) && l0.channels() == 3 && g0.channels() == 3,
            ErrorKind::ShapeMismatch, "patch pairs in a batch must share RGB dimensions");
    for (std::size_t i = 0; i < ln; ++i) local[b * ln + i] = p.local.pixels()[i] * kInputScale;
    for (std::size_t i = 0; i < gn; ++i) global[b * gn + i] = p.global_raw.pixels()[i] * kInputScale;
  }
  return {std::move(local), std::move(global)};
}

inline RasterImage predict_patch(const Model& model, const PatchPair& pair) {
  const ModelConfig& cfg = model.config();
  require(pair.local.height() == cfg.patch_size && pair.local.width() == cfg.patch_size &&
              pair.global_raw.height() == cfg.global_size() && pair.global_raw.width() == cfg.global_size(),
          ErrorKind::ShapeMismatch, "patch pair does not match model patch/margin sizes");
  auto [local, global] = pack_batch({&pair});
  Tensor probs = forward(model, local, global);
  return RasterImage(cfg.patch_size, cfg.patch_size, 1, std::vector<double>(probs.data().begin(), probs.data().end()));
}

// ---------------------------------------------------------------------------
// Checkpoints: one line of JSON header, then little-endian float64 parameters.

inline constexpr std::string_view kCheckpointFormat = "histoseg-checkpoint";

inline std::string checkpoint_bytes(const Model& model) {
  const ModelConfig& cfg = model.config();
  nlohmann::ordered_json header;
  header["format"] = kCheckpointFormat;
  header["version"] = 1;
  header["config"] = {{"patch_size", cfg.patch_size},
                      {"margin", cfg.margin},
                      {"levels", cfg.levels},
                      {"base_channels", cfg.base_channels},
                      {"seed", cfg.seed}};
  header["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : layer_list(cfg)) header["layers"].push_back({{"kind", l.kind}, {"name", l.name}});
  header["parameters"] = nlohmann::ordered_json::array();
  const auto names = model.parameter_names();
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    header["parameters"].push_back({{"name", names[i]}, {"shape", params[i]->shape()}});

  std::string out = header.dump();
  out.push_back('\n');
  for (const Tensor* t : params)
    for (double v : t->data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  return out;
}

inline Model model_from_checkpoint_bytes(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  require(nl != std::string::npos, ErrorKind::Parse, "checkpoint header is not terminated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("checkpoint header: ") + e.what());
  }
  require(header.value("format", "") == kCheckpointFormat && header.value("version", 0) == 1, ErrorKind::Parse,
          "not a histoseg checkpoint (version 1)");
  ModelConfig cfg;
  try {
    const auto& c = header.at("config");
    cfg.patch_size = c.at("patch_size").get<std::size_t>();
    cfg.margin = c.at("margin").get<std::size_t>();
    cfg.levels = c.at("levels").get<std::size_t>();
    cfg.base_channels = c.at("base_channels").get<std::size_t>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("checkpoint config: ") + e.what());
  }
  Model model(cfg, conv_recipe(cfg));
  auto params = model.parameters();
  const auto names = model.parameter_names();
  const auto& listed = header.at("parameters");
  require(listed.size() == params.size(), ErrorKind::Parse, "checkpoint parameter list does not match config");
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(listed[i].at("name").get<std::string>() == names[i] &&
                listed[i].at("shape").get<Shape>() == params[i]->shape(),
            ErrorKind::Parse, "checkpoint parameter " + names[i] + " has unexpected name or shape");
    total += params[i]->size();
  }
  require(bytes.size() - nl - 1 == total * 8, ErrorKind::Parse, "checkpoint payload size mismatch");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
  for (Tensor* t : params)
    for (auto& v : t->data()) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
      v = std::bit_cast<double>(bits);
      p += 8;
    }
  return model;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write checkpoint " + path.string());
  const std::string bytes = checkpoint_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::Io, "failed writing checkpoint " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::error_code ec;
  require(std::filesystem::is_regular_file(path, ec), ErrorKind::FileNotFound, "no such checkpoint: " + path.string());
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return model_from_checkpoint_bytes(bytes);
  } catch (const Error& e) {
    rethrow_with_context(e, path.string());
  }
}

}  // namespace histoseg
