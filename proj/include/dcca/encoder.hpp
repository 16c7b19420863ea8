#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "dcca/matrix.hpp"
#include "dcca/rng.hpp"
#include "dcca/shape.hpp"

namespace dcca {

// Layer vocabulary. Conv1x1Linear is the final 1x1 projection onto h maps.
struct Conv {
  std::size_t maps = 0;
  std::size_t kernel = 3;
  std::size_t pad = 1;
  friend bool operator==(const Conv&, const Conv&) = default;
};
struct Conv1x1Linear {
  std::size_t maps = 0;
  friend bool operator==(const Conv1x1Linear&, const Conv1x1Linear&) = default;
};
struct BatchNorm {
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};
struct Elu {
  friend bool operator==(const Elu&, const Elu&) = default;
};
struct MaxPool {
  std::size_t size = 2;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};
struct GlobalAvgPool {
  friend bool operator==(const GlobalAvgPool&, const GlobalAvgPool&) = default;
};
struct Dense {
  std::size_t units = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};

using LayerSpec = std::variant<Conv, Conv1x1Linear, BatchNorm, Elu, MaxPool, GlobalAvgPool, Dense>;
using EncoderConfig = std::vector<LayerSpec>;

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kEluAlpha = 1.0;

struct LayerParams {
  std::vector<double> weight;  // conv: maps x in x k x k; dense: in x units; BN: gamma
  std::vector<double> bias;    // conv/dense bias; BN: beta
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct BnStats {
  std::vector<double> mean;
  std::vector<double> var;
  friend bool operator==(const BnStats&, const BnStats&) = default;
};

using ParamGrads = std::vector<LayerParams>;

enum class Mode { kTrain, kEval };

/// Intermediates of one train-mode forward pass.
struct ForwardCache {
  std::vector<Matrix> activations;  // activations[i] is the input of layer i
  std::vector<Vector> bn_mean;
  std::vector<Vector> bn_inv_std;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  // Gradient buffers reused by backward so repeated steps do not reallocate.
  mutable std::array<Matrix, 2> grad_scratch;
  std::uint64_t encoder_id = 0;
  std::uint64_t generation = 0;
  bool valid = false;
};

inline std::string layer_name(const LayerSpec& spec) {
  return std::visit(
      [](const auto& l) -> std::string {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv>)
          return "Conv(" + std::to_string(l.kernel) + ",pad-" + std::to_string(l.pad) + ")-" +
                 std::to_string(l.maps);
        else if constexpr (std::is_same_v<T, Conv1x1Linear>)
          return "Conv(1,pad-0)-" + std::to_string(l.maps) + "-LINEAR";
        else if constexpr (std::is_same_v<T, BatchNorm>)
          return "BN";
        else if constexpr (std::is_same_v<T, Elu>)
          return "ELU";
        else if constexpr (std::is_same_v<T, MaxPool>)
          return "MP(" + std::to_string(l.size) + ")";
        else if constexpr (std::is_same_v<T, GlobalAvgPool>)
          return "GlobalAveragePooling";
        else
          return "Dense-" + std::to_string(l.units);
      },
      spec);
}

namespace detail {

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, out_c, out_h, out_w, kernel, pad;
};

inline ConvGeometry conv_geometry(const Shape& in, std::size_t maps, std::size_t kernel,
                                  std::size_t pad) {
  return {in.channels, in.height, in.width, maps, in.height + 2 * pad + 1 - kernel,
          in.width + 2 * pad + 1 - kernel, kernel, pad};
}

// Valid output range [lo, hi) along one axis for kernel offset `off` = k - pad.
inline void valid_range(std::ptrdiff_t off, std::size_t out_len, std::size_t in_len,
                        std::size_t& lo, std::size_t& hi) {
  const std::ptrdiff_t l = std::max<std::ptrdiff_t>(0, -off);
  const std::ptrdiff_t h =
      std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len),
                               static_cast<std::ptrdiff_t>(in_len) - off);
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(std::max(l, h));
}

inline void conv_forward_sample(const ConvGeometry& g, const double* w, const double* bias,
                                const double* in, double* out) {
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t in_plane = g.in_h * g.in_w;
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    double* o = out + oc * out_plane;
    std::fill(o, o + out_plane, bias[oc]);
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      const double* src = in + ic * in_plane;
      const double* wk = w + (oc * g.in_c + ic) * g.kernel * g.kernel;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(g.pad);
        std::size_t y0, y1;
        valid_range(dy, g.out_h, g.in_h, y0, y1);
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const std::ptrdiff_t dx =
              static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
          std::size_t x0, x1;
          valid_range(dx, g.out_w, g.in_w, x0, x1);
          const double wv = wk[ky * g.kernel + kx];
          for (std::size_t y = y0; y < y1; ++y) {
            double* __restrict orow = o + y * g.out_w;
            const double* __restrict irow =
                src + static_cast<std::ptrdiff_t>((y + dy) * g.in_w) + dx;
            for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients and, when grad_in is non-null, the input
// gradient of one sample.
inline void conv_backward_sample(const ConvGeometry& g, const double* w, const double* in,
                                 const double* grad_out, double* grad_w, double* grad_b,
                                 double* grad_in) {
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t in_plane = g.in_h * g.in_w;
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    const double* go = grad_out + oc * out_plane;
    double bsum = 0.0;
    for (std::size_t i = 0; i < out_plane; ++i) bsum += go[i];
    grad_b[oc] += bsum;
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      const double* src = in + ic * in_plane;
      double* gin = grad_in == nullptr ? nullptr : grad_in + ic * in_plane;
      const std::size_t wbase = (oc * g.in_c + ic) * g.kernel * g.kernel;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(g.pad);
        std::size_t y0, y1;
        valid_range(dy, g.out_h, g.in_h, y0, y1);
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const std::ptrdiff_t dx =
              static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
          std::size_t x0, x1;
          valid_range(dx, g.out_w, g.in_w, x0, x1);
          const double wv = w[wbase + ky * g.kernel + kx];
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            const double* __restrict grow = go + y * g.out_w;
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>((y + dy) * g.in_w) + dx;
            const double* __restrict irow = src + off;
            for (std::size_t x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            if (gin != nullptr) {
              double* __restrict girow = gin + off;
              for (std::size_t x = x0; x < x1; ++x) girow[x] += wv * grow[x];
            }
          }
          grad_w[wbase + ky * g.kernel + kx] += acc;
        }
      }
    }
  }
}

// exp(x) for x <= 0, written so the compiler can vectorize it. Range
// reduction to |r| <= ln2/2 (round-to-nearest via the shifter) and a degree-12 Taylor polynomial give about
// 1 ulp; inputs below -708 flush to exp(-708).
[[gnu::always_inline]] inline double exp_nonpositive(double x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShifter = 6755399441055744.0;  // 1.5 * 2^52
  x = std::max(x, -708.0);
  const double k = (x * kLog2e + kShifter) - kShifter;
  const double r = (x - k * kLn2Hi) - k * kLn2Lo;
  double p = 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const std::uint64_t biased = std::bit_cast<std::uint64_t>(k + 1023.0 + kShifter);
  return p * std::bit_cast<double>(biased << 52);
}

// Specialized 3x3, pad-1 kernels. Every output row accumulates all nine taps
// in one pass; rows outside the input read from `zeros`.
inline bool is_conv3x3_same(const ConvGeometry& g) {
  return g.kernel == 3 && g.pad == 1 && g.in_w >= 2 && g.out_w == g.in_w && g.out_h == g.in_h;
}

// o[x] += Σ_taps w[ky*3+kx] * r_ky[x + kx - 1] over one row of width n.
inline void accumulate_row3x3(double* __restrict o, const double* __restrict r0,
                              const double* __restrict r1, const double* __restrict r2,
                              const double* w, std::size_t n) {
  const double w0 = w[0], w1 = w[1], w2 = w[2], w3 = w[3], w4 = w[4], w5 = w[5], w6 = w[6],
               w7 = w[7], w8 = w[8];
  o[0] += w1 * r0[0] + w2 * r0[1] + w4 * r1[0] + w5 * r1[1] + w7 * r2[0] + w8 * r2[1];
#pragma omp simd
  for (std::size_t x = 1; x < n - 1; ++x) {
    o[x] += w0 * r0[x - 1] + w1 * r0[x] + w2 * r0[x + 1] + w3 * r1[x - 1] + w4 * r1[x] +
            w5 * r1[x + 1] + w6 * r2[x - 1] + w7 * r2[x] + w8 * r2[x + 1];
  }
  const std::size_t e = n - 1;
  o[e] += w0 * r0[e - 1] + w1 * r0[e] + w3 * r1[e - 1] + w4 * r1[e] + w6 * r2[e - 1] + w7 * r2[e];
}

inline void conv3x3_forward_sample(const ConvGeometry& g, const double* w, const double* bias,
                                   const double* in, double* out, const double* zeros) {
  const std::size_t width = g.in_w, height = g.in_h, plane = width * height;
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    for (std::size_t y = 0; y < height; ++y) {
      double* o = out + oc * plane + y * width;
      std::fill(o, o + width, bias[oc]);
      for (std::size_t ic = 0; ic < g.in_c; ++ic) {
        const double* src = in + ic * plane;
        const double* r0 = y > 0 ? src + (y - 1) * width : zeros;
        const double* r1 = src + y * width;
        const double* r2 = y + 1 < height ? src + (y + 1) * width : zeros;
        accumulate_row3x3(o, r0, r1, r2, w + (oc * g.in_c + ic) * 9, width);
      }
    }
  }
}

inline void conv3x3_backward_sample(const ConvGeometry& g, const double* w, const double* in,
                                    const double* grad_out, double* grad_w, double* grad_b,
                                    double* grad_in, const double* zeros) {
  const std::size_t width = g.in_w, height = g.in_h, plane = width * height;
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    const double* go = grad_out + oc * plane;
    double bsum = 0.0;
#pragma omp simd reduction(+ : bsum)
    for (std::size_t i = 0; i < plane; ++i) bsum += go[i];
    grad_b[oc] += bsum;
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      const double* src = in + ic * plane;
      double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
      for (std::size_t y = 0; y < height; ++y) {
        const double* gr = go + y * width;
        const double* r0 = y > 0 ? src + (y - 1) * width : zeros;
        const double* r1 = src + y * width;
        const double* r2 = y + 1 < height ? src + (y + 1) * width : zeros;
#pragma omp simd reduction(+ : a0, a1, a2, a3, a4, a5, a6, a7, a8)
        for (std::size_t x = 1; x < width - 1; ++x) {
          const double gv = gr[x];
          a0 += gv * r0[x - 1];
          a1 += gv * r0[x];
          a2 += gv * r0[x + 1];
          a3 += gv * r1[x - 1];
          a4 += gv * r1[x];
          a5 += gv * r1[x + 1];
          a6 += gv * r2[x - 1];
          a7 += gv * r2[x];
          a8 += gv * r2[x + 1];
        }
        const double g0 = gr[0];
        a1 += g0 * r0[0];
        a2 += g0 * r0[1];
        a4 += g0 * r1[0];
        a5 += g0 * r1[1];
        a7 += g0 * r2[0];
        a8 += g0 * r2[1];
        const std::size_t e = width - 1;
        const double ge = gr[e];
        a0 += ge * r0[e - 1];
        a1 += ge * r0[e];
        a3 += ge * r1[e - 1];
        a4 += ge * r1[e];
        a6 += ge * r2[e - 1];
        a7 += ge * r2[e];
      }
      double* gw = grad_w + (oc * g.in_c + ic) * 9;
      gw[0] += a0; gw[1] += a1; gw[2] += a2;
      gw[3] += a3; gw[4] += a4; gw[5] += a5;
      gw[6] += a6; gw[7] += a7; gw[8] += a8;
    }
  }
  if (grad_in == nullptr) return;
  // The input gradient is a correlation of grad_out with the flipped kernel.
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    for (std::size_t y = 0; y < height; ++y) {
      double* gi = grad_in + ic * plane + y * width;
      for (std::size_t oc = 0; oc < g.out_c; ++oc) {
        const double* go = grad_out + oc * plane;
        const double* k = w + (oc * g.in_c + ic) * 9;
        const double flipped[9] = {k[8], k[7], k[6], k[5], k[4], k[3], k[2], k[1], k[0]};
        const double* r0 = y > 0 ? go + (y - 1) * width : zeros;
        const double* r1 = go + y * width;
        const double* r2 = y + 1 < height ? go + (y + 1) * width : zeros;
        accumulate_row3x3(gi, r0, r1, r2, flipped, width);
      }
    }
  }
}

}  // namespace detail

/// One view's feature mapping: a stack of layers ending in an h-dimensional
/// output per sample.
class Encoder {
 public:
  Encoder() = default;

  /// He-uniform weights, zero biases, BN scale 1 / shift 0 and running stats
  /// (0, 1). Fully determined by (config, input_shape, h, seed).
  static Encoder init(EncoderConfig config, Shape input_shape, std::size_t h, std::uint64_t seed) {
    Encoder enc;
    enc.config_ = std::move(config);
    enc.input_shape_ = input_shape;
    enc.h_ = h;
    enc.validate_and_plan();
    Rng rng(derive_seed(seed, 0xE4C0DE));
    for (std::size_t i = 0; i < enc.config_.size(); ++i) {
      const Shape& in = enc.shapes_[i];
      const Shape& out = enc.shapes_[i + 1];
      LayerParams& p = enc.params_[i];
      std::visit(
          [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Conv> || std::is_same_v<T, Conv1x1Linear>) {
              const std::size_t k = kernel_of(l);
              const std::size_t fan_in = in.channels * k * k;
              p.weight.resize(out.channels * fan_in);
              p.bias.assign(out.channels, 0.0);
              const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
              for (double& w : p.weight) w = rng.uniform(-limit, limit);
            } else if constexpr (std::is_same_v<T, Dense>) {
              const std::size_t fan_in = in.size();
              p.weight.resize(fan_in * l.units);
              p.bias.assign(l.units, 0.0);
              const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
              for (double& w : p.weight) w = rng.uniform(-limit, limit);
            } else if constexpr (std::is_same_v<T, BatchNorm>) {
              p.weight.assign(in.channels, 1.0);
              p.bias.assign(in.channels, 0.0);
              enc.bn_[i].mean.assign(in.channels, 0.0);
              enc.bn_[i].var.assign(in.channels, 1.0);
            }
          },
          enc.config_[i]);
    }
    return enc;
  }

  /// Rebuilds an encoder from stored parts (checkpoint loading).
  static Encoder from_parts(EncoderConfig config, Shape input_shape, std::size_t h,
                            std::vector<LayerParams> params, std::vector<BnStats> bn) {
    Encoder enc;
    enc.config_ = std::move(config);
    enc.input_shape_ = input_shape;
    enc.h_ = h;
    enc.validate_and_plan();
    require(params.size() == enc.params_.size() && bn.size() == enc.bn_.size(),
            ErrorCode::kFormat, "encoder parameter block count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(params[i].weight.size() == enc.expected_weight_size(i) &&
                  params[i].bias.size() == enc.expected_bias_size(i),
              ErrorCode::kFormat, "encoder parameter size mismatch in layer " + std::to_string(i));
      const std::size_t stats =
          std::holds_alternative<BatchNorm>(enc.config_[i]) ? enc.shapes_[i].channels : 0;
      require(bn[i].mean.size() == stats && bn[i].var.size() == stats,
              ErrorCode::kFormat, "batch-norm statistics size mismatch");
    }
    enc.params_ = std::move(params);
    enc.bn_ = std::move(bn);
    return enc;
  }

  const EncoderConfig& config() const noexcept { return config_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<Shape>& layer_shapes() const noexcept { return shapes_; }
  std::size_t h() const noexcept { return h_; }
  const std::vector<LayerParams>& params() const noexcept { return params_; }
  const std::vector<BnStats>& bn_stats() const noexcept { return bn_; }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.weight.size() + p.bias.size();
    return n;
  }

  /// Mutable views over every trainable array, in a fixed order. Taking them
  /// invalidates outstanding forward caches.
  std::vector<std::span<double>> parameter_spans() {
    ++generation_;
    std::vector<std::span<double>> spans;
    for (auto& p : params_) {
      if (!p.weight.empty()) spans.emplace_back(p.weight);
      if (!p.bias.empty()) spans.emplace_back(p.bias);
    }
    return spans;
  }

  ParamGrads zero_grads() const {
    ParamGrads g(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      g[i].weight.assign(params_[i].weight.size(), 0.0);
      g[i].bias.assign(params_[i].bias.size(), 0.0);
    }
    return g;
  }

  /// Train mode uses batch statistics in BN and updates running statistics;
  /// eval mode is a fixed per-sample map. Fills `cache` when given (train only).
  Matrix forward(const Matrix& batch, Mode mode, ForwardCache* cache = nullptr) {
    if (mode == Mode::kEval) return infer(batch);
    check_input(batch);
    require(batch.rows() >= 2, ErrorCode::kDimension,
            "train-mode forward needs at least 2 samples for batch statistics");
    ForwardCache local;
    ForwardCache& c = cache != nullptr ? *cache : local;
    c.valid = false;
    const std::size_t n = config_.size();
    c.activations.resize(n + 1);
    c.bn_mean.resize(n);
    c.bn_inv_std.resize(n);
    c.pool_argmax.resize(n);
    c.activations[0] = batch;
    for (std::size_t i = 0; i < n; ++i)
      layer_forward(i, c.activations[i], Mode::kTrain, &c, &bn_[i], c.activations[i + 1]);
    c.encoder_id = id_;
    c.generation = generation_;
    c.valid = true;
    Matrix out = c.activations[n];
    require(all_finite(out), ErrorCode::kNumeric, "encoder produced non-finite output");
    return out;
  }

  /// Eval-mode forward, processed in fixed-size chunks. Read-only.
  Matrix infer(const Matrix& batch, std::size_t chunk = 64) const {
    check_input(batch);
    Matrix out(batch.rows(), h_);
    Matrix x, y;
    for (std::size_t start = 0; start < batch.rows(); start += chunk) {
      const std::size_t stop = std::min(batch.rows(), start + chunk);
      x.resize(stop - start, batch.cols());
      std::copy(batch.data().begin() + static_cast<std::ptrdiff_t>(start * batch.cols()),
                batch.data().begin() + static_cast<std::ptrdiff_t>(stop * batch.cols()),
                x.data().begin());
      for (std::size_t i = 0; i < config_.size(); ++i) {
        layer_forward(i, x, Mode::kEval, nullptr, nullptr, y);
        std::swap(x, y);
      }
      std::copy(x.data().begin(), x.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(start * h_));
    }
    require(all_finite(out), ErrorCode::kNumeric, "encoder produced non-finite output");
    return out;
  }

  /// Exact reverse-mode gradients of a train-mode forward, including the
  /// batch-statistics terms of batch normalization.
  ParamGrads backward(const ForwardCache& cache, const Matrix& grad_out) const {
    require(cache.valid && cache.encoder_id == id_ && cache.generation == generation_,
            ErrorCode::kState, "forward cache is stale or belongs to another encoder");
    const std::size_t n = config_.size();
    const std::size_t batch = cache.activations[0].rows();
    require(grad_out.rows() == batch && grad_out.cols() == h_, ErrorCode::kDimension,
            "grad_out must be batch x h");
    ParamGrads grads = zero_grads();
    Matrix* g = &cache.grad_scratch[0];
    Matrix* next = &cache.grad_scratch[1];
    *g = grad_out;
    for (std::size_t i = n; i-- > 0;) {
      const bool need_input_grad = i > 0;
      layer_backward(i, cache, *g, grads[i], need_input_grad, *next);
      std::swap(g, next);
    }
    return grads;
  }

 private:
  static std::size_t kernel_of(const Conv& c) { return c.kernel; }
  static std::size_t kernel_of(const Conv1x1Linear&) { return 1; }
  static std::size_t pad_of(const Conv& c) { return c.pad; }
  static std::size_t pad_of(const Conv1x1Linear&) { return 0; }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  void check_input(const Matrix& batch) const {
    require(batch.cols() == input_shape_.size(), ErrorCode::kDimension,
            "batch has " + std::to_string(batch.cols()) + " values per sample, encoder expects " +
                input_shape_.str());
  }

  std::size_t expected_weight_size(std::size_t i) const {
    const Shape& in = shapes_[i];
    const Shape& out = shapes_[i + 1];
    return std::visit(
        [&](const auto& l) -> std::size_t {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv> || std::is_same_v<T, Conv1x1Linear>)
            return out.channels * in.channels * kernel_of(l) * kernel_of(l);
          else if constexpr (std::is_same_v<T, Dense>)
            return in.size() * l.units;
          else if constexpr (std::is_same_v<T, BatchNorm>)
            return in.channels;
          else
            return 0;
        },
        config_[i]);
  }

  std::size_t expected_bias_size(std::size_t i) const {
    return std::holds_alternative<Elu>(config_[i]) || std::holds_alternative<MaxPool>(config_[i]) ||
                   std::holds_alternative<GlobalAvgPool>(config_[i])
               ? 0
               : (std::holds_alternative<BatchNorm>(config_[i]) ? shapes_[i].channels
                                                                : shapes_[i + 1].channels);
  }

  void validate_and_plan() {
    require(!config_.empty(), ErrorCode::kInvalidConfig, "encoder config is empty");
    require(input_shape_.size() > 0, ErrorCode::kInvalidConfig, "input shape is empty");
    require(h_ > 0, ErrorCode::kInvalidConfig, "h must be positive");
    shapes_.assign(1, input_shape_);
    for (std::size_t i = 0; i < config_.size(); ++i) {
      const Shape in = shapes_.back();
      const std::string where = "layer " + std::to_string(i) + " (" + layer_name(config_[i]) + ")";
      Shape out = std::visit(
          [&](const auto& l) -> Shape {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Conv> || std::is_same_v<T, Conv1x1Linear>) {
              require(in.rank == 3, ErrorCode::kInvalidConfig, where + " needs a spatial input");
              const std::size_t k = kernel_of(l), p = pad_of(l);
              require(l.maps > 0 && k > 0, ErrorCode::kInvalidConfig, where + " has no maps");
              require(in.height + 2 * p >= k && in.width + 2 * p >= k, ErrorCode::kInvalidConfig,
                      where + " kernel larger than padded input " + in.str());
              return Shape::image(l.maps, in.height + 2 * p + 1 - k, in.width + 2 * p + 1 - k);
            } else if constexpr (std::is_same_v<T, MaxPool>) {
              require(in.rank == 3, ErrorCode::kInvalidConfig, where + " needs a spatial input");
              require(l.size > 0 && in.height / l.size > 0 && in.width / l.size > 0,
                      ErrorCode::kInvalidConfig, where + " reduces " + in.str() + " to zero");
              return Shape::image(in.channels, in.height / l.size, in.width / l.size);
            } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
              require(in.rank == 3, ErrorCode::kInvalidConfig, where + " needs a spatial input");
              return Shape::flat(in.channels);
            } else if constexpr (std::is_same_v<T, Dense>) {
              require(l.units > 0, ErrorCode::kInvalidConfig, where + " has no units");
              return Shape::flat(l.units);
            } else {
              return in;
            }
          },
          config_[i]);
      shapes_.push_back(out);
    }
    const LayerSpec& last = config_.back();
    require(std::holds_alternative<GlobalAvgPool>(last) || std::holds_alternative<Dense>(last),
            ErrorCode::kInvalidConfig, "encoder must end with GlobalAvgPool or Dense");
    require(shapes_.back().size() == h_, ErrorCode::kInvalidConfig,
            "encoder produces " + std::to_string(shapes_.back().size()) + " outputs, expected h=" +
                std::to_string(h_));
    std::size_t last_projection = 0;
    for (std::size_t i = 0; i < config_.size(); ++i)
      if (std::holds_alternative<Conv>(config_[i]) ||
          std::holds_alternative<Conv1x1Linear>(config_[i]) ||
          std::holds_alternative<Dense>(config_[i]))
        last_projection = i;
    for (std::size_t i = last_projection + 1; i < config_.size(); ++i)
      require(!std::holds_alternative<Elu>(config_[i]), ErrorCode::kInvalidConfig,
              "no activation may follow the final projection layer");
    params_.assign(config_.size(), LayerParams{});
    bn_.assign(config_.size(), BnStats{});
    id_ = next_id();
  }

  // `running` receives the batch-statistics update in train mode.
  // Every branch overwrites all of `y`.
  void layer_forward(std::size_t i, const Matrix& x, Mode mode, ForwardCache* cache,
                     BnStats* running, Matrix& y) const {
    const Shape& in = shapes_[i];
    const Shape& out = shapes_[i + 1];
    const std::size_t batch = x.rows();
    y.resize(batch, out.size());
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          const LayerParams& p = params_[i];
          if constexpr (std::is_same_v<T, Conv> || std::is_same_v<T, Conv1x1Linear>) {
            const auto geo = detail::conv_geometry(in, out.channels, kernel_of(l), pad_of(l));
            if (detail::is_conv3x3_same(geo)) {
              const std::vector<double> zeros(geo.in_w, 0.0);
              for (std::size_t b = 0; b < batch; ++b)
                detail::conv3x3_forward_sample(geo, p.weight.data(), p.bias.data(),
                                               x.row(b).data(), y.row(b).data(), zeros.data());
            } else {
              for (std::size_t b = 0; b < batch; ++b)
                detail::conv_forward_sample(geo, p.weight.data(), p.bias.data(), x.row(b).data(),
                                            y.row(b).data());
            }
          } else if constexpr (std::is_same_v<T, Dense>) {
            const std::size_t fan_in = in.size();
            for (std::size_t b = 0; b < batch; ++b) {
              double* o = y.row(b).data();
              std::copy(p.bias.begin(), p.bias.end(), o);
              const double* xi = x.row(b).data();
              for (std::size_t k = 0; k < fan_in; ++k) {
                const double s = xi[k];
                const double* wr = p.weight.data() + k * l.units;
                for (std::size_t u = 0; u < l.units; ++u) o[u] += s * wr[u];
              }
            }
          } else if constexpr (std::is_same_v<T, BatchNorm>) {
            batchnorm_forward(i, x, y, mode, cache, running);
          } else if constexpr (std::is_same_v<T, Elu>) {
            const double* src = x.data().data();
            double* dst = y.data().data();
            const std::size_t n = x.size();
#pragma omp simd
            for (std::size_t k = 0; k < n; ++k) {
              const double v = src[k];
              const double e = detail::exp_nonpositive(std::min(v, 0.0)) - 1.0;
              dst[k] = v >= 0.0 ? v : kEluAlpha * e;
            }
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            std::vector<std::uint32_t>* argmax = cache != nullptr ? &cache->pool_argmax[i] : nullptr;
            if (argmax != nullptr) argmax->resize(batch * out.size());
            const std::size_t s = l.size;
            for (std::size_t b = 0; b < batch; ++b) {
              const double* src = x.row(b).data();
              double* dst = y.row(b).data();
              for (std::size_t c = 0; c < out.channels; ++c) {
                for (std::size_t oy = 0; oy < out.height; ++oy) {
                  for (std::size_t ox = 0; ox < out.width; ++ox) {
                    std::size_t best = c * in.plane() + (oy * s) * in.width + ox * s;
                    for (std::size_t dy = 0; dy < s; ++dy)
                      for (std::size_t dx = 0; dx < s; ++dx) {
                        const std::size_t idx = c * in.plane() + (oy * s + dy) * in.width + ox * s + dx;
                        if (src[idx] > src[best]) best = idx;
                      }
                    const std::size_t o = c * out.plane() + oy * out.width + ox;
                    dst[o] = src[best];
                    if (argmax != nullptr) (*argmax)[b * out.size() + o] = static_cast<std::uint32_t>(best);
                  }
                }
              }
            }
          } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
            const double inv = 1.0 / static_cast<double>(in.plane());
            for (std::size_t b = 0; b < batch; ++b) {
              const double* src = x.row(b).data();
              for (std::size_t c = 0; c < in.channels; ++c) {
                double s = 0.0;
                const double* ch = src + c * in.plane();
                const std::size_t plane = in.plane();
#pragma omp simd reduction(+ : s)
                for (std::size_t k = 0; k < plane; ++k) s += ch[k];
                y(b, c) = s * inv;
              }
            }
          }
        },
        config_[i]);
  }

  void batchnorm_forward(std::size_t i, const Matrix& x, Matrix& y, Mode mode,
                         ForwardCache* cache, BnStats* running) const {
    const Shape& in = shapes_[i];
    const std::size_t batch = x.rows();
    const std::size_t plane = in.plane();
    const std::size_t channels = in.channels;
    const LayerParams& p = params_[i];
    Vector mean(channels), inv_std(channels);
    if (mode == Mode::kTrain) {
      const double count = static_cast<double>(batch * plane);
      for (std::size_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = x.row(b).data() + c * plane;
#pragma omp simd reduction(+ : s)
          for (std::size_t k = 0; k < plane; ++k) s += src[k];
        }
        const double mu = s / count;
        double v = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = x.row(b).data() + c * plane;
#pragma omp simd reduction(+ : v)
          for (std::size_t k = 0; k < plane; ++k) v += (src[k] - mu) * (src[k] - mu);
        }
        v /= count;
        mean[c] = mu;
        inv_std[c] = 1.0 / std::sqrt(v + kBatchNormEpsilon);
        if (running != nullptr) {
          running->mean[c] = kBatchNormMomentum * running->mean[c] + (1.0 - kBatchNormMomentum) * mu;
          running->var[c] = kBatchNormMomentum * running->var[c] + (1.0 - kBatchNormMomentum) * v;
        }
      }
      if (cache != nullptr) {
        cache->bn_mean[i] = mean;
        cache->bn_inv_std[i] = inv_std;
      }
    } else {
      for (std::size_t c = 0; c < channels; ++c) {
        mean[c] = bn_[i].mean[c];
        inv_std[c] = 1.0 / std::sqrt(bn_[i].var[c] + kBatchNormEpsilon);
      }
    }
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double scale = p.weight[c] * inv_std[c];
        const double shift = p.bias[c] - mean[c] * scale;
        const double* src = x.row(b).data() + c * plane;
        double* dst = y.row(b).data() + c * plane;
        for (std::size_t k = 0; k < plane; ++k) dst[k] = src[k] * scale + shift;
      }
    }
  }

  void layer_backward(std::size_t i, const ForwardCache& cache, const Matrix& g,
                      LayerParams& grad, bool need_input_grad, Matrix& gx) const {
    const Shape& in = shapes_[i];
    const Shape& out = shapes_[i + 1];
    const Matrix& x = cache.activations[i];
    const Matrix& y = cache.activations[i + 1];
    const std::size_t batch = x.rows();
    gx.resize(batch, in.size());
    // Conv and pooling scatter-add into the input gradient.
    if (std::holds_alternative<Conv>(config_[i]) || std::holds_alternative<Conv1x1Linear>(config_[i]) ||
        std::holds_alternative<MaxPool>(config_[i]))
      std::fill(gx.data().begin(), gx.data().end(), 0.0);
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          const LayerParams& p = params_[i];
          if constexpr (std::is_same_v<T, Conv> || std::is_same_v<T, Conv1x1Linear>) {
            const auto geo = detail::conv_geometry(in, out.channels, kernel_of(l), pad_of(l));
            if (detail::is_conv3x3_same(geo)) {
              const std::vector<double> zeros(geo.in_w, 0.0);
              for (std::size_t b = 0; b < batch; ++b)
                detail::conv3x3_backward_sample(geo, p.weight.data(), x.row(b).data(),
                                                g.row(b).data(), grad.weight.data(),
                                                grad.bias.data(),
                                                need_input_grad ? gx.row(b).data() : nullptr,
                                                zeros.data());
            } else {
              for (std::size_t b = 0; b < batch; ++b)
                detail::conv_backward_sample(geo, p.weight.data(), x.row(b).data(),
                                             g.row(b).data(), grad.weight.data(), grad.bias.data(),
                                             need_input_grad ? gx.row(b).data() : nullptr);
            }
          } else if constexpr (std::is_same_v<T, Dense>) {
            const std::size_t fan_in = in.size();
            for (std::size_t b = 0; b < batch; ++b) {
              const double* go = g.row(b).data();
              const double* xi = x.row(b).data();
              double* gi = gx.row(b).data();
              for (std::size_t u = 0; u < l.units; ++u) grad.bias[u] += go[u];
              for (std::size_t k = 0; k < fan_in; ++k) {
                const double* wr = p.weight.data() + k * l.units;
                double* gw = grad.weight.data() + k * l.units;
                double acc = 0.0;
                for (std::size_t u = 0; u < l.units; ++u) {
                  gw[u] += xi[k] * go[u];
                  acc += wr[u] * go[u];
                }
                gi[k] = acc;
              }
            }
          } else if constexpr (std::is_same_v<T, BatchNorm>) {
            const std::size_t plane = in.plane();
            const double count = static_cast<double>(batch * plane);
            const Vector& mean = cache.bn_mean[i];
            const Vector& inv_std = cache.bn_inv_std[i];
            for (std::size_t c = 0; c < in.channels; ++c) {
              double sum_g = 0.0, sum_gx = 0.0;
              for (std::size_t b = 0; b < batch; ++b) {
                const double* go = g.row(b).data() + c * plane;
                const double* src = x.row(b).data() + c * plane;
#pragma omp simd reduction(+ : sum_g, sum_gx)
                for (std::size_t k = 0; k < plane; ++k) {
                  sum_g += go[k];
                  sum_gx += go[k] * (src[k] - mean[c]) * inv_std[c];
                }
              }
              grad.weight[c] += sum_gx;
              grad.bias[c] += sum_g;
              const double scale = p.weight[c] * inv_std[c] / count;
              for (std::size_t b = 0; b < batch; ++b) {
                const double* go = g.row(b).data() + c * plane;
                const double* src = x.row(b).data() + c * plane;
                double* gi = gx.row(b).data() + c * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                  const double xhat = (src[k] - mean[c]) * inv_std[c];
                  gi[k] = scale * (count * go[k] - sum_g - xhat * sum_gx);
                }
              }
            }
          } else if constexpr (std::is_same_v<T, Elu>) {
            const double* go = g.data().data();
            const double* xs = x.data().data();
            const double* ys = y.data().data();
            double* gi = gx.data().data();
            for (std::size_t k = 0; k < x.size(); ++k)
              gi[k] = xs[k] >= 0.0 ? go[k] : go[k] * (ys[k] + kEluAlpha);
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            const auto& argmax = cache.pool_argmax[i];
            for (std::size_t b = 0; b < batch; ++b) {
              const double* go = g.row(b).data();
              double* gi = gx.row(b).data();
              for (std::size_t o = 0; o < out.size(); ++o) gi[argmax[b * out.size() + o]] += go[o];
            }
          } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
            const double inv = 1.0 / static_cast<double>(in.plane());
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t c = 0; c < in.channels; ++c) {
                const double v = g(b, c) * inv;
                double* gi = gx.row(b).data() + c * in.plane();
                std::fill(gi, gi + in.plane(), v);
              }
          }
        },
        config_[i]);
  }

  EncoderConfig config_;
  Shape input_shape_;
  std::size_t h_ = 0;
  std::vector<Shape> shapes_;
  std::vector<LayerParams> params_;
  std::vector<BnStats> bn_;
  std::uint64_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Desk-scale default: two conv blocks (8 and 16 maps), a linear 1x1
/// projection onto h maps with BN, then global average pooling.
inline EncoderConfig desk_config(std::size_t h = 8) {
  return {Conv{8},         BatchNorm{}, Elu{}, MaxPool{2},          Conv{16},
          BatchNorm{},     Elu{},       MaxPool{2}, Conv1x1Linear{h}, BatchNorm{},
          GlobalAvgPool{}};
}

/// The full VGG-style stack: four blocks of 2x [Conv(3,pad-1)-BN-ELU] + MP(2)
/// with 16/32/64/64 maps, then Conv(1,pad-0)-h-BN-LINEAR and global pooling.
inline EncoderConfig full_config(std::size_t h = 32) {
  EncoderConfig cfg;
  for (std::size_t maps : {16, 32, 64, 64}) {
    for (int rep = 0; rep < 2; ++rep) {
      cfg.push_back(Conv{maps});
      cfg.push_back(BatchNorm{});
      cfg.push_back(Elu{});
    }
    cfg.push_back(MaxPool{2});
  }
  cfg.push_back(Conv1x1Linear{h});
  cfg.push_back(BatchNorm{});
  cfg.push_back(GlobalAvgPool{});
  return cfg;
}

inline EncoderConfig mlp_config(std::size_t h, std::size_t hidden = 64) {
  return {Dense{hidden}, BatchNorm{}, Elu{}, Dense{h}};
}

inline EncoderConfig linear_config(std::size_t h) { return {Dense{h}}; }

inline EncoderConfig preset_config(const std::string& name, std::size_t h) {
  if (name == "desk") return desk_config(h);
  if (name == "full") return full_config(h);
  if (name == "mlp") return mlp_config(h);
  if (name == "linear") return linear_config(h);
  fail(ErrorCode::kInvalidConfig, "unknown architecture preset '" + name + "'");
}

}  // namespace dcca
