#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dcca/binary_io.hpp"
#include "dcca/cca.hpp"
#include "dcca/dataset.hpp"
#include "dcca/dcca_loss.hpp"
#include "dcca/encoder.hpp"
#include "dcca/rng.hpp"

namespace dcca {

struct TrainConfig {
  std::size_t batch_size = 100;
  double lr0 = 0.1;
  double momentum = 0.9;
  std::size_t halve_every = 25;
  std::size_t epochs = 100;
  double eps = kDefaultRegularizer;
  std::uint64_t seed = 0;
  std::size_t h = 8;
  std::string arch = "desk";

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Ridge for the post-training refit and for evaluate_correlation, relative
/// to the mean feature variance. Small enough that refit projections whiten
/// the training features to well within 1e-3.
inline constexpr double kRefitRelativeRegularizer = 1e-6;

inline void validate(const TrainConfig& cfg) {
  require(cfg.h >= 1, ErrorCode::kInvalidConfig, "h must be >= 1");
  require(cfg.batch_size >= cfg.h + 1, ErrorCode::kInvalidConfig,
          "batch_size must be >= h + 1 (got " + std::to_string(cfg.batch_size) + ")");
  require(cfg.lr0 > 0.0 && std::isfinite(cfg.lr0), ErrorCode::kInvalidConfig, "lr0 must be > 0");
  require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, ErrorCode::kInvalidConfig,
          "momentum must be in [0, 1)");
  require(cfg.halve_every >= 1, ErrorCode::kInvalidConfig, "halve_every must be >= 1");
  require(cfg.eps > 0.0, ErrorCode::kInvalidConfig, "eps must be > 0");
  preset_config(cfg.arch, cfg.h);
}

/// lr0 · 0.5^⌊epoch / halve_every⌋
inline double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  return std::ldexp(cfg.lr0, -static_cast<int>(epoch / cfg.halve_every));
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;      // mean minibatch loss
  double val_corr = 0.0;  // total correlation on the validation split
  double lr = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct Checkpoint {
  TrainConfig config;
  Encoder enc_x;
  Encoder enc_y;
  CcaModel cca;
  std::size_t epoch = 0;  // epochs completed
  std::vector<EpochRecord> history;
};

/// Plain momentum: v ← m·v − lr·g, θ ← θ + v, over matching flat views.
inline void momentum_step(std::span<double> theta, std::span<double> velocity,
                          std::span<const double> grad, double lr, double momentum) {
  require(theta.size() == velocity.size() && theta.size() == grad.size(), ErrorCode::kDimension,
          "momentum_step size mismatch");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * grad[i];
    theta[i] += velocity[i];
  }
}

namespace detail {

inline Matrix gather(const Matrix& m, std::span<const std::size_t> rows) {
  return m.gather_rows(rows);
}

inline double mean_column_variance(const Matrix& f) {
  const Vector mean = column_means(f);
  double total = 0.0;
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.cols(); ++c) total += (f(r, c) - mean[c]) * (f(r, c) - mean[c]);
  return total / static_cast<double>((f.rows() - 1) * f.cols());
}

inline double refit_regularizer(const Matrix& fx, const Matrix& gy) {
  const double scale = std::max(mean_column_variance(fx), mean_column_variance(gy));
  return kRefitRelativeRegularizer * (scale > 0.0 ? scale : 1.0);
}

inline std::vector<double> flatten(const ParamGrads& grads) {
  std::vector<double> out;
  for (const auto& g : grads) {
    out.insert(out.end(), g.weight.begin(), g.weight.end());
    out.insert(out.end(), g.bias.begin(), g.bias.end());
  }
  return out;
}

inline void apply_update(Encoder& enc, const ParamGrads& grads, std::vector<double>& velocity,
                         double lr, double momentum) {
  const std::vector<double> g = flatten(grads);
  std::size_t offset = 0;
  for (std::span<double> theta : enc.parameter_spans()) {
    momentum_step(theta, std::span(velocity).subspan(offset, theta.size()),
                  std::span<const double>(g).subspan(offset, theta.size()), lr, momentum);
    offset += theta.size();
  }
}

}  // namespace detail

/// CCA fit on eval-mode features of the given rows. Ridge is relative to the
/// feature scale.
inline CcaModel fit_feature_cca(const Encoder& enc_x, const Encoder& enc_y,
                                const MultiViewDataset& ds, std::span<const std::size_t> rows) {
  const Matrix fx = enc_x.infer(detail::gather(ds.x, rows));
  const Matrix gy = enc_y.infer(detail::gather(ds.y, rows));
  return fit_cca(fx, gy, detail::refit_regularizer(fx, gy));
}

/// Total correlation of eval-mode features under a CCA fit on that split.
inline double evaluate_correlation(const Encoder& enc_x, const Encoder& enc_y,
                                   const MultiViewDataset& ds, Split split) {
  const auto rows = ds.indices(split);
  require(!rows.empty(), ErrorCode::kEmptyDataset,
          "split '" + std::string(to_string(split)) + "' is empty");
  const CcaModel m = fit_feature_cca(enc_x, enc_y, ds, rows);
  double total = 0.0;
  for (double d : m.corrs) total += d;
  return total;
}

inline double evaluate_correlation(const Checkpoint& ckpt, const MultiViewDataset& ds,
                                   Split split) {
  return evaluate_correlation(ckpt.enc_x, ckpt.enc_y, ds, split);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline Checkpoint train(const MultiViewDataset& ds, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {}) {
  validate(cfg);
  const auto train_rows = ds.indices(Split::kTrain);
  const auto valid_rows = ds.indices(Split::kValid);
  require(train_rows.size() >= cfg.batch_size, ErrorCode::kInsufficientSamples,
          "training split has " + std::to_string(train_rows.size()) +
              " samples, fewer than batch_size " + std::to_string(cfg.batch_size));
  require(valid_rows.size() >= cfg.h + 1, ErrorCode::kInsufficientSamples,
          "validation split needs at least h + 1 samples");

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.enc_x = Encoder::init(preset_config(cfg.arch, cfg.h), ds.shape_x, cfg.h,
                             derive_seed(cfg.seed, 0x11));
  ckpt.enc_y = Encoder::init(preset_config(cfg.arch, cfg.h), ds.shape_y, cfg.h,
                             derive_seed(cfg.seed, 0x12));
  std::vector<double> vel_x(ckpt.enc_x.parameter_count(), 0.0);
  std::vector<double> vel_y(ckpt.enc_y.parameter_count(), 0.0);
  ForwardCache cache_x, cache_y;
  const std::size_t batches = train_rows.size() / cfg.batch_size;
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, 0x5EED);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg, epoch);
    const auto perm = counter_permutation(train_rows.size(), shuffle_seed, epoch);
    std::vector<std::size_t> rows(cfg.batch_size);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t k = 0; k < cfg.batch_size; ++k)
        rows[k] = train_rows[perm[b * cfg.batch_size + k]];
      const std::string where = "epoch " + std::to_string(epoch) + " batch " + std::to_string(b);
      DccaLossResult loss;
      try {
        const Matrix fx = ckpt.enc_x.forward(detail::gather(ds.x, rows), Mode::kTrain, &cache_x);
        const Matrix gy = ckpt.enc_y.forward(detail::gather(ds.y, rows), Mode::kTrain, &cache_y);
        loss = dcca_loss(fx, gy, cfg.eps);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kNumeric || e.code() == ErrorCode::kDegenerateBatch ||
            e.code() == ErrorCode::kConvergence)
          fail(ErrorCode::kDiverged, "training diverged at " + where + ": " + e.what());
        throw;
      }
      require(std::isfinite(loss.loss), ErrorCode::kDiverged,
              "training diverged at " + where + ": non-finite loss");
      const ParamGrads gx = ckpt.enc_x.backward(cache_x, loss.grad_fx);
      const ParamGrads gy = ckpt.enc_y.backward(cache_y, loss.grad_gy);
      detail::apply_update(ckpt.enc_x, gx, vel_x, lr, cfg.momentum);
      detail::apply_update(ckpt.enc_y, gy, vel_y, lr, cfg.momentum);
      loss_sum += loss.loss;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.lr = lr;
    try {
      rec.val_corr = evaluate_correlation(ckpt.enc_x, ckpt.enc_y, ds, Split::kValid);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumeric) throw;
      fail(ErrorCode::kDiverged, "training diverged after epoch " + std::to_string(epoch) +
                                     ": " + e.what());
    }
    ckpt.history.push_back(rec);
    ckpt.epoch = epoch + 1;
    if (on_epoch) on_epoch(rec);
  }
  ckpt.cca = fit_feature_cca(ckpt.enc_x, ckpt.enc_y, ds, train_rows);
  return ckpt;
}

namespace detail {

inline constexpr std::string_view kCheckpointMagic = "DCCK";
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class LayerTag : std::uint8_t {
  kConv = 1,
  kConv1x1Linear = 2,
  kBatchNorm = 3,
  kElu = 4,
  kMaxPool = 5,
  kGlobalAvgPool = 6,
  kDense = 7,
};

inline void put_doubles(io::Writer& w, std::span<const double> v) {
  w.u64(v.size());
  for (double x : v) w.f64(x);
}

inline std::vector<double> get_doubles(io::Reader& r) {
  const std::uint64_t n = r.u64();
  r.need_items(n, 8);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = r.f64();
  return v;
}

inline void put_matrix(io::Writer& w, const Matrix& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (double x : m.data()) w.f64(x);
}

inline Matrix get_matrix(io::Reader& r) {
  const std::uint32_t rows = r.u32(), cols = r.u32();
  r.need_items(static_cast<std::uint64_t>(rows) * cols, 8);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = r.f64();
  return m;
}

inline std::string encode_encoder(const Encoder& enc) {
  io::Writer w;
  put_shape(w, enc.input_shape());
  w.u32(static_cast<std::uint32_t>(enc.h()));
  w.u32(static_cast<std::uint32_t>(enc.config().size()));
  for (const LayerSpec& spec : enc.config()) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kConv));
            w.u32(static_cast<std::uint32_t>(l.maps));
            w.u32(static_cast<std::uint32_t>(l.kernel));
            w.u32(static_cast<std::uint32_t>(l.pad));
          } else if constexpr (std::is_same_v<T, Conv1x1Linear>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kConv1x1Linear));
            w.u32(static_cast<std::uint32_t>(l.maps));
          } else if constexpr (std::is_same_v<T, BatchNorm>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kBatchNorm));
          } else if constexpr (std::is_same_v<T, Elu>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kElu));
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kMaxPool));
            w.u32(static_cast<std::uint32_t>(l.size));
          } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kGlobalAvgPool));
          } else if constexpr (std::is_same_v<T, Dense>) {
            w.u8(static_cast<std::uint8_t>(LayerTag::kDense));
            w.u32(static_cast<std::uint32_t>(l.units));
          }
        },
        spec);
  }
  for (std::size_t i = 0; i < enc.config().size(); ++i) {
    put_doubles(w, enc.params()[i].weight);
    put_doubles(w, enc.params()[i].bias);
    put_doubles(w, enc.bn_stats()[i].mean);
    put_doubles(w, enc.bn_stats()[i].var);
  }
  return w.take();
}

inline Encoder decode_encoder(std::string_view bytes, const std::string& what) {
  io::Reader r(bytes, what);
  const Shape shape = get_shape(r);
  const std::size_t h = r.u32();
  const std::uint32_t layers = r.u32();
  r.need(layers);
  EncoderConfig config;
  for (std::uint32_t i = 0; i < layers; ++i) {
    switch (static_cast<LayerTag>(r.u8())) {
      case LayerTag::kConv: {
        Conv c;
        c.maps = r.u32();
        c.kernel = r.u32();
        c.pad = r.u32();
        config.push_back(c);
        break;
      }
      case LayerTag::kConv1x1Linear: config.push_back(Conv1x1Linear{r.u32()}); break;
      case LayerTag::kBatchNorm: config.push_back(BatchNorm{}); break;
      case LayerTag::kElu: config.push_back(Elu{}); break;
      case LayerTag::kMaxPool: config.push_back(MaxPool{r.u32()}); break;
      case LayerTag::kGlobalAvgPool: config.push_back(GlobalAvgPool{}); break;
      case LayerTag::kDense: config.push_back(Dense{r.u32()}); break;
      default: fail(ErrorCode::kFormat, what + ": unknown layer tag");
    }
  }
  std::vector<LayerParams> params(layers);
  std::vector<BnStats> bn(layers);
  for (std::uint32_t i = 0; i < layers; ++i) {
    params[i].weight = get_doubles(r);
    params[i].bias = get_doubles(r);
    bn[i].mean = get_doubles(r);
    bn[i].var = get_doubles(r);
  }
  r.expect_end();
  try {
    return Encoder::from_parts(std::move(config), shape, h, std::move(params), std::move(bn));
  } catch (const Error& e) {
    if (e.is_format_error()) throw;
    fail(ErrorCode::kFormat, what + ": invalid encoder: " + e.what());
  }
}

inline std::string encode_cca(const CcaModel& m) {
  io::Writer w;
  put_doubles(w, m.mean_x);
  put_doubles(w, m.mean_y);
  put_matrix(w, m.proj_x);
  put_matrix(w, m.proj_y);
  put_doubles(w, m.corrs);
  w.f64(m.regularizer);
  return w.take();
}

inline CcaModel decode_cca(std::string_view bytes, const std::string& what) {
  io::Reader r(bytes, what);
  CcaModel m;
  m.mean_x = get_doubles(r);
  m.mean_y = get_doubles(r);
  m.proj_x = get_matrix(r);
  m.proj_y = get_matrix(r);
  m.corrs = get_doubles(r);
  m.regularizer = r.f64();
  r.expect_end();
  require(m.proj_x.rows() == m.mean_x.size() && m.proj_y.rows() == m.mean_y.size() &&
              m.proj_x.cols() == m.corrs.size() && m.proj_y.cols() == m.corrs.size(),
          ErrorCode::kFormat, what + ": inconsistent CCA dimensions");
  return m;
}

inline std::string encode_config(const TrainConfig& c) {
  io::Writer w;
  w.u64(c.batch_size);
  w.f64(c.lr0);
  w.f64(c.momentum);
  w.u64(c.halve_every);
  w.u64(c.epochs);
  w.f64(c.eps);
  w.u64(c.seed);
  w.u64(c.h);
  w.str(c.arch);
  return w.take();
}

inline TrainConfig decode_config(std::string_view bytes, const std::string& what) {
  io::Reader r(bytes, what);
  TrainConfig c;
  c.batch_size = r.u64();
  c.lr0 = r.f64();
  c.momentum = r.f64();
  c.halve_every = r.u64();
  c.epochs = r.u64();
  c.eps = r.f64();
  c.seed = r.u64();
  c.h = r.u64();
  c.arch = r.str();
  r.expect_end();
  return c;
}

inline std::string encode_history(std::size_t epoch, const std::vector<EpochRecord>& history) {
  io::Writer w;
  w.u64(epoch);
  w.u64(history.size());
  for (const auto& e : history) {
    w.u64(e.epoch);
    w.f64(e.loss);
    w.f64(e.val_corr);
    w.f64(e.lr);
  }
  return w.take();
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  io::Writer out;
  out.raw(detail::kCheckpointMagic);
  out.u16(detail::kCheckpointVersion);
  out.block(detail::encode_encoder(ckpt.enc_x));
  out.block(detail::encode_encoder(ckpt.enc_y));
  out.block(detail::encode_cca(ckpt.cca));
  out.block(detail::encode_config(ckpt.config));
  out.block(detail::encode_history(ckpt.epoch, ckpt.history));
  return out.take();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes,
                                         const std::string& what = "checkpoint") {
  io::Reader r(bytes, what);
  r.magic(detail::kCheckpointMagic);
  const std::uint16_t version = r.u16();
  require(version == detail::kCheckpointVersion, ErrorCode::kVersion,
          what + ": unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.enc_x = detail::decode_encoder(r.block(), what + " encoder-x");
  ckpt.enc_y = detail::decode_encoder(r.block(), what + " encoder-y");
  ckpt.cca = detail::decode_cca(r.block(), what + " cca");
  ckpt.config = detail::decode_config(r.block(), what + " config");
  io::Reader hist(r.block(), what + " history");
  ckpt.epoch = hist.u64();
  const std::uint64_t n = hist.u64();
  hist.need_items(n, 32);
  ckpt.history.resize(static_cast<std::size_t>(n));
  for (auto& e : ckpt.history) {
    e.epoch = hist.u64();
    e.loss = hist.f64();
    e.val_corr = hist.f64();
    e.lr = hist.f64();
  }
  hist.expect_end();
  r.expect_end();
  require(ckpt.cca.proj_x.rows() == ckpt.enc_x.h() && ckpt.cca.proj_y.rows() == ckpt.enc_y.h(),
          ErrorCode::kFormat, what + ": CCA does not match encoder output width");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path), path.string());
}

}  // namespace dcca
