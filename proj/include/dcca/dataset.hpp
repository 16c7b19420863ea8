#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dcca/binary_io.hpp"
#include "dcca/error.hpp"
#include "dcca/matrix.hpp"
#include "dcca/rng.hpp"
#include "dcca/shape.hpp"

namespace dcca {

enum class Split : std::uint8_t { kTrain = 0, kValid = 1, kTest = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "unknown";
}

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  fail(ErrorCode::kRange, "unknown split '" + std::string(name) + "' (train, valid, test)");
}

struct SampleMeta {
  std::uint64_t piece_id = 0;
  std::uint64_t position = 0;
  Split split = Split::kTrain;
  friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

/// Stored values are (raw - mean) / scale.
struct ViewNorm {
  double mean = 0.0;
  double scale = 1.0;
  friend bool operator==(const ViewNorm&, const ViewNorm&) = default;
};

/// Row i of `x` and row i of `y` are the two views of sample i. Values are
/// always representable in f32 so the on-disk form round-trips exactly.
struct MultiViewDataset {
  Shape shape_x;
  Shape shape_y;
  Matrix x;
  Matrix y;
  std::vector<SampleMeta> meta;
  ViewNorm norm_x;
  ViewNorm norm_y;
  std::string generator;  // space-separated key=value descriptor

  std::size_t size() const noexcept { return meta.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < meta.size(); ++i)
      if (meta[i].split == s) out.push_back(i);
    return out;
  }

  friend bool operator==(const MultiViewDataset&, const MultiViewDataset&) = default;
};

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Orthonormal d x d matrix from Gram-Schmidt (two passes) on Gaussian columns.
inline Matrix random_orthonormal(std::size_t d, Rng& rng) {
  Matrix q(d, d);
  for (double& v : q.data()) v = rng.normal();
  for (std::size_t j = 0; j < d; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double proj = 0.0;
        for (std::size_t r = 0; r < d; ++r) proj += q(r, k) * q(r, j);
        for (std::size_t r = 0; r < d; ++r) q(r, j) -= proj * q(r, k);
      }
    }
    double nrm = 0.0;
    for (std::size_t r = 0; r < d; ++r) nrm += q(r, j) * q(r, j);
    nrm = std::sqrt(nrm);
    for (std::size_t r = 0; r < d; ++r) q(r, j) /= nrm;
  }
  return q;
}

inline void assign_sample_splits(std::vector<SampleMeta>& meta, double valid_fraction,
                                 double test_fraction) {
  const std::size_t n = meta.size();
  const auto valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * valid_fraction));
  const auto test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction));
  for (std::size_t i = 0; i < n; ++i) {
    meta[i].split = i < n - valid - test ? Split::kTrain
                    : i < n - test       ? Split::kValid
                                         : Split::kTest;
  }
}

inline std::string join(std::span<const double> v) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
  return out.str();
}

}  // namespace detail

/// Two flat views with population canonical correlations exactly `corrs`.
/// Channel i of each view is sqrt(rho)·z_i + sqrt(1 - rho)·noise, the remaining
/// channels are pure noise, and each view is rotated by its own random
/// orthonormal map. Samples are split 60/20/20 in order, one piece per sample.
inline MultiViewDataset gen_linear_gaussian(std::size_t n, std::span<const double> corrs,
                                            std::size_t dx, std::size_t dy, std::uint64_t seed) {
  require(n > 0, ErrorCode::kEmptyDataset, "gen_linear_gaussian needs n >= 1");
  require(dx > 0 && dy > 0, ErrorCode::kRange, "view dimensions must be positive");
  require(corrs.size() <= std::min(dx, dy), ErrorCode::kRange,
          "more correlations than min(dx, dy)");
  for (double r : corrs)
    require(r >= 0.0 && r < 1.0, ErrorCode::kRange, "correlations must lie in [0, 1)");

  Rng map_rng(derive_seed(seed, 1));
  const Matrix qx = detail::random_orthonormal(dx, map_rng);
  const Matrix qy = detail::random_orthonormal(dy, map_rng);
  Rng rng(derive_seed(seed, 2));

  MultiViewDataset ds;
  ds.shape_x = Shape::flat(dx);
  ds.shape_y = Shape::flat(dy);
  ds.x = Matrix(n, dx);
  ds.y = Matrix(n, dy);
  ds.meta.resize(n);
  Vector ax(dx), ay(dy);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < corrs.size(); ++c) {
      const double z = rng.normal();
      const double a = std::sqrt(corrs[c]), b = std::sqrt(1.0 - corrs[c]);
      ax[c] = a * z + b * rng.normal();
      ay[c] = a * z + b * rng.normal();
    }
    for (std::size_t c = corrs.size(); c < dx; ++c) ax[c] = rng.normal();
    for (std::size_t c = corrs.size(); c < dy; ++c) ay[c] = rng.normal();
    for (std::size_t r = 0; r < dx; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < dx; ++c) s += qx(r, c) * ax[c];
      ds.x(i, r) = detail::to_f32(s);
    }
    for (std::size_t r = 0; r < dy; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < dy; ++c) s += qy(r, c) * ay[c];
      ds.y(i, r) = detail::to_f32(s);
    }
    ds.meta[i].piece_id = i;
  }
  detail::assign_sample_splits(ds.meta, 0.2, 0.2);
  ds.generator = "kind=linear seed=" + std::to_string(seed) + " n=" + std::to_string(n) +
                 " corrs=" + detail::join(corrs) + " dx=" + std::to_string(dx) +
                 " dy=" + std::to_string(dy);
  return ds;
}

struct SnippetParams {
  std::size_t pieces = 100;
  std::size_t snippets_per_piece = 50;
  std::size_t latent_dim = 4;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::size_t stride = 1;  // latent time steps between consecutive snippets
  Shape shape_x = Shape::image(1, 40, 100);
  Shape shape_y = Shape::image(1, 136, 100);
  std::size_t hidden = 8;        // tanh units per view, one grating each
  std::size_t distractors = 16;  // view-private fine gratings
  double distractor_scale = 1.5;
  bool shared_map = false;  // view y reuses view x's map and draws
  double valid_fraction = 0.2;
  double test_fraction = 0.2;
};

namespace detail {

// Fixed random map from latent to one view: u = tanh(W z + b) weights coarse
// gratings (wavelength 6-14 px); independent per-sample coefficients weight
// fine gratings (wavelength 2-3 px) that carry no shared signal.
struct SnippetMap {
  Matrix w;         // hidden x latent
  Vector b;         // hidden
  Matrix fields;    // (hidden + distractors) x (C*H*W), each with unit std
};

inline Vector unit_std(Vector f) {
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  if (sd > 0.0)
    for (double& v : f) v /= sd;
  return f;
}

// Plane wave over channel c with random orientation, phase and a wavelength
// (in pixels) drawn from [lo, hi).
inline void fill_grating(Vector& f, std::size_t c, const Shape& shape, double lo, double hi,
                         Rng& rng) {
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double wavelength = rng.uniform(lo, hi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double kx = 2.0 * std::numbers::pi * std::cos(theta) / wavelength;
  const double ky = 2.0 * std::numbers::pi * std::sin(theta) / wavelength;
  for (std::size_t yy = 0; yy < shape.height; ++yy)
    for (std::size_t xx = 0; xx < shape.width; ++xx)
      f[c * shape.plane() + yy * shape.width + xx] =
          std::cos(kx * static_cast<double>(xx) + ky * static_cast<double>(yy) + phase);
}

inline SnippetMap make_snippet_map(const SnippetParams& p, const Shape& shape, Rng& rng) {
  SnippetMap m;
  m.w = Matrix(p.hidden, p.latent_dim);
  for (double& v : m.w.data()) v = rng.normal();
  m.b.resize(p.hidden);
  for (double& v : m.b) v = 0.5 * rng.normal();
  m.fields = Matrix(p.hidden + p.distractors, shape.size());
  for (std::size_t k = 0; k < p.hidden; ++k) {
    Vector f(shape.size());
    for (std::size_t c = 0; c < shape.channels; ++c)
      fill_grating(f, c, shape, 6.0, 14.0, rng);
    f = unit_std(std::move(f));
    std::copy(f.begin(), f.end(), m.fields.row(k).begin());
  }
  for (std::size_t j = 0; j < p.distractors; ++j) {
    Vector f(shape.size());
    for (std::size_t c = 0; c < shape.channels; ++c)
      fill_grating(f, c, shape, 2.0, 3.0, rng);
    f = unit_std(std::move(f));
    std::copy(f.begin(), f.end(), m.fields.row(p.hidden + j).begin());
  }
  return m;
}

// Renders every sample of one view from the latent matrix (N x latent_dim).
inline Matrix render_view(const SnippetParams& p, const SnippetMap& m, const Matrix& latent,
                          Rng& rng) {
  const std::size_t n = latent.rows(), dim = m.fields.cols(), k_total = m.fields.rows();
  Matrix out(n, dim);
  Vector coef(k_total);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < p.hidden; ++k) {
      double a = m.b[k];
      for (std::size_t l = 0; l < p.latent_dim; ++l) a += m.w(k, l) * latent(i, l);
      coef[k] = 1.0 + std::tanh(a);
    }
    for (std::size_t j = 0; j < p.distractors; ++j)
      coef[p.hidden + j] = p.distractor_scale * rng.normal();
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < k_total; ++k) {
      const double a = coef[k];
      const double* f = m.fields.row(k).data();
      for (std::size_t d = 0; d < dim; ++d) o[d] += a * f[d];
    }
    if (p.noise != 0.0)
      for (std::size_t d = 0; d < dim; ++d) o[d] += p.noise * rng.normal();
  }
  return out;
}

// Scalar z-score from the training rows (all rows when there are none), then
// rounding to f32.
inline ViewNorm normalize_view(Matrix& v, const std::vector<SampleMeta>& meta) {
  double sum = 0.0, count = 0.0;
  bool any_train = false;
  for (const auto& m : meta) any_train |= m.split == Split::kTrain;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    if (any_train && meta[i].split != Split::kTrain) continue;
    for (double x : v.row(i)) sum += x;
    count += static_cast<double>(v.cols());
  }
  const double mean = sum / count;
  double var = 0.0;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    if (any_train && meta[i].split != Split::kTrain) continue;
    for (double x : v.row(i)) var += (x - mean) * (x - mean);
  }
  const double sd = std::sqrt(var / count);
  ViewNorm norm{mean, sd > 0.0 ? sd : 1.0};
  for (double& x : v.data()) x = to_f32((x - norm.mean) / norm.scale);
  return norm;
}

}  // namespace detail

/// Paired image-like snippets driven by a smooth per-piece latent curve.
/// Pieces are assigned to train, valid, test in order, so no piece straddles
/// two splits.
inline MultiViewDataset gen_nonlinear_snippets(const SnippetParams& p) {
  require(p.pieces >= 1 && p.snippets_per_piece >= 1 && p.latent_dim >= 1 && p.stride >= 1,
          ErrorCode::kRange, "pieces, snippets_per_piece, latent_dim and stride must be >= 1");
  require(p.hidden >= 1, ErrorCode::kRange, "hidden must be >= 1");
  require(p.noise >= 0.0 && p.distractor_scale >= 0.0, ErrorCode::kRange,
          "noise and distractor_scale must be nonnegative");
  require(p.valid_fraction >= 0.0 && p.test_fraction >= 0.0 &&
              p.valid_fraction + p.test_fraction < 1.0,
          ErrorCode::kRange, "split fractions must be nonnegative and sum below 1");
  for (const Shape* s : {&p.shape_x, &p.shape_y})
    require(s->rank == 3 && s->size() > 0, ErrorCode::kRange, "snippet shapes must be CxHxW");
  require(!p.shared_map || p.shape_x == p.shape_y, ErrorCode::kRange,
          "shared_map needs identical view shapes");

  const std::size_t n = p.pieces * p.snippets_per_piece;
  MultiViewDataset ds;
  ds.shape_x = p.shape_x;
  ds.shape_y = p.shape_y;
  ds.meta.resize(n);
  const auto valid =
      static_cast<std::size_t>(std::floor(static_cast<double>(p.pieces) * p.valid_fraction));
  const auto test =
      static_cast<std::size_t>(std::floor(static_cast<double>(p.pieces) * p.test_fraction));
  const std::size_t train = p.pieces - valid - test;

  Matrix latent(n, p.latent_dim);
  Rng latent_rng(derive_seed(p.seed, 3));
  for (std::size_t piece = 0; piece < p.pieces; ++piece) {
    Vector omega(p.latent_dim), phase(p.latent_dim), amp(p.latent_dim);
    for (std::size_t l = 0; l < p.latent_dim; ++l) {
      omega[l] = latent_rng.uniform(0.05, 0.25);
      phase[l] = latent_rng.uniform(0.0, 2.0 * std::numbers::pi);
      amp[l] = latent_rng.uniform(0.6, 1.0);
    }
    const Split split = piece < train ? Split::kTrain
                        : piece < train + valid ? Split::kValid
                                                : Split::kTest;
    for (std::size_t s = 0; s < p.snippets_per_piece; ++s) {
      const std::size_t i = piece * p.snippets_per_piece + s;
      const double t = static_cast<double>(s * p.stride);
      for (std::size_t l = 0; l < p.latent_dim; ++l)
        latent(i, l) = amp[l] * std::sin(omega[l] * t + phase[l]);
      ds.meta[i] = {piece, s * p.stride, split};
    }
  }

  Rng map_x_rng(derive_seed(p.seed, 1));
  const detail::SnippetMap map_x = detail::make_snippet_map(p, p.shape_x, map_x_rng);
  Rng draws_x(derive_seed(p.seed, 4));
  ds.x = detail::render_view(p, map_x, latent, draws_x);
  if (p.shared_map) {
    Rng draws_y(derive_seed(p.seed, 4));
    ds.y = detail::render_view(p, map_x, latent, draws_y);
  } else {
    Rng map_y_rng(derive_seed(p.seed, 2));
    const detail::SnippetMap map_y = detail::make_snippet_map(p, p.shape_y, map_y_rng);
    Rng draws_y(derive_seed(p.seed, 5));
    ds.y = detail::render_view(p, map_y, latent, draws_y);
  }
  ds.norm_x = detail::normalize_view(ds.x, ds.meta);
  ds.norm_y = detail::normalize_view(ds.y, ds.meta);

  std::ostringstream desc;
  desc.precision(17);
  desc << "kind=nonlinear seed=" << p.seed << " pieces=" << p.pieces
       << " snippets_per_piece=" << p.snippets_per_piece << " latent_dim=" << p.latent_dim
       << " noise=" << p.noise << " stride=" << p.stride << " shape_x=" << p.shape_x.str()
       << " shape_y=" << p.shape_y.str() << " hidden=" << p.hidden
       << " distractors=" << p.distractors << " distractor_scale=" << p.distractor_scale
       << " shared_map=" << (p.shared_map ? 1 : 0) << " valid_fraction=" << p.valid_fraction
       << " test_fraction=" << p.test_fraction;
  ds.generator = desc.str();
  return ds;
}

namespace detail {

inline constexpr std::string_view kDatasetMagic = "MVDS";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline void put_shape(io::Writer& w, const Shape& s) {
  w.u8(static_cast<std::uint8_t>(s.rank));
  w.u32(static_cast<std::uint32_t>(s.channels));
  if (s.rank == 3) {
    w.u32(static_cast<std::uint32_t>(s.height));
    w.u32(static_cast<std::uint32_t>(s.width));
  }
}

inline Shape get_shape(io::Reader& r) {
  const std::uint8_t rank = r.u8();
  require(rank == 1 || rank == 3, ErrorCode::kFormat, r.what() + ": unsupported view rank");
  if (rank == 1) return Shape::flat(r.u32());
  const std::uint32_t c = r.u32(), h = r.u32(), w = r.u32();
  return Shape::image(c, h, w);
}

inline std::string encode_view(const Matrix& v) {
  io::Writer w;
  for (double x : v.data()) w.f32(static_cast<float>(x));
  return w.take();
}

inline Matrix decode_view(std::string_view bytes, std::size_t n, const Shape& shape,
                          const std::string& what) {
  require(shape.size() > 0 && bytes.size() == n * shape.size() * 4, ErrorCode::kFormat,
          what + ": view block size does not match header");
  Matrix v(n, shape.size());
  io::Reader r(bytes, what);
  for (double& x : v.data()) x = static_cast<double>(r.f32());
  return v;
}

}  // namespace detail

inline std::string serialize_dataset(const MultiViewDataset& ds) {
  require(ds.x.rows() == ds.size() && ds.y.rows() == ds.size() &&
              ds.x.cols() == ds.shape_x.size() && ds.y.cols() == ds.shape_y.size(),
          ErrorCode::kDimension, "dataset views do not match metadata and shapes");
  require(ds.size() <= UINT32_MAX, ErrorCode::kRange, "dataset too large for the file format");
  io::Writer header;
  header.u32(static_cast<std::uint32_t>(ds.size()));
  detail::put_shape(header, ds.shape_x);
  detail::put_shape(header, ds.shape_y);
  header.f64(ds.norm_x.mean);
  header.f64(ds.norm_x.scale);
  header.f64(ds.norm_y.mean);
  header.f64(ds.norm_y.scale);
  header.str(ds.generator);

  io::Writer meta;
  for (const auto& m : ds.meta) {
    meta.u64(m.piece_id);
    meta.u64(m.position);
    meta.u8(static_cast<std::uint8_t>(m.split));
  }

  io::Writer out;
  out.raw(detail::kDatasetMagic);
  out.u16(detail::kDatasetVersion);
  out.block(header.bytes());
  out.block(detail::encode_view(ds.x));
  out.block(detail::encode_view(ds.y));
  out.block(meta.bytes());
  return out.take();
}

inline MultiViewDataset deserialize_dataset(std::string_view bytes,
                                            const std::string& what = "dataset") {
  io::Reader r(bytes, what);
  r.magic(detail::kDatasetMagic);
  const std::uint16_t version = r.u16();
  require(version == detail::kDatasetVersion, ErrorCode::kVersion,
          what + ": unsupported version " + std::to_string(version));

  MultiViewDataset ds;
  io::Reader header(r.block(), what + " header");
  const std::size_t n = header.u32();
  ds.shape_x = detail::get_shape(header);
  ds.shape_y = detail::get_shape(header);
  ds.norm_x = {header.f64(), header.f64()};
  ds.norm_y = {header.f64(), header.f64()};
  ds.generator = header.str();
  header.expect_end();

  ds.x = detail::decode_view(r.block(), n, ds.shape_x, what + " view_x");
  ds.y = detail::decode_view(r.block(), n, ds.shape_y, what + " view_y");
  io::Reader meta(r.block(), what + " metadata");
  require(meta.remaining() == n * 17, ErrorCode::kFormat, what + ": metadata size mismatch");
  ds.meta.resize(n);
  for (auto& m : ds.meta) {
    m.piece_id = meta.u64();
    m.position = meta.u64();
    const std::uint8_t split = meta.u8();
    require(split <= 2, ErrorCode::kFormat, what + ": invalid split tag");
    m.split = static_cast<Split>(split);
  }
  r.expect_end();
  return ds;
}

inline void save_dataset(const MultiViewDataset& ds, const std::filesystem::path& path) {
  io::write_file(path, serialize_dataset(ds));
}

inline MultiViewDataset load_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(io::read_file(path), path.string());
}

}  // namespace dcca
