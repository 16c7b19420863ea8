#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "dcca/dcca_loss.hpp"
#include "dcca/encoder.hpp"
#include "test_util.hpp"

namespace dcca {
namespace {

using testing::random_matrix;

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kIo;
}

TEST(EncoderShapes, FullImageColumn) {
  const Encoder enc = Encoder::init(full_config(32), Shape::image(1, 40, 100), 32, 1);
  const auto& shapes = enc.layer_shapes();
  std::vector<std::pair<std::size_t, std::size_t>> after_pools;
  for (std::size_t i = 0; i < enc.config().size(); ++i)
    if (std::holds_alternative<MaxPool>(enc.config()[i]))
      after_pools.emplace_back(shapes[i + 1].height, shapes[i + 1].width);
  const std::vector<std::pair<std::size_t, std::size_t>> expected{{20, 50}, {10, 25}, {5, 12}, {2, 6}};
  EXPECT_EQ(after_pools, expected);
  EXPECT_EQ(shapes.back(), Shape::flat(32));
}

TEST(EncoderShapes, FullAudioColumn) {
  const Encoder enc = Encoder::init(full_config(32), Shape::image(1, 136, 100), 32, 1);
  std::vector<std::pair<std::size_t, std::size_t>> after_pools;
  for (std::size_t i = 0; i < enc.config().size(); ++i)
    if (std::holds_alternative<MaxPool>(enc.config()[i]))
      after_pools.emplace_back(enc.layer_shapes()[i + 1].height, enc.layer_shapes()[i + 1].width);
  const std::vector<std::pair<std::size_t, std::size_t>> expected{{68, 50}, {34, 25}, {17, 12}, {8, 6}};
  EXPECT_EQ(after_pools, expected);
}

TEST(EncoderShapes, FullForwardIsBx32) {
  Encoder enc = Encoder::init(full_config(32), Shape::image(1, 40, 100), 32, 3);
  const Matrix out = enc.forward(random_matrix(3, 4000, 4), Mode::kTrain);
  EXPECT_EQ(out.rows(), 3u);
  EXPECT_EQ(out.cols(), 32u);
  EXPECT_EQ(enc.infer(random_matrix(1, 4000, 5)).cols(), 32u);
}

TEST(EncoderInit, DeterministicGivenSeed) {
  const auto a = Encoder::init(desk_config(8), Shape::image(1, 20, 24), 8, 42);
  const auto b = Encoder::init(desk_config(8), Shape::image(1, 20, 24), 8, 42);
  const auto c = Encoder::init(desk_config(8), Shape::image(1, 20, 24), 8, 43);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_NE(a.params(), c.params());
  EXPECT_EQ(a.parameter_count(), c.parameter_count());
  // conv 1->8 (72+8), BN 8 (16), conv 8->16 (1152+16), BN 16 (32), 1x1 16->8 (128+8), BN 8 (16)
  EXPECT_EQ(a.parameter_count(), 80u + 16u + 1168u + 32u + 136u + 16u);
}

TEST(EncoderInit, HeUniformBoundsAndBnDefaults) {
  const auto enc = Encoder::init(desk_config(8), Shape::image(1, 12, 12), 8, 9);
  const double limit = std::sqrt(6.0 / 9.0);
  for (double w : enc.params()[0].weight) EXPECT_LE(std::abs(w), limit);
  for (double g : enc.params()[1].weight) EXPECT_EQ(g, 1.0);
  for (double v : enc.bn_stats()[1].var) EXPECT_EQ(v, 1.0);
}

TEST(EncoderInit, InvalidConfigs) {
  EXPECT_EQ(code_of([] { Encoder::init(full_config(32), Shape::image(1, 8, 100), 32, 1); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] {
              Encoder::init({Conv{4}, Conv1x1Linear{4}, Elu{}, GlobalAvgPool{}},
                            Shape::image(1, 4, 4), 4, 1);
            }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] { Encoder::init({Conv{4}, BatchNorm{}}, Shape::image(1, 4, 4), 4, 1); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] { Encoder::init(desk_config(8), Shape::image(1, 8, 8), 6, 1); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] { Encoder::init({Conv{4}, GlobalAvgPool{}}, Shape::flat(10), 4, 1); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] { preset_config("vgg", 8); }), ErrorCode::kInvalidConfig);
}

TEST(EncoderLayers, EluDefinition) {
  Encoder enc = Encoder::from_parts({Elu{}, Dense{3}}, Shape::flat(3), 3, {{}, {{1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}}},
                                    {{}, {}});
  const Matrix out = enc.infer(Matrix{{0.0, 1.0, -1e6}});
  EXPECT_EQ(out(0, 0), 0.0);
  EXPECT_EQ(out(0, 1), 1.0);
  EXPECT_EQ(out(0, 2), -1.0);
}

TEST(EncoderLayers, VectorizedExpMatchesLibm) {
  for (double x = -800.0; x <= 0.0; x += 0.0137) {
    const double expected = std::exp(std::max(x, -708.0));
    EXPECT_NEAR(detail::exp_nonpositive(x), expected, 4e-16 * expected) << x;
  }
  EXPECT_EQ(detail::exp_nonpositive(0.0), 1.0);
}

TEST(EncoderForward, ReusedCacheGivesIdenticalResults) {
  Encoder enc = Encoder::init(desk_config(4), Shape::image(1, 8, 12), 4, 5);
  const Matrix x = random_matrix(6, 96, 11);
  const Matrix g = random_matrix(6, 4, 12);
  ForwardCache fresh;
  Encoder copy = enc;
  const Matrix a = copy.forward(x, Mode::kTrain, &fresh);
  const ParamGrads ga = copy.backward(fresh, g);

  ForwardCache reused;
  const Matrix warm = random_matrix(9, 96, 13);
  Encoder other = enc;
  other.forward(warm, Mode::kTrain, &reused);
  other.backward(reused, random_matrix(9, 4, 14));
  Encoder again = enc;
  const Matrix b = again.forward(x, Mode::kTrain, &reused);
  const ParamGrads gb = again.backward(reused, g);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < ga.size(); ++i) {
    EXPECT_EQ(ga[i].weight, gb[i].weight);
    EXPECT_EQ(ga[i].bias, gb[i].bias);
  }
}

TEST(EncoderLayers, MaxPoolPicksMaximum) {
  Encoder enc = Encoder::from_parts({MaxPool{2}, GlobalAvgPool{}}, Shape::image(1, 2, 2), 1,
                                    {{}, {}}, {{}, {}});
  EXPECT_EQ(enc.infer(Matrix{{1, 2, 3, 4}})(0, 0), 4.0);
}

TEST(EncoderLayers, MaxPoolFloorsOddDimensions) {
  const auto enc = Encoder::init({MaxPool{2}, GlobalAvgPool{}}, Shape::image(1, 5, 17), 1, 0);
  EXPECT_EQ(enc.layer_shapes()[1], Shape::image(1, 2, 8));
}

TEST(EncoderForward, EvalModeIsPerSample) {
  Encoder enc = Encoder::init(desk_config(4), Shape::image(1, 12, 16), 4, 5);
  const Matrix batch = random_matrix(10, 192, 6);
  enc.forward(batch, Mode::kTrain);  // move running stats off their defaults
  const Matrix together = enc.infer(batch);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const std::vector<std::size_t> one{r};
    const Matrix alone = enc.infer(batch.gather_rows(one));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(alone(0, c), together(r, c), 1e-12);
  }
}

TEST(EncoderForward, ShapeMismatch) {
  Encoder enc = Encoder::init(desk_config(4), Shape::image(1, 12, 16), 4, 5);
  EXPECT_EQ(code_of([&] { enc.infer(Matrix(2, 100)); }), ErrorCode::kDimension);
  EXPECT_EQ(code_of([&] { enc.forward(Matrix(1, 192), Mode::kTrain); }), ErrorCode::kDimension);
}

TEST(EncoderForward, BatchNormTrainEvalConsistency) {
  Encoder enc = Encoder::init(desk_config(4), Shape::image(1, 8, 12), 4, 7);
  const Matrix batch = random_matrix(16, 96, 8);
  Matrix train_out;
  for (int i = 0; i < 250; ++i) train_out = enc.forward(batch, Mode::kTrain);
  EXPECT_LT(max_abs(enc.infer(batch) - train_out), 1e-3);
}

TEST(EncoderBackward, ZeroGradOutGivesZeroGrads) {
  Encoder enc = Encoder::init(desk_config(4), Shape::image(1, 8, 8), 4, 1);
  ForwardCache cache;
  enc.forward(random_matrix(6, 64, 2), Mode::kTrain, &cache);
  const ParamGrads g = enc.backward(cache, Matrix(6, 4));
  for (const auto& layer : g) {
    for (double v : layer.weight) EXPECT_EQ(v, 0.0);
    for (double v : layer.bias) EXPECT_EQ(v, 0.0);
  }
}

TEST(EncoderBackward, LinearDenseMatchesClosedForm) {
  Encoder enc = Encoder::init(linear_config(3), Shape::flat(5), 3, 4);
  const Matrix x = random_matrix(7, 5, 5);
  const Matrix g = random_matrix(7, 3, 6);
  ForwardCache cache;
  enc.forward(x, Mode::kTrain, &cache);
  const ParamGrads grads = enc.backward(cache, g);
  const Matrix expected = matmul_tn(x, g);
  for (std::size_t i = 0; i < expected.size(); ++i)
    EXPECT_NEAR(grads[0].weight[i], expected.data()[i], 1e-12);
  const Vector bias = column_means(g);
  for (std::size_t u = 0; u < 3; ++u) EXPECT_NEAR(grads[0].bias[u], bias[u] * 7.0, 1e-12);
}

TEST(EncoderBackward, StaleCacheRejected) {
  Encoder enc = Encoder::init(desk_config(4), Shape::image(1, 8, 8), 4, 1);
  ForwardCache cache;
  enc.forward(random_matrix(6, 64, 2), Mode::kTrain, &cache);
  enc.parameter_spans();
  EXPECT_EQ(code_of([&] { enc.backward(cache, Matrix(6, 4)); }), ErrorCode::kState);
  Encoder other = Encoder::init(desk_config(4), Shape::image(1, 8, 8), 4, 1);
  enc.forward(random_matrix(6, 64, 2), Mode::kTrain, &cache);
  EXPECT_EQ(code_of([&] { other.backward(cache, Matrix(6, 4)); }), ErrorCode::kState);
  EXPECT_EQ(code_of([&] { enc.backward(ForwardCache{}, Matrix(6, 4)); }), ErrorCode::kState);
}

// Finite differences of dcca_loss(f(x), g(y)) with respect to every parameter
// of both encoders.
struct EndToEndCheck {
  double worst = 0.0;
  std::size_t checked = 0;
};

EndToEndCheck check_end_to_end(Encoder& fx_enc, Encoder& gy_enc, const Matrix& x, const Matrix& y,
                               double eps, std::size_t max_per_array = SIZE_MAX) {
  ForwardCache cx, cy;
  const Matrix f = fx_enc.forward(x, Mode::kTrain, &cx);
  const Matrix g = gy_enc.forward(y, Mode::kTrain, &cy);
  const auto loss = dcca_loss(f, g, eps);
  const ParamGrads gfx = fx_enc.backward(cx, loss.grad_fx);
  const ParamGrads gyy = gy_enc.backward(cy, loss.grad_gy);

  auto objective = [&]() {
    return dcca_loss(fx_enc.forward(x, Mode::kTrain), gy_enc.forward(y, Mode::kTrain), eps).loss;
  };
  EndToEndCheck result;
  for (auto [enc, grads] : {std::pair{&fx_enc, &gfx}, std::pair{&gy_enc, &gyy}}) {
    std::vector<std::span<const double>> analytic;
    for (const auto& layer : *grads) {
      if (!layer.weight.empty()) analytic.emplace_back(layer.weight);
      if (!layer.bias.empty()) analytic.emplace_back(layer.bias);
    }
    auto spans = enc->parameter_spans();
    for (std::size_t s = 0; s < spans.size(); ++s) {
      const std::size_t stride = std::max<std::size_t>(1, spans[s].size() / max_per_array);
      for (std::size_t i = 0; i < spans[s].size(); i += stride) {
        const double keep = spans[s][i];
        constexpr double kStep = 1e-5;
        spans[s][i] = keep + kStep;
        const double up = objective();
        spans[s][i] = keep - kStep;
        const double down = objective();
        spans[s][i] = keep;
        const double numeric = (up - down) / (2 * kStep);
        const double a = analytic[s][i];
        result.worst = std::max(result.worst, std::abs(a - numeric) / (std::abs(a) + 1e-6));
        ++result.checked;
      }
    }
  }
  return result;
}

TEST(EncoderBackward, EndToEndFiniteDifferencesTinyNet) {
  const EncoderConfig cfg{Conv{3}, BatchNorm{}, Elu{}, MaxPool{2}, Conv1x1Linear{4}, BatchNorm{},
                          GlobalAvgPool{}};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Encoder f = Encoder::init(cfg, Shape::image(1, 6, 8), 4, 10 + seed);
    Encoder g = Encoder::init(cfg, Shape::image(1, 8, 6), 4, 20 + seed);
    const Matrix x = random_matrix(16, 48, 30 + seed);
    const Matrix y = random_matrix(16, 48, 40 + seed) + x * 0.5;
    const auto r = check_end_to_end(f, g, x, y, 1e-3);
    EXPECT_GT(r.checked, 100u);
    EXPECT_LT(r.worst, 1e-3) << "seed " << seed;
  }
}

TEST(EncoderBackward, EndToEndFiniteDifferencesTwoConvBlocks) {
  Encoder f = Encoder::init(desk_config(4), Shape::image(1, 8, 12), 4, 5);
  Encoder g = Encoder::init(desk_config(4), Shape::image(1, 12, 8), 4, 6);
  const Matrix x = random_matrix(24, 96, 7);
  const Matrix y = random_matrix(24, 96, 8) + x * 0.5;
  const auto r = check_end_to_end(f, g, x, y, 1e-3);
  EXPECT_GT(r.checked, 2000u);
  EXPECT_LT(r.worst, 1e-3);
}

// Full stack on the smallest input that survives four poolings, sampled
// entries per parameter array.
TEST(EncoderBackward, EndToEndFiniteDifferencesFullPreset) {
  Encoder f = Encoder::init(full_config(4), Shape::image(1, 16, 16), 4, 9);
  Encoder g = Encoder::init(full_config(4), Shape::image(1, 16, 16), 4, 10);
  const Matrix x = random_matrix(8, 256, 11);
  const Matrix y = random_matrix(8, 256, 12) + x * 0.5;
  const auto r = check_end_to_end(f, g, x, y, 1e-3, 6);
  EXPECT_GT(r.checked, 200u);
  EXPECT_LT(r.worst, 1e-3);
}

TEST(EncoderBackward, EndToEndFiniteDifferencesMlp) {
  Encoder f = Encoder::init(mlp_config(3, 6), Shape::flat(5), 3, 1);
  Encoder g = Encoder::init(mlp_config(3, 6), Shape::flat(4), 3, 2);
  const Matrix x = random_matrix(20, 5, 3);
  const Matrix y = random_matrix(20, 4, 4);
  const auto r = check_end_to_end(f, g, x, y, 1e-3);
  EXPECT_LT(r.worst, 1e-3);
}

}  // namespace
}  // namespace dcca
