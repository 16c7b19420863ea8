#include <gtest/gtest.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "dcca/cca.hpp"
#include "dcca/dataset.hpp"

namespace dcca {
namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kState;
}

SnippetParams small_params(std::uint64_t seed = 3) {
  SnippetParams p;
  p.pieces = 10;
  p.snippets_per_piece = 6;
  p.seed = seed;
  p.shape_x = Shape::image(1, 12, 16);
  p.shape_y = Shape::image(1, 20, 16);
  return p;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("dcca_test_dataset_" + std::to_string(::getpid()) + "_" + name);
}

TEST(GenLinearGaussian, RecoversPopulationCorrelations) {
  const std::vector<double> corrs{0.9, 0.5, 0.1};
  const MultiViewDataset ds = gen_linear_gaussian(10000, corrs, 6, 5, 11);
  const CcaModel m = fit_cca(ds.x, ds.y);
  ASSERT_GE(m.corrs.size(), 3u);
  for (std::size_t i = 0; i < corrs.size(); ++i) EXPECT_NEAR(m.corrs[i], corrs[i], 0.03) << i;
  for (std::size_t i = corrs.size(); i < m.corrs.size(); ++i) EXPECT_LT(m.corrs[i], 0.1);
}

TEST(GenLinearGaussian, ZeroCorrelationsGiveIndependentViews) {
  const std::vector<double> corrs{0.0, 0.0, 0.0};
  const MultiViewDataset ds = gen_linear_gaussian(10000, corrs, 4, 3, 5);
  for (double c : fit_cca(ds.x, ds.y).corrs) EXPECT_LT(c, 0.1);
}

TEST(GenLinearGaussian, Errors) {
  const std::vector<double> ok{0.5};
  EXPECT_EQ(code_of([&] { gen_linear_gaussian(0, ok, 2, 2, 0); }), ErrorCode::kEmptyDataset);
  const std::vector<double> one{1.0}, neg{-0.1}, many{0.1, 0.2, 0.3};
  EXPECT_EQ(code_of([&] { gen_linear_gaussian(10, one, 2, 2, 0); }), ErrorCode::kRange);
  EXPECT_EQ(code_of([&] { gen_linear_gaussian(10, neg, 2, 2, 0); }), ErrorCode::kRange);
  EXPECT_EQ(code_of([&] { gen_linear_gaussian(10, many, 2, 4, 0); }), ErrorCode::kRange);
}

TEST(GenLinearGaussian, ShapesSplitsAndDescriptor) {
  const std::vector<double> corrs{0.9};
  const MultiViewDataset ds = gen_linear_gaussian(10, corrs, 3, 2, 4);
  EXPECT_EQ(ds.shape_x, Shape::flat(3));
  EXPECT_EQ(ds.shape_y, Shape::flat(2));
  EXPECT_EQ(ds.indices(Split::kTrain).size(), 6u);
  EXPECT_EQ(ds.indices(Split::kValid).size(), 2u);
  EXPECT_EQ(ds.indices(Split::kTest).size(), 2u);
  EXPECT_NE(ds.generator.find("kind=linear"), std::string::npos);
  EXPECT_NE(ds.generator.find("seed=4"), std::string::npos);
}

TEST(GenNonlinearSnippets, DefaultShapesAndSplitSizes) {
  SnippetParams p;
  p.snippets_per_piece = 2;
  const MultiViewDataset ds = gen_nonlinear_snippets(p);
  EXPECT_EQ(ds.shape_x, Shape::image(1, 40, 100));
  EXPECT_EQ(ds.shape_y, Shape::image(1, 136, 100));
  EXPECT_EQ(ds.size(), 200u);
  std::map<Split, std::set<std::uint64_t>> pieces;
  for (const auto& m : ds.meta) pieces[m.split].insert(m.piece_id);
  EXPECT_EQ(pieces[Split::kTrain].size(), 60u);
  EXPECT_EQ(pieces[Split::kValid].size(), 20u);
  EXPECT_EQ(pieces[Split::kTest].size(), 20u);
}

TEST(GenNonlinearSnippets, NoPieceStraddlesSplits) {
  const MultiViewDataset ds = gen_nonlinear_snippets(small_params());
  std::map<std::uint64_t, Split> owner;
  for (const auto& m : ds.meta) {
    const auto [it, inserted] = owner.emplace(m.piece_id, m.split);
    if (!inserted) {
      EXPECT_EQ(it->second, m.split) << "piece " << m.piece_id;
    }
  }
}

TEST(GenNonlinearSnippets, PositionsFollowStride) {
  SnippetParams p = small_params();
  p.stride = 3;
  const MultiViewDataset ds = gen_nonlinear_snippets(p);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.meta[i].piece_id, i / p.snippets_per_piece);
    EXPECT_EQ(ds.meta[i].position, (i % p.snippets_per_piece) * 3);
  }
}

TEST(GenNonlinearSnippets, SharedMapWithoutNoiseGivesIdenticalViews) {
  SnippetParams p = small_params();
  p.noise = 0.0;
  p.shared_map = true;
  p.shape_y = p.shape_x;
  const MultiViewDataset ds = gen_nonlinear_snippets(p);
  EXPECT_EQ(ds.x, ds.y);
}

TEST(GenNonlinearSnippets, TrainSplitIsStandardized) {
  const MultiViewDataset ds = gen_nonlinear_snippets(small_params());
  for (const Matrix* v : {&ds.x, &ds.y}) {
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i : ds.indices(Split::kTrain))
      for (std::size_t c = 0; c < v->cols(); ++c) {
        sum += (*v)(i, c);
        sq += (*v)(i, c) * (*v)(i, c);
        ++count;
      }
    const double mean = sum / static_cast<double>(count);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(sq / static_cast<double>(count) - mean * mean, 1.0, 1e-5);
  }
}

TEST(GenNonlinearSnippets, ValuesAreFloat32Representable) {
  const MultiViewDataset ds = gen_nonlinear_snippets(small_params());
  for (double v : ds.x.data()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v)));
  for (double v : ds.y.data()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST(GenNonlinearSnippets, SameSeedGivesIdenticalBytes) {
  const std::string a = serialize_dataset(gen_nonlinear_snippets(small_params(9)));
  const std::string b = serialize_dataset(gen_nonlinear_snippets(small_params(9)));
  const std::string c = serialize_dataset(gen_nonlinear_snippets(small_params(10)));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(GenNonlinearSnippets, RangeErrors) {
  SnippetParams p = small_params();
  p.pieces = 0;
  EXPECT_EQ(code_of([&] { gen_nonlinear_snippets(p); }), ErrorCode::kRange);
  p = small_params();
  p.noise = -1.0;
  EXPECT_EQ(code_of([&] { gen_nonlinear_snippets(p); }), ErrorCode::kRange);
  p = small_params();
  p.shared_map = true;
  EXPECT_EQ(code_of([&] { gen_nonlinear_snippets(p); }), ErrorCode::kRange);
}

TEST(PairingIntegrity, ShuffledViewDestroysCorrelation) {
  const std::vector<double> corrs{0.9, 0.5, 0.1};
  const MultiViewDataset ds = gen_linear_gaussian(10000, corrs, 6, 5, 21);
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(1));
  const Vector shuffled = fit_cca(ds.x, ds.y.gather_rows(perm), kDefaultRegularizer, 3).corrs;
  const double total = std::accumulate(shuffled.begin(), shuffled.end(), 0.0);
  EXPECT_LT(total, 0.15 * 3.0);
  const Vector aligned = fit_cca(ds.x, ds.y, kDefaultRegularizer, 3).corrs;
  EXPECT_GT(std::accumulate(aligned.begin(), aligned.end(), 0.0), 1.4);
}

TEST(DatasetFile, RoundTripIsBitExact) {
  const MultiViewDataset ds = gen_nonlinear_snippets(small_params());
  const auto path = temp_path("rt.mvds");
  save_dataset(ds, path);
  const MultiViewDataset back = load_dataset(path);
  EXPECT_EQ(back, ds);
  const auto path2 = temp_path("rt2.mvds");
  save_dataset(back, path2);
  EXPECT_EQ(io::read_file(path), io::read_file(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(DatasetFile, LinearRoundTripPreservesFlatShapes) {
  const std::vector<double> corrs{0.7, 0.2};
  const MultiViewDataset ds = gen_linear_gaussian(50, corrs, 4, 3, 2);
  EXPECT_EQ(deserialize_dataset(serialize_dataset(ds)), ds);
}

TEST(DatasetFile, ReloadedCcaMatchesInMemory) {
  const std::vector<double> corrs{0.9, 0.5, 0.1};
  const MultiViewDataset ds = gen_linear_gaussian(10000, corrs, 6, 5, 8);
  const auto path = temp_path("cca.mvds");
  save_dataset(ds, path);
  const MultiViewDataset back = load_dataset(path);
  std::filesystem::remove(path);
  const Vector a = fit_cca(ds.x, ds.y).corrs;
  const Vector b = fit_cca(back.x, back.y).corrs;
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(DatasetFile, EveryTruncationIsAFormatError) {
  const std::vector<double> corrs{0.5};
  const std::string bytes = serialize_dataset(gen_linear_gaussian(5, corrs, 2, 2, 1));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    const ErrorCode code = code_of([&] { deserialize_dataset(bytes.substr(0, len)); });
    EXPECT_TRUE(code == ErrorCode::kFormat || code == ErrorCode::kChecksum) << "length " << len;
  }
}

TEST(DatasetFile, CorruptionIsRejected) {
  const std::vector<double> corrs{0.5};
  const std::string bytes = serialize_dataset(gen_linear_gaussian(5, corrs, 2, 2, 1));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize_dataset(bad_magic); }), ErrorCode::kFormat);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_EQ(code_of([&] { deserialize_dataset(bad_version); }), ErrorCode::kVersion);
  // Flip one bit in every payload byte position past the fixed prefix.
  for (std::size_t pos = 6; pos < bytes.size(); ++pos) {
    std::string flipped = bytes;
    flipped[pos] = static_cast<char>(flipped[pos] ^ 0x10);
    const ErrorCode code = code_of([&] { deserialize_dataset(flipped); });
    EXPECT_TRUE(code == ErrorCode::kFormat || code == ErrorCode::kChecksum) << "byte " << pos;
  }
  EXPECT_EQ(code_of([&] { deserialize_dataset(bytes + "x"); }), ErrorCode::kFormat);
}

TEST(DatasetFile, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { load_dataset(temp_path("does_not_exist.mvds")); }), ErrorCode::kIo);
}

TEST(SplitNames, ParseAndPrint) {
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest})
    EXPECT_EQ(parse_split(to_string(s)), s);
  EXPECT_EQ(code_of([] { parse_split("dev"); }), ErrorCode::kRange);
}

}  // namespace
}  // namespace dcca
