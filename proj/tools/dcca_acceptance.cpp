// Acceptance run: one PASS/FAIL line per criterion.
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "dcca/dcca_loss.hpp"
#include "dcca/retrieval.hpp"

namespace {

using namespace dcca;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " FAILED[" << what << "]";
    }
  }
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = normal(rng);
  return m;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + floor);
}

double loss_gradient_error(const Matrix& fx, const Matrix& gy, double eps) {
  const auto r = dcca_loss(fx, gy, eps);
  double worst = 0.0;
  for (int view = 0; view < 2; ++view) {
    Matrix x = view == 0 ? fx : gy;
    const Matrix& grad = view == 0 ? r.grad_fx : r.grad_gy;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x.data()[i];
      constexpr double kStep = 1e-5;
      x.data()[i] = keep + kStep;
      const double up = view == 0 ? dcca_loss(x, gy, eps).loss : dcca_loss(fx, x, eps).loss;
      x.data()[i] = keep - kStep;
      const double down = view == 0 ? dcca_loss(x, gy, eps).loss : dcca_loss(fx, x, eps).loss;
      x.data()[i] = keep;
      worst = std::max(worst, relative_error(grad.data()[i], (up - down) / (2 * kStep), 1e-8));
    }
  }
  return worst;
}

// Worst relative error of encoder+loss parameter gradients; `per_array` caps
// the entries checked in each parameter array.
double end_to_end_gradient_error(Encoder& f, Encoder& g, const Matrix& x, const Matrix& y,
                                 std::size_t per_array, std::size_t& checked) {
  constexpr double kEps = 1e-3;
  ForwardCache cx, cy;
  const auto loss = dcca_loss(f.forward(x, Mode::kTrain, &cx), g.forward(y, Mode::kTrain, &cy), kEps);
  const ParamGrads gf = f.backward(cx, loss.grad_fx);
  const ParamGrads gg = g.backward(cy, loss.grad_gy);
  auto objective = [&] {
    return dcca_loss(f.forward(x, Mode::kTrain), g.forward(y, Mode::kTrain), kEps).loss;
  };
  double worst = 0.0;
  for (auto [enc, grads] : {std::pair{&f, &gf}, std::pair{&g, &gg}}) {
    std::vector<std::span<const double>> analytic;
    for (const auto& layer : *grads) {
      if (!layer.weight.empty()) analytic.emplace_back(layer.weight);
      if (!layer.bias.empty()) analytic.emplace_back(layer.bias);
    }
    auto spans = enc->parameter_spans();
    for (std::size_t s = 0; s < spans.size(); ++s) {
      const std::size_t stride = std::max<std::size_t>(1, spans[s].size() / per_array);
      for (std::size_t i = 0; i < spans[s].size(); i += stride) {
        const double keep = spans[s][i];
        constexpr double kStep = 1e-5;
        spans[s][i] = keep + kStep;
        const double up = objective();
        spans[s][i] = keep - kStep;
        const double down = objective();
        spans[s][i] = keep;
        worst = std::max(worst, relative_error(analytic[s][i], (up - down) / (2 * kStep), 1e-6));
        ++checked;
      }
    }
  }
  return worst;
}

void criterion_gradients(Outcome& out) {
  const Stopwatch clock;
  double loss_worst = 0.0;
  for (std::uint64_t b = 0; b < 20; ++b) {
    const Matrix fx = random_matrix(32, 4, 100 + b);
    const Matrix gy = random_matrix(32, 4, 200 + b) + fx * 0.7;
    loss_worst = std::max(loss_worst, loss_gradient_error(fx, gy, 1e-3));
  }
  out.check(loss_worst < 1e-4, "loss gradient");

  std::size_t checked = 0;
  Encoder f = Encoder::init(desk_config(4), Shape::image(1, 8, 12), 4, 5);
  Encoder g = Encoder::init(desk_config(4), Shape::image(1, 12, 8), 4, 6);
  const Matrix x = random_matrix(24, 96, 7);
  const double desk_worst = end_to_end_gradient_error(f, g, x, random_matrix(24, 96, 8) + x * 0.5,
                                                      SIZE_MAX, checked);
  out.check(desk_worst < 1e-3, "two-block end-to-end gradient");

  Encoder fi = Encoder::init(full_config(32), Shape::image(1, 40, 100), 32, 1);
  Encoder fa = Encoder::init(full_config(32), Shape::image(1, 136, 100), 32, 2);
  const Matrix img = fi.forward(random_matrix(2, 4000, 3), Mode::kTrain);
  const Matrix aud = fa.forward(random_matrix(2, 13600, 4), Mode::kTrain);
  out.check(img.rows() == 2 && img.cols() == 32 && aud.rows() == 2 && aud.cols() == 32,
            "full preset shapes");

  std::size_t full_checked = 0;
  Encoder ff = Encoder::init(full_config(4), Shape::image(1, 16, 16), 4, 9);
  Encoder fg = Encoder::init(full_config(4), Shape::image(1, 16, 16), 4, 10);
  const Matrix xs = random_matrix(8, 256, 11);
  const double full_worst = end_to_end_gradient_error(ff, fg, xs, random_matrix(8, 256, 12) + xs * 0.5,
                                                      6, full_checked);
  out.check(full_worst < 1e-3, "full preset end-to-end gradient");
  out.check(clock.seconds() < 120.0, "runtime");
  out.detail << " loss_rel_err=" << loss_worst << " two_block_rel_err=" << desk_worst << " ("
             << checked << " params) full_rel_err=" << full_worst << " (" << full_checked
             << " params) seconds=" << clock.seconds();
}

void criterion_cca_oracle(Outcome& out) {
  const Stopwatch clock;
  const std::vector<double> corrs{0.9, 0.5, 0.1};
  const MultiViewDataset ds = gen_linear_gaussian(10000, corrs, 10, 10, 42);
  const Vector got = fit_cca(ds.x, ds.y).corrs;
  for (std::size_t i = 0; i < corrs.size(); ++i)
    out.check(std::abs(got[i] - corrs[i]) <= 0.03, "recovered corr " + std::to_string(i));
  const MultiViewDataset null = gen_linear_gaussian(10000, std::vector<double>{}, 10, 10, 43);
  const Vector zero = fit_cca(null.x, null.y).corrs;
  out.check(*std::max_element(zero.begin(), zero.end()) < 0.1, "independent views");
  out.check(clock.seconds() < 30.0, "runtime");
  out.detail << " corrs=" << got[0] << "," << got[1] << "," << got[2]
             << " independent_max=" << *std::max_element(zero.begin(), zero.end())
             << " seconds=" << clock.seconds();
}

void criterion_trace_norm(Outcome& out) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t rows = 1 + seed % 8, cols = 1 + (seed * 5) % 8;
    const Matrix t = random_matrix(rows, cols, 11 + seed, 0.4);
    const auto eig = sym_eig(rows < cols ? matmul_nt(t, t) : matmul_tn(t, t));
    double trace_norm = 0.0;
    for (double l : eig.eigenvalues) trace_norm += std::sqrt(std::max(l, 0.0));
    worst = std::max(worst, std::abs(total_correlation(t) - trace_norm));
  }
  out.check(worst <= 1e-8, "trace norm");
  out.detail << " max_abs_diff=" << worst;
}

void criterion_saturation(Outcome& out) {
  double worst = 0.0;
  for (std::size_t h = 1; h <= 8; ++h) {
    const Matrix f = random_matrix(50 * h, h, h);
    worst = std::max(worst, std::abs(dcca_loss(f, f, 1e-6).loss + static_cast<double>(h)));
  }
  out.check(worst <= 1e-3, "saturation");
  out.detail << " max_abs_gap=" << worst;
}

void criterion_retrieval_engine(Outcome& out) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal;
  std::size_t mismatches = 0, queries = 0, largest = 0;
  for (int t = 0; t < 100; ++t) {
    const auto m = static_cast<std::size_t>(std::round(std::pow(10000.0, (t + 1) / 100.0)));
    largest = std::max(largest, m);
    const std::size_t h = 1 + static_cast<std::size_t>(t % 8);
    const bool quantized = t % 3 == 0;  // small integer coordinates force exact ties
    SnippetIndex index;
    index.h = h;
    std::vector<std::uint64_t> ids(m);
    std::iota(ids.begin(), ids.end(), 500);
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < m; ++i) {
      SnippetRecord rec{ids[i], i / 10, i % 10, std::vector<double>(h)};
      do {
        for (double& v : rec.embedding)
          v = quantized ? static_cast<double>(static_cast<int>(rng() % 3) - 1) : normal(rng);
      } while (std::all_of(rec.embedding.begin(), rec.embedding.end(),
                           [](double v) { return v == 0.0; }));
      index.records.push_back(std::move(rec));
    }
    for (int qi = 0; qi < 3; ++qi) {
      std::vector<double> q = index.records[rng() % m].embedding;
      if (!quantized && qi > 0)
        for (double& v : q) v += 0.3 * normal(rng);
      std::vector<RankedHit> oracle;
      for (const auto& rec : index.records)
        oracle.push_back({rec.snippet_id, cosine_distance(q, rec.embedding)});
      std::sort(oracle.begin(), oracle.end(), [](const RankedHit& a, const RankedHit& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.snippet_id < b.snippet_id;
      });
      const RankingResult res = query(index, q, m);
      ++queries;
      if (res.hits != oracle) ++mismatches;
    }
  }
  out.check(mismatches == 0 && largest == 10000, "brute-force agreement");
  out.detail << " indexes=100 queries=" << queries << " largest_m=" << largest
             << " mismatches=" << mismatches;
}

struct Process {
  int code = -1;
  std::string out;
};

Process run_cli(const std::string& args) {
  Process p;
  FILE* pipe = ::popen((std::string(DCCA_CLI) + " " + args + " 2>/dev/null").c_str(), "r");
  if (!pipe) return p;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) p.out.append(buf, n);
  const int status = ::pclose(pipe);
  p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return p;
}

void criterion_metrics(Outcome& out, const std::filesystem::path& work) {
  const std::vector<std::size_t> a{1, 3, 20}, b{1, 2, 3};
  const double r = recall_at_k(a, 5);
  const std::size_t mr = median_rank(b);
  out.check(std::abs(r - 66.67) <= 0.01, "recall_at_k");
  out.check(mr == 2, "median_rank");
  const std::string data = (work / "golden.mvds").string(), ckpt = (work / "golden.dcck").string();
  const bool ran =
      run_cli("gen-data --kind linear --n 1000 --corrs 0.9,0.8,0.7,0.6 --dx 4 --dy 4 --seed 11 --out " +
              data).code == 0 &&
      run_cli("train --data " + data + " --out " + ckpt +
              " --arch linear --embedding-dim 4 --epochs 0 --seed 5").code == 0;
  const Process report = run_cli("evaluate --ckpt " + ckpt + " --data " + data + " --direction both");
  const std::string golden = io::read_file(std::string(DCCA_GOLDEN_DIR) + "/evaluate_both.txt");
  out.check(ran && report.code == 0 && report.out == golden, "evaluate golden file");
  out.detail << " recall_at_k=" << r << " median_rank=" << mr << " golden_lines="
             << std::count(golden.begin(), golden.end(), '\n');
}

struct DeskRun {
  MultiViewDataset ds;
  Checkpoint trained;
  bool ok = false;
};

void criterion_desk_learning(Outcome& out, DeskRun& run) {
  const Stopwatch clock;
  SnippetParams params;
  params.seed = 7;
  run.ds = gen_nonlinear_snippets(params);
  TrainConfig cfg;
  cfg.seed = 7;
  cfg.epochs = 0;
  const Checkpoint untrained = train(run.ds, cfg);
  cfg.epochs = 20;
  run.trained = train(run.ds, cfg);
  run.ok = true;
  for (Direction d : {Direction::kAudioToSheet, Direction::kSheetToAudio}) {
    const RetrievalMetrics null = evaluate_retrieval(untrained, run.ds, Split::kTest, d);
    const RetrievalMetrics m = evaluate_retrieval(run.trained, run.ds, Split::kTest, d);
    const std::string name(to_string(d));
    out.check(m.m == 1000 && null.m == 1000, name + " candidates");
    out.check(m.mr <= 50 && m.r_at_10 >= 50.0, name + " trained");
    out.check(null.mr >= 250 && null.mr <= 750, name + " null");
    out.detail << " " << name << ": trained_mr=" << m.mr << " trained_r_at_10=" << m.r_at_10
               << " null_mr=" << null.mr;
  }
  out.check(clock.seconds() <= 600.0, "runtime");
  out.detail << " final_loss=" << run.trained.history.back().loss
             << " initial_loss=" << run.trained.history.front().loss
             << " seconds=" << clock.seconds();
}

// Every truncation and a spread of single-bit flips must raise a format error.
bool rejects_corruption(const std::string& bytes,
                        const std::function<void(std::string_view)>& decode, std::size_t& tried) {
  auto rejected = [&](std::string_view b) {
    ++tried;
    try {
      decode(b);
    } catch (const Error& e) {
      return e.is_format_error();
    } catch (...) {
      return false;
    }
    return false;
  };
  const std::size_t step = std::max<std::size_t>(1, bytes.size() / 400);
  for (std::size_t len = 0; len < bytes.size(); len += step)
    if (!rejected(std::string_view(bytes).substr(0, len))) return false;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 400; ++i) {
    std::string flipped = bytes;
    flipped[rng() % flipped.size()] ^= static_cast<char>(1 << (rng() % 8));
    if (!rejected(flipped)) return false;
  }
  return true;
}

void criterion_determinism(Outcome& out, const DeskRun& run) {
  SnippetParams params;
  params.seed = 7;
  const std::string ds_bytes = serialize_dataset(run.ds);
  out.check(serialize_dataset(gen_nonlinear_snippets(params)) == ds_bytes, "dataset bytes");
  out.check(serialize_dataset(deserialize_dataset(ds_bytes)) == ds_bytes, "dataset round-trip");

  SnippetParams small;
  small.pieces = 10;
  small.snippets_per_piece = 30;
  small.shape_x = Shape::image(1, 16, 24);
  small.shape_y = Shape::image(1, 24, 24);
  const MultiViewDataset sds = gen_nonlinear_snippets(small);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  const std::string ck_bytes = serialize_checkpoint(train(sds, cfg));
  out.check(serialize_checkpoint(train(sds, cfg)) == ck_bytes, "checkpoint bytes");
  out.check(serialize_checkpoint(deserialize_checkpoint(ck_bytes)) == ck_bytes,
            "checkpoint round-trip");

  const auto rows = run.ds.indices(Split::kTest);
  const std::string ix_bytes = serialize_index(build_index(run.trained, run.ds, Modality::kImage, rows));
  out.check(serialize_index(build_index(run.trained, run.ds, Modality::kImage, rows)) == ix_bytes,
            "index bytes");
  out.check(serialize_index(deserialize_index(ix_bytes)) == ix_bytes, "index round-trip");

  std::size_t tried = 0;
  const std::string small_ds = serialize_dataset(sds);
  out.check(rejects_corruption(small_ds, [](std::string_view b) { deserialize_dataset(b); }, tried),
            "dataset corruption");
  out.check(rejects_corruption(ck_bytes, [](std::string_view b) { deserialize_checkpoint(b); }, tried),
            "checkpoint corruption");
  out.check(rejects_corruption(ix_bytes, [](std::string_view b) { deserialize_index(b); }, tried),
            "index corruption");
  out.detail << " corrupted_inputs_rejected=" << tried;
}

void criterion_whitening(Outcome& out, const DeskRun& run) {
  const auto rows = run.ds.indices(Split::kTrain);
  const Matrix px = project_x(run.trained.cca, run.trained.enc_x.infer(run.ds.x.gather_rows(rows)));
  const Matrix py = project_y(run.trained.cca, run.trained.enc_y.infer(run.ds.y.gather_rows(rows)));
  const Matrix cx = center(px).centered, cy = center(py).centered;
  const Matrix sx = covariance(cx, 0.0), sy = covariance(cy, 0.0), sxy = cross_covariance(cx, cy);
  double var_gap = 0.0, cross_gap = 0.0;
  for (std::size_t i = 0; i < sx.rows(); ++i) {
    var_gap = std::max({var_gap, std::abs(sx(i, i) - 1.0), std::abs(sy(i, i) - 1.0)});
    for (std::size_t j = 0; j < sx.cols(); ++j)
      cross_gap = std::max(cross_gap,
                           std::abs(sxy(i, j) - (i == j ? run.trained.cca.corrs[i] : 0.0)));
  }
  out.check(var_gap <= 1e-3, "unit variance");
  out.check(cross_gap <= 1e-3, "diagonal cross-covariance");
  out.detail << " max_variance_gap=" << var_gap << " max_cross_gap=" << cross_gap;
}

}  // namespace

int main() {
  const auto work = std::filesystem::temp_directory_path() /
                    ("dcca_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(work);
  DeskRun desk;
  const std::vector<std::pair<int, std::function<void(Outcome&)>>> criteria{
      {1, criterion_gradients},
      {2, criterion_cca_oracle},
      {3, criterion_trace_norm},
      {4, criterion_saturation},
      {5, criterion_retrieval_engine},
      {6, [&](Outcome& o) { criterion_metrics(o, work); }},
      {7, [&](Outcome& o) { criterion_desk_learning(o, desk); }},
      {8, [&](Outcome& o) {
         o.check(desk.ok, "needs criterion 7 run");
         if (desk.ok) criterion_determinism(o, desk);
       }},
      {9, [&](Outcome& o) {
         o.check(desk.ok, "needs criterion 7 run");
         if (desk.ok) criterion_whitening(o, desk);
       }},
  };
  bool all = true;
  for (const auto& [id, fn] : criteria) {
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " exception: " << e.what();
    }
    all = all && o.pass;
    std::printf("criterion %d: %s%s\n", id, o.pass ? "PASS" : "FAIL", o.detail.str().c_str());
    std::fflush(stdout);
  }
  std::filesystem::remove_all(work);
  return all ? 0 : 1;
}
