#include <openssl/evp.h>

#include <CLI11.hpp>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dcca/retrieval.hpp"

namespace {

using namespace dcca;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// Raised for bad flag combinations discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kRange:
    case ErrorCode::kBounds:
    case ErrorCode::kPrecondition:
    case ErrorCode::kDimension:
    case ErrorCode::kEmptyDataset:
    case ErrorCode::kInsufficientSamples: return kExitUsage;
    default: return kExitRuntime;
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1,
          ErrorCode::kIo, "sha256 failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string option_key(std::string name) {
  for (char& c : name)
    if (c == '-') c = '_';
  return name;
}

// Flat `key = value` lines; `#` starts a comment. Keys accept '-' or '_'.
std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string key = eq == std::string::npos ? "" : option_key(trim(line.substr(0, eq)));
    if (key.empty())
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::vector<CLI::Option*> resolvable_options(CLI::App& app, CLI::App& sub) {
  std::vector<CLI::Option*> out;
  for (CLI::App* a : {&app, &sub})
    for (CLI::Option* opt : a->get_options())
      if (!opt->get_lnames().empty() && opt->get_lnames()[0] != "help" &&
          opt->get_lnames()[0] != "config" && opt->get_lnames()[0] != "verbose")
        out.push_back(opt);
  return out;
}

// Config values fill options that were not given on the command line.
void apply_config(CLI::App& app, CLI::App& sub, const std::map<std::string, std::string>& cfg) {
  const auto options = resolvable_options(app, sub);
  for (const auto& [key, value] : cfg) {
    CLI::Option* match = nullptr;
    for (CLI::Option* opt : options)
      if (option_key(opt->get_lnames()[0]) == key) match = opt;
    if (!match) throw UsageError("unknown config key '" + key + "' for " + sub.get_name());
    if (match->count() > 0) continue;
    try {
      match->add_result(value);
      match->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config key '" + key + "': " + e.what());
    }
  }
}

std::string resolved_config(CLI::App& app, CLI::App& sub) {
  std::ostringstream out;
  out << "# resolved " << sub.get_name() << " configuration\n";
  for (CLI::Option* opt : resolvable_options(app, sub)) {
    std::string value;
    if (opt->get_type_size() == 0) {
      value = opt->count() > 0 && opt->as<bool>() ? "true" : "false";
    } else if (opt->count() > 0) {
      const auto& results = opt->results();
      for (std::size_t i = 0; i < results.size(); ++i) value += (i ? "," : "") + results[i];
    } else {
      value = opt->get_default_str();
    }
    out << option_key(opt->get_lnames()[0]) << "=" << value << "\n";
  }
  return out.str();
}

void require_flag(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("missing required option --" + flag);
}

Shape parse_shape(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(part, &used);
      if (used != part.size() || v == 0) throw std::invalid_argument(part);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("bad shape '" + text + "' (expected CxHxW)");
    }
  }
  if (dims.size() != 3) throw UsageError("bad shape '" + text + "' (expected CxHxW)");
  return Shape::image(dims[0], dims[1], dims[2]);
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(trim(part), &used));
      if (used != trim(part).size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("bad number '" + part + "' in list '" + text + "'");
    }
  }
  return out;
}

// One sample as whitespace-separated numbers.
Vector read_sample_file(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  Vector out;
  std::string token;
  while (in >> token) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(token, &used));
      if (used != token.size()) throw std::invalid_argument(token);
    } catch (const std::exception&) {
      fail(ErrorCode::kFormat, path.string() + ": not a number: '" + token + "'");
    }
  }
  return out;
}

void write_provenance(const fs::path& out, const std::string& config) {
  fs::path path = out;
  path += ".config";
  io::write_file(path, config);
}

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  bool verbose = false;
};

struct GenDataArgs {
  std::string kind = "nonlinear";
  std::string out;
  SnippetParams snippets;
  std::string shape_x = SnippetParams{}.shape_x.str(), shape_y = SnippetParams{}.shape_y.str();
  std::size_t n = 10000, dx = 10, dy = 10;
  std::string corrs = "0.9,0.5,0.1";
};

struct TrainArgs {
  std::string data, out;
  TrainConfig cfg;
};

struct IndexArgs {
  std::string ckpt, data, modality = "image", out, split = "test";
  std::size_t limit = 0;
};

struct QueryArgs {
  std::string ckpt, index, input, data;
  std::size_t k = 10;
  long long row = -1;
};

struct EvaluateArgs {
  std::string ckpt, data, direction = "both", split = "test";
  std::size_t limit = 0;
  long long tolerance = -1;
};

int run_gen_data(const GenDataArgs& a, const Globals& g, const std::string& config) {
  require_flag(a.out, "out");
  MultiViewDataset ds;
  if (a.kind == "linear") {
    const std::vector<double> corrs = parse_list(a.corrs);
    ds = gen_linear_gaussian(a.n, corrs, a.dx, a.dy, g.seed);
  } else if (a.kind == "nonlinear") {
    SnippetParams p = a.snippets;
    p.seed = g.seed;
    p.shape_x = parse_shape(a.shape_x);
    p.shape_y = parse_shape(a.shape_y);
    ds = gen_nonlinear_snippets(p);
  } else {
    throw UsageError("unknown --kind '" + a.kind + "' (linear, nonlinear)");
  }
  const std::string bytes = serialize_dataset(ds);
  io::write_file(a.out, bytes);
  write_provenance(a.out, config);
  std::cout << "n=" << ds.size() << "\n" << "sha=" << sha256_hex(bytes) << "\n";
  return kExitOk;
}

int run_train(TrainArgs a, const Globals& g, const std::string& config) {
  require_flag(a.data, "data");
  require_flag(a.out, "out");
  a.cfg.seed = g.seed;
  validate(a.cfg);
  const MultiViewDataset ds = load_dataset(a.data);
  if (g.verbose) std::cerr << config;
  std::error_code ec;
  try {
    const Checkpoint ckpt = train(ds, a.cfg, [](const EpochRecord& r) {
      char lr[32];
      *std::to_chars(lr, lr + sizeof lr - 1, r.lr).ptr = '\0';
      std::printf("epoch=%zu loss=%.6f val_corr=%.6f lr=%s\n", r.epoch, r.loss, r.val_corr, lr);
      std::fflush(stdout);
    });
    save_checkpoint(ckpt, a.out);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kDiverged) {
      fs::remove(a.out, ec);
      fs::path tmp = a.out;
      tmp += ".tmp";
      fs::remove(tmp, ec);
    }
    throw;
  }
  write_provenance(a.out, config);
  std::cout << "sha=" << sha256_hex(io::read_file(a.out)) << "\n";
  return kExitOk;
}

int run_index(const IndexArgs& a, const Globals& g, const std::string& config) {
  require_flag(a.ckpt, "ckpt");
  require_flag(a.data, "data");
  require_flag(a.out, "out");
  const Modality modality = parse_modality(a.modality);
  const Split split = parse_split(a.split);
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const MultiViewDataset ds = load_dataset(a.data);
  std::vector<std::size_t> rows = ds.indices(split);
  require(!rows.empty(), ErrorCode::kEmptyDataset, "split '" + a.split + "' is empty");
  if (a.limit > rows.size())
    std::cerr << "warning: --limit " << a.limit << " exceeds split size " << rows.size()
              << ", clipped\n";
  if (a.limit != 0 && a.limit < rows.size()) rows.resize(a.limit);
  const SnippetIndex index = build_index(ckpt, ds, modality, rows);
  const std::string bytes = serialize_index(index);
  io::write_file(a.out, bytes);
  write_provenance(a.out, config);
  if (g.verbose) std::cerr << config;
  std::cout << "m=" << index.size() << "\n" << "h=" << index.h << "\n"
            << "sha=" << sha256_hex(bytes) << "\n";
  return kExitOk;
}

int run_query(const QueryArgs& a, const Globals& g, const std::string& config) {
  require_flag(a.ckpt, "ckpt");
  require_flag(a.index, "index");
  if (a.input.empty() == a.data.empty())
    throw UsageError("give exactly one of --input or --data (with --row)");
  if (!a.data.empty() && a.row < 0) throw UsageError("--data needs --row");
  if (g.verbose) std::cerr << config;
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const SnippetIndex index = load_index(a.index);
  // Queries come from the modality opposite to the indexed one.
  const bool query_is_audio = index.modality == Modality::kImage;
  const Encoder& enc = query_is_audio ? ckpt.enc_y : ckpt.enc_x;
  Vector sample;
  if (!a.input.empty()) {
    sample = read_sample_file(a.input);
  } else {
    const MultiViewDataset ds = load_dataset(a.data);
    const auto row = static_cast<std::size_t>(a.row);
    require(row < ds.size(), ErrorCode::kBounds, "--row outside the dataset");
    const Matrix& view = query_is_audio ? ds.y : ds.x;
    sample.assign(view.row(row).begin(), view.row(row).end());
  }
  require(sample.size() == enc.input_shape().size(), ErrorCode::kDimension,
          "sample has " + std::to_string(sample.size()) + " values, the " +
              (query_is_audio ? "audio" : "image") + " encoder expects " +
              enc.input_shape().str());
  Matrix batch(1, sample.size());
  std::copy(sample.begin(), sample.end(), batch.row(0).begin());
  const Matrix f = enc.infer(batch);
  const Matrix q = query_is_audio ? project_y(ckpt.cca, f) : project_x(ckpt.cca, f);
  const RankingResult res = query(index, q.row(0), a.k);
  std::unordered_map<std::uint64_t, const SnippetRecord*> by_id;
  for (const auto& rec : index.records) by_id[rec.snippet_id] = &rec;
  for (std::size_t r = 0; r < res.hits.size(); ++r) {
    const SnippetRecord& rec = *by_id.at(res.hits[r].snippet_id);
    std::printf("%zu %llu %llu %llu %.12f\n", r + 1,
                static_cast<unsigned long long>(rec.snippet_id),
                static_cast<unsigned long long>(rec.piece_id),
                static_cast<unsigned long long>(rec.position), res.hits[r].distance);
  }
  return kExitOk;
}

int run_evaluate(const EvaluateArgs& a, const Globals& g, const std::string& config) {
  require_flag(a.ckpt, "ckpt");
  require_flag(a.data, "data");
  std::vector<Direction> directions;
  if (a.direction == "both")
    directions = {Direction::kAudioToSheet, Direction::kSheetToAudio};
  else
    directions = {parse_direction(a.direction)};
  const Split split = parse_split(a.split);
  if (g.verbose) std::cerr << config;
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const MultiViewDataset ds = load_dataset(a.data);
  std::optional<std::uint64_t> tolerance;
  if (a.tolerance >= 0) tolerance = static_cast<std::uint64_t>(a.tolerance);
  for (Direction d : directions) {
    const RetrievalMetrics m = evaluate_retrieval(ckpt, ds, split, d, a.limit, tolerance);
    if (m.clipped)
      std::cerr << "warning: --limit " << a.limit << " exceeds split size " << m.m
                << ", clipped\n";
    std::cout << format_metrics(m) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep CCA cross-modal snippet retrieval: data generation, training, indexing, "
               "querying and evaluation.\nExit codes: 0 success, 2 usage or validation error, "
               "3 runtime failure (divergence, corrupt or missing file)."};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice");
  app.add_option("--config", g.config,
                 "File of `key = value` lines (# comments); command-line flags take precedence");
  app.add_flag("--verbose", g.verbose, "Echo the resolved configuration to stderr");

  GenDataArgs gd;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic paired-view dataset");
  gen->add_option("--kind", gd.kind, "linear | nonlinear");
  gen->add_option("--out", gd.out, "Output dataset file (required)");
  gen->add_option("--pieces", gd.snippets.pieces, "nonlinear: number of pieces");
  gen->add_option("--snippets-per-piece", gd.snippets.snippets_per_piece, "nonlinear: snippets per piece");
  gen->add_option("--latent-dim", gd.snippets.latent_dim, "nonlinear: shared latent dimension");
  gen->add_option("--noise", gd.snippets.noise, "nonlinear: i.i.d. pixel noise std");
  gen->add_option("--stride", gd.snippets.stride, "nonlinear: latent steps between snippets");
  gen->add_option("--hidden", gd.snippets.hidden, "nonlinear: tanh units per view");
  gen->add_option("--distractors", gd.snippets.distractors, "nonlinear: view-private fine gratings");
  gen->add_option("--distractor-scale", gd.snippets.distractor_scale,
                  "nonlinear: std of distractor coefficients");
  gen->add_flag("--shared-map", gd.snippets.shared_map,
                "nonlinear: view y reuses view x's map and draws (needs equal shapes)");
  gen->add_option("--shape-x", gd.shape_x, "nonlinear: view x shape CxHxW");
  gen->add_option("--shape-y", gd.shape_y, "nonlinear: view y shape CxHxW");
  gen->add_option("--valid-fraction", gd.snippets.valid_fraction, "nonlinear: fraction of pieces");
  gen->add_option("--test-fraction", gd.snippets.test_fraction, "nonlinear: fraction of pieces");
  gen->add_option("--n", gd.n, "linear: number of samples");
  gen->add_option("--corrs", gd.corrs, "linear: comma-separated canonical correlations in [0,1)");
  gen->add_option("--dx", gd.dx, "linear: view x dimension");
  gen->add_option("--dy", gd.dy, "linear: view y dimension");

  TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "Train both encoders and refit CCA");
  tr->add_option("--data", ta.data, "Dataset file (required)");
  tr->add_option("--out", ta.out, "Output checkpoint file (required)");
  tr->add_option("--epochs", ta.cfg.epochs, "Number of epochs");
  tr->add_option("--batch-size", ta.cfg.batch_size, "Minibatch size (>= h + 1)");
  tr->add_option("--lr0", ta.cfg.lr0, "Initial learning rate");
  tr->add_option("--momentum", ta.cfg.momentum, "Momentum in [0, 1)");
  tr->add_option("--halve-every", ta.cfg.halve_every, "Epochs between learning-rate halvings");
  tr->add_option("--eps", ta.cfg.eps, "Covariance ridge in the DCCA loss");
  tr->add_option("--embedding-dim", ta.cfg.h, "Embedding dimension h");
  tr->add_option("--arch", ta.cfg.arch, "Encoder preset: desk | full | mlp | linear");

  IndexArgs ia;
  CLI::App* ix = app.add_subcommand("index", "Embed one modality of a split into an index file");
  ix->add_option("--ckpt", ia.ckpt, "Checkpoint file (required)");
  ix->add_option("--data", ia.data, "Dataset file (required)");
  ix->add_option("--modality", ia.modality, "image (alias sheet) | audio");
  ix->add_option("--out", ia.out, "Output index file (required)");
  ix->add_option("--split", ia.split, "train | valid | test");
  ix->add_option("--limit", ia.limit, "Index only the first N snippets of the split (0 = all)");

  QueryArgs qa;
  CLI::App* qu = app.add_subcommand(
      "query", "Rank indexed snippets for one sample of the opposite modality");
  qu->add_option("--ckpt", qa.ckpt, "Checkpoint file (required)");
  qu->add_option("--index", qa.index, "Index file (required)");
  qu->add_option("--input", qa.input, "Sample file: whitespace-separated values, CxHxW order");
  qu->add_option("--data", qa.data, "Take the sample from this dataset instead of --input");
  qu->add_option("--row", qa.row, "Dataset row used with --data");
  qu->add_option("--k", qa.k, "Number of results");

  EvaluateArgs ea;
  CLI::App* ev = app.add_subcommand("evaluate", "Retrieval metrics R@1, R@5, R@10 and MR");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint file (required)");
  ev->add_option("--data", ea.data, "Dataset file (required)");
  ev->add_option("--direction", ea.direction, "audio2sheet | sheet2audio | both");
  ev->add_option("--split", ea.split, "train | valid | test");
  ev->add_option("--limit", ea.limit, "Use only the first N pairs of the split (0 = all)");
  ev->add_option("--tolerance", ea.tolerance,
                 "Also report relaxed metrics: same piece within this position gap (-1 = off)");

  app.footer(
      "Reports are `key=value` lines. evaluate prints, per direction:\n"
      "  direction=<audio2sheet|sheet2audio> r_at_1=<%> r_at_5=<%> r_at_10=<%> mr=<rank> m=<M>\n"
      "query prints k lines: rank snippet_id piece_id position distance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!g.config.empty()) apply_config(app, *sub, read_config_file(g.config));
    const std::string config = resolved_config(app, *sub);
    if (sub == gen) return run_gen_data(gd, g, config);
    if (sub == tr) return run_train(ta, g, config);
    if (sub == ix) return run_index(ia, g, config);
    if (sub == qu) return run_query(qa, g, config);
    return run_evaluate(ea, g, config);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
