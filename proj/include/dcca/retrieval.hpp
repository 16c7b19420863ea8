#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dcca/binary_io.hpp"
#include "dcca/cca.hpp"
#include "dcca/dataset.hpp"
#include "dcca/encoder.hpp"
#include "dcca/trainer.hpp"

namespace dcca {

/// Image snippets are view x, audio excerpts are view y.
enum class Modality : std::uint8_t { kImage = 0, kAudio = 1 };

inline std::string_view to_string(Modality m) { return m == Modality::kImage ? "image" : "audio"; }

inline Modality parse_modality(std::string_view name) {
  if (name == "image" || name == "sheet") return Modality::kImage;
  if (name == "audio") return Modality::kAudio;
  fail(ErrorCode::kRange, "unknown modality '" + std::string(name) + "' (image, audio)");
}

/// 1 - a·b / (|a||b|), clamped to [0, 2].
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::kDimension, "cosine_distance length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  require(aa > 0.0 && bb > 0.0, ErrorCode::kDegenerateVector, "cosine distance of a zero vector");
  const double d = 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
  return std::clamp(d, 0.0, 2.0);
}

struct SnippetRecord {
  std::uint64_t snippet_id = 0;
  std::uint64_t piece_id = 0;
  std::uint64_t position = 0;
  Vector embedding;
  friend bool operator==(const SnippetRecord&, const SnippetRecord&) = default;
};

struct SnippetIndex {
  Modality modality = Modality::kImage;
  std::size_t h = 0;
  std::vector<SnippetRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  friend bool operator==(const SnippetIndex&, const SnippetIndex&) = default;
};

struct RankedHit {
  std::uint64_t snippet_id = 0;
  double distance = 0.0;
  friend bool operator==(const RankedHit&, const RankedHit&) = default;
};

struct RankingResult {
  std::vector<RankedHit> hits;      // ascending distance, then ascending id
  std::size_t rank_of_target = 0;  // 1-based; 0 when no target was given
};

/// Embeds rows of `snippets` with the encoder and the matching side of the CCA
/// model. ids[i] and meta[i] describe row i.
inline SnippetIndex build_index(const Encoder& enc, const CcaModel& cca, Modality modality,
                                const Matrix& snippets, std::span<const std::uint64_t> ids,
                                std::span<const SampleMeta> meta) {
  require(snippets.rows() >= 1, ErrorCode::kEmptyDataset, "index needs at least one snippet");
  require(ids.size() == snippets.rows() && meta.size() == snippets.rows(), ErrorCode::kDimension,
          "ids and metadata must match the snippet count");
  const Matrix features = enc.infer(snippets);
  const Matrix emb = modality == Modality::kImage ? project_x(cca, features)
                                                  : project_y(cca, features);
  std::vector<std::uint64_t> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorCode::kPrecondition,
          "snippet ids must be unique");
  SnippetIndex index;
  index.modality = modality;
  index.h = emb.cols();
  index.records.resize(emb.rows());
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    auto& rec = index.records[i];
    rec.snippet_id = ids[i];
    rec.piece_id = meta[i].piece_id;
    rec.position = meta[i].position;
    rec.embedding.assign(emb.row(i).begin(), emb.row(i).end());
    require(std::all_of(rec.embedding.begin(), rec.embedding.end(),
                        [](double v) { return std::isfinite(v); }),
            ErrorCode::kNumeric, "non-finite embedding");
  }
  return index;
}

/// Index over `rows` of a dataset; snippet ids are dataset row numbers.
inline SnippetIndex build_index(const Checkpoint& ckpt, const MultiViewDataset& ds,
                                Modality modality, std::span<const std::size_t> rows) {
  const Encoder& enc = modality == Modality::kImage ? ckpt.enc_x : ckpt.enc_y;
  const Matrix& view = modality == Modality::kImage ? ds.x : ds.y;
  std::vector<std::uint64_t> ids(rows.begin(), rows.end());
  std::vector<SampleMeta> meta;
  meta.reserve(rows.size());
  for (std::size_t r : rows) meta.push_back(ds.meta[r]);
  return build_index(enc, ckpt.cca, modality, view.gather_rows(rows), ids, meta);
}

namespace detail {

inline bool hit_before(const RankedHit& a, const RankedHit& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.snippet_id < b.snippet_id);
}

}  // namespace detail

/// Exhaustive scan: top-k by ascending cosine distance, ties by ascending
/// snippet id. With a target id, also reports its 1-based rank among all M.
inline RankingResult query(const SnippetIndex& index, std::span<const double> q, std::size_t k,
                           std::optional<std::uint64_t> target = std::nullopt) {
  const std::size_t m = index.size();
  require(k >= 1 && k <= m, ErrorCode::kBounds,
          "k=" + std::to_string(k) + " outside [1, M=" + std::to_string(m) + "]");
  require(q.size() == index.h, ErrorCode::kDimension,
          "query has length " + std::to_string(q.size()) + ", index h=" + std::to_string(index.h));
  std::vector<RankedHit> all(m);
  for (std::size_t i = 0; i < m; ++i)
    all[i] = {index.records[i].snippet_id, cosine_distance(q, index.records[i].embedding)};

  RankingResult result;
  if (target) {
    const auto it = std::find_if(all.begin(), all.end(),
                                 [&](const RankedHit& h) { return h.snippet_id == *target; });
    require(it != all.end(), ErrorCode::kRange, "target snippet is not in the index");
    const RankedHit t = *it;
    result.rank_of_target =
        1 + static_cast<std::size_t>(std::count_if(all.begin(), all.end(), [&](const RankedHit& h) {
          return detail::hit_before(h, t);
        }));
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    detail::hit_before);
  all.resize(k);
  result.hits = std::move(all);
  return result;
}

/// Percentage of ranks that are <= k.
inline double recall_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  require(!ranks.empty(), ErrorCode::kRange, "recall_at_k needs at least one rank");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](std::size_t r) { return r <= k; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

/// Lower median: element ⌈n/2⌉ (1-based) of the sorted ranks.
inline std::size_t median_rank(std::span<const std::size_t> ranks) {
  require(!ranks.empty(), ErrorCode::kRange, "median_rank needs at least one rank");
  std::vector<std::size_t> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  return sorted[(sorted.size() + 1) / 2 - 1];
}

enum class Direction { kAudioToSheet, kSheetToAudio };

inline std::string_view to_string(Direction d) {
  return d == Direction::kAudioToSheet ? "audio2sheet" : "sheet2audio";
}

inline Direction parse_direction(std::string_view name) {
  if (name == "audio2sheet") return Direction::kAudioToSheet;
  if (name == "sheet2audio") return Direction::kSheetToAudio;
  fail(ErrorCode::kRange, "unknown direction '" + std::string(name) +
                              "' (audio2sheet, sheet2audio, both)");
}

struct RetrievalMetrics {
  Direction direction = Direction::kAudioToSheet;
  double r_at_1 = 0.0;
  double r_at_5 = 0.0;
  double r_at_10 = 0.0;
  std::size_t mr = 0;
  std::size_t m = 0;
  bool clipped = false;  // the requested limit exceeded the split size
  // Filled when a position tolerance is given: any snippet of the same piece
  // within the tolerance counts as a hit.
  std::optional<double> relaxed_r_at_1;
  std::optional<std::size_t> relaxed_mr;
};

/// Ranks of each query's true partner for precomputed embeddings. Row i of
/// `queries` pairs with record i of `index`.
inline std::vector<std::size_t> target_ranks(const SnippetIndex& index, const Matrix& queries) {
  std::vector<std::size_t> ranks(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i)
    ranks[i] = query(index, queries.row(i), 1, index.records[i].snippet_id).rank_of_target;
  return ranks;
}

inline RetrievalMetrics evaluate_retrieval(const Checkpoint& ckpt, const MultiViewDataset& ds,
                                           Split split, Direction direction,
                                           std::size_t limit = 0,
                                           std::optional<std::uint64_t> tolerance = std::nullopt) {
  std::vector<std::size_t> rows = ds.indices(split);
  require(rows.size() >= 2, ErrorCode::kEmptyDataset,
          "split '" + std::string(to_string(split)) + "' has fewer than 2 pairs");
  RetrievalMetrics out;
  out.direction = direction;
  if (limit != 0 && limit < rows.size()) rows.resize(limit);
  out.clipped = limit > rows.size();

  const Modality target = direction == Direction::kAudioToSheet ? Modality::kImage
                                                                : Modality::kAudio;
  const SnippetIndex index = build_index(ckpt, ds, target, rows);
  const Matrix queries =
      target == Modality::kImage
          ? project_y(ckpt.cca, ckpt.enc_y.infer(ds.y.gather_rows(rows)))
          : project_x(ckpt.cca, ckpt.enc_x.infer(ds.x.gather_rows(rows)));
  const std::vector<std::size_t> ranks = target_ranks(index, queries);
  out.m = rows.size();
  out.r_at_1 = recall_at_k(ranks, 1);
  out.r_at_5 = recall_at_k(ranks, 5);
  out.r_at_10 = recall_at_k(ranks, 10);
  out.mr = median_rank(ranks);

  if (tolerance) {
    std::unordered_map<std::uint64_t, std::size_t> slot;
    for (std::size_t i = 0; i < index.size(); ++i) slot[index.records[i].snippet_id] = i;
    std::vector<std::size_t> relaxed(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const SnippetRecord& truth = index.records[i];
      const RankingResult all = query(index, queries.row(i), index.size());
      for (std::size_t r = 0; r < all.hits.size(); ++r) {
        const SnippetRecord& rec = index.records[slot.at(all.hits[r].snippet_id)];
        const std::uint64_t gap = rec.position > truth.position ? rec.position - truth.position
                                                                : truth.position - rec.position;
        if (rec.piece_id == truth.piece_id && gap <= *tolerance) {
          relaxed[i] = r + 1;
          break;
        }
      }
    }
    out.relaxed_r_at_1 = recall_at_k(relaxed, 1);
    out.relaxed_mr = median_rank(relaxed);
  }
  return out;
}

/// One `key=value` line; field order is fixed.
inline std::string format_metrics(const RetrievalMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "direction=%s r_at_1=%.2f r_at_5=%.2f r_at_10=%.2f mr=%zu m=%zu",
                std::string(to_string(m.direction)).c_str(), m.r_at_1, m.r_at_5, m.r_at_10, m.mr,
                m.m);
  std::string line = buf;
  if (m.relaxed_r_at_1) {
    std::snprintf(buf, sizeof buf, " relaxed_r_at_1=%.2f relaxed_mr=%zu", *m.relaxed_r_at_1,
                  *m.relaxed_mr);
    line += buf;
  }
  return line;
}

namespace detail {

inline constexpr std::string_view kIndexMagic = "DCIX";
inline constexpr std::uint16_t kIndexVersion = 1;

}  // namespace detail

inline std::string serialize_index(const SnippetIndex& index) {
  require(index.size() <= UINT32_MAX && index.h <= UINT32_MAX, ErrorCode::kRange,
          "index too large for the file format");
  io::Writer w;
  w.raw(detail::kIndexMagic);
  w.u16(detail::kIndexVersion);
  w.u32(static_cast<std::uint32_t>(index.size()));
  w.u32(static_cast<std::uint32_t>(index.h));
  w.u8(static_cast<std::uint8_t>(index.modality));
  for (const auto& rec : index.records) {
    require(rec.embedding.size() == index.h, ErrorCode::kDimension, "record length != h");
    w.u64(rec.snippet_id);
    w.u64(rec.piece_id);
    w.u64(rec.position);
    for (double v : rec.embedding) w.f64(v);
  }
  const std::uint32_t crc = io::crc32(w.bytes());
  w.u32(crc);
  return w.take();
}

inline SnippetIndex deserialize_index(std::string_view bytes, const std::string& what = "index") {
  require(bytes.size() >= 4, ErrorCode::kFormat, what + ": truncated");
  io::Reader r(bytes, what);
  r.magic(detail::kIndexMagic);
  const std::uint16_t version = r.u16();
  require(version == detail::kIndexVersion, ErrorCode::kVersion,
          what + ": unsupported version " + std::to_string(version));
  SnippetIndex index;
  const std::uint32_t m = r.u32();
  index.h = r.u32();
  const std::uint8_t modality = r.u8();
  require(modality <= 1, ErrorCode::kFormat, what + ": unknown modality tag");
  index.modality = static_cast<Modality>(modality);
  const std::uint64_t record_bytes = 24 + 8 * static_cast<std::uint64_t>(index.h);
  require(r.remaining() >= 4 && (r.remaining() - 4) % record_bytes == 0 &&
              (r.remaining() - 4) / record_bytes == m,
          ErrorCode::kFormat,
          what + ": size does not match header");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  io::Reader tail(bytes.substr(bytes.size() - 4), what);
  require(tail.u32() == io::crc32(body), ErrorCode::kChecksum, what + ": checksum mismatch");
  index.records.resize(m);
  for (auto& rec : index.records) {
    rec.snippet_id = r.u64();
    rec.piece_id = r.u64();
    rec.position = r.u64();
    rec.embedding.resize(index.h);
    for (double& v : rec.embedding) v = r.f64();
  }
  r.u32();
  r.expect_end();
  require(m >= 1 && index.h >= 1, ErrorCode::kFormat, what + ": empty index");
  std::unordered_set<std::uint64_t> ids;
  for (const auto& rec : index.records)
    require(ids.insert(rec.snippet_id).second, ErrorCode::kFormat,
            what + ": duplicate snippet_id " + std::to_string(rec.snippet_id));
  return index;
}

inline void save_index(const SnippetIndex& index, const std::filesystem::path& path) {
  io::write_file(path, serialize_index(index));
}

inline SnippetIndex load_index(const std::filesystem::path& path) {
  return deserialize_index(io::read_file(path), path.string());
}

}  // namespace dcca
