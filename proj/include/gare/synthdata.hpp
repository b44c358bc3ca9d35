// Synthetic paired text/video embeddings with a controllable modality gap and
// a controllable share of false negatives, plus retrieval metrics.
//
// Every item i has a semantic core (its cluster center plus spread noise).
// Its text tokens are core - (g/2) u + noise and its video tokens are
// core + (g/2) u + noise for one fixed unit axis u; pooled embeddings are the
// token means. ceil(rate * N) items are spread over min(K, shared/2) shared
// clusters (each shared cluster gets at least two members); all remaining
// items sit alone in clusters of their own. Same-cluster off-diagonal pairs
// are the false negatives.

#ifndef GARE_SYNTHDATA_HPP
#define GARE_SYNTHDATA_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gare/contrastive.hpp"
#include "gare/tensorcore.hpp"

namespace gare {

struct SyntheticDatasetSpec {
  std::size_t items = 512;           // N
  std::size_t dim = 32;              // D
  std::size_t text_tokens = 4;       // L_t
  std::size_t video_tokens = 4;      // L_v
  std::size_t clusters = 64;         // K
  double gap_offset = 3.0;           // g
  double cluster_spread = 0.1;
  double noise_std = 0.1;
  double false_negative_rate = 0.2;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field under `path`.
  void validate(const std::string& path = "") const;
};

/// B items with their tokens, pooled embeddings and ground-truth structure.
struct PairedBatch {
  std::size_t text_tokens_per_item = 0;
  std::size_t video_tokens_per_item = 0;
  Matrix text_tokens;   // (B*L_t) x D, item-major
  Matrix video_tokens;  // (B*L_v) x D
  Matrix text;          // B x D, mean of each item's text tokens
  Matrix video;         // B x D
  std::vector<std::size_t> labels;
  /// B x B row-major; 1 where i != j and the clusters match.
  std::vector<std::uint8_t> false_negative;

  std::size_t size() const noexcept { return text.rows(); }
  bool is_false_negative(std::size_t i, std::size_t j) const {
    return false_negative[i * size() + j] != 0;
  }
};

struct Dataset {
  SyntheticDatasetSpec spec;
  PairedBatch all;
  std::vector<std::size_t> train;  // item ids, ascending
  std::vector<std::size_t> test;

  PairedBatch batch(std::span<const std::size_t> items) const;
};

Dataset generate(const SyntheticDatasetSpec& spec);

/// Diagnostics computed directly from the generated pooled embeddings.
struct ModalityStatistics {
  double centroid_cosine = 0.0;      // cos(mean t, mean v)
  double matched_pair_cosine = 0.0;  // mean_i cos(t_i, v_i)
};
ModalityStatistics modality_statistics(const PairedBatch& batch);

// ---- persistence -----------------------------------------------------------

nlohmann::json spec_to_json(const SyntheticDatasetSpec& spec);
/// Strict parse: unknown keys and out-of-domain values raise ConfigError
/// naming the key (prefixed by `path`).
SyntheticDatasetSpec spec_from_json(const nlohmann::json& obj, const std::string& path = "");

/// File name -> bytes, in the order they are written and hashed.
std::vector<std::pair<std::string, std::string>> serialize_dataset(const Dataset& data);
void save_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& dir);
/// FNV-1a 64 over the serialized files, as 16 hex digits.
std::string dataset_hash(const Dataset& data);

// ---- retrieval -------------------------------------------------------------

struct DirectionMetrics {
  double r1 = 0.0;  // percent of queries whose match ranks <= 1
  double r5 = 0.0;
  double r10 = 0.0;
  double median_rank = 0.0;
  double mean_rank = 0.0;
};

struct RetrievalMetrics {
  DirectionMetrics text_to_video;
  DirectionMetrics video_to_text;
};

/// 1-based rank of the diagonal entry within its row (text->video) or column
/// (video->text). Ties go to the lower competitor index.
std::vector<std::size_t> diagonal_ranks(const Matrix& s, SoftmaxAxis axis);
RetrievalMetrics retrieval_metrics(const SimilarityMatrix& sim);
DirectionMetrics summarize_ranks(std::span<const std::size_t> ranks);

}  // namespace gare

#endif  // GARE_SYNTHDATA_HPP
