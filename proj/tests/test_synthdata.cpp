#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "gare/json_fields.hpp"
#include "gare/synthdata.hpp"
#include "helpers.hpp"

using namespace gare;

namespace {

SyntheticDatasetSpec small_spec() {
  SyntheticDatasetSpec s;
  s.items = 60;
  s.dim = 8;
  s.clusters = 12;
  s.seed = 5;
  return s;
}

// Rank of the diagonal by sorting competitors (score desc, index asc).
std::size_t sorted_rank(const Matrix& s, std::size_t q, bool by_row) {
  std::vector<std::pair<double, std::size_t>> scores;
  for (std::size_t c = 0; c < s.rows(); ++c) scores.push_back({by_row ? s(q, c) : s(c, q), c});
  std::sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t r = 0; r < scores.size(); ++r)
    if (scores[r].second == q) return r + 1;
  return 0;
}

}  // namespace

TEST_CASE("gapless noiseless limit") {
  SyntheticDatasetSpec s = small_spec();
  s.gap_offset = 0.0;
  s.noise_std = 0.0;
  s.cluster_spread = 0.0;
  const Dataset d = generate(s);
  CHECK(d.all.text == d.all.video);
  CHECK(modality_statistics(d.all).matched_pair_cosine == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("a wide gap separates the modality centroids") {
  SyntheticDatasetSpec s;
  s.gap_offset = 4.0;
  s.dim = 32;
  s.noise_std = 0.1;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    s.seed = seed;
    CHECK(modality_statistics(generate(s).all).centroid_cosine < 0.5);
  }
}

TEST_CASE("matched cosine does not increase with the gap") {
  SyntheticDatasetSpec s = small_spec();
  double previous = 2.0;
  for (double g : {0.0, 1.0, 2.0, 4.0}) {
    s.gap_offset = g;
    const double c = modality_statistics(generate(s).all).matched_pair_cosine;
    CHECK(c <= previous);
    previous = c;
  }
}

TEST_CASE("pooled embeddings are token means") {
  const Dataset d = generate(small_spec());
  const PairedBatch& b = d.all;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t k = 0; k < 8; ++k) {
      double t = 0.0, v = 0.0;
      for (std::size_t l = 0; l < 4; ++l) {
        t += b.text_tokens(i * 4 + l, k);
        v += b.video_tokens(i * 4 + l, k);
      }
      CHECK(std::abs(t / 4 - b.text(i, k)) <= 1e-12);
      CHECK(std::abs(v / 4 - b.video(i, k)) <= 1e-12);
    }
}

TEST_CASE("false-negative mask matches the clusters") {
  for (double rate : {0.0, 0.2, 0.5, 0.95}) {
    SyntheticDatasetSpec s = small_spec();
    s.false_negative_rate = rate;
    const Dataset d = generate(s);
    const PairedBatch& b = d.all;
    std::size_t shared = 0;
    std::map<std::size_t, std::size_t> members;
    for (std::size_t c : b.labels) ++members[c];
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (members[b.labels[i]] > 1) ++shared;
      CHECK_FALSE(b.is_false_negative(i, i));
      for (std::size_t j = 0; j < b.size(); ++j)
        CHECK(b.is_false_negative(i, j) == (i != j && b.labels[i] == b.labels[j]));
    }
    const auto want = static_cast<std::size_t>(std::ceil(rate * 60.0));
    CHECK(shared == (want == 1 ? 2 : want));
    if (rate == 0.0) {
      for (auto f : b.false_negative) CHECK(f == 0);
    }
  }
}

TEST_CASE("train and test split") {
  const Dataset d = generate(small_spec());
  CHECK(d.train.size() == 48);
  CHECK(d.test.size() == 12);
  CHECK(std::is_sorted(d.train.begin(), d.train.end()));
  std::set<std::size_t> all(d.train.begin(), d.train.end());
  all.insert(d.test.begin(), d.test.end());
  CHECK(all.size() == 60);

  const PairedBatch sub = d.batch(d.test);
  CHECK(sub.size() == 12);
  CHECK(sub.text.row_vector(3) == d.all.text.row_vector(d.test[3]));
  CHECK(sub.video_tokens.row_vector(5) == d.all.video_tokens.row_vector(d.test[1] * 4 + 1));
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j)
      CHECK(sub.is_false_negative(i, j) == d.all.is_false_negative(d.test[i], d.test[j]));
}

TEST_CASE("generation is deterministic per seed") {
  const SyntheticDatasetSpec s = small_spec();
  const Dataset a = generate(s), b = generate(s);
  CHECK(serialize_dataset(a) == serialize_dataset(b));
  CHECK(dataset_hash(a) == dataset_hash(b));
  SyntheticDatasetSpec other = s;
  other.seed = 6;
  CHECK(dataset_hash(generate(other)) != dataset_hash(a));
}

TEST_CASE("dataset directory round trip") {
  const Dataset d = generate(small_spec());
  test::TempDir dir("data");
  save_dataset(d, dir.str());
  for (const char* f : {"spec.json", "text_tokens.bin", "video_tokens.bin", "text_pooled.bin",
                        "video_pooled.bin", "labels.csv", "split.csv", "mask.bin"})
    CHECK(std::filesystem::exists(dir.path() / f));
  const Dataset back = load_dataset(dir.str());
  CHECK(dataset_hash(back) == dataset_hash(d));
  CHECK(back.all.text == d.all.text);
  CHECK(back.train == d.train);

  // A tampered mask is detected.
  std::string mask = test::read_file(dir.path() / "mask.bin");
  mask.back() = static_cast<char>(mask.back() ^ 1);
  test::write_file(dir.path() / "mask.bin", mask);
  CHECK_THROWS(load_dataset(dir.str()));
}

TEST_CASE("generator settings are validated") {
  SyntheticDatasetSpec s = small_spec();
  s.gap_offset = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.clusters = 61;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.false_negative_rate = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);

  nlohmann::json j = spec_to_json(small_spec());
  CHECK(spec_from_json(j).seed == 5);
  j["gap"] = 1.0;
  try {
    spec_from_json(j, "data");
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "data.gap");
  }
}

TEST_CASE("retrieval metrics examples") {
  const SimilarityMatrix ident{Matrix::identity(6), 0.01};
  const RetrievalMetrics perfect = retrieval_metrics(ident);
  CHECK(perfect.text_to_video.r1 == 100.0);
  CHECK(perfect.text_to_video.median_rank == 1.0);
  CHECK(perfect.text_to_video.mean_rank == 1.0);
  CHECK(perfect.video_to_text.r1 == 100.0);

  Matrix anti(10, 10);
  for (std::size_t i = 0; i < 10; ++i) anti(i, 9 - i) = 1.0;
  const RetrievalMetrics worst = retrieval_metrics({anti, 0.01});
  CHECK(worst.text_to_video.r1 == 0.0);
  CHECK(worst.video_to_text.r1 == 0.0);

  Matrix odd(5, 5);
  for (std::size_t i = 0; i < 5; ++i) odd(i, 4 - i) = 1.0;
  CHECK(retrieval_metrics({odd, 0.01}).text_to_video.r1 == 20.0);
}

TEST_CASE("retrieval metrics match a sort-based oracle") {
  RngStream rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix s = gaussian_sample(rng, 4, 4, 0.0, 1.0);
    if (trial % 5 == 0) s(1, 2) = s(1, 1);  // exercise ties
    const RetrievalMetrics m = retrieval_metrics({s, 0.01});
    for (bool by_row : {true, false}) {
      std::vector<std::size_t> ranks;
      for (std::size_t q = 0; q < 4; ++q) ranks.push_back(sorted_rank(s, q, by_row));
      CHECK(diagonal_ranks(s, by_row ? SoftmaxAxis::rows : SoftmaxAxis::columns) == ranks);
      std::vector<std::size_t> sorted = ranks;
      std::sort(sorted.begin(), sorted.end());
      const DirectionMetrics& d = by_row ? m.text_to_video : m.video_to_text;
      double r1 = 0, r5 = 0, mean = 0;
      for (std::size_t r : ranks) {
        r1 += r <= 1;
        r5 += r <= 5;
        mean += static_cast<double>(r);
      }
      CHECK(d.r1 == doctest::Approx(100.0 * r1 / 4));
      CHECK(d.r5 == doctest::Approx(100.0 * r5 / 4));
      CHECK(d.r10 == 100.0);
      CHECK(d.mean_rank == doctest::Approx(mean / 4));
      CHECK(d.median_rank == doctest::Approx(0.5 * static_cast<double>(sorted[1] + sorted[2])));
    }
  }
}

TEST_CASE("ties go to the lower competitor index") {
  const Matrix flat(3, 3, 0.5);
  CHECK(diagonal_ranks(flat, SoftmaxAxis::rows) == std::vector<std::size_t>{1, 2, 3});
  CHECK(diagonal_ranks(flat, SoftmaxAxis::columns) == std::vector<std::size_t>{1, 2, 3});
}
