#include "gare/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gare/json_fields.hpp"

namespace gare {

namespace {

enum Stream : std::uint64_t {
  kCenters = 1,
  kAxis = 2,
  kAssignment = 3,
  kCores = 4,
  kTextNoise = 5,
  kVideoNoise = 6,
  kSplit = 7,
};

Matrix unit_rows(RngStream& rng, std::size_t rows, std::size_t dim) {
  Matrix m = gaussian_sample(rng, rows, dim, 0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double n = l2_norm(m.row_span(r));
    for (auto& v : m.row_span(r)) v /= n;
  }
  return m;
}

Matrix pool(const Matrix& tokens, std::size_t per_item) {
  const std::size_t n = tokens.rows() / per_item;
  Matrix pooled(n, tokens.cols());
  for (std::size_t i = 0; i < n; ++i) {
    auto out = pooled.row_span(i);
    for (std::size_t l = 0; l < per_item; ++l) {
      auto tok = tokens.row_span(i * per_item + l);
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += tok[k];
    }
    for (auto& v : out) v /= static_cast<double>(per_item);
  }
  return pooled;
}

std::vector<std::uint8_t> mask_from_labels(std::span<const std::size_t> labels) {
  const std::size_t n = labels.size();
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = (i != j && labels[i] == labels[j]) ? 1 : 0;
  return mask;
}

std::string matrix_bytes(const Matrix& m) {
  std::ostringstream out(std::ios::binary);
  write_matrix(out, m);
  return out.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Matrix matrix_from_bytes(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_matrix(in);
}

}  // namespace

void SyntheticDatasetSpec::validate(const std::string& path) const {
  auto key = [&](const char* k) { return path.empty() ? std::string(k) : path + "." + k; };
  if (items == 0) throw ConfigError(key("N"), "must be positive");
  if (dim == 0) throw ConfigError(key("D"), "must be positive");
  if (text_tokens == 0) throw ConfigError(key("L_t"), "must be positive");
  if (video_tokens == 0) throw ConfigError(key("L_v"), "must be positive");
  if (clusters == 0 || clusters > items) throw ConfigError(key("K"), "must satisfy 1 <= K <= N");
  auto non_negative = [&](double v, const char* k) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(key(k), "must be finite and non-negative");
  };
  non_negative(gap_offset, "gap_offset");
  non_negative(cluster_spread, "cluster_spread");
  non_negative(noise_std, "noise_std");
  if (!(false_negative_rate >= 0.0 && false_negative_rate < 1.0)) {
    throw ConfigError(key("false_negative_rate"), "must lie in [0, 1)");
  }
}

PairedBatch Dataset::batch(std::span<const std::size_t> items) const {
  PairedBatch b;
  b.text_tokens_per_item = all.text_tokens_per_item;
  b.video_tokens_per_item = all.video_tokens_per_item;
  b.text = gather_rows(all.text, items);
  b.video = gather_rows(all.video, items);
  std::vector<std::size_t> text_rows;
  std::vector<std::size_t> video_rows;
  for (std::size_t item : items) {
    for (std::size_t l = 0; l < b.text_tokens_per_item; ++l)
      text_rows.push_back(item * b.text_tokens_per_item + l);
    for (std::size_t l = 0; l < b.video_tokens_per_item; ++l)
      video_rows.push_back(item * b.video_tokens_per_item + l);
    b.labels.push_back(all.labels.at(item));
  }
  b.text_tokens = gather_rows(all.text_tokens, text_rows);
  b.video_tokens = gather_rows(all.video_tokens, video_rows);
  b.false_negative = mask_from_labels(b.labels);
  return b;
}

Dataset generate(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const std::size_t n = spec.items;
  const std::size_t d = spec.dim;
  const RngStream root(spec.seed);

  // Cluster assignment.
  std::size_t shared = static_cast<std::size_t>(
      std::ceil(spec.false_negative_rate * static_cast<double>(n) - 1e-9));
  if (shared == 1) shared = n >= 2 ? 2 : 0;
  shared = std::min(shared, n);
  const std::size_t shared_clusters = shared >= 2 ? std::min(spec.clusters, shared / 2) : 0;
  if (shared_clusters == 0) shared = 0;

  RngStream assign_rng = root.split(kAssignment);
  const std::vector<std::size_t> order = permutation(assign_rng, n);
  std::vector<std::size_t> labels(n);
  for (std::size_t k = 0; k < n; ++k) {
    labels[order[k]] = k < shared ? k % shared_clusters : shared_clusters + (k - shared);
  }
  const std::size_t total_clusters = shared_clusters + (n - shared);

  RngStream center_rng = root.split(kCenters);
  const Matrix centers = unit_rows(center_rng, total_clusters, d);
  RngStream axis_rng = root.split(kAxis);
  const Matrix axis = unit_rows(axis_rng, 1, d);

  RngStream core_rng = root.split(kCores);
  const Matrix spread = gaussian_sample(core_rng, n, d, 0.0, 1.0);
  RngStream text_rng = root.split(kTextNoise);
  const Matrix text_noise = gaussian_sample(text_rng, n * spec.text_tokens, d, 0.0, 1.0);
  RngStream video_rng = root.split(kVideoNoise);
  const Matrix video_noise = gaussian_sample(video_rng, n * spec.video_tokens, d, 0.0, 1.0);

  Dataset data;
  data.spec = spec;
  PairedBatch& all = data.all;
  all.text_tokens_per_item = spec.text_tokens;
  all.video_tokens_per_item = spec.video_tokens;
  all.text_tokens = Matrix(n * spec.text_tokens, d);
  all.video_tokens = Matrix(n * spec.video_tokens, d);
  const double half_gap = 0.5 * spec.gap_offset;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> core(d);
    for (std::size_t k = 0; k < d; ++k) {
      core[k] = centers(labels[i], k) + spec.cluster_spread * spread(i, k);
    }
    for (std::size_t l = 0; l < spec.text_tokens; ++l) {
      const std::size_t r = i * spec.text_tokens + l;
      for (std::size_t k = 0; k < d; ++k) {
        all.text_tokens(r, k) = core[k] - half_gap * axis[k] + spec.noise_std * text_noise(r, k);
      }
    }
    for (std::size_t l = 0; l < spec.video_tokens; ++l) {
      const std::size_t r = i * spec.video_tokens + l;
      for (std::size_t k = 0; k < d; ++k) {
        all.video_tokens(r, k) = core[k] + half_gap * axis[k] + spec.noise_std * video_noise(r, k);
      }
    }
  }
  all.text = pool(all.text_tokens, spec.text_tokens);
  all.video = pool(all.video_tokens, spec.video_tokens);
  all.labels = labels;
  all.false_negative = mask_from_labels(labels);

  RngStream split_rng = root.split(kSplit);
  const std::vector<std::size_t> split_order = permutation(split_rng, n);
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  data.train.assign(split_order.begin(), split_order.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.test.assign(split_order.begin() + static_cast<std::ptrdiff_t>(n_train), split_order.end());
  std::sort(data.train.begin(), data.train.end());
  std::sort(data.test.begin(), data.test.end());
  return data;
}

ModalityStatistics modality_statistics(const PairedBatch& batch) {
  const std::size_t n = batch.size();
  const std::size_t d = batch.text.cols();
  std::vector<double> tc(d, 0.0), vc(d, 0.0);
  double matched = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      tc[k] += batch.text(i, k) / static_cast<double>(n);
      vc[k] += batch.video(i, k) / static_cast<double>(n);
    }
    matched += cosine(batch.text.row_span(i), batch.video.row_span(i));
  }
  return {cosine(tc, vc), matched / static_cast<double>(n)};
}

// ---- persistence -----------------------------------------------------------

nlohmann::json spec_to_json(const SyntheticDatasetSpec& spec) {
  return {{"N", spec.items},
          {"D", spec.dim},
          {"L_t", spec.text_tokens},
          {"L_v", spec.video_tokens},
          {"K", spec.clusters},
          {"gap_offset", spec.gap_offset},
          {"cluster_spread", spec.cluster_spread},
          {"noise_std", spec.noise_std},
          {"false_negative_rate", spec.false_negative_rate},
          {"seed", spec.seed}};
}

SyntheticDatasetSpec spec_from_json(const nlohmann::json& obj, const std::string& path) {
  SyntheticDatasetSpec spec;
  StrictObject o(obj, path);
  o.read_count("N", spec.items);
  o.read_count("D", spec.dim);
  o.read_count("L_t", spec.text_tokens);
  o.read_count("L_v", spec.video_tokens);
  o.read_count("K", spec.clusters);
  o.read("gap_offset", spec.gap_offset);
  o.read("cluster_spread", spec.cluster_spread);
  o.read("noise_std", spec.noise_std);
  o.read("false_negative_rate", spec.false_negative_rate);
  o.read_u64("seed", spec.seed);
  o.finish();
  spec.validate(path);
  return spec;
}

std::vector<std::pair<std::string, std::string>> serialize_dataset(const Dataset& data) {
  std::vector<std::pair<std::string, std::string>> files;
  files.emplace_back("spec.json", spec_to_json(data.spec).dump(2) + "\n");
  files.emplace_back("text_tokens.bin", matrix_bytes(data.all.text_tokens));
  files.emplace_back("video_tokens.bin", matrix_bytes(data.all.video_tokens));
  files.emplace_back("text_pooled.bin", matrix_bytes(data.all.text));
  files.emplace_back("video_pooled.bin", matrix_bytes(data.all.video));

  std::ostringstream labels;
  labels << "item,cluster\n";
  for (std::size_t i = 0; i < data.all.labels.size(); ++i) labels << i << ',' << data.all.labels[i] << '\n';
  files.emplace_back("labels.csv", labels.str());

  std::ostringstream split;
  split << "item,split\n";
  std::vector<const char*> which(data.all.size(), "train");
  for (std::size_t i : data.test) which[i] = "test";
  for (std::size_t i = 0; i < which.size(); ++i) split << i << ',' << which[i] << '\n';
  files.emplace_back("split.csv", split.str());

  files.emplace_back("mask.bin", std::string(data.all.false_negative.begin(),
                                             data.all.false_negative.end()));
  return files;
}

void save_dataset(const Dataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, bytes] : serialize_dataset(data)) {
    std::ofstream out(std::filesystem::path(dir) / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + name + " in " + dir);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory not found: " + dir);

  Dataset data;
  data.spec = spec_from_json(nlohmann::json::parse(read_file(root / "spec.json")));
  PairedBatch& all = data.all;
  all.text_tokens_per_item = data.spec.text_tokens;
  all.video_tokens_per_item = data.spec.video_tokens;
  all.text_tokens = matrix_from_bytes(read_file(root / "text_tokens.bin"));
  all.video_tokens = matrix_from_bytes(read_file(root / "video_tokens.bin"));
  all.text = matrix_from_bytes(read_file(root / "text_pooled.bin"));
  all.video = matrix_from_bytes(read_file(root / "video_pooled.bin"));
  const std::size_t n = data.spec.items;
  if (all.text.rows() != n || all.video.rows() != n ||
      all.text_tokens.rows() != n * data.spec.text_tokens ||
      all.video_tokens.rows() != n * data.spec.video_tokens) {
    throw FormatError("dataset matrices disagree with spec.json");
  }

  std::istringstream labels(read_file(root / "labels.csv"));
  std::string line;
  std::getline(labels, line);
  all.labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(labels, line)) throw FormatError("labels.csv truncated");
    const auto comma = line.find(',');
    if (comma == std::string::npos || std::stoul(line.substr(0, comma)) != i) {
      throw FormatError("labels.csv malformed at line " + std::to_string(i + 2));
    }
    all.labels[i] = std::stoul(line.substr(comma + 1));
  }

  std::istringstream split(read_file(root / "split.csv"));
  std::getline(split, line);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(split, line)) throw FormatError("split.csv truncated");
    (line.ends_with("test") ? data.test : data.train).push_back(i);
  }

  const std::string mask = read_file(root / "mask.bin");
  all.false_negative.assign(mask.begin(), mask.end());
  if (all.false_negative != mask_from_labels(all.labels)) {
    throw FormatError("mask.bin disagrees with labels.csv");
  }
  return data;
}

std::string dataset_hash(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](std::string_view bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [name, bytes] : serialize_dataset(data)) {
    feed(name);
    feed(bytes);
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

// ---- retrieval -------------------------------------------------------------

std::vector<std::size_t> diagonal_ranks(const Matrix& s, SoftmaxAxis axis) {
  if (s.rows() != s.cols()) throw ShapeError("diagonal_ranks: matrix is not square");
  const std::size_t n = s.rows();
  std::vector<std::size_t> ranks(n);
  for (std::size_t q = 0; q < n; ++q) {
    auto score = [&](std::size_t k) { return axis == SoftmaxAxis::rows ? s(q, k) : s(k, q); };
    const double target = score(q);
    std::size_t rank = 1;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == q) continue;
      const double v = score(k);
      if (v > target || (v == target && k < q)) ++rank;
    }
    ranks[q] = rank;
  }
  return ranks;
}

DirectionMetrics summarize_ranks(std::span<const std::size_t> ranks) {
  DirectionMetrics m;
  if (ranks.empty()) return m;
  const double n = static_cast<double>(ranks.size());
  std::vector<std::size_t> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (std::size_t r : sorted) {
    total += static_cast<double>(r);
    if (r <= 1) m.r1 += 1.0;
    if (r <= 5) m.r5 += 1.0;
    if (r <= 10) m.r10 += 1.0;
  }
  m.r1 *= 100.0 / n;
  m.r5 *= 100.0 / n;
  m.r10 *= 100.0 / n;
  const std::size_t mid = sorted.size() / 2;
  m.median_rank = sorted.size() % 2 == 1
                      ? static_cast<double>(sorted[mid])
                      : 0.5 * static_cast<double>(sorted[mid - 1] + sorted[mid]);
  m.mean_rank = total / n;
  return m;
}

RetrievalMetrics retrieval_metrics(const SimilarityMatrix& sim) {
  return {summarize_ranks(diagonal_ranks(sim.s, SoftmaxAxis::rows)),
          summarize_ranks(diagonal_ranks(sim.s, SoftmaxAxis::columns))};
}

}  // namespace gare
