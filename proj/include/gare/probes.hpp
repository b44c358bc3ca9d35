// Geometry probes over a batch and its increments: per-pair angles, norms and
// distances, their aggregates and fixed-bin histograms, and hypersphere
// alignment / uniformity.
//
// Names follow text-side injection (t_delta = t_i + delta_ij). With video-side
// injection the roles swap: the perturbed row is v_j + delta_ij, "t" fields
// describe v_j and the gap is t_i - v_j.

#ifndef GARE_PROBES_HPP
#define GARE_PROBES_HPP

#include <cstddef>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gare/increments.hpp"
#include "gare/synthdata.hpp"
#include "gare/tensorcore.hpp"

namespace gare {

/// arccos of the clamped cosine, in [0, pi]. DomainError on degenerate input.
double angle(std::span<const double> a, std::span<const double> b);

struct ProbeConfig {
  std::size_t bins = 64;
  /// Snapshot after every training step instead of once per epoch.
  bool every_step = false;
};

struct PairRecord {
  std::size_t i = 0;
  std::size_t j = 0;
  bool is_positive = false;
  bool is_false_negative = false;
  /// NaN when ||delta_ij|| is at or below kNormFloor (or the gap vanishes).
  double angle_delta_gap = std::numeric_limits<double>::quiet_NaN();
  double angle_delta_anchor = std::numeric_limits<double>::quiet_NaN();
  double norm_t = 0.0;
  double norm_t_delta = 0.0;
  double dist = 0.0;        // ||t - v||
  double dist_delta = 0.0;  // ||t_delta - v||
  double cos_delta = 0.0;   // cos(t_delta, v)
  double norm_delta = 0.0;
};

struct FieldAggregate {
  std::string field;
  std::size_t count = 0;  // defined values
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  double lo = 0.0;  // histogram range, locked when the snapshot is taken
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

struct GeometryReport {
  std::vector<PairRecord> pairs;
  std::vector<FieldAggregate> aggregates;

  const FieldAggregate& aggregate(const std::string& field) const;
};

/// Names of the aggregated per-pair fields, in report order.
const std::vector<std::string>& geometry_fields();

GeometryReport geometry_snapshot(const PairedBatch& batch, const IncrementTensor& delta,
                                 const IncrementConfig& cfg, const ProbeConfig& probe = {});

struct AlignmentUniformity {
  double alignment = 0.0;  // mean_i ||t^_i - v^_i||^2
  double uniformity_text = 0.0;
  double uniformity_video = 0.0;
  double uniformity = 0.0;  // mean of the two
};

/// On L2-normalized rows. Uniformity of one modality is
/// log mean_{i<k} exp(-2 ||x^_i - x^_k||^2). Requires B >= 2.
AlignmentUniformity alignment_uniformity(const Matrix& text, const Matrix& video);

/// pairs.csv: one row per pair; undefined angles are left empty.
void write_pairs_csv(std::ostream& out, const GeometryReport& report);
/// Header line for aggregate rows; `prefix` columns come first.
void write_aggregates_header(std::ostream& out, const std::string& prefix, std::size_t bins);
void write_aggregates_rows(std::ostream& out, const std::string& prefix_values,
                           const GeometryReport& report);

}  // namespace gare

#endif  // GARE_PROBES_HPP
