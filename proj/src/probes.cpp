#include "gare/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace gare {

namespace {

bool defined(double v) { return !std::isnan(v); }

std::string cell(double v) { return defined(v) ? format_double(v) : std::string(); }

double field_value(const PairRecord& r, std::size_t k) {
  switch (k) {
    case 0: return r.angle_delta_gap;
    case 1: return r.angle_delta_anchor;
    case 2: return r.norm_t;
    case 3: return r.norm_t_delta;
    case 4: return r.dist;
    case 5: return r.dist_delta;
    case 6: return r.cos_delta;
    default: return r.norm_delta;
  }
}

FieldAggregate summarize(const std::vector<PairRecord>& pairs, std::size_t k,
                         const std::string& name, std::size_t bins) {
  FieldAggregate agg;
  agg.field = name;
  std::vector<double> values;
  for (const auto& r : pairs) {
    const double v = field_value(r, k);
    if (defined(v)) values.push_back(v);
  }
  agg.count = values.size();
  if (k <= 1) {
    agg.lo = 0.0;
    agg.hi = std::numbers::pi;
  } else if (k == 6) {
    agg.lo = -1.0;
    agg.hi = 1.0;
  } else {
    agg.lo = 0.0;
    agg.hi = values.empty() ? 1.0 : *std::max_element(values.begin(), values.end());
    if (!(agg.hi > 0.0)) agg.hi = 1.0;
  }
  agg.counts.assign(bins, 0);
  if (values.empty()) return agg;

  double sum = 0.0;
  for (double v : values) sum += v;
  agg.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - agg.mean) * (v - agg.mean);
  agg.std = std::sqrt(sq / static_cast<double>(values.size()));

  const double width = (agg.hi - agg.lo) / static_cast<double>(bins);
  for (double v : values) {
    auto bin = static_cast<std::ptrdiff_t>(std::floor((v - agg.lo) / width));
    bin = std::clamp<std::ptrdiff_t>(bin, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    ++agg.counts[static_cast<std::size_t>(bin)];
  }
  return agg;
}

double uniformity_of(const Matrix& x) {
  const std::size_t n = x.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = i + 1; k < n; ++k) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double diff = x(i, c) - x(k, c);
        d2 += diff * diff;
      }
      total += std::exp(-2.0 * d2);
    }
  }
  const double count = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  return std::log(total / count);
}

Matrix normalized(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double n = l2_norm(out.row_span(r));
    if (n <= kNormFloor) throw DomainError("alignment_uniformity: zero-norm row");
    for (auto& v : out.row_span(r)) v /= n;
  }
  return out;
}

}  // namespace

double angle(std::span<const double> a, std::span<const double> b) {
  return std::acos(std::clamp(cosine(a, b), -1.0, 1.0));
}

const std::vector<std::string>& geometry_fields() {
  static const std::vector<std::string> names = {
      "angle_delta_gap", "angle_delta_anchor", "norm_t",    "norm_t_delta",
      "dist",            "dist_delta",         "cos_delta", "norm_delta"};
  return names;
}

const FieldAggregate& GeometryReport::aggregate(const std::string& field) const {
  for (const auto& a : aggregates)
    if (a.field == field) return a;
  throw std::out_of_range("GeometryReport: no field " + field);
}

GeometryReport geometry_snapshot(const PairedBatch& batch, const IncrementTensor& delta,
                                 const IncrementConfig& cfg, const ProbeConfig& probe) {
  const std::size_t b = batch.size();
  const std::size_t d = batch.text.cols();
  if (delta.batch() != b || delta.dim() != d) {
    throw ShapeError("geometry_snapshot: increments do not match the batch");
  }
  if (probe.bins == 0) throw std::invalid_argument("geometry_snapshot: bins must be positive");

  GeometryReport report;
  report.pairs.resize(b * b);
  parallel_for(b, [&](std::size_t i) {
    std::vector<double> moved(d), gap(d);
    for (std::size_t j = 0; j < b; ++j) {
      const bool text_side = cfg.injection_side == Side::text;
      auto base = text_side ? batch.text.row_span(i) : batch.video.row_span(j);
      auto other = text_side ? batch.video.row_span(j) : batch.text.row_span(i);
      auto inc = delta.pair(i, j);

      PairRecord& r = report.pairs[i * b + j];
      r.i = i;
      r.j = j;
      r.is_positive = i == j;
      r.is_false_negative = batch.is_false_negative(i, j);
      double dist2 = 0.0, dist_delta2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        moved[k] = base[k] + inc[k];
        gap[k] = other[k] - base[k];
        dist2 += gap[k] * gap[k];
        dist_delta2 += (moved[k] - other[k]) * (moved[k] - other[k]);
      }
      r.norm_delta = delta.norm(i, j);
      r.norm_t = l2_norm(base);
      r.norm_t_delta = l2_norm(moved);
      r.dist = std::sqrt(dist2);
      r.dist_delta = std::sqrt(dist_delta2);
      r.cos_delta = cosine(moved, other);
      if (r.norm_delta > kNormFloor) {
        if (r.dist > kNormFloor) r.angle_delta_gap = angle(inc, gap);
        r.angle_delta_anchor = angle(inc, base);
      }
    }
  });

  const auto& names = geometry_fields();
  for (std::size_t k = 0; k < names.size(); ++k) {
    report.aggregates.push_back(summarize(report.pairs, k, names[k], probe.bins));
  }
  return report;
}

AlignmentUniformity alignment_uniformity(const Matrix& text, const Matrix& video) {
  if (!text.same_shape(video)) throw ShapeError("alignment_uniformity: shapes differ");
  if (text.rows() < 2) throw std::invalid_argument("alignment_uniformity: needs B >= 2");
  const Matrix t = normalized(text);
  const Matrix v = normalized(video);
  AlignmentUniformity out;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < t.cols(); ++c) d2 += (t(i, c) - v(i, c)) * (t(i, c) - v(i, c));
    out.alignment += d2;
  }
  out.alignment /= static_cast<double>(t.rows());
  out.uniformity_text = uniformity_of(t);
  out.uniformity_video = uniformity_of(v);
  out.uniformity = 0.5 * (out.uniformity_text + out.uniformity_video);
  return out;
}

void write_pairs_csv(std::ostream& out, const GeometryReport& report) {
  out << "i,j,is_positive,is_false_negative,angle_delta_gap,angle_delta_anchor,norm_t,"
         "norm_t_delta,dist,dist_delta,cos_delta,norm_delta\n";
  for (const auto& r : report.pairs) {
    out << r.i << ',' << r.j << ',' << (r.is_positive ? 1 : 0) << ','
        << (r.is_false_negative ? 1 : 0) << ',' << cell(r.angle_delta_gap) << ','
        << cell(r.angle_delta_anchor) << ',' << cell(r.norm_t) << ',' << cell(r.norm_t_delta)
        << ',' << cell(r.dist) << ',' << cell(r.dist_delta) << ',' << cell(r.cos_delta) << ','
        << cell(r.norm_delta) << '\n';
  }
}

void write_aggregates_header(std::ostream& out, const std::string& prefix, std::size_t bins) {
  if (!prefix.empty()) out << prefix << ',';
  out << "field,count,mean,std,lo,hi";
  for (std::size_t k = 0; k < bins; ++k) out << ",bin" << k;
  out << '\n';
}

void write_aggregates_rows(std::ostream& out, const std::string& prefix_values,
                           const GeometryReport& report) {
  for (const auto& a : report.aggregates) {
    if (!prefix_values.empty()) out << prefix_values << ',';
    out << a.field << ',' << a.count << ',' << cell(a.mean) << ',' << cell(a.std) << ','
        << format_double(a.lo) << ',' << format_double(a.hi);
    for (std::size_t c : a.counts) out << ',' << c;
    out << '\n';
  }
}

}  // namespace gare
