#include "aepl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "aepl/errors.hpp"

namespace aepl {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_shape(const Mask3& a, const Mask3& b, const char* what) {
  if (a.shape != b.shape) {
    throw ShapeMismatchError(std::string(what) + ": mask shapes differ " + to_string(a.shape) + " vs " +
                             to_string(b.shape));
  }
}

// 1D lower envelope of parabolas on sample positions i*step. Entries of `f`
// may be infinite; `out` receives min_q (step*(p-q))^2 + f[q].
void envelope_1d(const std::vector<double>& f, double step, std::vector<double>& out,
                 std::vector<std::int64_t>& v, std::vector<double>& z) {
  const auto n = static_cast<std::int64_t>(f.size());
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  out.assign(static_cast<std::size_t>(n), kInf);

  std::int64_t k = -1;
  auto meet = [&](std::int64_t q, std::int64_t r) {
    const double xq = step * static_cast<double>(q);
    const double xr = step * static_cast<double>(r);
    return ((f[q] + xq * xq) - (f[r] + xr * xr)) / (2.0 * (xq - xr));
  };
  for (std::int64_t q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    // z[0] is -inf, so k never drops below 0.
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) return;

  std::int64_t j = 0;
  for (std::int64_t p = 0; p < n; ++p) {
    const double xp = step * static_cast<double>(p);
    while (z[j + 1] < xp) ++j;
    const double d = xp - step * static_cast<double>(v[j]);
    out[p] = d * d + f[v[j]];
  }
}

}  // namespace

std::string to_string(const Shape3& s) {
  return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + ")";
}

std::int64_t Mask3::count() const {
  return std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; });
}

const Mask3& RegionMasks::operator[](Region r) const {
  switch (r) {
    case Region::ET: return et;
    case Region::WT: return wt;
    case Region::TC: return tc;
  }
  return et;
}

Mask3& RegionMasks::operator[](Region r) {
  return const_cast<Mask3&>(static_cast<const RegionMasks&>(*this)[r]);
}

RegionMasks regions_from_labels(std::span<const std::uint8_t> labels, const Shape3& shape) {
  if (static_cast<std::int64_t>(labels.size()) != voxel_count(shape)) {
    throw ShapeMismatchError("label buffer size does not match shape " + to_string(shape));
  }
  RegionMasks r{Mask3(shape), Mask3(shape), Mask3(shape)};
  for (std::size_t n = 0; n < labels.size(); ++n) {
    switch (labels[n]) {
      case 0: break;
      case 1: r.wt.data[n] = r.tc.data[n] = 1; break;
      case 2: r.wt.data[n] = 1; break;
      case 4: r.wt.data[n] = r.tc.data[n] = r.et.data[n] = 1; break;
      default:
        throw UnknownLabelError("unknown label value " + std::to_string(labels[n]) +
                                " (expected 0, 1, 2 or 4)");
    }
  }
  return r;
}

std::vector<std::uint8_t> labels_from_regions(const RegionMasks& regions) {
  require_same_shape(regions.et, regions.wt, "labels_from_regions");
  require_same_shape(regions.tc, regions.wt, "labels_from_regions");
  std::vector<std::uint8_t> out(regions.wt.data.size(), 0);
  for (std::size_t n = 0; n < out.size(); ++n) {
    if (regions.et.data[n]) out[n] = 4;
    else if (regions.tc.data[n]) out[n] = 1;
    else if (regions.wt.data[n]) out[n] = 2;
  }
  return out;
}

double dice_score(const Mask3& pred, const Mask3& gt) {
  require_same_shape(pred, gt, "dice_score");
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t n = 0; n < pred.data.size(); ++n) {
    const bool a = pred.data[n] != 0;
    const bool b = gt.data[n] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double volume_diagonal(const Shape3& shape, const Spacing& spacing) {
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double len = static_cast<double>(shape[a]) * spacing[a];
    acc += len * len;
  }
  return std::sqrt(acc);
}

Mask3 surface_of(const Mask3& mask) {
  Mask3 out(mask.shape);
  const auto [nx, ny, nz] = mask.shape;
  auto inside = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return i >= 0 && j >= 0 && k >= 0 && i < nx && j < ny && k < nz && mask.at(i, j, k) != 0;
  };
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < ny; ++j)
      for (std::int64_t k = 0; k < nz; ++k) {
        if (!mask.at(i, j, k)) continue;
        const bool interior = inside(i - 1, j, k) && inside(i + 1, j, k) && inside(i, j - 1, k) &&
                              inside(i, j + 1, k) && inside(i, j, k - 1) && inside(i, j, k + 1);
        if (!interior) out.at(i, j, k) = 1;
      }
  return out;
}

std::vector<double> squared_distance_transform(const Mask3& seeds, const Spacing& spacing) {
  const auto [nx, ny, nz] = seeds.shape;
  std::vector<double> dist(seeds.data.size());
  for (std::size_t n = 0; n < dist.size(); ++n) dist[n] = seeds.data[n] ? 0.0 : kInf;

  std::vector<double> line, out, z;
  std::vector<std::int64_t> v;
  // z axis (contiguous)
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < ny; ++j) {
      line.assign(static_cast<std::size_t>(nz), 0.0);
      for (std::int64_t k = 0; k < nz; ++k) line[k] = dist[linear_index(seeds.shape, i, j, k)];
      envelope_1d(line, spacing[2], out, v, z);
      for (std::int64_t k = 0; k < nz; ++k) dist[linear_index(seeds.shape, i, j, k)] = out[k];
    }
  // y axis
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t k = 0; k < nz; ++k) {
      line.assign(static_cast<std::size_t>(ny), 0.0);
      for (std::int64_t j = 0; j < ny; ++j) line[j] = dist[linear_index(seeds.shape, i, j, k)];
      envelope_1d(line, spacing[1], out, v, z);
      for (std::int64_t j = 0; j < ny; ++j) dist[linear_index(seeds.shape, i, j, k)] = out[j];
    }
  // x axis
  for (std::int64_t j = 0; j < ny; ++j)
    for (std::int64_t k = 0; k < nz; ++k) {
      line.assign(static_cast<std::size_t>(nx), 0.0);
      for (std::int64_t i = 0; i < nx; ++i) line[i] = dist[linear_index(seeds.shape, i, j, k)];
      envelope_1d(line, spacing[0], out, v, z);
      for (std::int64_t i = 0; i < nx; ++i) dist[linear_index(seeds.shape, i, j, k)] = out[i];
    }
  return dist;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInputError("percentile of empty list");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

Hd95Result hd95(const Mask3& pred, const Mask3& gt, const Spacing& spacing, double degenerate_value) {
  require_same_shape(pred, gt, "hd95");
  const bool pred_empty = pred.empty();
  const bool gt_empty = gt.empty();
  if (pred_empty && gt_empty) return {0.0, false};
  if (pred_empty != gt_empty) return {degenerate_value, true};

  const Mask3 sp = surface_of(pred);
  const Mask3 sg = surface_of(gt);
  auto directed = [&](const Mask3& from, const Mask3& to) {
    const auto d2 = squared_distance_transform(to, spacing);
    std::vector<double> d;
    for (std::size_t n = 0; n < from.data.size(); ++n)
      if (from.data[n]) d.push_back(std::sqrt(d2[n]));
    return percentile(std::move(d), 95.0);
  };
  return {std::max(directed(sp, sg), directed(sg, sp)), false};
}

CaseReport evaluate_case(const std::string& case_id, const RegionMasks& pred, const RegionMasks& gt,
                         const Spacing& spacing) {
  CaseReport report;
  report.case_id = case_id;
  const double diag = volume_diagonal(gt.wt.shape, spacing);
  for (int r = 0; r < 3; ++r) {
    const auto region = static_cast<Region>(r);
    report.dice[r] = dice_score(pred[region], gt[region]);
    const auto h = hd95(pred[region], gt[region], spacing, diag);
    report.hd95[r] = h.value;
    report.degenerate[r] = h.degenerate;
  }
  return report;
}

std::string AggregateTable::cell(std::size_t column, int precision) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << columns.at(column).mean << "±" << columns.at(column).std;
  return os.str();
}

AggregateTable evaluate_dataset(std::vector<CaseReport> reports, StdMode mode) {
  if (reports.empty()) throw EmptyInputError("evaluate_dataset: no cases");
  std::stable_sort(reports.begin(), reports.end(),
                   [](const CaseReport& a, const CaseReport& b) { return a.case_id < b.case_id; });
  AggregateTable table;
  table.n_cases = reports.size();
  const double n = static_cast<double>(reports.size());
  for (std::size_t c = 0; c < 6; ++c) {
    auto value = [&](const CaseReport& r) { return c < 3 ? r.dice[c] : r.hd95[c - 3]; };
    double sum = 0.0;
    for (const auto& r : reports) sum += value(r);
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& r : reports) ss += (value(r) - mean) * (value(r) - mean);
    const double denom = mode == StdMode::Population ? n : std::max(n - 1.0, 1.0);
    table.columns[c] = {mean, std::sqrt(ss / denom)};
  }
  return table;
}

void write_case_csv(std::ostream& os, const std::vector<CaseReport>& reports) {
  os << "case_id";
  for (const char* col : AggregateTable::kColumns) os << ',' << col;
  os << ",Degenerate_ET,Degenerate_WT,Degenerate_TC\n";
  os << std::setprecision(10);
  for (const auto& r : reports) {
    os << r.case_id;
    for (double d : r.dice) os << ',' << d;
    for (double h : r.hd95) os << ',' << h;
    for (bool g : r.degenerate) os << ',' << (g ? 1 : 0);
    os << '\n';
  }
}

void write_aggregate_csv(std::ostream& os, const AggregateTable& table, const std::string& row_label) {
  os << "label,n_cases";
  for (const char* col : AggregateTable::kColumns) os << ',' << col << "_mean," << col << "_std";
  os << '\n' << row_label << ',' << table.n_cases << std::setprecision(10);
  for (const auto& c : table.columns) os << ',' << c.mean << ',' << c.std;
  os << '\n';
}

std::string format_aggregate_text(const std::vector<std::pair<std::string, AggregateTable>>& rows,
                                  const std::string& label_header) {
  std::size_t label_width = label_header.size();
  for (const auto& [label, _] : rows) label_width = std::max(label_width, label.size());
  std::vector<std::size_t> widths(6);
  for (std::size_t c = 0; c < 6; ++c) {
    widths[c] = std::string(AggregateTable::kColumns[c]).size();
    for (const auto& [_, t] : rows) widths[c] = std::max(widths[c], t.cell(c).size() - 1);  // "±" is 2 bytes
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label_width)) << label_header;
  for (std::size_t c = 0; c < 6; ++c)
    os << " | " << std::setw(static_cast<int>(widths[c])) << AggregateTable::kColumns[c];
  os << '\n';
  for (const auto& [label, t] : rows) {
    os << std::left << std::setw(static_cast<int>(label_width)) << label;
    for (std::size_t c = 0; c < 6; ++c) os << " | " << std::setw(static_cast<int>(widths[c] + 1)) << t.cell(c);
    os << '\n';
  }
  return os.str();
}

}  // namespace aepl
