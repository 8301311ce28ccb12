#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "aepl/geometry.hpp"

namespace aepl {

/// Dense binary mask over a 3D grid.
struct Mask3 {
  Shape3 shape{0, 0, 0};
  std::vector<std::uint8_t> data;

  Mask3() = default;
  explicit Mask3(const Shape3& s) : shape(s), data(static_cast<std::size_t>(voxel_count(s)), 0) {}

  std::uint8_t& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data[linear_index(shape, i, j, k)]; }
  std::uint8_t at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data[linear_index(shape, i, j, k)];
  }
  std::int64_t count() const;
  bool empty() const { return count() == 0; }

  bool operator==(const Mask3&) const = default;
};

/// Region order used everywhere: enhancing tumor, whole tumor, tumor core.
enum class Region : int { ET = 0, WT = 1, TC = 2 };
inline constexpr std::array<const char*, 3> kRegionNames{"ET", "WT", "TC"};

struct RegionMasks {
  Mask3 et, wt, tc;

  const Mask3& operator[](Region r) const;
  Mask3& operator[](Region r);
};

/// BraTS convention: 1 necrotic/non-enhancing core, 2 edema, 4 enhancing.
/// WT = {1,2,4}, TC = {1,4}, ET = {4}. Throws UnknownLabelError otherwise.
RegionMasks regions_from_labels(std::span<const std::uint8_t> labels, const Shape3& shape);

/// Inverse of regions_from_labels for nested masks (ET wins, then TC, then WT).
std::vector<std::uint8_t> labels_from_regions(const RegionMasks& regions);

/// 2|P∩G| / (|P|+|G|); 1.0 when both are empty.
double dice_score(const Mask3& pred, const Mask3& gt);

double volume_diagonal(const Shape3& shape, const Spacing& spacing);

struct Hd95Result {
  double value = 0.0;
  bool degenerate = false;
};

/// Symmetric 95th-percentile surface distance.
///
/// Surface voxels are mask voxels with at least one 6-neighbour outside the
/// mask (the grid boundary counts as outside). Each directed distance is the
/// linearly interpolated 95th percentile of nearest-surface distances; the
/// result is the larger of the two. Both masks empty gives (0, false); exactly
/// one empty gives (degenerate_value, true).
Hd95Result hd95(const Mask3& pred, const Mask3& gt, const Spacing& spacing, double degenerate_value);

/// Voxels of `mask` that touch the background through a face.
Mask3 surface_of(const Mask3& mask);

/// Exact squared Euclidean distance from every voxel to the nearest set voxel
/// of `seeds` (separable lower-envelope transform). Infinity when no seeds.
std::vector<double> squared_distance_transform(const Mask3& seeds, const Spacing& spacing);

/// Percentile with linear interpolation between closest ranks; `q` in [0, 100].
double percentile(std::vector<double> values, double q);

struct CaseReport {
  std::string case_id;
  std::array<double, 3> dice{};   // ET, WT, TC
  std::array<double, 3> hd95{};   // ET, WT, TC, spacing units
  std::array<bool, 3> degenerate{};

  double mean_dice() const { return (dice[0] + dice[1] + dice[2]) / 3.0; }
};

CaseReport evaluate_case(const std::string& case_id, const RegionMasks& pred, const RegionMasks& gt,
                         const Spacing& spacing);

struct ColumnStats {
  double mean = 0.0;
  double std = 0.0;
};

/// Table-1 shaped aggregate: columns Dice_ET, Dice_WT, Dice_TC, HD95_ET, HD95_WT, HD95_TC.
struct AggregateTable {
  static constexpr std::array<const char*, 6> kColumns{"Dice_ET", "Dice_WT", "Dice_TC",
                                                       "HD95_ET", "HD95_WT", "HD95_TC"};
  std::array<ColumnStats, 6> columns{};
  std::size_t n_cases = 0;

  double mean_dice() const { return (columns[0].mean + columns[1].mean + columns[2].mean) / 3.0; }
  /// "0.6892±0.2488" style cell.
  std::string cell(std::size_t column, int precision = 4) const;
};

enum class StdMode { Population, Sample };

/// Reduces reports in case_id order. Throws EmptyInputError on an empty list.
AggregateTable evaluate_dataset(std::vector<CaseReport> reports, StdMode mode = StdMode::Population);

void write_case_csv(std::ostream& os, const std::vector<CaseReport>& reports);
void write_aggregate_csv(std::ostream& os, const AggregateTable& table, const std::string& row_label);
std::string format_aggregate_text(const std::vector<std::pair<std::string, AggregateTable>>& rows,
                                  const std::string& label_header = "Method");

}  // namespace aepl
