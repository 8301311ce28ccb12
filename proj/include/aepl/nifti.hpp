#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "aepl/geometry.hpp"

namespace aepl::nifti {

/// Single-volume NIfTI-1 image, data in file order (x fastest), scaled by
/// scl_slope/scl_inter when present.
struct Image {
  Shape3 dims{0, 0, 0};
  Spacing spacing = kUnitSpacing;
  int sform_code = 0;
  std::array<std::array<double, 4>, 3> srow{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}};
  std::vector<float> data;
};

/// Reads .nii or .nii.gz; byte order is detected from sizeof_hdr.
Image read(const std::filesystem::path& path);

/// Writes an uncompressed or gzip-compressed (by extension) file.
/// `datatype` is a NIfTI code: 2 (uint8), 4 (int16) or 16 (float32).
void write(const std::filesystem::path& path, const Image& image, int datatype = 16);

/// Same dims, spacing and sform within `tol`.
bool same_geometry(const Image& a, const Image& b, double tol = 1e-4);

}  // namespace aepl::nifti
