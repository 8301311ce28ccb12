#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "aepl/geometry.hpp"
#include "aepl/grade.hpp"
#include "aepl/metrics.hpp"

namespace aepl {

using Rng = std::mt19937_64;

/// Four co-registered modalities, channel order T1w, T2w, T1CE, Flair.
struct MultiModalVolume {
  torch::Tensor voxels;  // float32 [4, X, Y, Z]
  Spacing spacing = kUnitSpacing;
  std::string case_id;

  Shape3 shape() const;
  /// Throws ShapeMismatchError / ConfigError when the invariants do not hold.
  void validate() const;
};

enum class Split { Train, Val, Test, Unassigned };
std::string_view to_string(Split s);

struct Case {
  MultiModalVolume volume;
  torch::Tensor labels;  // uint8 [X, Y, Z], values in {0, 1, 2, 4}
  Grade grade = Grade::LGG;
  Split split = Split::Unassigned;
  std::uint64_t seed = 0;

  const std::string& id() const { return volume.case_id; }
  void validate() const;
};

/// Throws UnknownLabelError for values outside {0, 1, 2, 4}.
void check_label_values(const torch::Tensor& labels);

/// Region masks of a uint8 [X, Y, Z] label tensor.
RegionMasks regions_of(const torch::Tensor& labels);
Mask3 mask_of(const torch::Tensor& binary);

// ---------------------------------------------------------------- phantoms --

/// Synthetic glioma phantom parameters. Tumor grade drives size, boundary
/// irregularity and the presence of an enhancing rim.
struct PhantomSpec {
  Shape3 shape{32, 64, 64};
  Spacing spacing = kUnitSpacing;
  std::uint64_t seed = 0;
  Grade grade = Grade::LGG;
  std::array<double, 2> lgg_radius{3.5, 6.0};
  std::array<double, 2> hgg_radius{7.0, 10.0};
  double lgg_irregularity = 0.08;
  double hgg_irregularity = 0.25;
  double lgg_enhancing_fraction = 0.0;
  double hgg_enhancing_fraction = 0.45;
  double core_fraction = 0.55;
  double noise_sigma = 0.1;

  std::array<double, 2> radius_range() const { return grade == Grade::HGG ? hgg_radius : lgg_radius; }
  double irregularity() const { return grade == Grade::HGG ? hgg_irregularity : lgg_irregularity; }
  double enhancing_fraction() const { return grade == Grade::HGG ? hgg_enhancing_fraction : lgg_enhancing_fraction; }

  /// Throws SpecInfeasibleError.
  void validate() const;
};

/// Deterministic in `spec.seed`.
Case generate_phantom(const PhantomSpec& spec);

/// `count` phantoms with alternating grades (LGG first); per-case seeds are
/// derived from `seed`.
std::vector<Case> generate_phantom_dataset(int count, std::uint64_t seed, const PhantomSpec& base = {});

/// Directory of little-endian float32 blobs plus manifest.json.
void save_dataset(const std::filesystem::path& dir, const std::vector<Case>& cases);
std::vector<Case> load_dataset(const std::filesystem::path& dir);

// ------------------------------------------------------------------ nifti --

struct NiftiCasePaths {
  std::filesystem::path t1, t2, t1ce, flair, labels;  // labels may be empty
};

/// Reads a BraTS-style case. Channel order T1w, T2w, T1CE, Flair.
Case load_nifti_case(const NiftiCasePaths& paths, Grade grade, std::string case_id);

// ------------------------------------------------------------ preprocessing --

struct PreprocessOptions {
  std::optional<Spacing> target_spacing = kUnitSpacing;
  double spacing_tolerance = 1e-3;
};

struct CropBox {
  Shape3 lo{0, 0, 0};
  Shape3 hi{0, 0, 0};  // exclusive
};

/// Bounding box of voxels where any channel is nonzero. Throws EmptyInputError.
CropBox nonzero_bbox(const torch::Tensor& voxels);

/// Crop to the nonzero box, resample when spacing deviates from the target, and
/// z-score each channel over the nonzero (brain) region.
Case preprocess(const Case& c, const PreprocessOptions& opts = {});

// ---------------------------------------------------------- patch sampling --

struct Patch {
  torch::Tensor image;   // [4, px, py, pz]
  torch::Tensor labels;  // uint8 [px, py, pz]
  Shape3 origin{0, 0, 0};  // lower corner in the padded volume
};

/// Zero-pads symmetrically so that every axis is at least `min_shape`.
/// Returns the offset of the original volume inside the padded one.
Shape3 pad_to_at_least(torch::Tensor& image, torch::Tensor& labels, const Shape3& min_shape);

Patch extract_patch(const torch::Tensor& image, const torch::Tensor& labels, const Shape3& origin,
                    const Shape3& patch_size);

/// With probability `fg_prob` the patch is centred on a tumor voxel (when any
/// exists); otherwise its position is uniform.
Patch sample_patch(const Case& c, const Shape3& patch_size, double fg_prob, Rng& rng);

// ------------------------------------------------------------ augmentation --

struct AugmentOptions {
  double mirror_prob = 0.5;        // per axis
  double rotate_prob = 0.3;
  double max_rotation_deg = 15.0;
  double intensity_prob = 0.5;
  std::array<double, 2> intensity_range{0.9, 1.1};
};

void mirror(Patch& p, int axis);
/// Rotates about `axis` through the patch centre; trilinear for the image,
/// nearest for labels, zero outside.
void rotate(Patch& p, int axis, double degrees);
void scale_intensity(Patch& p, int channel, double factor);
void augment(Patch& p, Rng& rng, const AugmentOptions& opts = {});

// --------------------------------------------------------------- splitting --

struct SplitRatio {
  double train = 6, val = 2, test = 2;
};

/// Grade-stratified, deterministic for `seed`. Within each grade, val and test
/// sizes are rounded to nearest and train takes the remainder.
std::vector<Split> split_dataset(const std::vector<Grade>& grades, SplitRatio ratio, std::uint64_t seed);

struct SplitManifest {
  std::uint64_t seed = 0;
  SplitRatio ratio;
  std::vector<std::string> train, val, test;
};

SplitManifest make_split_manifest(const std::vector<Case>& cases, SplitRatio ratio, std::uint64_t seed);
void apply_split(std::vector<Case>& cases, const SplitManifest& manifest);
void save_split(const std::filesystem::path& file, const SplitManifest& manifest);
SplitManifest load_split(const std::filesystem::path& file);

/// splitmix64 step, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace aepl
