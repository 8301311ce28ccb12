#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include <unistd.h>

#include "aepl/config.hpp"
#include "aepl/data.hpp"
#include "aepl/errors.hpp"
#include "aepl/nifti.hpp"

using namespace aepl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("aepl_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Case small_case(std::uint64_t seed, Grade g) {
  PhantomSpec spec;
  spec.seed = seed;
  spec.grade = g;
  return generate_phantom(spec);
}

}  // namespace

TEST(Phantom, SameSeedIsBitIdentical) {
  const auto a = small_case(5, Grade::HGG);
  const auto b = small_case(5, Grade::HGG);
  EXPECT_TRUE(torch::equal(a.volume.voxels, b.volume.voxels));
  EXPECT_TRUE(torch::equal(a.labels, b.labels));
  const auto c = small_case(6, Grade::HGG);
  EXPECT_FALSE(torch::equal(a.volume.voxels, c.volume.voxels));
}

TEST(Phantom, LabelsAreValidAndLggHasNoEnhancingTumor) {
  const auto lgg = small_case(1, Grade::LGG);
  check_label_values(lgg.labels);
  EXPECT_TRUE(regions_of(lgg.labels).et.empty());
  EXPECT_FALSE(regions_of(lgg.labels).wt.empty());
  const auto hgg = small_case(2, Grade::HGG);
  EXPECT_FALSE(regions_of(hgg.labels).et.empty());
}

TEST(Phantom, HggIsLargerOnAverage) {
  const auto cases = generate_phantom_dataset(200, 7);
  std::map<Grade, double> volume;
  std::map<Grade, int> count;
  for (const auto& c : cases) {
    volume[c.grade] += static_cast<double>(regions_of(c.labels).wt.count());
    ++count[c.grade];
    c.validate();
  }
  EXPECT_EQ(count[Grade::LGG], 100);
  EXPECT_EQ(count[Grade::HGG], 100);
  EXPECT_GT(volume[Grade::HGG] / count[Grade::HGG], volume[Grade::LGG] / count[Grade::LGG]);
}

TEST(Phantom, InfeasibleSpecThrows) {
  PhantomSpec spec;
  spec.shape = {16, 64, 64};
  EXPECT_THROW(spec.validate(), SpecInfeasibleError);
  spec = PhantomSpec{};
  spec.hgg_radius = {5.0, 6.0};
  EXPECT_THROW(spec.validate(), SpecInfeasibleError);
}

TEST(Phantom, DatasetRoundTrip) {
  const auto dir = scratch("dataset");
  const auto cases = generate_phantom_dataset(4, 3);
  save_dataset(dir, cases);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    EXPECT_EQ(back[i].id(), cases[i].id());
    EXPECT_EQ(back[i].grade, cases[i].grade);
    EXPECT_TRUE(torch::equal(back[i].volume.voxels, cases[i].volume.voxels));
    EXPECT_TRUE(torch::equal(back[i].labels, cases[i].labels));
  }
  fs::remove_all(dir);
}

TEST(Preprocess, ZScoreOverNonzeroRegion) {
  Case c = small_case(3, Grade::HGG);
  c.volume.voxels = c.volume.voxels * 7.0 + 3.0 * c.volume.voxels.ne(0);
  const auto out = preprocess(c);
  const auto brain = out.volume.voxels.ne(0).any(0);
  for (int ch = 0; ch < 4; ++ch) {
    const auto v = out.volume.voxels[ch].masked_select(brain).to(torch::kDouble);
    EXPECT_NEAR(v.mean().item<double>(), 0.0, 1e-5);
    EXPECT_NEAR(v.std(false).item<double>(), 1.0, 1e-3);
  }
}

TEST(Preprocess, CropRemovesZeroBorderExactly) {
  Case c;
  c.volume.voxels = torch::zeros({4, 10, 12, 14});
  torch::manual_seed(1);
  c.volume.voxels.index_put_({torch::indexing::Slice(), torch::indexing::Slice(2, 7), torch::indexing::Slice(3, 12),
                              torch::indexing::Slice(1, 13)},
                             torch::rand({4, 5, 9, 12}) + 0.5);
  c.labels = torch::zeros({10, 12, 14}, torch::kUInt8);
  const auto box = nonzero_bbox(c.volume.voxels);
  EXPECT_EQ(box.lo, (Shape3{2, 3, 1}));
  EXPECT_EQ(box.hi, (Shape3{7, 12, 13}));
  EXPECT_EQ(preprocess(c).volume.shape(), (Shape3{5, 9, 12}));
}

TEST(Preprocess, Idempotent) {
  const auto once = preprocess(small_case(4, Grade::LGG));
  const auto twice = preprocess(once);
  EXPECT_TRUE(torch::allclose(once.volume.voxels, twice.volume.voxels, 0, 1e-5));
}

TEST(Preprocess, ResamplesToTargetSpacing) {
  Case c = small_case(5, Grade::LGG);
  c.volume.spacing = {2.0, 1.0, 1.0};
  const auto out = preprocess(c);
  EXPECT_EQ(out.volume.shape()[0], 64);
  EXPECT_EQ(out.volume.spacing, kUnitSpacing);
  check_label_values(out.labels);
}

TEST(Preprocess, AllZeroThrows) {
  Case c;
  c.volume.voxels = torch::zeros({4, 4, 4, 4});
  c.labels = torch::zeros({4, 4, 4}, torch::kUInt8);
  EXPECT_THROW(preprocess(c), EmptyInputError);
}

TEST(Patch, ForegroundSamplingHitsTumor) {
  const auto c = preprocess(small_case(6, Grade::LGG));
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto p = sample_patch(c, {16, 32, 32}, 1.0, rng);
    EXPECT_EQ(p.image.sizes(), (std::vector<std::int64_t>{4, 16, 32, 32}));
    EXPECT_GT(p.labels.ne(0).sum().item<std::int64_t>(), 0);
  }
}

TEST(Patch, NoTumorFallsBackToUniform) {
  auto c = preprocess(small_case(7, Grade::HGG));
  c.labels.zero_();
  Rng rng(2);
  const auto p = sample_patch(c, {16, 32, 32}, 1.0, rng);
  EXPECT_EQ(p.labels.ne(0).sum().item<std::int64_t>(), 0);
}

TEST(Patch, SeedReproducesCoordinates) {
  const auto c = preprocess(small_case(8, Grade::HGG));
  Rng a(9), b(9);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(sample_patch(c, {16, 32, 32}, 0.5, a).origin, sample_patch(c, {16, 32, 32}, 0.5, b).origin);
}

TEST(Patch, SmallVolumeIsPadded) {
  auto c = preprocess(small_case(9, Grade::LGG));
  Rng rng(3);
  const auto p = sample_patch(c, {48, 64, 64}, 0.5, rng);
  EXPECT_EQ(p.image.sizes(), (std::vector<std::int64_t>{4, 48, 64, 64}));
}

TEST(Augment, MirrorIsInvolution) {
  const auto c = preprocess(small_case(10, Grade::HGG));
  Rng rng(4);
  auto p = sample_patch(c, {16, 32, 32}, 1.0, rng);
  const auto image = p.image.clone();
  const auto labels = p.labels.clone();
  for (int axis = 0; axis < 3; ++axis) {
    mirror(p, axis);
    mirror(p, axis);
    EXPECT_TRUE(torch::equal(p.image, image));
    EXPECT_TRUE(torch::equal(p.labels, labels));
  }
}

TEST(Augment, RotationKeepsLabelsValidAndRoughlyPreservesVolume) {
  const auto c = preprocess(small_case(11, Grade::HGG));
  Rng rng(5);
  auto p = sample_patch(c, {32, 64, 64}, 1.0, rng);
  const auto before = p.labels.ne(0).sum().item<double>();
  rotate(p, 0, 12.0);
  check_label_values(p.labels);
  EXPECT_NEAR(p.labels.ne(0).sum().item<double>(), before, 0.1 * before);
  auto q = p;
  rotate(q, 1, 0.0);
  EXPECT_TRUE(torch::allclose(q.image, p.image, 0, 1e-5));
}

TEST(Augment, IntensityScaling) {
  const auto c = preprocess(small_case(12, Grade::LGG));
  Rng rng(6);
  auto p = sample_patch(c, {16, 32, 32}, 1.0, rng);
  const auto before = p.image.clone();
  scale_intensity(p, 2, 1.1);
  EXPECT_TRUE(torch::allclose(p.image[2], before[2] * 1.1));
  EXPECT_TRUE(torch::equal(p.image[1], before[1]));
}

TEST(Split, BratsSizedCohort) {
  std::vector<Grade> grades(285, Grade::HGG);
  for (int i = 0; i < 75; ++i) grades[static_cast<std::size_t>(i)] = Grade::LGG;
  const auto s = split_dataset(grades, {}, 1);
  std::map<Split, int> total;
  std::map<std::pair<Grade, Split>, int> per;
  for (std::size_t i = 0; i < s.size(); ++i) {
    ++total[s[i]];
    ++per[{grades[i], s[i]}];
  }
  EXPECT_EQ(total[Split::Train], 171);
  EXPECT_EQ(total[Split::Val], 57);
  EXPECT_EQ(total[Split::Test], 57);
  for (auto g : {Grade::LGG, Grade::HGG}) {
    const double n = g == Grade::LGG ? 75 : 210;
    EXPECT_NEAR(per[std::pair(g, Split::Train)], 0.6 * n, 1.0);
    EXPECT_NEAR(per[std::pair(g, Split::Val)], 0.2 * n, 1.0);
    EXPECT_NEAR(per[std::pair(g, Split::Test)], 0.2 * n, 1.0);
  }
  EXPECT_EQ(split_dataset(grades, {}, 1), s);
  EXPECT_NE(split_dataset(grades, {}, 2), s);
}

TEST(Split, ManifestRoundTrip) {
  auto cases = generate_phantom_dataset(10, 1);
  const auto manifest = make_split_manifest(cases, {}, 4);
  const auto dir = scratch("split");
  save_split(dir / "split.json", manifest);
  const auto back = load_split(dir / "split.json");
  EXPECT_EQ(back.train, manifest.train);
  EXPECT_EQ(back.val, manifest.val);
  EXPECT_EQ(back.test, manifest.test);
  apply_split(cases, back);
  for (const auto& c : cases) EXPECT_NE(c.split, Split::Unassigned);
  fs::remove_all(dir);
}

TEST(Nifti, CaseRoundTrip) {
  const auto dir = scratch("nifti");
  const auto c = small_case(13, Grade::HGG);
  const auto [nx, ny, nz] = c.volume.shape();
  auto to_image = [&](const torch::Tensor& v) {
    nifti::Image img;
    img.dims = {nx, ny, nz};
    img.spacing = {1.0, 1.0, 1.0};
    auto file_order = v.to(torch::kFloat).permute({2, 1, 0}).contiguous();
    img.data.assign(file_order.data_ptr<float>(), file_order.data_ptr<float>() + file_order.numel());
    return img;
  };
  const std::array<std::string, 4> names{"t1.nii.gz", "t2.nii", "t1ce.nii.gz", "flair.nii.gz"};
  for (int ch = 0; ch < 4; ++ch) nifti::write(dir / names[static_cast<std::size_t>(ch)], to_image(c.volume.voxels[ch]));
  nifti::write(dir / "seg.nii.gz", to_image(c.labels), 2);
  const NiftiCasePaths paths{dir / names[0], dir / names[1], dir / names[2], dir / names[3], dir / "seg.nii.gz"};
  const auto back = load_nifti_case(paths, Grade::HGG, "x");
  EXPECT_EQ(back.volume.shape(), c.volume.shape());
  EXPECT_TRUE(torch::equal(back.volume.voxels, c.volume.voxels));
  EXPECT_TRUE(torch::equal(back.labels, c.labels));

  // Label 3 is not a BraTS label.
  auto bad = to_image(c.labels);
  bad.data[10] = 3.0f;
  nifti::write(dir / "bad.nii.gz", bad, 2);
  auto bad_paths = paths;
  bad_paths.labels = dir / "bad.nii.gz";
  EXPECT_THROW(load_nifti_case(bad_paths, Grade::HGG, "x"), UnknownLabelError);

  // Mismatched affine between modalities.
  auto shifted = to_image(c.volume.voxels[1]);
  shifted.sform_code = 1;
  shifted.srow[0][3] = 5.0;
  nifti::write(dir / "t2_shifted.nii", shifted);
  auto shifted_paths = paths;
  shifted_paths.t2 = dir / "t2_shifted.nii";
  EXPECT_THROW(load_nifti_case(shifted_paths, Grade::HGG, "x"), ShapeMismatchError);

  auto unlabelled = paths;
  unlabelled.labels.clear();
  EXPECT_EQ(load_nifti_case(unlabelled, Grade::LGG, "y").labels.ne(0).sum().item<std::int64_t>(), 0);
  fs::remove_all(dir);
}

TEST(Nifti, BratsGeometry) {
  const auto dir = scratch("brats");
  nifti::Image img;
  img.dims = {240, 240, 155};
  img.data.assign(240 * 240 * 155, 0.0f);
  img.data[1000] = 1.0f;
  nifti::write(dir / "a.nii.gz", img, 4);
  const auto back = nifti::read(dir / "a.nii.gz");
  EXPECT_EQ(back.dims, (Shape3{240, 240, 155}));
  EXPECT_EQ(back.data[1000], 1.0f);
  fs::remove_all(dir);
}

TEST(Config, JsonRoundTripAndPartialOverride) {
  const auto dir = scratch("config");
  auto cfg = ExperimentConfig::desk_scale();
  cfg.train.alpha = 1.0;
  cfg.data.n_cases = 12;
  save_experiment_config(dir / "c.json", cfg);
  const auto back = load_experiment_config(dir / "c.json");
  EXPECT_EQ(back.train.alpha, 1.0);
  EXPECT_EQ(back.data.n_cases, 12);
  EXPECT_EQ(back.model.channel_widths, cfg.model.channel_widths);

  std::ofstream(dir / "p.json") << R"({"train": {"epochs": 3}})";
  const auto partial = load_experiment_config(dir / "p.json");
  EXPECT_EQ(partial.train.epochs, 3);
  EXPECT_EQ(partial.train.lr0, 0.01);

  std::ofstream(dir / "bad.json") << R"({"train": {"lr0": 1e-7}})";
  EXPECT_THROW(load_experiment_config(dir / "bad.json"), ConfigError);
  fs::remove_all(dir);
}
