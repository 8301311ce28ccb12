#include "aepl/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "aepl/errors.hpp"
#include "aepl/nifti.hpp"

namespace aepl {

namespace fs = std::filesystem;
using json = nlohmann::json;
using torch::indexing::Slice;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Shape3 MultiModalVolume::shape() const { return {voxels.size(1), voxels.size(2), voxels.size(3)}; }

void MultiModalVolume::validate() const {
  if (!voxels.defined() || voxels.dim() != 4 || voxels.size(0) != 4)
    throw ShapeMismatchError("volume must be [4, X, Y, Z] (T1w, T2w, T1CE, Flair)");
  if (voxels.scalar_type() != torch::kFloat) throw ConfigError("volume voxels must be float32");
  if (!torch::isfinite(voxels).all().item<bool>()) throw ConfigError("volume contains non-finite values");
  for (double s : spacing)
    if (!(s > 0.0)) throw ConfigError("spacing must be positive");
}

void check_label_values(const torch::Tensor& labels) {
  auto l = labels.to(torch::kInt);
  auto ok = l.eq(0) | l.eq(1) | l.eq(2) | l.eq(4);
  if (!ok.all().item<bool>()) {
    auto bad = l.masked_select(ok.logical_not())[0].item<int>();
    throw UnknownLabelError("unknown label value " + std::to_string(bad) + " (expected 0, 1, 2 or 4)");
  }
}

void Case::validate() const {
  volume.validate();
  if (!labels.defined() || labels.dim() != 3) throw ShapeMismatchError("labels must be [X, Y, Z]");
  if (Shape3{labels.size(0), labels.size(1), labels.size(2)} != volume.shape())
    throw ShapeMismatchError("labels shape differs from volume shape");
  check_label_values(labels);
}

Mask3 mask_of(const torch::Tensor& binary) {
  auto t = binary.to(torch::kUInt8).contiguous();
  Mask3 m({t.size(0), t.size(1), t.size(2)});
  std::memcpy(m.data.data(), t.data_ptr<std::uint8_t>(), m.data.size());
  return m;
}

RegionMasks regions_of(const torch::Tensor& labels) {
  auto t = labels.to(torch::kUInt8).contiguous();
  const Shape3 shape{t.size(0), t.size(1), t.size(2)};
  return regions_from_labels({t.data_ptr<std::uint8_t>(), static_cast<std::size_t>(t.numel())}, shape);
}

// ---------------------------------------------------------------- phantoms --

void PhantomSpec::validate() const {
  for (auto d : shape)
    if (d < 8) throw SpecInfeasibleError("phantom shape must be at least 8 voxels per axis");
  for (const auto& r : {lgg_radius, hgg_radius})
    if (!(r[0] > 0.0) || r[1] < r[0]) throw SpecInfeasibleError("radius range must be positive and ordered");
  if (!(hgg_radius[0] > lgg_radius[1])) throw SpecInfeasibleError("HGG radius range must lie above the LGG range");
  if (!(hgg_irregularity > lgg_irregularity) || lgg_irregularity < 0.0 || hgg_irregularity >= 1.0)
    throw SpecInfeasibleError("irregularity must satisfy 0 <= LGG < HGG < 1");
  for (double f : {lgg_enhancing_fraction, hgg_enhancing_fraction})
    if (f < 0.0 || f > 1.0) throw SpecInfeasibleError("enhancing fraction must lie in [0, 1]");
  if (!(core_fraction > 0.0 && core_fraction < 1.0)) throw SpecInfeasibleError("core fraction must lie in (0, 1)");
  if (noise_sigma < 0.0) throw SpecInfeasibleError("noise sigma must be non-negative");
  // Largest tumor extent (with anisotropy and boundary perturbation) plus a
  // one-voxel margin must fit along every axis.
  // Both grades are checked, since a dataset mixes them.
  for (const auto& [r, irr] : {std::pair{lgg_radius, lgg_irregularity}, std::pair{hgg_radius, hgg_irregularity}}) {
    const double max_extent = r[1] * 1.15 * (1.0 + irr);
    for (auto d : shape)
      if (2.0 * max_extent + 2.0 > static_cast<double>(d))
        throw SpecInfeasibleError("tumor radius " + std::to_string(r[1]) + " does not fit in shape " +
                                  to_string(shape));
  }
}

namespace {

// Smooth random function on the sphere, bounded by 1 in magnitude.
struct SphericalRipple {
  std::array<double, 4> amp{}, phase_t{}, phase_p{};
  std::array<int, 4> freq_t{}, freq_p{};

  explicit SphericalRipple(Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), ph(0.0, 2.0 * std::numbers::pi);
    std::uniform_int_distribution<int> f(1, 4);
    double norm = 0.0;
    for (int k = 0; k < 4; ++k) {
      amp[k] = u(rng);
      phase_t[k] = ph(rng);
      phase_p[k] = ph(rng);
      freq_t[k] = f(rng);
      freq_p[k] = f(rng);
      norm += std::abs(amp[k]);
    }
    for (auto& a : amp) a /= std::max(norm, 1e-12);
  }

  double operator()(double theta, double phi) const {
    double g = 0.0;
    for (int k = 0; k < 4; ++k) g += amp[k] * std::sin(freq_t[k] * theta + phase_t[k]) * std::cos(freq_p[k] * phi + phase_p[k]);
    return g;
  }
};

// Mean tissue intensity per label (rows: background tissue, 1, 2, 4) and
// channel (T1w, T2w, T1CE, Flair).
constexpr std::array<std::array<float, 4>, 4> kContrast{{
    {1.00f, 1.00f, 1.00f, 1.00f},  // healthy tissue
    {0.60f, 1.70f, 0.65f, 1.10f},  // necrotic / non-enhancing core
    {0.85f, 1.50f, 0.90f, 1.70f},  // edema
    {1.00f, 1.30f, 2.00f, 1.40f},  // enhancing
}};

int contrast_row(std::uint8_t label) {
  switch (label) {
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: return 0;
  }
}

}  // namespace

Case generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };

  const auto [nx, ny, nz] = spec.shape;
  const std::array<double, 3> n{static_cast<double>(nx), static_cast<double>(ny), static_cast<double>(nz)};

  // Low-frequency tissue inhomogeneity.
  std::array<double, 3> freq{}, phase{};
  for (int a = 0; a < 3; ++a) {
    freq[a] = uniform(0.5, 1.5);
    phase[a] = uniform(0.0, 2.0 * std::numbers::pi);
  }

  const auto radius = spec.radius_range();
  const double R = uniform(radius[0], radius[1]);
  std::array<double, 3> stretch{}, centre{};
  for (auto& s : stretch) s = uniform(0.85, 1.15);
  const double irr = spec.irregularity();
  for (int a = 0; a < 3; ++a) {
    const double ext = R * stretch[a] * (1.0 + irr);
    centre[a] = uniform(ext + 1.0, n[a] - ext - 1.0);
  }
  const SphericalRipple outer(rng);
  const SphericalRipple inner(rng);
  const double ef = spec.enhancing_fraction();

  std::vector<std::uint8_t> labels(static_cast<std::size_t>(voxel_count(spec.shape)), 0);
  std::vector<std::uint8_t> brain(labels.size(), 0);
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < ny; ++j)
      for (std::int64_t k = 0; k < nz; ++k) {
        const std::array<double, 3> p{i + 0.5, j + 0.5, k + 0.5};
        double e = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double t = (p[a] - n[a] / 2.0) / (n[a] / 2.0);
          e += t * t;
        }
        const auto idx = linear_index(spec.shape, i, j, k);
        brain[idx] = e <= 1.0;

        const double dx = (p[0] - centre[0]) / stretch[0];
        const double dy = (p[1] - centre[1]) / stretch[1];
        const double dz = (p[2] - centre[2]) / stretch[2];
        const double rho = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double theta = rho > 0.0 ? std::acos(std::clamp(dz / rho, -1.0, 1.0)) : 0.0;
        const double phi = std::atan2(dy, dx);
        const double r_wt = R * (1.0 + irr * outer(theta, phi));
        const double r_core = spec.core_fraction * R * (1.0 + 0.5 * irr * inner(theta, phi));
        if (rho <= r_core) labels[idx] = rho > r_core * (1.0 - ef) ? 4 : 1;
        else if (rho <= r_wt) labels[idx] = 2;
      }

  auto voxels = torch::zeros({4, nx, ny, nz}, torch::kFloat);
  auto* out = voxels.data_ptr<float>();
  const auto plane = static_cast<std::size_t>(voxel_count(spec.shape));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::int64_t i = 0; i < nx; ++i)
    for (std::int64_t j = 0; j < ny; ++j)
      for (std::int64_t k = 0; k < nz; ++k) {
        const auto idx = linear_index(spec.shape, i, j, k);
        if (!brain[idx] && labels[idx] == 0) continue;
        const double shade = 1.0 + 0.08 * std::sin(2 * std::numbers::pi * freq[0] * i / n[0] + phase[0]) +
                             0.08 * std::sin(2 * std::numbers::pi * freq[1] * j / n[1] + phase[1]) +
                             0.08 * std::sin(2 * std::numbers::pi * freq[2] * k / n[2] + phase[2]);
        const auto& contrast = kContrast[static_cast<std::size_t>(contrast_row(labels[idx]))];
        for (int c = 0; c < 4; ++c) {
          const double v = contrast[c] * shade + spec.noise_sigma * noise(rng);
          // Keep tissue strictly positive so the brain mask survives preprocessing.
          out[c * plane + idx] = static_cast<float>(std::max(v, 1e-3));
        }
      }

  Case result;
  result.volume.voxels = voxels;
  result.volume.spacing = spec.spacing;
  result.labels = torch::from_blob(labels.data(), {nx, ny, nz}, torch::kUInt8).clone();
  result.grade = spec.grade;
  result.seed = spec.seed;
  return result;
}

std::vector<Case> generate_phantom_dataset(int count, std::uint64_t seed, const PhantomSpec& base) {
  std::vector<Case> cases;
  cases.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec = base;
    spec.seed = mix_seed(seed, static_cast<std::uint64_t>(i) + 1);
    spec.grade = i % 2 == 0 ? Grade::LGG : Grade::HGG;
    auto c = generate_phantom(spec);
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%04d", i);
    c.volume.case_id = id;
    cases.push_back(std::move(c));
  }
  return cases;
}

namespace {

void write_f32(const fs::path& file, const torch::Tensor& t) {
  auto f = t.to(torch::kFloat).contiguous();
  static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  os.write(reinterpret_cast<const char*>(f.data_ptr<float>()), static_cast<std::streamsize>(f.numel() * 4));
}

torch::Tensor read_f32(const fs::path& file, std::vector<std::int64_t> shape) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("missing file: " + file.string());
  auto t = torch::empty(shape, torch::kFloat);
  is.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
  if (is.gcount() != t.numel() * 4) throw IoError("truncated blob: " + file.string());
  return t;
}

}  // namespace

void save_dataset(const fs::path& dir, const std::vector<Case>& cases) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "aepl-phantoms";
  manifest["version"] = 1;
  manifest["cases"] = json::array();
  for (const auto& c : cases) {
    const auto shape = c.volume.shape();
    const std::string image = c.id() + "_image.f32";
    const std::string labels = c.id() + "_labels.f32";
    write_f32(dir / image, c.volume.voxels);
    write_f32(dir / labels, c.labels);
    manifest["cases"].push_back({{"case_id", c.id()},
                                 {"shape", shape},
                                 {"spacing", c.volume.spacing},
                                 {"grade", std::string(to_string(c.grade))},
                                 {"seed", c.seed},
                                 {"image", image},
                                 {"labels", labels}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

std::vector<Case> load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("missing manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  std::vector<Case> cases;
  for (const auto& entry : manifest.at("cases")) {
    Case c;
    const auto shape = entry.at("shape").get<Shape3>();
    c.volume.case_id = entry.at("case_id").get<std::string>();
    c.volume.spacing = entry.at("spacing").get<Spacing>();
    const auto grade = parse_grade(entry.at("grade").get<std::string>());
    if (!grade) throw IoError("bad grade in manifest for " + c.volume.case_id);
    c.grade = *grade;
    c.seed = entry.value("seed", std::uint64_t{0});
    c.volume.voxels = read_f32(dir / entry.at("image").get<std::string>(), {4, shape[0], shape[1], shape[2]});
    auto labels = read_f32(dir / entry.at("labels").get<std::string>(), {shape[0], shape[1], shape[2]});
    check_label_values(labels.round().to(torch::kInt));
    c.labels = labels.round().to(torch::kUInt8);
    cases.push_back(std::move(c));
  }
  return cases;
}

// ------------------------------------------------------------------ nifti --

Case load_nifti_case(const NiftiCasePaths& paths, Grade grade, std::string case_id) {
  const std::array<const fs::path*, 4> modality{&paths.t1, &paths.t2, &paths.t1ce, &paths.flair};
  std::vector<nifti::Image> images;
  for (const auto* p : modality) images.push_back(nifti::read(*p));
  for (const auto& img : images)
    if (!nifti::same_geometry(img, images.front()))
      throw ShapeMismatchError("modalities differ in shape or affine");
  // Unlabelled scans (prediction only) get an all-background label map.
  nifti::Image label_image = images.front();
  if (paths.labels.empty()) {
    std::fill(label_image.data.begin(), label_image.data.end(), 0.0f);
  } else {
    label_image = nifti::read(paths.labels);
    if (!nifti::same_geometry(label_image, images.front()))
      throw ShapeMismatchError("label map differs in shape or affine from the images");
  }

  const auto [nx, ny, nz] = images.front().dims;
  auto to_tensor = [&](std::vector<float>& data) {
    // File order is x fastest; stored order here is z fastest.
    return torch::from_blob(data.data(), {nz, ny, nx}, torch::kFloat).permute({2, 1, 0}).contiguous();
  };
  std::vector<torch::Tensor> channels;
  for (auto& img : images) channels.push_back(to_tensor(img.data));
  auto labels = to_tensor(label_image.data);
  auto rounded = labels.round();
  if (!torch::equal(rounded, labels) || (labels < 0).any().item<bool>())
    throw UnknownLabelError("label map contains non-integer or negative values");
  check_label_values(rounded.to(torch::kInt));

  Case c;
  c.volume.voxels = torch::stack(channels, 0);
  c.volume.spacing = images.front().spacing;
  c.volume.case_id = std::move(case_id);
  c.labels = rounded.to(torch::kUInt8);
  c.grade = grade;
  c.validate();
  return c;
}

// ------------------------------------------------------------ preprocessing --

CropBox nonzero_bbox(const torch::Tensor& voxels) {
  auto mask = voxels.ne(0).any(0);
  if (!mask.any().item<bool>()) throw EmptyInputError("volume is entirely zero");
  CropBox box;
  for (int a = 0; a < 3; ++a) {
    std::vector<std::int64_t> others;
    for (int b = 0; b < 3; ++b)
      if (b != a) others.push_back(b);
    auto profile = mask.to(torch::kInt).sum(others).nonzero();
    box.lo[a] = profile.min().item<std::int64_t>();
    box.hi[a] = profile.max().item<std::int64_t>() + 1;
  }
  return box;
}

Case preprocess(const Case& c, const PreprocessOptions& opts) {
  c.volume.validate();
  Case out = c;
  const auto box = nonzero_bbox(c.volume.voxels);
  auto voxels = c.volume.voxels.index({Slice(), Slice(box.lo[0], box.hi[0]), Slice(box.lo[1], box.hi[1]),
                                       Slice(box.lo[2], box.hi[2])});
  auto labels = c.labels.index({Slice(box.lo[0], box.hi[0]), Slice(box.lo[1], box.hi[1]), Slice(box.lo[2], box.hi[2])});

  if (opts.target_spacing) {
    bool differs = false;
    for (int a = 0; a < 3; ++a)
      differs |= std::abs(c.volume.spacing[a] - (*opts.target_spacing)[a]) > opts.spacing_tolerance * (*opts.target_spacing)[a];
    if (differs) {
      std::vector<std::int64_t> size;
      for (int a = 0; a < 3; ++a)
        size.push_back(std::max<std::int64_t>(
            1, std::llround(static_cast<double>(voxels.size(a + 1)) * c.volume.spacing[a] / (*opts.target_spacing)[a])));
      namespace F = torch::nn::functional;
      auto mask = voxels.ne(0).any(0, true).to(torch::kFloat).unsqueeze(0);
      voxels = F::interpolate(voxels.unsqueeze(0),
                              F::InterpolateFuncOptions().size(size).mode(torch::kTrilinear).align_corners(false))
                   .squeeze(0);
      mask = F::interpolate(mask, F::InterpolateFuncOptions().size(size).mode(torch::kNearest)).squeeze(0);
      voxels = voxels * mask;
      labels = F::interpolate(labels.to(torch::kFloat).unsqueeze(0).unsqueeze(0),
                              F::InterpolateFuncOptions().size(size).mode(torch::kNearest))
                   .squeeze(0)
                   .squeeze(0)
                   .to(torch::kUInt8);
      out.volume.spacing = *opts.target_spacing;
    }
  }

  voxels = voxels.contiguous().clone();
  auto brain = voxels.ne(0).any(0);
  for (std::int64_t ch = 0; ch < 4; ++ch) {
    auto channel = voxels[ch];
    auto values = channel.masked_select(brain).to(torch::kDouble);
    const double mean = values.mean().item<double>();
    const double sd = values.std(/*unbiased=*/false).item<double>();
    auto normalized = (channel.to(torch::kDouble) - mean) / std::max(sd, 1e-8);
    voxels[ch].copy_(torch::where(brain, normalized, torch::zeros_like(normalized)).to(torch::kFloat));
  }
  out.volume.voxels = voxels;
  out.labels = labels.contiguous().clone();
  return out;
}

// ---------------------------------------------------------- patch sampling --

Shape3 pad_to_at_least(torch::Tensor& image, torch::Tensor& labels, const Shape3& min_shape) {
  Shape3 offset{0, 0, 0};
  std::vector<std::int64_t> pad;  // last axis first, (before, after) pairs
  bool any = false;
  std::array<std::int64_t, 6> p{};
  for (int a = 0; a < 3; ++a) {
    const auto need = std::max<std::int64_t>(0, min_shape[a] - labels.size(a));
    offset[a] = need / 2;
    p[2 * a] = need / 2;
    p[2 * a + 1] = need - need / 2;
    any |= need > 0;
  }
  if (!any) return offset;
  for (int a = 2; a >= 0; --a) {
    pad.push_back(p[2 * a]);
    pad.push_back(p[2 * a + 1]);
  }
  image = torch::constant_pad_nd(image, pad, 0);
  labels = torch::constant_pad_nd(labels, pad, 0);
  return offset;
}

Patch extract_patch(const torch::Tensor& image, const torch::Tensor& labels, const Shape3& origin,
                    const Shape3& patch_size) {
  for (int a = 0; a < 3; ++a)
    if (origin[a] < 0 || origin[a] + patch_size[a] > labels.size(a))
      throw ShapeMismatchError("patch exceeds volume bounds");
  Patch p;
  const auto sx = Slice(origin[0], origin[0] + patch_size[0]);
  const auto sy = Slice(origin[1], origin[1] + patch_size[1]);
  const auto sz = Slice(origin[2], origin[2] + patch_size[2]);
  p.image = image.index({Slice(), sx, sy, sz}).contiguous().clone();
  p.labels = labels.index({sx, sy, sz}).contiguous().clone();
  p.origin = origin;
  return p;
}

Patch sample_patch(const Case& c, const Shape3& patch_size, double fg_prob, Rng& rng) {
  auto image = c.volume.voxels;
  auto labels = c.labels;
  pad_to_at_least(image, labels, patch_size);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool want_fg = unit(rng) < fg_prob;
  Shape3 origin{0, 0, 0};
  bool placed = false;
  if (want_fg) {
    auto fg = labels.nonzero();
    if (fg.size(0) > 0) {
      std::uniform_int_distribution<std::int64_t> pick(0, fg.size(0) - 1);
      const auto row = fg[pick(rng)];
      for (int a = 0; a < 3; ++a) {
        const auto v = row[a].item<std::int64_t>();
        origin[a] = std::clamp<std::int64_t>(v - patch_size[a] / 2, 0, labels.size(a) - patch_size[a]);
      }
      placed = true;
    }
  }
  if (!placed) {
    for (int a = 0; a < 3; ++a) {
      std::uniform_int_distribution<std::int64_t> pos(0, labels.size(a) - patch_size[a]);
      origin[a] = pos(rng);
    }
  }
  return extract_patch(image, labels, origin, patch_size);
}

// ------------------------------------------------------------ augmentation --

void mirror(Patch& p, int axis) {
  p.image = p.image.flip({axis + 1}).contiguous();
  p.labels = p.labels.flip({axis}).contiguous();
}

void rotate(Patch& p, int axis, double degrees) {
  const Shape3 shape{p.labels.size(0), p.labels.size(1), p.labels.size(2)};
  const int u = (axis + 1) % 3;
  const int v = (axis + 2) % 3;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  std::array<double, 3> centre{};
  for (int a = 0; a < 3; ++a) centre[a] = (static_cast<double>(shape[a]) - 1.0) / 2.0;

  auto src_img = p.image.contiguous();
  auto src_lab = p.labels.contiguous();
  auto dst_img = torch::zeros_like(src_img);
  auto dst_lab = torch::zeros_like(src_lab);
  const float* si = src_img.data_ptr<float>();
  const std::uint8_t* sl = src_lab.data_ptr<std::uint8_t>();
  float* di = dst_img.data_ptr<float>();
  std::uint8_t* dl = dst_lab.data_ptr<std::uint8_t>();
  const auto plane = static_cast<std::size_t>(voxel_count(shape));
  const auto channels = src_img.size(0);

  for (std::int64_t i = 0; i < shape[0]; ++i)
    for (std::int64_t j = 0; j < shape[1]; ++j)
      for (std::int64_t k = 0; k < shape[2]; ++k) {
        const std::array<double, 3> q{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
        // Inverse rotation maps the output voxel back into the source grid.
        std::array<double, 3> s = q;
        const double du = q[u] - centre[u], dv = q[v] - centre[v];
        s[u] = centre[u] + cs * du + sn * dv;
        s[v] = centre[v] - sn * du + cs * dv;
        const auto out = linear_index(shape, i, j, k);

        std::array<std::int64_t, 3> nearest{};
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
          nearest[a] = std::llround(s[a]);
          inside &= nearest[a] >= 0 && nearest[a] < shape[a];
        }
        if (inside) dl[out] = sl[linear_index(shape, nearest[0], nearest[1], nearest[2])];

        std::array<std::int64_t, 3> lo{};
        std::array<double, 3> t{};
        for (int a = 0; a < 3; ++a) {
          lo[a] = static_cast<std::int64_t>(std::floor(s[a]));
          t[a] = s[a] - static_cast<double>(lo[a]);
        }
        for (std::int64_t c = 0; c < channels; ++c) {
          double acc = 0.0;
          for (int corner = 0; corner < 8; ++corner) {
            std::array<std::int64_t, 3> idx{};
            double w = 1.0;
            bool ok = true;
            for (int a = 0; a < 3; ++a) {
              const int bit = (corner >> a) & 1;
              idx[a] = lo[a] + bit;
              w *= bit ? t[a] : 1.0 - t[a];
              ok &= idx[a] >= 0 && idx[a] < shape[a];
            }
            if (ok && w > 0.0) acc += w * si[static_cast<std::size_t>(c) * plane + linear_index(shape, idx[0], idx[1], idx[2])];
          }
          di[static_cast<std::size_t>(c) * plane + out] = static_cast<float>(acc);
        }
      }
  p.image = dst_img;
  p.labels = dst_lab;
}

void scale_intensity(Patch& p, int channel, double factor) { p.image[channel].mul_(factor); }

void augment(Patch& p, Rng& rng, const AugmentOptions& opts) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int axis = 0; axis < 3; ++axis)
    if (unit(rng) < opts.mirror_prob) mirror(p, axis);
  if (unit(rng) < opts.rotate_prob) {
    const int axis = std::min(2, static_cast<int>(unit(rng) * 3.0));
    const double angle = (2.0 * unit(rng) - 1.0) * opts.max_rotation_deg;
    rotate(p, axis, angle);
  }
  for (int c = 0; c < p.image.size(0); ++c) {
    if (unit(rng) < opts.intensity_prob) {
      const double f = opts.intensity_range[0] + (opts.intensity_range[1] - opts.intensity_range[0]) * unit(rng);
      scale_intensity(p, c, f);
    }
  }
}

// --------------------------------------------------------------- splitting --

std::vector<Split> split_dataset(const std::vector<Grade>& grades, SplitRatio ratio, std::uint64_t seed) {
  const double total = ratio.train + ratio.val + ratio.test;
  if (!(total > 0.0) || ratio.train < 0 || ratio.val < 0 || ratio.test < 0) throw ConfigError("invalid split ratio");
  std::vector<Split> out(grades.size(), Split::Unassigned);
  for (Grade g : {Grade::LGG, Grade::HGG}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < grades.size(); ++i)
      if (grades[i] == g) idx.push_back(i);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index_of(g)) + 100));
    std::shuffle(idx.begin(), idx.end(), rng);
    const double n = static_cast<double>(idx.size());
    const auto n_val = static_cast<std::size_t>(std::llround(n * ratio.val / total));
    const auto n_test = std::min(idx.size() - n_val, static_cast<std::size_t>(std::llround(n * ratio.test / total)));
    for (std::size_t r = 0; r < idx.size(); ++r)
      out[idx[r]] = r < n_val ? Split::Val : r < n_val + n_test ? Split::Test : Split::Train;
  }
  return out;
}

SplitManifest make_split_manifest(const std::vector<Case>& cases, SplitRatio ratio, std::uint64_t seed) {
  std::vector<Grade> grades;
  for (const auto& c : cases) grades.push_back(c.grade);
  const auto splits = split_dataset(grades, ratio, seed);
  SplitManifest m;
  m.seed = seed;
  m.ratio = ratio;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto& bucket = splits[i] == Split::Train ? m.train : splits[i] == Split::Val ? m.val : m.test;
    bucket.push_back(cases[i].id());
  }
  return m;
}

void apply_split(std::vector<Case>& cases, const SplitManifest& manifest) {
  std::unordered_map<std::string, Split> lookup;
  for (const auto& id : manifest.train) lookup[id] = Split::Train;
  for (const auto& id : manifest.val) lookup[id] = Split::Val;
  for (const auto& id : manifest.test) lookup[id] = Split::Test;
  for (auto& c : cases) {
    auto it = lookup.find(c.id());
    c.split = it == lookup.end() ? Split::Unassigned : it->second;
  }
}

void save_split(const fs::path& file, const SplitManifest& m) {
  json j{{"seed", m.seed},
         {"ratio", {m.ratio.train, m.ratio.val, m.ratio.test}},
         {"train", m.train},
         {"val", m.val},
         {"test", m.test}};
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << j.dump(2) << '\n';
}

SplitManifest load_split(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("missing split manifest " + file.string());
  const auto j = json::parse(is);
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto r = j.at("ratio").get<std::array<double, 3>>();
  m.ratio = {r[0], r[1], r[2]};
  m.train = j.at("train").get<std::vector<std::string>>();
  m.val = j.at("val").get<std::vector<std::string>>();
  m.test = j.at("test").get<std::vector<std::string>>();
  return m;
}

}  // namespace aepl
