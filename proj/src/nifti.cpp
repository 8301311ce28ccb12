#include "aepl/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <memory>

#include "aepl/errors.hpp"

namespace aepl::nifti {

namespace {

constexpr int kHeaderSize = 348;

struct GzCloser {
  void operator()(gzFile_s* f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

template <typename T>
T byteswap_value(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

class HeaderView {
 public:
  HeaderView(const unsigned char* raw, bool swap) : raw_(raw), swap_(swap) {}

  template <typename T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, raw_ + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }

 private:
  const unsigned char* raw_;
  bool swap_;
};

template <typename T>
void put(unsigned char* raw, std::size_t offset, T v) {
  std::memcpy(raw + offset, &v, sizeof(T));
}

void read_exact(gzFile f, void* dst, std::size_t n, const std::filesystem::path& path) {
  auto* out = static_cast<unsigned char*>(dst);
  while (n > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw IoError("truncated NIfTI file: " + path.string());
    out += got;
    n -= static_cast<std::size_t>(got);
  }
}

template <typename T>
void convert(const std::vector<unsigned char>& bytes, bool swap, std::vector<float>& out) {
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
    if (swap) v = byteswap_value(v);
    out[i] = static_cast<float>(v);
  }
}

bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

}  // namespace

Image read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing file: " + path.string());
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());

  std::array<unsigned char, kHeaderSize> raw{};
  read_exact(f.get(), raw.data(), raw.size(), path);
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, raw.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    if (byteswap_value(sizeof_hdr) != kHeaderSize) throw IoError("not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  const HeaderView h(raw.data(), swap);
  if (std::memcmp(raw.data() + 344, "n+1", 3) != 0) throw IoError("only single-file NIfTI-1 (.nii) is supported");

  Image img;
  const auto ndim = h.get<std::int16_t>(40);
  if (ndim < 3) throw IoError("expected a 3D image in " + path.string());
  for (int a = 0; a < 3; ++a) img.dims[a] = h.get<std::int16_t>(42 + 2 * a);
  for (int a = 3; a < std::min<int>(ndim, 7); ++a)
    if (h.get<std::int16_t>(42 + 2 * a) > 1) throw IoError("multi-volume NIfTI files are not supported");
  for (int a = 0; a < 3; ++a) img.spacing[a] = std::abs(h.get<float>(80 + 4 * a));
  img.sform_code = h.get<std::int16_t>(254);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) img.srow[r][c] = h.get<float>(280 + 16 * r + 4 * c);

  const auto datatype = h.get<std::int16_t>(70);
  const auto vox_offset = static_cast<std::size_t>(h.get<float>(108));
  float slope = h.get<float>(112);
  const float inter = h.get<float>(116);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  if (vox_offset > kHeaderSize) {
    std::vector<unsigned char> skip(vox_offset - kHeaderSize);
    read_exact(f.get(), skip.data(), skip.size(), path);
  }

  const auto n = static_cast<std::size_t>(voxel_count(img.dims));
  std::size_t elem = 0;
  switch (datatype) {
    case 2: case 256: elem = 1; break;
    case 4: case 512: elem = 2; break;
    case 8: case 16: case 768: elem = 4; break;
    case 64: elem = 8; break;
    default: throw IoError("unsupported NIfTI datatype " + std::to_string(datatype));
  }
  std::vector<unsigned char> bytes(n * elem);
  read_exact(f.get(), bytes.data(), bytes.size(), path);
  img.data.resize(n);
  switch (datatype) {
    case 2: convert<std::uint8_t>(bytes, swap, img.data); break;
    case 256: convert<std::int8_t>(bytes, swap, img.data); break;
    case 4: convert<std::int16_t>(bytes, swap, img.data); break;
    case 512: convert<std::uint16_t>(bytes, swap, img.data); break;
    case 8: convert<std::int32_t>(bytes, swap, img.data); break;
    case 768: convert<std::uint32_t>(bytes, swap, img.data); break;
    case 16: convert<float>(bytes, swap, img.data); break;
    case 64: convert<double>(bytes, swap, img.data); break;
  }
  if (slope != 1.0f || inter != 0.0f)
    for (auto& v : img.data) v = v * slope + inter;
  return img;
}

void write(const std::filesystem::path& path, const Image& image, int datatype) {
  std::array<unsigned char, kHeaderSize + 4> raw{};
  put<std::int32_t>(raw.data(), 0, kHeaderSize);
  put<std::int16_t>(raw.data(), 40, 3);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(raw.data(), 42 + 2 * a, static_cast<std::int16_t>(image.dims[a]));
  for (int a = 4; a < 8; ++a) put<std::int16_t>(raw.data(), 40 + 2 * a, 1);
  int bitpix = 0;
  switch (datatype) {
    case 2: bitpix = 8; break;
    case 4: bitpix = 16; break;
    case 16: bitpix = 32; break;
    default: throw IoError("write: unsupported datatype " + std::to_string(datatype));
  }
  put<std::int16_t>(raw.data(), 70, static_cast<std::int16_t>(datatype));
  put<std::int16_t>(raw.data(), 72, static_cast<std::int16_t>(bitpix));
  put<float>(raw.data(), 76, 1.0f);
  for (int a = 0; a < 3; ++a) put<float>(raw.data(), 80 + 4 * a, static_cast<float>(image.spacing[a]));
  put<float>(raw.data(), 108, static_cast<float>(kHeaderSize + 4));
  put<float>(raw.data(), 112, 1.0f);
  raw[123] = 2;  // mm
  put<std::int16_t>(raw.data(), 254, static_cast<std::int16_t>(image.sform_code));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(raw.data(), 280 + 16 * r + 4 * c, static_cast<float>(image.srow[r][c]));
  std::memcpy(raw.data() + 344, "n+1", 4);

  std::vector<unsigned char> payload;
  const std::size_t n = image.data.size();
  if (static_cast<std::int64_t>(n) != voxel_count(image.dims)) throw ShapeMismatchError("write: data size mismatch");
  payload.resize(n * static_cast<std::size_t>(bitpix / 8));
  for (std::size_t i = 0; i < n; ++i) {
    const float v = image.data[i];
    switch (datatype) {
      case 2: payload[i] = static_cast<std::uint8_t>(std::lround(v)); break;
      case 4: {
        const auto s = static_cast<std::int16_t>(std::lround(v));
        std::memcpy(payload.data() + 2 * i, &s, 2);
        break;
      }
      case 16: std::memcpy(payload.data() + 4 * i, &v, 4); break;
    }
  }

  GzHandle f(gzopen(path.c_str(), is_gz(path) ? "wb6" : "wbT"));
  if (!f) throw IoError("cannot write " + path.string());
  if (gzwrite(f.get(), raw.data(), static_cast<unsigned>(raw.size())) != static_cast<int>(raw.size()))
    throw IoError("write failed: " + path.string());
  std::size_t off = 0;
  while (off < payload.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(payload.size() - off, 1u << 30));
    if (gzwrite(f.get(), payload.data() + off, chunk) != static_cast<int>(chunk))
      throw IoError("write failed: " + path.string());
    off += chunk;
  }
}

bool same_geometry(const Image& a, const Image& b, double tol) {
  if (a.dims != b.dims) return false;
  for (int i = 0; i < 3; ++i)
    if (std::abs(a.spacing[i] - b.spacing[i]) > tol) return false;
  if (a.sform_code > 0 || b.sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c)
        if (std::abs(a.srow[r][c] - b.srow[r][c]) > tol) return false;
  }
  return true;
}

}  // namespace aepl::nifti
