#include "dar/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "dar/error.hpp"

namespace dar {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'N', 'V', 'O', 'L'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 2 + 3 * 4 + 3 * 4;
// Largest voxel count we are willing to allocate (4 GiB of f32).
constexpr std::uint64_t kMaxVoxels = std::uint64_t{1} << 30;

template <typename T>
void put_le(std::vector<char>& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.insert(buf.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::size_t voxel_count(const Volume::Dims& d) {
  return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) * static_cast<std::size_t>(d[2]);
}

// Source coordinate for output sample i when mapping n_in samples onto n_out
// over the same physical extent (pixel-centre convention, edge clamped).
inline double source_coord(int i, int n_in, int n_out) {
  const double s = (i + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(n_in - 1));
}

struct Lerp {
  int i0;
  int i1;
  double w;  // weight of i1
};

inline Lerp lerp_at(double s, int n) {
  const int i0 = static_cast<int>(std::floor(s));
  const int i1 = std::min(i0 + 1, n - 1);
  return {i0, i1, s - i0};
}

}  // namespace

Volume::Volume(Dims dims, Spacing spacing, float fill) : dims_(dims), spacing_(spacing) {
  for (int d : dims_) {
    if (d <= 0) throw DataError("volume dimensions must be positive");
  }
  for (float s : spacing_) {
    if (!(s > 0.0f)) throw DataError("volume spacing must be positive");
  }
  voxels_.assign(voxel_count(dims_), fill);
}

Volume::Volume(Dims dims, Spacing spacing, std::vector<float> voxels) : Volume(dims, spacing) {
  if (voxels.size() != voxels_.size()) throw DataError("voxel count does not match dimensions");
  voxels_ = std::move(voxels);
}

const char* to_string(View view) {
  switch (view) {
    case View::axial:
      return "axial";
    case View::sagittal:
      return "sagittal";
    case View::coronal:
      return "coronal";
  }
  return "unknown";
}

View view_from_string(const std::string& name) {
  for (View v : kViews) {
    if (name == to_string(v)) return v;
  }
  throw ConfigError("unknown view '" + name + "'");
}

const Image2D& PatchTriplet::operator[](View v) const {
  switch (v) {
    case View::axial:
      return axial;
    case View::sagittal:
      return sagittal;
    case View::coronal:
      return coronal;
  }
  return axial;
}

Image2D& PatchTriplet::operator[](View v) {
  return const_cast<Image2D&>(static_cast<const PatchTriplet&>(*this)[v]);
}

Volume read_volume(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open volume " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kHeaderBytes) throw DataError(path.string() + ": truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw DataError(path.string() + ": bad magic");
  const char* p = bytes.data() + 4;
  const auto version = get_le<std::uint16_t>(p);
  if (version != kVersion) throw DataError(path.string() + ": unsupported NVOL version " + std::to_string(version));
  p += 4;  // version + reserved
  std::array<std::uint32_t, 3> raw_dims{};
  for (auto& d : raw_dims) {
    d = get_le<std::uint32_t>(p);
    p += 4;
  }
  Volume::Spacing spacing{};
  for (auto& s : spacing) {
    s = get_le<float>(p);
    p += 4;
  }
  std::uint64_t count = 1;
  for (auto d : raw_dims) {
    if (d == 0 || d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      throw DataError(path.string() + ": dimension overflow");
    }
    count *= d;
    if (count > kMaxVoxels) throw DataError(path.string() + ": dimension overflow");
  }
  const std::uint64_t payload = bytes.size() - kHeaderBytes;
  if (payload < count * 4) {
    throw DataError(path.string() + ": truncated payload (" + std::to_string(payload / 4) + " of " +
                    std::to_string(count) + " voxels)");
  }
  std::vector<float> voxels(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(voxels.data(), p, count * 4);
  } else {
    for (std::size_t i = 0; i < count; ++i) voxels[i] = get_le<float>(p + 4 * i);
  }
  return Volume({static_cast<int>(raw_dims[0]), static_cast<int>(raw_dims[1]), static_cast<int>(raw_dims[2])},
                spacing, std::move(voxels));
}

void write_volume(const Volume& volume, const fs::path& path) {
  std::vector<char> buf;
  buf.reserve(kHeaderBytes + volume.voxels().size() * 4);
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put_le<std::uint16_t>(buf, kVersion);
  put_le<std::uint16_t>(buf, 0);
  for (int d : volume.dims()) put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
  for (float s : volume.spacing()) put_le<float>(buf, s);
  for (float v : volume.voxels()) put_le<float>(buf, v);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write volume " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Volume resample_isotropic(const Volume& volume) {
  const auto& in_dims = volume.dims();
  Volume::Dims out_dims{};
  for (int a = 0; a < 3; ++a) {
    out_dims[a] = std::max(1, static_cast<int>(std::lround(in_dims[a] * static_cast<double>(volume.spacing()[a]))));
  }
  Volume out(out_dims, {1.0f, 1.0f, 1.0f});
  if (out_dims == in_dims) {
    out.voxels() = volume.voxels();
    return out;
  }
  std::array<std::vector<Lerp>, 3> taps;
  for (int a = 0; a < 3; ++a) {
    taps[a].reserve(out_dims[a]);
    for (int i = 0; i < out_dims[a]; ++i) taps[a].push_back(lerp_at(source_coord(i, in_dims[a], out_dims[a]), in_dims[a]));
  }
  for (int z = 0; z < out_dims[2]; ++z) {
    const Lerp& tz = taps[2][z];
    for (int y = 0; y < out_dims[1]; ++y) {
      const Lerp& ty = taps[1][y];
      for (int x = 0; x < out_dims[0]; ++x) {
        const Lerp& tx = taps[0][x];
        auto plane = [&](int zi) {
          const double a = volume.at(tx.i0, ty.i0, zi) * (1 - tx.w) + volume.at(tx.i1, ty.i0, zi) * tx.w;
          const double b = volume.at(tx.i0, ty.i1, zi) * (1 - tx.w) + volume.at(tx.i1, ty.i1, zi) * tx.w;
          return a * (1 - ty.w) + b * ty.w;
        };
        out.at(x, y, z) = static_cast<float>(plane(tz.i0) * (1 - tz.w) + plane(tz.i1) * tz.w);
      }
    }
  }
  return out;
}

Volume crop_cube(const Volume& volume, const VoxelCoord& center, int side, float fill) {
  if (side <= 0) throw DataError("crop side must be positive");
  if (!volume.contains(center)) {
    throw DataError("crop centre (" + std::to_string(center.x) + "," + std::to_string(center.y) + "," +
                    std::to_string(center.z) + ") lies outside the volume");
  }
  Volume out({side, side, side}, volume.spacing(), fill);
  const int half = side / 2;
  const int x0 = center.x - half, y0 = center.y - half, z0 = center.z - half;
  const auto& d = volume.dims();
  for (int z = 0; z < side; ++z) {
    const int sz = z0 + z;
    if (sz < 0 || sz >= d[2]) continue;
    for (int y = 0; y < side; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= d[1]) continue;
      for (int x = 0; x < side; ++x) {
        const int sx = x0 + x;
        if (sx < 0 || sx >= d[0]) continue;
        out.at(x, y, z) = volume.at(sx, sy, sz);
      }
    }
  }
  return out;
}

PatchTriplet extract_triplanar(const Volume& cube) {
  const auto& d = cube.dims();
  if (d[0] != d[1] || d[1] != d[2]) throw DataError("extract_triplanar needs a cubic volume");
  const int s = d[0];
  const int mid = s / 2;
  PatchTriplet t{Image2D(s, s), Image2D(s, s), Image2D(s, s)};
  for (int r = 0; r < s; ++r) {
    for (int c = 0; c < s; ++c) {
      t.axial(r, c) = cube.at(c, r, mid);     // rows y, cols x
      t.sagittal(r, c) = cube.at(mid, c, r);  // rows z, cols y
      t.coronal(r, c) = cube.at(c, mid, r);   // rows z, cols x
    }
  }
  return t;
}

Image2D resize_patch(const Image2D& patch, int target) {
  if (!patch.square()) throw DataError("resize_patch expects a square patch");
  if (target <= 0) throw DataError("resize target must be positive");
  const int s = patch.rows;
  if (s == target) return patch;
  Image2D out(target, target);
  std::vector<Lerp> taps;
  taps.reserve(target);
  for (int i = 0; i < target; ++i) taps.push_back(lerp_at(source_coord(i, s, target), s));
  for (int r = 0; r < target; ++r) {
    const Lerp& tr = taps[r];
    for (int c = 0; c < target; ++c) {
      const Lerp& tc = taps[c];
      const double top = patch(tr.i0, tc.i0) * (1 - tc.w) + patch(tr.i0, tc.i1) * tc.w;
      const double bot = patch(tr.i1, tc.i0) * (1 - tc.w) + patch(tr.i1, tc.i1) * tc.w;
      out(r, c) = static_cast<float>(top * (1 - tr.w) + bot * tr.w);
    }
  }
  return out;
}

Image2D normalize_intensity(const Image2D& patch, IntensityWindow window) {
  if (!(window.lo < window.hi)) throw DataError("intensity window needs lo < hi");
  Image2D out = patch;
  const float span = window.hi - window.lo;
  for (float& v : out.values) v = (std::clamp(v, window.lo, window.hi) - window.lo) / span;
  return out;
}

AugmentParams draw_augment(std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> angle(-90.0, 90.0);
  AugmentParams p;
  p.hflip = coin(rng);
  p.vflip = coin(rng);
  p.angle_deg = angle(rng);
  return p;
}

Image2D apply_augment(const Image2D& patch, const AugmentParams& params) {
  const int rows = patch.rows, cols = patch.cols;
  Image2D flipped(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const int sr = params.vflip ? rows - 1 - r : r;
    for (int c = 0; c < cols; ++c) {
      const int sc = params.hflip ? cols - 1 - c : c;
      flipped(r, c) = patch(sr, sc);
    }
  }
  if (params.angle_deg == 0.0) return flipped;

  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  double cs = std::cos(theta), sn = std::sin(theta);
  // Snap the exact quarter turns so they stay pure index permutations.
  if (std::abs(cs) < 1e-12) cs = 0.0;
  if (std::abs(sn) < 1e-12) sn = 0.0;
  const double cr = (rows - 1) / 2.0, cc = (cols - 1) / 2.0;
  Image2D out(rows, cols, 0.0f);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      // y axis points up; inverse-rotate the output position into the source.
      const double x = c - cc, y = cr - r;
      const double xs = cs * x + sn * y;
      const double ys = -sn * x + cs * y;
      const double fc = xs + cc, fr = cr - ys;
      const int c0 = static_cast<int>(std::floor(fc)), r0 = static_cast<int>(std::floor(fr));
      const double wc = fc - c0, wr = fr - r0;
      double acc = 0.0;
      for (int dr = 0; dr < 2; ++dr) {
        for (int dc = 0; dc < 2; ++dc) {
          const double w = (dr ? wr : 1 - wr) * (dc ? wc : 1 - wc);
          if (w == 0.0) continue;
          const int rr = r0 + dr, cc2 = c0 + dc;
          if (rr < 0 || rr >= rows || cc2 < 0 || cc2 >= cols) continue;  // zero fill
          acc += w * flipped(rr, cc2);
        }
      }
      out(r, c) = static_cast<float>(acc);
    }
  }
  return out;
}

PatchTriplet apply_augment(const PatchTriplet& triplet, const AugmentParams& params) {
  return {apply_augment(triplet.axial, params), apply_augment(triplet.sagittal, params),
          apply_augment(triplet.coronal, params)};
}

PatchTriplet augment(const PatchTriplet& triplet, std::mt19937_64& rng) {
  return apply_augment(triplet, draw_augment(rng));
}

PatchTriplet preprocess_volume(const Volume& volume, const VoxelCoord& center, const PrepConfig& cfg) {
  if (!volume.contains(center)) {
    throw DataError("nodule centre (" + std::to_string(center.x) + "," + std::to_string(center.y) + "," +
                    std::to_string(center.z) + ") lies outside the volume");
  }
  VoxelCoord c = center;
  const Volume* src = &volume;
  Volume resampled;
  if (cfg.resample) {
    resampled = resample_isotropic(volume);
    // Centre moves with the grid: same physical point on the new 1 mm lattice.
    const auto& din = volume.dims();
    const auto& dout = resampled.dims();
    auto map = [](int v, int nin, int nout) {
      const double p = (v + 0.5) * static_cast<double>(nout) / nin - 0.5;
      return std::clamp(static_cast<int>(std::lround(p)), 0, nout - 1);
    };
    c = {map(center.x, din[0], dout[0]), map(center.y, din[1], dout[1]), map(center.z, din[2], dout[2])};
    src = &resampled;
  }
  const Volume cube = crop_cube(*src, c, cfg.crop_side, cfg.window.lo);
  PatchTriplet t = extract_triplanar(cube);
  for (View v : kViews) t[v] = normalize_intensity(resize_patch(t[v], cfg.patch_size), cfg.window);
  return t;
}

}  // namespace dar
