#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "dar/data_model.hpp"

namespace dar {

/// Scalar voxel grid, x fastest: index = x + nx * (y + ny * z).
class Volume {
 public:
  using Dims = std::array<int, 3>;
  using Spacing = std::array<float, 3>;

  Volume() = default;
  Volume(Dims dims, Spacing spacing, float fill = 0.0f);
  Volume(Dims dims, Spacing spacing, std::vector<float> voxels);

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  const std::vector<float>& voxels() const noexcept { return voxels_; }
  std::vector<float>& voxels() noexcept { return voxels_; }

  std::size_t index(int x, int y, int z) const noexcept {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_[1]) * z);
  }
  float at(int x, int y, int z) const { return voxels_[index(x, y, z)]; }
  float& at(int x, int y, int z) { return voxels_[index(x, y, z)]; }
  bool contains(const VoxelCoord& c) const noexcept {
    return c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < dims_[0] && c.y < dims_[1] && c.z < dims_[2];
  }

 private:
  Dims dims_{0, 0, 0};
  Spacing spacing_{1.0f, 1.0f, 1.0f};
  std::vector<float> voxels_;
};

/// Row-major 2D image; rows == cols for every patch fed to the networks.
struct Image2D {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;

  Image2D() = default;
  Image2D(int r, int c, float fill = 0.0f)
      : rows(r), cols(c), values(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

  float& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  float operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  bool square() const noexcept { return rows == cols; }
  friend bool operator==(const Image2D&, const Image2D&) = default;
};

enum class View { axial = 0, sagittal = 1, coronal = 2 };
inline constexpr std::array<View, 3> kViews{View::axial, View::sagittal, View::coronal};
const char* to_string(View view);
View view_from_string(const std::string& name);

struct PatchTriplet {
  Image2D axial;
  Image2D sagittal;
  Image2D coronal;

  const Image2D& operator[](View v) const;
  Image2D& operator[](View v);
};

// NVOL on-disk volumes.
Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);

/// Trilinear resample onto a 1 mm grid; output dims are round(dim * spacing), at least 1.
Volume resample_isotropic(const Volume& volume);

/// side^3 cube whose voxel (side/2, side/2, side/2) is `center`; voxels outside
/// the source take `fill`.
Volume crop_cube(const Volume& volume, const VoxelCoord& center, int side = 64, float fill = 0.0f);

/// Central axial (z), sagittal (x) and coronal (y) slices of a cubic volume.
PatchTriplet extract_triplanar(const Volume& cube);

Image2D resize_patch(const Image2D& patch, int target);

struct IntensityWindow {
  float lo = 0.0f;
  float hi = 1.0f;
};
inline constexpr IntensityWindow kLungWindow{-1000.0f, 400.0f};
inline constexpr IntensityWindow kIdentityWindow{0.0f, 1.0f};

Image2D normalize_intensity(const Image2D& patch, IntensityWindow window = kIdentityWindow);

// Online augmentation. One draw is shared by all three views of a sample.
struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;  // counter-clockwise, in [-90, 90]
};

AugmentParams draw_augment(std::mt19937_64& rng);

/// Flips first (horizontal, then vertical), then rotation about the patch
/// centre with bilinear sampling and zero fill.
Image2D apply_augment(const Image2D& patch, const AugmentParams& params);
PatchTriplet apply_augment(const PatchTriplet& triplet, const AugmentParams& params);
PatchTriplet augment(const PatchTriplet& triplet, std::mt19937_64& rng);

struct PrepConfig {
  bool resample = true;
  int crop_side = 64;
  int patch_size = 64;
  IntensityWindow window = kIdentityWindow;
};

/// Full chain: resample, crop at the record centre (padded with the window
/// minimum), tri-planar slices, resize, normalize.
PatchTriplet preprocess_volume(const Volume& volume, const VoxelCoord& center, const PrepConfig& cfg);

}  // namespace dar
