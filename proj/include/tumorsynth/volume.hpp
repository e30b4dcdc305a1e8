#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tumorsynth {

/// Voxel extents in (depth, height, width) order.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Shape3&) const = default;
};

/// Physical voxel size in millimetres, (depth, height, width) order.
struct Spacing3 {
  double d = 1.0;
  double h = 1.0;
  double w = 1.0;

  bool operator==(const Spacing3&) const = default;
};

struct Index3 {
  int z = 0;
  int y = 0;
  int x = 0;

  bool operator==(const Index3&) const = default;
};

/// Intensity window used for CT normalization, in Hounsfield units.
inline constexpr double kHuMin = -175.0;
inline constexpr double kHuMax = 250.0;

/// Desk-scale default training patch edge; 96 is the full-scale setting.
inline constexpr int kDefaultPatchEdge = 32;

/// 3D scalar grid with spacing. Row-major, W fastest.
class Volume {
 public:
  Volume() = default;
  explicit Volume(Shape3 shape, Spacing3 spacing = {}, bool normalized = false);
  Volume(Shape3 shape, std::vector<float> data, Spacing3 spacing = {}, bool normalized = false);

  const Shape3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  bool normalized() const { return normalized_; }
  void set_normalized(bool n) { normalized_ = n; }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape_.h + y) * shape_.w + x;
  }
  float& at(int z, int y, int x) { return data_[index(z, y, x)]; }
  float at(int z, int y, int x) const { return data_[index(z, y, x)]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  /// Throws ContractError if the invariants (extents, spacing, [0,1] range when normalized) fail.
  void validate() const;

 private:
  Shape3 shape_;
  Spacing3 spacing_;
  bool normalized_ = false;
  std::vector<float> data_;
};

/// Binary mask aligned to a Volume.
class TumorMask {
 public:
  TumorMask() = default;
  explicit TumorMask(Shape3 shape);
  TumorMask(Shape3 shape, std::vector<std::uint8_t> data);

  const Shape3& shape() const { return shape_; }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape_.h + y) * shape_.w + x;
  }
  std::uint8_t& at(int z, int y, int x) { return data_[index(z, y, x)]; }
  std::uint8_t at(int z, int y, int x) const { return data_[index(z, y, x)]; }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < shape_.d && y < shape_.h && x < shape_.w;
  }

  std::span<std::uint8_t> data() { return data_; }
  std::span<const std::uint8_t> data() const { return data_; }

  std::size_t count() const;
  bool empty() const { return count() == 0; }

  bool operator==(const TumorMask&) const = default;

 private:
  Shape3 shape_;
  std::vector<std::uint8_t> data_;
};

struct BoundingBox {
  Index3 min;
  Index3 max;  // inclusive
};

/// Bounding box of the set voxels; throws ContractError on an empty mask.
BoundingBox bounding_box(const TumorMask& m);

/// Mask volume in cubic millimetres.
double mask_volume_mm3(const TumorMask& m, const Spacing3& spacing);

/// Diameter of the sphere with the same volume: 2 * (3V / 4pi)^(1/3).
double equivalent_diameter_mm(double volume_mm3);

enum class VolumeFormat { native, nifti };

/// Loads a volume. Native paths may name the header (.hdr), the payload (.raw) or the common stem.
Volume load_volume(const std::filesystem::path& path, VolumeFormat format = VolumeFormat::native);

/// Writes `<stem>.hdr` and `<stem>.raw`.
void save_volume(const std::filesystem::path& stem, const Volume& v);

/// Masks use the native volume container with 0/1 values.
TumorMask load_mask(const std::filesystem::path& path, VolumeFormat format = VolumeFormat::native);
void save_mask(const std::filesystem::path& stem, const TumorMask& m, const Spacing3& spacing = {});

std::filesystem::path native_header_path(const std::filesystem::path& p);
std::filesystem::path native_payload_path(const std::filesystem::path& p);

/// Clip to the CT window and rescale to [0, 1].
Volume preprocess(const Volume& v);

/// The scalar map used by preprocess.
inline double normalize_hu(double hu) {
  const double c = hu < kHuMin ? kHuMin : (hu > kHuMax ? kHuMax : hu);
  return (c - kHuMin) / (kHuMax - kHuMin);
}
inline double denormalize_hu(double v) { return kHuMin + v * (kHuMax - kHuMin); }

/// Trilinear resampling onto a new voxel spacing (edge-clamped).
Volume resample(const Volume& v, const Spacing3& target);

struct Patch {
  Volume volume;
  TumorMask mask;
  Index3 origin;  // position of the patch's first voxel in the source grid
};

/// Crops a patch of `size` centred on the mask's bounding-box centre, clamped to the grid.
Patch crop_patch(const Volume& v, const TumorMask& m, Shape3 size);

/// Same, with an explicit centre (no mask requirement).
Patch crop_patch_at(const Volume& v, const TumorMask& m, Shape3 size, Index3 center);

/// Nearest-neighbour scaling of the mask about its centroid; the input support is always kept.
TumorMask magnify_mask(const TumorMask& m, double factor);

/// Zero the masked voxels: (1 - m) * x.
Volume apply_inverse_mask(const Volume& v, const TumorMask& m);

}  // namespace tumorsynth
