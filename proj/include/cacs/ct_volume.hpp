#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cacs {

constexpr double kHuMin = -1024.0;
constexpr double kHuMax = 3071.0;
constexpr int kClinicalMinSlices = 100;
constexpr int kPhantomMinSlices = 20;
constexpr double kMaxSliceThicknessMm = 3.0;

// Axis-aligned voxel box, lo inclusive, hi exclusive.
struct BoundingBox {
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> hi{0, 0, 0};

    int size(int axis) const { return hi[axis] - lo[axis]; }
    bool valid() const { return lo[0] < hi[0] && lo[1] < hi[1] && lo[2] < hi[2]; }
    bool contains(const BoundingBox& inner) const;
    bool contains_voxel(int x, int y, int z) const;

    double intersection_over_union(const BoundingBox& other) const;

    bool operator==(const BoundingBox& other) const = default;
};

// 3D grid of HU values with physical spacing. Values are kept as float;
// everything produced by the phantom generator and the file loader is
// integer-valued, resampling introduces fractional slab means.
class CtVolume {
public:
    CtVolume() = default;
    CtVolume(int nx, int ny, int nz, double sx, double sy, double sz,
             std::string subject_id = {}, float fill = 0.0f);

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    int nz() const { return nz_; }
    double sx() const { return sx_; }
    double sy() const { return sy_; }
    double sz() const { return sz_; }
    double effective_thickness_mm() const { return effective_thickness_mm_; }
    void set_effective_thickness_mm(double t) { effective_thickness_mm_ = t; }
    const std::string& subject_id() const { return subject_id_; }
    void set_subject_id(std::string id) { subject_id_ = std::move(id); }

    size_t voxel_count() const { return voxels_.size(); }
    double voxel_volume_mm3() const { return sx_ * sy_ * sz_; }
    double pixel_area_mm2() const { return sx_ * sy_; }

    size_t index(int x, int y, int z) const {
        return (static_cast<size_t>(z) * ny_ + y) * nx_ + x;
    }
    float at(int x, int y, int z) const { return voxels_[index(x, y, z)]; }
    void set(int x, int y, int z, float v) { voxels_[index(x, y, z)] = v; }

    const std::vector<float>& voxels() const { return voxels_; }
    std::vector<float>& voxels() { return voxels_; }

    BoundingBox full_box() const { return BoundingBox{{0, 0, 0}, {nx_, ny_, nz_}}; }
    bool in_bounds(const BoundingBox& box) const;

    bool operator==(const CtVolume& other) const = default;

private:
    int nx_ = 0, ny_ = 0, nz_ = 0;
    double sx_ = 1.0, sy_ = 1.0, sz_ = 1.0;
    double effective_thickness_mm_ = 1.0;
    std::string subject_id_;
    std::vector<float> voxels_;
};

// Single 2D image, row-major, rows x cols.
struct Slice2d {
    int rows = 0;
    int cols = 0;
    std::vector<float> v;

    Slice2d() = default;
    Slice2d(int r, int c, float fill = 0.0f)
        : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}

    float& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
};

// CTVOL container format, bit-exact; see save_volume for the layout.
CtVolume load_volume(const std::string& path);
void save_volume(const CtVolume& vol, const std::string& path);

struct ScreeningCheck {
    bool accepted = false;
    std::string reason;   // empty when accepted
    int min_slices = kClinicalMinSlices;
};

// Scan exclusion rules, evaluated at native resolution. The slice floor may
// be lowered for desk-scale phantoms; the applied floor is recorded.
ScreeningCheck validate_for_scoring(const CtVolume& vol,
                                    int min_slices = kClinicalMinSlices);

// Overlap-weighted slab averaging along z: output slabs of `thickness_mm`
// spaced `increment_mm` apart. Output spacing sz == increment; the slab
// thickness is recorded as the effective thickness.
CtVolume resample_z(const CtVolume& vol, double thickness_mm = 3.0,
                    double increment_mm = 1.5);

CtVolume crop(const CtVolume& vol, const BoundingBox& box);

Slice2d extract_axial_slice(const CtVolume& vol, int z);
Slice2d extract_coronal_slice(const CtVolume& vol, int y);   // rows=z, cols=x
Slice2d extract_sagittal_slice(const CtVolume& vol, int x);  // rows=z, cols=y

// Centers the slice on a target canvas filled with `pad_value` (air).
// Errors when the slice exceeds the canvas: the cropped heart is larger
// than the network input.
Slice2d pad_slice_to(const Slice2d& slice, int target_rows, int target_cols,
                     float pad_value = static_cast<float>(kHuMin));

}  // namespace cacs
