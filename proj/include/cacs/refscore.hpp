#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "cacs/ct_volume.hpp"

namespace cacs {

constexpr double kCalciumThresholdHu = 130.0;
constexpr double kMinLesionVolumeMm3 = 1.5;

// One calcified lesion: a 26-connected component of voxels >= 130 HU with
// total volume >= 1.5 mm^3, plus its per-slice breakdown.
struct Lesion {
    struct SliceComponent {
        int z = 0;
        int voxel_count = 0;
        double area_mm2 = 0.0;
        double max_hu = 0.0;
    };

    std::vector<std::array<int, 3>> voxels;  // (x,y,z), sorted by (z,y,x)
    std::vector<SliceComponent> slices;      // ascending z
    double volume_mm3 = 0.0;
};

enum class RiskCategory { very_low, low, moderate, moderately_high, high };

const char* to_string(RiskCategory c);
std::optional<RiskCategory> risk_category_from_string(const std::string& s);

struct ScoreReport {
    std::string subject_id;
    std::string source = "reference";  // "reference" or "predicted"
    double agatston = 0.0;
    double volume_mm3 = 0.0;
    std::vector<double> per_slice_agatston;
    std::vector<double> per_slice_volume;
    RiskCategory category = RiskCategory::very_low;
};

// Agatston density weight from the maximum HU of a lesion's slice component.
// Bins are left-closed: [130,200) -> 1, [200,300) -> 2, [300,400) -> 3,
// [400,inf) -> 4.
int agatston_weight(double max_hu);

// Maximal 26-connected components of {voxel : HU >= 130}, components smaller
// than 1.5 mm^3 discarded, ordered by minimum (z, y, x).
std::vector<Lesion> extract_lesions(const CtVolume& vol);

struct AgatstonResult {
    double total = 0.0;
    std::vector<double> per_slice;
};

AgatstonResult agatston_score(const std::vector<Lesion>& lesions, int nz);
double volume_score(const std::vector<Lesion>& lesions);
std::vector<double> per_slice_volume(const std::vector<Lesion>& lesions, int nz,
                                     double voxel_volume_mm3);

RiskCategory risk_category(double agatston);

// Full reference scoring: optional crop, lesion extraction, Agatston and
// volume scores, risk stratum.
ScoreReport score_volume(const CtVolume& vol,
                         const std::optional<BoundingBox>& box = std::nullopt);

}  // namespace cacs
