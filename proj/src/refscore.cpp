#include "cacs/refscore.hpp"

#include <algorithm>
#include <cmath>

#include "cacs/error.hpp"

namespace cacs {

const char* to_string(RiskCategory c) {
    switch (c) {
        case RiskCategory::very_low: return "very_low";
        case RiskCategory::low: return "low";
        case RiskCategory::moderate: return "moderate";
        case RiskCategory::moderately_high: return "moderately_high";
        case RiskCategory::high: return "high";
    }
    return "?";
}

std::optional<RiskCategory> risk_category_from_string(const std::string& s) {
    for (RiskCategory c : {RiskCategory::very_low, RiskCategory::low, RiskCategory::moderate,
                           RiskCategory::moderately_high, RiskCategory::high}) {
        if (s == to_string(c)) return c;
    }
    return std::nullopt;
}

int agatston_weight(double max_hu) {
    if (max_hu >= 400.0) return 4;
    if (max_hu >= 300.0) return 3;
    if (max_hu >= 200.0) return 2;
    if (max_hu >= kCalciumThresholdHu) return 1;
    return 0;
}

std::vector<Lesion> extract_lesions(const CtVolume& vol) {
    const int nx = vol.nx(), ny = vol.ny(), nz = vol.nz();
    const double voxel_volume = vol.voxel_volume_mm3();
    const double pixel_area = vol.pixel_area_mm2();
    const auto& hu = vol.voxels();

    std::vector<uint8_t> visited(hu.size(), 0);
    std::vector<Lesion> lesions;
    std::vector<size_t> stack;

    // Scan order z,y,x so the first voxel reached in each component is its
    // minimum (z,y,x); components inherit that ordering.
    for (int z0 = 0; z0 < nz; ++z0) {
        for (int y0 = 0; y0 < ny; ++y0) {
            for (int x0 = 0; x0 < nx; ++x0) {
                size_t seed = vol.index(x0, y0, z0);
                if (visited[seed] || hu[seed] < kCalciumThresholdHu) continue;

                Lesion lesion;
                stack.clear();
                stack.push_back(seed);
                visited[seed] = 1;
                while (!stack.empty()) {
                    size_t idx = stack.back();
                    stack.pop_back();
                    int z = static_cast<int>(idx / (static_cast<size_t>(nx) * ny));
                    int rem = static_cast<int>(idx % (static_cast<size_t>(nx) * ny));
                    int y = rem / nx;
                    int x = rem % nx;
                    lesion.voxels.push_back({x, y, z});

                    for (int dz = -1; dz <= 1; ++dz) {
                        int zn = z + dz;
                        if (zn < 0 || zn >= nz) continue;
                        for (int dy = -1; dy <= 1; ++dy) {
                            int yn = y + dy;
                            if (yn < 0 || yn >= ny) continue;
                            for (int dx = -1; dx <= 1; ++dx) {
                                if (dx == 0 && dy == 0 && dz == 0) continue;
                                int xn = x + dx;
                                if (xn < 0 || xn >= nx) continue;
                                size_t nidx = vol.index(xn, yn, zn);
                                if (!visited[nidx] && hu[nidx] >= kCalciumThresholdHu) {
                                    visited[nidx] = 1;
                                    stack.push_back(nidx);
                                }
                            }
                        }
                    }
                }

                lesion.volume_mm3 = static_cast<double>(lesion.voxels.size()) * voxel_volume;
                if (lesion.volume_mm3 < kMinLesionVolumeMm3) continue;

                std::sort(lesion.voxels.begin(), lesion.voxels.end(),
                          [](const std::array<int, 3>& a, const std::array<int, 3>& b) {
                              if (a[2] != b[2]) return a[2] < b[2];
                              if (a[1] != b[1]) return a[1] < b[1];
                              return a[0] < b[0];
                          });
                for (const auto& v : lesion.voxels) {
                    if (lesion.slices.empty() || lesion.slices.back().z != v[2]) {
                        lesion.slices.push_back({v[2], 0, 0.0, -4000.0});
                    }
                    auto& sc = lesion.slices.back();
                    sc.voxel_count += 1;
                    sc.max_hu = std::max(sc.max_hu, static_cast<double>(vol.at(v[0], v[1], v[2])));
                }
                for (auto& sc : lesion.slices) sc.area_mm2 = sc.voxel_count * pixel_area;
                lesions.push_back(std::move(lesion));
            }
        }
    }

    // Scan order already yields this ordering; kept as an explicit guarantee.
    std::sort(lesions.begin(), lesions.end(), [](const Lesion& a, const Lesion& b) {
        const auto& va = a.voxels.front();
        const auto& vb = b.voxels.front();
        if (va[2] != vb[2]) return va[2] < vb[2];
        if (va[1] != vb[1]) return va[1] < vb[1];
        return va[0] < vb[0];
    });
    return lesions;
}

AgatstonResult agatston_score(const std::vector<Lesion>& lesions, int nz) {
    AgatstonResult result;
    result.per_slice.assign(static_cast<size_t>(nz), 0.0);
    for (const auto& lesion : lesions) {
        for (const auto& sc : lesion.slices) {
            double contribution = sc.area_mm2 * agatston_weight(sc.max_hu);
            result.per_slice[sc.z] += contribution;
        }
    }
    for (double v : result.per_slice) result.total += v;
    return result;
}

double volume_score(const std::vector<Lesion>& lesions) {
    double total = 0.0;
    for (const auto& lesion : lesions) total += lesion.volume_mm3;
    return total;
}

std::vector<double> per_slice_volume(const std::vector<Lesion>& lesions, int nz,
                                     double voxel_volume_mm3) {
    std::vector<double> per_slice(static_cast<size_t>(nz), 0.0);
    for (const auto& lesion : lesions)
        for (const auto& sc : lesion.slices)
            per_slice[sc.z] += sc.voxel_count * voxel_volume_mm3;
    return per_slice;
}

RiskCategory risk_category(double agatston) {
    if (agatston < 0.0 || !std::isfinite(agatston))
        fail(ErrorKind::Validation, "Agatston score must be nonnegative and finite");
    if (agatston < 1.0) return RiskCategory::very_low;
    if (agatston < 10.0) return RiskCategory::low;
    if (agatston < 100.0) return RiskCategory::moderate;
    if (agatston < 400.0) return RiskCategory::moderately_high;
    return RiskCategory::high;
}

ScoreReport score_volume(const CtVolume& vol, const std::optional<BoundingBox>& box) {
    const CtVolume* target = &vol;
    CtVolume cropped;
    if (box) {
        cropped = crop(vol, *box);
        target = &cropped;
    }
    auto lesions = extract_lesions(*target);
    auto agatston = agatston_score(lesions, target->nz());

    ScoreReport report;
    report.subject_id = vol.subject_id();
    report.source = "reference";
    report.agatston = agatston.total;
    report.per_slice_agatston = std::move(agatston.per_slice);
    report.per_slice_volume = per_slice_volume(lesions, target->nz(), target->voxel_volume_mm3());
    report.volume_mm3 = volume_score(lesions);
    report.category = risk_category(report.agatston);
    return report;
}

}  // namespace cacs
