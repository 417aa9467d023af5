#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cacs/ct_volume.hpp"
#include "cacs/refscore.hpp"

namespace cacs {

struct RangeI {
    int lo = 0, hi = 0;
    bool valid() const { return lo <= hi; }
};

struct RangeD {
    double lo = 0.0, hi = 0.0;
    bool valid() const { return lo <= hi; }
};

// Deterministic synthetic chest-CT cohort: body/lung/heart geometry with
// scoreable calcific lesions inside the heart and distractor calcifications
// outside of it. Stands in for clinical data; ground truth is analytic.
struct PhantomSpec {
    uint64_t seed = 7;
    std::array<int, 3> dims{64, 64, 24};
    std::array<double, 3> spacing_mm{1.0, 1.0, 3.0};
    std::array<double, 3> heart_center_mm{32.0, 32.0, 36.0};
    std::array<double, 3> heart_radii_mm{17.0, 15.0, 10.0};
    RangeI lesion_count{0, 4};
    RangeD lesion_radius_mm{1.0, 4.0};
    RangeD lesion_peak_hu{150.0, 800.0};
    double noise_sigma_hu = 5.0;
    RangeI distractor_count{0, 2};
    // Realism mode: noise is not truncated below the calcium threshold, so
    // the ledger is no longer exact. Excluded from oracle tests.
    bool truncate_noise = true;

    void validate() const;

    nlohmann::json to_json() const;
    static PhantomSpec from_json(const nlohmann::json& j);
};

struct LedgerLesion {
    std::array<int, 3> center_voxel{0, 0, 0};
    std::vector<std::array<int, 3>> voxels;        // sorted by (z,y,x)
    std::vector<Lesion::SliceComponent> slices;    // ascending z
    double peak_hu = 0.0;
    bool inside_heart = true;
};

struct LesionLedger {
    std::vector<LedgerLesion> lesions;  // heart lesions first, then distractors
    double analytic_agatston = 0.0;     // heart lesions only
    double analytic_volume_mm3 = 0.0;   // heart lesions only
    BoundingBox heart_box;
};

std::pair<CtVolume, LesionLedger> generate_volume(const PhantomSpec& spec,
                                                  int subject_index);

struct CohortEntry {
    std::string file;  // relative to the manifest directory
    std::string subject_id;
    std::string split;  // "train" | "validation" | "test"
    double analytic_agatston = 0.0;
    double analytic_volume = 0.0;
    BoundingBox heart_box;
    uint64_t seed = 0;
    int subject_index = 0;
};

struct CohortManifest {
    std::string dir;
    std::vector<CohortEntry> entries;

    std::string resolve(const CohortEntry& e) const { return dir + "/" + e.file; }
    std::vector<const CohortEntry*> split(const std::string& name) const;
};

// Train/validation/test apportionment of n subjects in ratio 772:386:388
// (largest remainder).
std::array<int, 3> split_counts(int n);

CohortManifest generate_cohort(const PhantomSpec& spec, int n, const std::string& out_dir);

CohortManifest load_manifest(const std::string& path);
void save_manifest(const CohortManifest& manifest, const std::string& path);

}  // namespace cacs
