#include "cacs/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cacs/error.hpp"
#include "cacs/rng.hpp"

namespace cacs {

using nlohmann::json;

namespace {

constexpr double kAirHu = -1000.0;
constexpr double kTissueHu = 40.0;
constexpr double kLungHu = -800.0;
constexpr double kHeartHu = 30.0;
constexpr double kLesionEdgeHu = 131.0;
constexpr int kPlacementRetries = 300;

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> radii;

    bool contains(double x, double y, double z) const {
        double u = (x - center[0]) / radii[0];
        double v = (y - center[1]) / radii[1];
        double w = (z - center[2]) / radii[2];
        return u * u + v * v + w * w <= 1.0;
    }
};

std::array<double, 3> voxel_center_mm(const PhantomSpec& spec, int x, int y, int z) {
    return {(x + 0.5) * spec.spacing_mm[0], (y + 0.5) * spec.spacing_mm[1],
            (z + 0.5) * spec.spacing_mm[2]};
}

// Voxels whose centers lie within `radius` of `center`, plus the profile
// value at each voxel: peak at the center decaying linearly to 131 HU at the
// boundary. Values are integral.
struct RasterizedSphere {
    std::vector<std::array<int, 3>> voxels;
    std::vector<float> values;
};

RasterizedSphere rasterize_sphere(const PhantomSpec& spec,
                                  const std::array<double, 3>& center_mm,
                                  double radius_mm, double peak_hu) {
    RasterizedSphere out;
    const auto& sp = spec.spacing_mm;
    int x0 = std::max(0, static_cast<int>(std::floor((center_mm[0] - radius_mm) / sp[0] - 0.5)));
    int y0 = std::max(0, static_cast<int>(std::floor((center_mm[1] - radius_mm) / sp[1] - 0.5)));
    int z0 = std::max(0, static_cast<int>(std::floor((center_mm[2] - radius_mm) / sp[2] - 0.5)));
    int x1 = std::min(spec.dims[0] - 1,
                      static_cast<int>(std::ceil((center_mm[0] + radius_mm) / sp[0])));
    int y1 = std::min(spec.dims[1] - 1,
                      static_cast<int>(std::ceil((center_mm[1] + radius_mm) / sp[1])));
    int z1 = std::min(spec.dims[2] - 1,
                      static_cast<int>(std::ceil((center_mm[2] + radius_mm) / sp[2])));
    for (int z = z0; z <= z1; ++z) {
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                auto c = voxel_center_mm(spec, x, y, z);
                double dx = c[0] - center_mm[0];
                double dy = c[1] - center_mm[1];
                double dz = c[2] - center_mm[2];
                double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                if (d > radius_mm) continue;
                double frac = radius_mm > 0.0 ? d / radius_mm : 0.0;
                double hu = kLesionEdgeHu + (peak_hu - kLesionEdgeHu) * (1.0 - frac);
                out.voxels.push_back({x, y, z});
                out.values.push_back(static_cast<float>(std::llround(hu)));
            }
        }
    }
    return out;
}

bool connected_26(const std::vector<std::array<int, 3>>& voxels) {
    if (voxels.empty()) return false;
    std::vector<std::array<int, 3>> sorted = voxels;
    std::sort(sorted.begin(), sorted.end());
    std::vector<uint8_t> seen(sorted.size(), 0);
    std::vector<size_t> stack{0};
    seen[0] = 1;
    size_t reached = 1;
    auto find = [&](int x, int y, int z) -> long {
        std::array<int, 3> key{x, y, z};
        auto it = std::lower_bound(sorted.begin(), sorted.end(), key);
        if (it == sorted.end() || *it != key) return -1;
        return it - sorted.begin();
    };
    while (!stack.empty()) {
        auto [x, y, z] = sorted[stack.back()];
        stack.pop_back();
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy && !dz) continue;
                    long j = find(x + dx, y + dy, z + dz);
                    if (j >= 0 && !seen[j]) {
                        seen[j] = 1;
                        ++reached;
                        stack.push_back(static_cast<size_t>(j));
                    }
                }
    }
    return reached == sorted.size();
}

LedgerLesion make_ledger_lesion(const CtVolume& vol, RasterizedSphere sphere,
                                const std::array<int, 3>& center_voxel, double peak_hu,
                                bool inside_heart) {
    LedgerLesion lesion;
    lesion.center_voxel = center_voxel;
    lesion.peak_hu = peak_hu;
    lesion.inside_heart = inside_heart;
    lesion.voxels = std::move(sphere.voxels);
    std::sort(lesion.voxels.begin(), lesion.voxels.end(),
              [](const std::array<int, 3>& a, const std::array<int, 3>& b) {
                  if (a[2] != b[2]) return a[2] < b[2];
                  if (a[1] != b[1]) return a[1] < b[1];
                  return a[0] < b[0];
              });
    for (const auto& v : lesion.voxels) {
        if (lesion.slices.empty() || lesion.slices.back().z != v[2])
            lesion.slices.push_back({v[2], 0, 0.0, -4000.0});
        auto& sc = lesion.slices.back();
        sc.voxel_count += 1;
        sc.max_hu = std::max(sc.max_hu, static_cast<double>(vol.at(v[0], v[1], v[2])));
    }
    for (auto& sc : lesion.slices) sc.area_mm2 = sc.voxel_count * vol.pixel_area_mm2();
    return lesion;
}

}  // namespace

void PhantomSpec::validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        fail(ErrorKind::Validation, "phantom dims must be positive");
    for (double s : spacing_mm)
        if (!(s > 0.0)) fail(ErrorKind::Validation, "phantom spacing must be positive");
    if (!lesion_count.valid() || lesion_count.lo < 0)
        fail(ErrorKind::Validation, "lesion count range empty");
    if (!distractor_count.valid() || distractor_count.lo < 0)
        fail(ErrorKind::Validation, "distractor count range empty");
    if (!lesion_radius_mm.valid() || lesion_radius_mm.lo <= 0.0)
        fail(ErrorKind::Validation, "lesion radius range empty");
    if (!lesion_peak_hu.valid() || lesion_peak_hu.lo < kLesionEdgeHu)
        fail(ErrorKind::Validation, "lesion peak HU must be at least 131");
    if (noise_sigma_hu < 0.0)
        fail(ErrorKind::Validation, "noise sigma must be nonnegative");
    for (int a = 0; a < 3; ++a) {
        double extent = dims[a] * spacing_mm[a];
        if (heart_center_mm[a] - heart_radii_mm[a] < 0.0 ||
            heart_center_mm[a] + heart_radii_mm[a] > extent)
            fail(ErrorKind::Validation, "heart ellipsoid extends outside the volume");
        if (!(heart_radii_mm[a] > 0.0))
            fail(ErrorKind::Validation, "heart radii must be positive");
    }
}

json PhantomSpec::to_json() const {
    return json{{"seed", seed},
                {"dims", dims},
                {"spacing_mm", spacing_mm},
                {"heart_center_mm", heart_center_mm},
                {"heart_radii_mm", heart_radii_mm},
                {"lesion_count", {lesion_count.lo, lesion_count.hi}},
                {"lesion_radius_mm", {lesion_radius_mm.lo, lesion_radius_mm.hi}},
                {"lesion_peak_hu", {lesion_peak_hu.lo, lesion_peak_hu.hi}},
                {"noise_sigma_hu", noise_sigma_hu},
                {"distractor_count", {distractor_count.lo, distractor_count.hi}},
                {"truncate_noise", truncate_noise}};
}

PhantomSpec PhantomSpec::from_json(const json& j) {
    PhantomSpec spec;
    spec.seed = j.at("seed").get<uint64_t>();
    spec.dims = j.at("dims").get<std::array<int, 3>>();
    spec.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
    spec.heart_center_mm = j.at("heart_center_mm").get<std::array<double, 3>>();
    spec.heart_radii_mm = j.at("heart_radii_mm").get<std::array<double, 3>>();
    spec.lesion_count = {j.at("lesion_count").at(0).get<int>(), j.at("lesion_count").at(1).get<int>()};
    spec.lesion_radius_mm = {j.at("lesion_radius_mm").at(0).get<double>(),
                             j.at("lesion_radius_mm").at(1).get<double>()};
    spec.lesion_peak_hu = {j.at("lesion_peak_hu").at(0).get<double>(),
                           j.at("lesion_peak_hu").at(1).get<double>()};
    spec.noise_sigma_hu = j.at("noise_sigma_hu").get<double>();
    spec.distractor_count = {j.at("distractor_count").at(0).get<int>(),
                             j.at("distractor_count").at(1).get<int>()};
    spec.truncate_noise = j.value("truncate_noise", true);
    spec.validate();
    return spec;
}

std::pair<CtVolume, LesionLedger> generate_volume(const PhantomSpec& spec, int subject_index) {
    spec.validate();
    Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(subject_index)));

    const int nx = spec.dims[0], ny = spec.dims[1], nz = spec.dims[2];
    const double ex = nx * spec.spacing_mm[0];
    const double ey = ny * spec.spacing_mm[1];
    const double ez = nz * spec.spacing_mm[2];

    // Per-subject anatomy jitter. Radii are clamped so the heart stays inside
    // the volume with a one-voxel margin.
    Ellipsoid heart;
    for (int a = 0; a < 3; ++a) {
        double extent = spec.dims[a] * spec.spacing_mm[a];
        double c = spec.heart_center_mm[a] + rng.uniform(-3.0, 3.0);
        double r = spec.heart_radii_mm[a] * rng.uniform(0.88, 1.12);
        double margin = spec.spacing_mm[a];
        r = std::min(r, std::min(c - margin, extent - margin - c));
        if (!(r > 0.0)) fail(ErrorKind::Compute, "heart jitter left no room for the ellipsoid");
        heart.center[a] = c;
        heart.radii[a] = r;
    }

    Ellipsoid body{{ex * 0.5, ey * 0.52, ez * 0.5}, {ex * 0.47, ey * 0.44, ez * 2.0}};
    // Lungs overlap the heart halo laterally; the heart carves its impression
    // out of them, so axial slices at heart level show indented lungs.
    Ellipsoid lung_l{{heart.center[0] - heart.radii[0] - ex * 0.055, ey * 0.48, ez * 0.5},
                     {ex * 0.15, ey * 0.32, ez * 0.46}};
    Ellipsoid lung_r{{heart.center[0] + heart.radii[0] + ex * 0.055, ey * 0.48, ez * 0.5},
                     {ex * 0.15, ey * 0.32, ez * 0.46}};
    Ellipsoid heart_halo{heart.center,
                         {heart.radii[0] + 3.0, heart.radii[1] + 3.0, heart.radii[2] + 3.0}};

    char sid[32];
    std::snprintf(sid, sizeof(sid), "subj%06d", subject_index);
    CtVolume vol(nx, ny, nz, spec.spacing_mm[0], spec.spacing_mm[1], spec.spacing_mm[2], sid);

    LesionLedger ledger;
    bool heart_seen = false;

    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                auto c = voxel_center_mm(spec, x, y, z);
                double base = kAirHu;
                if (body.contains(c[0], c[1], c[2])) {
                    base = kTissueHu;
                    if ((lung_l.contains(c[0], c[1], c[2]) || lung_r.contains(c[0], c[1], c[2])) &&
                        !heart_halo.contains(c[0], c[1], c[2]))
                        base = kLungHu;
                    if (heart.contains(c[0], c[1], c[2])) {
                        base = kHeartHu;
                        if (!heart_seen) {
                            ledger.heart_box = {{x, y, z}, {x + 1, y + 1, z + 1}};
                            heart_seen = true;
                        } else {
                            ledger.heart_box.lo[0] = std::min(ledger.heart_box.lo[0], x);
                            ledger.heart_box.lo[1] = std::min(ledger.heart_box.lo[1], y);
                            ledger.heart_box.lo[2] = std::min(ledger.heart_box.lo[2], z);
                            ledger.heart_box.hi[0] = std::max(ledger.heart_box.hi[0], x + 1);
                            ledger.heart_box.hi[1] = std::max(ledger.heart_box.hi[1], y + 1);
                            ledger.heart_box.hi[2] = std::max(ledger.heart_box.hi[2], z + 1);
                        }
                    }
                }
                double v = std::llround(base + rng.normal(0.0, spec.noise_sigma_hu));
                if (spec.truncate_noise && v >= kCalciumThresholdHu)
                    v = kCalciumThresholdHu - 1.0;
                vol.set(x, y, z, static_cast<float>(std::clamp(v, kHuMin, kHuMax)));
            }
        }
    }
    if (!heart_seen) fail(ErrorKind::Compute, "heart ellipsoid rasterized to zero voxels");

    // Occupancy of already placed calcium, consulted with a one-voxel border
    // so separate lesions can never become 26-connected.
    std::vector<uint8_t> occupied(vol.voxel_count(), 0);
    auto touches_existing = [&](const std::array<int, 3>& v) {
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int xq = v[0] + dx, yq = v[1] + dy, zq = v[2] + dz;
                    if (xq < 0 || yq < 0 || zq < 0 || xq >= nx || yq >= ny || zq >= nz)
                        continue;
                    if (occupied[vol.index(xq, yq, zq)]) return true;
                }
        return false;
    };

    const double voxel_volume = vol.voxel_volume_mm3();
    const int min_voxels =
        std::max<int>(1, static_cast<int>(std::ceil(kMinLesionVolumeMm3 / voxel_volume - 1e-12)));

    auto place_sphere = [&](bool inside_heart) -> bool {
        for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
            double radius = rng.uniform(spec.lesion_radius_mm.lo, spec.lesion_radius_mm.hi);
            double peak = rng.uniform(spec.lesion_peak_hu.lo, spec.lesion_peak_hu.hi);
            std::array<double, 3> center;
            if (inside_heart) {
                Ellipsoid eroded = heart;
                bool room = true;
                for (int a = 0; a < 3; ++a) {
                    eroded.radii[a] = heart.radii[a] - radius;
                    if (eroded.radii[a] <= 0.0) room = false;
                }
                if (!room) continue;
                center = {rng.uniform(eroded.center[0] - eroded.radii[0],
                                      eroded.center[0] + eroded.radii[0]),
                          rng.uniform(eroded.center[1] - eroded.radii[1],
                                      eroded.center[1] + eroded.radii[1]),
                          rng.uniform(eroded.center[2] - eroded.radii[2],
                                      eroded.center[2] + eroded.radii[2])};
                if (!eroded.contains(center[0], center[1], center[2])) continue;
            } else {
                bool room = radius + spec.spacing_mm[0] < ex - radius - spec.spacing_mm[0] &&
                            radius + spec.spacing_mm[1] < ey - radius - spec.spacing_mm[1] &&
                            radius + spec.spacing_mm[2] < ez - radius - spec.spacing_mm[2];
                if (!room) continue;
                center = {rng.uniform(radius + spec.spacing_mm[0], ex - radius - spec.spacing_mm[0]),
                          rng.uniform(radius + spec.spacing_mm[1], ey - radius - spec.spacing_mm[1]),
                          rng.uniform(radius + spec.spacing_mm[2], ez - radius - spec.spacing_mm[2])};
            }

            auto sphere = rasterize_sphere(spec, center, radius, peak);
            if (static_cast<int>(sphere.voxels.size()) < min_voxels) continue;
            if (!connected_26(sphere.voxels)) continue;

            bool ok = true;
            for (const auto& v : sphere.voxels) {
                if (touches_existing(v)) { ok = false; break; }
                bool in_box = ledger.heart_box.contains_voxel(v[0], v[1], v[2]);
                bool in_dilated_box =
                    v[0] >= ledger.heart_box.lo[0] - 2 && v[0] < ledger.heart_box.hi[0] + 2 &&
                    v[1] >= ledger.heart_box.lo[1] - 2 && v[1] < ledger.heart_box.hi[1] + 2 &&
                    v[2] >= ledger.heart_box.lo[2] - 2 && v[2] < ledger.heart_box.hi[2] + 2;
                if (inside_heart ? !in_box : in_dilated_box) { ok = false; break; }
            }
            if (!ok) continue;

            for (size_t i = 0; i < sphere.voxels.size(); ++i) {
                const auto& v = sphere.voxels[i];
                vol.set(v[0], v[1], v[2], sphere.values[i]);
                occupied[vol.index(v[0], v[1], v[2])] = 1;
            }
            std::array<int, 3> center_voxel = {
                std::clamp(static_cast<int>(center[0] / spec.spacing_mm[0]), 0, nx - 1),
                std::clamp(static_cast<int>(center[1] / spec.spacing_mm[1]), 0, ny - 1),
                std::clamp(static_cast<int>(center[2] / spec.spacing_mm[2]), 0, nz - 1)};
            ledger.lesions.push_back(
                make_ledger_lesion(vol, std::move(sphere), center_voxel, peak, inside_heart));
            return true;
        }
        return false;
    };

    int n_lesions = static_cast<int>(rng.uniform_int(spec.lesion_count.lo, spec.lesion_count.hi));
    for (int i = 0; i < n_lesions; ++i)
        if (!place_sphere(true))
            fail(ErrorKind::Compute, "lesion placement failed after bounded retries");

    int n_distractors =
        static_cast<int>(rng.uniform_int(spec.distractor_count.lo, spec.distractor_count.hi));
    for (int i = 0; i < n_distractors; ++i)
        if (!place_sphere(false))
            fail(ErrorKind::Compute, "distractor placement failed after bounded retries");

    for (const auto& lesion : ledger.lesions) {
        if (!lesion.inside_heart) continue;
        for (const auto& sc : lesion.slices)
            ledger.analytic_agatston += sc.area_mm2 * agatston_weight(sc.max_hu);
        ledger.analytic_volume_mm3 += static_cast<double>(lesion.voxels.size()) * voxel_volume;
    }
    return {std::move(vol), std::move(ledger)};
}

std::array<int, 3> split_counts(int n) {
    const double weights[3] = {772.0, 386.0, 388.0};
    const double total = 1546.0;
    std::array<int, 3> counts{};
    double remainders[3];
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double quota = n * weights[i] / total;
        counts[i] = static_cast<int>(std::floor(quota));
        remainders[i] = quota - counts[i];
        assigned += counts[i];
    }
    int left = n - assigned;
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (remainders[a] != remainders[b]) return remainders[a] > remainders[b];
        return a < b;
    });
    for (int i = 0; i < left; ++i) counts[order[i % 3]] += 1;
    return counts;
}

std::vector<const CohortEntry*> CohortManifest::split(const std::string& name) const {
    std::vector<const CohortEntry*> out;
    for (const auto& e : entries)
        if (e.split == name) out.push_back(&e);
    return out;
}

namespace {

json box_to_json(const BoundingBox& b) {
    return json{{"lo", b.lo}, {"hi", b.hi}};
}

BoundingBox box_from_json(const json& j) {
    BoundingBox b;
    b.lo = j.at("lo").get<std::array<int, 3>>();
    b.hi = j.at("hi").get<std::array<int, 3>>();
    return b;
}

}  // namespace

CohortManifest generate_cohort(const PhantomSpec& spec, int n, const std::string& out_dir) {
    if (n < 1) fail(ErrorKind::Usage, "cohort size must be at least 1");
    spec.validate();
    std::filesystem::create_directories(out_dir);

    auto counts = split_counts(n);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng split_rng(mix_seed(spec.seed, 0x5714ULL));
    split_rng.shuffle(order);
    std::vector<std::string> split_of(n);
    for (int i = 0; i < n; ++i) {
        const char* name = i < counts[0] ? "train"
                           : i < counts[0] + counts[1] ? "validation"
                                                       : "test";
        split_of[order[i]] = name;
    }

    CohortManifest manifest;
    manifest.dir = out_dir;
    for (int i = 0; i < n; ++i) {
        auto [vol, ledger] = generate_volume(spec, i);
        char name[48];
        std::snprintf(name, sizeof(name), "%s.ctvol", vol.subject_id().c_str());
        save_volume(vol, out_dir + "/" + name);
        CohortEntry entry;
        entry.file = name;
        entry.subject_id = vol.subject_id();
        entry.split = split_of[i];
        entry.analytic_agatston = ledger.analytic_agatston;
        entry.analytic_volume = ledger.analytic_volume_mm3;
        entry.heart_box = ledger.heart_box;
        entry.seed = spec.seed;
        entry.subject_index = i;
        manifest.entries.push_back(std::move(entry));
    }

    save_manifest(manifest, out_dir + "/manifest.json");
    {
        std::ofstream out(out_dir + "/cohort_spec.json", std::ios::trunc);
        json j = spec.to_json();
        j["count"] = n;
        out << j.dump(2) << "\n";
    }
    return manifest;
}

void save_manifest(const CohortManifest& manifest, const std::string& path) {
    json arr = json::array();
    for (const auto& e : manifest.entries) {
        arr.push_back(json{{"file", e.file},
                           {"subject_id", e.subject_id},
                           {"split", e.split},
                           {"analytic_agatston", e.analytic_agatston},
                           {"analytic_volume", e.analytic_volume},
                           {"heart_box", box_to_json(e.heart_box)},
                           {"seed", e.seed},
                           {"subject_index", e.subject_index}});
    }
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path);
        out << arr.dump(2) << "\n";
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        fail(ErrorKind::Io, "rename failed: " + path);
}

CohortManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open manifest: " + path);
    json arr;
    try {
        in >> arr;
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, std::string("malformed manifest: ") + e.what());
    }
    if (!arr.is_array()) fail(ErrorKind::Format, "manifest must be a JSON array");

    CohortManifest manifest;
    std::filesystem::path p(path);
    manifest.dir = p.has_parent_path() ? p.parent_path().string() : std::string(".");
    for (const auto& j : arr) {
        CohortEntry e;
        e.file = j.at("file").get<std::string>();
        e.subject_id = j.at("subject_id").get<std::string>();
        e.split = j.at("split").get<std::string>();
        e.analytic_agatston = j.at("analytic_agatston").get<double>();
        e.analytic_volume = j.at("analytic_volume").get<double>();
        e.heart_box = box_from_json(j.at("heart_box"));
        e.seed = j.value("seed", uint64_t{0});
        e.subject_index = j.value("subject_index", 0);
        manifest.entries.push_back(std::move(e));
    }
    return manifest;
}

}  // namespace cacs
