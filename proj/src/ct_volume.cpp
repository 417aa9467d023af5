#include "cacs/ct_volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cacs/error.hpp"

namespace cacs {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'T', 'V', 'O', 'L', '\x00', '\x01', '\x00'};

std::string format_mm(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

bool BoundingBox::contains(const BoundingBox& inner) const {
    for (int a = 0; a < 3; ++a) {
        if (inner.lo[a] < lo[a] || inner.hi[a] > hi[a]) return false;
    }
    return true;
}

bool BoundingBox::contains_voxel(int x, int y, int z) const {
    return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
}

double BoundingBox::intersection_over_union(const BoundingBox& other) const {
    double inter = 1.0;
    for (int a = 0; a < 3; ++a) {
        int lo_a = std::max(lo[a], other.lo[a]);
        int hi_a = std::min(hi[a], other.hi[a]);
        if (hi_a <= lo_a) return 0.0;
        inter *= hi_a - lo_a;
    }
    double va = 1.0, vb = 1.0;
    for (int a = 0; a < 3; ++a) {
        va *= size(a);
        vb *= other.size(a);
    }
    return inter / (va + vb - inter);
}

CtVolume::CtVolume(int nx, int ny, int nz, double sx, double sy, double sz,
                   std::string subject_id, float fill)
    : nx_(nx), ny_(ny), nz_(nz), sx_(sx), sy_(sy), sz_(sz),
      effective_thickness_mm_(sz), subject_id_(std::move(subject_id)) {
    if (nx <= 0 || ny <= 0 || nz <= 0)
        fail(ErrorKind::Validation, "volume dims must be positive");
    if (!(sx > 0.0) || !(sy > 0.0) || !(sz > 0.0) ||
        !std::isfinite(sx) || !std::isfinite(sy) || !std::isfinite(sz))
        fail(ErrorKind::Validation, "voxel spacing must be positive and finite");
    voxels_.assign(static_cast<size_t>(nx) * ny * nz, fill);
}

bool CtVolume::in_bounds(const BoundingBox& box) const {
    return box.valid() && full_box().contains(box);
}

void save_volume(const CtVolume& vol, const std::string& path) {
    json header = {
        {"subject_id", vol.subject_id()},
        {"dims", {vol.nx(), vol.ny(), vol.nz()}},
        {"spacing_mm", {vol.sx(), vol.sy(), vol.sz()}},
        {"effective_thickness_mm", vol.effective_thickness_mm()},
        {"hu_offset", 0},
    };
    std::string header_bytes = header.dump();

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path);
        out.write(kMagic, sizeof(kMagic));
        uint32_t len = static_cast<uint32_t>(header_bytes.size());
        unsigned char len_le[4] = {
            static_cast<unsigned char>(len & 0xff),
            static_cast<unsigned char>((len >> 8) & 0xff),
            static_cast<unsigned char>((len >> 16) & 0xff),
            static_cast<unsigned char>((len >> 24) & 0xff),
        };
        out.write(reinterpret_cast<const char*>(len_le), 4);
        out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));

        std::vector<unsigned char> payload(vol.voxel_count() * 2);
        size_t o = 0;
        for (float f : vol.voxels()) {
            double clamped = std::clamp(static_cast<double>(f), kHuMin, kHuMax);
            int16_t hu = static_cast<int16_t>(std::llround(clamped));
            uint16_t u = static_cast<uint16_t>(hu);
            payload[o++] = static_cast<unsigned char>(u & 0xff);
            payload[o++] = static_cast<unsigned char>(u >> 8);
        }
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
        if (!out) fail(ErrorKind::Io, "write failed: " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        fail(ErrorKind::Io, "rename failed: " + path);
}

CtVolume load_volume(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 6) != 0)
        fail(ErrorKind::Format, "malformed CTVOL header (bad magic): " + path);
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        fail(ErrorKind::Format, "unsupported CTVOL format version: " + path);

    uint32_t len = static_cast<uint32_t>(static_cast<unsigned char>(bytes[8])) |
                   (static_cast<uint32_t>(static_cast<unsigned char>(bytes[9])) << 8) |
                   (static_cast<uint32_t>(static_cast<unsigned char>(bytes[10])) << 16) |
                   (static_cast<uint32_t>(static_cast<unsigned char>(bytes[11])) << 24);
    if (bytes.size() < 12 + static_cast<size_t>(len))
        fail(ErrorKind::Format, "malformed CTVOL header (truncated): " + path);

    json header;
    try {
        header = json::parse(bytes.substr(12, len));
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, std::string("malformed CTVOL header (bad JSON): ") + e.what());
    }

    int nx, ny, nz;
    double sx, sy, sz, eff;
    std::string subject_id;
    try {
        auto dims = header.at("dims");
        nx = dims.at(0).get<int>();
        ny = dims.at(1).get<int>();
        nz = dims.at(2).get<int>();
        auto sp = header.at("spacing_mm");
        sx = sp.at(0).get<double>();
        sy = sp.at(1).get<double>();
        sz = sp.at(2).get<double>();
        eff = header.at("effective_thickness_mm").get<double>();
        subject_id = header.at("subject_id").get<std::string>();
        if (header.at("hu_offset").get<int>() != 0)
            fail(ErrorKind::Format, "unsupported hu_offset in CTVOL header");
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, std::string("malformed CTVOL header (missing field): ") + e.what());
    }

    CtVolume vol(nx, ny, nz, sx, sy, sz, subject_id);
    vol.set_effective_thickness_mm(eff);

    size_t expected = vol.voxel_count() * 2;
    size_t got = bytes.size() - 12 - len;
    if (got != expected)
        fail(ErrorKind::Format, "CTVOL payload size mismatch: expected " +
                                    std::to_string(expected) + " bytes, got " +
                                    std::to_string(got));

    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + 12 + len;
    for (size_t i = 0; i < vol.voxel_count(); ++i) {
        uint16_t u = static_cast<uint16_t>(p[2 * i]) |
                     (static_cast<uint16_t>(p[2 * i + 1]) << 8);
        vol.voxels()[i] = static_cast<float>(static_cast<int16_t>(u));
    }
    return vol;
}

ScreeningCheck validate_for_scoring(const CtVolume& vol, int min_slices) {
    ScreeningCheck check;
    check.min_slices = min_slices;
    std::string reason;
    if (vol.nz() < min_slices)
        reason = "too few slices (" + std::to_string(vol.nz()) + " < " +
                 std::to_string(min_slices) + ")";
    if (vol.sz() > kMaxSliceThicknessMm) {
        if (!reason.empty()) reason += "; ";
        reason += "slices too thick (" + format_mm(vol.sz()) + " mm > " +
                  format_mm(kMaxSliceThicknessMm) + " mm)";
    }
    check.accepted = reason.empty();
    check.reason = reason;
    return check;
}

CtVolume resample_z(const CtVolume& vol, double thickness_mm, double increment_mm) {
    if (vol.sz() > thickness_mm)
        fail(ErrorKind::Validation,
             "cannot resample: native slices thicker than target (" +
                 format_mm(vol.sz()) + " mm > " + format_mm(thickness_mm) + " mm)");
    if (!(increment_mm > 0.0) || !(thickness_mm > 0.0))
        fail(ErrorKind::Validation, "resample parameters must be positive");

    const double extent = vol.nz() * vol.sz();
    int out_nz = static_cast<int>(std::floor((extent - thickness_mm) / increment_mm + 1e-9)) + 1;
    if (out_nz < 1) out_nz = 1;

    CtVolume out(vol.nx(), vol.ny(), out_nz, vol.sx(), vol.sy(), increment_mm,
                 vol.subject_id());
    out.set_effective_thickness_mm(thickness_mm);

    const size_t plane = static_cast<size_t>(vol.nx()) * vol.ny();
    std::vector<double> acc(plane);
    for (int j = 0; j < out_nz; ++j) {
        const double slab_lo = j * increment_mm;
        const double slab_hi = slab_lo + thickness_mm;
        std::fill(acc.begin(), acc.end(), 0.0);
        double total_w = 0.0;
        int z_first = std::max(0, static_cast<int>(std::floor(slab_lo / vol.sz())));
        int z_last = std::min(vol.nz() - 1,
                              static_cast<int>(std::ceil(slab_hi / vol.sz())));
        for (int z = z_first; z <= z_last; ++z) {
            double in_lo = z * vol.sz();
            double in_hi = in_lo + vol.sz();
            double w = std::min(slab_hi, in_hi) - std::max(slab_lo, in_lo);
            if (w <= 0.0) continue;
            total_w += w;
            const float* src = vol.voxels().data() + plane * z;
            for (size_t i = 0; i < plane; ++i) acc[i] += w * src[i];
        }
        if (total_w <= 0.0)
            fail(ErrorKind::Compute, "resample slab with no overlapping slices");
        float* dst = out.voxels().data() + plane * j;
        for (size_t i = 0; i < plane; ++i) {
            double v = acc[i] / total_w;
            dst[i] = static_cast<float>(std::clamp(v, kHuMin, kHuMax));
        }
    }
    return out;
}

CtVolume crop(const CtVolume& vol, const BoundingBox& box) {
    if (!vol.in_bounds(box))
        fail(ErrorKind::Validation, "crop box out of range");
    CtVolume out(box.size(0), box.size(1), box.size(2), vol.sx(), vol.sy(), vol.sz(),
                 vol.subject_id());
    out.set_effective_thickness_mm(vol.effective_thickness_mm());
    for (int z = 0; z < out.nz(); ++z)
        for (int y = 0; y < out.ny(); ++y)
            for (int x = 0; x < out.nx(); ++x)
                out.set(x, y, z, vol.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z));
    return out;
}

Slice2d extract_axial_slice(const CtVolume& vol, int z) {
    Slice2d s(vol.ny(), vol.nx());
    for (int y = 0; y < vol.ny(); ++y)
        for (int x = 0; x < vol.nx(); ++x) s.at(y, x) = vol.at(x, y, z);
    return s;
}

Slice2d extract_coronal_slice(const CtVolume& vol, int y) {
    Slice2d s(vol.nz(), vol.nx());
    for (int z = 0; z < vol.nz(); ++z)
        for (int x = 0; x < vol.nx(); ++x) s.at(z, x) = vol.at(x, y, z);
    return s;
}

Slice2d extract_sagittal_slice(const CtVolume& vol, int x) {
    Slice2d s(vol.nz(), vol.ny());
    for (int z = 0; z < vol.nz(); ++z)
        for (int y = 0; y < vol.ny(); ++y) s.at(z, y) = vol.at(x, y, z);
    return s;
}

Slice2d pad_slice_to(const Slice2d& slice, int target_rows, int target_cols,
                     float pad_value) {
    if (slice.rows > target_rows || slice.cols > target_cols)
        fail(ErrorKind::Validation,
             "slice larger than the allowed input size (" + std::to_string(slice.rows) +
                 "x" + std::to_string(slice.cols) + " > " + std::to_string(target_rows) +
                 "x" + std::to_string(target_cols) + ")");
    Slice2d out(target_rows, target_cols, pad_value);
    int r0 = (target_rows - slice.rows) / 2;
    int c0 = (target_cols - slice.cols) / 2;
    for (int r = 0; r < slice.rows; ++r)
        for (int c = 0; c < slice.cols; ++c) out.at(r0 + r, c0 + c) = slice.at(r, c);
    return out;
}

}  // namespace cacs
