#include "hnseg/volume.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

namespace hnseg {

Affine Affine::identity() { return diagonal(1.0, 1.0, 1.0); }

Affine Affine::diagonal(double sx, double sy, double sz) {
    Affine a;
    a.m = {sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0};
    return a;
}

std::array<double, 3> Affine::apply(double i, double j, double k) const {
    return {m[0] * i + m[1] * j + m[2] * k + m[3],
            m[4] * i + m[5] * j + m[6] * k + m[7],
            m[8] * i + m[9] * j + m[10] * k + m[11]};
}

double Affine::det3() const {
    return m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8]) +
           m[2] * (m[4] * m[9] - m[5] * m[8]);
}

Affine Affine::inverse() const {
    double det = det3();
    if (std::abs(det) < 1e-12) {
        throw GeometryError(GeometryError::Code::DegenerateAffine,
                            "affine 3x3 block is singular");
    }
    double inv = 1.0 / det;
    Affine r;
    r.m[0] = (m[5] * m[10] - m[6] * m[9]) * inv;
    r.m[1] = (m[2] * m[9] - m[1] * m[10]) * inv;
    r.m[2] = (m[1] * m[6] - m[2] * m[5]) * inv;
    r.m[4] = (m[6] * m[8] - m[4] * m[10]) * inv;
    r.m[5] = (m[0] * m[10] - m[2] * m[8]) * inv;
    r.m[6] = (m[2] * m[4] - m[0] * m[6]) * inv;
    r.m[8] = (m[4] * m[9] - m[5] * m[8]) * inv;
    r.m[9] = (m[1] * m[8] - m[0] * m[9]) * inv;
    r.m[10] = (m[0] * m[5] - m[1] * m[4]) * inv;
    // translation of the inverse map: -R^-1 * t
    r.m[3] = -(r.m[0] * m[3] + r.m[1] * m[7] + r.m[2] * m[11]);
    r.m[7] = -(r.m[4] * m[3] + r.m[5] * m[7] + r.m[6] * m[11]);
    r.m[11] = -(r.m[8] * m[3] + r.m[9] * m[7] + r.m[10] * m[11]);
    return r;
}

std::array<double, 3> Affine::apply_inverse(double x, double y, double z) const {
    return inverse().apply(x, y, z);
}

bool Affine::approx_equal(const Affine& o, double tol) const {
    for (int i = 0; i < 12; ++i) {
        if (std::abs(m[i] - o.m[i]) > tol) return false;
    }
    return true;
}

Volume::Volume(int64_t c, int64_t x, int64_t y, int64_t z, float fill)
    : channels(c), nx(x), ny(y), nz(z), data(size_t(c * x * y * z), fill) {}

bool Volume::same_grid(const Volume& o, double tol) const {
    if (nx != o.nx || ny != o.ny || nz != o.nz) return false;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(spacing[a] - o.spacing[a]) > tol) return false;
    }
    return affine.approx_equal(o.affine, tol);
}

float Volume::channel_min(int64_t c) const {
    const float* p = data.data() + c * voxels_per_channel();
    return *std::min_element(p, p + voxels_per_channel());
}

float Volume::channel_max(int64_t c) const {
    const float* p = data.data() + c * voxels_per_channel();
    return *std::max_element(p, p + voxels_per_channel());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

double parse_coord(const std::string& field, const std::string& patient) {
    std::string f = trim(field);
    char* end = nullptr;
    double v = std::strtod(f.c_str(), &end);
    if (f.empty() || end != f.c_str() + f.size() || !std::isfinite(v)) {
        throw GeometryError(GeometryError::Code::NonNumericCoordinate,
                            "non-numeric coordinate '" + field + "' for patient " + patient);
    }
    return v;
}

}  // namespace

std::vector<BoundingBoxMM> parse_bbox_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw GeometryError(GeometryError::Code::MissingColumn, "empty bounding-box CSV");
    }
    auto header = split_csv_line(line);
    const char* expected[] = {"PatientID", "x1", "y1", "z1", "x2", "y2", "z2"};
    if (header.size() < 7) {
        throw GeometryError(GeometryError::Code::MissingColumn,
                            "bounding-box CSV header has fewer than 7 columns");
    }
    for (int i = 0; i < 7; ++i) {
        if (trim(header[i]) != expected[i]) {
            throw GeometryError(GeometryError::Code::MissingColumn,
                                std::string("missing or misplaced column '") + expected[i] + "'");
        }
    }

    std::vector<BoundingBoxMM> rows;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() < 7) {
            throw GeometryError(GeometryError::Code::MissingColumn,
                                "bounding-box row with fewer than 7 fields: " + line);
        }
        BoundingBoxMM b;
        b.patient_id = trim(fields[0]);
        if (!seen.insert(b.patient_id).second) {
            throw GeometryError(GeometryError::Code::DuplicatePatient,
                                "duplicate patient id " + b.patient_id);
        }
        b.x1 = parse_coord(fields[1], b.patient_id);
        b.y1 = parse_coord(fields[2], b.patient_id);
        b.z1 = parse_coord(fields[3], b.patient_id);
        b.x2 = parse_coord(fields[4], b.patient_id);
        b.y2 = parse_coord(fields[5], b.patient_id);
        b.z2 = parse_coord(fields[6], b.patient_id);
        rows.push_back(b);
    }
    return rows;
}

float sample_trilinear(const Volume& v, int64_t c, double x, double y, double z, float fill) {
    // small fuzz keeps lattice-exact samples (e.g. idempotent re-crops) in bounds
    const double eps = 1e-4;
    if (x < -eps || y < -eps || z < -eps || x > double(v.nx - 1) + eps ||
        y > double(v.ny - 1) + eps || z > double(v.nz - 1) + eps) {
        return fill;
    }
    x = std::clamp(x, 0.0, double(v.nx - 1));
    y = std::clamp(y, 0.0, double(v.ny - 1));
    z = std::clamp(z, 0.0, double(v.nz - 1));
    int64_t x0 = std::min(int64_t(x), v.nx - 1), y0 = std::min(int64_t(y), v.ny - 1),
            z0 = std::min(int64_t(z), v.nz - 1);
    int64_t x1 = std::min(x0 + 1, v.nx - 1), y1 = std::min(y0 + 1, v.ny - 1),
            z1 = std::min(z0 + 1, v.nz - 1);
    double fx = x - double(x0), fy = y - double(y0), fz = z - double(z0);

    auto val = [&](int64_t i, int64_t j, int64_t k) { return double(v.at(c, i, j, k)); };
    double c00 = val(x0, y0, z0) * (1 - fz) + val(x0, y0, z1) * fz;
    double c01 = val(x0, y1, z0) * (1 - fz) + val(x0, y1, z1) * fz;
    double c10 = val(x1, y0, z0) * (1 - fz) + val(x1, y0, z1) * fz;
    double c11 = val(x1, y1, z0) * (1 - fz) + val(x1, y1, z1) * fz;
    double c0 = c00 * (1 - fy) + c01 * fy;
    double c1 = c10 * (1 - fy) + c11 * fy;
    return float(c0 * (1 - fx) + c1 * fx);
}

float sample_nearest(const Volume& v, int64_t c, double x, double y, double z, float fill) {
    int64_t i = int64_t(std::llround(x)), j = int64_t(std::llround(y)),
            k = int64_t(std::llround(z));
    if (i < 0 || j < 0 || k < 0 || i >= v.nx || j >= v.ny || k >= v.nz) return fill;
    return v.at(c, i, j, k);
}

Volume crop_resample(const Volume& v, const BoundingBoxMM& bbox, Interp interp) {
    int64_t ox = std::llround(bbox.x2 - bbox.x1);
    int64_t oy = std::llround(bbox.y2 - bbox.y1);
    int64_t oz = std::llround(bbox.z2 - bbox.z1);
    if (ox < 1 || oy < 1 || oz < 1) {
        throw GeometryError(GeometryError::Code::NoOverlap, "bounding box has no volume");
    }

    Affine inv = v.affine.inverse();
    Volume out(v.channels, ox, oy, oz);
    out.spacing = {1.0, 1.0, 1.0};
    out.affine = Affine::identity();
    out.affine.m[3] = bbox.x1 + 0.5;
    out.affine.m[7] = bbox.y1 + 0.5;
    out.affine.m[11] = bbox.z1 + 0.5;

    std::vector<float> fills(size_t(v.channels), 0.0f);
    if (interp == Interp::Trilinear) {
        for (int64_t c = 0; c < v.channels; ++c) fills[size_t(c)] = v.channel_min(c);
    }

    bool any_inside = false;
    for (int64_t c = 0; c < v.channels; ++c) {
        const float fill = fills[size_t(c)];
        for (int64_t i = 0; i < ox; ++i) {
            double px = bbox.x1 + 0.5 + double(i);
            for (int64_t j = 0; j < oy; ++j) {
                double py = bbox.y1 + 0.5 + double(j);
                for (int64_t k = 0; k < oz; ++k) {
                    double pz = bbox.z1 + 0.5 + double(k);
                    auto s = inv.apply(px, py, pz);
                    float val = interp == Interp::Trilinear
                                    ? sample_trilinear(v, c, s[0], s[1], s[2], fill)
                                    : sample_nearest(v, c, s[0], s[1], s[2], fill);
                    out.at(c, i, j, k) = val;
                    if (!any_inside && c == 0) {
                        any_inside = s[0] >= 0 && s[1] >= 0 && s[2] >= 0 &&
                                     s[0] <= double(v.nx - 1) && s[1] <= double(v.ny - 1) &&
                                     s[2] <= double(v.nz - 1);
                    }
                }
            }
        }
    }
    if (!any_inside) {
        throw GeometryError(GeometryError::Code::NoOverlap,
                            "bounding box does not intersect the volume for patient " +
                                bbox.patient_id);
    }
    return out;
}

Volume normalize_ct(const Volume& v) {
    Volume out = v;
    for (float& x : out.data) {
        if (!std::isfinite(x)) {
            throw GeometryError(GeometryError::Code::NonFiniteInput,
                                "non-finite CT intensity");
        }
        x = std::clamp(x, -1024.0f, 1024.0f) / 1024.0f;
    }
    return out;
}

Volume normalize_pet_zscore(const Volume& v) {
    if (v.size() < 2) {
        throw GeometryError(GeometryError::Code::ZeroVariance,
                            "z-score needs at least 2 voxels");
    }
    double mean = 0.0;
    for (float x : v.data) {
        if (!std::isfinite(x)) {
            throw GeometryError(GeometryError::Code::NonFiniteInput,
                                "non-finite PET intensity");
        }
        mean += double(x);
    }
    mean /= double(v.size());
    double var = 0.0;
    for (float x : v.data) {
        double d = double(x) - mean;
        var += d * d;
    }
    var /= double(v.size());
    if (var <= 0.0) {
        throw GeometryError(GeometryError::Code::ZeroVariance, "constant PET volume");
    }
    double inv_std = 1.0 / std::sqrt(var);
    Volume out = v;
    for (float& x : out.data) x = float((double(x) - mean) * inv_std);
    return out;
}

Volume stack_modalities(const Volume& ct, const Volume& pet) {
    if (ct.channels != 1 || pet.channels != 1 || !ct.same_grid(pet)) {
        throw GeometryError(GeometryError::Code::GridMismatch,
                            "CT and PET grids do not match");
    }
    Volume out(2, ct.nx, ct.ny, ct.nz);
    out.spacing = ct.spacing;
    out.affine = ct.affine;
    std::copy(ct.data.begin(), ct.data.end(), out.data.begin());
    std::copy(pet.data.begin(), pet.data.end(), out.data.begin() + ct.size());
    return out;
}

}  // namespace hnseg
