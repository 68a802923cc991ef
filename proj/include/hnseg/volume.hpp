#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hnseg {

class GeometryError : public std::runtime_error {
  public:
    enum class Code {
        MissingColumn,
        NonNumericCoordinate,
        DuplicatePatient,
        NoOverlap,
        NonFiniteInput,
        ZeroVariance,
        GridMismatch,
        DegenerateAffine,
    };
    GeometryError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

// 3x4 matrix mapping voxel index (i,j,k) to patient-space millimeters.
struct Affine {
    // row-major rows: [m00 m01 m02 t0 | m10 m11 m12 t1 | m20 m21 m22 t2]
    std::array<double, 12> m{};

    static Affine identity();
    static Affine diagonal(double sx, double sy, double sz);

    std::array<double, 3> apply(double i, double j, double k) const;
    // Maps mm back to voxel index space. Throws DegenerateAffine if the 3x3 block is singular.
    std::array<double, 3> apply_inverse(double x, double y, double z) const;
    Affine inverse() const;
    double det3() const;
    bool right_handed() const { return det3() > 0.0; }
    bool approx_equal(const Affine& o, double tol) const;
};

// Multi-channel 3D scalar field with physical spacing and origin.
// Layout: data[((c*nx + i)*ny + j)*nz + k], i.e. channel-major, z fastest.
struct Volume {
    int64_t channels = 1;
    int64_t nx = 0, ny = 0, nz = 0;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    Affine affine = Affine::identity();
    std::vector<float> data;

    Volume() = default;
    Volume(int64_t c, int64_t x, int64_t y, int64_t z, float fill = 0.0f);

    int64_t voxels_per_channel() const { return nx * ny * nz; }
    int64_t size() const { return channels * nx * ny * nz; }
    int64_t index(int64_t c, int64_t i, int64_t j, int64_t k) const {
        return ((c * nx + i) * ny + j) * nz + k;
    }
    float& at(int64_t c, int64_t i, int64_t j, int64_t k) { return data[index(c, i, j, k)]; }
    float at(int64_t c, int64_t i, int64_t j, int64_t k) const { return data[index(c, i, j, k)]; }

    bool same_grid(const Volume& o, double tol = 1e-6) const;
    float channel_min(int64_t c) const;
    float channel_max(int64_t c) const;
};

// Axis-aligned box in patient-space millimeters.
struct BoundingBoxMM {
    std::string patient_id;
    double x1 = 0, y1 = 0, z1 = 0;
    double x2 = 0, y2 = 0, z2 = 0;
};

struct PatientCase {
    std::string patient_id;
    std::string center_id;
    std::string ct_path;
    std::string pet_path;
    std::string mask_path;  // empty when the case is inference-only
    BoundingBoxMM bbox;

    bool has_mask() const { return !mask_path.empty(); }
};

enum class Interp { Trilinear, Nearest };

// Header "PatientID,x1,y1,z1,x2,y2,z2"; duplicate patient ids rejected.
std::vector<BoundingBoxMM> parse_bbox_csv(const std::string& text);

// Samples the source volume on a fresh isotropic 1.0 mm grid covering bbox.
// Voxel (0,0,0) of the output is centered at (x1+0.5, y1+0.5, z1+0.5) mm.
// One interpolation pass through the inverse affine; out-of-grid samples take
// the per-channel source minimum (trilinear) or 0 (nearest).
Volume crop_resample(const Volume& v, const BoundingBoxMM& bbox, Interp interp);

// clamp to [-1024,1024], divide by 1024
Volume normalize_ct(const Volume& v);

// (v - mean) / population std over all voxels
Volume normalize_pet_zscore(const Volume& v);

// 2-channel volume: channel 0 = CT, channel 1 = PET
Volume stack_modalities(const Volume& ct, const Volume& pet);

// Trilinear sample at voxel coordinates (integer coords are voxel centers).
// Returns fill for points outside [0, n-1] on any axis (small fuzz tolerated).
float sample_trilinear(const Volume& v, int64_t c, double x, double y, double z, float fill);
float sample_nearest(const Volume& v, int64_t c, double x, double y, double z, float fill);

}  // namespace hnseg
