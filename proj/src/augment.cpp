#include "hnseg/augment.hpp"

#include <algorithm>
#include <cmath>

namespace hnseg {

namespace {

constexpr const char* kAugNames[kAugCount] = {"MR", "RT", "ZM", "GC", "ED"};

// deg -> rad
constexpr double kPi = 3.14159265358979323846;

Volume geometric_identity_like(const Volume& v) {
    Volume out = v;
    return out;
}

void check_same_grids(const SampleCase& c) {
    if (!c.ct.same_grid(c.pet) || (c.has_mask() && !c.ct.same_grid(c.mask))) {
        throw GeometryError(GeometryError::Code::GridMismatch,
                            "case volumes are not on one grid: " + c.patient_id);
    }
}

}  // namespace

bool AugmentSpec::any_enabled() const {
    for (bool b : enabled) {
        if (b) return true;
    }
    return false;
}

void AugmentSpec::validate() const {
    for (double p : probability) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw AugmentError(AugmentError::Code::BadSpec,
                               "augmentation probability outside [0,1]");
        }
    }
    if (!(gamma_min > 0.0) || !(gamma_max >= gamma_min)) {
        throw AugmentError(AugmentError::Code::BadSpec, "gamma range must be positive");
    }
    if (!(zoom_factor > 1.0)) {
        throw AugmentError(AugmentError::Code::BadSpec, "zoom factor must exceed 1");
    }
    if (rotation_min_deg > rotation_max_deg || rotation_min_deg < -45.0 ||
        rotation_max_deg > 45.0) {
        throw AugmentError(AugmentError::Code::BadSpec,
                           "rotation range must sit inside [-45,45]");
    }
    if (elastic_grid < 2) {
        throw AugmentError(AugmentError::Code::BadSpec, "elastic grid needs >= 2 points");
    }
    if (elastic_sigma_mm < 0.0) {
        throw AugmentError(AugmentError::Code::BadSpec, "elastic sigma must be >= 0");
    }
}

std::string AugmentSpec::pipeline_name() const {
    std::string out;
    for (int i = 0; i < kAugCount; ++i) {
        if (!enabled[size_t(i)]) continue;
        if (!out.empty()) out += ',';
        out += kAugNames[i];
    }
    return out.empty() ? "NA" : out;
}

std::array<bool, kAugCount> AugmentSpec::parse_pipeline(const std::string& name) {
    std::array<bool, kAugCount> set{};
    std::string token;
    auto flush = [&](const std::string& t) {
        if (t.empty()) return;
        if (t == "NA") return;  // explicit no-augmentation tag
        for (int i = 0; i < kAugCount; ++i) {
            if (t == kAugNames[i]) {
                set[size_t(i)] = true;
                return;
            }
        }
        throw AugmentError(AugmentError::Code::BadSpec, "unknown augmentation tag '" + t + "'");
    };
    for (char ch : name) {
        if (ch == ',' || ch == ' ') {
            flush(token);
            token.clear();
        } else {
            token += ch;
        }
    }
    flush(token);
    return set;
}

Volume flip_x(const Volume& v) {
    Volume out = geometric_identity_like(v);
    const int64_t plane = v.ny * v.nz;
    for (int64_t c = 0; c < v.channels; ++c) {
        for (int64_t i = 0; i < v.nx; ++i) {
            const float* src = v.data.data() + (c * v.nx + (v.nx - 1 - i)) * plane;
            float* dst = out.data.data() + (c * v.nx + i) * plane;
            std::copy(src, src + plane, dst);
        }
    }
    return out;
}

Volume rotate_axial_volume(const Volume& v, double angle_deg, Interp interp) {
    const double a = angle_deg * kPi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double cx = double(v.nx - 1) / 2.0, cy = double(v.ny - 1) / 2.0;

    Volume out = geometric_identity_like(v);
    for (int64_t c = 0; c < v.channels; ++c) {
        const float fill = interp == Interp::Trilinear ? v.channel_min(c) : 0.0f;
        for (int64_t i = 0; i < v.nx; ++i) {
            for (int64_t j = 0; j < v.ny; ++j) {
                // inverse map: rotate the target point back by -angle about the center
                double dx = double(i) - cx, dy = double(j) - cy;
                double sxc = cx + ca * dx + sa * dy;
                double syc = cy - sa * dx + ca * dy;
                for (int64_t k = 0; k < v.nz; ++k) {
                    out.at(c, i, j, k) =
                        interp == Interp::Trilinear
                            ? sample_trilinear(v, c, sxc, syc, double(k), fill)
                            : sample_nearest(v, c, sxc, syc, double(k), fill);
                }
            }
        }
    }
    return out;
}

Volume extract_subcube(const Volume& v, int64_t cx, int64_t cy, int64_t cz, int64_t sx,
                       int64_t sy, int64_t sz) {
    Volume out(v.channels, sx, sy, sz);
    out.spacing = v.spacing;
    out.affine = v.affine;
    for (int64_t c = 0; c < v.channels; ++c) {
        for (int64_t i = 0; i < sx; ++i) {
            for (int64_t j = 0; j < sy; ++j) {
                const float* src = &v.data[size_t(v.index(c, cx + i, cy + j, cz))];
                float* dst = &out.data[size_t(out.index(c, i, j, 0))];
                std::copy(src, src + sz, dst);
            }
        }
    }
    return out;
}

Volume resize_volume(const Volume& v, int64_t nx, int64_t ny, int64_t nz, Interp interp) {
    Volume out(v.channels, nx, ny, nz);
    out.spacing = v.spacing;
    out.affine = v.affine;
    // align-corners mapping: first and last voxel centers correspond
    const double mx = nx > 1 ? double(v.nx - 1) / double(nx - 1) : 0.0;
    const double my = ny > 1 ? double(v.ny - 1) / double(ny - 1) : 0.0;
    const double mz = nz > 1 ? double(v.nz - 1) / double(nz - 1) : 0.0;
    for (int64_t c = 0; c < v.channels; ++c) {
        const float fill = interp == Interp::Trilinear ? v.channel_min(c) : 0.0f;
        for (int64_t i = 0; i < nx; ++i) {
            for (int64_t j = 0; j < ny; ++j) {
                for (int64_t k = 0; k < nz; ++k) {
                    double sx = double(i) * mx, sy = double(j) * my, sz = double(k) * mz;
                    out.at(c, i, j, k) = interp == Interp::Trilinear
                                             ? sample_trilinear(v, c, sx, sy, sz, fill)
                                             : sample_nearest(v, c, sx, sy, sz, fill);
                }
            }
        }
    }
    return out;
}

Volume warp_volume(const Volume& v, const std::vector<float>& field, int64_t grid,
                   Interp interp) {
    const int64_t g = grid;
    const int64_t g3 = g * g * g;
    // field holds 3 * g^3 mm displacements, axis-major, control z fastest
    auto fidx = [g](int axis, int64_t a, int64_t b, int64_t c) {
        return size_t(((int64_t(axis) * g + a) * g + b) * g + c);
    };
    const double ux = v.nx > 1 ? double(g - 1) / double(v.nx - 1) : 0.0;
    const double uy = v.ny > 1 ? double(g - 1) / double(v.ny - 1) : 0.0;
    const double uz = v.nz > 1 ? double(g - 1) / double(v.nz - 1) : 0.0;

    auto interp_field = [&](int axis, double gx, double gy, double gz) {
        int64_t x0 = std::min(int64_t(gx), g - 1), y0 = std::min(int64_t(gy), g - 1),
                z0 = std::min(int64_t(gz), g - 1);
        int64_t x1 = std::min(x0 + 1, g - 1), y1 = std::min(y0 + 1, g - 1),
                z1 = std::min(z0 + 1, g - 1);
        double fx = gx - double(x0), fy = gy - double(y0), fz = gz - double(z0);
        auto f = [&](int64_t a, int64_t b, int64_t c) { return double(field[fidx(axis, a, b, c)]); };
        double c00 = f(x0, y0, z0) * (1 - fz) + f(x0, y0, z1) * fz;
        double c01 = f(x0, y1, z0) * (1 - fz) + f(x0, y1, z1) * fz;
        double c10 = f(x1, y0, z0) * (1 - fz) + f(x1, y0, z1) * fz;
        double c11 = f(x1, y1, z0) * (1 - fz) + f(x1, y1, z1) * fz;
        return (c00 * (1 - fy) + c01 * fy) * (1 - fx) + (c10 * (1 - fy) + c11 * fy) * fx;
    };

    Volume out = geometric_identity_like(v);
    for (int64_t c = 0; c < v.channels; ++c) {
        const float fill = interp == Interp::Trilinear ? v.channel_min(c) : 0.0f;
        for (int64_t i = 0; i < v.nx; ++i) {
            for (int64_t j = 0; j < v.ny; ++j) {
                for (int64_t k = 0; k < v.nz; ++k) {
                    double gx = double(i) * ux, gy = double(j) * uy, gz = double(k) * uz;
                    double sx = double(i) + interp_field(0, gx, gy, gz) / v.spacing[0];
                    double sy = double(j) + interp_field(1, gx, gy, gz) / v.spacing[1];
                    double sz = double(k) + interp_field(2, gx, gy, gz) / v.spacing[2];
                    out.at(c, i, j, k) = interp == Interp::Trilinear
                                             ? sample_trilinear(v, c, sx, sy, sz, fill)
                                             : sample_nearest(v, c, sx, sy, sz, fill);
                }
            }
        }
    }
    return out;
}

SampleCase mirror_lr(const SampleCase& c) {
    check_same_grids(c);
    SampleCase out = c;
    out.ct = flip_x(c.ct);
    out.pet = flip_x(c.pet);
    if (c.has_mask()) out.mask = flip_x(c.mask);
    return out;
}

SampleCase rotate_axial(const SampleCase& c, double angle_deg) {
    if (angle_deg < -45.0 || angle_deg > 45.0) {
        throw AugmentError(AugmentError::Code::AngleOutOfRange,
                           "rotation angle " + std::to_string(angle_deg) + " outside [-45,45]");
    }
    check_same_grids(c);
    SampleCase out = c;
    out.ct = rotate_axial_volume(c.ct, angle_deg, Interp::Trilinear);
    out.pet = rotate_axial_volume(c.pet, angle_deg, Interp::Trilinear);
    if (c.has_mask()) out.mask = rotate_axial_volume(c.mask, angle_deg, Interp::Nearest);
    return out;
}

SampleCase zoom_crop_at(const SampleCase& c, const AugmentSpec& spec, int64_t cx, int64_t cy,
                        int64_t cz) {
    check_same_grids(c);
    const Volume& v = c.ct;
    int64_t sx = std::llround(double(v.nx) / spec.zoom_factor);
    int64_t sy = std::llround(double(v.ny) / spec.zoom_factor);
    int64_t sz = std::llround(double(v.nz) / spec.zoom_factor);
    if (sx < 2 || sy < 2 || sz < 2) {
        throw AugmentError(AugmentError::Code::GridTooSmall, "volume too small to zoom");
    }
    if (cx < 0 || cy < 0 || cz < 0 || cx + sx > v.nx || cy + sy > v.ny || cz + sz > v.nz) {
        throw AugmentError(AugmentError::Code::GridTooSmall, "zoom crop corner out of range");
    }
    auto zoom_one = [&](const Volume& vol, Interp interp) {
        Volume sub = extract_subcube(vol, cx, cy, cz, sx, sy, sz);
        return resize_volume(sub, vol.nx, vol.ny, vol.nz, interp);
    };
    SampleCase out = c;
    out.ct = zoom_one(c.ct, Interp::Trilinear);
    out.pet = zoom_one(c.pet, Interp::Trilinear);
    if (c.has_mask()) out.mask = zoom_one(c.mask, Interp::Nearest);
    return out;
}

SampleCase zoom_crop(const SampleCase& c, const AugmentSpec& spec, CounterRng& rng) {
    const Volume& v = c.ct;
    int64_t sx = std::llround(double(v.nx) / spec.zoom_factor);
    int64_t sy = std::llround(double(v.ny) / spec.zoom_factor);
    int64_t sz = std::llround(double(v.nz) / spec.zoom_factor);
    if (sx < 2 || sy < 2 || sz < 2 || sx > v.nx || sy > v.ny || sz > v.nz) {
        throw AugmentError(AugmentError::Code::GridTooSmall, "volume too small to zoom");
    }
    int64_t cx = rng.uniform_int(v.nx - sx + 1);
    int64_t cy = rng.uniform_int(v.ny - sy + 1);
    int64_t cz = rng.uniform_int(v.nz - sz + 1);
    return zoom_crop_at(c, spec, cx, cy, cz);
}

SampleCase gamma_pet(const SampleCase& c, double gamma) {
    SampleCase out = c;
    float vmax = c.pet.channel_max(0);
    if (c.pet.channel_min(0) < 0.0f) {
        throw AugmentError(AugmentError::Code::NegativeInput,
                           "gamma correction expects raw non-negative PET");
    }
    if (vmax <= 0.0f) return out;  // all-zero channel is a fixed point
    const double inv_max = 1.0 / double(vmax);
    for (float& x : out.pet.data) {
        x = float(double(vmax) * std::pow(double(x) * inv_max, gamma));
    }
    return out;
}

SampleCase elastic_deform(const SampleCase& c, const AugmentSpec& spec, CounterRng& rng) {
    check_same_grids(c);
    const int64_t g = spec.elastic_grid;
    std::vector<float> field(size_t(3 * g * g * g));
    for (float& f : field) f = float(rng.normal() * spec.elastic_sigma_mm);

    SampleCase out = c;
    out.ct = warp_volume(c.ct, field, g, Interp::Trilinear);
    out.pet = warp_volume(c.pet, field, g, Interp::Trilinear);
    if (c.has_mask()) out.mask = warp_volume(c.mask, field, g, Interp::Nearest);
    return out;
}

SampleCase apply_pipeline(const SampleCase& c, const AugmentSpec& spec, uint64_t sample_index,
                          uint64_t epoch) {
    spec.validate();
    const uint64_t base = rng_key(spec.seed, sample_index, epoch);
    // each augmentation owns a substream, so gating one never shifts another
    auto stream = [&](Aug a) { return CounterRng(rng_key(base, 1 + uint64_t(a))); };

    SampleCase cur = c;
    if (spec.is_enabled(Aug::MR)) {
        CounterRng r = stream(Aug::MR);
        if (r.uniform() < spec.probability[size_t(Aug::MR)]) cur = mirror_lr(cur);
    }
    if (spec.is_enabled(Aug::RT)) {
        CounterRng r = stream(Aug::RT);
        if (r.uniform() < spec.probability[size_t(Aug::RT)]) {
            cur = rotate_axial(cur, r.uniform(spec.rotation_min_deg, spec.rotation_max_deg));
        }
    }
    if (spec.is_enabled(Aug::ZM)) {
        CounterRng r = stream(Aug::ZM);
        if (r.uniform() < spec.probability[size_t(Aug::ZM)]) cur = zoom_crop(cur, spec, r);
    }
    if (spec.is_enabled(Aug::GC)) {
        CounterRng r = stream(Aug::GC);
        if (r.uniform() < spec.probability[size_t(Aug::GC)]) {
            cur = gamma_pet(cur, r.uniform(spec.gamma_min, spec.gamma_max));
        }
    }
    if (spec.is_enabled(Aug::ED)) {
        CounterRng r = stream(Aug::ED);
        if (r.uniform() < spec.probability[size_t(Aug::ED)]) cur = elastic_deform(cur, spec, r);
    }
    return cur;
}

}  // namespace hnseg
