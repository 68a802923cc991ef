#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hnseg/rng.hpp"
#include "hnseg/volume.hpp"

namespace hnseg {

class AugmentError : public std::runtime_error {
  public:
    enum class Code { AngleOutOfRange, GridTooSmall, NegativeInput, BadSpec };
    AugmentError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

// Application order is fixed: MR -> RT -> ZM -> GC -> ED.
enum class Aug : int { MR = 0, RT = 1, ZM = 2, GC = 3, ED = 4 };
constexpr int kAugCount = 5;

// One training sample before modality stacking. CT arrives normalized from
// preprocessing; PET stays raw until after gamma correction, z-score runs last.
struct SampleCase {
    std::string patient_id;
    Volume ct;
    Volume pet;
    Volume mask;  // empty volume when the case is inference-only

    bool has_mask() const { return mask.size() > 0; }
};

struct AugmentSpec {
    std::array<bool, kAugCount> enabled{};      // all off = the "NA" pipeline
    std::array<double, kAugCount> probability{0.5, 0.5, 0.5, 0.5, 0.5};
    double rotation_min_deg = -45.0;
    double rotation_max_deg = 45.0;
    double zoom_factor = 1.25;
    double gamma_min = 0.5;
    double gamma_max = 2.0;
    int64_t elastic_grid = 4;       // control points per axis
    double elastic_sigma_mm = 4.0;  // std of control-point displacement
    uint64_t seed = 0;

    bool is_enabled(Aug a) const { return enabled[size_t(a)]; }
    void enable(Aug a, bool on = true) { enabled[size_t(a)] = on; }
    bool any_enabled() const;
    void validate() const;  // throws BadSpec

    // "NA" or the enabled tags in MR,RT,ZM,GC,ED order, e.g. "MR,RT,GC,ED"
    std::string pipeline_name() const;
    // Accepts comma-joined tag lists verbatim; throws BadSpec on unknown tags.
    static std::array<bool, kAugCount> parse_pipeline(const std::string& name);
};

SampleCase mirror_lr(const SampleCase& c);
SampleCase rotate_axial(const SampleCase& c, double angle_deg);
SampleCase zoom_crop(const SampleCase& c, const AugmentSpec& spec, CounterRng& rng);
SampleCase zoom_crop_at(const SampleCase& c, const AugmentSpec& spec, int64_t cx, int64_t cy,
                        int64_t cz);
SampleCase gamma_pet(const SampleCase& c, double gamma);
SampleCase elastic_deform(const SampleCase& c, const AugmentSpec& spec, CounterRng& rng);

// Gates and parameters come from counter streams keyed by
// (seed, sample_index, epoch); identical keys give identical output.
SampleCase apply_pipeline(const SampleCase& c, const AugmentSpec& spec, uint64_t sample_index,
                          uint64_t epoch);

// Volume-level primitives shared by the case-level ops.
Volume flip_x(const Volume& v);
Volume rotate_axial_volume(const Volume& v, double angle_deg, Interp interp);
Volume extract_subcube(const Volume& v, int64_t cx, int64_t cy, int64_t cz, int64_t sx,
                       int64_t sy, int64_t sz);
Volume resize_volume(const Volume& v, int64_t nx, int64_t ny, int64_t nz, Interp interp);
Volume warp_volume(const Volume& v, const std::vector<float>& field, int64_t grid, Interp interp);

}  // namespace hnseg
