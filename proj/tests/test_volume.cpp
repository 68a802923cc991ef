#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hnseg/rng.hpp"
#include "hnseg/volume.hpp"

using namespace hnseg;

namespace {

Volume random_volume(int64_t n, uint64_t seed, float lo = 0.0f, float hi = 100.0f) {
    Volume v(1, n, n, n);
    CounterRng rng(seed, 0xb0);
    for (auto& x : v.data) x = float(rng.uniform(lo, hi));
    return v;
}

}  // namespace

TEST_CASE("bbox csv parses rows, extents and rejects malformed input") {
    auto rows = parse_bbox_csv(
        "PatientID,x1,y1,z1,x2,y2,z2\n"
        "CHGJ007,12,-45,30,156,99,174\n");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].x2 - rows[0].x1 == doctest::Approx(144.0));
    CHECK(rows[0].y2 - rows[0].y1 == doctest::Approx(144.0));
    CHECK(rows[0].z2 - rows[0].z1 == doctest::Approx(144.0));

    CHECK(parse_bbox_csv("PatientID,x1,y1,z1,x2,y2,z2\n").empty());

    try {
        (void)parse_bbox_csv(
            "PatientID,x1,y1,z1,x2,y2,z2\nCHGJ007,0,0,0,1,1,1\nCHGJ007,0,0,0,1,1,1\n");
        FAIL("expected DuplicatePatient");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::DuplicatePatient);
    }
    try {
        (void)parse_bbox_csv("PatientID,x1,y1\nA,0,0\n");
        FAIL("expected MissingColumn");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::MissingColumn);
    }
    try {
        (void)parse_bbox_csv("PatientID,x1,y1,z1,x2,y2,z2\nA,zero,0,0,1,1,1\n");
        FAIL("expected NonNumericCoordinate");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::NonNumericCoordinate);
    }
}

TEST_CASE("crop on a boundary-aligned 1mm grid is an exact sub-array copy") {
    Volume v = random_volume(20, 1);
    BoundingBoxMM b;
    b.x1 = 1.5; b.y1 = 2.5; b.z1 = 3.5;
    b.x2 = 11.5; b.y2 = 12.5; b.z2 = 13.5;
    Volume out = crop_resample(v, b, Interp::Trilinear);
    CHECK(out.nx == 10);
    CHECK(out.ny == 10);
    CHECK(out.nz == 10);
    CHECK(out.spacing[0] == 1.0);
    for (int64_t i = 0; i < 10; ++i) {
        for (int64_t j = 0; j < 10; ++j) {
            for (int64_t k = 0; k < 10; ++k) {
                CHECK(out.at(0, i, j, k) == v.at(0, i + 2, j + 3, k + 4));
            }
        }
    }
    // output origin: voxel (0,0,0) center at (x1+0.5, ...)
    auto mm = out.affine.apply(0, 0, 0);
    CHECK(mm[0] == doctest::Approx(2.0));
    CHECK(mm[1] == doctest::Approx(3.0));
    CHECK(mm[2] == doctest::Approx(4.0));
}

TEST_CASE("crop of a constant volume stays constant") {
    Volume v(1, 16, 16, 16, 7.5f);
    BoundingBoxMM b;
    b.x1 = 2.2; b.y1 = 3.1; b.z1 = 1.7;
    b.x2 = 10.2; b.y2 = 11.1; b.z2 = 9.7;
    Volume out = crop_resample(v, b, Interp::Trilinear);
    for (float x : out.data) CHECK(x == doctest::Approx(7.5f));
}

TEST_CASE("trilinear resampling of a linear ramp is exact within 1e-5") {
    // source on a 2 mm grid; value = x coordinate in mm
    const int64_t n = 12;
    Volume v(1, n, n, n);
    v.spacing = {2, 2, 2};
    v.affine = Affine::diagonal(2, 2, 2);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            for (int64_t k = 0; k < n; ++k) v.at(0, i, j, k) = float(2 * i);
        }
    }
    BoundingBoxMM b;
    b.x1 = 3.0; b.y1 = 3.0; b.z1 = 3.0;
    b.x2 = 15.0; b.y2 = 15.0; b.z2 = 15.0;
    Volume out = crop_resample(v, b, Interp::Trilinear);
    REQUIRE(out.nx == 12);
    for (int64_t i = 0; i < out.nx; ++i) {
        // analytic oracle: the ramp evaluated at the target voxel center
        const double expected = b.x1 + 0.5 + double(i);
        for (int64_t j = 0; j < out.ny; ++j) {
            for (int64_t k = 0; k < out.nz; ++k) {
                CHECK(std::abs(out.at(0, i, j, k) - expected) < 1e-5);
            }
        }
    }
}

TEST_CASE("crop_resample is idempotent on its own output") {
    Volume v = random_volume(24, 2);
    BoundingBoxMM b;
    b.x1 = 2.5; b.y1 = 2.5; b.z1 = 2.5;
    b.x2 = 18.5; b.y2 = 18.5; b.z2 = 18.5;
    Volume once = crop_resample(v, b, Interp::Trilinear);
    Volume twice = crop_resample(once, b, Interp::Trilinear);
    REQUIRE(twice.data.size() == once.data.size());
    for (size_t i = 0; i < once.data.size(); ++i) {
        CHECK(std::abs(twice.data[i] - once.data[i]) < 1e-5);
    }
}

TEST_CASE("nearest-neighbor crop keeps masks binary and fills 0") {
    Volume mask(1, 10, 10, 10, 0.0f);
    for (int64_t i = 3; i < 7; ++i) {
        for (int64_t j = 3; j < 7; ++j) {
            for (int64_t k = 3; k < 7; ++k) mask.at(0, i, j, k) = 1.0f;
        }
    }
    BoundingBoxMM b;
    b.x1 = -5; b.y1 = -5; b.z1 = -5;
    b.x2 = 15; b.y2 = 15; b.z2 = 15;  // extends past the grid on every side
    Volume out = crop_resample(mask, b, Interp::Nearest);
    bool all_binary = true;
    for (float x : out.data) all_binary = all_binary && (x == 0.0f || x == 1.0f);
    CHECK(all_binary);
    CHECK(out.at(0, 0, 0, 0) == 0.0f);  // out-of-grid fill
}

TEST_CASE("out-of-grid trilinear samples take the source minimum") {
    Volume v(1, 8, 8, 8, 5.0f);
    v.at(0, 4, 4, 4) = 2.0f;  // channel minimum
    BoundingBoxMM b;
    b.x1 = -10; b.y1 = 1.5; b.z1 = 1.5;
    b.x2 = 4; b.y2 = 5.5; b.z2 = 5.5;
    Volume out = crop_resample(v, b, Interp::Trilinear);
    CHECK(out.at(0, 0, 0, 0) == doctest::Approx(2.0f));
}

TEST_CASE("no overlap raises NoOverlap") {
    Volume v(1, 8, 8, 8, 1.0f);
    BoundingBoxMM b;
    b.x1 = 100; b.y1 = 100; b.z1 = 100;
    b.x2 = 110; b.y2 = 110; b.z2 = 110;
    try {
        (void)crop_resample(v, b, Interp::Trilinear);
        FAIL("expected NoOverlap");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::NoOverlap);
    }
}

TEST_CASE("CT normalization: clip then scale") {
    Volume v(1, 2, 2, 2);
    v.data = {-2000, 0, 512, 1024, -1024, 3000, 100, -100};
    Volume out = normalize_ct(v);
    CHECK(out.data[0] == doctest::Approx(-1.0));
    CHECK(out.data[1] == doctest::Approx(0.0));
    CHECK(out.data[2] == doctest::Approx(0.5));
    CHECK(out.data[3] == doctest::Approx(1.0));
    CHECK(out.data[4] == doctest::Approx(-1.0));
    CHECK(out.data[5] == doctest::Approx(1.0));

    // range and monotonicity over random pairs
    Volume r = random_volume(8, 3, -4000.0f, 4000.0f);
    Volume rn = normalize_ct(r);
    for (float x : rn.data) CHECK((x >= -1.0f && x <= 1.0f));
    for (size_t i = 1; i < r.data.size(); ++i) {
        if (r.data[i - 1] <= r.data[i]) {
            CHECK(rn.data[i - 1] <= rn.data[i]);
        } else {
            CHECK(rn.data[i - 1] >= rn.data[i]);
        }
    }

    Volume bad(1, 1, 1, 2);
    bad.data = {0.0f, std::numeric_limits<float>::quiet_NaN()};
    try {
        (void)normalize_ct(bad);
        FAIL("expected NonFiniteInput");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::NonFiniteInput);
    }
}

TEST_CASE("z-score normalization matches the two-pass oracle") {
    Volume v(1, 1, 1, 3);
    v.data = {1, 2, 3};
    // independent two-pass oracle
    double mean = (1.0 + 2.0 + 3.0) / 3.0;
    double var = ((1 - mean) * (1 - mean) + (2 - mean) * (2 - mean) + (3 - mean) * (3 - mean)) / 3.0;
    double sd = std::sqrt(var);
    Volume out = normalize_pet_zscore(v);
    CHECK(out.data[0] == doctest::Approx((1 - mean) / sd).epsilon(1e-6));
    CHECK(out.data[0] == doctest::Approx(-1.2247).epsilon(1e-4));
    CHECK(out.data[1] == doctest::Approx(0.0));
    CHECK(out.data[2] == doctest::Approx(1.2247).epsilon(1e-4));

    Volume r = random_volume(8, 4, 0.0f, 50.0f);
    Volume rn = normalize_pet_zscore(r);
    double m = 0, s = 0;
    for (float x : rn.data) m += x;
    m /= double(rn.data.size());
    for (float x : rn.data) s += (x - m) * (x - m);
    s = std::sqrt(s / double(rn.data.size()));
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(s - 1.0) < 1e-5);

    Volume flat(1, 2, 2, 2, 42.0f);
    try {
        (void)normalize_pet_zscore(flat);
        FAIL("expected ZeroVariance");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::ZeroVariance);
    }
}

TEST_CASE("stacking keeps channel order CT then PET") {
    Volume ct = random_volume(6, 5);
    Volume pet = random_volume(6, 6);
    Volume s = stack_modalities(ct, pet);
    CHECK(s.channels == 2);
    for (int64_t i = 0; i < ct.size(); ++i) {
        CHECK(s.data[size_t(i)] == ct.data[size_t(i)]);
        CHECK(s.data[size_t(ct.size() + i)] == pet.data[size_t(i)]);
    }
    Volume small = random_volume(5, 7);
    try {
        (void)stack_modalities(ct, small);
        FAIL("expected GridMismatch");
    } catch (const GeometryError& e) {
        CHECK(e.code == GeometryError::Code::GridMismatch);
    }
}

TEST_CASE("affine inverse composes to identity") {
    Affine a;
    a.m = {0.9, 0.1, 0.0, 5.0, -0.1, 1.1, 0.05, -3.0, 0.0, 0.02, 0.95, 12.0};
    Affine inv = a.inverse();
    auto mm = a.apply(3, -2, 7);
    auto back = inv.apply(mm[0], mm[1], mm[2]);
    CHECK(back[0] == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(back[1] == doctest::Approx(-2.0).epsilon(1e-9));
    CHECK(back[2] == doctest::Approx(7.0).epsilon(1e-9));

    Affine sing = Affine::diagonal(1, 1, 0);
    CHECK_THROWS_AS((void)sing.inverse(), GeometryError);
}
