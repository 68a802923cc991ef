#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "grad_check.hpp"
#include "hnseg/losses.hpp"
#include "hnseg/metrics.hpp"
#include "hnseg/rng.hpp"

using namespace hnseg;
using hnseg::testing::GradCheck;
using hnseg::testing::random_tensor;

namespace {

Volume mask_from_bits(std::vector<float> bits) {
    Volume v(1, 2, 2, 2);
    v.data = std::move(bits);
    return v;
}

Volume random_mask(int64_t n, uint64_t seed, double p = 0.4) {
    Volume v(1, n, n, n);
    CounterRng rng(seed, 0x3a5c);
    for (auto& x : v.data) x = rng.uniform() < p ? 1.0f : 0.0f;
    return v;
}

// independent brute-force TP/FP/FN counter used as the metric oracle
struct BruteCounts {
    int64_t tp = 0, fp = 0, fn = 0;
};
BruteCounts brute(const Volume& pred, const Volume& gt) {
    BruteCounts c;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        bool p = pred.data[i] != 0.0f, g = gt.data[i] != 0.0f;
        if (p && g) c.tp++;
        if (p && !g) c.fp++;
        if (!p && g) c.fn++;
    }
    return c;
}

}  // namespace

TEST_CASE("dsc/precision/recall on hand cases") {
    // identical non-empty masks
    Volume a = random_mask(4, 1);
    CHECK(dsc(a, a) == 1.0);
    CHECK(precision(a, a) == 1.0);
    CHECK(recall(a, a) == 1.0);

    // pred 4 voxels, gt 6, overlap 3: counted by hand, DSC 2*3/(4+6)
    Volume pred(1, 2, 2, 2, 0.0f), gt(1, 2, 2, 2, 0.0f);
    for (int i = 0; i < 4; ++i) pred.data[size_t(i)] = 1.0f;
    for (int i = 1; i < 7; ++i) gt.data[size_t(i)] = 1.0f;
    BruteCounts c = brute(pred, gt);
    CHECK(c.tp == 3);
    CHECK(c.fp == 1);
    CHECK(c.fn == 3);
    CHECK(dsc(pred, gt) == doctest::Approx(0.6));
    CHECK(precision(pred, gt) == doctest::Approx(0.75));
    CHECK(recall(pred, gt) == doctest::Approx(0.5));

    // pred {a,b}, gt {b,c}
    Volume p2 = mask_from_bits({1, 1, 0, 0, 0, 0, 0, 0});
    Volume g2 = mask_from_bits({0, 1, 1, 0, 0, 0, 0, 0});
    CHECK(precision(p2, g2) == doctest::Approx(0.5));
    CHECK(recall(p2, g2) == doctest::Approx(0.5));

    // empty-mask conventions
    Volume empty(1, 2, 2, 2, 0.0f);
    CHECK(dsc(empty, empty) == 1.0);
    CHECK(precision(empty, empty) == 1.0);
    CHECK(recall(empty, empty) == 1.0);
    CHECK(precision(empty, g2) == 0.0);
    CHECK(dsc(empty, g2) == 0.0);
    CHECK(recall(g2, empty) == 0.0);

    Volume other(1, 2, 2, 1, 0.0f);
    CHECK_THROWS_AS((void)dsc(pred, other), MetricsError);
}

TEST_CASE("metric identities on random masks") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
        Volume a = random_mask(6, seed * 2 + 1, 0.3);
        Volume b = random_mask(6, seed * 2 + 2, 0.5);
        BruteCounts c = brute(a, b);
        double d = dsc(a, b), p = precision(a, b), r = recall(a, b);
        // against the brute-force oracle
        if (2 * c.tp + c.fp + c.fn > 0) {
            CHECK(d == doctest::Approx(2.0 * double(c.tp) / double(2 * c.tp + c.fp + c.fn)));
        }
        // symmetry and cross identities
        CHECK(dsc(a, b) == doctest::Approx(dsc(b, a)));
        CHECK(precision(a, b) == doctest::Approx(recall(b, a)));
        // harmonic-mean identity wherever defined
        if (p + r > 0) {
            CHECK(d == doctest::Approx(2.0 * p * r / (p + r)).epsilon(1e-12));
        }
    }
}

TEST_CASE("binarize is strict at the threshold and monotone") {
    Volume v(1, 1, 1, 4);
    v.data = {0.5f, 0.500001f, 0.9f, 0.1f};
    Volume b = binarize(v, 0.5f);
    CHECK(b.data[0] == 0.0f);
    CHECK(b.data[1] == 1.0f);
    CHECK(b.data[2] == 1.0f);
    CHECK(b.data[3] == 0.0f);

    Volume nine(1, 2, 2, 2, 0.9f);
    Volume bn = binarize(nine, 0.5f);
    for (float x : bn.data) CHECK(x == 1.0f);

    // higher threshold selects a subset
    Volume r(1, 4, 4, 4);
    CounterRng rng(3, 4);
    for (auto& x : r.data) x = float(rng.uniform());
    Volume lo = binarize(r, 0.3f), hi = binarize(r, 0.7f);
    for (size_t i = 0; i < r.data.size(); ++i) {
        if (hi.data[i] == 1.0f) CHECK(lo.data[i] == 1.0f);
    }
}

TEST_CASE("aggregate and fold summaries") {
    MetricRow r1{"P1", "A", 0.7, 0.6, 0.8};
    MetricsReport one = aggregate({r1}, "A");
    CHECK(one.aggregate.mean_dsc == doctest::Approx(0.7));
    CHECK(one.aggregate.std_dsc == doctest::Approx(0.0));

    MetricsReport dup = aggregate({r1, r1, r1}, "A");
    CHECK(dup.aggregate.std_dsc == doctest::Approx(0.0));

    MetricsReport f1 = aggregate({MetricRow{"P1", "A", 0.7, 0.7, 0.7}}, "A");
    MetricsReport f2 = aggregate({MetricRow{"P2", "B", 0.8, 0.8, 0.8}}, "B");
    MetricAggregate s = summarize_folds({f1, f2});
    CHECK(s.mean_dsc == doctest::Approx(0.75));
    CHECK(s.std_dsc == doctest::Approx(0.05));

    CHECK_THROWS_AS((void)aggregate({}, "x"), MetricsError);
}

TEST_CASE("metrics CSV schemas") {
    MetricsReport rep = aggregate({MetricRow{"P1", "A", 0.5, 0.25, 1.0}}, "A");
    const std::string mpath = "/tmp/hnseg_metrics_test.csv";
    const std::string spath = "/tmp/hnseg_summary_test.csv";
    write_metrics_csv(rep, mpath);
    write_summary_csv({rep}, spath);
    std::ifstream m(mpath), s(spath);
    std::string line;
    std::getline(m, line);
    CHECK(line == "patient_id,center_id,dsc,precision,recall");
    std::getline(m, line);
    CHECK(line == "P1,A,0.500000,0.250000,1.000000");
    std::getline(s, line);
    CHECK(line == "fold,metric,mean,std");
    std::getline(s, line);
    CHECK(line == "A,dsc,0.500000,0.000000");
    std::remove(mpath.c_str());
    std::remove(spath.c_str());
}

TEST_CASE("soft dice loss hand values") {
    Tape<double> tape;
    LossConfig cfg;

    // perfect overlap: loss collapses to the eps scale
    Tensor<double> g = Tensor<double>::from_values({1, 2, 2, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
    Tensor<double> dice0 = soft_dice_loss(tape, g, g, cfg);
    CHECK(std::abs(dice0.item()) < 1e-4);

    // all-zero prediction against N foreground voxels
    Tensor<double> zeros = Tensor<double>::zeros({1, 2, 2, 2});
    Tensor<double> dice1 = soft_dice_loss(tape, zeros, g, cfg);
    CHECK(dice1.item() == doctest::Approx(1.0).epsilon(1e-4));

    // p = 0.5 on 8 voxels, 4 foreground: 1 - (2*2+eps)/(4+4+eps)
    Tensor<double> half = Tensor<double>::full({1, 2, 2, 2}, 0.5);
    Tensor<double> dice2 = soft_dice_loss(tape, half, g, cfg);
    CHECK(dice2.item() == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("focal loss hand values and BCE degeneration") {
    Tape<double> tape;
    LossConfig cfg;

    // perfect confident prediction
    Tensor<double> g = Tensor<double>::from_values({4}, {1, 0, 1, 0});
    Tensor<double> conf = Tensor<double>::from_values({4}, {1, 0, 1, 0});
    CHECK(focal_loss(tape, conf, g, cfg).item() <= 1e-5);

    // single voxel, g=1, p=0.5, gamma=2: 0.25 * ln 2
    Tensor<double> one = Tensor<double>::from_values({1}, {1.0});
    Tensor<double> p05 = Tensor<double>::from_values({1}, {0.5});
    CHECK(focal_loss(tape, p05, one, cfg).item() ==
          doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-6));

    // gamma = 0 reduces to mean BCE; oracle computed independently
    LossConfig bce_cfg;
    bce_cfg.focal_gamma = 0.0;
    Tensor<double> p = random_tensor({2, 3}, 5, 0.05, 0.95);
    Tensor<double> gg = Tensor<double>::from_values({2, 3}, {1, 0, 1, 1, 0, 0});
    double expect = 0;
    for (int i = 0; i < 6; ++i) {
        double pi = p.data()[i];
        expect += gg.data()[i] > 0.5 ? -std::log(pi) : -std::log(1.0 - pi);
    }
    expect /= 6.0;
    CHECK(focal_loss(tape, p, gg, bce_cfg).item() == doctest::Approx(expect).epsilon(1e-7));
}

TEST_CASE("combined loss weighting and linearity") {
    Tape<double> tape;
    Tensor<double> p = random_tensor({1, 2, 2, 2}, 6, 0.05, 0.95);
    Tensor<double> g = Tensor<double>::from_values({1, 2, 2, 2}, {1, 1, 0, 0, 1, 0, 1, 0});

    LossConfig dice_only;
    dice_only.focal_weight = 0.0;
    LossConfig focal_only;
    focal_only.dice_weight = 0.0;
    LossConfig both;

    double d = soft_dice_loss(tape, p, g, both).item();
    double f = focal_loss(tape, p, g, both).item();
    CHECK(combined_loss(tape, p, g, dice_only).item() == doctest::Approx(d));
    CHECK(combined_loss(tape, p, g, focal_only).item() == doctest::Approx(f));
    CHECK(combined_loss(tape, p, g, both).item() == doctest::Approx(d + f).epsilon(1e-7));

    LossConfig zero;
    zero.dice_weight = 0.0;
    zero.focal_weight = 0.0;
    CHECK_THROWS_AS(zero.validate(), TensorError);
}

TEST_CASE("combined loss gradient w.r.t. probabilities") {
    Tensor<double> p = random_tensor({1, 3, 3, 3}, 7, 0.1, 0.9);
    Volume gv = random_mask(3, 8);
    Tensor<double> g = Tensor<double>::zeros({1, 3, 3, 3});
    for (size_t i = 0; i < gv.data.size(); ++i) g.data()[i] = double(gv.data[i]);

    LossConfig cfg;
    GradCheck gc;
    gc.tol = 1e-4;
    gc.run([&](Tape<double>& t) { return combined_loss(t, p, g, cfg); }, {p});
}

TEST_CASE("focal loss is non-negative") {
    Tape<double> tape;
    for (uint64_t s = 0; s < 10; ++s) {
        Tensor<double> p = random_tensor({2, 2, 2}, 100 + s, 0.001, 0.999);
        Tensor<double> g = Tensor<double>::zeros({2, 2, 2});
        CounterRng rng(s, 0xf);
        for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        CHECK(focal_loss(tape, p, g).item() >= 0.0);
    }
}
