#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hnseg/nifti.hpp"
#include "hnseg/pipeline.hpp"
#include "hnseg/rng.hpp"

namespace fs = std::filesystem;
using namespace hnseg;

namespace {

const std::string kCli = HNSEG_CLI_PATH;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("hnseg_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

int run(const std::string& args) {
    std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

Volume noise(int64_t n, uint64_t seed, float lo, float hi) {
    Volume v(1, n, n, n);
    CounterRng rng(seed, 99);
    for (auto& x : v.data) x = float(rng.uniform(lo, hi));
    return v;
}

Volume ball(int64_t n, double r) {
    Volume m(1, n, n, n, 0.0f);
    double c = double(n - 1) / 2;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            for (int64_t k = 0; k < n; ++k) {
                double dx = i - c, dy = j - c, dz = k - c;
                if (dx * dx + dy * dy + dz * dz <= r * r) m.at(0, i, j, k) = 1.0f;
            }
        }
    }
    return m;
}

void write_raw(const std::string& dir, const std::vector<std::string>& ids, int64_t raw_n,
               int64_t crop_n) {
    fs::create_directories(dir);
    std::ofstream csv(fs::path(dir) / "bbox.csv");
    csv << "PatientID,x1,y1,z1,x2,y2,z2\n";
    const double lo = double(raw_n - crop_n) / 2.0 - 0.5;
    uint64_t seed = 50;
    for (const auto& pid : ids) {
        write_nifti_file(dir + "/" + pid + "_ct.nii.gz", noise(raw_n, seed++, -800, 800));
        write_nifti_file(dir + "/" + pid + "_pt.nii.gz", noise(raw_n, seed++, 0, 8));
        write_nifti_file(dir + "/" + pid + "_gtvt.nii.gz", ball(raw_n, double(raw_n) / 5));
        csv << pid << "," << lo << "," << lo << "," << lo << "," << lo + double(crop_n) << ","
            << lo + double(crop_n) << "," << lo + double(crop_n) << "\n";
    }
}

std::string toy_model_flags() {
    return " --set model.img_size=8 --set model.patch_size=8 --set model.embed_dim=8"
           " --set model.num_layers=4 --set model.num_heads=2 --set model.mlp_dim=16"
           " --set model.base_features=2 --set batch_size=2 --set checkpoint_every=1";
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("preprocess: success, idempotent rerun, exit 2 on empty root") {
    TempDir tmp("prep");
    write_raw(tmp.str() + "/raw", {"AAX001", "AAX002", "BBY001", "BBY002", "CCZ001"}, 12, 8);
    CHECK(run("preprocess --data " + tmp.str() + "/raw --bbox " + tmp.str() +
              "/raw/bbox.csv --out " + tmp.str() + "/prep") == 0);
    CHECK(fs::exists(tmp.path / "prep/manifest.csv"));
    int64_t files = 0;
    for (auto& e : fs::directory_iterator(tmp.str() + "/prep")) {
        files += e.path().extension() == ".gz";
    }
    CHECK(files == 15);  // 5 patients x 3 volumes

    auto before = slurp(tmp.str() + "/prep/manifest.csv");
    CHECK(run("preprocess --data " + tmp.str() + "/raw --bbox " + tmp.str() +
              "/raw/bbox.csv --out " + tmp.str() + "/prep") == 0);
    CHECK(slurp(tmp.str() + "/prep/manifest.csv") == before);

    fs::create_directories(tmp.str() + "/empty");
    std::ofstream csv(tmp.path / "empty/bbox.csv");
    csv << "PatientID,x1,y1,z1,x2,y2,z2\nZZZ001,0,0,0,8,8,8\n";
    csv.close();
    CHECK(run("preprocess --data " + tmp.str() + "/empty --bbox " + tmp.str() +
              "/empty/bbox.csv --out " + tmp.str() + "/prep2") == 2);
}

TEST_CASE("train: exit 4 on bad config, exit 0 with epochs 0, verbatim augment record") {
    TempDir tmp("train");
    write_raw(tmp.str() + "/raw", {"AAX001", "BBY001"}, 12, 8);
    REQUIRE(run("preprocess --data " + tmp.str() + "/raw --bbox " + tmp.str() +
                "/raw/bbox.csv --out " + tmp.str() + "/prep") == 0);

    CHECK(run("train --data " + tmp.str() + "/prep --fold BBY --out " + tmp.str() +
              "/run --set epochs=0 --set nonsense_key=1" + toy_model_flags()) == 4);
    CHECK(run("train --data " + tmp.str() + "/prep --fold BBY --out " + tmp.str() +
              "/run --set epochs=0 --set learning_rate=0" + toy_model_flags()) == 4);
    CHECK(run("train --data " + tmp.str() + "/prep --fold BBY --out " + tmp.str() +
              "/run --set epochs=0 --augment MR,XX" + toy_model_flags()) == 4);

    CHECK(run("train --data " + tmp.str() + "/prep --fold BBY --out " + tmp.str() +
              "/run --set epochs=0 --augment MR,RT,GC,ED --seed 3" + toy_model_flags()) == 0);
    std::string report = slurp(tmp.str() + "/run/run_report.txt");
    CHECK(report.find("augmentations=MR,RT,GC,ED") != std::string::npos);
    CHECK(fs::exists(tmp.path / "run/metrics_BBY.csv"));
    CHECK(fs::exists(tmp.path / "run/loss_log.csv"));

    // unknown fold is an input error
    CHECK(run("train --data " + tmp.str() + "/prep --fold NOPE --out " + tmp.str() +
              "/run2 --set epochs=0" + toy_model_flags()) == 2);
}

TEST_CASE("train twice with one seed produces identical loss logs") {
    TempDir tmp("det");
    write_raw(tmp.str() + "/raw", {"AAX001", "AAX002", "BBY001"}, 12, 8);
    REQUIRE(run("preprocess --data " + tmp.str() + "/raw --bbox " + tmp.str() +
                "/raw/bbox.csv --out " + tmp.str() + "/prep") == 0);
    std::string train = "train --data " + tmp.str() + "/prep --fold BBY --set epochs=2" +
                        " --set augment.pipeline=MR,RT --seed 9" + toy_model_flags();
    CHECK(run(train + " --out " + tmp.str() + "/a") == 0);
    CHECK(run(train + " --out " + tmp.str() + "/b") == 0);
    CHECK(slurp(tmp.str() + "/a/loss_log.csv") == slurp(tmp.str() + "/b/loss_log.csv"));
    CHECK(!slurp(tmp.str() + "/a/loss_log.csv").empty());
}

TEST_CASE("evaluate: perfect agreement, empty prediction, unpaired exit 2") {
    TempDir tmp("eval");
    fs::create_directories(tmp.str() + "/pred");
    fs::create_directories(tmp.str() + "/gt");
    Volume m1 = ball(10, 3.0);
    write_nifti_file(tmp.str() + "/pred/AAX001_pred.nii.gz", m1);
    write_nifti_file(tmp.str() + "/gt/AAX001_gtvt.nii.gz", m1);
    CHECK(run("evaluate --pred " + tmp.str() + "/pred --gt " + tmp.str() + "/gt --out " +
              tmp.str() + "/out") == 0);
    std::string csv = slurp(tmp.str() + "/out/metrics.csv");
    CHECK(csv.find("AAX001,AAX,1.000000,1.000000,1.000000") != std::string::npos);

    // empty prediction vs non-empty gt: DSC 0
    Volume empty(1, 10, 10, 10, 0.0f);
    write_nifti_file(tmp.str() + "/pred/AAX001_pred.nii.gz", empty);
    CHECK(run("evaluate --pred " + tmp.str() + "/pred --gt " + tmp.str() + "/gt --out " +
              tmp.str() + "/out2") == 0);
    CHECK(slurp(tmp.str() + "/out2/metrics.csv").find("AAX001,AAX,0.000000") !=
          std::string::npos);

    write_nifti_file(tmp.str() + "/gt/BBY001_gtvt.nii.gz", m1);
    CHECK(run("evaluate --pred " + tmp.str() + "/pred --gt " + tmp.str() + "/gt --out " +
              tmp.str() + "/out3") == 2);
}

TEST_CASE("predict and overlay run end to end on a toy checkpoint") {
    TempDir tmp("pred");
    write_raw(tmp.str() + "/raw", {"AAX001", "BBY001"}, 12, 8);
    REQUIRE(run("preprocess --data " + tmp.str() + "/raw --bbox " + tmp.str() +
                "/raw/bbox.csv --out " + tmp.str() + "/prep") == 0);
    REQUIRE(run("train --data " + tmp.str() + "/prep --fold BBY --out " + tmp.str() +
                "/run --set epochs=1 --seed 1" + toy_model_flags()) == 0);

    CHECK(run("predict --checkpoint " + tmp.str() + "/run/ckpt_best.bin --data " + tmp.str() +
              "/prep --out " + tmp.str() + "/pred --case AAX001") == 0);
    auto [ph, prob] = read_nifti_file(tmp.str() + "/pred/AAX001_prob.nii.gz");
    auto [mh, mask] = read_nifti_file(tmp.str() + "/pred/AAX001_pred.nii.gz");
    CHECK(prob.nx == 8);
    for (float x : prob.data) CHECK((x > 0.0f && x < 1.0f));
    for (float x : mask.data) CHECK((x == 0.0f || x == 1.0f));
    // thresholding the probability volume reproduces the mask output
    for (size_t i = 0; i < prob.data.size(); ++i) {
        CHECK(((prob.data[i] > 0.5f) ? 1.0f : 0.0f) == mask.data[i]);
    }

    // prediction straight from raw data matches the preprocessed route
    CHECK(run("predict --checkpoint " + tmp.str() + "/run/ckpt_best.bin --data " + tmp.str() +
              "/raw --bbox " + tmp.str() + "/raw/bbox.csv --out " + tmp.str() +
              "/pred_raw --case AAX001") == 0);
    auto [h2, mask2] = read_nifti_file(tmp.str() + "/pred_raw/AAX001_pred.nii.gz");
    CHECK(mask2.data == mask.data);

    CHECK(run("overlay --image " + tmp.str() + "/prep/AAX001_ct.nii.gz --pred " + tmp.str() +
              "/pred/AAX001_pred.nii.gz --gt " + tmp.str() + "/prep/AAX001_gtvt.nii.gz" +
              " --out " + tmp.str() + "/ov --patient AAX001") == 0);
    int64_t pgms = 0;
    for (auto& e : fs::directory_iterator(tmp.str() + "/ov")) {
        pgms += e.path().extension() == ".pgm";
    }
    CHECK(pgms >= 1);
}

TEST_CASE("overlay contours: empty mask leaves the slice plain, full mask rings it") {
    TempDir tmp("ovl");
    const int64_t n = 12;
    Volume img(1, n, n, n);
    CounterRng rng(5, 6);
    for (auto& x : img.data) x = float(rng.uniform(0, 1));
    Volume empty(1, n, n, n, 0.0f);
    Volume full(1, n, n, n, 1.0f);
    write_nifti_file(tmp.str() + "/img.nii.gz", img);
    write_nifti_file(tmp.str() + "/empty.nii.gz", empty);
    write_nifti_file(tmp.str() + "/full.nii.gz", full);

    REQUIRE(run("overlay --image " + tmp.str() + "/img.nii.gz --pred " + tmp.str() +
                "/empty.nii.gz --out " + tmp.str() + "/plain --patient P") == 0);
    REQUIRE(run("overlay --image " + tmp.str() + "/img.nii.gz --pred " + tmp.str() +
                "/full.nii.gz --out " + tmp.str() + "/ring --patient P") == 0);

    auto read_pgm = [](const std::string& path, int64_t& w, int64_t& h) {
        std::ifstream in(path, std::ios::binary);
        std::string magic;
        in >> magic;
        int64_t maxv;
        in >> w >> h >> maxv;
        in.get();
        std::vector<uint8_t> pix(size_t(w * h));
        in.read(reinterpret_cast<char*>(pix.data()), std::streamsize(pix.size()));
        return pix;
    };

    int64_t w = 0, h = 0;
    auto plain = read_pgm(tmp.str() + "/plain/P_z" + std::to_string(n / 2) + ".pgm", w, h);
    CHECK(w == n);
    CHECK(h == n);
    for (uint8_t v : plain) CHECK(v <= 150);  // base gray only

    auto ring = read_pgm(tmp.str() + "/ring/P_z" + std::to_string(n / 2) + ".pgm", w, h);
    for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < n; ++i) {
            const bool border = i == 0 || j == 0 || i == n - 1 || j == n - 1;
            if (border) {
                CHECK(ring[size_t(j * n + i)] == 255);
            } else {
                CHECK(ring[size_t(j * n + i)] <= 150);
            }
        }
    }
}

TEST_CASE("augment-preview writes a deterministic augmented sample") {
    TempDir tmp("aug");
    write_raw(tmp.str() + "/raw", {"AAX001", "BBY001"}, 12, 8);
    REQUIRE(run("preprocess --data " + tmp.str() + "/raw --bbox " + tmp.str() +
                "/raw/bbox.csv --out " + tmp.str() + "/prep") == 0);
    std::string cmd = "augment-preview --data " + tmp.str() + "/prep --case AAX001" +
                      " --pipeline MR,RT,GC,ED --seed 4" + toy_model_flags();
    CHECK(run(cmd + " --out " + tmp.str() + "/a") == 0);
    CHECK(run(cmd + " --out " + tmp.str() + "/b") == 0);
    auto [ha, va] = read_nifti_file(tmp.str() + "/a/AAX001_ct.nii.gz");
    auto [hb, vb] = read_nifti_file(tmp.str() + "/b/AAX001_ct.nii.gz");
    CHECK(va.data == vb.data);
}
