#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include "hnseg/augment.hpp"
#include "hnseg/checkpoint.hpp"
#include "hnseg/config.hpp"
#include "hnseg/nifti.hpp"
#include "hnseg/overlay.hpp"
#include "hnseg/pipeline.hpp"
#include "hnseg/train.hpp"

namespace fs = std::filesystem;
using namespace hnseg;

namespace {

// stable exit-code contract: 0 ok, 2 input, 3 numerical, 4 config
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitConfig = 4;

int guard(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const AugmentError& e) {
        std::cerr << (e.code == AugmentError::Code::BadSpec ? "config error: " : "error: ")
                  << e.what() << "\n";
        return e.code == AugmentError::Code::BadSpec ? kExitConfig : kExitInput;
    } catch (const TensorError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code == TensorError::Code::BadArgument ? kExitConfig : kExitInput;
    } catch (const PipelineError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code == PipelineError::Code::NonFiniteLoss ? kExitNumerical : kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
}

TrainConfig make_config(const std::string& config_path,
                        const std::vector<std::string>& overrides, const std::string& augment,
                        int64_t seed, bool seed_set) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = load_train_config(config_path);
    for (const auto& kv : overrides) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got " + kv);
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!augment.empty()) apply_override(cfg, "augment.pipeline", augment);
    if (seed_set) apply_override(cfg, "seed", std::to_string(seed));
    cfg.validate();
    return cfg;
}

DatasetManifest manifest_from_dir(const std::string& data_dir, const std::string& bbox_csv,
                                  const std::string& center_regex) {
    fs::path mpath = fs::path(data_dir) / "manifest.csv";
    if (fs::exists(mpath)) return read_manifest_csv(mpath.string());
    if (bbox_csv.empty()) {
        throw PipelineError(PipelineError::Code::IoFailure,
                            data_dir + " has no manifest.csv; pass --bbox for raw data");
    }
    return build_manifest(data_dir, bbox_csv, center_regex);
}

// mask files pair by patient id; scan/probability files are skipped
std::map<std::string, std::string> collect_masks(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const auto& ent : fs::directory_iterator(dir)) {
        if (!ent.is_regular_file()) continue;
        std::string name = ent.path().filename().string();
        std::string stem = name;
        for (const char* ext : {".nii.gz", ".nii"}) {
            if (stem.size() > strlen(ext) &&
                stem.compare(stem.size() - strlen(ext), strlen(ext), ext) == 0) {
                stem = stem.substr(0, stem.size() - strlen(ext));
                goto is_nifti;
            }
        }
        continue;
    is_nifti:
        bool skip = false;
        for (const char* suffix : {"_ct", "_pt", "_prob"}) {
            size_t n = strlen(suffix);
            if (stem.size() > n && stem.compare(stem.size() - n, n, suffix) == 0) skip = true;
        }
        if (skip) continue;
        for (const char* suffix : {"_pred", "_gtvt", "_mask", "_gt"}) {
            size_t n = strlen(suffix);
            if (stem.size() > n && stem.compare(stem.size() - n, n, suffix) == 0) {
                stem = stem.substr(0, stem.size() - n);
                break;
            }
        }
        if (out.count(stem)) {
            throw PipelineError(PipelineError::Code::UnpairedPatient,
                                "two mask files for patient " + stem + " in " + dir);
        }
        out[stem] = ent.path().string();
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CT/PET head-and-neck tumor segmentation toolkit"};
    app.require_subcommand(1);

    // ---- preprocess ----
    auto* sp = app.add_subcommand("preprocess", "crop, resample and normalize a dataset");
    std::string pp_data, pp_bbox, pp_out, pp_regex;
    sp->add_option("--data", pp_data, "directory of raw NIfTI scans")->required();
    sp->add_option("--bbox", pp_bbox, "bounding-box CSV")->required();
    sp->add_option("--out", pp_out, "output directory")->required();
    sp->add_option("--center-regex", pp_regex, "override for the center-id rule");

    // ---- train ----
    auto* st = app.add_subcommand("train", "train one leave-one-center-out fold");
    std::string tr_config, tr_data, tr_fold, tr_out, tr_augment, tr_resume;
    std::vector<std::string> tr_sets;
    int64_t tr_seed = 0;
    st->add_option("--config", tr_config, "config file (key=value)");
    st->add_option("--set", tr_sets, "config override KEY=VALUE")->take_all();
    st->add_option("--data", tr_data, "preprocessed dataset directory")->required();
    st->add_option("--fold", tr_fold, "held-out center id")->required();
    st->add_option("--out", tr_out, "output directory")->required();
    st->add_option("--augment", tr_augment, "augmentation pipeline, e.g. MR,RT,GC,ED");
    st->add_option("--resume", tr_resume, "checkpoint to continue from");
    auto* tr_seed_opt = st->add_option("--seed", tr_seed, "run seed");

    // ---- cv ----
    auto* sc = app.add_subcommand("cv", "leave-one-center-out cross-validation");
    std::string cv_config, cv_data, cv_out, cv_augment;
    std::vector<std::string> cv_sets;
    int64_t cv_seed = 0;
    sc->add_option("--config", cv_config, "config file (key=value)");
    sc->add_option("--set", cv_sets, "config override KEY=VALUE")->take_all();
    sc->add_option("--data", cv_data, "preprocessed dataset directory")->required();
    sc->add_option("--out", cv_out, "output directory")->required();
    sc->add_option("--augment", cv_augment, "augmentation pipeline");
    auto* cv_seed_opt = sc->add_option("--seed", cv_seed, "run seed");

    // ---- evaluate ----
    auto* se = app.add_subcommand("evaluate", "score predicted masks against ground truth");
    std::string ev_pred, ev_gt, ev_out;
    se->add_option("--pred", ev_pred, "directory of predicted masks")->required();
    se->add_option("--gt", ev_gt, "directory of ground-truth masks")->required();
    se->add_option("--out", ev_out, "output directory")->required();

    // ---- predict ----
    auto* spr = app.add_subcommand("predict", "run inference from a checkpoint");
    std::string pr_ckpt, pr_data, pr_bbox, pr_out, pr_case, pr_regex;
    spr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
    spr->add_option("--data", pr_data, "dataset directory (raw or preprocessed)")->required();
    spr->add_option("--bbox", pr_bbox, "bounding-box CSV for raw data");
    spr->add_option("--out", pr_out, "output directory")->required();
    spr->add_option("--case", pr_case, "single patient id (default: all)");
    spr->add_option("--center-regex", pr_regex, "override for the center-id rule");

    // ---- overlay ----
    auto* so = app.add_subcommand("overlay", "export contoured axial slices as PGM");
    std::string ov_image, ov_pred, ov_gt, ov_out, ov_patient;
    int64_t ov_offset = 10;
    so->add_option("--image", ov_image, "grayscale base volume (e.g. cropped CT)")->required();
    so->add_option("--pred", ov_pred, "prediction mask volume")->required();
    so->add_option("--gt", ov_gt, "ground-truth mask volume");
    so->add_option("--out", ov_out, "output directory")->required();
    so->add_option("--patient", ov_patient, "patient id for filenames");
    so->add_option("--offset", ov_offset, "slice offset around the mid-slice");

    // ---- augment-preview ----
    auto* sa = app.add_subcommand("augment-preview", "write one augmented sample to disk");
    std::string ap_data, ap_case, ap_pipeline = "NA", ap_out, ap_config;
    std::vector<std::string> ap_sets;
    int64_t ap_seed = 0, ap_sample = 0, ap_epoch = 0;
    sa->add_option("--data", ap_data, "preprocessed dataset directory")->required();
    sa->add_option("--case", ap_case, "patient id")->required();
    sa->add_option("--pipeline", ap_pipeline, "augmentation pipeline name");
    sa->add_option("--config", ap_config, "config file (key=value)");
    sa->add_option("--set", ap_sets, "config override KEY=VALUE")->take_all();
    sa->add_option("--out", ap_out, "output directory")->required();
    auto* ap_seed_opt = sa->add_option("--seed", ap_seed, "stream seed");
    sa->add_option("--sample-index", ap_sample, "sample stream index");
    sa->add_option("--epoch", ap_epoch, "epoch stream index");

    CLI11_PARSE(app, argc, argv);

    if (sp->parsed()) {
        return guard([&] {
            DatasetManifest m = build_manifest(pp_data, pp_bbox, pp_regex);
            PreprocessStats stats = preprocess_dataset(m, pp_out);
            std::cout << "preprocessed " << stats.processed << " case(s), skipped "
                      << stats.skipped << " up-to-date\n";
        });
    }
    if (st->parsed()) {
        return guard([&] {
            TrainConfig cfg =
                make_config(tr_config, tr_sets, tr_augment, tr_seed, !tr_seed_opt->empty());
            DatasetManifest m = manifest_from_dir(tr_data, "", "");
            auto folds = split_leave_one_center_out(m);
            const FoldSpec* fold = nullptr;
            for (const auto& f : folds) {
                if (f.fold_id == tr_fold) fold = &f;
            }
            if (!fold) {
                throw PipelineError(PipelineError::Code::MissingFile,
                                    "no center named '" + tr_fold + "' in the manifest");
            }
            TrainResult res = train_fold(m, *fold, cfg, tr_out, tr_resume);
            std::cout << "fold " << fold->fold_id << ": best val DSC " << res.best_val_dsc
                      << " at epoch " << res.best_epoch << "\n";
        });
    }
    if (sc->parsed()) {
        return guard([&] {
            TrainConfig cfg =
                make_config(cv_config, cv_sets, cv_augment, cv_seed, !cv_seed_opt->empty());
            DatasetManifest m = manifest_from_dir(cv_data, "", "");
            CrossValResult res = cross_validate(m, cfg, cv_out);
            std::cout << "cross-validation mean DSC " << res.summary.mean_dsc << " +- "
                      << res.summary.std_dsc << " over " << res.fold_reports.size()
                      << " folds\n";
        });
    }
    if (se->parsed()) {
        return guard([&] {
            auto preds = collect_masks(ev_pred);
            auto gts = collect_masks(ev_gt);
            std::vector<std::string> unpaired;
            for (const auto& [pid, path] : preds) {
                if (!gts.count(pid)) unpaired.push_back(pid + " (prediction only)");
            }
            for (const auto& [pid, path] : gts) {
                if (!preds.count(pid)) unpaired.push_back(pid + " (ground truth only)");
            }
            if (!unpaired.empty()) {
                std::string list;
                for (const auto& s : unpaired) list += "\n  " + s;
                throw PipelineError(PipelineError::Code::UnpairedPatient,
                                    "unpaired patients:" + list);
            }
            if (preds.empty()) {
                throw PipelineError(PipelineError::Code::UnpairedPatient,
                                    "no mask files found in " + ev_pred);
            }
            std::vector<MetricRow> rows;
            for (const auto& [pid, path] : preds) {
                Volume pred = read_nifti_file(path).second;
                Volume gt = read_nifti_file(gts.at(pid)).second;
                MetricRow r;
                r.patient_id = pid;
                r.center_id = center_of(pid);
                r.dsc = dsc(pred, gt);
                r.precision = precision(pred, gt);
                r.recall = recall(pred, gt);
                rows.push_back(r);
            }
            MetricsReport rep = aggregate(rows, "evaluate");
            fs::create_directories(ev_out);
            write_metrics_csv(rep, (fs::path(ev_out) / "metrics.csv").string());
            write_summary_csv({rep}, (fs::path(ev_out) / "summary.csv").string());
            std::cout << "mean DSC " << rep.aggregate.mean_dsc << " over " << rows.size()
                      << " patient(s)\n";
        });
    }
    if (spr->parsed()) {
        return guard([&] {
            CheckpointRecord ckpt = load_checkpoint(pr_ckpt);
            DatasetManifest m = manifest_from_dir(pr_data, pr_bbox, pr_regex);
            int64_t done = 0;
            for (const auto& c : m.cases) {
                if (!pr_case.empty() && c.patient_id != pr_case) continue;
                predict_case(c, m.preprocessed, ckpt, pr_out);
                done += 1;
            }
            if (done == 0) {
                throw PipelineError(PipelineError::Code::MissingFile,
                                    "no case matched " + (pr_case.empty() ? "<any>" : pr_case));
            }
            std::cout << "wrote predictions for " << done << " case(s)\n";
        });
    }
    if (so->parsed()) {
        return guard([&] {
            Volume image = read_nifti_file(ov_image).second;
            Volume pred = read_nifti_file(ov_pred).second;
            Volume gt;
            bool has_gt = !ov_gt.empty();
            if (has_gt) gt = read_nifti_file(ov_gt).second;
            std::string patient = ov_patient;
            if (patient.empty()) {
                patient = fs::path(ov_image).filename().string();
                patient = patient.substr(0, patient.find('.'));
            }
            auto files = write_overlay_slices(image, pred, has_gt ? &gt : nullptr, patient,
                                              ov_out, ov_offset);
            std::cout << "wrote " << files.size() << " slice overlay(s)\n";
        });
    }
    if (sa->parsed()) {
        return guard([&] {
            TrainConfig cfg = make_config(ap_config, ap_sets, ap_pipeline, ap_seed,
                                          !ap_seed_opt->empty());
            DatasetManifest m = manifest_from_dir(ap_data, "", "");
            SampleCase s = load_sample(m, ap_case);
            SampleCase a =
                apply_pipeline(s, cfg.augment, uint64_t(ap_sample), uint64_t(ap_epoch));
            fs::create_directories(ap_out);
            write_nifti_file((fs::path(ap_out) / (ap_case + "_ct.nii.gz")).string(), a.ct);
            write_nifti_file((fs::path(ap_out) / (ap_case + "_pt.nii.gz")).string(), a.pet);
            if (a.has_mask()) {
                write_nifti_file((fs::path(ap_out) / (ap_case + "_gtvt.nii.gz")).string(),
                                 a.mask);
            }
            std::cout << "wrote augmented sample (" << cfg.augment.pipeline_name() << ")\n";
        });
    }
    return 0;
}
