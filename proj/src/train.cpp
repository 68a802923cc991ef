#include "hnseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "hnseg/losses.hpp"
#include "hnseg/nifti.hpp"
#include "hnseg/optim.hpp"

namespace fs = std::filesystem;

namespace hnseg {

Tensor<float> volume_to_tensor(const Volume& v) {
    return Tensor<float>::from_values({v.channels, v.nx, v.ny, v.nz}, v.data);
}

Volume tensor_to_volume(const Tensor<float>& t, const Volume& grid_like) {
    Volume out;
    out.channels = t.dim(0);
    out.nx = t.dim(1);
    out.ny = t.dim(2);
    out.nz = t.dim(3);
    out.spacing = grid_like.spacing;
    out.affine = grid_like.affine;
    out.data = t.values();
    return out;
}

namespace {

// stable augmentation stream index: position in the sorted patient list
std::map<std::string, uint64_t> sample_indices(const DatasetManifest& m) {
    std::vector<std::string> ids;
    for (const auto& c : m.cases) ids.push_back(c.patient_id);
    std::sort(ids.begin(), ids.end());
    std::map<std::string, uint64_t> out;
    for (size_t i = 0; i < ids.size(); ++i) out[ids[i]] = uint64_t(i);
    return out;
}

// Fisher-Yates keyed by (seed, epoch)
void shuffle_for_epoch(std::vector<std::string>& ids, uint64_t seed, uint64_t epoch) {
    CounterRng rng(rng_key(seed, 0x5f0e0ull), epoch);
    for (size_t i = ids.size(); i > 1; --i) {
        size_t j = size_t(rng.uniform_int(int64_t(i)));
        std::swap(ids[i - 1], ids[j]);
    }
}

double validation_dsc(const DatasetManifest& m, const std::vector<std::string>& val_ids,
                      const UnetrParams<float>& params, std::vector<MetricRow>* rows) {
    double total = 0;
    int64_t counted = 0;
    for (const auto& id : val_ids) {
        SampleCase s = load_sample(m, id);
        if (!s.has_mask()) {
            throw PipelineError(PipelineError::Code::MissingFile,
                                "validation case " + id + " has no ground-truth mask");
        }
        Volume input = assemble_input(s);
        Tensor<float> x = volume_to_tensor(input);
        Tensor<float> prob = predict(x, params);
        Volume prob_vol = tensor_to_volume(prob, input);
        Volume pred = binarize(prob_vol, 0.5f);
        double d = dsc(pred, s.mask);
        if (rows) {
            MetricRow r;
            r.patient_id = id;
            r.center_id = m.find(id)->center_id;
            r.dsc = d;
            r.precision = precision(pred, s.mask);
            r.recall = recall(pred, s.mask);
            rows->push_back(r);
        }
        total += d;
        counted += 1;
    }
    return counted ? total / double(counted) : 0.0;
}

void write_run_report(const std::string& path, const TrainConfig& cfg, const FoldSpec& fold,
                      const TrainResult& res) {
    std::ofstream out(path, std::ios::trunc);
    out << "fold=" << fold.fold_id << "\n";
    out << "augmentations=" << cfg.augment.pipeline_name() << "\n";
    out << "epochs=" << cfg.epochs << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "train_cases=" << fold.train_ids.size() << "\n";
    out << "val_cases=" << fold.val_ids.size() << "\n";
    out << "best_epoch=" << res.best_epoch << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", res.best_val_dsc);
    out << "best_val_dsc=" << buf << "\n";
}

}  // namespace

TrainResult train_fold(const DatasetManifest& preprocessed, const FoldSpec& fold,
                       const TrainConfig& cfg, const std::string& out_dir,
                       const std::string& resume_path) {
    cfg.validate();
    fs::create_directories(out_dir);

    UnetrConfig mcfg = cfg.model;
    mcfg.seed = cfg.seed;
    UnetrParams<float> params = init_params<float>(mcfg, cfg.seed);
    auto entries = params.entries();

    AdamWConfig ocfg;
    ocfg.lr = cfg.learning_rate;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.eps = cfg.adam_eps;
    ocfg.weight_decay = cfg.weight_decay;
    AdamWState<float> opt;
    opt.init(entries);

    int64_t start_epoch = 0;
    double best_val = -1.0;
    int64_t best_epoch = -1;
    if (!resume_path.empty()) {
        CheckpointRecord rec = load_checkpoint(resume_path);
        if (!(rec.cfg == mcfg)) {
            throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                                  "resume checkpoint was built with a different model config");
        }
        params = rec.params;
        entries = params.entries();
        if (rec.has_optimizer) {
            opt = rec.opt;
        } else {
            opt.init(entries);
        }
        start_epoch = int64_t(rec.epochs_completed);
        best_val = rec.best_val_dsc;
        best_epoch = rec.best_epoch;
    }

    AugmentSpec aug = cfg.augment;
    aug.seed = cfg.seed;
    LossConfig loss_cfg = cfg.loss;
    auto indices = sample_indices(preprocessed);

    const std::string best_path = (fs::path(out_dir) / "ckpt_best.bin").string();
    const std::string last_path = (fs::path(out_dir) / "ckpt_last.bin").string();
    const std::string log_path = (fs::path(out_dir) / "loss_log.csv").string();

    auto save_record = [&](const std::string& path, int64_t epochs_done, bool with_opt) {
        CheckpointRecord rec;
        rec.cfg = mcfg;
        rec.epochs_completed = uint64_t(epochs_done);
        rec.optimizer_step = uint64_t(opt.step);
        rec.best_val_dsc = best_val;
        rec.best_epoch = best_epoch;
        rec.params = params;
        rec.has_optimizer = with_opt;
        if (with_opt) rec.opt = opt;
        save_checkpoint(path, rec);
    };

    if (start_epoch == 0) {
        // epochs=0 still yields a usable record: report from initialized params
        save_record(best_path, 0, false);
        std::ofstream log(log_path, std::ios::trunc);
        log << "epoch,train_loss,val_dsc\n";
    }

    TrainResult res;
    Tape<float> tape;

    for (int64_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::string> order = fold.train_ids;
        std::sort(order.begin(), order.end());
        shuffle_for_epoch(order, cfg.seed, uint64_t(epoch));

        double epoch_loss = 0;
        int64_t batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += size_t(cfg.batch_size)) {
            const size_t b1 = std::min(order.size(), b0 + size_t(cfg.batch_size));
            const float inv_batch = 1.0f / float(b1 - b0);
            params.zero_grads();
            double batch_loss = 0;
            for (size_t i = b0; i < b1; ++i) {
                SampleCase s = load_sample(preprocessed, order[i]);
                if (!s.has_mask()) {
                    throw PipelineError(PipelineError::Code::MissingFile,
                                        "training case " + order[i] + " has no mask");
                }
                SampleCase a = apply_pipeline(s, aug, indices.at(order[i]), uint64_t(epoch));
                Volume input = assemble_input(a);
                Tensor<float> x = volume_to_tensor(input);
                Tensor<float> gt = volume_to_tensor(a.mask);

                CounterRng drop_rng(rng_key(cfg.seed, 0xd207ull),
                                    uint64_t(epoch) * 1000003ull + indices.at(order[i]));
                CounterRng* drop = mcfg.dropout > 0.0 ? &drop_rng : nullptr;
                Tensor<float> logits = unetr_forward(tape, x, params, drop);
                Tensor<float> prob = sigmoid(tape, logits);
                Tensor<float> loss = combined_loss(tape, prob, gt, loss_cfg);
                Tensor<float> scaled = scale(tape, loss, inv_batch);
                batch_loss += double(scaled.item());
                tape.backward(scaled);
            }
            if (!std::isfinite(batch_loss)) {
                throw PipelineError(PipelineError::Code::NonFiniteLoss,
                                    "non-finite loss at epoch " + std::to_string(epoch) +
                                        ", batch " + std::to_string(batches) + ", value " +
                                        std::to_string(batch_loss));
            }
            adamw_step(entries, opt, ocfg);
            epoch_loss += batch_loss;
            batches += 1;
        }
        const double train_loss = batches ? epoch_loss / double(batches) : 0.0;

        const double val = validation_dsc(preprocessed, fold.val_ids, params, nullptr);
        if (val > best_val) {
            best_val = val;
            best_epoch = epoch;
            save_record(best_path, epoch, false);
        }
        {
            std::ofstream log(log_path, std::ios::app);
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%lld,%.8f,%.6f", (long long)epoch, train_loss, val);
            log << buf << "\n";
        }
        res.log.push_back({epoch, train_loss, val});
        if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
            save_record(last_path, epoch, true);
        }
    }

    if (cfg.epochs == start_epoch || cfg.epochs == 0) {
        save_record(last_path, start_epoch, true);
    }

    // final report from the best checkpoint
    CheckpointRecord best = load_checkpoint(best_path);
    std::vector<MetricRow> rows;
    double best_mean = validation_dsc(preprocessed, fold.val_ids, best.params, &rows);
    (void)best_mean;
    res.report = aggregate(rows, fold.fold_id);
    res.best_checkpoint = best_path;
    res.last_checkpoint = last_path;
    res.best_val_dsc = best_val;
    res.best_epoch = best_epoch;

    write_metrics_csv(res.report,
                      (fs::path(out_dir) / ("metrics_" + fold.fold_id + ".csv")).string());
    write_summary_csv({res.report},
                      (fs::path(out_dir) / ("summary_" + fold.fold_id + ".csv")).string());
    write_run_report((fs::path(out_dir) / "run_report.txt").string(), cfg, fold, res);
    return res;
}

CrossValResult cross_validate(const DatasetManifest& preprocessed, const TrainConfig& cfg,
                              const std::string& out_dir) {
    auto folds = split_leave_one_center_out(preprocessed);
    CrossValResult res;
    for (const auto& fold : folds) {
        std::string fold_dir = (fs::path(out_dir) / ("fold_" + fold.fold_id)).string();
        TrainResult tr = train_fold(preprocessed, fold, cfg, fold_dir);
        res.fold_reports.push_back(tr.report);
    }
    res.summary = summarize_folds(res.fold_reports);
    write_summary_csv(res.fold_reports, (fs::path(out_dir) / "summary.csv").string());
    return res;
}

void predict_case(const PatientCase& c, bool already_preprocessed,
                  const CheckpointRecord& ckpt, const std::string& out_dir) {
    fs::create_directories(out_dir);
    SampleCase s;
    s.patient_id = c.patient_id;
    if (already_preprocessed) {
        s.ct = read_nifti_file(c.ct_path).second;
        s.pet = read_nifti_file(c.pet_path).second;
    } else {
        Volume ct = read_nifti_file(c.ct_path).second;
        Volume pet = read_nifti_file(c.pet_path).second;
        s.ct = normalize_ct(crop_resample(ct, c.bbox, Interp::Trilinear));
        s.pet = crop_resample(pet, c.bbox, Interp::Trilinear);
    }
    if (s.ct.nx != ckpt.cfg.img_size || s.ct.ny != ckpt.cfg.img_size ||
        s.ct.nz != ckpt.cfg.img_size) {
        throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                              "case grid does not match the checkpoint's img_size");
    }
    Volume input = assemble_input(s);
    Tensor<float> x = volume_to_tensor(input);
    Tensor<float> prob = predict(x, ckpt.params);
    Volume prob_vol = tensor_to_volume(prob, input);
    Volume pred = binarize(prob_vol, 0.5f);
    write_nifti_file((fs::path(out_dir) / (c.patient_id + "_prob.nii.gz")).string(), prob_vol);
    write_nifti_file((fs::path(out_dir) / (c.patient_id + "_pred.nii.gz")).string(), pred);
}

}  // namespace hnseg
