#pragma once

#include <string>
#include <vector>

#include "hnseg/checkpoint.hpp"
#include "hnseg/config.hpp"
#include "hnseg/metrics.hpp"
#include "hnseg/pipeline.hpp"

namespace hnseg {

// volume [C,X,Y,Z] and tensor share the same memory order
Tensor<float> volume_to_tensor(const Volume& v);
Volume tensor_to_volume(const Tensor<float>& t, const Volume& grid_like);

struct EpochLogRow {
    int64_t epoch = 0;
    double train_loss = 0;
    double val_dsc = 0;
};

struct TrainResult {
    MetricsReport report;          // from the best checkpoint on the held-out center
    std::vector<EpochLogRow> log;
    std::string best_checkpoint;
    std::string last_checkpoint;
    double best_val_dsc = -1.0;
    int64_t best_epoch = -1;
};

// Runs the full recipe for one fold: shuffled mini-batches, augment -> stack ->
// forward -> combined loss -> backward -> AdamW, per-epoch validation DSC,
// best-DSC checkpointing. Writes loss_log.csv, run_report.txt, metrics CSVs
// and checkpoints under out_dir. resume_path continues a ckpt_last.bin.
TrainResult train_fold(const DatasetManifest& preprocessed, const FoldSpec& fold,
                       const TrainConfig& cfg, const std::string& out_dir,
                       const std::string& resume_path = "");

struct CrossValResult {
    std::vector<MetricsReport> fold_reports;
    MetricAggregate summary;
};

CrossValResult cross_validate(const DatasetManifest& preprocessed, const TrainConfig& cfg,
                              const std::string& out_dir);

// preprocess (if needed) -> forward -> sigmoid -> threshold 0.5; writes
// <patient>_prob and <patient>_pred NIfTIs on the cropped 1 mm grid.
void predict_case(const PatientCase& c, bool already_preprocessed,
                  const CheckpointRecord& ckpt, const std::string& out_dir);

}  // namespace hnseg
