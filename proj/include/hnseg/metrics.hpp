#pragma once

#include <string>
#include <vector>

#include "hnseg/volume.hpp"

namespace hnseg {

class MetricsError : public std::runtime_error {
  public:
    enum class Code { ShapeMismatch, EmptyInput };
    MetricsError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

// voxel = 1 iff prob > threshold (strict)
Volume binarize(const Volume& prob, float threshold = 0.5f);

// Overlap metrics on binary masks. Conventions for empty masks:
// both empty -> 1.0 everywhere; pred empty vs non-empty gt -> precision 0;
// gt empty vs non-empty pred -> recall 0.
double dsc(const Volume& pred, const Volume& gt);
double precision(const Volume& pred, const Volume& gt);
double recall(const Volume& pred, const Volume& gt);

struct MetricRow {
    std::string patient_id;
    std::string center_id;
    double dsc = 0, precision = 0, recall = 0;
};

struct MetricAggregate {
    double mean_dsc = 0, std_dsc = 0;
    double mean_precision = 0, std_precision = 0;
    double mean_recall = 0, std_recall = 0;
};

struct MetricsReport {
    std::string fold_id;
    std::vector<MetricRow> rows;
    MetricAggregate aggregate;
};

// unweighted mean and population std over the rows
MetricsReport aggregate(const std::vector<MetricRow>& rows, const std::string& fold_id = "");

// mean +- population std of the per-fold means
MetricAggregate summarize_folds(const std::vector<MetricsReport>& folds);

// columns: patient_id,center_id,dsc,precision,recall
void write_metrics_csv(const MetricsReport& report, const std::string& path);
// columns: fold,metric,mean,std — one fold block per report plus an ALL block
void write_summary_csv(const std::vector<MetricsReport>& folds, const std::string& path);

}  // namespace hnseg
