#include "hnseg/metrics.hpp"

#include <cmath>
#include <fstream>

namespace hnseg {

namespace {

struct Counts {
    int64_t tp = 0, fp = 0, fn = 0;
};

Counts count_overlap(const Volume& pred, const Volume& gt) {
    if (pred.size() != gt.size() || pred.nx != gt.nx || pred.ny != gt.ny || pred.nz != gt.nz) {
        throw MetricsError(MetricsError::Code::ShapeMismatch,
                           "mask shapes differ in overlap metric");
    }
    Counts c;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] > 0.5f;
        const bool g = gt.data[i] > 0.5f;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

void write_csv_line(std::ofstream& out, const std::string& line) { out << line << "\n"; }

}  // namespace

Volume binarize(const Volume& prob, float threshold) {
    Volume out = prob;
    for (float& x : out.data) x = x > threshold ? 1.0f : 0.0f;
    return out;
}

double dsc(const Volume& pred, const Volume& gt) {
    Counts c = count_overlap(pred, gt);
    const int64_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 2.0 * double(c.tp) / double(den);
}

double precision(const Volume& pred, const Volume& gt) {
    Counts c = count_overlap(pred, gt);
    const int64_t den = c.tp + c.fp;
    if (den == 0) return c.fn == 0 ? 1.0 : 0.0;
    return double(c.tp) / double(den);
}

double recall(const Volume& pred, const Volume& gt) {
    Counts c = count_overlap(pred, gt);
    const int64_t den = c.tp + c.fn;
    if (den == 0) return c.fp == 0 ? 1.0 : 0.0;
    return double(c.tp) / double(den);
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& std_dev) {
    mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    std_dev = std::sqrt(var / double(xs.size()));
}

}  // namespace

MetricsReport aggregate(const std::vector<MetricRow>& rows, const std::string& fold_id) {
    if (rows.empty()) {
        throw MetricsError(MetricsError::Code::EmptyInput, "aggregate over zero rows");
    }
    MetricsReport r;
    r.fold_id = fold_id;
    r.rows = rows;
    std::vector<double> d, p, rc;
    for (const auto& row : rows) {
        d.push_back(row.dsc);
        p.push_back(row.precision);
        rc.push_back(row.recall);
    }
    mean_std(d, r.aggregate.mean_dsc, r.aggregate.std_dsc);
    mean_std(p, r.aggregate.mean_precision, r.aggregate.std_precision);
    mean_std(rc, r.aggregate.mean_recall, r.aggregate.std_recall);
    return r;
}

MetricAggregate summarize_folds(const std::vector<MetricsReport>& folds) {
    if (folds.empty()) {
        throw MetricsError(MetricsError::Code::EmptyInput, "summary over zero folds");
    }
    std::vector<double> d, p, rc;
    for (const auto& f : folds) {
        d.push_back(f.aggregate.mean_dsc);
        p.push_back(f.aggregate.mean_precision);
        rc.push_back(f.aggregate.mean_recall);
    }
    MetricAggregate a;
    mean_std(d, a.mean_dsc, a.std_dsc);
    mean_std(p, a.mean_precision, a.std_precision);
    mean_std(rc, a.mean_recall, a.std_recall);
    return a;
}

void write_metrics_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw MetricsError(MetricsError::Code::EmptyInput, "cannot write " + path);
    }
    write_csv_line(out, "patient_id,center_id,dsc,precision,recall");
    char buf[256];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f", r.patient_id.c_str(),
                      r.center_id.c_str(), r.dsc, r.precision, r.recall);
        write_csv_line(out, buf);
    }
}

void write_summary_csv(const std::vector<MetricsReport>& folds, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw MetricsError(MetricsError::Code::EmptyInput, "cannot write " + path);
    }
    write_csv_line(out, "fold,metric,mean,std");
    char buf[256];
    auto block = [&](const std::string& fold, const MetricAggregate& a) {
        std::snprintf(buf, sizeof(buf), "%s,dsc,%.6f,%.6f", fold.c_str(), a.mean_dsc, a.std_dsc);
        write_csv_line(out, buf);
        std::snprintf(buf, sizeof(buf), "%s,precision,%.6f,%.6f", fold.c_str(),
                      a.mean_precision, a.std_precision);
        write_csv_line(out, buf);
        std::snprintf(buf, sizeof(buf), "%s,recall,%.6f,%.6f", fold.c_str(), a.mean_recall,
                      a.std_recall);
        write_csv_line(out, buf);
    };
    for (const auto& f : folds) block(f.fold_id, f.aggregate);
    if (folds.size() > 1) block("ALL", summarize_folds(folds));
}

}  // namespace hnseg
