#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "sibow/wsvm.hpp"

namespace sibow {

struct EvalRecord {
    int true_label = 0;
    int predicted_argmax = 0;
    int predicted_maxvote = 0;  // 0 when the scheme produces no pairwise table
    Eigen::VectorXd probs;
};

double misclassification(const std::vector<EvalRecord>& records, ClassifyRule rule);

struct MacroPrf {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

// Per-class precision/recall with the 0/0 -> 0 convention, averaged
// unweighted over classes; macro F1 is the mean of per-class F1.
MacroPrf macro_prf(const std::vector<EvalRecord>& records);

struct CalibrationBin {
    long count = 0;
    double accuracy = 0;
    double confidence = 0;
};

struct CalibrationReport {
    std::vector<CalibrationBin> bins;
    double ece = 0;
    long n = 0;
};

// Bins top probabilities into ((m-1)/M, m/M]; a top probability of exactly 0
// joins the first bin.
CalibrationReport ece(const std::vector<EvalRecord>& records, int bin_count = 10);

// Hand-and-Till multiclass AUC with midrank tie handling.
double hand_till_auc(const std::vector<EvalRecord>& records);

// Entry (t-1, p-1) counts records with true label t predicted p.
std::vector<std::vector<long>> confusion_matrix(const std::vector<EvalRecord>& records,
                                                ClassifyRule rule);

struct EvaluationReport {
    long n = 0;
    int k = 0;
    double te1 = 0;
    double te2 = -1;  // -1 when max voting is unavailable
    MacroPrf prf;
    double auc = 0;
    CalibrationReport calibration;
    std::vector<std::vector<long>> confusion;
};

EvaluationReport evaluate(const std::vector<EvalRecord>& records, int ece_bins = 10);

std::string report_to_json(const EvaluationReport& report);
void write_report_json(const EvaluationReport& report, const std::string& path);
void write_reliability_csv(const CalibrationReport& report, const std::string& path);

}  // namespace sibow
