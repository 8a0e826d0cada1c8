#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairskin/model.hpp"

namespace fairskin {

// Scored predictions with ground truth and group memberships. Group ids are
// arbitrary non-negative ints; -1 marks unknown and is excluded from every
// grouped metric.
struct PredictionSet {
    int n_classes = 0;
    int n_attrs = 0;
    std::vector<double> scores;  // N x n_classes, rows sum to 1
    std::vector<int> predicted;  // argmax of scores, ties to the lower index
    std::vector<int> labels;
    std::vector<int> attrs;  // N x n_attrs

    int size() const { return static_cast<int>(labels.size()); }
    int attr(int i, int k) const { return attrs[static_cast<std::size_t>(i) * n_attrs + k]; }
};

// Softmaxed model outputs over a batch.
PredictionSet predict(const ToyModel& model, const Batch& batch);

double accuracy(const PredictionSet& preds);

// Unweighted mean of per-class F1 over all configured classes.
double macro_f1(const PredictionSet& preds);

// Worst-pair equalized-odds difference after binarizing on positive_class:
// max over group pairs of (|TPR_a - TPR_b| + |FPR_a - FPR_b|) / 2.
// Throws InsufficientGroupData when fewer than two groups are present or a
// group lacks a positive or negative ground-truth instance.
double eodds_difference(const PredictionSet& preds, int attribute, int positive_class);

struct RocCurve {
    std::vector<double> fpr;  // non-decreasing, starts 0, ends 1
    std::vector<double> tpr;
    double auc = 0.0;
};

// Threshold sweep over unique scores (ties grouped), trapezoidal area.
// labels are binary 0/1. Throws SingleClass when one class is absent.
RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Worst-pair area between per-group ROC curves, integrated on a 1001-point
// uniform FPR grid with linear interpolation.
double abroca(const PredictionSet& preds, int attribute, int positive_class);

// min over groups of the positive-prediction rate divided by the max.
double disparate_impact(const PredictionSet& preds, int attribute, int positive_class);

// Per-group macro one-vs-rest AUC; a group missing a class skips that class,
// and a group where every class is skipped maps to nullopt.
std::map<int, std::optional<double>> group_macro_auc(const PredictionSet& preds, int attribute);

// Per-group plain accuracy.
std::map<int, double> group_accuracy(const PredictionSet& preds, int attribute);

struct MetricConfig {
    int positive_class = 0;
    int di_attribute = 0;
    std::vector<std::string> attr_names{"skin_type", "age_group", "gender"};
};

// Full report; individual metric failures surface as nulls with a reason
// under "errors" instead of aborting. Key order is fixed so identical inputs
// serialize byte-identically.
nlohmann::ordered_json fairness_report(const PredictionSet& preds, const MetricConfig& cfg);

}  // namespace fairskin
