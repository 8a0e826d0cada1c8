#pragma once

#include <vector>

#include <json.hpp>

#include "fairskin/model.hpp"
#include "fairskin/rng.hpp"

namespace fairskin {

struct SnnlParams {
    double temperature_T = 1.0;  // larger T flattens distance sensitivity
    int batch_b = 32;
};

struct ChannelScore {
    int channel_index = 0;
    double score_gamma = 0.0;  // non-negative; low means the channel splits the groups
    int attribute = 0;
};

struct PruneConfig {
    double prune_ratio = 0.02;  // fraction of current channels per iteration
    int max_iterations = 3;
    double acc_threshold = 0.03;    // tolerated drop from the unpruned accuracy
    double fair_threshold = 0.005;  // minimum per-iteration fairness gain
    int finetune_epochs = 3;
    double finetune_lr = 0.01;
    int positive_class = 0;  // binarization target for the fairness score
};

// Soft nearest-neighbor loss over row vectors (n x dim, squared Euclidean
// distance). Samples whose same-group neighbor mass vanishes contribute
// through a 1e-12 floor on the ratio inside the log. Throws DegenerateBatch
// when n < 2 and BadConfig on invalid params or mismatched lengths.
double snnl(const std::vector<double>& features, int dim, const std::vector<int>& attrs,
            const SnnlParams& params);

// Scalar-feature convenience form (dim = 1).
double snnl(const std::vector<double>& features, const std::vector<int>& attrs,
            const SnnlParams& params);

// d snnl / d features, same layout as features. Floored samples contribute
// zero gradient, matching the loss's constant branch.
std::vector<double> snnl_gradient(const std::vector<double>& features, int dim,
                                  const std::vector<int>& attrs, const SnnlParams& params);

// Per-channel sensitivity of the last conv block: the pooled scalar feature
// of each channel is scored against the chosen group attribute, averaged over
// consecutive slices of batch_b samples (a trailing slice keeps its place if
// at least two samples remain in it).
std::vector<ChannelScore> score_channels(const ToyModel& model, const Batch& data,
                                         int attribute, const SnnlParams& params);

// The m lowest-scoring channel indices, ties to the lower index; result is
// sorted ascending by channel index.
std::vector<int> lowest_gamma(const std::vector<ChannelScore>& scores, int m);

// Structural removal of last-conv channels with the head rewired; empty set
// returns an unchanged copy. Throws EmptyModel when nothing would survive.
ToyModel prune_channels(const ToyModel& model, const std::vector<int>& channels);

struct PruneIteration {
    int iteration = 0;
    std::vector<double> gamma;  // score per channel before this prune
    std::vector<int> pruned;
    double accuracy = 0.0;
    double fairness = 0.0;  // 1 - equalized-odds difference on validation
    bool reverted = false;
};

struct PruneResult {
    ToyModel model;
    std::vector<PruneIteration> history;
    double baseline_accuracy = 0.0;
    double baseline_fairness = 0.0;
};

// Score / prune / fine-tune / evaluate loop. Each iteration removes the
// ceil(prune_ratio * C) most group-separating channels and fine-tunes with
// cross-entropy; the iteration is rolled back and the loop stops when the
// accuracy drop against the unpruned model exceeds acc_threshold or the
// fairness gain over the previous iteration falls below fair_threshold. The
// rolled-back attempt stays in the history, flagged.
PruneResult iterative_prune(const ToyModel& model, const Batch& train_data,
                            const Batch& val_data, int attribute, const PruneConfig& cfg,
                            const SnnlParams& snnl_params, Rng& rng);

nlohmann::ordered_json prune_history_json(const PruneResult& result);

}  // namespace fairskin
