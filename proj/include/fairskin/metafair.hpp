#pragma once

#include <functional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairskin/model.hpp"
#include "fairskin/pruning.hpp"
#include "fairskin/rng.hpp"

namespace fairskin {

// Per-attribute weights on the group-compactness losses; projected to stay
// non-negative.
struct FairWeights {
    std::vector<double> w{1.0, 1.0, 1.0};
};

struct MetaConfig {
    double alpha = 0.05;        // inner (simulated) step size
    double eta = 0.1;           // meta step size on the weights
    int meta_iterations_T = 20;
    double meta_split = 0.10;   // fraction of training data held out as meta set
    double fd_step = 1e-3;      // central-difference step on the weights
};

// Sum over attributes of w_i times the group-compactness loss evaluated on
// the full pooled feature vectors (all channels jointly).
double weighted_snnl_loss(const ToyModel& model, const Batch& batch, const FairWeights& w,
                          const SnnlParams& params);

// Parameter-space gradient of weighted_snnl_loss via the shared backward
// engine.
std::vector<double> weighted_snnl_gradient(const ToyModel& model, const Batch& batch,
                                           const FairWeights& w, const SnnlParams& params);

// Detached copy with one gradient step applied; the input model is untouched.
ToyModel simulate_update(const ToyModel& model, const std::vector<double>& loss_gradients,
                         double alpha);

// Population variance of per-group mean losses. The group universe defaults
// to the groups present; passing an explicit universe makes a missing group
// an EmptyGroup error naming the offending ids.
double groupwise_variance(const std::vector<double>& per_sample_losses,
                          const std::vector<int>& groups,
                          const std::vector<int>& universe = {});

// Model-level form: per-sample cross-entropy on the meta set, grouped by the
// given attribute.
double groupwise_variance(const ToyModel& model, const Batch& meta_set, int attribute,
                          const std::vector<int>& universe = {});

// w <- max(0, w - eta * grad), componentwise.
FairWeights meta_step(const FairWeights& w, const std::vector<double>& grad, double eta);

// Central finite differences of an arbitrary scalar function of the weights;
// the meta loop runs on exactly this estimator.
std::vector<double> central_fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                        const std::vector<double>& at, double h);

// Seeded stratified split on the joint (label, attributes) key; every stratum
// keeps at least one sample on the held-out side so no group goes missing
// there. Returns {remainder, held_out}.
std::pair<Batch, Batch> stratified_split(const Batch& data, double held_out_fraction,
                                         Rng& rng);

struct MetaIteration {
    std::vector<double> w;           // weights the iteration was evaluated at
    std::vector<double> var_losses;  // per-attribute group variance
    double l_meta = 0.0;
    std::vector<double> meta_grad;
};

struct MetaResult {
    ToyModel model;
    FairWeights weights;
    std::vector<MetaIteration> history;
    std::vector<double> importance;  // per-channel weighted score sum
    std::vector<int> pruned;
};

// Meta loop: per iteration, a simulated descent step on the weighted
// compactness loss is scored by the summed per-attribute group variance of
// cross-entropy on the meta set; the weight gradient is estimated by central
// differences and applied with projection. Model parameters stay fixed
// throughout the loop. Afterwards channels are ranked by the w-weighted sum
// of per-attribute scores, the lowest ceil(ratio * C) are pruned, and the
// survivor is fine-tuned with cross-entropy per prune_cfg.
MetaResult meta_prune(const ToyModel& model, const Batch& train_set, const Batch& meta_set,
                      const MetaConfig& cfg, const PruneConfig& prune_cfg,
                      const SnnlParams& snnl_params, Rng& rng);

nlohmann::ordered_json meta_history_json(const MetaResult& result);

}  // namespace fairskin
