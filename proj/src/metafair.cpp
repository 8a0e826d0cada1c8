#include "fairskin/metafair.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "fairskin/errors.hpp"

namespace fairskin {

namespace {

void check_meta_config(const MetaConfig& cfg) {
    if (cfg.alpha <= 0.0 || cfg.eta <= 0.0 || cfg.fd_step <= 0.0)
        throw BadConfig("meta step sizes must be positive");
    if (cfg.meta_iterations_T < 0) throw BadConfig("meta iteration count must be non-negative");
    if (cfg.meta_split <= 0.0 || cfg.meta_split >= 1.0)
        throw BadConfig("meta split must lie strictly between 0 and 1");
}

std::vector<int> attr_column(const Batch& batch, int attribute) {
    std::vector<int> g(batch.B);
    for (int i = 0; i < batch.B; ++i) g[i] = batch.attr(i, attribute);
    return g;
}

// Per-sample cross-entropy through a log-sum-exp, finite for any logits.
std::vector<double> per_sample_ce(const std::vector<double>& logits,
                                  const std::vector<int>& labels, int n_classes) {
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* row = logits.data() + i * n_classes;
        if (labels[i] < 0 || labels[i] >= n_classes)
            throw BadClass("label " + std::to_string(labels[i]) + " out of range");
        const double m = *std::max_element(row, row + n_classes);
        double lse = 0.0;
        for (int c = 0; c < n_classes; ++c) lse += std::exp(row[c] - m);
        out[i] = std::log(lse) + m - row[labels[i]];
    }
    return out;
}

}  // namespace

double weighted_snnl_loss(const ToyModel& model, const Batch& batch, const FairWeights& w,
                          const SnnlParams& params) {
    if (static_cast<int>(w.w.size()) != batch.n_attrs)
        throw BadConfig("one weight per attribute is required");
    ForwardResult fr = forward(model, batch);
    const int dim = model.last_channels();
    double total = 0.0;
    for (int k = 0; k < batch.n_attrs; ++k) {
        if (w.w[k] == 0.0) continue;
        total += w.w[k] * snnl(fr.features, dim, attr_column(batch, k), params);
    }
    return total;
}

std::vector<double> weighted_snnl_gradient(const ToyModel& model, const Batch& batch,
                                           const FairWeights& w, const SnnlParams& params) {
    if (static_cast<int>(w.w.size()) != batch.n_attrs)
        throw BadConfig("one weight per attribute is required");
    ForwardResult fr = forward(model, batch);
    const int dim = model.last_channels();
    std::vector<double> dfeat(fr.features.size(), 0.0);
    for (int k = 0; k < batch.n_attrs; ++k) {
        if (w.w[k] == 0.0) continue;
        const auto g = snnl_gradient(fr.features, dim, attr_column(batch, k), params);
        for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] += w.w[k] * g[i];
    }
    return backward_from_feature_grad(model, batch, fr, dfeat);
}

ToyModel simulate_update(const ToyModel& model, const std::vector<double>& loss_gradients,
                         double alpha) {
    if (loss_gradients.size() != model.params.size())
        throw ShapeMismatch("gradient length does not match the parameter vector");
    ToyModel out = model;
    for (std::size_t i = 0; i < out.params.size(); ++i)
        out.params[i] -= alpha * loss_gradients[i];
    return out;
}

double groupwise_variance(const std::vector<double>& per_sample_losses,
                          const std::vector<int>& groups, const std::vector<int>& universe) {
    if (per_sample_losses.size() != groups.size())
        throw ShapeMismatch("losses and groups differ in length");
    std::map<int, std::pair<double, long>> acc;  // group -> (sum, count)
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i] < 0) continue;
        auto& a = acc[groups[i]];
        a.first += per_sample_losses[i];
        a.second += 1;
    }
    std::vector<double> means;
    if (universe.empty()) {
        for (const auto& [g, a] : acc) means.push_back(a.first / a.second);
    } else {
        std::string missing;
        for (int g : universe) {
            auto it = acc.find(g);
            if (it == acc.end()) {
                missing += (missing.empty() ? "" : ", ") + std::to_string(g);
                continue;
            }
            means.push_back(it->second.first / it->second.second);
        }
        if (!missing.empty())
            throw EmptyGroup("groups without samples: " + missing);
    }
    if (means.empty()) throw EmptyGroup("no group has any sample");
    const double mean = std::accumulate(means.begin(), means.end(), 0.0) / means.size();
    double var = 0.0;
    for (double m : means) var += (m - mean) * (m - mean);
    return var / means.size();
}

double groupwise_variance(const ToyModel& model, const Batch& meta_set, int attribute,
                          const std::vector<int>& universe) {
    if (attribute < 0 || attribute >= meta_set.n_attrs)
        throw BadConfig("attribute index out of range");
    ForwardResult fr = forward(model, meta_set);
    return groupwise_variance(per_sample_ce(fr.logits, meta_set.labels, model.cfg.n_classes),
                              attr_column(meta_set, attribute), universe);
}

FairWeights meta_step(const FairWeights& w, const std::vector<double>& grad, double eta) {
    if (grad.size() != w.w.size())
        throw ShapeMismatch("gradient length does not match the weights");
    FairWeights out = w;
    for (std::size_t i = 0; i < out.w.size(); ++i)
        out.w[i] = std::max(0.0, out.w[i] - eta * grad[i]);
    return out;
}

std::vector<double> central_fd_gradient(
    const std::function<double(const std::vector<double>&)>& f, const std::vector<double>& at,
    double h) {
    if (h <= 0.0) throw BadConfig("finite-difference step must be positive");
    std::vector<double> grad(at.size());
    for (std::size_t i = 0; i < at.size(); ++i) {
        std::vector<double> hi = at, lo = at;
        hi[i] += h;
        lo[i] -= h;
        grad[i] = (f(hi) - f(lo)) / (2.0 * h);
    }
    return grad;
}

std::pair<Batch, Batch> stratified_split(const Batch& data, double held_out_fraction,
                                         Rng& rng) {
    if (held_out_fraction <= 0.0 || held_out_fraction >= 1.0)
        throw BadConfig("held-out fraction must lie strictly between 0 and 1");
    if (data.B < 2) throw DegenerateBatch("splitting needs at least 2 samples");

    std::map<std::vector<int>, std::vector<int>> strata;
    for (int i = 0; i < data.B; ++i) {
        std::vector<int> key;
        key.push_back(data.labels[i]);
        for (int k = 0; k < data.n_attrs; ++k) key.push_back(data.attr(i, k));
        strata[key].push_back(i);
    }

    std::vector<int> held, rem;
    for (auto& [key, idx] : strata) {
        rng.shuffle(idx);
        const int n = static_cast<int>(idx.size());
        int k = static_cast<int>(std::llround(held_out_fraction * n));
        k = std::clamp(k, 1, n);  // every stratum reaches the held-out side
        for (int i = 0; i < n; ++i) (i < k ? held : rem).push_back(idx[i]);
    }
    std::sort(held.begin(), held.end());
    std::sort(rem.begin(), rem.end());
    if (rem.empty()) throw DegenerateBatch("held-out fraction consumed every sample");
    return {data.slice(rem), data.slice(held)};
}

MetaResult meta_prune(const ToyModel& model, const Batch& train_set, const Batch& meta_set,
                      const MetaConfig& cfg, const PruneConfig& prune_cfg,
                      const SnnlParams& snnl_params, Rng& rng) {
    check_meta_config(cfg);
    if (train_set.B < 2 || meta_set.B < 2)
        throw DegenerateBatch("meta pruning needs at least 2 samples on each side");
    if (train_set.n_attrs != meta_set.n_attrs)
        throw ShapeMismatch("train and meta sets disagree on attribute count");

    const int K = train_set.n_attrs;

    // Group universe per attribute across both splits; a group the meta set
    // never sees is a hard error surfaced by groupwise_variance.
    std::vector<std::vector<int>> universes(K);
    for (int k = 0; k < K; ++k) {
        std::set<int> seen;
        for (int i = 0; i < train_set.B; ++i)
            if (train_set.attr(i, k) >= 0) seen.insert(train_set.attr(i, k));
        for (int i = 0; i < meta_set.B; ++i)
            if (meta_set.attr(i, k) >= 0) seen.insert(meta_set.attr(i, k));
        universes[k].assign(seen.begin(), seen.end());
    }

    auto eval_parts = [&](const std::vector<double>& wv) {
        FairWeights fw;
        fw.w = wv;
        const auto grad = weighted_snnl_gradient(model, train_set, fw, snnl_params);
        ToyModel sim = simulate_update(model, grad, cfg.alpha);
        std::vector<double> vars(K);
        double total = 0.0;
        for (int k = 0; k < K; ++k) {
            vars[k] = groupwise_variance(sim, meta_set, k, universes[k]);
            total += vars[k];
        }
        return std::pair<double, std::vector<double>>(total, vars);
    };
    auto eval_total = [&](const std::vector<double>& wv) { return eval_parts(wv).first; };

    MetaResult res;
    FairWeights w;
    w.w.assign(K, 1.0);

    for (int t = 0; t < cfg.meta_iterations_T; ++t) {
        const auto [l_meta, vars] = eval_parts(w.w);
        const auto grad = central_fd_gradient(eval_total, w.w, cfg.fd_step);
        MetaIteration it;
        it.w = w.w;
        it.var_losses = vars;
        it.l_meta = l_meta;
        it.meta_grad = grad;
        res.history.push_back(std::move(it));
        w = meta_step(w, grad, cfg.eta);
    }
    res.weights = w;

    // Channel importance under the final weights, scored on the unchanged
    // parameters.
    const int channels = model.last_channels();
    res.importance.assign(channels, 0.0);
    for (int k = 0; k < K; ++k) {
        const auto scores = score_channels(model, train_set, k, snnl_params);
        for (int c = 0; c < channels; ++c)
            res.importance[c] += w.w[k] * scores[c].score_gamma;
    }

    std::vector<ChannelScore> ranked(channels);
    for (int c = 0; c < channels; ++c) ranked[c] = ChannelScore{c, res.importance[c], -1};
    int m = static_cast<int>(std::ceil(prune_cfg.prune_ratio * channels));
    m = std::min(m, channels - 1);  // at least one channel survives
    res.pruned = lowest_gamma(ranked, m);

    res.model = prune_channels(model, res.pruned);
    if (prune_cfg.finetune_epochs > 0) {
        TrainConfig tc;
        tc.epochs = prune_cfg.finetune_epochs;
        tc.lr = prune_cfg.finetune_lr;
        sgd_train(res.model, train_set, tc, rng);
    }
    return res;
}

nlohmann::ordered_json meta_history_json(const MetaResult& result) {
    nlohmann::ordered_json j;
    j["iterations"] = nlohmann::ordered_json::array();
    for (const auto& it : result.history) {
        nlohmann::ordered_json row;
        row["w"] = it.w;
        row["variances"] = it.var_losses;
        row["l_meta"] = it.l_meta;
        row["grad"] = it.meta_grad;
        j["iterations"].push_back(row);
    }
    j["final_w"] = result.weights.w;
    j["importance"] = result.importance;
    j["pruned"] = result.pruned;
    return j;
}

}  // namespace fairskin
