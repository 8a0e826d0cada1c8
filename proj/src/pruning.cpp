#include "fairskin/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fairskin/errors.hpp"
#include "fairskin/metrics.hpp"

namespace fairskin {

namespace {

constexpr double kRatioFloor = 1e-12;

void check_params(const SnnlParams& p) {
    if (p.temperature_T <= 0.0) throw BadConfig("snnl temperature must be positive");
    if (p.batch_b < 2) throw BadConfig("snnl batch size must be at least 2");
}

// Pairwise neighbor masses for one sample: same-group numerator and all-pair
// denominator of the softened neighbor ratio.
void neighbor_mass(const double* x, int n, int dim, const std::vector<int>& attrs, int i,
                   double inv_t, double* num, double* den) {
    *num = 0.0;
    *den = 0.0;
    for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        double d2 = 0.0;
        for (int k = 0; k < dim; ++k) {
            const double diff = x[static_cast<std::size_t>(i) * dim + k] -
                                x[static_cast<std::size_t>(j) * dim + k];
            d2 += diff * diff;
        }
        const double e = std::exp(-d2 * inv_t);
        *den += e;
        if (attrs[j] == attrs[i]) *num += e;
    }
}

}  // namespace

double snnl(const std::vector<double>& features, int dim, const std::vector<int>& attrs,
            const SnnlParams& params) {
    check_params(params);
    if (dim < 1) throw BadConfig("feature dimension must be positive");
    if (features.size() != attrs.size() * static_cast<std::size_t>(dim))
        throw ShapeMismatch("features and attrs disagree on sample count");
    const int n = static_cast<int>(attrs.size());
    if (n < 2) throw DegenerateBatch("soft nearest-neighbor loss needs at least 2 samples");

    const double inv_t = 1.0 / params.temperature_T;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        double num, den;
        neighbor_mass(features.data(), n, dim, attrs, i, inv_t, &num, &den);
        // den can underflow to 0 when every neighbor is extremely far; such a
        // sample is isolated and takes the floor.
        const double ratio = den > 0.0 ? num / den : 0.0;
        loss -= std::log(std::max(ratio, kRatioFloor));
    }
    return loss / n;
}

double snnl(const std::vector<double>& features, const std::vector<int>& attrs,
            const SnnlParams& params) {
    return snnl(features, 1, attrs, params);
}

std::vector<double> snnl_gradient(const std::vector<double>& features, int dim,
                                  const std::vector<int>& attrs, const SnnlParams& params) {
    check_params(params);
    if (dim < 1) throw BadConfig("feature dimension must be positive");
    if (features.size() != attrs.size() * static_cast<std::size_t>(dim))
        throw ShapeMismatch("features and attrs disagree on sample count");
    const int n = static_cast<int>(attrs.size());
    if (n < 2) throw DegenerateBatch("soft nearest-neighbor loss needs at least 2 samples");

    const double inv_t = 1.0 / params.temperature_T;
    std::vector<double> grad(features.size(), 0.0);
    const double* x = features.data();

    // loss_i = ln B_i - ln A_i with A_i the same-group and B_i the all-pair
    // neighbor mass; d e_ij / d x_i = e_ij * (-2/T)(x_i - x_j), and x_j gets
    // the opposite sign.
    for (int i = 0; i < n; ++i) {
        double num, den;
        neighbor_mass(x, n, dim, attrs, i, inv_t, &num, &den);
        if (den <= 0.0 || num / den <= kRatioFloor) continue;  // clamped, constant in x

        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            double d2 = 0.0;
            for (int k = 0; k < dim; ++k) {
                const double diff = x[static_cast<std::size_t>(i) * dim + k] -
                                    x[static_cast<std::size_t>(j) * dim + k];
                d2 += diff * diff;
            }
            const double e = std::exp(-d2 * inv_t);
            const double coef = 1.0 / den - (attrs[j] == attrs[i] ? 1.0 / num : 0.0);
            const double f = coef * e * (-2.0 * inv_t);
            for (int k = 0; k < dim; ++k) {
                const double diff = x[static_cast<std::size_t>(i) * dim + k] -
                                    x[static_cast<std::size_t>(j) * dim + k];
                grad[static_cast<std::size_t>(i) * dim + k] += f * diff;
                grad[static_cast<std::size_t>(j) * dim + k] -= f * diff;
            }
        }
    }
    for (auto& g : grad) g /= n;
    return grad;
}

std::vector<ChannelScore> score_channels(const ToyModel& model, const Batch& data,
                                         int attribute, const SnnlParams& params) {
    check_params(params);
    if (attribute < 0 || attribute >= data.n_attrs)
        throw BadConfig("attribute index out of range");
    if (data.B < 2) throw DegenerateBatch("scoring needs at least 2 samples");

    const int channels = model.last_channels();
    std::vector<double> sums(channels, 0.0);
    int n_batches = 0;

    int start = 0;
    while (start < data.B) {
        int len = std::min(params.batch_b, data.B - start);
        if (len < 2) break;  // a trailing singleton cannot be scored
        std::vector<int> idx(len);
        std::iota(idx.begin(), idx.end(), start);
        Batch chunk = data.slice(idx);
        ForwardResult fr = forward(model, chunk);

        std::vector<int> groups(len);
        for (int i = 0; i < len; ++i) groups[i] = chunk.attr(i, attribute);

        std::vector<double> col(len);
        for (int c = 0; c < channels; ++c) {
            for (int i = 0; i < len; ++i)
                col[i] = fr.features[static_cast<std::size_t>(i) * channels + c];
            sums[c] += snnl(col, groups, params);
        }
        ++n_batches;
        start += len;
    }
    if (n_batches == 0) throw DegenerateBatch("no scoreable slice in the data");

    std::vector<ChannelScore> out(channels);
    for (int c = 0; c < channels; ++c)
        out[c] = ChannelScore{c, sums[c] / n_batches, attribute};
    return out;
}

std::vector<int> lowest_gamma(const std::vector<ChannelScore>& scores, int m) {
    if (m < 0 || m > static_cast<int>(scores.size()))
        throw BadConfig("selection count out of range");
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a].score_gamma != scores[b].score_gamma)
            return scores[a].score_gamma < scores[b].score_gamma;
        return scores[a].channel_index < scores[b].channel_index;
    });
    std::vector<int> chosen;
    chosen.reserve(m);
    for (int i = 0; i < m; ++i) chosen.push_back(scores[order[i]].channel_index);
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

ToyModel prune_channels(const ToyModel& model, const std::vector<int>& channels) {
    if (channels.empty()) return model;
    return remove_last_channels(model, channels);
}

PruneResult iterative_prune(const ToyModel& model, const Batch& train_data,
                            const Batch& val_data, int attribute, const PruneConfig& cfg,
                            const SnnlParams& snnl_params, Rng& rng) {
    if (cfg.prune_ratio <= 0.0 || cfg.prune_ratio >= 1.0)
        throw BadConfig("prune ratio must lie strictly between 0 and 1");
    if (cfg.acc_threshold < 0.0 || cfg.fair_threshold < 0.0)
        throw BadConfig("thresholds must be non-negative");
    if (cfg.max_iterations < 0) throw BadConfig("max iterations must be non-negative");

    auto evaluate = [&](const ToyModel& m) {
        PredictionSet preds = predict(m, val_data);
        const double acc = accuracy(preds);
        const double fair = 1.0 - eodds_difference(preds, attribute, cfg.positive_class);
        return std::pair<double, double>(acc, fair);
    };

    PruneResult res;
    res.model = model;
    const auto [a0, f0] = evaluate(res.model);
    res.baseline_accuracy = a0;
    res.baseline_fairness = f0;

    double f_prev = f0;
    for (int k = 1; k <= cfg.max_iterations; ++k) {
        const int c_now = res.model.last_channels();
        const int m = static_cast<int>(std::ceil(cfg.prune_ratio * c_now));
        if (m >= c_now) break;  // at least one channel must survive

        const auto scores = score_channels(res.model, train_data, attribute, snnl_params);
        const auto chosen = lowest_gamma(scores, m);

        ToyModel candidate = prune_channels(res.model, chosen);
        TrainConfig tc;
        tc.epochs = cfg.finetune_epochs;
        tc.lr = cfg.finetune_lr;
        sgd_train(candidate, train_data, tc, rng);

        const auto [ak, fk] = evaluate(candidate);

        PruneIteration rec;
        rec.iteration = k;
        rec.gamma.reserve(scores.size());
        for (const auto& s : scores) rec.gamma.push_back(s.score_gamma);
        rec.pruned = chosen;
        rec.accuracy = ak;
        rec.fairness = fk;

        if (a0 - ak > cfg.acc_threshold || fk - f_prev < cfg.fair_threshold) {
            rec.reverted = true;  // res.model keeps the pre-iteration weights
            res.history.push_back(rec);
            break;
        }
        res.model = std::move(candidate);
        f_prev = fk;
        res.history.push_back(rec);
    }
    return res;
}

nlohmann::ordered_json prune_history_json(const PruneResult& result) {
    nlohmann::ordered_json j;
    j["baseline"] = {{"accuracy", result.baseline_accuracy},
                     {"fairness", result.baseline_fairness}};
    j["iterations"] = nlohmann::ordered_json::array();
    for (const auto& it : result.history) {
        nlohmann::ordered_json row;
        row["iteration"] = it.iteration;
        row["gamma"] = it.gamma;
        row["pruned"] = it.pruned;
        row["accuracy"] = it.accuracy;
        row["fairness"] = it.fairness;
        row["reverted"] = it.reverted;
        j["iterations"].push_back(row);
    }
    return j;
}

}  // namespace fairskin
