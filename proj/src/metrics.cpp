#include "fairskin/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fairskin/errors.hpp"

namespace fairskin {

namespace {

void check_attribute(const PredictionSet& preds, int attribute) {
    if (attribute < 0 || attribute >= preds.n_attrs)
        throw BadConfig("attribute index " + std::to_string(attribute) + " out of range");
}

void check_class(const PredictionSet& preds, int cls) {
    if (cls < 0 || cls >= preds.n_classes)
        throw BadClass("class index " + std::to_string(cls) + " out of range");
}

// Row indices per group id, unknown (-1) rows dropped. Keys ascend.
std::map<int, std::vector<int>> group_rows(const PredictionSet& preds, int attribute) {
    std::map<int, std::vector<int>> rows;
    for (int i = 0; i < preds.size(); ++i) {
        const int g = preds.attr(i, attribute);
        if (g >= 0) rows[g].push_back(i);
    }
    return rows;
}

// Linear interpolation of tpr at the given fpr; vertical runs collapse to
// their topmost point.
double curve_at(const RocCurve& c, double x) {
    const auto& f = c.fpr;
    const auto& t = c.tpr;
    if (x <= f.front()) return t.front();
    if (x >= f.back()) return t.back();
    // Rightmost vertex with fpr <= x.
    std::size_t i = static_cast<std::size_t>(
        std::distance(f.begin(), std::upper_bound(f.begin(), f.end(), x)) - 1);
    if (f[i] == x) return t[i];
    const double w = (x - f[i]) / (f[i + 1] - f[i]);
    return t[i] + w * (t[i + 1] - t[i]);
}

}  // namespace

PredictionSet predict(const ToyModel& model, const Batch& batch) {
    ForwardResult fr = forward(model, batch);
    PredictionSet out;
    out.n_classes = model.cfg.n_classes;
    out.n_attrs = batch.n_attrs;
    out.labels = batch.labels;
    out.attrs = batch.attrs;
    out.scores = softmax(fr.logits, batch.B, model.cfg.n_classes);
    out.predicted.resize(batch.B);
    for (int i = 0; i < batch.B; ++i) {
        int best = 0;
        for (int c = 1; c < out.n_classes; ++c)
            if (out.scores[static_cast<std::size_t>(i) * out.n_classes + c] >
                out.scores[static_cast<std::size_t>(i) * out.n_classes + best])
                best = c;
        out.predicted[i] = best;
    }
    return out;
}

double accuracy(const PredictionSet& preds) {
    if (preds.size() == 0) throw InsufficientGroupData("empty prediction set");
    int hits = 0;
    for (int i = 0; i < preds.size(); ++i)
        if (preds.predicted[i] == preds.labels[i]) ++hits;
    return static_cast<double>(hits) / preds.size();
}

double macro_f1(const PredictionSet& preds) {
    if (preds.size() == 0) throw InsufficientGroupData("empty prediction set");
    double sum = 0.0;
    for (int c = 0; c < preds.n_classes; ++c) {
        long tp = 0, fp = 0, fn = 0;
        for (int i = 0; i < preds.size(); ++i) {
            const bool is_c = preds.labels[i] == c;
            const bool pred_c = preds.predicted[i] == c;
            if (is_c && pred_c) ++tp;
            else if (!is_c && pred_c) ++fp;
            else if (is_c && !pred_c) ++fn;
        }
        const double denom = 2.0 * tp + fp + fn;
        sum += denom > 0 ? 2.0 * tp / denom : 0.0;
    }
    return sum / preds.n_classes;
}

double eodds_difference(const PredictionSet& preds, int attribute, int positive_class) {
    check_attribute(preds, attribute);
    check_class(preds, positive_class);
    const auto rows = group_rows(preds, attribute);
    if (rows.size() < 2)
        throw InsufficientGroupData("equalized odds needs at least two groups, got " +
                                    std::to_string(rows.size()));
    std::vector<double> tprs, fprs;
    for (const auto& [g, idx] : rows) {
        long tp = 0, fn = 0, fp = 0, tn = 0;
        for (int i : idx) {
            const bool pos = preds.labels[i] == positive_class;
            const bool hat = preds.predicted[i] == positive_class;
            if (pos && hat) ++tp;
            else if (pos && !hat) ++fn;
            else if (!pos && hat) ++fp;
            else ++tn;
        }
        if (tp + fn == 0)
            throw InsufficientGroupData("group " + std::to_string(g) +
                                        " has no positive instances");
        if (fp + tn == 0)
            throw InsufficientGroupData("group " + std::to_string(g) +
                                        " has no negative instances");
        tprs.push_back(static_cast<double>(tp) / (tp + fn));
        fprs.push_back(static_cast<double>(fp) / (fp + tn));
    }
    double worst = 0.0;
    for (std::size_t a = 0; a < tprs.size(); ++a)
        for (std::size_t b = a + 1; b < tprs.size(); ++b)
            worst = std::max(worst, 0.5 * (std::abs(tprs[a] - tprs[b]) +
                                           std::abs(fprs[a] - fprs[b])));
    return worst;
}

RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeMismatch("scores and labels differ in length");
    long p = 0, n = 0;
    for (int y : labels) (y == 1 ? p : n)++;
    if (p == 0 || n == 0) throw SingleClass("labels contain a single class");

    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });

    RocCurve c;
    c.fpr.push_back(0.0);
    c.tpr.push_back(0.0);
    long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        // All instances tied at this score flip together.
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] == 1 ? tp : fp)++;
            ++i;
        }
        c.fpr.push_back(static_cast<double>(fp) / n);
        c.tpr.push_back(static_cast<double>(tp) / p);
    }
    double area = 0.0;
    for (std::size_t k = 1; k < c.fpr.size(); ++k)
        area += (c.fpr[k] - c.fpr[k - 1]) * 0.5 * (c.tpr[k] + c.tpr[k - 1]);
    c.auc = area;
    return c;
}

double abroca(const PredictionSet& preds, int attribute, int positive_class) {
    check_attribute(preds, attribute);
    check_class(preds, positive_class);
    const auto rows = group_rows(preds, attribute);
    if (rows.size() < 2)
        throw InsufficientGroupData("abroca needs at least two groups, got " +
                                    std::to_string(rows.size()));
    std::vector<RocCurve> curves;
    for (const auto& [g, idx] : rows) {
        std::vector<double> s;
        std::vector<int> y;
        s.reserve(idx.size());
        y.reserve(idx.size());
        for (int i : idx) {
            s.push_back(preds.scores[static_cast<std::size_t>(i) * preds.n_classes +
                                     positive_class]);
            y.push_back(preds.labels[i] == positive_class ? 1 : 0);
        }
        const long pos = std::count(y.begin(), y.end(), 1);
        if (pos == 0 || pos == static_cast<long>(y.size()))
            throw InsufficientGroupData("group " + std::to_string(g) +
                                        " has a single ground-truth class");
        curves.push_back(roc_auc(s, y));
    }

    constexpr int kGrid = 1001;
    std::vector<std::vector<double>> tpr_on_grid(curves.size(),
                                                 std::vector<double>(kGrid));
    for (std::size_t g = 0; g < curves.size(); ++g)
        for (int j = 0; j < kGrid; ++j)
            tpr_on_grid[g][j] = curve_at(curves[g], j / 1000.0);

    double worst = 0.0;
    for (std::size_t a = 0; a < curves.size(); ++a)
        for (std::size_t b = a + 1; b < curves.size(); ++b) {
            double area = 0.0;
            for (int j = 1; j < kGrid; ++j) {
                const double da = std::abs(tpr_on_grid[a][j - 1] - tpr_on_grid[b][j - 1]);
                const double db = std::abs(tpr_on_grid[a][j] - tpr_on_grid[b][j]);
                area += 0.5 * (da + db) / 1000.0;
            }
            worst = std::max(worst, area);
        }
    return worst;
}

double disparate_impact(const PredictionSet& preds, int attribute, int positive_class) {
    check_attribute(preds, attribute);
    check_class(preds, positive_class);
    const auto rows = group_rows(preds, attribute);
    if (rows.size() < 2)
        throw InsufficientGroupData("disparate impact needs at least two groups, got " +
                                    std::to_string(rows.size()));
    double lo = 1.0, hi = 0.0;
    for (const auto& [g, idx] : rows) {
        long hits = 0;
        for (int i : idx)
            if (preds.predicted[i] == positive_class) ++hits;
        const double rate = static_cast<double>(hits) / idx.size();
        lo = std::min(lo, rate);
        hi = std::max(hi, rate);
    }
    if (hi == 0.0) return 0.0;
    return lo / hi;
}

std::map<int, std::optional<double>> group_macro_auc(const PredictionSet& preds,
                                                     int attribute) {
    check_attribute(preds, attribute);
    std::map<int, std::optional<double>> out;
    for (const auto& [g, idx] : group_rows(preds, attribute)) {
        double sum = 0.0;
        int kept = 0;
        for (int c = 0; c < preds.n_classes; ++c) {
            std::vector<double> s;
            std::vector<int> y;
            for (int i : idx) {
                s.push_back(preds.scores[static_cast<std::size_t>(i) * preds.n_classes + c]);
                y.push_back(preds.labels[i] == c ? 1 : 0);
            }
            const long pos = std::count(y.begin(), y.end(), 1);
            if (pos == 0 || pos == static_cast<long>(y.size())) continue;
            sum += roc_auc(s, y).auc;
            ++kept;
        }
        out[g] = kept > 0 ? std::optional<double>(sum / kept) : std::nullopt;
    }
    return out;
}

std::map<int, double> group_accuracy(const PredictionSet& preds, int attribute) {
    check_attribute(preds, attribute);
    std::map<int, double> out;
    for (const auto& [g, idx] : group_rows(preds, attribute)) {
        long hits = 0;
        for (int i : idx)
            if (preds.predicted[i] == preds.labels[i]) ++hits;
        out[g] = static_cast<double>(hits) / idx.size();
    }
    return out;
}

nlohmann::ordered_json fairness_report(const PredictionSet& preds,
                                       const MetricConfig& cfg) {
    nlohmann::ordered_json rep;
    nlohmann::ordered_json errors = nlohmann::ordered_json::object();

    rep["n_samples"] = preds.size();
    try {
        rep["accuracy"] = accuracy(preds);
    } catch (const Error& e) {
        rep["accuracy"] = nullptr;
        errors["accuracy"] = e.what();
    }
    try {
        rep["f1_macro"] = macro_f1(preds);
    } catch (const Error& e) {
        rep["f1_macro"] = nullptr;
        errors["f1_macro"] = e.what();
    }

    rep["eodds"] = nlohmann::ordered_json::object();
    rep["abroca"] = nlohmann::ordered_json::object();
    for (int a = 0; a < static_cast<int>(cfg.attr_names.size()) && a < preds.n_attrs; ++a) {
        const std::string& name = cfg.attr_names[a];
        try {
            rep["eodds"][name] = eodds_difference(preds, a, cfg.positive_class);
        } catch (const Error& e) {
            rep["eodds"][name] = nullptr;
            errors["eodds/" + name] = e.what();
        }
        try {
            rep["abroca"][name] = abroca(preds, a, cfg.positive_class);
        } catch (const Error& e) {
            rep["abroca"][name] = nullptr;
            errors["abroca/" + name] = e.what();
        }
    }

    try {
        rep["di"] = disparate_impact(preds, cfg.di_attribute, cfg.positive_class);
    } catch (const Error& e) {
        rep["di"] = nullptr;
        errors["di"] = e.what();
    }

    rep["per_group_accuracy"] = nlohmann::ordered_json::object();
    rep["per_group_auc"] = nlohmann::ordered_json::object();
    for (int a = 0; a < static_cast<int>(cfg.attr_names.size()) && a < preds.n_attrs; ++a) {
        const std::string& name = cfg.attr_names[a];
        nlohmann::ordered_json acc_obj = nlohmann::ordered_json::object();
        for (const auto& [g, v] : group_accuracy(preds, a))
            acc_obj[std::to_string(g)] = v;
        rep["per_group_accuracy"][name] = acc_obj;

        nlohmann::ordered_json auc_obj = nlohmann::ordered_json::object();
        for (const auto& [g, v] : group_macro_auc(preds, a)) {
            if (v)
                auc_obj[std::to_string(g)] = *v;
            else {
                auc_obj[std::to_string(g)] = nullptr;
                errors["per_group_auc/" + name + "/" + std::to_string(g)] =
                    "no class with both outcomes in group";
            }
        }
        rep["per_group_auc"][name] = auc_obj;
    }

    rep["errors"] = errors;
    return rep;
}

}  // namespace fairskin
