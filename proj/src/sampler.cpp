#include "fairskin/sampler.hpp"

#include <cmath>

#include "fairskin/errors.hpp"

namespace fairskin {

namespace {
constexpr double kUniform = 1.0 / 6.0;
}

BlendState init_probs(const std::array<double, 6>& fst_distribution) {
    double sum = 0.0;
    for (double f : fst_distribution) {
        if (f < 0.0) throw BadDistribution("negative group fraction");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw BadDistribution("group fractions do not sum to 1");
    BlendState st;
    for (int i = 0; i < 6; ++i)
        st.p_synth[i] = std::max(0.0, (kUniform - fst_distribution[i]) / kUniform);
    return st;
}

bool should_replace(const BlendState& state, int fst, Rng& rng) {
    if (fst < 1 || fst > 6) return false;
    return rng.bernoulli(state.p_synth[fst - 1]);
}

SampleRecord maybe_replace(const SampleRecord& sample, const SampleRecord* synth,
                           const BlendState& state, Rng& rng) {
    const int fst = sample.fst;
    const double p = (fst >= 1 && fst <= 6) ? state.p_synth[fst - 1] : 0.0;
    if (!synth) {
        if (p > 0.0) throw MissingCounterpart("no transformed counterpart for " + sample.image_path);
        return sample;
    }
    return should_replace(state, fst, rng) ? *synth : sample;
}

BlendState update_probs(const BlendState& state,
                        const std::array<std::optional<double>, 6>& per_fst_auc) {
    BlendState out = state;
    for (int i = 0; i < 6; ++i) {
        if (!per_fst_auc[i].has_value()) continue;
        if (*per_fst_auc[i] < state.tau)
            out.p_synth[i] = std::min(state.p_synth[i] + state.delta, 0.9);
    }
    return out;
}

std::array<double, 6> expected_blended_distribution(const BlendState& state,
                                                    const std::array<double, 6>& orig) {
    std::array<double, 6> raw{};
    double sum = 0.0;
    for (int i = 0; i < 6; ++i) {
        raw[i] = (1.0 - state.p_synth[i]) * orig[i] + state.p_synth[i] * kUniform;
        sum += raw[i];
    }
    for (double& v : raw) v /= sum;
    return raw;
}

double chi_square_to_uniform(const std::array<double, 6>& dist) {
    double chi = 0.0;
    for (double v : dist) chi += (v - kUniform) * (v - kUniform) / kUniform;
    return chi;
}

}  // namespace fairskin
