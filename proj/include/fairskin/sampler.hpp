#pragma once

#include <array>
#include <optional>

#include "fairskin/dataset.hpp"
#include "fairskin/rng.hpp"

namespace fairskin {

// Per-FST replacement probabilities for blend training. Index 0 = FST I.
// Initialization can produce 1.0 for groups with no mass; the 0.9 cap binds
// only when a probability is raised by an update.
struct BlendState {
    std::array<double, 6> p_synth{};
    double tau = 0.7;
    double delta = 0.05;
    int eval_period_K = 5;
};

// p(i) = max(0, (1/6 - P_orig(i)) / (1/6)). Throws BadDistribution when a
// fraction is negative or the sum is off unity by more than 1e-9.
BlendState init_probs(const std::array<double, 6>& fst_distribution);

// One Bernoulli draw at the group's replacement probability. fst is 1..6;
// unknown (-1) never replaces.
bool should_replace(const BlendState& state, int fst, Rng& rng);

// Returns the tone-transformed counterpart with probability p(fst(sample)),
// else the original. A missing counterpart is an error only when the group's
// probability is positive.
SampleRecord maybe_replace(const SampleRecord& sample, const SampleRecord* synth,
                           const BlendState& state, Rng& rng);

// Raises p by delta (capped at 0.9) for every group whose score fell below
// tau; groups without a score are left alone.
BlendState update_probs(const BlendState& state,
                        const std::array<std::optional<double>, 6>& per_fst_auc);

// Expected group distribution after replacement: each group's replaced mass
// re-enters at the uniform target, then the vector is renormalized.
std::array<double, 6> expected_blended_distribution(const BlendState& state,
                                                    const std::array<double, 6>& orig);

// Sum over groups of (p_i - 1/6)^2 / (1/6).
double chi_square_to_uniform(const std::array<double, 6>& dist);

}  // namespace fairskin
