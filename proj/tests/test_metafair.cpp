#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "fairskin/errors.hpp"
#include "fairskin/metafair.hpp"
#include "fairskin/rng.hpp"

using namespace fairskin;

namespace {

Batch random_batch(int n, int hw, int n_attrs, Rng& rng) {
    Batch b;
    b.B = n;
    b.H = b.W = hw;
    b.n_attrs = n_attrs;
    b.images.resize(static_cast<std::size_t>(n) * 3 * hw * hw);
    for (auto& v : b.images) v = rng.uniform();
    b.labels.resize(n);
    b.attrs.resize(static_cast<std::size_t>(n) * n_attrs);
    for (int i = 0; i < n; ++i) {
        b.labels[i] = rng.uniform_int(0, 1);
        for (int k = 0; k < n_attrs; ++k)
            b.attrs[i * n_attrs + k] = rng.uniform_int(0, 1);
    }
    return b;
}

ToyModel small_model(int seed, int channels = 4, int n_attrs_classes = 2) {
    ModelConfig cfg;
    cfg.conv_channels = {channels};
    cfg.n_classes = n_attrs_classes;
    cfg.input_hw = 8;
    cfg.seed = seed;
    return build_model(cfg);
}

}  // namespace

TEST_SUITE("metafair") {

TEST_CASE("weighted loss is linear in the weights") {
    Rng rng(101);
    Batch b = random_batch(10, 8, 3, rng);
    ToyModel m = small_model(1);
    SnnlParams sp;

    FairWeights only_first;
    only_first.w = {1.0, 0.0, 0.0};
    FairWeights only_second;
    only_second.w = {0.0, 1.0, 0.0};
    FairWeights only_third;
    only_third.w = {0.0, 0.0, 1.0};
    FairWeights zeros;
    zeros.w = {0.0, 0.0, 0.0};
    FairWeights ones;  // default

    ForwardResult fr = forward(m, b);
    std::vector<int> g0(b.B);
    for (int i = 0; i < b.B; ++i) g0[i] = b.attr(i, 0);
    const double direct0 = snnl(fr.features, m.last_channels(), g0, sp);

    CHECK(weighted_snnl_loss(m, b, only_first, sp) == doctest::Approx(direct0).epsilon(1e-15));
    CHECK(weighted_snnl_loss(m, b, zeros, sp) == 0.0);
    const double sum = weighted_snnl_loss(m, b, only_first, sp) +
                       weighted_snnl_loss(m, b, only_second, sp) +
                       weighted_snnl_loss(m, b, only_third, sp);
    CHECK(weighted_snnl_loss(m, b, ones, sp) == doctest::Approx(sum).epsilon(1e-12));

    FairWeights short_w;
    short_w.w = {1.0};
    CHECK_THROWS_AS(weighted_snnl_loss(m, b, short_w, sp), BadConfig);
}

TEST_CASE("weighted loss gradient matches central differences through the network") {
    Rng rng(202);
    Batch b = random_batch(8, 8, 3, rng);
    ToyModel m = small_model(2);
    SnnlParams sp;
    sp.temperature_T = 2.0;
    FairWeights w;
    w.w = {1.0, 0.5, 0.25};

    const auto grad = weighted_snnl_gradient(m, b, w, sp);
    REQUIRE(grad.size() == m.params.size());

    auto loss_with = [&](std::size_t idx, double delta) {
        ToyModel probe = m;
        probe.params[idx] += delta;
        return weighted_snnl_loss(probe, b, w, sp);
    };

    // A probe whose perturbation flips any rectifier sign or pooling argmax
    // crosses a kink; finite differences there measure a blended slope no
    // matter the step size, so such probes are skipped outright.
    auto same_activation_pattern = [&](std::size_t idx, double h) {
        ToyModel hi = m, lo = m;
        hi.params[idx] += h;
        lo.params[idx] -= h;
        ForwardResult a = forward(hi, b);
        ForwardResult c = forward(lo, b);
        for (std::size_t l = 0; l < a.pre_act.size(); ++l)
            for (std::size_t u = 0; u < a.pre_act[l].size(); ++u)
                if ((a.pre_act[l][u] > 0.0) != (c.pre_act[l][u] > 0.0)) return false;
        for (std::size_t l = 0; l < a.pool_argmax.size(); ++l)
            if (a.pool_argmax[l] != c.pool_argmax[l]) return false;
        return true;
    };

    Rng pick(203);
    const double h = 1e-5;
    int checked = 0, skipped = 0;
    while (checked < 30 && skipped < 60) {
        const std::size_t idx = pick.uniform_int(0, static_cast<int>(m.params.size()) - 1);
        if (!same_activation_pattern(idx, h)) {
            ++skipped;
            continue;
        }
        const double fd = (loss_with(idx, h) - loss_with(idx, -h)) / (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(grad[idx]), 1e-9});
        CHECK(std::abs(fd - grad[idx]) / denom < 1e-4);
        ++checked;
    }
    CHECK(checked == 30);
}

TEST_CASE("simulated update applies exactly one scaled gradient step") {
    ToyModel m = small_model(3);
    std::vector<double> g(m.params.size());
    Rng rng(301);
    for (auto& v : g) v = rng.uniform(-1.0, 1.0);

    ToyModel same = simulate_update(m, g, 0.0);
    CHECK(same.params == m.params);

    ToyModel stepped = simulate_update(m, g, 0.05);
    ToyModel again = simulate_update(m, g, 0.05);
    CHECK(stepped.params == again.params);
    for (std::size_t i = 0; i < g.size(); ++i)
        CHECK(stepped.params[i] - m.params[i] ==
              doctest::Approx(-0.05 * g[i]).epsilon(1e-12));

    CHECK_THROWS_AS(simulate_update(m, std::vector<double>(3, 0.0), 0.1), ShapeMismatch);
}

TEST_CASE("groupwise variance arithmetic") {
    CHECK(groupwise_variance({0.2, 0.4}, {0, 1}) == doctest::Approx(0.01).epsilon(1e-15));
    // 0.5 is exactly representable, so equal losses give a bit-exact zero.
    CHECK(groupwise_variance({0.5, 0.5, 0.5}, {0, 1, 2}) == 0.0);
    CHECK(groupwise_variance({0.1, 0.9, 0.5}, {4, 4, 4}) == 0.0);  // one group
    // Group means first: {0: 0.3, 1: 0.5} -> variance 0.01.
    CHECK(groupwise_variance({0.2, 0.4, 0.5}, {0, 0, 1}) ==
          doctest::Approx(0.01).epsilon(1e-15));

    CHECK_THROWS_AS(groupwise_variance({0.2}, {0, 1}), ShapeMismatch);
    CHECK_THROWS_WITH_AS(groupwise_variance({0.2, 0.4}, {0, 1}, {0, 1, 2}),
                         doctest::Contains("2"), EmptyGroup);
    CHECK_THROWS_AS(groupwise_variance({0.2, 0.4}, {-1, -1}), EmptyGroup);
}

TEST_CASE("groupwise variance vanishes when groups carry identical samples") {
    ToyModel m = small_model(4);
    Rng rng(401);
    Batch half = random_batch(6, 8, 3, rng);
    // Duplicate every sample into the other group: group means coincide.
    Batch b = half;
    b.B = 12;
    b.images.insert(b.images.end(), half.images.begin(), half.images.end());
    b.labels.insert(b.labels.end(), half.labels.begin(), half.labels.end());
    for (int i = 0; i < 6; ++i) {
        b.attrs[i * 3] = 0;
    }
    std::vector<int> mirrored;
    for (int i = 0; i < 6; ++i) {
        mirrored.push_back(1);
        mirrored.push_back(half.attrs[i * 3 + 1]);
        mirrored.push_back(half.attrs[i * 3 + 2]);
    }
    b.attrs.insert(b.attrs.end(), mirrored.begin(), mirrored.end());
    CHECK(groupwise_variance(m, b, 0) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("meta step projects onto the non-negative orthant") {
    FairWeights w;
    w.w = {1.0, 1.0, 1.0};
    CHECK(meta_step(w, {0.0, 0.0, 0.0}, 0.5).w == std::vector<double>{1.0, 1.0, 1.0});
    CHECK(meta_step(w, {0.5, 0.0, -0.5}, 1.0).w == std::vector<double>{0.5, 1.0, 1.5});

    FairWeights tiny;
    tiny.w = {0.1};
    CHECK(meta_step(tiny, {2.0}, 0.1).w == std::vector<double>{0.0});

    CHECK_THROWS_AS(meta_step(w, {1.0}, 0.1), ShapeMismatch);
}

TEST_CASE("central differences are exact on a quadratic") {
    const std::vector<double> a = {2.0, -1.5, 0.75};
    const std::vector<double> c = {0.3, -0.2, 1.1};
    auto f = [&](const std::vector<double>& x) {
        double v = 0.0;
        for (int i = 0; i < 3; ++i) v += a[i] * (x[i] - c[i]) * (x[i] - c[i]);
        v += 0.5 * x[0] * x[1];
        return v;
    };
    const std::vector<double> at = {1.0, 2.0, -0.5};
    const auto g = central_fd_gradient(f, at, 1e-3);
    const std::vector<double> exact = {2 * a[0] * (at[0] - c[0]) + 0.5 * at[1],
                                       2 * a[1] * (at[1] - c[1]) + 0.5 * at[0],
                                       2 * a[2] * (at[2] - c[2])};
    for (int i = 0; i < 3; ++i)
        CHECK(g[i] == doctest::Approx(exact[i]).epsilon(1e-9));
    CHECK_THROWS_AS(central_fd_gradient(f, at, 0.0), BadConfig);
}

TEST_CASE("identical attribute columns produce identical meta-gradient components") {
    Rng rng(501);
    Batch train = random_batch(12, 8, 3, rng);
    Batch meta = random_batch(8, 8, 3, rng);
    for (int i = 0; i < train.B; ++i) train.attrs[i * 3 + 1] = train.attrs[i * 3];
    for (int i = 0; i < meta.B; ++i) meta.attrs[i * 3 + 1] = meta.attrs[i * 3];

    ToyModel m = small_model(5);
    MetaConfig mc;
    mc.meta_iterations_T = 1;
    PruneConfig pc;
    pc.finetune_epochs = 0;
    SnnlParams sp;
    Rng run_rng(502);
    auto res = meta_prune(m, train, meta, mc, pc, sp, run_rng);
    REQUIRE(res.history.size() == 1);
    const auto& g = res.history[0].meta_grad;
    CHECK(g[0] == doctest::Approx(g[1]).epsilon(1e-12));
}

TEST_CASE("zero meta iterations keep unit weights and score channels jointly") {
    Rng rng(601);
    Batch train = random_batch(16, 8, 3, rng);
    Batch meta = random_batch(8, 8, 3, rng);
    ToyModel m = small_model(6, 5);

    MetaConfig mc;
    mc.meta_iterations_T = 0;
    PruneConfig pc;
    pc.prune_ratio = 0.4;  // two of five channels
    pc.finetune_epochs = 0;
    SnnlParams sp;
    sp.batch_b = 8;
    Rng run_rng(602);
    auto res = meta_prune(m, train, meta, mc, pc, sp, run_rng);

    CHECK(res.history.empty());
    CHECK(res.weights.w == std::vector<double>{1.0, 1.0, 1.0});

    // Equally weighted joint scoring, recomputed by hand.
    std::vector<double> expect(5, 0.0);
    for (int k = 0; k < 3; ++k) {
        const auto s = score_channels(m, train, k, sp);
        for (int c = 0; c < 5; ++c) expect[c] += s[c].score_gamma;
    }
    for (int c = 0; c < 5; ++c)
        CHECK(res.importance[c] == doctest::Approx(expect[c]).epsilon(1e-12));

    std::vector<ChannelScore> ranked(5);
    for (int c = 0; c < 5; ++c) ranked[c] = ChannelScore{c, expect[c], -1};
    CHECK(res.pruned == lowest_gamma(ranked, 2));
    CHECK(res.model.last_channels() == 3);
}

TEST_CASE("single-attribute meta pruning reduces to plain joint scoring") {
    Rng rng(701);
    Batch train = random_batch(14, 8, 1, rng);
    Batch meta = random_batch(6, 8, 1, rng);
    ToyModel m = small_model(7, 4);

    MetaConfig mc;
    mc.meta_iterations_T = 0;
    PruneConfig pc;
    pc.prune_ratio = 0.25;
    pc.finetune_epochs = 0;
    SnnlParams sp;
    sp.batch_b = 7;
    Rng run_rng(702);
    auto res = meta_prune(m, train, meta, mc, pc, sp, run_rng);

    const auto direct = score_channels(m, train, 0, sp);
    CHECK(res.pruned == lowest_gamma(direct, 1));
}

TEST_CASE("meta loop keeps weights non-negative and records its trajectory") {
    Rng rng(801);
    Batch train = random_batch(20, 8, 3, rng);
    Batch meta = random_batch(10, 8, 3, rng);
    ToyModel m = small_model(8, 4);
    Rng train_rng(802);
    TrainConfig tc;
    tc.epochs = 2;
    sgd_train(m, train, tc, train_rng);

    MetaConfig mc;
    mc.meta_iterations_T = 3;
    PruneConfig pc;
    pc.finetune_epochs = 1;
    SnnlParams sp;
    sp.batch_b = 10;
    Rng run_rng(803);
    auto res = meta_prune(m, train, meta, mc, pc, sp, run_rng);

    REQUIRE(res.history.size() == 3);
    for (const auto& it : res.history) {
        CHECK(it.w.size() == 3);
        CHECK(it.var_losses.size() == 3);
        CHECK(std::isfinite(it.l_meta));
        CHECK(it.l_meta >= 0.0);
        double sum = 0.0;
        for (double v : it.var_losses) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(it.l_meta == doctest::Approx(sum).epsilon(1e-12));
    }
    for (double v : res.weights.w) CHECK(v >= 0.0);
    CHECK(res.model.last_channels() == 3);  // ceil(0.02 * 4) = 1 pruned

    const auto j = meta_history_json(res);
    CHECK(j["iterations"].size() == 3);
    CHECK(j["final_w"].size() == 3);
    CHECK(j["pruned"].size() == 1);
}

TEST_CASE("stratified split covers every stratum on the held-out side") {
    Rng rng(901);
    Batch data = random_batch(60, 8, 3, rng);
    Rng split_rng(902);
    auto [rem, held] = stratified_split(data, 0.2, split_rng);

    CHECK(rem.B + held.B == data.B);
    CHECK(held.B >= 8);  // at least one per populated stratum

    std::set<std::vector<int>> strata_all, strata_held;
    for (int i = 0; i < data.B; ++i)
        strata_all.insert({data.labels[i], data.attr(i, 0), data.attr(i, 1), data.attr(i, 2)});
    for (int i = 0; i < held.B; ++i)
        strata_held.insert({held.labels[i], held.attr(i, 0), held.attr(i, 1), held.attr(i, 2)});
    CHECK(strata_all == strata_held);

    // Determinism under an equal seed.
    Rng split_rng2(902);
    auto [rem2, held2] = stratified_split(data, 0.2, split_rng2);
    CHECK(held2.images == held.images);
    CHECK(rem2.labels == rem.labels);

    CHECK_THROWS_AS(stratified_split(data, 0.0, split_rng), BadConfig);
    CHECK_THROWS_AS(stratified_split(data, 1.0, split_rng), BadConfig);
}

}  // TEST_SUITE
