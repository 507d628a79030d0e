#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "gdro/autodiff.hpp"
#include "gdro/rng.hpp"
#include "gdro/robust.hpp"

using namespace gdro;

namespace {

// Interior simplex point: normalised exponentials mixed with uniform so no
// coordinate gets vanishingly small.
GroupWeights random_state(Rng& rng, int groups) {
    GroupWeights w;
    w.w.resize(static_cast<std::size_t>(groups));
    double total = 0.0;
    for (double& v : w.w) {
        v = -std::log(1.0 - rng.uniform01());
        total += v;
    }
    for (double& v : w.w) v = 0.85 * (v / total) + 0.15 / groups;
    double s = w.sum();
    for (double& v : w.w) v /= s;
    return w;
}

std::vector<double> random_losses(Rng& rng, int groups, double hi = 5.0) {
    std::vector<double> l(static_cast<std::size_t>(groups));
    for (double& v : l) v = rng.uniform(0.0, hi);
    return l;
}

GroupLossReport report_of(std::vector<double> losses) {
    GroupLossReport r;
    r.counts.assign(losses.size(), 1);
    r.losses = std::move(losses);
    return r;
}

}  // namespace

TEST_CASE("group_losses means and absent groups", "[robust]") {
    const std::vector<double> a{1.0, 3.0};
    const std::vector<int> ga{0, 0};
    GroupLossReport r = group_losses(a, ga, 2);
    REQUIRE(r.losses == std::vector<double>{2.0, 0.0});
    REQUIRE(r.counts == std::vector<int>{2, 0});

    const std::vector<double> b{1.0, 2.0, 3.0};
    const std::vector<int> gb{0, 1, 1};
    GroupLossReport r2 = group_losses(b, gb, 2);
    REQUIRE(r2.losses[0] == 1.0);
    REQUIRE(r2.losses[1] == 2.5);

    GroupLossReport empty = group_losses(std::vector<double>{}, std::vector<int>{}, 3);
    REQUIRE(empty.losses == std::vector<double>{0, 0, 0});
    REQUIRE(empty.counts == std::vector<int>{0, 0, 0});

    REQUIRE_THROWS_AS(group_losses(a, std::vector<int>{0, 2}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(group_losses(a, std::vector<int>{0, -1}, 2), std::invalid_argument);
}

TEST_CASE("vanilla exponentiated-gradient update", "[robust]") {
    DroConfig cfg;
    cfg.update_mode = UpdateMode::vanilla_eg;
    cfg.eta_dro = 0.01;

    GroupWeights w = GroupWeights::uniform(4);
    GroupWeights next = update_weights(w, report_of({1, 0, 0, 0}), cfg);

    // Direct closed form of the multiplicative update.
    const double e = std::exp(0.01);
    const double z = 0.25 * e + 0.75;
    REQUIRE(next.w[0] == Catch::Approx(0.25 * e / z).margin(1e-14));
    REQUIRE(next.w[1] == Catch::Approx(0.25 / z).margin(1e-14));
    REQUIRE(next.w[0] == Catch::Approx(0.2518797).margin(1e-7));
    REQUIRE(next.w[1] == Catch::Approx(0.2493734).margin(1e-7));
    REQUIRE(std::abs(next.sum() - 1.0) < 1e-12);

    SECTION("non-simplex state is rejected") {
        GroupWeights bad{{0.5, 0.6}};
        REQUIRE_THROWS_AS(update_weights(bad, report_of({0, 0}), cfg), std::invalid_argument);
        GroupWeights negative{{1.2, -0.2}};
        REQUIRE_THROWS_AS(update_weights(negative, report_of({0, 0}), cfg), std::invalid_argument);
    }

    SECTION("monotone pressure: larger loss gains relative weight") {
        Rng rng(31);
        for (int trial = 0; trial < 200; ++trial) {
            GroupWeights state = random_state(rng, 5);
            auto losses = random_losses(rng, 5);
            losses[2] = losses[3] + rng.uniform(0.1, 2.0);  // l_2 > l_3
            GroupWeights out = update_weights(state, report_of(losses), cfg);
            REQUIRE(out.w[2] / out.w[3] > state.w[2] / state.w[3]);
        }
    }
}

TEST_CASE("kl_mirror update", "[robust]") {
    SECTION("hand-evaluated two-group case equals logistic(1/2)") {
        DroConfig cfg;
        cfg.update_mode = UpdateMode::kl_mirror;
        cfg.eta_dro = 1.0;
        cfg.alpha = 1.0;  // beta = 1/2
        GroupWeights w = GroupWeights::uniform(2);
        GroupWeights next = update_weights(w, report_of({1, 0}), cfg);
        const double logistic_half = 1.0 / (1.0 + std::exp(-0.5));
        REQUIRE(next.w[0] == Catch::Approx(logistic_half).margin(1e-12));
        REQUIRE(next.w[1] == Catch::Approx(1.0 - logistic_half).margin(1e-12));
        REQUIRE(next.w[0] == Catch::Approx(0.622459).margin(1e-6));
    }

    SECTION("alpha = 0 reproduces vanilla_eg within 1e-15") {
        Rng rng(41);
        for (int trial = 0; trial < 1000; ++trial) {
            const int groups = 2 + static_cast<int>(rng.below(7));
            GroupWeights state = random_state(rng, groups);
            const auto losses = random_losses(rng, groups);
            DroConfig vanilla;
            vanilla.update_mode = UpdateMode::vanilla_eg;
            DroConfig mirror;
            mirror.update_mode = UpdateMode::kl_mirror;
            mirror.alpha = 0.0;
            const GroupWeights a = update_weights(state, report_of(losses), vanilla);
            const GroupWeights b = update_weights(state, report_of(losses), mirror);
            for (int g = 0; g < groups; ++g) {
                REQUIRE(std::abs(a.w[static_cast<std::size_t>(g)] - b.w[static_cast<std::size_t>(g)]) <= 1e-15);
            }
        }
    }

    SECTION("fixpoint under constant losses is the tilted distribution") {
        Rng rng(43);
        DroConfig cfg;
        cfg.update_mode = UpdateMode::kl_mirror;
        cfg.eta_dro = 0.05;
        cfg.alpha = 0.7;
        const int groups = 5;
        const auto losses = random_losses(rng, groups, 2.0);
        GroupWeights w = GroupWeights::uniform(groups);
        for (int it = 0; it < 20000; ++it) w = update_weights(w, report_of(losses), cfg);
        // Maximiser of <l,w> - alpha*KL(w||u): w*_g proportional to exp(l_g/alpha).
        double z = 0.0;
        for (int g = 0; g < groups; ++g) z += std::exp(losses[static_cast<std::size_t>(g)] / cfg.alpha);
        for (int g = 0; g < groups; ++g) {
            const double expected = std::exp(losses[static_cast<std::size_t>(g)] / cfg.alpha) / z;
            REQUIRE(w.w[static_cast<std::size_t>(g)] == Catch::Approx(expected).margin(1e-6));
        }
    }

    SECTION("huge alpha lands within 1e-4 of uniform in one update") {
        Rng rng(47);
        DroConfig cfg;
        cfg.update_mode = UpdateMode::kl_mirror;
        cfg.eta_dro = 0.01;
        cfg.alpha = 1e6;
        for (int groups : {2, 4, 8}) {
            std::vector<GroupWeights> states{GroupWeights::uniform(groups)};
            GroupWeights skewed = GroupWeights::uniform(groups);
            skewed.w[0] = 0.7;
            for (int g = 1; g < groups; ++g) skewed.w[static_cast<std::size_t>(g)] = 0.3 / (groups - 1);
            states.push_back(skewed);
            for (int t = 0; t < 50; ++t) states.push_back(random_state(rng, groups));
            for (const auto& state : states) {
                GroupWeights out = update_weights(state, report_of(random_losses(rng, groups)), cfg);
                for (double v : out.w) REQUIRE(std::abs(v - 1.0 / groups) < 1e-4);
            }
        }
    }
}

TEST_CASE("vanilla GDRO collapses onto the hardest group", "[robust]") {
    DroConfig cfg;
    cfg.update_mode = UpdateMode::vanilla_eg;
    cfg.eta_dro = 0.01;
    const int groups = 4;
    const std::vector<double> losses{2.0, 1.0, 1.0, 1.0};  // unique maximiser, gap 1
    const double gap = 1.0;
    const int bound = static_cast<int>(std::ceil(std::log(0.001 * (groups - 1)) / (-cfg.eta_dro * gap)));
    GroupWeights w = GroupWeights::uniform(groups);
    for (int it = 0; it < 10 * bound; ++it) w = update_weights(w, report_of(losses), cfg);
    REQUIRE(*std::max_element(w.w.begin(), w.w.end()) > 0.999);
}

TEST_CASE("absent groups decay passively and strictly", "[robust]") {
    DroConfig cfg;
    cfg.update_mode = UpdateMode::vanilla_eg;
    GroupWeights w = GroupWeights::uniform(3);
    GroupLossReport r;
    r.losses = {0.5, 0.3, 0.0};  // group 2 absent
    r.counts = {4, 4, 0};
    double prev = w.w[2];
    for (int it = 0; it < 25; ++it) {
        w = update_weights(w, r, cfg);
        REQUIRE(w.w[2] < prev);
        prev = w.w[2];
    }
}

TEST_CASE("simplex preserved over ten thousand random updates", "[robust]") {
    Rng rng(53);
    const int groups = 6;
    GroupWeights w = GroupWeights::uniform(groups);
    for (int it = 0; it < 10000; ++it) {
        DroConfig cfg;
        const auto mode = rng.below(3);
        cfg.update_mode = mode == 0 ? UpdateMode::vanilla_eg : mode == 1 ? UpdateMode::kl_mirror : UpdateMode::kl_gradient;
        cfg.eta_dro = rng.uniform(0.001, 0.5);
        cfg.alpha = rng.uniform01() < 0.1 ? rng.uniform(10.0, 1e5) : rng.uniform(0.0, 2.0);
        GroupLossReport r = report_of(random_losses(rng, groups, 10.0));
        for (int g = 0; g < groups; ++g) {
            if (rng.uniform01() < 0.2) {
                r.losses[static_cast<std::size_t>(g)] = 0.0;
                r.counts[static_cast<std::size_t>(g)] = 0;
            }
        }
        w = update_weights(w, r, cfg);
        REQUIRE(std::abs(w.sum() - 1.0) < 1e-12);
        REQUIRE(w.min() >= 0.0);
    }
}

TEST_CASE("kl_divergence against uniform", "[robust]") {
    REQUIRE(kl_divergence(GroupWeights::uniform(7)) == Catch::Approx(0.0).margin(1e-15));

    GroupWeights onehot{{1.0, 0.0, 0.0, 0.0}};
    REQUIRE(kl_divergence(onehot) == Catch::Approx(std::log(4.0)).margin(1e-12));

    Rng rng(59);
    for (int trial = 0; trial < 300; ++trial) {
        const int groups = 2 + static_cast<int>(rng.below(8));
        const GroupWeights w = random_state(rng, groups);
        const double kl = kl_divergence(w);
        REQUIRE(kl >= 0.0);
        REQUIRE(kl <= std::log(static_cast<double>(groups)) + 1e-12);
    }
}

TEST_CASE("total_loss composition", "[robust]") {
    SECTION("uniform weights, alpha 0: mean of the present groups' means") {
        Tape tape;
        Value per_sample = tape.constant(Tensor({4}, {1.0, 3.0, 2.0, 4.0}));
        const std::vector<int> groups{0, 0, 1, 1};
        Value lvec = group_loss_nodes(tape, per_sample, groups, 3);  // group 2 absent
        Value loss = total_loss(tape, lvec, GroupWeights::uniform(3), 0.0);
        REQUIRE(tape.value(loss).item() == Catch::Approx((2.0 + 3.0 + 0.0) / 3.0).margin(1e-15));
    }
    SECTION("one-hot weights pick out that group plus the KL offset") {
        Tape tape;
        Value per_sample = tape.constant(Tensor({3}, {1.0, 2.0, 5.0}));
        const std::vector<int> groups{0, 0, 1};
        Value lvec = group_loss_nodes(tape, per_sample, groups, 4);
        GroupWeights onehot{{0.0, 1.0, 0.0, 0.0}};
        const double alpha = 0.6;
        Value loss = total_loss(tape, lvec, onehot, alpha);
        REQUIRE(tape.value(loss).item() == Catch::Approx(5.0 + alpha * std::log(4.0)).margin(1e-12));
    }
    SECTION("gradient to parameters does not depend on alpha") {
        Parameter w("w", Tensor({3}, {0.4, -0.2, 0.9}));
        const std::vector<int> groups{0, 1, 1};
        auto grads_for = [&](double alpha) {
            Tape tape;
            Value x = tape.constant(Tensor({3}, {1.0, 2.0, 3.0}));
            Value per_sample = tape.mul(tape.mul(tape.param(w), tape.param(w)), x);
            Value lvec = group_loss_nodes(tape, per_sample, groups, 2);
            GroupWeights weights{{0.3, 0.7}};
            Value loss = total_loss(tape, lvec, weights, alpha);
            w.zero_grad();
            tape.backward(loss);
            return w.grad.raw();
        };
        REQUIRE(grads_for(0.0) == grads_for(7.5));
    }
}

TEST_CASE("focal loss", "[robust]") {
    SECTION("probability one gives zero loss") {
        Tape tape;
        Value logits = tape.constant(Tensor({1, 2}, {80.0, 0.0}));
        const Tensor& l = tape.value(focal_loss(tape, logits, std::vector<int>{0}, 2.0));
        REQUIRE(std::abs(l[0]) < 1e-12);
    }
    SECTION("gamma = 0 equals unweighted cross-entropy") {
        Rng rng(67);
        for (int trial = 0; trial < 50; ++trial) {
            Tensor logits(Shape{3, 4});
            for (std::int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.uniform(-3, 3);
            const std::vector<int> labels{1, 0, 3};
            Tape tape;
            Value v = tape.constant(logits);
            const Tensor& focal = tape.value(focal_loss(tape, v, labels, 0.0));
            const Tensor& ce = tape.value(tape.cross_entropy(v, labels));
            for (int i = 0; i < 3; ++i) REQUIRE(focal[i] == Catch::Approx(ce[i]).margin(1e-12));
        }
    }
    SECTION("p_t = 1/2 with gamma 2 gives ln(2)/4") {
        Tape tape;
        Value logits = tape.constant(Tensor({1, 2}, {0.0, 0.0}));
        const Tensor& l = tape.value(focal_loss(tape, logits, std::vector<int>{0}, 2.0));
        REQUIRE(l[0] == Catch::Approx(0.25 * std::log(2.0)).margin(1e-12));
        REQUIRE(l[0] == Catch::Approx(0.173287).margin(1e-6));
    }
    SECTION("gradient check through the focal composition") {
        Rng rng(71);
        Parameter x("x", Tensor(Shape{4, 3}));
        for (std::int64_t i = 0; i < x.value.numel(); ++i) x.value[i] = rng.uniform(-2, 2);
        const std::vector<int> labels{0, 2, 1, 1};
        std::vector<Parameter*> params{&x};
        auto loss = [&](bool with_grad) {
            Tape tape;
            Value root = tape.reduce_mean(focal_loss(tape, tape.param(x), labels, 2.0));
            if (with_grad) tape.backward(root);
            return tape.value(root).item();
        };
        REQUIRE(finite_diff_check(loss, params, 1e-5) < 1e-6);
    }
    SECTION("gamma must be non-negative") {
        Tape tape;
        Value logits = tape.constant(Tensor(Shape{1, 2}));
        REQUIRE_THROWS_AS(focal_loss(tape, logits, std::vector<int>{0}, -1.0), std::invalid_argument);
    }
}

TEST_CASE("inverse-frequency class weights", "[robust]") {
    SECTION("balanced classes give unit weights") {
        const std::vector<std::int64_t> counts{10, 10};
        const auto w = inverse_frequency_weights(counts);
        REQUIRE(w == std::vector<double>{1.0, 1.0});
    }
    SECTION("3:1 imbalance gives [2/3, 2]") {
        const std::vector<std::int64_t> counts{3, 1};
        const auto w = inverse_frequency_weights(counts);
        REQUIRE(w[0] == Catch::Approx(2.0 / 3.0).margin(1e-15));
        REQUIRE(w[1] == Catch::Approx(2.0).margin(1e-15));
    }
    SECTION("weighted loss of a perfect prediction is still zero") {
        Tape tape;
        Value logits = tape.constant(Tensor({1, 2}, {70.0, 0.0}));
        const std::vector<double> w{5.0, 0.5};
        const Tensor& l = tape.value(tape.cross_entropy(logits, std::vector<int>{0}, w));
        REQUIRE(std::abs(l[0]) < 1e-12);
    }
    SECTION("empty class is rejected") {
        const std::vector<std::int64_t> counts{4, 0};
        REQUIRE_THROWS_AS(inverse_frequency_weights(counts), std::invalid_argument);
    }
}

TEST_CASE("task-2 group indexing", "[robust]") {
    REQUIRE(group_index_task2(0, 0) == 0);
    REQUIRE(group_index_task2(1, 3) == 7);
    REQUIRE(group_index_task2(1, 3, /*paper_literal=*/true) == 5);  // 2j + k as published

    SECTION("default layout is a bijection onto 0..7") {
        std::set<int> ids;
        for (int j = 0; j < 2; ++j) {
            for (int k = 0; k < 4; ++k) ids.insert(group_index_task2(j, k));
        }
        REQUIRE(ids == std::set<int>{0, 1, 2, 3, 4, 5, 6, 7});
    }
    SECTION("the published formula collides") {
        std::set<int> ids;
        int count = 0;
        for (int j = 0; j < 2; ++j) {
            for (int k = 0; k < 4; ++k) {
                ids.insert(group_index_task2(j, k, true));
                ++count;
            }
        }
        REQUIRE(static_cast<int>(ids.size()) < count);  // e.g. (1,0) and (0,2) both map to 2
        REQUIRE(group_index_task2(1, 0, true) == group_index_task2(0, 2, true));
    }
    REQUIRE_THROWS_AS(group_index_task2(2, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(group_index_task2(0, 4), std::invalid_argument);
}
