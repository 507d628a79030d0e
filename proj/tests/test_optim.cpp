#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "gdro/optim.hpp"

using namespace gdro;

TEST_CASE("learning-rate schedule", "[optim]") {
    ScheduleConfig cfg{1e-3, 5, 105};

    SECTION("linear warm-up ends at base_lr") {
        REQUIRE(lr_at(0, cfg) == Catch::Approx(1e-3 / 5.0).margin(1e-18));
        REQUIRE(lr_at(cfg.warmup_steps - 1, cfg) == Catch::Approx(cfg.base_lr).margin(1e-18));
    }
    SECTION("cosine midpoint is half the base rate") {
        const int mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) / 2;
        REQUIRE(lr_at(mid, cfg) == Catch::Approx(0.5 * cfg.base_lr).margin(1e-12));
    }
    SECTION("continuous at the warm-up junction and decays toward zero") {
        REQUIRE(lr_at(cfg.warmup_steps, cfg) <= cfg.base_lr);
        REQUIRE(lr_at(cfg.warmup_steps, cfg) == Catch::Approx(cfg.base_lr).margin(cfg.base_lr * 1e-3));
        const double last = lr_at(cfg.total_steps - 1, cfg);
        const double expected = cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * 99.0 / 100.0));
        REQUIRE(last == Catch::Approx(expected).margin(1e-15));
        REQUIRE(last < 0.01 * cfg.base_lr);
        for (int s = 0; s < cfg.total_steps; ++s) REQUIRE(lr_at(s, cfg) >= 0.0);
    }
    SECTION("out-of-range step is rejected") {
        REQUIRE_THROWS_AS(lr_at(-1, cfg), std::invalid_argument);
        REQUIRE_THROWS_AS(lr_at(cfg.total_steps, cfg), std::invalid_argument);
    }
    SECTION("warmup must fit inside total steps") {
        REQUIRE_THROWS_AS(lr_at(0, ScheduleConfig{1e-3, 10, 10}), std::invalid_argument);
    }
}

TEST_CASE("adamw update", "[optim]") {
    SECTION("zero gradient with no decay is the identity") {
        ParamSet ps;
        ps.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
        AdamWConfig cfg;
        cfg.weight_decay = 0.0;
        AdamW opt(ps, cfg);
        ps.zero_grad();
        opt.step(0.1);
        REQUIRE(ps.at("w").value.raw() == std::vector<double>{1.0, -2.0, 0.5});
    }
    SECTION("first step on a scalar matches the hand-evaluated update") {
        ParamSet ps;
        ps.add("w", Tensor({1}, {1.0}));
        AdamWConfig cfg;
        cfg.weight_decay = 0.0;
        AdamW opt(ps, cfg);
        ps.at("w").grad[0] = 1.0;
        opt.step(0.1);
        // m_hat = v_hat = 1 after bias correction, so theta = 1 - 0.1/(1 + eps)
        const double expected = 1.0 - 0.1 * (1.0 / (1.0 + cfg.eps));
        REQUIRE(ps.at("w").value[0] == Catch::Approx(expected).margin(1e-15));
        REQUIRE(ps.at("w").value[0] == Catch::Approx(0.9).margin(1e-7));
        REQUIRE(opt.t() == 1);
    }
    SECTION("decoupled decay scales the parameter by (1 - lr*lambda)") {
        ParamSet ps;
        ps.add("w", Tensor({2}, {4.0, -4.0}));
        AdamWConfig cfg;  // weight_decay 1e-4
        AdamW opt(ps, cfg);
        ps.zero_grad();
        opt.step(0.1);
        REQUIRE(ps.at("w").value[0] == Catch::Approx(4.0 * (1.0 - 1e-5)).margin(1e-15));
        REQUIRE(ps.at("w").value[1] == Catch::Approx(-4.0 * (1.0 - 1e-5)).margin(1e-15));
    }
}

TEST_CASE("early stopping", "[optim]") {
    ParamSet ps;
    ps.add("w", Tensor({1}, {0.0}));

    SECTION("monotonically decreasing losses never stop") {
        EarlyStopping es(10);
        for (int e = 0; e < 50; ++e) {
            ps.at("w").value[0] = e;
            REQUIRE_FALSE(es.update(1.0 / (e + 1), ps));
        }
        REQUIRE(es.epochs_since_improvement() == 0);
    }
    SECTION("stops after exactly patience non-improvements, keeping the best snapshot") {
        EarlyStopping es(10);
        ps.at("w").value[0] = 42.0;
        REQUIRE_FALSE(es.update(1.0, ps));  // best
        ps.at("w").value[0] = -1.0;
        for (int e = 0; e < 9; ++e) REQUIRE_FALSE(es.update(2.0 + e, ps));
        REQUIRE(es.update(5.0, ps));  // tenth non-improvement
        REQUIRE(es.best_loss() == 1.0);
        es.restore_best(ps);
        REQUIRE(ps.at("w").value[0] == 42.0);
    }
    SECTION("a tie counts as no improvement") {
        EarlyStopping es(2);
        REQUIRE_FALSE(es.update(1.0, ps));
        REQUIRE_FALSE(es.update(1.0, ps));
        REQUIRE(es.update(1.0, ps));
    }
    SECTION("NaN counts as no improvement") {
        EarlyStopping es(2);
        REQUIRE_FALSE(es.update(1.0, ps));
        REQUIRE_FALSE(es.update(std::numeric_limits<double>::quiet_NaN(), ps));
        REQUIRE(es.update(std::numeric_limits<double>::quiet_NaN(), ps));
        REQUIRE(es.best_loss() == 1.0);
    }
    SECTION("snapshot always holds the minimum observed loss") {
        EarlyStopping es(100);
        const double losses[] = {3.0, 1.5, 2.0, 0.7, 0.9, 4.0};
        double best = std::numeric_limits<double>::infinity();
        int at = -1;
        for (int i = 0; i < 6; ++i) {
            ps.at("w").value[0] = i;
            es.update(losses[i], ps);
            if (losses[i] < best) {
                best = losses[i];
                at = i;
            }
        }
        REQUIRE(es.best_loss() == best);
        es.restore_best(ps);
        REQUIRE(ps.at("w").value[0] == at);
    }
}
