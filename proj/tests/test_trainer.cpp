#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gdro/config_json.hpp"
#include "gdro/data.hpp"
#include "gdro/metrics.hpp"
#include "gdro/trainer.hpp"

using namespace gdro;

namespace {

// Small, fast configuration shared by the trainer tests.
RunConfig tiny_run(int sites = 2, int classes = 2, int per_cell = 10) {
    RunConfig c;
    c.model.input_dim = 8;
    c.model.embed_dim = 8;
    c.model.slices = 4;
    c.model.num_classes = classes;
    c.model.aggregator = AggregatorKind::mean;
    c.model.dropout_p = 0.3;
    c.data = balanced_config(sites, classes, per_cell, 4);
    c.data.slices = 4;
    c.data.input_dim = 8;
    c.base_lr = 3e-3;
    c.max_epochs = 5;
    c.patience = 10;
    c.batch_size = 8;
    c.dro.update_mode = UpdateMode::kl_mirror;
    c.dro.alpha = 0.5;
    return c;
}

}  // namespace

TEST_CASE("training is deterministic in config and seed", "[trainer]") {
    RunConfig c = tiny_run();
    c.objective = Objective::gdro;
    const RunResult a = train(c, 3);
    const RunResult b = train(c, 3);
    REQUIRE(metrics_to_json(a.final_metrics).dump() == metrics_to_json(b.final_metrics).dump());
    REQUIRE(a.history.steps.size() == b.history.steps.size());
    for (std::size_t i = 0; i < a.history.steps.size(); ++i) {
        REQUIRE(a.history.steps[i].loss == b.history.steps[i].loss);
        REQUIRE(a.history.steps[i].weights == b.history.steps[i].weights);
    }
    const RunResult other = train(c, 4);
    REQUIRE(metrics_to_json(other.final_metrics).dump() != metrics_to_json(a.final_metrics).dump());
}

TEST_CASE("gdro on one group matches unit-weight cross-entropy bitwise", "[trainer]") {
    // One group, balanced classes: the inverse-frequency weights are exactly
    // one and the group mean is the batch mean, so the two objectives must
    // share the whole numeric path including RNG consumption.
    RunConfig gdro_cfg = tiny_run(/*sites=*/1);
    gdro_cfg.objective = Objective::gdro;
    RunConfig wce_cfg = gdro_cfg;
    wce_cfg.objective = Objective::wce;

    const RunResult g = train(gdro_cfg, 5);
    const RunResult w = train(wce_cfg, 5);

    const int first_epoch_steps = static_cast<int>((gdro_cfg.data.scaled(10) * 2 + gdro_cfg.batch_size - 1) / gdro_cfg.batch_size);
    REQUIRE(first_epoch_steps > 0);
    for (int i = 0; i < first_epoch_steps; ++i) {
        REQUIRE(g.history.steps[static_cast<std::size_t>(i)].loss == w.history.steps[static_cast<std::size_t>(i)].loss);
    }
    // The shared path extends to the entire run.
    REQUIRE(metrics_to_json(g.final_metrics).dump() == metrics_to_json(w.final_metrics).dump());
}

TEST_CASE("identical group distributions keep weights near uniform", "[trainer]") {
    RunConfig c = tiny_run(/*sites=*/4, 2, 8);
    c.objective = Objective::gdro;
    c.data.site_shift_scale = 0.0;  // all groups identically distributed
    c.max_epochs = 8;
    const RunResult r = train(c, 11);
    for (const auto& step : r.history.steps) {
        for (double w : step.weights) REQUIRE(std::abs(w - 0.25) < 0.05);
    }
}

TEST_CASE("weight trajectory replays from logged losses alone", "[trainer]") {
    RunConfig c = tiny_run(/*sites=*/3, 2, 6);
    c.data.train_counts = {{9, 2}, {4, 4}, {1, 8}};  // imbalanced so weights move
    c.data.val_counts = {{2, 2}, {2, 2}, {2, 2}};
    c.data.num_groups = 3;
    c.objective = Objective::gdro;
    c.dro.alpha = 0.3;
    const RunResult r = train(c, 17);

    GroupWeights w = GroupWeights::uniform(r.num_groups);
    for (const auto& step : r.history.steps) {
        GroupLossReport report;
        report.losses = step.group_losses;
        report.counts.assign(step.group_losses.size(), 0);
        w = update_weights(w, report, c.dro);
        REQUIRE(w.w == step.weights);  // bitwise
    }
}

TEST_CASE("separable data trains to perfect macro F1", "[trainer]") {
    RunConfig c = tiny_run(2, 2, 12);
    c.objective = Objective::gdro;
    c.data.noise_sigma = 0.0;
    c.data.site_shift_scale = 0.0;
    c.data.class_separation = 3.0;
    c.max_epochs = 20;
    c.patience = 20;
    const RunResult r = train(c, 1);
    auto [train_ds, val_ds] = generate(c.data);
    ModelParams model = r.model;
    const MetricsReport on_train = evaluate(model, train_ds, Grouping::site);
    REQUIRE(on_train.challenge_p == 1.0);
}

TEST_CASE("divergence aborts with the offending step", "[trainer]") {
    RunConfig c = tiny_run();
    c.objective = Objective::wce;
    c.base_lr = 1e12;
    c.adamw.weight_decay = 1.0;  // decay factor (1 - lr*wd) explodes the weights
    c.max_epochs = 50;
    try {
        train(c, 0);
        FAIL("expected divergence");
    } catch (const TrainingDivergence& e) {
        REQUIRE(e.step() >= 0);
        REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("step"));
    }
}

TEST_CASE("early stopping bounds the epoch count", "[trainer]") {
    RunConfig c = tiny_run();
    // nearly unlearnable data: validation loss plateaus, then patience fires
    c.data.class_separation = 0.3;
    c.data.noise_sigma = 2.0;
    c.max_epochs = 200;
    c.patience = 3;
    const RunResult r = train(c, 2);
    REQUIRE(static_cast<int>(r.history.epochs.size()) < 200);
    REQUIRE(r.history.best_epoch >= 0);
    // history lengths consistent with executed steps
    const int batches = static_cast<int>(r.history.steps.size()) / static_cast<int>(r.history.epochs.size());
    REQUIRE(static_cast<int>(r.history.steps.size()) == batches * static_cast<int>(r.history.epochs.size()));
}

TEST_CASE("alpha sweep isolates failing cells", "[trainer]") {
    RunConfig c = tiny_run();
    c.max_epochs = 2;
    const std::vector<double> alphas{0.1, -1.0};  // the second cell is invalid
    const std::vector<std::uint64_t> seeds{0};
    const auto cells = sweep_alpha(c, alphas, seeds);
    REQUIRE(cells.size() == 2);
    REQUIRE(cells[0].ok);
    REQUIRE_FALSE(cells[1].ok);
    REQUIRE_FALSE(cells[1].error.empty());

    SECTION("single-cell summary equals that cell") {
        const std::vector<double> one{0.1};
        const auto single = sweep_alpha(c, one, seeds);
        std::vector<double> ps{single[0].metrics.challenge_p};
        REQUIRE(summarise(ps).mean == single[0].metrics.challenge_p);
        REQUIRE(summarise(ps).stddev == 0.0);
    }
}

TEST_CASE("objective comparison table has the expected rows", "[trainer]") {
    RunConfig c = tiny_run();
    c.max_epochs = 2;
    c.alphas = {0.0, 0.5};
    const std::vector<std::uint64_t> seeds{0};
    const auto rows = compare_objectives(c, seeds);
    REQUIRE(rows.size() == 4);
    REQUIRE(rows[0].name == "wce");
    REQUIRE(rows[1].name == "focal");
    REQUIRE(rows[2].name == "gdro@alpha=0");
    REQUIRE(rows[3].name == "gdro@alpha=0.5");
    for (const auto& r : rows) {
        REQUIRE(r.p.n == 1);
        REQUIRE(r.p.stddev == 0.0);  // single seed
        REQUIRE(r.p.mean >= 0.0);
        REQUIRE(r.p.mean <= 1.0);
    }
}

TEST_CASE("run config json round trip", "[trainer]") {
    RunConfig c = tiny_run();
    c.objective = Objective::focal;
    c.gamma = 2.0;
    c.seeds = {1, 2, 3};
    nlohmann::json j = c;
    RunConfig back;
    from_json(j, back);
    REQUIRE(back.objective == Objective::focal);
    REQUIRE(back.seeds == c.seeds);
    REQUIRE(back.model.embed_dim == c.model.embed_dim);
    REQUIRE(back.data.train_counts == c.data.train_counts);
    REQUIRE(nlohmann::json(back).dump() == j.dump());

    SECTION("dotted overrides") {
        nlohmann::json doc = c;
        apply_override(doc, "model.embed_dim=16");
        apply_override(doc, "dro.update_mode=vanilla_eg");
        RunConfig patched;
        from_json(doc, patched);
        REQUIRE(patched.model.embed_dim == 16);
        REQUIRE(patched.dro.update_mode == UpdateMode::vanilla_eg);
        REQUIRE_THROWS_AS(apply_override(doc, "model.no_such_key=1"), ConfigError);
        REQUIRE_THROWS_AS(apply_override(doc, "nonsense"), ConfigError);
    }
    SECTION("unknown enum value names the key") {
        nlohmann::json doc = c;
        doc["objective"] = "sgd";
        RunConfig bad;
        REQUIRE_THROWS_WITH(from_json(doc, bad), Catch::Matchers::ContainsSubstring("objective"));
    }
}
