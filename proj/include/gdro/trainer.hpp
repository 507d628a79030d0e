#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gdro/data.hpp"
#include "gdro/metrics.hpp"
#include "gdro/model.hpp"
#include "gdro/optim.hpp"
#include "gdro/robust.hpp"

namespace gdro {

enum class Objective { gdro, wce, focal };

inline const char* objective_name(Objective o) {
    switch (o) {
        case Objective::gdro: return "gdro";
        case Objective::wce: return "wce";
        case Objective::focal: return "focal";
    }
    return "?";
}

/// Full experiment recipe: model, objective, optimisation schedule, data
/// source, and the sweep grid.
struct RunConfig {
    ModelConfig model;
    DroConfig dro;
    Objective objective = Objective::gdro;
    double gamma = 2.0;  // focal only
    double base_lr = 1e-4;
    int warmup_steps = 5;
    int batch_size = 8;
    int max_epochs = 100;
    int patience = 10;
    AdamWConfig adamw;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds;  // sweep/compare replicas; empty means {seed}
    GenConfig data;
    std::string train_path;  // when set (with val_path), datasets are loaded not generated
    std::string val_path;
    std::optional<Grouping> eval_grouping;  // default follows the data regime
    std::vector<double> alphas = {0.0, 0.1, 0.3, 0.5, 1.0};

    Grouping grouping() const {
        if (eval_grouping) return *eval_grouping;
        return data.regime == Regime::task1_sites ? Grouping::site : Grouping::gender;
    }

    std::vector<std::uint64_t> seed_list() const { return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds; }

    void validate() const {
        model.validate();
        if (objective == Objective::gdro) dro.validate();
        if (objective == Objective::focal && !(gamma >= 0.0)) throw std::invalid_argument("gamma must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
        if (patience < 1) throw std::invalid_argument("patience must be >= 1");
        if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
        if (train_path.empty() != val_path.empty()) {
            throw std::invalid_argument("train_path and val_path must be set together");
        }
        if (train_path.empty()) data.validate();
    }
};

struct StepRecord {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::vector<double> group_losses;
    std::vector<double> weights;
    double kl = 0.0;
};

struct EpochRecord {
    int epoch = 0;
    double val_loss = 0.0;
    MetricsReport metrics;
};

struct RunHistory {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
};

struct RunResult {
    ModelParams model;
    RunHistory history;
    MetricsReport final_metrics;
    std::pair<int, int> minority_cell{0, 0};  // (attribute value, class) with the fewest training samples
    int num_groups = 0;
};

/// Non-finite training loss; carries the offending step.
class TrainingDivergence : public std::runtime_error {
public:
    TrainingDivergence(int step, double loss)
        : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
          step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

namespace detail {

inline std::pair<GroupedDataset, GroupedDataset> load_datasets(const RunConfig& config) {
    if (!config.train_path.empty()) {
        return {load_jsonl(config.train_path), load_jsonl(config.val_path)};
    }
    return generate(config.data);
}

inline int dataset_group_count(const RunConfig& config, const GroupedDataset& train, const GroupedDataset& val) {
    if (config.train_path.empty()) return config.data.num_groups;
    return std::max(train.max_group(), val.max_group()) + 1;
}

inline std::pair<int, int> find_minority_cell(const GroupedDataset& train, Grouping grouping) {
    const std::string key = grouping_name(grouping);
    std::map<std::pair<int, int>, int> counts;
    for (const auto& s : train.samples) {
        const auto it = s.attrs.find(key);
        if (it == s.attrs.end()) throw std::invalid_argument("dataset sample missing \"" + key + "\" attribute");
        ++counts[{it->second, s.label}];
    }
    std::pair<int, int> best{0, 0};
    int best_count = std::numeric_limits<int>::max();
    for (const auto& [cell, n] : counts) {
        if (n < best_count) {
            best_count = n;
            best = cell;
        }
    }
    return best;
}

/// Plain unweighted mean cross-entropy over a dataset in eval mode; the
/// early-stopping monitor, identical across objectives.
inline double mean_cross_entropy(ModelParams& model, const GroupedDataset& ds, int chunk = 64) {
    if (ds.size() == 0) return 0.0;
    double total = 0.0;
    for (int start = 0; start < ds.size(); start += chunk) {
        const int b = std::min(chunk, ds.size() - start);
        Tensor features(Shape{b, model.config.slices, model.config.input_dim});
        std::vector<int> labels(static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) {
            const auto& s = ds.samples[static_cast<std::size_t>(start + i)];
            std::copy(s.features.raw().begin(), s.features.raw().end(),
                      features.raw().begin() + static_cast<std::int64_t>(i) * s.features.numel());
            labels[static_cast<std::size_t>(i)] = s.label;
        }
        Tape tape;
        Value logits = forward(tape, model, features, /*train_mode=*/false);
        const Tensor& losses = tape.value(tape.cross_entropy(logits, labels));
        for (int i = 0; i < b; ++i) total += losses[i];
    }
    return total / static_cast<double>(ds.size());
}

}  // namespace detail

/// One deterministic training run. Per batch: forward, per-sample losses,
/// detached group losses, weight update (GDRO only, before the gradient
/// step), total loss, backward, AdamW step. Early stopping monitors the
/// unweighted validation cross-entropy; the returned parameters are the
/// best-validation snapshot.
inline RunResult train(const RunConfig& config, std::uint64_t seed) {
    config.validate();
    auto [train_ds, val_ds] = detail::load_datasets(config);
    if (train_ds.size() == 0) throw std::invalid_argument("train: empty training split");

    const Grouping grouping = config.grouping();
    const int num_groups = detail::dataset_group_count(config, train_ds, val_ds);
    const auto minority_cell = detail::find_minority_cell(train_ds, grouping);

    RunResult result;
    result.model = init_params(config.model, seed);
    result.minority_cell = minority_cell;
    result.num_groups = num_groups;
    ModelParams& model = result.model;

    std::vector<double> wce_weights;
    if (config.objective == Objective::wce) {
        const auto counts = train_ds.class_counts(config.model.num_classes);
        wce_weights = inverse_frequency_weights(counts);
    }

    const int batches_per_epoch = (train_ds.size() + config.batch_size - 1) / config.batch_size;
    const int total_steps = config.max_epochs * batches_per_epoch;
    // Very short runs get a shortened warm-up instead of an invalid schedule.
    ScheduleConfig schedule{config.base_lr, std::min(config.warmup_steps, total_steps - 1), total_steps};
    schedule.validate();

    AdamW opt(model.params, config.adamw);
    EarlyStopping stopping(config.patience);
    GroupWeights weights = GroupWeights::uniform(num_groups);
    Rng dropout_rng(mix64(seed, 0x64726f70ULL));          // "drop" stream
    const std::uint64_t data_seed = mix64(seed, 0x64617461ULL);  // "data" stream

    int step = 0;
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        for (const VolumeBatch& batch : batch_iter(train_ds, config.batch_size, data_seed, epoch)) {
            Tape tape;
            Value logits = forward(tape, model, batch.features, /*train_mode=*/true, &dropout_rng);

            Value per_sample{};
            switch (config.objective) {
                case Objective::gdro: per_sample = tape.cross_entropy(logits, batch.labels); break;
                case Objective::wce: per_sample = tape.cross_entropy(logits, batch.labels, wce_weights); break;
                case Objective::focal: per_sample = focal_loss(tape, logits, batch.labels, config.gamma); break;
            }
            const GroupLossReport report = group_losses(tape.value(per_sample).raw(), batch.groups, num_groups);

            Value loss{};
            double kl = 0.0;
            if (config.objective == Objective::gdro) {
                weights = update_weights(weights, report, config.dro);
                kl = kl_divergence(weights);
                Value lvec = group_loss_nodes(tape, per_sample, batch.groups, num_groups);
                loss = total_loss(tape, lvec, weights, config.dro.alpha);
            } else {
                loss = tape.reduce_mean(per_sample);
            }

            const double loss_value = tape.value(loss).item();
            if (!std::isfinite(loss_value)) throw TrainingDivergence(step, loss_value);

            const double lr = lr_at(step, schedule);
            model.params.zero_grad();
            tape.backward(loss);
            opt.step(lr);

            result.history.steps.push_back(StepRecord{step, loss_value, lr, report.losses, weights.w, kl});
            ++step;
        }

        EpochRecord er;
        er.epoch = epoch;
        er.val_loss = detail::mean_cross_entropy(model, val_ds);
        er.metrics = evaluate(model, val_ds, grouping, minority_cell);
        result.history.epochs.push_back(std::move(er));

        const bool stop = stopping.update(result.history.epochs.back().val_loss, model.params);
        if (result.history.epochs.back().val_loss < result.history.best_val_loss) {
            result.history.best_val_loss = result.history.epochs.back().val_loss;
            result.history.best_epoch = epoch;
        }
        if (stop) break;
    }

    if (stopping.has_snapshot()) stopping.restore_best(model.params);
    result.final_metrics = evaluate(model, val_ds, grouping, minority_cell);
    return result;
}

// ---- sweep / comparison ----------------------------------------------------

struct SweepCell {
    double alpha = 0.0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    MetricsReport metrics;
};

/// Trains one cell per (alpha, seed), GDRO objective; one failed cell does
/// not abort the sweep.
inline std::vector<SweepCell> sweep_alpha(const RunConfig& config, std::span<const double> alphas,
                                          std::span<const std::uint64_t> seeds) {
    if (alphas.empty() || seeds.empty()) throw std::invalid_argument("sweep_alpha: alphas and seeds must be non-empty");
    std::vector<SweepCell> cells;
    for (double alpha : alphas) {
        for (std::uint64_t seed : seeds) {
            SweepCell cell;
            cell.alpha = alpha;
            cell.seed = seed;
            RunConfig c = config;
            c.objective = Objective::gdro;
            c.dro.alpha = alpha;
            try {
                cell.metrics = train(c, seed).final_metrics;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;
    int n = 0;
};

inline Summary summarise(std::span<const double> xs) {
    Summary s;
    s.n = static_cast<int>(xs.size());
    if (s.n == 0) return s;
    for (double x : xs) s.mean += x;
    s.mean /= s.n;
    for (double x : xs) s.stddev += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(s.stddev / s.n);
    return s;
}

struct CompareRow {
    std::string name;
    Summary p;
    Summary worst_group;
    Summary minority_cell;
};

/// One training per (objective, seed): the WCE and focal baselines plus GDRO
/// at every alpha in the config's grid.
inline std::vector<CompareRow> compare_objectives(const RunConfig& config, std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) throw std::invalid_argument("compare_objectives: seeds must be non-empty");
    std::vector<CompareRow> rows;
    auto run_row = [&](const std::string& name, const RunConfig& c) {
        std::vector<double> p, worst, minority;
        for (std::uint64_t seed : seeds) {
            const MetricsReport m = train(c, seed).final_metrics;
            p.push_back(m.challenge_p);
            worst.push_back(m.worst_group_macro);
            minority.push_back(m.minority_cell_f1.value_or(0.0));
        }
        rows.push_back(CompareRow{name, summarise(p), summarise(worst), summarise(minority)});
    };

    RunConfig wce = config;
    wce.objective = Objective::wce;
    run_row("wce", wce);

    RunConfig focal = config;
    focal.objective = Objective::focal;
    run_row("focal", focal);

    for (double alpha : config.alphas) {
        RunConfig g = config;
        g.objective = Objective::gdro;
        g.dro.alpha = alpha;
        std::ostringstream name;
        name << "gdro@alpha=" << alpha;
        run_row(name.str(), g);
    }
    return rows;
}

// ---- history persistence ----------------------------------------------------

/// Per-step trajectory as JSONL: {"step", "loss", "lr", "w", "group_losses",
/// "kl"}. Weight entries round-trip exactly, so a run can be replayed from
/// its own log.
inline void write_trajectory_jsonl(const RunHistory& history, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_trajectory_jsonl: cannot open " + path.string());
    for (const auto& s : history.steps) {
        nlohmann::json j{{"step", s.step}, {"loss", s.loss}, {"lr", s.lr},
                         {"w", s.weights}, {"group_losses", s.group_losses}, {"kl", s.kl}};
        out << j.dump() << '\n';
    }
}

inline nlohmann::json epochs_to_json(const RunHistory& history) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : history.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"val_loss", e.val_loss}, {"metrics", metrics_to_json(e.metrics)}});
    }
    return nlohmann::json{{"epochs", std::move(epochs)},
                          {"best_epoch", history.best_epoch},
                          {"best_val_loss", history.best_val_loss},
                          {"weight_update_order", "weights_updated_before_gradient_step"}};
}

inline void write_sweep_cells_csv(std::span<const SweepCell> cells, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_sweep_cells_csv: cannot open " + path.string());
    out << "alpha,seed,group,macro_f1,challenge_p,worst_group_macro_f1,minority_cell_f1,ok,error\n";
    for (const auto& c : cells) {
        if (!c.ok) {
            out << c.alpha << ',' << c.seed << ",,,,,," << "0," << '"' << c.error << '"' << '\n';
            continue;
        }
        for (const auto& g : c.metrics.groups) {
            out << c.alpha << ',' << c.seed << ',' << g.group_id << ',' << g.macro << ',' << c.metrics.challenge_p
                << ',' << c.metrics.worst_group_macro << ',' << c.metrics.minority_cell_f1.value_or(0.0) << ",1,\n";
        }
    }
}

inline void write_sweep_summary_csv(std::span<const SweepCell> cells, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_sweep_summary_csv: cannot open " + path.string());
    out << "alpha,seeds,mean_challenge_p,std_challenge_p,mean_worst_group_f1,std_worst_group_f1,"
           "mean_minority_cell_f1,std_minority_cell_f1\n";
    std::vector<double> alphas;
    for (const auto& c : cells) {
        if (std::find(alphas.begin(), alphas.end(), c.alpha) == alphas.end()) alphas.push_back(c.alpha);
    }
    for (double a : alphas) {
        std::vector<double> p, worst, minority;
        for (const auto& c : cells) {
            if (c.alpha == a && c.ok) {
                p.push_back(c.metrics.challenge_p);
                worst.push_back(c.metrics.worst_group_macro);
                minority.push_back(c.metrics.minority_cell_f1.value_or(0.0));
            }
        }
        const Summary sp = summarise(p), sw = summarise(worst), sm = summarise(minority);
        out << a << ',' << sp.n << ',' << sp.mean << ',' << sp.stddev << ',' << sw.mean << ',' << sw.stddev << ','
            << sm.mean << ',' << sm.stddev << '\n';
    }
}

inline void write_compare_csv(std::span<const CompareRow> rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_compare_csv: cannot open " + path.string());
    out << "objective,seeds,mean_challenge_p,std_challenge_p,mean_worst_group_f1,std_worst_group_f1,"
           "mean_minority_cell_f1,std_minority_cell_f1\n";
    for (const auto& r : rows) {
        out << r.name << ',' << r.p.n << ',' << r.p.mean << ',' << r.p.stddev << ',' << r.worst_group.mean << ','
            << r.worst_group.stddev << ',' << r.minority_cell.mean << ',' << r.minority_cell.stddev << '\n';
    }
}

}  // namespace gdro
