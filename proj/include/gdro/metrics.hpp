#pragma once

#include <algorithm>
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
#include "gdro/model.hpp"

namespace gdro {

/// Square count matrix, rows = true class, columns = predicted class.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes) : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
        if (classes <= 0) throw std::invalid_argument("confusion matrix needs at least one class");
    }

    void add(int truth, int predicted, std::int64_t n = 1) {
        if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_) {
            throw std::invalid_argument("confusion add: class out of range");
        }
        counts_[static_cast<std::size_t>(truth) * classes_ + predicted] += n;
    }

    std::int64_t at(int truth, int predicted) const {
        return counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
    }

    int classes() const { return classes_; }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto v : counts_) t += v;
        return t;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.classes_ != classes_) throw std::invalid_argument("confusion merge: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

private:
    int classes_;
    std::vector<std::int64_t> counts_;
};

/// F1 = 2TP / (2TP + FP + FN) per class, 0 when the denominator is 0.
inline std::vector<double> f1_per_class(const ConfusionMatrix& cm) {
    const int c = cm.classes();
    std::vector<double> f1(static_cast<std::size_t>(c), 0.0);
    for (int k = 0; k < c; ++k) {
        const std::int64_t tp = cm.at(k, k);
        std::int64_t fp = 0, fn = 0;
        for (int j = 0; j < c; ++j) {
            if (j == k) continue;
            fp += cm.at(j, k);
            fn += cm.at(k, j);
        }
        const std::int64_t denom = 2 * tp + fp + fn;
        f1[static_cast<std::size_t>(k)] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    return f1;
}

inline double macro_f1(const ConfusionMatrix& cm) {
    const auto f1 = f1_per_class(cm);
    double sum = 0.0;
    for (double v : f1) sum += v;
    return sum / static_cast<double>(f1.size());
}

/// Task 1 challenge score: mean macro F1 over the four centres.
inline double challenge_p_task1(std::span<const double> per_centre_macro) {
    if (per_centre_macro.size() != 4) {
        throw std::invalid_argument("challenge_p_task1: expected 4 per-centre values, got " +
                                    std::to_string(per_centre_macro.size()));
    }
    double sum = 0.0;
    for (double v : per_centre_macro) sum += v;
    return sum / 4.0;
}

/// Task 2 challenge score: mean of the per-gender macro F1 values.
inline double challenge_p_task2(double male_macro, double female_macro) {
    return 0.5 * (male_macro + female_macro);
}

enum class Grouping { site, gender };

inline const char* grouping_name(Grouping g) { return g == Grouping::site ? "site" : "gender"; }

struct GroupMetrics {
    int group_id = 0;
    ConfusionMatrix cm{1};
    std::vector<double> f1;
    double macro = 0.0;
};

struct MetricsReport {
    Grouping grouping = Grouping::site;
    int num_classes = 0;
    std::vector<GroupMetrics> groups;
    double challenge_p = 0.0;
    double worst_group_macro = 0.0;
    double max_gap = 0.0;  // largest pairwise difference of group macro F1
    std::optional<double> minority_cell_f1;  // per-class F1 of the designated (group,class) cell
};

/// Argmax with ties broken toward the lowest class index, so metric runs are
/// bit-reproducible.
inline int argmax_row(const double* row, int c) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

/// Eval-mode predictions for a whole dataset, in dataset order.
inline std::vector<int> predict(ModelParams& model, const GroupedDataset& dataset, int chunk = 64) {
    std::vector<int> preds;
    preds.reserve(dataset.samples.size());
    const int c = model.config.num_classes;
    for (int start = 0; start < dataset.size(); start += chunk) {
        const int b = std::min(chunk, dataset.size() - start);
        Tensor features(Shape{b, model.config.slices, model.config.input_dim});
        for (int i = 0; i < b; ++i) {
            const auto& s = dataset.samples[static_cast<std::size_t>(start + i)];
            if (s.features.extent(0) != model.config.slices || s.features.extent(1) != model.config.input_dim) {
                throw std::invalid_argument("predict: sample features " + shape_str(s.features.shape()) +
                                            " do not match model config");
            }
            std::copy(s.features.raw().begin(), s.features.raw().end(),
                      features.raw().begin() + static_cast<std::int64_t>(i) * s.features.numel());
        }
        Tape tape;
        const Tensor& logits = tape.value(forward(tape, model, features, /*train_mode=*/false));
        for (int i = 0; i < b; ++i) preds.push_back(argmax_row(logits.data() + static_cast<std::int64_t>(i) * c, c));
    }
    return preds;
}

/// Confusion-matrix evaluation of precomputed predictions, grouped by the
/// named attribute ("site" or "gender"). The challenge score is the mean of
/// the per-group macro F1 values: for the four-centre grouping this is the
/// task-1 score, for the two-gender grouping the task-2 score.
/// minority_cell, when given, names an (attribute value, class) pair whose
/// per-class F1 is reported separately.
inline MetricsReport evaluate_predictions(const GroupedDataset& dataset, std::span<const int> preds, int num_classes,
                                          Grouping grouping,
                                          std::optional<std::pair<int, int>> minority_cell = std::nullopt) {
    const int c = num_classes;
    if (preds.size() != dataset.samples.size()) {
        throw std::invalid_argument("evaluate: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(dataset.samples.size()) + " samples");
    }
    for (const auto& s : dataset.samples) {
        if (s.label < 0 || s.label >= c) {
            throw std::invalid_argument("evaluate: dataset label " + std::to_string(s.label) +
                                        " outside the model's " + std::to_string(c) + " classes");
        }
    }
    const std::string key = grouping_name(grouping);
    int num_groups = 0;
    for (const auto& s : dataset.samples) {
        const auto it = s.attrs.find(key);
        if (it == s.attrs.end()) throw std::invalid_argument("evaluate: sample missing \"" + key + "\" attribute");
        num_groups = std::max(num_groups, it->second + 1);
    }
    if (num_groups == 0) throw std::invalid_argument("evaluate: empty dataset");

    MetricsReport report;
    report.grouping = grouping;
    report.num_classes = c;
    for (int g = 0; g < num_groups; ++g) report.groups.push_back(GroupMetrics{g, ConfusionMatrix(c), {}, 0.0});
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const auto& s = dataset.samples[i];
        report.groups[static_cast<std::size_t>(s.attrs.at(key))].cm.add(s.label, preds[i]);
    }

    std::vector<double> macros;
    for (auto& g : report.groups) {
        g.f1 = f1_per_class(g.cm);
        g.macro = macro_f1(g.cm);
        macros.push_back(g.macro);
    }
    double macro_sum = 0.0;
    for (double m : macros) macro_sum += m;
    report.challenge_p = macro_sum / static_cast<double>(macros.size());
    report.worst_group_macro = *std::min_element(macros.begin(), macros.end());
    report.max_gap = *std::max_element(macros.begin(), macros.end()) - report.worst_group_macro;
    if (minority_cell) {
        const auto [mg, mc] = *minority_cell;
        if (mg < 0 || mg >= num_groups || mc < 0 || mc >= c) {
            throw std::invalid_argument("evaluate: minority cell out of range");
        }
        report.minority_cell_f1 = report.groups[static_cast<std::size_t>(mg)].f1[static_cast<std::size_t>(mc)];
    }
    return report;
}

/// Eval-mode forward, argmax predictions, grouped confusion statistics.
inline MetricsReport evaluate(ModelParams& model, const GroupedDataset& dataset, Grouping grouping,
                              std::optional<std::pair<int, int>> minority_cell = std::nullopt) {
    const std::vector<int> preds = predict(model, dataset);
    return evaluate_predictions(dataset, preds, model.config.num_classes, grouping, minority_cell);
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups) {
        nlohmann::json cm = nlohmann::json::array();
        for (int t = 0; t < r.num_classes; ++t) {
            nlohmann::json row = nlohmann::json::array();
            for (int p = 0; p < r.num_classes; ++p) row.push_back(g.cm.at(t, p));
            cm.push_back(std::move(row));
        }
        groups.push_back({{"group", g.group_id}, {"confusion", std::move(cm)}, {"f1", g.f1}, {"macro_f1", g.macro}});
    }
    nlohmann::json j{{"grouping", grouping_name(r.grouping)},
                     {"num_classes", r.num_classes},
                     {"groups", std::move(groups)},
                     {"challenge_p", r.challenge_p},
                     {"worst_group_macro_f1", r.worst_group_macro},
                     {"max_gap", r.max_gap}};
    if (r.minority_cell_f1) j["minority_cell_f1"] = *r.minority_cell_f1;
    return j;
}

/// Flat CSV: one row per group-class F1, then per-group macro rows, then
/// summary rows.
inline void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path.string());
    out << "kind,group,class,value\n";
    for (const auto& g : r.groups) {
        for (int k = 0; k < r.num_classes; ++k) {
            out << "f1," << g.group_id << ',' << k << ',' << g.f1[static_cast<std::size_t>(k)] << '\n';
        }
    }
    for (const auto& g : r.groups) out << "macro_f1," << g.group_id << ",," << g.macro << '\n';
    out << "challenge_p,,," << r.challenge_p << '\n';
    out << "worst_group_macro_f1,,," << r.worst_group_macro << '\n';
    out << "max_gap,,," << r.max_gap << '\n';
    if (r.minority_cell_f1) out << "minority_cell_f1,,," << *r.minority_cell_f1 << '\n';
}

}  // namespace gdro
