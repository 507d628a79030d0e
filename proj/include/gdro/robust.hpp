#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdro/autodiff.hpp"
#include "gdro/tensor.hpp"

namespace gdro {

/// Point on the probability simplex over groups; the state of the
/// exponentiated-gradient dynamics.
struct GroupWeights {
    std::vector<double> w;

    static GroupWeights uniform(int group_count) {
        if (group_count <= 0) throw std::invalid_argument("group count must be positive");
        return GroupWeights{std::vector<double>(static_cast<std::size_t>(group_count),
                                                1.0 / static_cast<double>(group_count))};
    }

    int groups() const { return static_cast<int>(w.size()); }

    double sum() const {
        double s = 0.0;
        for (double v : w) s += v;
        return s;
    }

    double min() const { return *std::min_element(w.begin(), w.end()); }

    bool on_simplex(double tol = 1e-9) const {
        if (w.empty()) return false;
        for (double v : w) {
            if (!(v >= 0.0) || !std::isfinite(v)) return false;
        }
        return std::abs(sum() - 1.0) <= tol;
    }
};

enum class UpdateMode { vanilla_eg, kl_mirror, kl_gradient };

/// Group-weight dynamics settings. kl_mirror is the default: the proximal
/// mirror-ascent step on <l,w> - alpha*KL(w||u), whose fixpoint is the
/// regularised maximiser; it reduces to vanilla_eg exactly at alpha = 0 and
/// to uniform weighting as alpha grows.
struct DroConfig {
    double eta_dro = 0.01;
    double alpha = 0.0;
    UpdateMode update_mode = UpdateMode::kl_mirror;

    void validate() const {
        if (!(eta_dro > 0.0)) throw std::invalid_argument("dro.eta_dro must be positive");
        if (!(alpha >= 0.0)) throw std::invalid_argument("dro.alpha must be >= 0");
    }
};

/// Detached per-group mean losses for one mini-batch; absent groups carry
/// loss 0 and count 0.
struct GroupLossReport {
    std::vector<double> losses;
    std::vector<int> counts;

    int groups() const { return static_cast<int>(losses.size()); }
};

inline GroupLossReport group_losses(std::span<const double> per_sample, std::span<const int> groups, int num_groups) {
    if (num_groups <= 0) throw std::invalid_argument("group_losses: need at least one group");
    if (per_sample.size() != groups.size()) throw std::invalid_argument("group_losses: losses/groups length mismatch");
    GroupLossReport r;
    r.losses.assign(static_cast<std::size_t>(num_groups), 0.0);
    r.counts.assign(static_cast<std::size_t>(num_groups), 0);
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const int g = groups[i];
        if (g < 0 || g >= num_groups) {
            throw std::invalid_argument("group_losses: group id " + std::to_string(g) + " out of range [0," +
                                        std::to_string(num_groups) + ")");
        }
        r.losses[static_cast<std::size_t>(g)] += per_sample[i];
        ++r.counts[static_cast<std::size_t>(g)];
    }
    for (int g = 0; g < num_groups; ++g) {
        if (r.counts[static_cast<std::size_t>(g)] > 0) {
            r.losses[static_cast<std::size_t>(g)] /= static_cast<double>(r.counts[static_cast<std::size_t>(g)]);
        }
    }
    return r;
}

/// KL divergence of w from the uniform distribution, with 0*log 0 = 0.
/// Always in [0, log |G|].
inline double kl_divergence(const GroupWeights& weights) {
    if (!weights.on_simplex()) throw std::invalid_argument("kl_divergence: weights not on the simplex");
    const double G = static_cast<double>(weights.groups());
    double kl = 0.0;
    for (double v : weights.w) {
        if (v > 0.0) kl += v * std::log(v * G);
    }
    return std::max(0.0, kl);
}

/// One multiplicative weight update. Losses are plain numbers, never part of
/// any differentiation record.
///
///   vanilla_eg:  w_g <- w_g * exp(eta * l_g) / Z
///   kl_mirror:   w_g <- w_g^beta * u_g^(1-beta) * exp(beta * eta * l_g) / Z,
///                beta = 1/(1 + eta*alpha)
///   kl_gradient: vanilla step on l_g - alpha*(log(w_g/u_g) + 1), clamped
///
/// Absent groups enter with l_g = 0 and decay passively through the
/// renormalisation.
inline GroupWeights update_weights(const GroupWeights& state, const GroupLossReport& report, const DroConfig& config) {
    config.validate();
    if (!state.on_simplex()) throw std::invalid_argument("update_weights: state not on the simplex");
    if (report.groups() != state.groups()) {
        throw std::invalid_argument("update_weights: report has " + std::to_string(report.groups()) +
                                    " groups, state has " + std::to_string(state.groups()));
    }
    const int G = state.groups();
    const double eta = config.eta_dro;
    const double log_u = -std::log(static_cast<double>(G));

    // Work in log space with max subtraction so large losses cannot overflow.
    std::vector<double> score(static_cast<std::size_t>(G));
    switch (config.update_mode) {
        case UpdateMode::vanilla_eg: {
            for (int g = 0; g < G; ++g) {
                score[static_cast<std::size_t>(g)] =
                    std::log(state.w[static_cast<std::size_t>(g)]) + eta * report.losses[static_cast<std::size_t>(g)];
            }
            break;
        }
        case UpdateMode::kl_mirror: {
            const double beta = 1.0 / (1.0 + eta * config.alpha);
            // At alpha = 0 this is beta = 1 and the arithmetic below reduces
            // term-by-term to the vanilla_eg expression.
            for (int g = 0; g < G; ++g) {
                score[static_cast<std::size_t>(g)] =
                    beta * (std::log(state.w[static_cast<std::size_t>(g)]) + eta * report.losses[static_cast<std::size_t>(g)]) +
                    (1.0 - beta) * log_u;
            }
            break;
        }
        case UpdateMode::kl_gradient: {
            for (int g = 0; g < G; ++g) {
                const double wg = state.w[static_cast<std::size_t>(g)];
                double modified = report.losses[static_cast<std::size_t>(g)];
                if (config.alpha > 0.0) {
                    const double ratio_term = wg > 0.0 ? std::log(wg) - log_u + 1.0 : -std::numeric_limits<double>::infinity();
                    modified -= config.alpha * ratio_term;
                    modified = std::clamp(modified, -50.0, 50.0);
                }
                score[static_cast<std::size_t>(g)] = std::log(wg) + eta * modified;
            }
            break;
        }
    }

    double m = -std::numeric_limits<double>::infinity();
    for (double s : score) m = std::max(m, s);
    GroupWeights next;
    next.w.assign(static_cast<std::size_t>(G), 0.0);
    double z = 0.0;
    for (int g = 0; g < G; ++g) {
        next.w[static_cast<std::size_t>(g)] = std::exp(score[static_cast<std::size_t>(g)] - m);
        z += next.w[static_cast<std::size_t>(g)];
    }
    for (double& v : next.w) v /= z;
    return next;
}

/// Differentiable per-group mean-loss vector [G] built from the per-sample
/// loss node; absent groups hold 0. The detached GroupLossReport carries the
/// same numbers for the weight update.
inline Value group_loss_nodes(Tape& tape, Value per_sample, std::span<const int> groups, int num_groups) {
    return tape.segment_mean(per_sample, groups, num_groups);
}

/// L = sum_g w_g * l_g + alpha * KL(w || u) as a scalar node. The weights and
/// the KL term are constants with respect to model parameters: gradients flow
/// only through the weighted sum.
inline Value total_loss(Tape& tape, Value group_loss_vec, const GroupWeights& weights, double alpha) {
    const Tensor& lv = tape.value(group_loss_vec);
    if (lv.rank() != 1 || lv.extent(0) != weights.groups()) {
        throw std::invalid_argument("total_loss: group losses " + shape_str(lv.shape()) + " vs " +
                                    std::to_string(weights.groups()) + " weights");
    }
    Value wconst = tape.constant(Tensor(Shape{weights.groups()}, weights.w));
    Value weighted = tape.reduce_sum(tape.mul(group_loss_vec, wconst));
    if (alpha == 0.0) return weighted;
    return tape.affine(weighted, 1.0, alpha * kl_divergence(weights));
}

/// Per-sample focal loss (1 - p_t)^gamma * (-log p_t), built from softmax
/// probabilities on the tape. gamma = 0 recovers unweighted cross-entropy.
inline Value focal_loss(Tape& tape, Value logits, std::span<const int> labels, double gamma) {
    if (!(gamma >= 0.0)) throw std::invalid_argument("focal_loss: gamma must be >= 0");
    Value pt = tape.pick(tape.softmax(logits), labels);          // [b]
    Value neg_log = tape.affine(tape.log(pt), -1.0, 0.0);        // -log p_t
    Value one_minus = tape.affine(pt, -1.0, 1.0);                // 1 - p_t
    return tape.mul(tape.pow_const(one_minus, gamma), neg_log);
}

/// Inverse-frequency class weights w_c = N / (C * N_c); the sample-weighted
/// mean of the result is 1. Rejects empty classes.
inline std::vector<double> inverse_frequency_weights(std::span<const std::int64_t> class_counts) {
    const double c = static_cast<double>(class_counts.size());
    double n = 0.0;
    for (std::int64_t v : class_counts) n += static_cast<double>(v);
    std::vector<double> w(class_counts.size());
    for (std::size_t i = 0; i < class_counts.size(); ++i) {
        if (class_counts[i] <= 0) {
            throw std::invalid_argument("inverse_frequency_weights: class " + std::to_string(i) + " has no samples");
        }
        w[i] = n / (c * static_cast<double>(class_counts[i]));
    }
    return w;
}

/// Joint gender-by-class group index for the 2x4 task. The bijective layout
/// g = 4j + k is the default; paper_literal selects g = 2j + k, which
/// collides (e.g. (1,0) and (0,2) both map to 2) and is kept only so the
/// published formula can be reproduced.
inline int group_index_task2(int gender, int class_id, bool paper_literal = false) {
    if (gender < 0 || gender > 1) throw std::invalid_argument("group_index_task2: gender must be 0 or 1");
    if (class_id < 0 || class_id > 3) throw std::invalid_argument("group_index_task2: class must be in [0,4)");
    return paper_literal ? 2 * gender + class_id : 4 * gender + class_id;
}

}  // namespace gdro
