#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdro/autodiff.hpp"

namespace gdro {

/// Cosine learning-rate schedule with a short linear warm-up, indexed by
/// optimisation step. The cosine phase decays to 0 at total_steps.
struct ScheduleConfig {
    double base_lr = 1e-4;
    int warmup_steps = 5;
    int total_steps = 0;

    void validate() const {
        if (!(base_lr > 0.0)) throw std::invalid_argument("schedule.base_lr must be positive");
        if (warmup_steps < 0) throw std::invalid_argument("schedule.warmup_steps must be >= 0");
        if (total_steps <= warmup_steps) throw std::invalid_argument("schedule.total_steps must exceed warmup_steps");
    }
};

inline double lr_at(int step, const ScheduleConfig& config) {
    config.validate();
    if (step < 0 || step >= config.total_steps) {
        throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0," +
                                    std::to_string(config.total_steps) + ")");
    }
    if (step < config.warmup_steps) {
        return config.base_lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
    }
    const double progress = static_cast<double>(step - config.warmup_steps) /
                            static_cast<double>(config.total_steps - config.warmup_steps);
    return config.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// AdamW with decoupled weight decay: the decay term is applied directly to
/// the parameter, scaled by the same learning rate, outside the moment
/// estimates.
class AdamW {
public:
    explicit AdamW(ParamSet& params, AdamWConfig config = {}) : params_(&params), config_(config) {
        for (auto& p : params.all()) {
            m_.emplace_back(p.value.shape());
            v_.emplace_back(p.value.shape());
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        std::size_t idx = 0;
        for (auto& p : params_->all()) {
            Tensor& m = m_[idx];
            Tensor& v = v_[idx];
            for (std::int64_t i = 0; i < p.value.numel(); ++i) {
                const double g = p.grad[i];
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                p.value[i] -= lr * (m_hat / (std::sqrt(v_hat) + config_.eps) + config_.weight_decay * p.value[i]);
            }
            ++idx;
        }
    }

    std::int64_t t() const { return t_; }
    const AdamWConfig& config() const { return config_; }

private:
    ParamSet* params_;
    AdamWConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::int64_t t_ = 0;
};

/// Early stopping on validation loss with strict improvement; ties and NaN
/// count as no improvement. Keeps a snapshot of the best parameter values.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience = 10) : patience_(patience) {
        if (patience <= 0) throw std::invalid_argument("patience must be positive");
    }

    /// Returns true when training should stop (patience exhausted).
    bool update(double val_loss, const ParamSet& params) {
        const bool improved = std::isfinite(val_loss) && val_loss < best_loss_;
        if (improved) {
            best_loss_ = val_loss;
            since_improvement_ = 0;
            snapshot_.clear();
            for (const auto& p : params.all()) snapshot_.push_back(p.value);
            has_snapshot_ = true;
        } else {
            ++since_improvement_;
        }
        return since_improvement_ >= patience_;
    }

    bool has_snapshot() const { return has_snapshot_; }
    double best_loss() const { return best_loss_; }
    int epochs_since_improvement() const { return since_improvement_; }

    /// Copies the best-seen values back into the parameter set.
    void restore_best(ParamSet& params) const {
        if (!has_snapshot_) throw std::logic_error("restore_best: no snapshot recorded");
        if (snapshot_.size() != params.size()) throw std::logic_error("restore_best: parameter set changed");
        std::size_t i = 0;
        for (auto& p : params.all()) p.value = snapshot_[i++];
    }

private:
    int patience_;
    double best_loss_ = std::numeric_limits<double>::infinity();
    int since_improvement_ = 0;
    bool has_snapshot_ = false;
    std::vector<Tensor> snapshot_;
};

}  // namespace gdro
