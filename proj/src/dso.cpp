// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/dso.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gridmoe/error.hpp"

namespace gridmoe {

namespace {

constexpr double kLossFloor = 1e-12;

std::vector<double> softmax(std::span<const double> v, double temperature) {
    double mx = v[0] / temperature;
    for (double x : v) mx = std::max(mx, x / temperature);
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] / temperature - mx);
        total += out[i];
    }
    for (double& x : out) x /= total;
    return out;
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

void DsoConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("must lie in [0, 1]", "dso.alpha");
    if (!(theta > 0.0) || !std::isfinite(theta)) throw ConfigError("must be positive", "dso.theta");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("must be positive", "dso.tau");
    if (!std::isfinite(bias_b)) throw ConfigError("must be finite", "dso.bias_b");
    if (n_tasks < 1) throw ConfigError("must be at least 1", "dso.n_tasks");
}

LrMultipliers LrMultipliers::identity(std::size_t n_tasks) {
    LrMultipliers m;
    m.head_lambdas.assign(n_tasks, 1.0);
    return m;
}

bool update_ema(LossTracker& tracker, std::span<const double> observed, const DsoConfig& cfg) {
    if (observed.size() != cfg.n_tasks) {
        throw ShapeError("expected " + std::to_string(cfg.n_tasks) + " task losses, got " +
                         std::to_string(observed.size()));
    }
    for (double l : observed) {
        if (!std::isfinite(l) || !(l > 0.0)) return false;
    }
    tracker.cur.assign(observed.begin(), observed.end());
    if (!tracker.initialized()) {
        tracker.his = tracker.cur;
    } else {
        for (std::size_t t = 0; t < observed.size(); ++t) {
            tracker.his[t] = cfg.alpha * tracker.cur[t] + (1.0 - cfg.alpha) * tracker.his[t];
        }
    }
    ++tracker.iteration;
    return true;
}

HeadMultipliers head_multipliers(const LossTracker& tracker, const DsoConfig& cfg) {
    if (tracker.cur.size() != cfg.n_tasks || tracker.his.size() != cfg.n_tasks) {
        throw UsageError("head_multipliers: tracker has not seen " + std::to_string(cfg.n_tasks) + " task losses");
    }
    HeadMultipliers out;
    out.ratios.resize(cfg.n_tasks);
    for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
        double cur = tracker.cur[t];
        if (cur < kLossFloor) {
            cur = kLossFloor;
            out.clamped = true;
        }
        out.ratios[t] = tracker.his[t] / cur;
    }
    out.lambdas = softmax(out.ratios, cfg.theta);
    const double scale = static_cast<double>(cfg.n_tasks);
    for (double& l : out.lambdas) l *= scale;
    return out;
}

double consistency_score(const LossTracker& tracker) {
    if (tracker.cur.size() < 2) {
        throw UsageError("consistency_score needs at least two tasks, got " + std::to_string(tracker.cur.size()));
    }
    if (tracker.his.size() != tracker.cur.size()) throw UsageError("consistency_score: tracker is inconsistent");
    const std::vector<double> p = softmax(tracker.cur, 1.0);
    const std::vector<double> q = softmax(tracker.his, 1.0);
    double kl = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) {
        kl += p[t] * std::log(std::max(p[t], kLossFloor) / std::max(q[t], kLossFloor));
    }
    return 1.0 - kl;
}

double backbone_multiplier(double consistency, const DsoConfig& cfg) {
    // Saturated sigmoids would round to exactly 0 or 2; keep the open interval.
    const double gamma = 2.0 * sigmoid((consistency - cfg.bias_b) * cfg.tau);
    return std::clamp(gamma, std::numeric_limits<double>::min(), std::nextafter(2.0, 0.0));
}

double apply_multipliers(double base_lr, ParamGroup group, const LrMultipliers& multipliers) {
    if (!(base_lr > 0.0)) throw ConfigError("base learning rate must be positive", "run.base_lr");
    if (group.kind == ParamGroup::Kind::backbone) return base_lr * multipliers.backbone_gamma;
    if (group.task >= multipliers.head_lambdas.size()) {
        throw UsageError("unknown parameter group head_" + std::to_string(group.task));
    }
    return base_lr * multipliers.head_lambdas[group.task];
}

DsoGovernor::DsoGovernor(DsoConfig cfg) : cfg_(cfg), last_(LrMultipliers::identity(cfg.n_tasks)) {
    cfg_.validate();
    if (cfg_.n_tasks < 2) throw ConfigError("the governor needs at least two tasks", "dso.n_tasks");
}

DsoGovernor::StepResult DsoGovernor::step(std::span<const double> observed_losses) {
    StepResult result;
    if (!update_ema(tracker_, observed_losses, cfg_)) {
        result.multipliers = last_;
        result.skipped = true;
        return result;
    }
    HeadMultipliers heads = head_multipliers(tracker_, cfg_);
    LrMultipliers m;
    m.head_lambdas = std::move(heads.lambdas);
    m.convergence_ratios = std::move(heads.ratios);
    m.consistency = consistency_score(tracker_);
    m.backbone_gamma = backbone_multiplier(m.consistency, cfg_);
    last_ = m;
    result.multipliers = std::move(m);
    result.clamped = heads.clamped;
    return result;
}

}  // namespace gridmoe
