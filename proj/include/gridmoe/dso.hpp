// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dynamic submodule learning-rate governor.
//
// Each task keeps an exponential moving average his_L of its loss. Task heads
// get lambda_t = T * softmax_t(w / theta) with w_t = his_L_t / cur_L_t, so the
// head multipliers always sum to T. The shared backbone gets
// gamma = 2 * sigmoid((C - b) * tau), where C = 1 - KL(softmax(cur_L) || softmax(his_L))
// scores how well the current loss balance matches its history.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gridmoe {

// Learning rate used when a run config does not set one.
inline constexpr double kPaperBaseLearningRate = 1e-4;

struct DsoConfig {
    double alpha = 0.05;  // EMA coefficient
    double theta = 1.0;   // head softmax temperature
    double tau = 3.0;     // backbone sigmoid temperature
    double bias_b = 0.4;  // consistency score at which gamma == 1
    std::size_t n_tasks = 3;

    void validate() const;
};

struct LossTracker {
    std::vector<double> cur;
    std::vector<double> his;
    std::size_t iteration = 0;  // number of accepted updates

    bool initialized() const { return iteration > 0; }
};

struct LrMultipliers {
    std::vector<double> head_lambdas;
    double backbone_gamma = 1.0;
    double consistency = 1.0;
    std::vector<double> convergence_ratios;  // w_t; empty for identity()

    static LrMultipliers identity(std::size_t n_tasks);
};

// Returns false (leaving the tracker untouched) when any loss is non-finite
// or not strictly positive. The first accepted update sets his_L = cur_L.
bool update_ema(LossTracker& tracker, std::span<const double> observed, const DsoConfig& cfg);

struct HeadMultipliers {
    std::vector<double> lambdas;
    std::vector<double> ratios;
    bool clamped = false;  // some cur_L was zero and was clamped to 1e-12
};

HeadMultipliers head_multipliers(const LossTracker& tracker, const DsoConfig& cfg);

// Requires at least two tasks.
double consistency_score(const LossTracker& tracker);

double backbone_multiplier(double consistency, const DsoConfig& cfg);

struct ParamGroup {
    enum class Kind { head, backbone };
    Kind kind = Kind::backbone;
    std::size_t task = 0;  // meaningful for heads only

    static ParamGroup head(std::size_t t) { return {Kind::head, t}; }
    static ParamGroup backbone() { return {Kind::backbone, 0}; }
};

double apply_multipliers(double base_lr, ParamGroup group, const LrMultipliers& multipliers);

class DsoGovernor {
public:
    struct StepResult {
        LrMultipliers multipliers;
        bool skipped = false;     // losses rejected; previous multipliers returned
        bool clamped = false;     // a zero cur_L was clamped
    };

    explicit DsoGovernor(DsoConfig cfg);

    StepResult step(std::span<const double> observed_losses);

    const DsoConfig& config() const { return cfg_; }
    const LossTracker& tracker() const { return tracker_; }
    const LrMultipliers& last() const { return last_; }

private:
    DsoConfig cfg_;
    LossTracker tracker_;
    LrMultipliers last_;
};

}  // namespace gridmoe
