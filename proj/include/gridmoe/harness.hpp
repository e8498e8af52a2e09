// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-task training harness: a shared trunk of grid blocks (some of them
// sparse MoE layers) feeding one head per modality, trained with SGD while
// the DSO governor scales the learning rate of each parameter group.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gridmoe/dso.hpp"
#include "gridmoe/error.hpp"
#include "gridmoe/moe.hpp"
#include "gridmoe/synthetic.hpp"
#include "gridmoe/tensor.hpp"

namespace gridmoe {

struct SamplerConfig {
    std::array<std::size_t, kNumModalities> counts{2, 1, 1};
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;

    void validate() const;
};

struct BatchItem {
    Modality modality = Modality::A;
    std::uint64_t index = 0;  // position in the modality's sample stream
};

// Exactly counts[m] items of modality m, shuffled by (seed, iteration).
// Sample indices never repeat across iterations.
std::vector<BatchItem> sample_batch(const SamplerConfig& cfg, std::uint64_t iteration);

struct ModelSpec {
    std::size_t depth = 4;
    std::size_t channels = 8;
    std::vector<bool> moe_placement;  // empty means even-indexed blocks
    MoEConfig moe;                    // in/out channels are derived per block
    bool moe_enabled = true;          // false swaps every MoE block for its plain linear block
    std::vector<TaskSpec> heads;
    double gate_init_std = 0.02;
    bool identical_embeddings = false;
    bool input_standardization = true;  // per-sample, per-channel z-scoring of the input grid

    std::vector<bool> placement() const;
    void validate(std::size_t input_channels) const;
};

// Placement masks by name: "even", "odd", "all", "none".
std::vector<bool> placement_from_name(const std::string& name, std::size_t depth);

struct TrunkBlock {
    Tensor weight;  // out x in
    Tensor bias;    // out
    bool has_moe = false;
    MoELayer moe;
    MoEConfig moe_cfg;
};

struct Head {
    Tensor weight;
    Tensor bias;
};

struct NamedParameter {
    std::string name;
    Tensor tensor;
    ParamGroup group;
};

class Model {
public:
    Model() = default;
    Model(ModelSpec spec, std::size_t input_channels, std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }
    std::size_t input_channels() const { return input_channels_; }
    const std::vector<TrunkBlock>& blocks() const { return blocks_; }
    const std::vector<Head>& heads() const { return heads_; }

    // Trainable tensors in a fixed order. MoE blocks expose their experts and
    // gate; the replaced linear weights are not parameters.
    std::vector<NamedParameter> parameters() const;

    // Indices of trunk blocks that run an MoE layer.
    std::vector<std::size_t> moe_blocks() const;

    struct Forward {
        Tensor prediction;
        std::vector<RoutingMap> routing;  // one per MoE block
        std::size_t expert_applications = 0;
    };
    Forward forward(const Tensor& image, std::size_t task) const;

private:
    ModelSpec spec_;
    std::size_t input_channels_ = 0;
    std::vector<TrunkBlock> blocks_;
    std::vector<Head> heads_;
};

Tensor standardize_channels(const Tensor& image);

// Scalar loss of one sample against its task target.
Tensor task_loss(const Tensor& prediction, const TaskSpec& task, const Sample& sample);

struct BatchLoss {
    std::vector<Tensor> task_losses;  // mean over the task's samples
    Tensor total;                     // sum over tasks
    std::vector<std::vector<RoutingMap>> routing;  // [item][moe block]
    std::size_t expert_applications = 0;
};

BatchLoss forward_model(const Model& model, const std::array<ModalitySpec, kNumModalities>& modalities,
                        const std::vector<Sample>& batch);

struct DataConfig {
    GridSize grid;
    std::array<double, kNumModalities> label_noise{0.05, 0.05, 0.05};
    double signal_strength = 1.0;
    std::size_t classes = 4;
    std::size_t eval_samples = 16;  // per modality

    void validate() const;
};

struct RunConfig {
    ModelSpec model;
    DsoConfig dso;
    bool dso_enabled = true;
    SamplerConfig sampler;
    DataConfig data;
    std::uint64_t seed = 0;
    std::size_t iterations = 500;  // 0 evaluates and checkpoints the initial model
    double base_lr = kPaperBaseLearningRate;
    std::string out_dir;

    // Head specs follow the modalities; the sampler seed follows the run seed.
    void resolve();
    void validate() const;
};

std::array<ModalitySpec, kNumModalities> run_modalities(const RunConfig& cfg);

// The initial model of a run, as train() builds it.
Model build_model(const RunConfig& cfg);

// Offset keeping evaluation samples out of the training streams.
inline constexpr std::uint64_t kEvalIndexBase = std::uint64_t{1} << 40;

struct LossRow {
    std::size_t iteration = 0;
    std::vector<double> task_losses;
    double total = 0.0;
};

struct DsoRow {
    std::size_t iteration = 0;
    std::vector<double> cur;
    std::vector<double> his;    // NaN when the governor is disabled
    std::vector<double> ratio;  // NaN when the governor is disabled
    std::vector<double> lambda;
    double consistency = 1.0;
    double gamma = 1.0;
    double lr_backbone = 0.0;
    std::vector<double> lr_head;
    bool skipped = false;
};

struct EvalResult {
    std::vector<double> task_losses;                     // per task
    std::vector<double> entropy;                         // per modality, mean over MoE blocks
    ExpertStats stats;
    std::vector<std::vector<RoutingMap>> first_routing;  // [modality][moe block], first eval sample
};

EvalResult evaluate(const Model& model, const RunConfig& cfg);

struct TrainResult {
    Model model;
    std::vector<LossRow> losses;
    std::vector<DsoRow> dso_log;
    EvalResult initial;
    EvalResult final;
    std::size_t expert_applications = 0;  // summed over training forwards
    double gamma_min = 1.0;
    double gamma_max = 1.0;

    // final / initial evaluation loss per task
    std::vector<double> normalized_losses() const;
};

// Thrown when a training loss is not finite. Carries the log rows of the
// last (up to) ten iterations for the diagnostic dump.
class TrainingAborted : public Error {
public:
    TrainingAborted(const std::string& message, std::vector<LossRow> losses, std::vector<DsoRow> dso)
        : Error(message), losses_(std::move(losses)), dso_(std::move(dso)) {}

    const std::vector<LossRow>& recent_losses() const { return losses_; }
    const std::vector<DsoRow>& recent_dso() const { return dso_; }

private:
    std::vector<LossRow> losses_;
    std::vector<DsoRow> dso_;
};

struct TrainHooks {
    // Called after the losses of an iteration are known and before backward;
    // may replace them (used to inject failures in tests).
    std::function<void(std::size_t iteration, std::vector<double>& losses)> on_losses;
};

TrainResult train(const RunConfig& cfg, const TrainHooks& hooks = {});

// One SGD step: p -= lr(group) * grad for every parameter, then clears grads.
void sgd_step(const std::vector<NamedParameter>& params, double base_lr, const LrMultipliers& multipliers);

double std_dev(const std::vector<double>& values);
double median(std::vector<double> values);

}  // namespace gridmoe
