// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

namespace gridmoe {

namespace {

// Stream tags for mix_seed so that the data, sampler and parameter streams
// of one run seed never overlap.
constexpr std::uint64_t kDataStream = 0x64617461;
constexpr std::uint64_t kSamplerStream = 0x73616d70;
constexpr std::uint64_t kModelStream = 0x6d6f646c;
constexpr std::uint64_t kTrunkStream = 1;
constexpr std::uint64_t kHeadStream = 2;
constexpr std::uint64_t kGateStream = 3;

constexpr std::size_t kAbortWindow = 10;

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(values), true);
}

}  // namespace

void SamplerConfig::validate() const {
    std::size_t total = 0;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (counts[m] == 0) {
            throw ConfigError("every modality needs at least one sample per batch, modality " +
                                  modality_name(static_cast<Modality>(m)) + " has 0",
                              "sampler.counts");
        }
        total += counts[m];
    }
    if (total != batch_size) {
        throw ConfigError("counts sum to " + std::to_string(total) + " but batch_size is " +
                              std::to_string(batch_size),
                          "sampler.counts");
    }
}

std::vector<BatchItem> sample_batch(const SamplerConfig& cfg, std::uint64_t iteration) {
    cfg.validate();
    std::vector<BatchItem> items;
    items.reserve(cfg.batch_size);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        for (std::size_t j = 0; j < cfg.counts[m]; ++j) {
            items.push_back({static_cast<Modality>(m), iteration * cfg.counts[m] + j});
        }
    }
    std::mt19937_64 rng(mix_seed(cfg.seed, kSamplerStream, iteration));
    std::shuffle(items.begin(), items.end(), rng);
    return items;
}

std::vector<bool> placement_from_name(const std::string& name, std::size_t depth) {
    std::vector<bool> mask(depth, false);
    for (std::size_t b = 0; b < depth; ++b) {
        if (name == "even") {
            mask[b] = b % 2 == 0;
        } else if (name == "odd") {
            mask[b] = b % 2 == 1;
        } else if (name == "all") {
            mask[b] = true;
        } else if (name != "none") {
            throw ConfigError("unknown placement '" + name + "' (expected even, odd, all, none or a list)",
                              "model.moe_placement");
        }
    }
    return mask;
}

std::vector<bool> ModelSpec::placement() const {
    return moe_placement.empty() ? placement_from_name("even", depth) : moe_placement;
}

void ModelSpec::validate(std::size_t input_channels) const {
    if (depth == 0) throw ConfigError("must be at least 1", "model.depth");
    if (channels == 0) throw ConfigError("must be at least 1", "model.channels");
    if (input_channels == 0) throw ConfigError("must be at least 1", "data.channels");
    if (!moe_placement.empty() && moe_placement.size() != depth) {
        throw ConfigError("mask has " + std::to_string(moe_placement.size()) + " entries for depth " +
                              std::to_string(depth),
                          "model.moe_placement");
    }
    if (heads.empty()) throw ConfigError("no task heads", "model.heads");
    if (!(gate_init_std > 0.0) || !std::isfinite(gate_init_std)) {
        throw ConfigError("must be positive", "model.gate_init_std");
    }
    MoEConfig probe = moe;
    probe.in_channels = input_channels;
    probe.out_channels = channels;
    probe.validate();
}

Tensor standardize_channels(const Tensor& image) {
    const std::size_t c = image.dim(image.rank() - 1);
    const std::size_t rows = image.numel() / c;
    const auto v = image.data();
    std::vector<double> mean(c, 0.0);
    std::vector<double> var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += v[r * c + ch];
    }
    for (double& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = v[r * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    std::vector<double> out(v.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double sd = std::sqrt(var[ch] / static_cast<double>(rows));
        const double inv = sd > 1e-6 ? 1.0 / sd : 1.0;
        for (std::size_t r = 0; r < rows; ++r) out[r * c + ch] = (v[r * c + ch] - mean[ch]) * inv;
    }
    return Tensor::from_data(image.shape(), std::move(out));
}

Model::Model(ModelSpec spec, std::size_t input_channels, std::uint64_t seed)
    : spec_(std::move(spec)), input_channels_(input_channels) {
    spec_.validate(input_channels);
    const std::vector<bool> mask = spec_.placement();
    // Trunk, head and gate draws come from separate streams, so switching
    // MoE off leaves every other initial value unchanged.
    std::mt19937_64 trunk_rng(mix_seed(seed, kModelStream, kTrunkStream));
    for (std::size_t b = 0; b < spec_.depth; ++b) {
        const std::size_t in = b == 0 ? input_channels : spec_.channels;
        TrunkBlock block;
        block.weight = normal_tensor({spec_.channels, in}, std::sqrt(2.0 / static_cast<double>(in)), trunk_rng);
        block.bias = Tensor::zeros({spec_.channels}, true);
        if (spec_.moe_enabled && mask[b]) {
            block.has_moe = true;
            block.moe_cfg = spec_.moe;
            block.moe_cfg.in_channels = in;
            block.moe_cfg.out_channels = spec_.channels;
            MoEInitOptions opts;
            opts.seed = mix_seed(seed, kModelStream, kGateStream * 1000 + b);
            opts.init_std = spec_.gate_init_std;
            opts.identical_embeddings = spec_.identical_embeddings;
            block.moe = init_from_pretrained(block.weight, block.bias, block.moe_cfg, opts);
        }
        blocks_.push_back(std::move(block));
    }
    std::mt19937_64 head_rng(mix_seed(seed, kModelStream, kHeadStream));
    const double head_std = std::sqrt(1.0 / static_cast<double>(spec_.channels));
    for (const TaskSpec& task : spec_.heads) {
        Head head;
        head.weight = normal_tensor({task.head_width, spec_.channels}, head_std, head_rng);
        head.bias = Tensor::zeros({task.head_width}, true);
        heads_.push_back(std::move(head));
    }
}

std::vector<NamedParameter> Model::parameters() const {
    std::vector<NamedParameter> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const TrunkBlock& block = blocks_[b];
        const std::string prefix = "trunk." + std::to_string(b) + ".";
        if (block.has_moe) {
            out.push_back({prefix + "experts.weight", block.moe.bank.weights, ParamGroup::backbone()});
            out.push_back({prefix + "experts.bias", block.moe.bank.biases, ParamGroup::backbone()});
            out.push_back({prefix + "gate.transform", block.moe.gate.transform, ParamGroup::backbone()});
            out.push_back({prefix + "gate.embeddings", block.moe.gate.embeddings, ParamGroup::backbone()});
        } else {
            out.push_back({prefix + "weight", block.weight, ParamGroup::backbone()});
            out.push_back({prefix + "bias", block.bias, ParamGroup::backbone()});
        }
    }
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        const std::string prefix = "head." + std::to_string(t) + ".";
        out.push_back({prefix + "weight", heads_[t].weight, ParamGroup::head(t)});
        out.push_back({prefix + "bias", heads_[t].bias, ParamGroup::head(t)});
    }
    return out;
}

std::vector<std::size_t> Model::moe_blocks() const {
    std::vector<std::size_t> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        if (blocks_[b].has_moe) out.push_back(b);
    }
    return out;
}

Model::Forward Model::forward(const Tensor& image, std::size_t task) const {
    if (task >= heads_.size()) throw UsageError("no head for task " + std::to_string(task));
    Forward out;
    Tensor h = spec_.input_standardization ? standardize_channels(image) : image;
    for (const TrunkBlock& block : blocks_) {
        if (block.has_moe) {
            MoEOutput moe = moe_forward(h, block.moe.bank, block.moe.gate, block.moe_cfg);
            out.expert_applications += moe.expert_applications;
            out.routing.push_back(std::move(moe.routing));
            h = moe.output;
        } else {
            h = ops::grid_linear(h, block.weight, block.bias);
        }
        h = ops::relu(h);
    }
    out.prediction = ops::grid_linear(h, heads_[task].weight, heads_[task].bias);
    return out;
}

Tensor task_loss(const Tensor& prediction, const TaskSpec& task, const Sample& sample) {
    if (task.target == TargetType::grid_classification) return ops::cross_entropy(prediction, sample.labels);
    return ops::smooth_l1(prediction, sample.regression_target);
}

BatchLoss forward_model(const Model& model, const std::array<ModalitySpec, kNumModalities>& modalities,
                        const std::vector<Sample>& batch) {
    const std::size_t n_tasks = model.heads().size();
    std::vector<Tensor> sums(n_tasks);
    std::vector<std::size_t> counts(n_tasks, 0);
    BatchLoss out;
    for (const Sample& sample : batch) {
        const TaskSpec& task = modalities[static_cast<std::size_t>(sample.modality)].task;
        Model::Forward f = model.forward(sample.image, task.task_id);
        Tensor loss = task_loss(f.prediction, task, sample);
        sums[task.task_id] = sums[task.task_id].defined() ? ops::add(sums[task.task_id], loss) : loss;
        ++counts[task.task_id];
        out.expert_applications += f.expert_applications;
        out.routing.push_back(std::move(f.routing));
    }
    for (std::size_t t = 0; t < n_tasks; ++t) {
        if (counts[t] == 0) throw UsageError("batch has no sample for task " + std::to_string(t));
        out.task_losses.push_back(counts[t] == 1 ? sums[t] : ops::scale(sums[t], 1.0 / static_cast<double>(counts[t])));
        out.total = out.total.defined() ? ops::add(out.total, out.task_losses.back()) : out.task_losses.back();
    }
    return out;
}

void DataConfig::validate() const {
    if (grid.height == 0) throw ConfigError("must be at least 1", "data.height");
    if (grid.width == 0) throw ConfigError("must be at least 1", "data.width");
    if (grid.channels == 0) throw ConfigError("must be at least 1", "data.channels");
    if (classes < 2) throw ConfigError("must be at least 2", "data.classes");
    for (double n : label_noise) {
        if (!(n >= 0.0) || !std::isfinite(n)) throw ConfigError("must be finite and non-negative", "data.label_noise");
    }
    if (!std::isfinite(signal_strength)) throw ConfigError("must be finite", "data.signal_strength");
    if (eval_samples == 0) throw ConfigError("must be at least 1", "data.eval_samples");
}

void RunConfig::resolve() {
    model.heads.clear();
    for (const ModalitySpec& m : run_modalities(*this)) model.heads.push_back(m.task);
    dso.n_tasks = model.heads.size();
    sampler.seed = seed;
}

void RunConfig::validate() const {
    data.validate();
    model.validate(data.grid.channels);
    dso.validate();
    sampler.validate();
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("must be positive", "run.base_lr");
    if (model.heads.size() != kNumModalities) {
        throw ConfigError("expected one head per modality", "model.heads");
    }
}

std::array<ModalitySpec, kNumModalities> run_modalities(const RunConfig& cfg) {
    return default_modalities(cfg.data.grid, mix_seed(cfg.seed, kDataStream), cfg.data.label_noise,
                              cfg.data.signal_strength, cfg.data.classes);
}

Model build_model(const RunConfig& cfg) {
    return Model(cfg.model, cfg.data.grid.channels, mix_seed(cfg.seed, kModelStream));
}

EvalResult evaluate(const Model& model, const RunConfig& cfg) {
    const auto modalities = run_modalities(cfg);
    const std::vector<std::size_t> moe = model.moe_blocks();
    EvalResult out;
    for (std::size_t b : moe) out.stats.register_layer(static_cast<int>(b), model.blocks()[b].moe_cfg.n_experts);
    out.task_losses.assign(model.heads().size(), 0.0);
    out.first_routing.resize(kNumModalities);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        const ModalitySpec& spec = modalities[m];
        const std::string name = modality_name(spec.id);
        out.stats.add_dataset(name);
        double total = 0.0;
        for (std::size_t i = 0; i < cfg.data.eval_samples; ++i) {
            const Sample sample = generate_sample(spec, cfg.data.grid, kEvalIndexBase + i);
            Model::Forward f = model.forward(sample.image, spec.task.task_id);
            total += task_loss(f.prediction, spec.task, sample).item();
            for (std::size_t l = 0; l < moe.size(); ++l) {
                out.stats.accumulate(name, static_cast<int>(moe[l]), f.routing[l]);
            }
            if (i == 0) out.first_routing[m] = std::move(f.routing);
        }
        out.task_losses[spec.task.task_id] = total / static_cast<double>(cfg.data.eval_samples);
        double entropy = 0.0;
        for (std::size_t b : moe) entropy += out.stats.participation_entropy(name, static_cast<int>(b));
        out.entropy.push_back(moe.empty() ? std::numeric_limits<double>::quiet_NaN()
                                          : entropy / static_cast<double>(moe.size()));
    }
    return out;
}

std::vector<double> TrainResult::normalized_losses() const {
    std::vector<double> out;
    for (std::size_t t = 0; t < final.task_losses.size(); ++t) {
        out.push_back(final.task_losses[t] / initial.task_losses[t]);
    }
    return out;
}

void sgd_step(const std::vector<NamedParameter>& params, double base_lr, const LrMultipliers& multipliers) {
    for (const NamedParameter& p : params) {
        Tensor t = p.tensor;
        if (!t.has_grad()) continue;
        const double lr = apply_multipliers(base_lr, p.group, multipliers);
        const auto g = t.grad();
        auto v = t.mutable_data();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
        t.zero_grad();
    }
}

TrainResult train(const RunConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    const auto modalities = run_modalities(cfg);
    TrainResult result;
    result.model = build_model(cfg);
    result.initial = evaluate(result.model, cfg);

    const std::size_t n_tasks = cfg.model.heads.size();
    std::optional<DsoGovernor> governor;
    if (cfg.dso_enabled) governor.emplace(cfg.dso);
    const std::vector<NamedParameter> params = result.model.parameters();
    const double nan = std::numeric_limits<double>::quiet_NaN();

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        std::vector<Sample> batch;
        for (const BatchItem& item : sample_batch(cfg.sampler, it)) {
            batch.push_back(generate_sample(modalities[static_cast<std::size_t>(item.modality)], cfg.data.grid,
                                            item.index));
        }
        BatchLoss loss = forward_model(result.model, modalities, batch);
        result.expert_applications += loss.expert_applications;

        std::vector<double> values;
        for (const Tensor& t : loss.task_losses) values.push_back(t.item());
        if (hooks.on_losses) hooks.on_losses(it, values);

        LossRow lrow{it, values, std::accumulate(values.begin(), values.end(), 0.0)};
        const bool finite = std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });

        LrMultipliers mult = LrMultipliers::identity(n_tasks);
        DsoRow drow;
        drow.iteration = it;
        drow.cur = values;
        if (governor && finite) {
            DsoGovernor::StepResult step = governor->step(values);
            mult = step.multipliers;
            drow.his = governor->tracker().his;
            drow.ratio = mult.convergence_ratios;
            drow.skipped = step.skipped;
        } else {
            drow.his.assign(n_tasks, nan);
            drow.ratio.assign(n_tasks, nan);
        }
        drow.lambda = mult.head_lambdas;
        drow.consistency = mult.consistency;
        drow.gamma = mult.backbone_gamma;
        drow.lr_backbone = apply_multipliers(cfg.base_lr, ParamGroup::backbone(), mult);
        for (std::size_t t = 0; t < n_tasks; ++t) {
            drow.lr_head.push_back(apply_multipliers(cfg.base_lr, ParamGroup::head(t), mult));
        }
        result.losses.push_back(std::move(lrow));
        result.dso_log.push_back(std::move(drow));

        if (!finite) {
            const std::size_t from = result.losses.size() > kAbortWindow ? result.losses.size() - kAbortWindow : 0;
            throw TrainingAborted(
                "non-finite task loss at iteration " + std::to_string(it),
                std::vector<LossRow>(result.losses.begin() + static_cast<std::ptrdiff_t>(from), result.losses.end()),
                std::vector<DsoRow>(result.dso_log.begin() + static_cast<std::ptrdiff_t>(from),
                                    result.dso_log.end()));
        }
        result.gamma_min = it == 0 ? mult.backbone_gamma : std::min(result.gamma_min, mult.backbone_gamma);
        result.gamma_max = it == 0 ? mult.backbone_gamma : std::max(result.gamma_max, mult.backbone_gamma);

        loss.total.backward();
        sgd_step(params, cfg.base_lr, mult);
    }
    result.final = evaluate(result.model, cfg);
    return result;
}

double std_dev(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(values.size()));
}

double median(std::vector<double> values) {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace gridmoe
