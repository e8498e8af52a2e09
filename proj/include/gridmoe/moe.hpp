// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Grid-level sparse mixture of experts.
//
// Each spatial position of an H x W x Cin feature map is routed on its own.
// The gate projects the position's feature with W, takes the cosine
// similarity against every expert embedding (a column of E), divides by the
// gate temperature and applies a softmax. The k most probable experts keep
// their softmax probability as mixing weight and all others are set to zero.
// The kept weights are not renormalized, so at a perfectly symmetric start
// the layer output is the shared expert output scaled by k/N.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gridmoe/tensor.hpp"

namespace gridmoe {

struct MoEConfig {
    std::size_t n_experts = 8;
    std::size_t top_k = 2;
    double gate_temperature = 0.07;
    std::size_t in_channels = 8;
    std::size_t out_channels = 8;
    std::size_t gate_dim = 8;

    void validate() const;
};

// Norms below this are treated as zero by the gate.
inline constexpr double kDegenerateNorm = 1e-12;

struct GateParams {
    Tensor transform;   // gate_dim x in_channels
    Tensor embeddings;  // gate_dim x n_experts, one expert per column

    void validate(const MoEConfig& cfg) const;
};

struct ExpertBank {
    Tensor weights;  // n_experts x out_channels x in_channels
    Tensor biases;   // n_experts x out_channels

    std::size_t size() const { return weights.dim(0); }
    void validate(const MoEConfig& cfg) const;

    // Output of a single expert at one position, outside any autodiff record.
    std::vector<double> apply(std::size_t expert, std::span<const double> x) const;
};

struct RoutingDecision {
    std::vector<std::size_t> selected;  // k distinct expert ids, most probable first
    std::vector<double> gate_weights;   // softmax probability of each selected expert
    std::vector<double> full_softmax;   // all N probabilities

    // Mixing weight of expert n: its probability when selected, else 0.
    double weight_of(std::size_t expert) const;
    std::size_t top1() const { return selected.front(); }
};

// Routing of every position of one feature map, row-major over (i, j).
struct RoutingMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<RoutingDecision> positions;

    const RoutingDecision& at(std::size_t i, std::size_t j) const { return positions[i * width + j]; }
};

RoutingDecision gate(std::span<const double> x, const GateParams& params, const MoEConfig& cfg);

struct MoEOutput {
    Tensor output;
    RoutingMap routing;
    std::size_t expert_applications = 0;
};

MoEOutput moe_forward(const Tensor& x, const ExpertBank& bank, const GateParams& params, const MoEConfig& cfg);

struct MoEInitOptions {
    std::uint64_t seed = 0;
    double init_std = 0.02;
    // Test mode: every embedding column is a copy of the first one.
    bool identical_embeddings = false;
};

struct MoELayer {
    ExpertBank bank;
    GateParams gate;
};

// Experts start as bit-exact copies of the pretrained 1x1 projection; the
// gate transform and embeddings are drawn from N(0, init_std^2).
MoELayer init_from_pretrained(const Tensor& pretrained_weight, const Tensor& pretrained_bias, const MoEConfig& cfg,
                              const MoEInitOptions& options = {});

std::vector<int> export_top1_map(const RoutingMap& routing);
void write_top1_map_csv(std::ostream& os, const RoutingMap& routing);

// Per (dataset, layer, expert) participation: the summed post-top-k gate
// weight and the number of positions where the expert was the argmax.
// Instances built on disjoint streams merge by addition.
class ExpertStats {
public:
    struct Cell {
        std::vector<double> participation;
        std::vector<std::uint64_t> top1_count;
        std::uint64_t grid_positions = 0;

        bool operator==(const Cell&) const = default;
    };

    void register_layer(int layer, std::size_t n_experts);
    bool has_layer(int layer) const { return layers_.count(layer) != 0; }
    const std::map<int, std::size_t>& layers() const { return layers_; }

    // Creates zero cells for every registered layer.
    void add_dataset(const std::string& dataset);
    void accumulate(const std::string& dataset, int layer, const RoutingMap& routing);
    void merge(const ExpertStats& other);

    // Zero-filled when nothing was recorded for (dataset, layer).
    Cell cell(const std::string& dataset, int layer) const;
    std::vector<std::string> datasets() const;

    // Shannon entropy (nats) of the participation mass normalized over experts.
    double participation_entropy(const std::string& dataset, int layer) const;

    void write_csv(std::ostream& os) const;

    bool operator==(const ExpertStats& other) const = default;

private:
    std::map<int, std::size_t> layers_;
    std::map<std::pair<std::string, int>, Cell> cells_;
};

}  // namespace gridmoe
