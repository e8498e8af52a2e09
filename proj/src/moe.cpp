// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "gridmoe/csv.hpp"
#include "gridmoe/error.hpp"

namespace gridmoe {

void MoEConfig::validate() const {
    if (n_experts < 1) throw ConfigError("must be at least 1", "moe.n_experts");
    if (top_k < 1 || top_k > n_experts) {
        throw ConfigError("must satisfy 1 <= top_k <= n_experts (" + std::to_string(n_experts) + ")", "moe.top_k");
    }
    if (!(gate_temperature > 0.0) || !std::isfinite(gate_temperature)) {
        throw ConfigError("must be a positive finite number", "moe.gate_temperature");
    }
    if (in_channels < 1) throw ConfigError("must be positive", "moe.in_channels");
    if (out_channels < 1) throw ConfigError("must be positive", "moe.out_channels");
    if (gate_dim < 1) throw ConfigError("must be positive", "moe.gate_dim");
}

void GateParams::validate(const MoEConfig& cfg) const {
    if (transform.shape() != Shape{cfg.gate_dim, cfg.in_channels}) {
        throw ShapeError("gate transform has shape " + shape_to_string(transform.shape()) + ", expected " +
                         shape_to_string({cfg.gate_dim, cfg.in_channels}));
    }
    if (embeddings.shape() != Shape{cfg.gate_dim, cfg.n_experts}) {
        throw ShapeError("expert embeddings have shape " + shape_to_string(embeddings.shape()) + ", expected " +
                         shape_to_string({cfg.gate_dim, cfg.n_experts}));
    }
    const auto e = embeddings.data();
    for (std::size_t n = 0; n < cfg.n_experts; ++n) {
        double ss = 0.0;
        for (std::size_t d = 0; d < cfg.gate_dim; ++d) ss += e[d * cfg.n_experts + n] * e[d * cfg.n_experts + n];
        if (std::sqrt(ss) <= kDegenerateNorm) {
            throw DomainError("embedding of expert " + std::to_string(n) + " is the zero vector");
        }
    }
}

void ExpertBank::validate(const MoEConfig& cfg) const {
    if (weights.shape() != Shape{cfg.n_experts, cfg.out_channels, cfg.in_channels}) {
        throw ShapeError("expert weights have shape " + shape_to_string(weights.shape()) + ", expected " +
                         shape_to_string({cfg.n_experts, cfg.out_channels, cfg.in_channels}));
    }
    if (biases.shape() != Shape{cfg.n_experts, cfg.out_channels}) {
        throw ShapeError("expert biases have shape " + shape_to_string(biases.shape()) + ", expected " +
                         shape_to_string({cfg.n_experts, cfg.out_channels}));
    }
}

std::vector<double> ExpertBank::apply(std::size_t expert, std::span<const double> x) const {
    const std::size_t cout = weights.dim(1);
    const std::size_t cin = weights.dim(2);
    if (expert >= size() || x.size() != cin) throw ShapeError("ExpertBank::apply: bad expert id or input size");
    const auto w = weights.data();
    const auto b = biases.data();
    std::vector<double> out(cout);
    for (std::size_t o = 0; o < cout; ++o) {
        double acc = b[expert * cout + o];
        for (std::size_t i = 0; i < cin; ++i) acc += w[(expert * cout + o) * cin + i] * x[i];
        out[o] = acc;
    }
    return out;
}

double RoutingDecision::weight_of(std::size_t expert) const {
    for (std::size_t s = 0; s < selected.size(); ++s) {
        if (selected[s] == expert) return gate_weights[s];
    }
    return 0.0;
}

namespace {

struct Routed {
    Tensor probabilities;  // [..., N] full softmax, differentiable w.r.t. input and gate params
    std::vector<RoutingDecision> decisions;
    std::vector<std::size_t> selected;  // flattened, k per position
};

// Shared by gate() and moe_forward() so both produce identical decisions.
Routed route(const Tensor& x, const GateParams& params, const MoEConfig& cfg) {
    const Tensor unit_features = ops::normalize_rows(ops::grid_linear(x, params.transform), kDegenerateNorm);
    const Tensor unit_experts = ops::normalize_rows(ops::transpose(params.embeddings), kDegenerateNorm);
    // A degenerate Wx normalizes to zero, so its cosines are all 0 and the
    // softmax below is exactly uniform.
    const Tensor cosines = ops::grid_linear(unit_features, unit_experts);

    Routed r{ops::softmax(cosines, cfg.gate_temperature), {}, {}};
    const std::size_t n = cfg.n_experts;
    const std::size_t k = cfg.top_k;
    const std::size_t positions = r.probabilities.numel() / n;
    const auto p = r.probabilities.data();
    r.decisions.resize(positions);
    r.selected.reserve(positions * k);
    std::vector<std::size_t> order(n);
    for (std::size_t pos = 0; pos < positions; ++pos) {
        const double* row = p.data() + pos * n;
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Stable: equal probabilities keep ascending expert order.
        std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
        RoutingDecision& d = r.decisions[pos];
        d.full_softmax.assign(row, row + n);
        d.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        d.gate_weights.resize(k);
        for (std::size_t s = 0; s < k; ++s) d.gate_weights[s] = row[d.selected[s]];
        r.selected.insert(r.selected.end(), d.selected.begin(), d.selected.end());
    }
    return r;
}

}  // namespace

RoutingDecision gate(std::span<const double> x, const GateParams& params, const MoEConfig& cfg) {
    if (x.size() != cfg.in_channels) {
        throw ShapeError("gate: input has " + std::to_string(x.size()) + " channels, expected " +
                         std::to_string(cfg.in_channels));
    }
    params.validate(cfg);
    Routed r = route(Tensor::from_data({x.size()}, std::vector<double>(x.begin(), x.end())), params, cfg);
    return std::move(r.decisions.front());
}

MoEOutput moe_forward(const Tensor& x, const ExpertBank& bank, const GateParams& params, const MoEConfig& cfg) {
    if (x.rank() != 3 || x.dim(2) != cfg.in_channels) {
        throw ShapeError("moe_forward: input " + shape_to_string(x.shape()) + " is not H x W x " +
                         std::to_string(cfg.in_channels));
    }
    params.validate(cfg);
    bank.validate(cfg);

    Routed r = route(x, params, cfg);
    MoEOutput out;
    // routed_linear reads gate entries only for the selected experts, which
    // is the top-k mask: unselected experts contribute neither output nor gradient.
    out.output = ops::routed_linear(x, r.probabilities, bank.weights, bank.biases, r.selected, cfg.top_k);
    out.expert_applications = r.selected.size();
    out.routing.height = x.dim(0);
    out.routing.width = x.dim(1);
    out.routing.positions = std::move(r.decisions);
    return out;
}

MoELayer init_from_pretrained(const Tensor& pretrained_weight, const Tensor& pretrained_bias, const MoEConfig& cfg,
                              const MoEInitOptions& options) {
    cfg.validate();
    if (pretrained_weight.shape() != Shape{cfg.out_channels, cfg.in_channels}) {
        throw ShapeError("pretrained weight " + shape_to_string(pretrained_weight.shape()) + " does not match " +
                         shape_to_string({cfg.out_channels, cfg.in_channels}));
    }
    if (pretrained_bias.shape() != Shape{cfg.out_channels}) {
        throw ShapeError("pretrained bias " + shape_to_string(pretrained_bias.shape()) + " does not match " +
                         shape_to_string({cfg.out_channels}));
    }

    const std::size_t n = cfg.n_experts;
    std::vector<double> weights;
    std::vector<double> biases;
    weights.reserve(n * pretrained_weight.numel());
    biases.reserve(n * pretrained_bias.numel());
    for (std::size_t e = 0; e < n; ++e) {
        weights.insert(weights.end(), pretrained_weight.data().begin(), pretrained_weight.data().end());
        biases.insert(biases.end(), pretrained_bias.data().begin(), pretrained_bias.data().end());
    }

    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, options.init_std);
    std::vector<double> transform(cfg.gate_dim * cfg.in_channels);
    for (double& v : transform) v = normal(rng);
    std::vector<double> embeddings(cfg.gate_dim * n);
    for (double& v : embeddings) v = normal(rng);
    if (options.identical_embeddings) {
        for (std::size_t d = 0; d < cfg.gate_dim; ++d) {
            for (std::size_t e = 1; e < n; ++e) embeddings[d * n + e] = embeddings[d * n];
        }
    }

    MoELayer layer;
    layer.bank.weights = Tensor::from_data({n, cfg.out_channels, cfg.in_channels}, std::move(weights), true);
    layer.bank.biases = Tensor::from_data({n, cfg.out_channels}, std::move(biases), true);
    layer.gate.transform = Tensor::from_data({cfg.gate_dim, cfg.in_channels}, std::move(transform), true);
    layer.gate.embeddings = Tensor::from_data({cfg.gate_dim, n}, std::move(embeddings), true);
    layer.gate.validate(cfg);
    return layer;
}

std::vector<int> export_top1_map(const RoutingMap& routing) {
    std::vector<int> map;
    map.reserve(routing.positions.size());
    for (const RoutingDecision& d : routing.positions) {
        const auto best = std::max_element(d.full_softmax.begin(), d.full_softmax.end());
        map.push_back(static_cast<int>(best - d.full_softmax.begin()));
    }
    return map;
}

void write_top1_map_csv(std::ostream& os, const RoutingMap& routing) {
    const std::vector<int> map = export_top1_map(routing);
    csv::write_schema(os, "gridmoe.top1_map", 1);
    for (std::size_t j = 0; j < routing.width; ++j) os << (j ? "," : "") << "col" << j;
    os << '\n';
    for (std::size_t i = 0; i < routing.height; ++i) {
        for (std::size_t j = 0; j < routing.width; ++j) os << (j ? "," : "") << map[i * routing.width + j];
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// ExpertStats

void ExpertStats::register_layer(int layer, std::size_t n_experts) {
    auto [it, inserted] = layers_.emplace(layer, n_experts);
    if (!inserted && it->second != n_experts) {
        throw UsageError("layer " + std::to_string(layer) + " already registered with " +
                         std::to_string(it->second) + " experts");
    }
}

void ExpertStats::add_dataset(const std::string& dataset) {
    for (const auto& [layer, n] : layers_) {
        Cell& c = cells_[{dataset, layer}];
        c.participation.resize(n, 0.0);
        c.top1_count.resize(n, 0);
    }
}

void ExpertStats::accumulate(const std::string& dataset, int layer, const RoutingMap& routing) {
    const auto it = layers_.find(layer);
    if (it == layers_.end()) throw UsageError("unknown MoE layer id " + std::to_string(layer));
    const std::size_t n = it->second;
    Cell& c = cells_[{dataset, layer}];
    c.participation.resize(n, 0.0);
    c.top1_count.resize(n, 0);
    const std::vector<int> top1 = export_top1_map(routing);
    for (std::size_t p = 0; p < routing.positions.size(); ++p) {
        const RoutingDecision& d = routing.positions[p];
        if (d.full_softmax.size() != n) throw UsageError("routing decision does not match layer expert count");
        for (std::size_t s = 0; s < d.selected.size(); ++s) c.participation[d.selected[s]] += d.gate_weights[s];
        ++c.top1_count[static_cast<std::size_t>(top1[p])];
    }
    c.grid_positions += routing.positions.size();
}

void ExpertStats::merge(const ExpertStats& other) {
    for (const auto& [layer, n] : other.layers_) register_layer(layer, n);
    for (const auto& [key, src] : other.cells_) {
        Cell& dst = cells_[key];
        dst.participation.resize(src.participation.size(), 0.0);
        dst.top1_count.resize(src.top1_count.size(), 0);
        for (std::size_t e = 0; e < src.participation.size(); ++e) {
            dst.participation[e] += src.participation[e];
            dst.top1_count[e] += src.top1_count[e];
        }
        dst.grid_positions += src.grid_positions;
    }
}

ExpertStats::Cell ExpertStats::cell(const std::string& dataset, int layer) const {
    const auto it = cells_.find({dataset, layer});
    if (it != cells_.end()) return it->second;
    const auto lt = layers_.find(layer);
    if (lt == layers_.end()) throw UsageError("unknown MoE layer id " + std::to_string(layer));
    Cell empty;
    empty.participation.assign(lt->second, 0.0);
    empty.top1_count.assign(lt->second, 0);
    return empty;
}

std::vector<std::string> ExpertStats::datasets() const {
    std::set<std::string> names;
    for (const auto& [key, c] : cells_) names.insert(key.first);
    return {names.begin(), names.end()};
}

double ExpertStats::participation_entropy(const std::string& dataset, int layer) const {
    const Cell c = cell(dataset, layer);
    const double total = std::accumulate(c.participation.begin(), c.participation.end(), 0.0);
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (double m : c.participation) {
        if (m > 0.0) h -= (m / total) * std::log(m / total);
    }
    return h;
}

void ExpertStats::write_csv(std::ostream& os) const {
    csv::write_schema(os, "gridmoe.expert_stats", 1);
    os << "dataset,layer,expert,participation_mass,top1_count,grid_positions\n";
    for (const auto& [key, c] : cells_) {
        for (std::size_t e = 0; e < c.participation.size(); ++e) {
            os << key.first << ',' << key.second << ',' << e << ',' << csv::format(c.participation[e]) << ','
               << c.top1_count[e] << ',' << c.grid_positions << '\n';
        }
    }
}

}  // namespace gridmoe
