// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with eager, tape-free reverse-mode differentiation.
//
// Every operation that involves a tensor with requires_grad() records its
// parents and a pullback closure on the output node. Nodes carry a creation
// sequence number, so sorting the ancestors of a root by descending sequence
// yields a valid reverse topological order. backward() replays that order.
//
// Broadcasting is limited to scalar-with-tensor: binary ops accept either
// two tensors of identical shape, or one operand with exactly one element.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gridmoe {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    // Writable view of a leaf tensor's values. Only valid while no live
    // computation depends on this tensor (e.g. between optimizer steps).
    std::span<double> mutable_data();

    bool requires_grad() const;
    bool is_leaf() const;

    // Accumulated gradient; empty until a backward pass reaches this tensor.
    std::span<const double> grad() const;
    bool has_grad() const;
    void zero_grad();

    // Seeds d(root)/d(root) = 1 and propagates adjoints. Leaf gradients
    // accumulate across calls; intermediate gradients are recomputed.
    void backward() const;

    // Copy of the values as a fresh leaf, detached from any computation.
    Tensor detach(bool requires_grad = false) const;

    const char* op_name() const;

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;

    friend struct detail::Node;
    friend class OpBuilder;
    friend struct ComputationRecord;
};

// Snapshot of the operations a root depends on, in execution order.
struct ComputationRecord {
    struct Entry {
        std::string op;
        std::vector<std::size_t> parents;  // indices into `entries`
        bool requires_grad = false;
    };
    std::vector<Entry> entries;

    static ComputationRecord capture(const Tensor& root);
};

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);  // throws DomainError on non-positive input
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Linear map over the last axis: out[..., o] = sum_i weight[o, i] * x[..., i] + bias[o].
// On a grid this is exactly a 1x1 convolution. `bias` may be undefined.
Tensor grid_linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// Softmax over the last axis of v / temperature, max-subtracted.
Tensor softmax(const Tensor& v, double temperature = 1.0);

// Divides each last-axis row by its L2 norm. Rows with norm below `eps`
// map to zero with zero gradient.
Tensor normalize_rows(const Tensor& x, double eps = 1e-12);

Tensor transpose(const Tensor& matrix);

// Sparse per-position mixture of affine maps over an H x W x Cin grid:
//   out[p] = sum_{n in selected[p]} gates[p, n] * (weights[n] x[p] + biases[n])
// `selected` holds `per_position` expert ids for each of the H*W positions.
// Only the listed experts are evaluated, so parameters of experts that are
// never listed receive exactly zero gradient.
Tensor routed_linear(const Tensor& x, const Tensor& gates, const Tensor& weights,
                     const Tensor& biases, std::span<const std::size_t> selected,
                     std::size_t per_position);

// Mean cross-entropy of last-axis logits against integer class labels, one
// label per row.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Mean Huber loss with transition point 1 against a constant target.
Tensor smooth_l1(const Tensor& prediction, const Tensor& target);

}  // namespace ops

// Maximum over entries of |autodiff - centered difference| / (|centered difference| + 1e-8)
// for a scalar-valued function of one parameter tensor.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                         double h = 1e-5);

}  // namespace gridmoe
