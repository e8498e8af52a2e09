// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "gridmoe/error.hpp"

namespace gridmoe {

namespace detail {

std::uint64_t next_sequence() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t sequence = next_sequence();
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> pullback;

    // Gradient buffer of a parent, allocated on first use.
    std::span<double> grad_of(std::size_t parent) {
        Node& p = *parents[parent];
        if (p.grad.size() != p.data.size()) p.grad.assign(p.data.size(), 0.0);
        return p.grad;
    }
    bool parent_needs_grad(std::size_t parent) const { return parents[parent]->requires_grad; }
};

}  // namespace detail

using detail::Node;

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Builds the output node of an operation, wiring parents only when some
// input requires a gradient.
class OpBuilder {
public:
    OpBuilder(const char* op, std::initializer_list<const Tensor*> inputs) {
        node_ = std::make_shared<Node>();
        node_->op = op;
        for (const Tensor* t : inputs) {
            if (t != nullptr && t->defined() && t->node_->requires_grad) node_->requires_grad = true;
        }
        if (node_->requires_grad) {
            for (const Tensor* t : inputs) node_->parents.push_back(t && t->defined() ? t->node_ : nullptr);
        }
    }

    Node& node() { return *node_; }
    bool tracking() const { return node_->requires_grad; }

    Tensor finish(Shape shape, std::vector<double> data, std::function<void(Node&)> pullback) {
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        if (node_->requires_grad) node_->pullback = std::move(pullback);
        return Tensor(std::move(node_));
    }

private:
    std::shared_ptr<Node> node_;
};

namespace {

void check_rank(const Shape& shape) {
    if (shape.size() > kMaxRank) {
        throw ShapeError("tensor rank " + std::to_string(shape.size()) + " exceeds " +
                         std::to_string(kMaxRank));
    }
}

bool needs(Node& self, std::size_t parent) {
    return self.parents[parent] != nullptr && self.parent_needs_grad(parent);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_rank(shape);
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis out of range for shape " + shape_to_string(shape()));
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank does not match tensor rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= node_->shape[axis]) throw ShapeError("index out of range");
        flat = flat * node_->shape[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw UsageError("mutable_data() on a non-leaf tensor");
    return node_->data;
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::is_leaf() const { return !node_->pullback; }

std::span<const double> Tensor::grad() const { return node_->grad; }

bool Tensor::has_grad() const { return node_->grad.size() == node_->data.size(); }

void Tensor::zero_grad() { node_->grad.clear(); }

const char* Tensor::op_name() const { return node_->op; }

Tensor Tensor::detach(bool requires_grad) const { return from_data(shape(), node_->data, requires_grad); }

namespace {

// Ancestors of `root` that take part in differentiation, children first.
std::vector<Node*> reverse_topological(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p && p->requires_grad) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->sequence > b->sequence; });
    return order;
}

}  // namespace

void Tensor::backward() const {
    if (numel() != 1) throw UsageError("backward() requires a scalar root, got shape " + shape_to_string(shape()));
    if (!node_->requires_grad) return;

    const std::vector<Node*> order = reverse_topological(node_.get());
    for (Node* n : order) {
        if (n->pullback) n->grad.assign(n->data.size(), 0.0);
    }
    if (node_->grad.size() != 1) node_->grad.assign(1, 0.0);
    node_->grad[0] += 1.0;
    for (Node* n : order) {
        if (n->pullback) n->pullback(*n);
    }
}

ComputationRecord ComputationRecord::capture(const Tensor& root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node_.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->sequence < b->sequence; });

    ComputationRecord record;
    std::unordered_map<const Node*, std::size_t> position;
    for (Node* n : order) {
        Entry e;
        e.op = n->op;
        e.requires_grad = n->requires_grad;
        for (const auto& p : n->parents) {
            if (p) e.parents.push_back(position.at(p.get()));
        }
        position[n] = record.entries.size();
        record.entries.push_back(std::move(e));
    }
    return record;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace ops {

namespace {

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (b.numel() == 1) return a.shape();
    if (a.numel() == 1) return b.shape();
    throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " are not broadcast-compatible");
}

// Index helper for scalar-with-tensor broadcasting.
inline std::size_t bidx(std::size_t i, std::size_t n) { return n == 1 ? 0 : i; }

template <typename Fwd, typename Da, typename Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    Shape shape = broadcast_shape(a, b, op);
    const std::size_t n = shape_numel(shape);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[bidx(i, av.size())], bv[bidx(i, bv.size())]);

    OpBuilder builder(op, {&a, &b});
    return builder.finish(std::move(shape), std::move(out), [da, db](Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        if (needs(self, 0)) {
            auto ga = self.grad_of(0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                ga[bidx(i, ga.size())] += self.grad[i] * da(av[bidx(i, av.size())], bv[bidx(i, bv.size())]);
            }
        }
        if (needs(self, 1)) {
            auto gb = self.grad_of(1);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                gb[bidx(i, gb.size())] += self.grad[i] * db(av[bidx(i, av.size())], bv[bidx(i, bv.size())]);
            }
        }
    });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);

    OpBuilder builder(op, {&a});
    return builder.finish(a.shape(), std::move(out), [deriv](Node& self) {
        const auto& x = self.parents[0]->data;
        auto g = self.grad_of(0);
        for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * deriv(x[i], self.data[i]);
    });
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& a) {
    return unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    }
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
    return unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    OpBuilder builder("sum", {&a});
    return builder.finish({}, {total}, [](Node& self) {
        auto g = self.grad_of(0);
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    double total = 0.0;
    for (double v : a.data()) total += v;
    OpBuilder builder("mean", {&a});
    return builder.finish({}, {total / n}, [n](Node& self) {
        auto g = self.grad_of(0);
        for (double& v : g) v += self.grad[0] / n;
    });
}

// ---------------------------------------------------------------------------
// Structured ops

namespace {

std::size_t last_dim(const Tensor& t, const char* op) {
    if (t.rank() == 0) throw ShapeError(std::string(op) + ": expected rank >= 1");
    return t.shape().back();
}

}  // namespace

Tensor grid_linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const std::size_t cin = last_dim(x, "grid_linear");
    if (weight.rank() != 2 || weight.dim(1) != cin) {
        throw ShapeError("grid_linear: weight " + shape_to_string(weight.shape()) + " does not accept input " +
                         shape_to_string(x.shape()));
    }
    const std::size_t cout = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("grid_linear: bias " + shape_to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " outputs");
    }
    const std::size_t rows = x.numel() / cin;
    const auto xv = x.data();
    const auto wv = weight.data();
    std::vector<double> out(rows * cout);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * cin;
        for (std::size_t o = 0; o < cout; ++o) {
            const double* wo = wv.data() + o * cin;
            double acc = bias.defined() ? bias.data()[o] : 0.0;
            for (std::size_t i = 0; i < cin; ++i) acc += wo[i] * xr[i];
            out[r * cout + o] = acc;
        }
    }
    Shape shape = x.shape();
    shape.back() = cout;

    OpBuilder builder("grid_linear", {&x, &weight, bias.defined() ? &bias : nullptr});
    return builder.finish(std::move(shape), std::move(out), [rows, cin, cout](Node& self) {
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        const auto& g = self.grad;
        if (needs(self, 0)) {
            auto gx = self.grad_of(0);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double go = g[r * cout + o];
                    for (std::size_t i = 0; i < cin; ++i) gx[r * cin + i] += go * wv[o * cin + i];
                }
            }
        }
        if (needs(self, 1)) {
            auto gw = self.grad_of(1);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double go = g[r * cout + o];
                    for (std::size_t i = 0; i < cin; ++i) gw[o * cin + i] += go * xv[r * cin + i];
                }
            }
        }
        if (self.parents.size() > 2 && needs(self, 2)) {
            auto gb = self.grad_of(2);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t o = 0; o < cout; ++o) gb[o] += g[r * cout + o];
            }
        }
    });
}

Tensor softmax(const Tensor& v, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
    const std::size_t n = last_dim(v, "softmax");
    const std::size_t rows = v.numel() / n;
    const auto vv = v.data();
    std::vector<double> out(v.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = vv.data() + r * n;
        double* y = out.data() + r * n;
        double mx = in[0] / temperature;
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i] / temperature);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = std::exp(in[i] / temperature - mx);
            total += y[i];
        }
        for (std::size_t i = 0; i < n; ++i) y[i] /= total;
    }
    OpBuilder builder("softmax", {&v});
    return builder.finish(v.shape(), std::move(out), [rows, n, temperature](Node& self) {
        auto gv = self.grad_of(0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
            for (std::size_t i = 0; i < n; ++i) gv[r * n + i] += y[i] * (g[i] - dot) / temperature;
        }
    });
}

Tensor normalize_rows(const Tensor& x, double eps) {
    const std::size_t n = last_dim(x, "normalize_rows");
    const std::size_t rows = x.numel() / n;
    const auto xv = x.data();
    std::vector<double> out(x.numel(), 0.0);
    std::vector<double> norms(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) ss += xv[r * n + i] * xv[r * n + i];
        norms[r] = std::sqrt(ss);
        if (norms[r] < eps) continue;
        for (std::size_t i = 0; i < n; ++i) out[r * n + i] = xv[r * n + i] / norms[r];
    }
    OpBuilder builder("normalize_rows", {&x});
    return builder.finish(x.shape(), std::move(out), [rows, n, eps, norms = std::move(norms)](Node& self) {
        auto gx = self.grad_of(0);
        for (std::size_t r = 0; r < rows; ++r) {
            if (norms[r] < eps) continue;
            const double* y = self.data.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += y[i] * g[i];
            for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += (g[i] - y[i] * dot) / norms[r];
        }
    });
}

Tensor transpose(const Tensor& matrix) {
    if (matrix.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_to_string(matrix.shape()));
    const std::size_t rows = matrix.dim(0);
    const std::size_t cols = matrix.dim(1);
    const auto mv = matrix.data();
    std::vector<double> out(mv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = mv[r * cols + c];
    }
    OpBuilder builder("transpose", {&matrix});
    return builder.finish({cols, rows}, std::move(out), [rows, cols](Node& self) {
        auto gm = self.grad_of(0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) gm[r * cols + c] += self.grad[c * rows + r];
        }
    });
}

Tensor routed_linear(const Tensor& x, const Tensor& gates, const Tensor& weights, const Tensor& biases,
                     std::span<const std::size_t> selected, std::size_t per_position) {
    const std::size_t cin = last_dim(x, "routed_linear");
    if (weights.rank() != 3 || weights.dim(2) != cin) {
        throw ShapeError("routed_linear: expert weights " + shape_to_string(weights.shape()) +
                         " do not accept input " + shape_to_string(x.shape()));
    }
    const std::size_t n_experts = weights.dim(0);
    const std::size_t cout = weights.dim(1);
    if (biases.rank() != 2 || biases.dim(0) != n_experts || biases.dim(1) != cout) {
        throw ShapeError("routed_linear: expert biases " + shape_to_string(biases.shape()) + " do not match weights");
    }
    const std::size_t positions = x.numel() / cin;
    if (gates.numel() != positions * n_experts || last_dim(gates, "routed_linear") != n_experts) {
        throw ShapeError("routed_linear: gates " + shape_to_string(gates.shape()) + " do not match " +
                         std::to_string(positions) + " positions x " + std::to_string(n_experts) + " experts");
    }
    if (per_position == 0 || selected.size() != positions * per_position) {
        throw ShapeError("routed_linear: selection list has wrong length");
    }
    for (std::size_t id : selected) {
        if (id >= n_experts) throw ShapeError("routed_linear: expert id out of range");
    }

    const auto xv = x.data();
    const auto gv = gates.data();
    const auto wv = weights.data();
    const auto bv = biases.data();
    // Per (position, slot) expert output, kept for the gate gradient.
    std::vector<double> expert_out(positions * per_position * cout);
    std::vector<double> out(positions * cout, 0.0);
    for (std::size_t p = 0; p < positions; ++p) {
        const double* xp = xv.data() + p * cin;
        for (std::size_t s = 0; s < per_position; ++s) {
            const std::size_t e = selected[p * per_position + s];
            const double g = gv[p * n_experts + e];
            double* eo = expert_out.data() + (p * per_position + s) * cout;
            for (std::size_t o = 0; o < cout; ++o) {
                const double* w = wv.data() + (e * cout + o) * cin;
                double acc = bv[e * cout + o];
                for (std::size_t i = 0; i < cin; ++i) acc += w[i] * xp[i];
                eo[o] = acc;
                out[p * cout + o] += g * acc;
            }
        }
    }
    Shape shape = x.shape();
    shape.back() = cout;

    OpBuilder builder("routed_linear", {&x, &gates, &weights, &biases});
    std::vector<std::size_t> sel(selected.begin(), selected.end());
    return builder.finish(
        std::move(shape), std::move(out),
        [positions, per_position, n_experts, cin, cout, sel = std::move(sel),
         expert_out = std::move(expert_out)](Node& self) {
            const auto& xv = self.parents[0]->data;
            const auto& gv = self.parents[1]->data;
            const auto& wv = self.parents[2]->data;
            const bool want_x = needs(self, 0);
            const bool want_g = needs(self, 1);
            const bool want_w = needs(self, 2);
            const bool want_b = needs(self, 3);
            std::span<double> gx, gg, gw, gb;
            if (want_x) gx = self.grad_of(0);
            if (want_g) gg = self.grad_of(1);
            if (want_w) gw = self.grad_of(2);
            if (want_b) gb = self.grad_of(3);
            for (std::size_t p = 0; p < positions; ++p) {
                const double* up = self.grad.data() + p * cout;
                for (std::size_t s = 0; s < per_position; ++s) {
                    const std::size_t e = sel[p * per_position + s];
                    const double g = gv[p * n_experts + e];
                    if (want_g) {
                        const double* eo = expert_out.data() + (p * per_position + s) * cout;
                        double dot = 0.0;
                        for (std::size_t o = 0; o < cout; ++o) dot += up[o] * eo[o];
                        gg[p * n_experts + e] += dot;
                    }
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double ge = g * up[o];
                        if (want_b) gb[e * cout + o] += ge;
                        const std::size_t wrow = (e * cout + o) * cin;
                        for (std::size_t i = 0; i < cin; ++i) {
                            if (want_w) gw[wrow + i] += ge * xv[p * cin + i];
                            if (want_x) gx[p * cin + i] += ge * wv[wrow + i];
                        }
                    }
                }
            }
        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    const std::size_t k = last_dim(logits, "cross_entropy");
    const std::size_t rows = logits.numel() / k;
    if (labels.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
    }
    const auto lv = logits.data();
    std::vector<double> probs(logits.numel());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
            throw DomainError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                              std::to_string(k) + ")");
        }
        const double* z = lv.data() + r * k;
        double mx = z[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, z[i]);
        double se = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            probs[r * k + i] = std::exp(z[i] - mx);
            se += probs[r * k + i];
        }
        for (std::size_t i = 0; i < k; ++i) probs[r * k + i] /= se;
        total += mx + std::log(se) - z[labels[r]];
    }
    const double n = static_cast<double>(rows);
    OpBuilder builder("cross_entropy", {&logits});
    std::vector<int> lab(labels.begin(), labels.end());
    return builder.finish({}, {total / n}, [rows, k, n, probs = std::move(probs), lab = std::move(lab)](Node& self) {
        auto g = self.grad_of(0);
        const double up = self.grad[0] / n;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < k; ++i) {
                const double onehot = static_cast<std::size_t>(lab[r]) == i ? 1.0 : 0.0;
                g[r * k + i] += up * (probs[r * k + i] - onehot);
            }
        }
    });
}

Tensor smooth_l1(const Tensor& prediction, const Tensor& target) {
    if (prediction.shape() != target.shape()) {
        throw ShapeError("smooth_l1: prediction " + shape_to_string(prediction.shape()) + " vs target " +
                         shape_to_string(target.shape()));
    }
    const auto pv = prediction.data();
    const auto tv = target.data();
    double total = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = std::abs(pv[i] - tv[i]);
        total += d < 1.0 ? 0.5 * d * d : d - 0.5;
    }
    const double n = static_cast<double>(pv.size());
    OpBuilder builder("smooth_l1", {&prediction, &target});
    return builder.finish({}, {total / n}, [n](Node& self) {
        const auto& pv = self.parents[0]->data;
        const auto& tv = self.parents[1]->data;
        const double up = self.grad[0] / n;
        if (needs(self, 0)) {
            auto g = self.grad_of(0);
            for (std::size_t i = 0; i < pv.size(); ++i) g[i] += up * std::clamp(pv[i] - tv[i], -1.0, 1.0);
        }
        if (needs(self, 1)) {
            auto g = self.grad_of(1);
            for (std::size_t i = 0; i < pv.size(); ++i) g[i] -= up * std::clamp(pv[i] - tv[i], -1.0, 1.0);
        }
    });
}

}  // namespace ops

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
    Tensor p = point.detach(true);
    Tensor y = f(p);
    y.backward();
    const std::size_t n = p.numel();
    std::vector<double> analytic(n, 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<double> values(p.data().begin(), p.data().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double fp = f(Tensor::from_data(p.shape(), values)).item();
        values[i] = orig - h;
        const double fm = f(Tensor::from_data(p.shape(), values)).item();
        values[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8));
    }
    return worst;
}

}  // namespace gridmoe
