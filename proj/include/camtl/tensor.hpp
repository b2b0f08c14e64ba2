#pragma once

// Dense 64-bit tensors with a dynamic reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared graph node. Leaves (parameters,
// inputs) own their data; every op output records its parents and a backward
// rule. backward() walks the graph once in reverse topological order and
// accumulates into the grad of every reachable leaf that requires it.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace camtl {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using GradBuffers = std::vector<std::vector<double>>;

// Receives the output gradient and writes one buffer per parent. Buffers for
// parents that do not require grad are left empty and must not be touched.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      GradBuffers& grad_in)>;

inline std::atomic<std::uint64_t>& node_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;
    std::vector<NodePtr> parents;
    BackwardFn backward;
    std::string op = "leaf";
    std::uint64_t id = node_counter().fetch_add(1, std::memory_order_relaxed);
    bool consumed = false;

    bool is_leaf() const { return op == "leaf"; }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({}, {value}, requires_grad);
    }

    static Tensor vector(std::vector<double> values, bool requires_grad = false) {
        const auto n = values.size();
        return from({n}, std::move(values), requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return from({rows, cols}, std::move(values), requires_grad);
    }

    static Tensor identity(std::size_t n, bool requires_grad = false) {
        std::vector<double> v(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
        return from({n, n}, std::move(v), requires_grad);
    }

    template <class Rng>
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = dist(rng);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= rank()) throw DimensionError("dimension index out of range for " + shape_str(shape()));
        return node().shape[i];
    }
    std::size_t numel() const { return node().data.size(); }

    std::span<const double> data() const { return node().data; }
    // Direct write access. Reserved for leaves: optimizers, initializers and
    // finite-difference probes.
    std::span<double> mutable_data() {
        if (!node().is_leaf()) throw UsageError("mutable_data() on a non-leaf tensor (" + node().op + ")");
        return node().data;
    }

    double item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return node().data[0];
    }
    double at(std::size_t i) const { return node().data.at(i); }
    double at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw DimensionError("at(r, c) on tensor of shape " + shape_str(shape()));
        return node().data.at(r * dim(1) + c);
    }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool on) {
        if (!node().is_leaf()) throw UsageError("requires_grad can only be toggled on leaves");
        node().requires_grad = on;
        if (!on) node().grad.reset();
    }

    bool has_grad() const { return node().grad.has_value(); }
    std::span<const double> grad() const {
        if (!node().grad) throw UsageError("tensor has no gradient");
        return *node().grad;
    }
    void zero_grad() { node().grad.reset(); }

    // New leaf holding a copy of the values, outside any graph.
    Tensor detach() const { return from(shape(), node().data, false); }

    const std::string& op_name() const { return node().op; }
    std::uint64_t id() const { return node().id; }
    bool is_leaf() const { return node().is_leaf(); }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const detail::NodePtr& node_ptr() const { return node_; }
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    detail::Node& node() const {
        if (!node_) throw UsageError("use of an undefined tensor");
        return *node_;
    }
    detail::NodePtr node_;
};

// Throws if any value is NaN or infinite. Op outputs are checked
// automatically in debug builds.
inline void assert_finite(const Tensor& t, const char* where = "tensor") {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + where);
    }
}

namespace detail {

// Wraps a freshly computed value as an op node. When recording is disabled or
// no input requires grad, the result is a plain constant leaf.
inline Tensor make_op(std::string op, Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs, BackwardFn backward) {
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
#ifndef NDEBUG
    for (double v : node->data) {
        if (!std::isfinite(v)) throw NumericError("non-finite output from op " + op);
    }
#endif
    if (needs_grad) {
        node->requires_grad = true;
        node->op = std::move(op);
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline bool wants(const Node& self, std::size_t parent) {
    return self.parents[parent]->requires_grad;
}

// Sums gradient contributions element-wise in ascending value order so the
// result does not depend on the order in which consumers were recorded.
inline std::vector<double> reduce_contributions(std::vector<std::vector<double>>& parts) {
    if (parts.size() == 1) return std::move(parts.front());
    const std::size_t n = parts.front().size();
    std::vector<double> out(n, 0.0);
    std::vector<double> column(parts.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < parts.size(); ++k) column[k] = parts[k][i];
        std::sort(column.begin(), column.end());
        double acc = 0.0;
        for (double v : column) acc += v;
        out[i] = acc;
    }
    return out;
}

}  // namespace detail

// Ordered record of the operations reachable from a root; every node appears
// after all of its inputs.
class Tape {
public:
    static Tape record(const Tensor& root) {
        Tape tape;
        std::unordered_map<const detail::Node*, bool> visited;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(root.node_ptr().get(), 0);
        visited[root.node_ptr().get()] = true;
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && !visited[parent]) {
                    visited[parent] = true;
                    stack.emplace_back(parent, 0);
                }
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    std::size_t size() const { return order_.size(); }
    const std::vector<detail::Node*>& nodes() const { return order_; }

    // Position of a node in the record, or npos when absent.
    std::size_t position(const Tensor& t) const {
        auto it = std::find(order_.begin(), order_.end(), t.node_ptr().get());
        return it == order_.end() ? npos : static_cast<std::size_t>(it - order_.begin());
    }
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

private:
    std::vector<detail::Node*> order_;
};

// Reverse-mode sweep from a scalar root. Leaves accumulate into their grad;
// interior nodes are released afterwards and cannot be swept again.
inline void backward(const Tensor& root) {
    if (!root.defined()) throw UsageError("backward() on an undefined tensor");
    if (root.numel() != 1) {
        throw UsageError("backward() requires a scalar, got shape " + shape_str(root.shape()));
    }
    if (!root.requires_grad()) throw UsageError("backward() on a tensor detached from the tape");
    if (root.node_ptr()->consumed) throw UsageError("backward() already ran on this graph");

    Tape tape = Tape::record(root);
    std::unordered_map<detail::Node*, std::vector<std::vector<double>>> pending;
    pending[root.node_ptr().get()].push_back({1.0});

    const auto& order = tape.nodes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->consumed) throw UsageError("backward() reached a node from an already-swept graph");
        auto found = pending.find(node);
        if (found == pending.end()) continue;
        std::vector<double> grad = detail::reduce_contributions(found->second);
        pending.erase(found);

        if (node->is_leaf()) {
            if (!node->grad) {
                node->grad = std::move(grad);
            } else {
                auto& g = *node->grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad[i];
            }
            continue;
        }

        detail::GradBuffers grad_in(node->parents.size());
        node->backward(*node, grad, grad_in);
        for (std::size_t p = 0; p < node->parents.size(); ++p) {
            auto* parent = node->parents[p].get();
            if (!parent->requires_grad) continue;
            if (grad_in[p].size() != parent->data.size()) {
                throw UsageError("backward rule of " + node->op + " produced a malformed gradient");
            }
            pending[parent].push_back(std::move(grad_in[p]));
        }
    }

    for (detail::Node* node : order) {
        if (node->is_leaf()) continue;
        node->consumed = true;
        node->backward = nullptr;
        node->parents.clear();
    }
}

}  // namespace camtl
