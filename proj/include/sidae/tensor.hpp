#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sidae/errors.hpp"

namespace sidae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

enum class DType : std::uint8_t { float32 = 0, float64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
    return DType::float32;
}
template <>
constexpr DType dtype_of<double>() {
    return DType::float64;
}

template <typename T>
struct TensorImpl;

// One recorded operation. Parents are owned so the graph stays alive as long
// as its output does; `output` is non-owning (the output owns this node).
template <typename T>
struct GraphNode {
    std::uint64_t id = 0;
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    TensorImpl<T>* output = nullptr;
    std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty means "no gradient yet"
    bool requires_grad = false;
    std::shared_ptr<GraphNode<T>> node;

    // Gradient slot for accumulation, or nullptr when this tensor is not tracked.
    T* grad_slot() {
        if (!requires_grad) return nullptr;
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad.data();
    }
};

namespace detail {
inline std::atomic<std::uint64_t>& node_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

/// Shared handle to an n-dimensional row-major buffer with optional gradient
/// tracking. Copies alias the same storage.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    static constexpr DType dtype() { return dtype_of<T>(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    std::vector<T>& storage() { return impl_->data; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !impl_->node; }
    std::string_view op() const { return impl_->node ? impl_->node->op : std::string_view("leaf"); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    // New leaf sharing no storage or history with this tensor.
    Tensor detach() const { return from(impl_->shape, impl_->data, false); }

    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

    void backward() const;

   private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

/// Builds an op result and, when any parent is tracked, records the node.
/// `backward` receives the finished output (its grad and data) and adds into
/// the parents' grad slots.
template <typename T, typename Backward>
Tensor<T> record(std::string_view op, Shape shape, std::vector<T> values,
                 std::initializer_list<Tensor<T>> parents, Backward&& backward) {
    auto out = Tensor<T>::from(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool tracked = false;
    for (const auto& p : parents) tracked = tracked || p.requires_grad();
    if (!tracked) return out;
    auto node = std::make_shared<GraphNode<T>>();
    node->id = detail::node_counter().fetch_add(1, std::memory_order_relaxed) + 1;
    node->op = op;
    for (const auto& p : parents) node->parents.push_back(p.impl());
    node->output = out.impl().get();
    node->backward = std::forward<Backward>(backward);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
    return out;
}

/// Reverse-mode sweep. Node ids increase with creation, so descending id is a
/// reverse topological order and the accumulation order is deterministic.
template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!impl_->requires_grad) return;
    std::vector<GraphNode<T>*> nodes;
    std::unordered_set<const GraphNode<T>*> seen;
    std::vector<TensorImpl<T>*> stack{impl_.get()};
    while (!stack.empty()) {
        TensorImpl<T>* t = stack.back();
        stack.pop_back();
        GraphNode<T>* n = t->node.get();
        if (!n || !seen.insert(n).second) continue;
        nodes.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->id > b->id; });

    impl_->grad_slot()[0] += T(1);
    for (GraphNode<T>* n : nodes) {
        if (n->output->grad.empty()) continue;
        n->backward(*n->output);
    }
    // Intermediate gradients are not needed after the sweep.
    for (GraphNode<T>* n : nodes) {
        if (n->output != impl_.get()) {
            n->output->grad.clear();
            n->output->grad.shrink_to_fit();
        }
    }
}

}  // namespace sidae
