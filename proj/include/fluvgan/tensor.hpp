#pragma once

#include <atomic>
#include <memory>
#include <utility>

#include "common.hpp"

namespace fluvgan {

class Tensor;

// Backward rule of a recorded operation: given the op's output, the incoming
// gradient, and a per-parent "needed" mask, return one gradient per parent
// (leave it undefined where the mask is false). Rules are written in terms of
// other differentiable ops, so gradients can themselves be differentiated.
using VjpFn = std::function<std::vector<Tensor>(const Tensor& self, const Tensor& grad_out,
                                                const std::vector<char>& need)>;

struct TensorNode {
    Shape shape;
    rvec data;
    bool requires_grad = false;
    rvec grad;  // leaf accumulation buffer, sized on first use

    uint64_t id = 0;
    std::vector<Tensor> parents;
    VjpFn vjp;
    const char* op = "leaf";
};

namespace detail {
inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
inline bool& grad_mode_ref() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_ref(); }

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_ref()) { detail::grad_mode_ref() = false; }
    ~NoGradGuard() { detail::grad_mode_ref() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct EnableGradGuard {
    EnableGradGuard() : prev_(detail::grad_mode_ref()) { detail::grad_mode_ref() = true; }
    ~EnableGradGuard() { detail::grad_mode_ref() = prev_; }

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, rvec data, bool requires_grad = false) {
        if (i64(data.size()) != fluvgan::numel(shape))
            throw ConfigError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        n->id = detail::next_node_id();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        rvec d((size_t)(fluvgan::numel(shape)), real(0));
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, real value, bool requires_grad = false) {
        rvec d((size_t)(fluvgan::numel(shape)), value);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(real value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
        rvec d((size_t)(fluvgan::numel(shape)));
        for (real& x : d) x = real(rng.normal());
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return bool(n_); }
    const Shape& shape() const { return node().shape; }
    i64 numel() const { return i64(node().data.size()); }
    i64 rank() const { return i64(node().shape.size()); }

    rvec& data() { return node().data; }
    const rvec& data() const { return node().data; }

    real item() const {
        if (numel() != 1) throw ConfigError("item() on non-scalar tensor " + shape_str(shape()));
        return node().data[0];
    }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool rg) { node().requires_grad = rg; }

    // Leaf gradient buffer; allocated (zeroed) on first access.
    rvec& grad() {
        auto& n = node();
        if (n.grad.empty()) n.grad.assign(n.data.size(), real(0));
        return n.grad;
    }
    bool has_grad() const { return !node().grad.empty(); }
    void zero_grad() {
        auto& g = node().grad;
        if (!g.empty()) g.assign(g.size(), real(0));
    }

    bool is_leaf() const { return !node().vjp; }
    uint64_t id() const { return node().id; }
    const char* op_name() const { return node().op; }
    const std::vector<Tensor>& parents() const { return node().parents; }

    // Copy of the values as a fresh leaf outside any graph.
    Tensor detach() const { return from(shape(), data(), false); }

    TensorNode* raw() const { return n_.get(); }

    friend Tensor make_op(const char* name, Shape shape, rvec data,
                          std::vector<Tensor> parents, VjpFn vjp);

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
    TensorNode& node() const {
        if (!n_) throw ConfigError("use of undefined tensor");
        return *n_;
    }
    std::shared_ptr<TensorNode> n_;
};

// All primitives funnel through here. Graph edges are recorded only when grad
// mode is on and some parent requires grad; otherwise the result is a plain
// value and the inputs can be freed as soon as the caller drops them.
inline Tensor make_op(const char* name, Shape shape, rvec data,
                      std::vector<Tensor> parents, VjpFn vjp) {
    Tensor t = Tensor::from(std::move(shape), std::move(data), false);
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const Tensor& p : parents) any = any || p.requires_grad();
        track = any;
    }
    if (track) {
        TensorNode& n = *t.raw();
        n.requires_grad = true;
        n.parents = std::move(parents);
        n.vjp = std::move(vjp);
        n.op = name;
    }
    return t;
}

}  // namespace fluvgan
