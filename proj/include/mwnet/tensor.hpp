// Tensor values and the reverse-mode gradient tape.
//
// A Tensor is a dense rank-4 array. Operations (ops.hpp) record backward
// closures on a Tape when any input is tracked; Tape::backward replays them
// in reverse creation order, which is a valid topological order because an
// op's inputs always exist before its output.
#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "mwnet/common.hpp"

namespace mwnet {

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    Tensor() : store_(std::make_shared<std::vector<T>>()) {}

    Tensor(const Shape& s, std::vector<T> values)
        : shape_(s), store_(std::make_shared<std::vector<T>>(std::move(values))) {
        require(static_cast<std::int64_t>(store_->size()) == s.numel(),
                "tensor data length ", store_->size(), " does not match shape ", s.str());
    }

    static Tensor zeros(const Shape& s) {
        return Tensor(s, std::vector<T>(static_cast<std::size_t>(s.numel()), T(0)));
    }
    static Tensor full(const Shape& s, T v) {
        return Tensor(s, std::vector<T>(static_cast<std::size_t>(s.numel()), v));
    }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }

    const std::vector<T>& data() const { return *store_; }

    // Copy-on-write: safe to call while backward closures still hold the store.
    std::vector<T>& mut() {
        if (store_.use_count() > 1) store_ = std::make_shared<std::vector<T>>(*store_);
        return *store_;
    }

    T at(int n, int c, int y, int x) const {
        return (*store_)[idx(n, c, y, x)];
    }
    std::size_t idx(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }

    bool tracked() const { return tape_ != nullptr; }
    Tape<T>* tape() const { return tape_; }
    int node() const { return node_; }

    void bind(Tape<T>* tape, int node) {
        tape_ = tape;
        node_ = node;
    }
    void detach() {
        tape_ = nullptr;
        node_ = -1;
    }

    std::shared_ptr<const std::vector<T>> store() const { return store_; }

private:
    Shape shape_{};
    std::shared_ptr<std::vector<T>> store_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
};

template <typename T>
class Tape {
public:
    // back(tape, grad_of_output): accumulate into the inputs' buffers.
    using BackFn = std::function<void(Tape&, const std::vector<T>&)>;

    int push(std::int64_t numel, BackFn back) {
        nodes_.push_back(Node{numel, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Registers a leaf (parameter or checked input).
    int watch(Tensor<T>& t) {
        t.bind(this, push(t.numel(), nullptr));
        return t.node();
    }

    std::vector<T>& grad_buf(int node) {
        if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[node].numel), T(0));
        return g;
    }

    void add_grad(int node, const std::vector<T>& g) {
        auto& buf = grad_buf(node);
        require(buf.size() == g.size(), "gradient size mismatch at node ", node);
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }

    void backward(const Tensor<T>& loss) {
        require(loss.tape() == this && loss.node() >= 0, "loss is not tracked on this tape");
        require(loss.numel() == 1, "backward requires a scalar loss, got shape ", loss.shape().str());
        grads_.assign(nodes_.size(), {});
        grad_buf(loss.node())[0] = T(1);
        for (int i = loss.node(); i >= 0; --i) {
            const auto& g = grads_[static_cast<std::size_t>(i)];
            if (g.empty() || !nodes_[static_cast<std::size_t>(i)].back) continue;
            nodes_[static_cast<std::size_t>(i)].back(*this, g);
        }
    }

    // Gradient of a tracked tensor after backward(); zeros if no path reached it.
    std::vector<T> grad(const Tensor<T>& t) const {
        require(t.tape() == this && t.node() >= 0, "tensor is not tracked on this tape");
        const auto& g = grads_[static_cast<std::size_t>(t.node())];
        if (g.empty()) return std::vector<T>(static_cast<std::size_t>(t.numel()), T(0));
        return g;
    }

    std::size_t size() const { return nodes_.size(); }

    void reset() {
        nodes_.clear();
        grads_.clear();
    }

private:
    struct Node {
        std::int64_t numel;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
};

// Common tape of the tracked inputs; nullptr when none is tracked.
template <typename T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* t : inputs) {
        if (!t || !t->tracked()) continue;
        if (tape && tape != t->tape()) fail("operands belong to different tapes");
        tape = t->tape();
    }
    return tape;
}

} // namespace mwnet
