#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "dmpnet/common.hpp"

namespace dmpnet {

// Dense rank-4 extents, batch x channels x height x width.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" +
               std::to_string(h) + "x" + std::to_string(w);
    }
};

// Dense rank-4 tensor. Copies are shallow handles onto shared storage; ops
// always allocate fresh outputs, so a tensor's values never change under an
// op (in-place mutation is reserved for the optimizer and data loading).
//
// A tensor that requires grad owns a same-shape gradient buffer from the
// moment the flag is set; backward() accumulates into it.
template <class S>
class Tensor {
   public:
    using Storage = std::vector<S>;

    Tensor() : Tensor(Shape{1, 1, 1, 1}) {}

    explicit Tensor(Shape shape, bool requires_grad = false)
        : shape_(shape),
          values_(std::make_shared<Storage>()) {
        require(shape.n >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
                "tensor extents must all be >= 1, got " + shape.str());
        values_->assign(static_cast<std::size_t>(shape.numel()), S(0));
        if (requires_grad) set_requires_grad(true);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(shape, requires_grad);
    }

    static Tensor full(Shape shape, S value) {
        Tensor t(shape);
        for (auto& v : *t.values_) v = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> data) {
        Tensor t(shape);
        require(static_cast<std::int64_t>(data.size()) == shape.numel(),
                "data length " + std::to_string(data.size()) +
                    " does not match shape " + shape.str());
        *t.values_ = std::move(data);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }

    Storage& values() { return *values_; }
    const Storage& values() const { return *values_; }
    S* data() { return values_->data(); }
    const S* data() const { return values_->data(); }

    std::int64_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    S& at(int n, int c, int y, int x) { return (*values_)[index(n, c, y, x)]; }
    S at(int n, int c, int y, int x) const { return (*values_)[index(n, c, y, x)]; }

    bool requires_grad() const { return static_cast<bool>(grad_); }

    void set_requires_grad(bool flag) {
        if (flag && !grad_) {
            grad_ = std::make_shared<Storage>(values_->size(), S(0));
        } else if (!flag) {
            grad_.reset();
        }
    }

    Storage& grad() {
        require(static_cast<bool>(grad_), "tensor has no gradient buffer");
        return *grad_;
    }
    const Storage& grad() const {
        require(static_cast<bool>(grad_), "tensor has no gradient buffer");
        return *grad_;
    }

    void zero_grad() {
        if (grad_) grad_->assign(grad_->size(), S(0));
    }

    // Deep copy; the copy never requires grad.
    Tensor clone() const {
        Tensor t(shape_);
        *t.values_ = *values_;
        return t;
    }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> t(shape_);
        for (std::int64_t i = 0; i < numel(); ++i)
            t.values()[i] = static_cast<T>((*values_)[i]);
        return t;
    }

    std::shared_ptr<Storage> values_ptr() const { return values_; }
    std::shared_ptr<Storage> grad_ptr() const { return grad_; }

   private:
    Shape shape_;
    std::shared_ptr<Storage> values_;
    std::shared_ptr<Storage> grad_;
};

// Reverse-mode tape. Ops executed while a tape is active append a
// vector-Jacobian step that reads the output's gradient buffer and
// accumulates into the inputs'. backward() zeroes every watched gradient,
// seeds the loss with one and replays the steps in strict reverse order;
// everything is sequential, so repeated runs are bit-identical.
template <class S>
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    // Registers a gradient buffer so backward() can reset it before replay.
    void watch(const Tensor<S>& t) {
        auto g = t.grad_ptr();
        if (!g) return;
        if (seen_.insert(g.get()).second) watched_.push_back(std::move(g));
    }

    std::size_t size() const { return steps_.size(); }

    void backward(const Tensor<S>& loss) {
        require(loss.numel() == 1,
                "backward expects a scalar loss, got shape " + loss.shape().str());
        for (auto& g : watched_) g->assign(g->size(), S(0));
        if (!loss.requires_grad()) return;  // loss disconnected from any leaf
        loss.grad_ptr()->at(0) = S(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

   private:
    std::vector<std::function<void()>> steps_;
    std::vector<std::shared_ptr<typename Tensor<S>::Storage>> watched_;
    std::unordered_set<const void*> seen_;
};

template <class S>
class TapeScope {
   public:
    explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::active()) {
        Tape<S>::active() = &tape;
    }
    ~TapeScope() { Tape<S>::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    Tape<S>* prev_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dmpnet
