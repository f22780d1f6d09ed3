#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bvt/errors.hpp"

namespace bvt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
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

template <class Real>
class TensorT;
template <class Real>
class Tape;

namespace detail {

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

template <class Real>
struct TapeState;

template <class Real>
struct TensorImpl {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty == no gradient recorded
    bool requires_grad = false;
    std::weak_ptr<TapeState<Real>> tape;
    std::uint64_t epoch = 0;
    std::size_t node = kNoNode;

    std::vector<Real>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), Real(0));
        return grad;
    }
};

template <class Real>
using ImplPtr = std::shared_ptr<TensorImpl<Real>>;

template <class Real>
struct Record {
    const char* op;
    ImplPtr<Real> out;
    std::vector<ImplPtr<Real>> inputs;
    // Receives d(loss)/d(out) and accumulates into the inputs that require grad.
    std::function<void(std::span<const Real>)> backward;
};

template <class Real>
struct TapeState {
    std::vector<Record<Real>> records;
    std::uint64_t epoch = 0;
    bool consumed = false;
};

template <class Real>
std::shared_ptr<TapeState<Real>>*& active_tape_slot() {
    thread_local std::shared_ptr<TapeState<Real>>* slot = nullptr;
    return slot;
}

template <class Real>
std::shared_ptr<TapeState<Real>> active_tape() {
    auto* slot = active_tape_slot<Real>();
    return slot ? *slot : nullptr;
}

}  // namespace detail

/// Define-by-run recording of differentiable operations.
///
/// A tape is made active on the current thread with a TapeScope; every
/// operation whose inputs require gradients is appended while it is active.
/// reset() bumps the epoch, which invalidates tensors recorded earlier.
template <class Real>
class Tape {
   public:
    Tape() : state_(std::make_shared<detail::TapeState<Real>>()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void reset() {
        state_->records.clear();
        state_->epoch += 1;
        state_->consumed = false;
    }

    std::size_t size() const { return state_->records.size(); }
    std::uint64_t epoch() const { return state_->epoch; }
    bool consumed() const { return state_->consumed; }

    std::size_t count(std::string_view op) const {
        std::size_t n = 0;
        for (const auto& r : state_->records) n += (op == r.op);
        return n;
    }

   private:
    template <class>
    friend class TapeScope;
    std::shared_ptr<detail::TapeState<Real>> state_;
};

template <class Real>
class TapeScope {
   public:
    explicit TapeScope(Tape<Real>& tape) : previous_(detail::active_tape_slot<Real>()) {
        detail::active_tape_slot<Real>() = &tape.state_;
    }
    ~TapeScope() { detail::active_tape_slot<Real>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    std::shared_ptr<detail::TapeState<Real>>* previous_;
};

/// Suspends recording on the current thread (evaluation, finite differences).
template <class Real>
class NoTapeScope {
   public:
    NoTapeScope() : previous_(detail::active_tape_slot<Real>()) { detail::active_tape_slot<Real>() = nullptr; }
    ~NoTapeScope() { detail::active_tape_slot<Real>() = previous_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

   private:
    std::shared_ptr<detail::TapeState<Real>>* previous_;
};

/// Dense row-major tensor handle.
///
/// Copies share the underlying node (handle semantics, as with every tape-based
/// autodiff library). Values of recorded tensors are never modified; parameter
/// leaves are updated in place only by optimizers through mutable_data().
template <class Real>
class TensorT {
   public:
    using value_type = Real;

    TensorT() : impl_(std::make_shared<detail::TensorImpl<Real>>()) {
        impl_->data.assign(1, Real(0));
    }

    explicit TensorT(Shape shape, Real fill = Real(0), bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<Real>>()) {
        impl_->data.assign(numel_of(shape), fill);
        impl_->shape = std::move(shape);
        impl_->requires_grad = requires_grad;
    }

    TensorT(Shape shape, std::vector<Real> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<Real>>()) {
        if (numel_of(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(numel_of(shape)) + " values, got " +
                                 std::to_string(data.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static TensorT scalar(Real v) { return TensorT(Shape{}, std::vector<Real>{v}); }

    static TensorT from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
        std::vector<Real> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged rows in from_rows");
            data.insert(data.end(), r.begin(), r.end());
        }
        return TensorT(Shape{rows.size(), cols}, std::move(data));
    }

    static TensorT vector(std::initializer_list<Real> values) {
        return TensorT(Shape{values.size()}, std::vector<Real>(values));
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }

    std::span<const Real> data() const { return impl_->data; }
    const std::vector<Real>& values() const { return impl_->data; }

    // Only valid for tensors that are not recorded on a tape (parameters, inputs).
    std::span<Real> mutable_data() {
        if (impl_->node != detail::kNoNode) {
            throw TapeError("cannot mutate a tensor recorded on a tape");
        }
        return impl_->data;
    }

    Real item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    Real operator[](std::size_t i) const { return impl_->data[i]; }
    Real at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) {
        impl_->requires_grad = on;
        if (!on) impl_->grad.clear();
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const Real> grad() const { return impl_->grad; }
    TensorT grad_tensor() const {
        if (!has_grad()) return TensorT(shape());
        return TensorT(shape(), impl_->grad);
    }
    void zero_grad() { impl_->grad.clear(); }
    void set_grad(std::vector<Real> g) {
        if (g.size() != numel()) throw DimensionError("gradient size mismatch");
        impl_->grad = std::move(g);
    }

    bool on_tape() const { return impl_->node != detail::kNoNode; }

    // Fresh leaf with the same values and no gradient history.
    TensorT detach() const { return TensorT(shape(), impl_->data); }

    // Same values, new leaf that tracks gradients.
    TensorT leaf_copy(bool requires_grad = true) const {
        return TensorT(shape(), impl_->data, requires_grad);
    }

    const detail::ImplPtr<Real>& impl() const { return impl_; }
    static TensorT wrap(detail::ImplPtr<Real> p) {
        TensorT t;
        t.impl_ = std::move(p);
        return t;
    }

   private:
    detail::ImplPtr<Real> impl_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

namespace detail {

// Appends an operation to the active tape when any input requires gradients.
// The output requires gradients exactly when it was recorded.
template <class Real>
TensorT<Real> record(const char* op, Shape shape, std::vector<Real> data,
                     std::vector<ImplPtr<Real>> inputs,
                     std::function<void(std::span<const Real>)> backward) {
    TensorT<Real> out(std::move(shape), std::move(data));
    bool tracked = false;
    for (const auto& in : inputs) tracked = tracked || in->requires_grad;
    if (!tracked) return out;
    auto tape = active_tape<Real>();
    if (!tape) return out;  // inference: no recording
    for (const auto& in : inputs) {
        if (in->node == kNoNode) continue;
        auto owner = in->tape.lock();
        if (owner != tape) throw TapeError(std::string(op) + ": input recorded on a different tape");
        if (in->epoch != tape->epoch) throw TapeError(std::string(op) + ": input from a stale tape epoch");
    }
    auto impl = out.impl();
    impl->requires_grad = true;
    impl->tape = tape;
    impl->epoch = tape->epoch;
    impl->node = tape->records.size();
    tape->records.push_back(Record<Real>{op, impl, std::move(inputs), std::move(backward)});
    return out;
}

template <class Real>
std::shared_ptr<TapeState<Real>> checked_tape(const TensorT<Real>& loss) {
    if (loss.numel() != 1) {
        throw TapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const auto& impl = loss.impl();
    if (impl->node == kNoNode) throw TapeError("backward on a tensor detached from any tape");
    auto tape = impl->tape.lock();
    if (!tape) throw TapeError("backward on a tensor whose tape no longer exists");
    if (tape->epoch != impl->epoch) throw TapeError("backward on a stale tape epoch");
    if (tape->consumed) throw TapeError("backward already ran on this tape; reset it first");
    return tape;
}

// Reverse sweep shared by backward() and relevance propagation. `transform`
// may rewrite the incoming gradient of each record before its rule runs.
template <class Real, class Transform>
void reverse_sweep(TapeState<Real>& tape, std::size_t last, Transform&& transform) {
    for (std::size_t i = last + 1; i-- > 0;) {
        auto& rec = tape.records[i];
        if (rec.out->grad.empty()) continue;
        rec.backward(transform(rec));
    }
    tape.consumed = true;
}

}  // namespace detail

/// Accumulates d(loss)/d(leaf) into every leaf that requires gradients.
/// Intermediate tensors keep their gradients too (attention maps and block
/// activations are read from them).
template <class Real>
void backward(const TensorT<Real>& loss) {
    auto tape = detail::checked_tape(loss);
    auto& impl = *loss.impl();
    impl.grad_buffer()[0] += Real(1);
    detail::reverse_sweep<Real>(*tape, impl.node,
                                [](const detail::Record<Real>& r) { return std::span<const Real>(r.out->grad); });
}

}  // namespace bvt
