/*
 * Copyright (c) 2026, The varikit Authors.  All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Reverse-mode differentiation over a Wengert list.
//
// A Tape owns every value produced during one forward pass. Ops append a node
// holding the output value and, when any input participates in gradients, a
// closure that pushes the output gradient back to the inputs. backward() walks
// the list once in reverse. Nodes whose inputs are all frozen record no closure,
// so a tape used purely for inference is just an arena of values.
//
// All reductions run in a fixed index order, so a forward pass is bit-reproducible.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "varikit/errors.hpp"
#include "varikit/flops.hpp"
#include "varikit/tensor.hpp"

namespace varikit {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<T>& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = false)
    {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr, {}});
        return Var<T>{this, nodes_.size() - 1};
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Appends an op output. The closure is kept only if some input requires a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn)
    {
        return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
    }

    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn)
    {
        bool needs = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& v : inputs) {
            check_owned(v);
            needs = needs || nodes_[v.id].requires_grad;
            ids.push_back(v.id);
        }
        nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : nullptr, std::move(ids)});
        return Var<T>{this, nodes_.size() - 1};
    }

    const Tensor<T>& value(Var<T> v) const
    {
        check_owned(v);
        return nodes_[v.id].value;
    }

    bool requires_grad(Var<T> v) const
    {
        check_owned(v);
        return nodes_[v.id].requires_grad;
    }

    /// Gradient of the last backward() loss w.r.t. v; null for frozen or unreached values.
    const std::vector<T>* grad(Var<T> v) const
    {
        check_owned(v);
        const Node& n = nodes_[v.id];
        if (!n.requires_grad || n.grad.empty()) {
            return nullptr;
        }
        return &n.grad;
    }

    Tensor<T> grad_tensor(Var<T> v) const
    {
        const auto* g = grad(v);
        if (!g) {
            return Tensor<T>::zeros(value(v).shape());
        }
        return Tensor<T>(value(v).shape(), *g);
    }

    /// Accumulation buffer for an input gradient; no-op target when the input is frozen.
    std::vector<T>* accumulator(std::size_t id)
    {
        Node& n = nodes_[id];
        if (!n.requires_grad) {
            return nullptr;
        }
        if (n.grad.empty()) {
            n.grad.assign(n.value.numel(), T{});
        }
        return &n.grad;
    }

    void backward(Var<T> loss)
    {
        check_owned(loss);
        if (nodes_[loss.id].value.numel() != 1) {
            throw ContractError("backward() needs a scalar loss, got shape " + nodes_[loss.id].value.shape().str());
        }
        for (auto& n : nodes_) {
            n.grad.clear();
        }
        if (!nodes_[loss.id].requires_grad) {
            return;
        }
        nodes_[loss.id].grad.assign(1, T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && !n.grad.empty()) {
                n.backward(*this, n.grad);
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

    /// Ids of the recorded inputs of node `id`; always smaller than `id`.
    const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }

    void set_counter(FlopCounter* counter) { counter_ = counter; }
    FlopCounter* counter() const { return counter_; }

    void count(std::uint64_t flops)
    {
        if (counter_) {
            counter_->add(flops);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
        std::vector<std::size_t> inputs;
    };

    void check_owned(Var<T> v) const
    {
        if (v.tape != this || v.id >= nodes_.size()) {
            throw ContractError("value does not belong to this tape");
        }
    }

    std::vector<Node> nodes_;
    FlopCounter* counter_ = nullptr;
};

namespace detail {

template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b)
{
    if (a.tape == nullptr || a.tape != b.tape) {
        throw ContractError("operands recorded on different tapes");
    }
    return *a.tape;
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op)
{
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + t.shape().str());
    }
}

}  // namespace detail

/// C = A.B for A[m x p], B[p x q].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b)
{
    Tape<T>& tape = detail::same_tape(a, b);
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    detail::require_rank(A, 2, "matmul");
    detail::require_rank(B, 2, "matmul");
    const std::size_t m = A.dim(0), p = A.dim(1), q = B.dim(1);
    if (B.dim(0) != p) {
        throw DimensionError("matmul: inner extents differ between " + A.shape().str() + " and " + B.shape().str());
    }
    Tensor<T> C(Shape{m, q});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < p; ++l) {
            const T s = A(i, l);
            for (std::size_t j = 0; j < q; ++j) {
                C(i, j) += s * B(l, j);
            }
        }
    }
    tape.count(static_cast<std::uint64_t>(m * p * q));
    const std::size_t ia = a.id, ib = b.id;
    return tape.record(std::move(C), {a, b}, [ia, ib, m, p, q](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& A = t.value(Var<T>{&t, ia});
        const Tensor<T>& B = t.value(Var<T>{&t, ib});
        if (auto* ga = t.accumulator(ia)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t l = 0; l < p; ++l) {
                    T acc{};
                    for (std::size_t j = 0; j < q; ++j) {
                        acc += g[i * q + j] * B(l, j);
                    }
                    (*ga)[i * p + l] += acc;
                }
            }
        }
        if (auto* gb = t.accumulator(ib)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t l = 0; l < p; ++l) {
                    const T s = A(i, l);
                    for (std::size_t j = 0; j < q; ++j) {
                        (*gb)[l * q + j] += s * g[i * q + j];
                    }
                }
            }
        }
    });
}

/// y = x.W^T (+ b) for x[n x in], W[out x in], b[out]. Pass bias = nullptr for no bias.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, const Var<T>* bias = nullptr)
{
    Tape<T>& tape = detail::same_tape(x, w);
    const Tensor<T>& X = x.value();
    const Tensor<T>& W = w.value();
    detail::require_rank(X, 2, "linear");
    detail::require_rank(W, 2, "linear");
    const std::size_t n = X.dim(0), in = X.dim(1), out = W.dim(0);
    if (W.dim(1) != in) {
        throw DimensionError("linear: input " + X.shape().str() + " does not match weight " + W.shape().str());
    }
    const Tensor<T>* B = nullptr;
    if (bias) {
        detail::same_tape(x, *bias);
        B = &bias->value();
        if (B->rank() != 1 || B->dim(0) != out) {
            throw DimensionError("linear: bias " + B->shape().str() + " does not match weight " + W.shape().str());
        }
    }
    Tensor<T> Y(Shape{n, out});
    for (std::size_t i = 0; i < n; ++i) {
        const T* xr = X.data().data() + i * in;
        for (std::size_t o = 0; o < out; ++o) {
            const T* wr = W.data().data() + o * in;
            T acc{};
            for (std::size_t l = 0; l < in; ++l) {
                acc += xr[l] * wr[l];
            }
            Y(i, o) = B ? acc + (*B)[o] : acc;
        }
    }
    tape.count(static_cast<std::uint64_t>(n * in * out + (B ? n * out : 0)));
    const std::size_t ix = x.id, iw = w.id;
    const std::size_t ib = bias ? bias->id : 0;
    const bool has_bias = bias != nullptr;
    std::vector<Var<T>> inputs{x, w};
    if (bias) {
        inputs.push_back(*bias);
    }
    return tape.record(std::move(Y), inputs, [=](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& X = t.value(Var<T>{&t, ix});
        const Tensor<T>& W = t.value(Var<T>{&t, iw});
        if (auto* gx = t.accumulator(ix)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t o = 0; o < out; ++o) {
                    const T s = g[i * out + o];
                    const T* wr = W.data().data() + o * in;
                    T* dst = gx->data() + i * in;
                    for (std::size_t l = 0; l < in; ++l) {
                        dst[l] += s * wr[l];
                    }
                }
            }
        }
        if (auto* gw = t.accumulator(iw)) {
            for (std::size_t i = 0; i < n; ++i) {
                const T* xr = X.data().data() + i * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const T s = g[i * out + o];
                    T* dst = gw->data() + o * in;
                    for (std::size_t l = 0; l < in; ++l) {
                        dst[l] += s * xr[l];
                    }
                }
            }
        }
        if (has_bias) {
            if (auto* gb = t.accumulator(ib)) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t o = 0; o < out; ++o) {
                        (*gb)[o] += g[i * out + o];
                    }
                }
            }
        }
    });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias)
{
    return linear(x, w, &bias);
}

/// Elementwise a + b over identical shapes.
template <class T>
Var<T> add(Var<T> a, Var<T> b)
{
    Tape<T>& tape = detail::same_tape(a, b);
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    if (!(A.shape() == B.shape())) {
        throw DimensionError("add: shapes " + A.shape().str() + " and " + B.shape().str() + " differ");
    }
    Tensor<T> C(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) {
        C[i] = A[i] + B[i];
    }
    tape.count(A.numel());
    const std::size_t ia = a.id, ib = b.id;
    return tape.record(std::move(C), {a, b}, [ia, ib](Tape<T>& t, const std::vector<T>& g) {
        for (std::size_t id : {ia, ib}) {
            if (auto* acc = t.accumulator(id)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    (*acc)[i] += g[i];
                }
            }
        }
    });
}

/// Elementwise c * x.
template <class T>
Var<T> scale(Var<T> x, T c)
{
    Tape<T>& tape = *x.tape;
    const Tensor<T>& X = x.value();
    Tensor<T> Y(X.shape());
    for (std::size_t i = 0; i < X.numel(); ++i) {
        Y[i] = c * X[i];
    }
    tape.count(X.numel());
    const std::size_t ix = x.id;
    return tape.record(std::move(Y), {x}, [ix, c](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*acc)[i] += c * g[i];
            }
        }
    });
}

/// max(x, 0); the subgradient at 0 is 0.
template <class T>
Var<T> relu(Var<T> x)
{
    Tape<T>& tape = *x.tape;
    const Tensor<T>& X = x.value();
    Tensor<T> Y(X.shape());
    for (std::size_t i = 0; i < X.numel(); ++i) {
        Y[i] = X[i] > T{} ? X[i] : T{};
    }
    const std::size_t ix = x.id;
    return tape.record(std::move(Y), {x}, [ix](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& X = t.value(Var<T>{&t, ix});
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (X[i] > T{}) {
                    (*acc)[i] += g[i];
                }
            }
        }
    });
}

/// Softmax over the last axis (each row of a matrix, or the whole vector),
/// with max subtraction.
template <class T>
Var<T> softmax(Var<T> x)
{
    Tape<T>& tape = *x.tape;
    const Tensor<T>& X = x.value();
    if (X.rank() == 0 || X.numel() == 0) {
        throw DimensionError("softmax: empty input " + X.shape().str());
    }
    const std::size_t k = X.cols(), rows = X.rows();
    Tensor<T> Y(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = X.data().data() + r * k;
        T* yr = Y.mutable_data().data() + r * k;
        T mx = xr[0];
        for (std::size_t j = 1; j < k; ++j) {
            mx = std::max(mx, xr[j]);
        }
        T sum{};
        for (std::size_t j = 0; j < k; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < k; ++j) {
            yr[j] /= sum;
        }
    }
    tape.count(2 * static_cast<std::uint64_t>(X.numel()));
    const std::size_t ix = x.id;
    const std::size_t iy = tape.size();
    return tape.record(std::move(Y), {x}, [ix, iy, k, rows](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& Y = t.value(Var<T>{&t, iy});
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t r = 0; r < rows; ++r) {
                T dot{};
                for (std::size_t j = 0; j < k; ++j) {
                    dot += g[r * k + j] * Y[r * k + j];
                }
                for (std::size_t j = 0; j < k; ++j) {
                    (*acc)[r * k + j] += Y[r * k + j] * (g[r * k + j] - dot);
                }
            }
        }
    });
}

/// Root-mean-square normalization of each row with a learned per-feature scale.
template <class T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps = T(1e-6))
{
    Tape<T>& tape = detail::same_tape(x, gain);
    const Tensor<T>& X = x.value();
    const Tensor<T>& G = gain.value();
    detail::require_rank(X, 2, "rms_norm");
    const std::size_t n = X.dim(0), d = X.dim(1);
    if (G.rank() != 1 || G.dim(0) != d) {
        throw DimensionError("rms_norm: gain " + G.shape().str() + " does not match input " + X.shape().str());
    }
    Tensor<T> Y(X.shape());
    std::vector<T> inv(n);
    for (std::size_t i = 0; i < n; ++i) {
        T ms{};
        for (std::size_t j = 0; j < d; ++j) {
            ms += X(i, j) * X(i, j);
        }
        inv[i] = T{1} / std::sqrt(ms / static_cast<T>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) {
            Y(i, j) = X(i, j) * inv[i] * G[j];
        }
    }
    tape.count(3 * static_cast<std::uint64_t>(X.numel()));
    const std::size_t ix = x.id, ig = gain.id;
    return tape.record(std::move(Y), {x, gain}, [=, inv = std::move(inv)](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& X = t.value(Var<T>{&t, ix});
        const Tensor<T>& G = t.value(Var<T>{&t, ig});
        auto* gx = t.accumulator(ix);
        auto* gg = t.accumulator(ig);
        for (std::size_t i = 0; i < n; ++i) {
            const T s = inv[i];
            if (gg) {
                for (std::size_t j = 0; j < d; ++j) {
                    (*gg)[j] += g[i * d + j] * X(i, j) * s;
                }
            }
            if (gx) {
                T dot{};
                for (std::size_t j = 0; j < d; ++j) {
                    dot += g[i * d + j] * G[j] * X(i, j);
                }
                const T coef = dot * s * s * s / static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    (*gx)[i * d + j] += g[i * d + j] * G[j] * s - X(i, j) * coef;
                }
            }
        }
    });
}

/// Rows of table[V x d] selected by ids.
template <class T>
Var<T> embedding(Var<T> table, std::span<const int> ids)
{
    Tape<T>& tape = *table.tape;
    const Tensor<T>& E = table.value();
    detail::require_rank(E, 2, "embedding");
    const std::size_t v = E.dim(0), d = E.dim(1);
    Tensor<T> Y(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
        }
        std::copy_n(E.data().data() + static_cast<std::size_t>(ids[i]) * d, d, Y.mutable_data().data() + i * d);
    }
    const std::size_t ie = table.id;
    std::vector<int> rows(ids.begin(), ids.end());
    return tape.record(std::move(Y), {table}, [ie, d, rows = std::move(rows)](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ie)) {
            for (std::size_t i = 0; i < rows.size(); ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    (*acc)[static_cast<std::size_t>(rows[i]) * d + j] += g[i * d + j];
                }
            }
        }
    });
}

/// Same buffer viewed with a different shape of equal element count.
template <class T>
Var<T> reshape(Var<T> x, Shape shape)
{
    Tape<T>& tape = *x.tape;
    const Tensor<T>& X = x.value();
    if (shape.numel() != X.numel()) {
        throw DimensionError("reshape: cannot view " + X.shape().str() + " as " + shape.str());
    }
    const std::size_t ix = x.id;
    return tape.record(Tensor<T>(shape, X.buffer()), {x}, [ix](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*acc)[i] += g[i];
            }
        }
    });
}

/// Appends zero rows until the matrix has `total` rows.
template <class T>
Var<T> pad_rows(Var<T> x, std::size_t total)
{
    const Tensor<T>& X = x.value();
    detail::require_rank(X, 2, "pad_rows");
    if (total < X.dim(0)) {
        throw DimensionError("pad_rows: target " + std::to_string(total) + " rows is shorter than " + X.shape().str());
    }
    if (total == X.dim(0)) {
        return x;
    }
    std::vector<T> data(X.buffer());
    data.resize(total * X.dim(1), T{});
    const std::size_t ix = x.id, keep = X.numel();
    return x.tape->record(Tensor<T>(Shape{total, X.dim(1)}, std::move(data)), {x},
                          [ix, keep](Tape<T>& t, const std::vector<T>& g) {
                              if (auto* acc = t.accumulator(ix)) {
                                  for (std::size_t i = 0; i < keep; ++i) {
                                      (*acc)[i] += g[i];
                                  }
                              }
                          });
}

/// Rows [start, start + count).
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count)
{
    const Tensor<T>& X = x.value();
    detail::require_rank(X, 2, "slice_rows");
    if (start + count > X.dim(0)) {
        throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") outside " + X.shape().str());
    }
    if (start == 0 && count == X.dim(0)) {
        return x;
    }
    const std::size_t c = X.dim(1);
    std::vector<T> data(X.data().begin() + static_cast<std::ptrdiff_t>(start * c),
                        X.data().begin() + static_cast<std::ptrdiff_t>((start + count) * c));
    const std::size_t ix = x.id;
    return x.tape->record(Tensor<T>(Shape{count, c}, std::move(data)), {x},
                          [ix, start, c](Tape<T>& t, const std::vector<T>& g) {
                              if (auto* acc = t.accumulator(ix)) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*acc)[start * c + i] += g[i];
                                  }
                              }
                          });
}

/// Each row repeated `k` times consecutively: out row i*k + j = x row i.
template <class T>
Var<T> repeat_rows(Var<T> x, std::size_t k)
{
    const Tensor<T>& X = x.value();
    detail::require_rank(X, 2, "repeat_rows");
    const std::size_t m = X.dim(0), c = X.dim(1);
    Tensor<T> Y(Shape{m * k, c});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            std::copy_n(X.data().data() + i * c, c, Y.mutable_data().data() + (i * k + j) * c);
        }
    }
    const std::size_t ix = x.id;
    return x.tape->record(std::move(Y), {x}, [ix, m, k, c](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    for (std::size_t l = 0; l < c; ++l) {
                        (*acc)[i * c + l] += g[(i * k + j) * c + l];
                    }
                }
            }
        }
    });
}

/// Column-wise concatenation of matrices with equal row counts.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts)
{
    if (parts.empty()) {
        throw DimensionError("concat_cols: no operands");
    }
    Tape<T>& tape = *parts.front().tape;
    const std::size_t n = parts.front().value().dim(0);
    std::vector<std::size_t> widths, ids;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::same_tape(parts.front(), p);
        const Tensor<T>& P = p.value();
        detail::require_rank(P, 2, "concat_cols");
        if (P.dim(0) != n) {
            throw DimensionError("concat_cols: row counts differ, " + parts.front().shape().str() + " vs " +
                                 P.shape().str());
        }
        widths.push_back(P.dim(1));
        ids.push_back(p.id);
        total += P.dim(1);
    }
    Tensor<T> Y(Shape{n, total});
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor<T>& P = parts[p].value();
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(P.data().data() + i * widths[p], widths[p], Y.mutable_data().data() + i * total + off);
        }
        off += widths[p];
    }
    return tape.record(std::move(Y), parts, [n, total, widths, ids](Tape<T>& t, const std::vector<T>& g) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (auto* acc = t.accumulator(ids[p])) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < widths[p]; ++j) {
                        (*acc)[i * widths[p] + j] += g[i * total + off + j];
                    }
                }
            }
            off += widths[p];
        }
    });
}

/// Columns [start, start + width).
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t width)
{
    const Tensor<T>& X = x.value();
    detail::require_rank(X, 2, "slice_cols");
    const std::size_t n = X.dim(0), c = X.dim(1);
    if (start + width > c) {
        throw DimensionError("slice_cols: columns outside " + X.shape().str());
    }
    Tensor<T> Y(Shape{n, width});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(X.data().data() + i * c + start, width, Y.mutable_data().data() + i * width);
    }
    const std::size_t ix = x.id;
    return x.tape->record(std::move(Y), {x}, [ix, n, c, start, width](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < width; ++j) {
                    (*acc)[i * c + start + j] += g[i * width + j];
                }
            }
        }
    });
}

/// out[i] = sum_j weights[i, j] * members[i*k + j] for weights[m x k], members[(m*k) x d].
template <class T>
Var<T> group_weighted_sum(Var<T> weights, Var<T> members)
{
    Tape<T>& tape = detail::same_tape(weights, members);
    const Tensor<T>& A = weights.value();
    const Tensor<T>& H = members.value();
    detail::require_rank(A, 2, "group_weighted_sum");
    detail::require_rank(H, 2, "group_weighted_sum");
    const std::size_t m = A.dim(0), k = A.dim(1), d = H.dim(1);
    if (H.dim(0) != m * k) {
        throw DimensionError("group_weighted_sum: weights " + A.shape().str() + " do not tile members " +
                             H.shape().str());
    }
    Tensor<T> G(Shape{m, d});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const T a = A(i, j);
            const T* h = H.data().data() + (i * k + j) * d;
            T* dst = G.mutable_data().data() + i * d;
            for (std::size_t c = 0; c < d; ++c) {
                dst[c] += a * h[c];
            }
        }
    }
    tape.count(2 * static_cast<std::uint64_t>(m * k * d));
    const std::size_t ia = weights.id, ih = members.id;
    return tape.record(std::move(G), {weights, members}, [=](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& A = t.value(Var<T>{&t, ia});
        const Tensor<T>& H = t.value(Var<T>{&t, ih});
        auto* ga = t.accumulator(ia);
        auto* gh = t.accumulator(ih);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t row = (i * k + j) * d;
                if (ga) {
                    T acc{};
                    for (std::size_t c = 0; c < d; ++c) {
                        acc += g[i * d + c] * H[row + c];
                    }
                    (*ga)[i * k + j] += acc;
                }
                if (gh) {
                    const T a = A(i, j);
                    for (std::size_t c = 0; c < d; ++c) {
                        (*gh)[row + c] += a * g[i * d + c];
                    }
                }
            }
        }
    });
}

/// Mean over rows: [n x d] -> [1 x d].
template <class T>
Var<T> mean_rows(Var<T> x)
{
    const Tensor<T>& X = x.value();
    detail::require_rank(X, 2, "mean_rows");
    const std::size_t n = X.dim(0), d = X.dim(1);
    if (n == 0) {
        throw DimensionError("mean_rows: no rows");
    }
    Tensor<T> Y(Shape{1, d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            Y[j] += X(i, j);
        }
    }
    const T inv = T{1} / static_cast<T>(n);
    for (std::size_t j = 0; j < d; ++j) {
        Y[j] *= inv;
    }
    x.tape->count(X.numel());
    const std::size_t ix = x.id;
    return x.tape->record(std::move(Y), {x}, [ix, n, d, inv](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    (*acc)[i * d + j] += g[j] * inv;
                }
            }
        }
    });
}

/// Scalar sum of all entries.
template <class T>
Var<T> sum(Var<T> x)
{
    const Tensor<T>& X = x.value();
    T s{};
    for (T v : X.data()) {
        s += v;
    }
    const std::size_t ix = x.id;
    return x.tape->record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& t, const std::vector<T>& g) {
        if (auto* acc = t.accumulator(ix)) {
            for (auto& v : *acc) {
                v += g[0];
            }
        }
    });
}

/// Scalar sum of squared entries.
template <class T>
Var<T> sum_squares(Var<T> x)
{
    const Tensor<T>& X = x.value();
    T s{};
    for (T v : X.data()) {
        s += v * v;
    }
    const std::size_t ix = x.id;
    return x.tape->record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& X = t.value(Var<T>{&t, ix});
        if (auto* acc = t.accumulator(ix)) {
            for (std::size_t i = 0; i < acc->size(); ++i) {
                (*acc)[i] += T{2} * X[i] * g[0];
            }
        }
    });
}

/// Mean of squared differences over all entries.
template <class T>
Var<T> mse(Var<T> a, Var<T> b)
{
    Tape<T>& tape = detail::same_tape(a, b);
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    if (!(A.shape() == B.shape())) {
        throw ContractError("mse: shapes " + A.shape().str() + " and " + B.shape().str() + " differ");
    }
    if (A.numel() == 0) {
        throw ContractError("mse: empty operands");
    }
    T s{};
    for (std::size_t i = 0; i < A.numel(); ++i) {
        const T diff = A[i] - B[i];
        s += diff * diff;
    }
    const T inv = T{1} / static_cast<T>(A.numel());
    const std::size_t ia = a.id, ib = b.id;
    return tape.record(Tensor<T>::scalar(s * inv), {a, b}, [ia, ib, inv](Tape<T>& t, const std::vector<T>& g) {
        const Tensor<T>& A = t.value(Var<T>{&t, ia});
        const Tensor<T>& B = t.value(Var<T>{&t, ib});
        auto* ga = t.accumulator(ia);
        auto* gb = t.accumulator(ib);
        for (std::size_t i = 0; i < A.numel(); ++i) {
            const T d = T{2} * (A[i] - B[i]) * inv * g[0];
            if (ga) {
                (*ga)[i] += d;
            }
            if (gb) {
                (*gb)[i] -= d;
            }
        }
    });
}

/// Mean softmax cross-entropy of logits[n x C] rows against labels; label < 0 marks an ignored row.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels)
{
    const Tensor<T>& L = logits.value();
    detail::require_rank(L, 2, "cross_entropy");
    const std::size_t n = L.dim(0), c = L.dim(1);
    if (labels.size() != n) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             L.shape().str());
    }
    std::vector<T> probs(n * c);
    std::size_t counted = 0;
    T loss{};
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) {
            continue;
        }
        if (static_cast<std::size_t>(labels[i]) >= c) {
            throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " outside " + std::to_string(c) +
                             " classes");
        }
        T mx = L(i, 0);
        for (std::size_t j = 1; j < c; ++j) {
            mx = std::max(mx, L(i, j));
        }
        T z{};
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(L(i, j) - mx);
            z += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] /= z;
        }
        loss -= std::log(probs[i * c + static_cast<std::size_t>(labels[i])]);
        ++counted;
    }
    const T inv = counted ? T{1} / static_cast<T>(counted) : T{};
    const std::size_t il = logits.id;
    std::vector<int> lab(labels.begin(), labels.end());
    return logits.tape->record(
        Tensor<T>::scalar(loss * inv), {logits},
        [il, n, c, inv, probs = std::move(probs), lab = std::move(lab)](Tape<T>& t, const std::vector<T>& g) {
            if (auto* acc = t.accumulator(il)) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (lab[i] < 0) {
                        continue;
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        const T y = static_cast<std::size_t>(lab[i]) == j ? T{1} : T{};
                        (*acc)[i * c + j] += (probs[i * c + j] - y) * inv * g[0];
                    }
                }
            }
        });
}

/// Sum of two scalars, or a*x + y when weighting a term.
template <class T>
Var<T> weighted_sum(Var<T> x, T a, Var<T> y)
{
    return add(scale(x, a), y);
}

}  // namespace varikit
