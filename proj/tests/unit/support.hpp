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

// Shared generators and oracles for the unit tests.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "varikit/autograd.hpp"
#include "varikit/rng.hpp"
#include "varikit/tensor.hpp"

namespace vt {

using namespace varikit;

template <class T = double>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0)
{
    std::vector<T> v(shape.numel());
    for (auto& x : v) {
        x = static_cast<T>(rng.uniform(lo, hi));
    }
    return Tensor<T>(shape, std::move(v));
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, int vocab)
{
    std::vector<int> t(n);
    for (auto& x : t) {
        x = rng.below_int(vocab);
    }
    return t;
}

/// Naive triple-loop a[m x k] * b[k x n].
template <class T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b)
{
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out = Tensor<T>::zeros(Shape{m, n});
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T s = 0;
            for (std::size_t t = 0; t < k; ++t) {
                s += a(i, t) * b(t, j);
            }
            o[i * n + j] = s;
        }
    }
    return out;
}

/// Largest relative deviation between the tape gradient of each leaf and central finite
/// differences of `loss_fn`, which rebuilds the loss from fresh leaves on a fresh tape.
using LossFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double max_fd_error(std::vector<Tensor<double>> params, const LossFn& loss_fn, double h = 1e-6)
{
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& p : params) {
            leaves.push_back(tape.leaf(p, true));
        }
        Var<double> loss = loss_fn(tape, leaves);
        tape.backward(loss);
        for (const auto& l : leaves) {
            analytic.push_back(tape.grad_tensor(l).buffer());
        }
    }
    auto eval = [&]() {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& p : params) {
            leaves.push_back(tape.leaf(p, false));
        }
        return loss_fn(tape, leaves).value().item();
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].numel(); ++j) {
            const double orig = params[i].data()[j];
            params[i].mutable_data()[j] = orig + h;
            const double up = eval();
            params[i].mutable_data()[j] = orig - h;
            const double down = eval();
            params[i].mutable_data()[j] = orig;
            const double fd = (up - down) / (2 * h);
            const double an = analytic[i][j];
            const double err = std::abs(fd - an) / std::max(1.0, std::max(std::abs(fd), std::abs(an)));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace vt
