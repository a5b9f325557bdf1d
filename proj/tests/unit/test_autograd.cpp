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

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "varikit/autograd.hpp"

using namespace varikit;
using vt::max_fd_error;
using vt::random_tensor;

namespace {

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autograd, MatmulMatchesNaiveLoops)
{
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
        const auto a = random_tensor(rng, Shape{m, k});
        const auto b = random_tensor(rng, Shape{k, n});
        Tape<double> tape;
        const auto got = matmul(tape.constant(a), tape.constant(b)).value();
        const auto want = vt::naive_matmul(a, b);
        ASSERT_EQ(got.shape(), want.shape());
        for (std::size_t i = 0; i < got.numel(); ++i) {
            EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
        }
    }
}

TEST(Autograd, LinearIsInputTimesTransposedWeightPlusBias)
{
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::matrix({{1, 2}}));
    auto w = tape.constant(Tensor<double>::matrix({{1, 0}, {0, 1}, {1, 1}}));
    auto b = tape.constant(Tensor<double>::vector({10, 20, 30}));
    const auto y = linear(x, w, b).value();
    EXPECT_EQ(y.shape(), (Shape{1, 3}));
    EXPECT_EQ(y(0, 0), 11.0);
    EXPECT_EQ(y(0, 1), 22.0);
    EXPECT_EQ(y(0, 2), 33.0);
}

TEST(Autograd, SoftmaxHandValues)
{
    Tape<double> tape;
    const auto y = softmax(tape.constant(Tensor<double>::matrix({{0.0, std::log(3.0)}, {5.0, 5.0}}))).value();
    EXPECT_NEAR(y(0, 0), 0.25, 1e-15);
    EXPECT_NEAR(y(0, 1), 0.75, 1e-15);
    EXPECT_EQ(y(1, 0), 0.5);
    EXPECT_EQ(y(1, 1), 0.5);
}

TEST(Autograd, SoftmaxOfSingleColumnIsExactlyOne)
{
    Rng rng(3);
    Tape<float> tape;
    const auto y = softmax(tape.constant(random_tensor<float>(rng, Shape{6, 1}, -50, 50))).value();
    for (float v : y.data()) {
        EXPECT_EQ(v, 1.0f);
    }
}

TEST(Autograd, SoftmaxRejectsEmptyRows)
{
    Tape<double> tape;
    EXPECT_THROW(softmax(tape.constant(Tensor<double>::zeros(Shape{2, 0}))), DimensionError);
}

TEST(Autograd, RmsNormMatchesDefinition)
{
    Rng rng(5);
    const auto x = random_tensor(rng, Shape{3, 4});
    const auto g = random_tensor(rng, Shape{4});
    Tape<double> tape;
    const auto y = rms_norm(tape.constant(x), tape.constant(g)).value();
    for (std::size_t i = 0; i < 3; ++i) {
        double ms = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            ms += x(i, j) * x(i, j);
        }
        const double inv = 1.0 / std::sqrt(ms / 4 + 1e-6);
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_NEAR(y(i, j), x(i, j) * inv * g.data()[j], 1e-12);
        }
    }
}

TEST(Autograd, GroupWeightedSumMatchesLoops)
{
    Rng rng(9);
    const std::size_t m = 3, k = 2, d = 4;
    const auto a = random_tensor(rng, Shape{m, k});
    const auto h = random_tensor(rng, Shape{m * k, d});
    Tape<double> tape;
    const auto y = group_weighted_sum(tape.constant(a), tape.constant(h)).value();
    ASSERT_EQ(y.shape(), (Shape{m, d}));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < k; ++j) {
                s += a(i, j) * h(i * k + j, c);
            }
            EXPECT_NEAR(y(i, c), s, 1e-12);
        }
    }
}

TEST(Autograd, ShapeOpsMoveRowsAsDocumented)
{
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::matrix({{1, 2}, {3, 4}}));
    const auto padded = pad_rows(x, 3).value();
    EXPECT_EQ(padded.shape(), (Shape{3, 2}));
    EXPECT_EQ(padded(2, 0), 0.0);
    const auto rep = repeat_rows(x, 2).value();
    EXPECT_EQ(rep.shape(), (Shape{4, 2}));
    EXPECT_EQ(rep(1, 1), 2.0);
    EXPECT_EQ(rep(2, 0), 3.0);
    const auto cat = concat_cols<double>({x, x}).value();
    EXPECT_EQ(cat.shape(), (Shape{2, 4}));
    EXPECT_EQ(cat(1, 3), 4.0);
    EXPECT_EQ(slice_rows(x, 1, 1).value()(0, 1), 4.0);
    EXPECT_EQ(slice_cols(x, 1, 1).value()(1, 0), 4.0);
    EXPECT_EQ(reshape(x, Shape{1, 4}).value()(0, 2), 3.0);
    EXPECT_THROW(reshape(x, Shape{3}), DimensionError);
}

TEST(Autograd, MseExamples)
{
    Tape<double> tape;
    auto a = tape.constant(Tensor<double>::full(Shape{3, 2}, 1.0));
    auto z = tape.constant(Tensor<double>::zeros(Shape{3, 2}));
    EXPECT_EQ(mse(a, a).value().item(), 0.0);
    EXPECT_EQ(mse(a, z).value().item(), 1.0);
    EXPECT_THROW(mse(a, tape.constant(Tensor<double>::zeros(Shape{2, 3}))), ContractError);
}

TEST(Autograd, CrossEntropyIgnoresNegativeLabels)
{
    Tape<double> tape;
    auto l = tape.constant(Tensor<double>::matrix({{0.0, std::log(3.0)}, {100.0, -100.0}}));
    const std::vector<int> labels{1, -1};
    EXPECT_NEAR(cross_entropy(l, std::span<const int>(labels)).value().item(), -std::log(0.75), 1e-14);
}

TEST(Autograd, BackwardNeedsScalarLoss)
{
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::zeros(Shape{2}), true);
    EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Autograd, FrozenLeavesGetNoGradient)
{
    Tape<double> tape;
    auto w = tape.leaf(Tensor<double>::full(Shape{2, 2}, 1.0), false);
    auto x = tape.leaf(Tensor<double>::full(Shape{1, 2}, 1.0), true);
    tape.backward(sum(linear(x, w)));
    EXPECT_EQ(tape.grad(w), nullptr);
    ASSERT_NE(tape.grad(x), nullptr);
    EXPECT_EQ((*tape.grad(x))[0], 2.0);
}

TEST(Autograd, MixingTapesIsAContractError)
{
    Tape<double> a, b;
    EXPECT_THROW(add(a.constant(Tensor<double>::scalar(1)), b.constant(Tensor<double>::scalar(1))), ContractError);
}

// Gradient properties: every differentiable op agrees with central differences on random inputs.

TEST(AutogradProperty, MatmulLinearAndBias)
{
    Rng rng(21);
    for (int t = 0; t < 10; ++t) {
        const std::size_t n = 1 + rng.below(4), i = 1 + rng.below(4), o = 1 + rng.below(4);
        EXPECT_LT(max_fd_error({random_tensor(rng, Shape{n, i}), random_tensor(rng, Shape{o, i}),
                                random_tensor(rng, Shape{o})},
                               [](Tape<double>&, const std::vector<Var<double>>& v) {
                                   return sum_squares(linear(v[0], v[1], v[2]));
                               }),
                  kTol);
    }
}

TEST(AutogradProperty, SoftmaxReluAndAdd)
{
    Rng rng(22);
    for (int t = 0; t < 10; ++t) {
        const auto a = random_tensor(rng, Shape{3, 4});
        const auto w = random_tensor(rng, Shape{3, 4});
        EXPECT_LT(max_fd_error({a, w},
                               [](Tape<double>&, const std::vector<Var<double>>& v) {
                                   auto s = softmax(add(v[0], scale(v[1], 0.5)));
                                   return sum_squares(add(relu(v[0]), s));
                               }),
                  kTol);
    }
}

TEST(AutogradProperty, RmsNormAndMeanRows)
{
    Rng rng(23);
    for (int t = 0; t < 10; ++t) {
        EXPECT_LT(max_fd_error({random_tensor(rng, Shape{3, 5}), random_tensor(rng, Shape{5})},
                               [](Tape<double>&, const std::vector<Var<double>>& v) {
                                   return sum_squares(mean_rows(rms_norm(v[0], v[1])));
                               }),
                  kTol);
    }
}

TEST(AutogradProperty, RowShapingOps)
{
    Rng rng(24);
    for (int t = 0; t < 10; ++t) {
        EXPECT_LT(max_fd_error({random_tensor(rng, Shape{3, 2}), random_tensor(rng, Shape{6, 2})},
                               [](Tape<double>&, const std::vector<Var<double>>& v) {
                                   auto r = repeat_rows(v[0], 2);
                                   auto c = concat_cols<double>({r, v[1]});
                                   auto p = pad_rows(slice_cols(c, 1, 3), 8);
                                   auto q = reshape(slice_rows(p, 1, 6), Shape{3, 6});
                                   return sum_squares(q);
                               }),
                  kTol);
    }
}

TEST(AutogradProperty, GroupWeightedSumBothInputs)
{
    Rng rng(25);
    for (int t = 0; t < 10; ++t) {
        const std::size_t m = 1 + rng.below(3), k = 1 + rng.below(3), d = 1 + rng.below(4);
        EXPECT_LT(max_fd_error({random_tensor(rng, Shape{m, k}), random_tensor(rng, Shape{m * k, d})},
                               [](Tape<double>&, const std::vector<Var<double>>& v) {
                                   return sum_squares(group_weighted_sum(v[0], v[1]));
                               }),
                  kTol);
    }
}

TEST(AutogradProperty, EmbeddingMseAndCrossEntropy)
{
    Rng rng(26);
    const std::vector<int> ids{2, 0, 2, 1};
    const std::vector<int> labels{1, -1, 0, 2};
    for (int t = 0; t < 10; ++t) {
        EXPECT_LT(max_fd_error({random_tensor(rng, Shape{3, 3}), random_tensor(rng, Shape{4, 3})},
                               [&](Tape<double>&, const std::vector<Var<double>>& v) {
                                   auto e = embedding(v[0], std::span<const int>(ids));
                                   return add(mse(e, v[1]), cross_entropy(e, std::span<const int>(labels)));
                               }),
                  kTol);
    }
}
