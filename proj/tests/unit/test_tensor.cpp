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
#include <limits>

#include "support.hpp"
#include "varikit/tensor.hpp"

using namespace varikit;

TEST(Shape, RankCappedAtThree)
{
    EXPECT_NO_THROW((Shape{2, 3, 4}));
    EXPECT_THROW((Shape{1, 2, 3, 4}), DimensionError);
}

TEST(Shape, ScalarAndExtents)
{
    const Shape s = Shape::scalar();
    EXPECT_EQ(s.rank(), 0u);
    EXPECT_EQ(s.numel(), 1u);
    const Shape m{5, 4};
    EXPECT_EQ(m.numel(), 20u);
    EXPECT_EQ(m.last(), 4u);
    EXPECT_EQ(m.str(), "[5x4]");
    EXPECT_THROW(m[2], DimensionError);
    EXPECT_EQ(m, (Shape{5, 4}));
    EXPECT_NE(m, (Shape{4, 5}));
}

TEST(Tensor, ConstructorsAndAccess)
{
    const auto m = Tensor<float>::matrix({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(m.shape(), (Shape{2, 3}));
    EXPECT_EQ(m.rows(), 2u);
    EXPECT_EQ(m.cols(), 3u);
    EXPECT_EQ(m(1, 2), 6.0f);
    EXPECT_EQ(m.row(1)[0], 4.0f);
    EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
    EXPECT_THROW(m.item(), DimensionError);
    EXPECT_THROW(Tensor<float>(Shape{2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW((Tensor<float>::matrix({{1, 2}, {3}})), DimensionError);
    const auto z = Tensor<double>::zeros(Shape{3});
    for (double v : z.data()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(Tensor, CastRoundTripsRepresentableValues)
{
    Rng rng(1);
    const auto d = vt::random_tensor<float>(rng, Shape{4, 5}).cast<double>();
    EXPECT_TRUE(d.cast<float>().cast<double>() == d);
}

TEST(Tensor, FinitenessAndBitIdentity)
{
    auto t = Tensor<float>::full(Shape{2, 2}, 1.0f);
    EXPECT_TRUE(t.all_finite());
    auto u = t;
    EXPECT_TRUE(bit_identical(t, u));
    u.mutable_data()[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_FALSE(u.all_finite());
    EXPECT_FALSE(bit_identical(t, u));
    // Equal values with different bits: bit identity is stricter than ==.
    auto pz = Tensor<float>::full(Shape{1}, 0.0f);
    auto nz = Tensor<float>::full(Shape{1}, -0.0f);
    EXPECT_TRUE(pz == nz);
    EXPECT_FALSE(bit_identical(pz, nz));
}
