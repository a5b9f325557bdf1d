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

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "varikit/errors.hpp"

namespace varikit {

/// Extents of a dense row-major tensor. Rank 0 is a scalar; rank is capped at 3
/// (batch x sequence x feature).
class Shape {
public:
    static constexpr std::size_t kMaxRank = 3;

    Shape() = default;

    Shape(std::initializer_list<std::size_t> extents)
    {
        if (extents.size() > kMaxRank) {
            throw DimensionError("rank " + std::to_string(extents.size()) + " exceeds the maximum rank of 3");
        }
        for (std::size_t e : extents) {
            ext_[rank_++] = e;
        }
    }

    static Shape scalar() { return Shape{}; }

    std::size_t rank() const noexcept { return rank_; }

    std::size_t operator[](std::size_t axis) const
    {
        if (axis >= rank_) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for " + str());
        }
        return ext_[axis];
    }

    std::size_t numel() const noexcept
    {
        std::size_t n = 1;
        for (std::size_t i = 0; i < rank_; ++i) {
            n *= ext_[i];
        }
        return n;
    }

    std::size_t last() const noexcept { return rank_ == 0 ? 1 : ext_[rank_ - 1]; }

    std::string str() const
    {
        std::string s = "[";
        for (std::size_t i = 0; i < rank_; ++i) {
            if (i) {
                s += "x";
            }
            s += std::to_string(ext_[i]);
        }
        return s + "]";
    }

    friend bool operator==(const Shape& a, const Shape& b) noexcept
    {
        if (a.rank_ != b.rank_) {
            return false;
        }
        for (std::size_t i = 0; i < a.rank_; ++i) {
            if (a.ext_[i] != b.ext_[i]) {
                return false;
            }
        }
        return true;
    }

private:
    std::array<std::size_t, kMaxRank> ext_{};
    std::size_t rank_ = 0;
};

/// Dense row-major tensor of rank <= 3. A plain value: copying copies the buffer.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : Tensor(Shape::scalar()) {}

    explicit Tensor(Shape shape) : shape_(shape), data_(shape.numel(), T{}) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data))
    {
        if (data_.size() != shape_.numel()) {
            throw DimensionError("buffer of " + std::to_string(data_.size()) + " values does not fill shape " +
                                 shape_.str());
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(shape); }

    static Tensor full(Shape shape, T value) { return Tensor(shape, std::vector<T>(shape.numel(), value)); }

    static Tensor scalar(T value) { return Tensor(Shape::scalar(), {value}); }

    /// Builds a rows x cols matrix from nested rows; every row must have equal length.
    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows)
    {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<T> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    static Tensor vector(std::initializer_list<T> values)
    {
        return Tensor(Shape{values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.rank(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_[axis]; }

    /// Row count when viewed as a matrix over the last axis.
    std::size_t rows() const noexcept { return shape_.last() == 0 ? 0 : data_.size() / shape_.last(); }
    std::size_t cols() const noexcept { return shape_.last(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> mutable_data() noexcept { return data_; }
    const std::vector<T>& buffer() const noexcept { return data_; }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    T operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }

    T item() const
    {
        if (data_.size() != 1) {
            throw DimensionError("item() on tensor of shape " + shape_.str());
        }
        return data_[0];
    }

    template <class U>
    Tensor<U> cast() const
    {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Exact elementwise equality (IEEE ==, so +0 and -0 compare equal).
    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Byte-level identity of two tensors' buffers, stricter than operator== on signed zeros.
template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b)
{
    if (!(a.shape() == b.shape())) {
        return false;
    }
    const auto x = std::as_bytes(a.data());
    const auto y = std::as_bytes(b.data());
    return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

}  // namespace varikit
