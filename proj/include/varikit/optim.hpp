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

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "varikit/tensor.hpp"

namespace varikit {

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Slot i holds the moments of the i-th parameter
/// passed to step(); callers must pass parameters in the same order every step.
template <class T>
class Adam {
public:
    explicit Adam(AdamSettings s = {}) : s_(s) {}

    void begin_step() { ++t_; }

    void update(std::size_t slot, Tensor<T>& param, std::span<const T> grad)
    {
        if (slot >= m_.size()) {
            m_.resize(slot + 1);
            v_.resize(slot + 1);
        }
        auto& m = m_[slot];
        auto& v = v_[slot];
        if (m.empty()) {
            m.assign(param.numel(), 0.0);
            v.assign(param.numel(), 0.0);
        }
        const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
        auto p = param.mutable_data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * g;
            v[i] = s_.beta2 * v[i] + (1.0 - s_.beta2) * g * g;
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            p[i] = static_cast<T>(static_cast<double>(p[i]) - s_.learning_rate * mh / (std::sqrt(vh) + s_.eps));
        }
    }

    std::size_t steps() const { return t_; }

private:
    AdamSettings s_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// One record of a training run's metrics stream.
struct StepMetrics {
    std::size_t step = 0;
    std::optional<double> distill_loss;
    std::optional<double> task_loss;
    std::optional<double> eval_accuracy;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

}  // namespace varikit
