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

// Plugin training by output distillation.
//
// Both stages share one loop: the frozen model without the plugin (teacher)
// and with it (student) run on the same batch, and only plugin parameters
// move to reduce the mean squared error between their final hidden states.
// Pre-training uses the task-agnostic backbone on corpus text; adaptation uses
// the fine-tuned task model on task inputs and may add lambda times the task
// loss of the plugged model.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varikit/autograd.hpp"
#include "varikit/backbone.hpp"
#include "varikit/data.hpp"
#include "varikit/optim.hpp"
#include "varikit/plugin.hpp"

namespace varikit {

enum class TrainingStage { pretrain, adapt };

struct TrainingConfig {
    TrainingStage stage = TrainingStage::adapt;
    std::size_t steps = 1000;
    std::size_t batch_size = 8;
    AdamSettings adam{3e-3, 0.9, 0.999, 1e-8};
    /// Weight of the task loss; the default trains on distillation alone.
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;
};

struct LossTerms {
    double distill = 0.0;
    std::optional<double> task;
    double lambda = 0.0;
    double total = 0.0;
};

inline LossTerms combine_losses(double distill, std::optional<double> task, double lambda)
{
    LossTerms t{distill, task, lambda, distill};
    if (task) {
        t.total = lambda * *task + distill;
    }
    return t;
}

/// Mean squared error between teacher and student final states, on a tape.
template <class T>
Var<T> distill_loss(Var<T> teacher, Var<T> student)
{
    if (!(teacher.shape() == student.shape())) {
        throw ContractError("distill_loss: teacher " + teacher.shape().str() + " and student " +
                            student.shape().str() + " differ");
    }
    return mse(student, teacher);
}

template <class T>
T distill_loss(const Tensor<T>& teacher, const Tensor<T>& student)
{
    Tape<T> tape;
    return distill_loss(tape.constant(teacher), tape.constant(student)).value().item();
}

/// Task accuracy of the backbone with `bundle` inserted (null: unplugged).
template <class T>
double plugged_accuracy(const ToyTask& task, const BackboneWeights<T>& weights, const PluginBundle<T>* bundle)
{
    if (!bundle) {
        return task_accuracy<T>(task, weights);
    }
    check_compatible(*bundle, weights.config);
    return task_accuracy<T>(task, weights, [&](Tape<T>& tape) -> std::unique_ptr<SublayerInterposer<T>> {
        return std::make_unique<PluginInterposer<T>>(*bundle, bind(tape, *bundle, false), nullptr);
    });
}

namespace detail {

template <class T>
void require_frozen(const BackboneWeights<T>& w, const char* who)
{
    if (!w.frozen) {
        throw ContractError(std::string(who) + " requires a frozen backbone");
    }
}

struct TrainItem {
    const std::vector<int>* tokens;
    const std::vector<int>* labels;  // null when no task labels exist
};

template <class T>
PluginBundle<T> distill_loop(const std::vector<TrainItem>& items, const BackboneWeights<T>& backbone,
                             PluginBundle<T> bundle, const TrainingConfig& cfg, const ToyTask* eval_task,
                             const MetricsSink& sink)
{
    check_compatible(bundle, backbone.config);
    if (items.empty()) {
        throw ConfigError("no training sequences");
    }
    const std::uint64_t before = backbone.checksum();
    Adam<T> opt(cfg.adam);
    Rng rng(derive_seed(cfg.seed, cfg.stage == TrainingStage::pretrain ? "pretrain-batches" : "adapt-batches"));
    const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
    const bool use_task = cfg.lambda > 0.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape<T> tape;
        const auto enc = bind(tape, backbone, false);
        const auto pv = bind(tape, bundle, true);
        std::optional<Var<T>> distill_sum, task_sum;
        for (std::size_t b = 0; b < bs; ++b) {
            const TrainItem& item = items[rng.below(items.size())];
            const std::span<const int> toks(*item.tokens);
            const Tensor<T> teacher = encode<T>(toks, backbone);
            Var<T> student = plugged_encode_on_tape<T>(tape, enc, backbone.config, &bundle, &pv, toks);
            Var<T> ld = distill_loss(tape.constant(teacher), student);
            distill_sum = distill_sum ? add(*distill_sum, ld) : ld;
            if (use_task && item.labels) {
                Var<T> lt = cross_entropy(head_logits(enc, backbone.head, student), std::span<const int>(*item.labels));
                task_sum = task_sum ? add(*task_sum, lt) : lt;
            }
        }
        const T inv = T{1} / static_cast<T>(bs);
        Var<T> distill = scale(*distill_sum, inv);
        Var<T> total = distill;
        std::optional<double> task_value;
        if (task_sum) {
            Var<T> task = scale(*task_sum, inv);
            task_value = static_cast<double>(task.value().item());
            total = add(scale(task, static_cast<T>(cfg.lambda)), distill);
        }
        const double distill_value = static_cast<double>(distill.value().item());
        const LossTerms terms = combine_losses(distill_value, task_value, cfg.lambda);
        if (!std::isfinite(terms.total) || !std::isfinite(static_cast<double>(total.value().item()))) {
            throw TrainingError("plugin loss became non-finite", step);
        }
        tape.backward(total);
        opt.begin_step();
        const auto handles = pv.all(bundle.has_adapters());
        std::size_t slot = 0;
        bundle.for_each_param([&](Tensor<T>& p) {
            if (const auto* g = tape.grad(handles[slot])) {
                opt.update(slot, p, *g);
            }
            ++slot;
        });
        if (sink) {
            StepMetrics m;
            m.step = step + 1;
            m.distill_loss = terms.distill;
            m.task_loss = terms.task;
            if (eval_task && cfg.eval_every && (step + 1) % cfg.eval_every == 0) {
                m.eval_accuracy = plugged_accuracy(*eval_task, backbone, &bundle);
            }
            sink(m);
        }
    }
    if (backbone.checksum() != before) {
        throw ContractError("frozen backbone changed during plugin training");
    }
    return bundle;
}

}  // namespace detail

/// Mean distillation loss of a bundle over a set of sequences.
template <class T>
double mean_distill_loss(const std::vector<std::vector<int>>& sequences, const BackboneWeights<T>& weights,
                         const PluginBundle<T>* bundle)
{
    if (sequences.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& s : sequences) {
        const std::span<const int> toks(s);
        total += static_cast<double>(distill_loss(encode<T>(toks, weights), plugged_forward<T>(toks, weights, bundle)));
    }
    return total / static_cast<double>(sequences.size());
}

inline std::vector<std::vector<int>> sequences_of(const ToyTask& task)
{
    std::vector<std::vector<int>> out;
    out.reserve(task.examples.size());
    for (const auto& ex : task.examples) {
        out.push_back(ex.tokens);
    }
    return out;
}

/// Task-agnostic stage: distill the frozen pre-trained backbone on corpus text.
template <class T>
PluginBundle<T> pretrain_plugin(const ToyCorpus& corpus, const BackboneWeights<T>& backbone, PluginBundle<T> bundle,
                                TrainingConfig cfg, const MetricsSink& sink = nullptr)
{
    detail::require_frozen(backbone, "pretrain_plugin");
    if (bundle.stage != PluginStage::init) {
        throw ContractError("pretrain_plugin expects a freshly initialized bundle, got stage " +
                            to_string(bundle.stage));
    }
    cfg.stage = TrainingStage::pretrain;
    cfg.lambda = 0.0;
    std::vector<detail::TrainItem> items;
    for (const auto& s : corpus.sequences) {
        items.push_back({&s, nullptr});
    }
    auto out = detail::distill_loop<T>(items, backbone, std::move(bundle), cfg, nullptr, sink);
    out.stage = PluginStage::pretrained;
    return out;
}

/// Task-specific stage: distill the frozen task model on task inputs, optionally adding
/// lambda times the plugged model's task loss. Accepts pre-trained or fresh bundles.
template <class T>
PluginBundle<T> adapt_plugin(const ToyTask& task, const BackboneWeights<T>& task_model, PluginBundle<T> bundle,
                             TrainingConfig cfg, const ToyTask* eval_task = nullptr,
                             const MetricsSink& sink = nullptr)
{
    detail::require_frozen(task_model, "adapt_plugin");
    if (cfg.lambda < 0.0) {
        throw ConfigError("lambda must be non-negative");
    }
    cfg.stage = TrainingStage::adapt;
    std::vector<detail::TrainItem> items;
    for (const auto& ex : task.examples) {
        items.push_back({&ex.tokens, &ex.labels});
    }
    auto out = detail::distill_loop<T>(items, task_model, std::move(bundle), cfg, eval_task, sink);
    out.stage = PluginStage::adapted;
    return out;
}

}  // namespace varikit
