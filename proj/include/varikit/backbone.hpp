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

// Desk-scale pre-norm Transformer encoder used as the frozen host model.
//
// Each block computes
//     x = x + Attention(RMSNorm(x))
//     x = x + FFN(RMSNorm(x)),  FFN(h) = W2 relu(W1 h)
// with learned absolute positions and a final RMSNorm. A SublayerInterposer
// may take over the body of either sublayer (after the pre-norm, before the
// residual add), which is where compression plugins attach.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varikit/autograd.hpp"
#include "varikit/binary_io.hpp"
#include "varikit/data.hpp"
#include "varikit/errors.hpp"
#include "varikit/optim.hpp"
#include "varikit/rng.hpp"
#include "varikit/tensor.hpp"

namespace varikit {

struct BackboneConfig {
    std::size_t vocab_size = 64;
    std::size_t d = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_seq_len = 64;

    std::size_t ffn_dim() const { return ffn_mult * d; }
    std::size_t head_dim() const { return d / n_heads; }

    void validate() const
    {
        if (vocab_size == 0 || d == 0 || n_layers == 0 || n_heads == 0 || ffn_mult == 0 || max_seq_len == 0) {
            throw ConfigError("backbone config extents must be positive");
        }
        if (d % n_heads != 0) {
            throw ConfigError("hidden size " + std::to_string(d) + " is not divisible by " + std::to_string(n_heads) +
                              " heads");
        }
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

template <class T>
struct LayerWeights {
    Tensor<T> attn_norm;  // [d]
    Tensor<T> wq, wk, wv, wo;  // [d x d], stored out x in
    Tensor<T> ffn_norm;   // [d]
    Tensor<T> w1;         // [ffn x d]
    Tensor<T> w2;         // [d x ffn]
};

template <class T>
struct BackboneWeights {
    BackboneConfig config;
    HeadKind head = HeadKind::sequence;
    std::size_t n_classes = 2;

    Tensor<T> token_emb;  // [vocab x d]
    Tensor<T> pos_emb;    // [max_seq_len x d]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm;  // [d]
    Tensor<T> head_w;      // [n_classes x d]
    Tensor<T> head_b;      // [n_classes]

    /// Set once training finishes; frozen weights are never modified again.
    bool frozen = false;

    /// Visits every parameter in checkpoint order.
    template <class Fn>
    void for_each_param(Fn&& fn)
    {
        fn(token_emb);
        fn(pos_emb);
        for (auto& l : layers) {
            fn(l.attn_norm);
            fn(l.wq);
            fn(l.wk);
            fn(l.wv);
            fn(l.wo);
            fn(l.ffn_norm);
            fn(l.w1);
            fn(l.w2);
        }
        fn(final_norm);
        fn(head_w);
        fn(head_b);
    }

    template <class Fn>
    void for_each_param(Fn&& fn) const
    {
        const_cast<BackboneWeights*>(this)->for_each_param([&](Tensor<T>& t) { fn(static_cast<const Tensor<T>&>(t)); });
    }

    std::uint64_t checksum() const
    {
        Checksum c;
        for_each_param([&](const Tensor<T>& t) { c.add(t); });
        return c.value();
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for_each_param([&](const Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    template <class U>
    BackboneWeights<U> cast() const
    {
        BackboneWeights<U> out;
        out.config = config;
        out.head = head;
        out.n_classes = n_classes;
        out.frozen = frozen;
        out.token_emb = token_emb.template cast<U>();
        out.pos_emb = pos_emb.template cast<U>();
        for (const auto& l : layers) {
            out.layers.push_back({l.attn_norm.template cast<U>(), l.wq.template cast<U>(), l.wk.template cast<U>(),
                                  l.wv.template cast<U>(), l.wo.template cast<U>(), l.ffn_norm.template cast<U>(),
                                  l.w1.template cast<U>(), l.w2.template cast<U>()});
        }
        out.final_norm = final_norm.template cast<U>();
        out.head_w = head_w.template cast<U>();
        out.head_b = head_b.template cast<U>();
        return out;
    }

    friend bool operator==(const BackboneWeights& a, const BackboneWeights& b)
    {
        if (!(a.config == b.config) || a.head != b.head || a.n_classes != b.n_classes) {
            return false;
        }
        std::vector<const Tensor<T>*> pa, pb;
        a.for_each_param([&](const Tensor<T>& t) { pa.push_back(&t); });
        b.for_each_param([&](const Tensor<T>& t) { pb.push_back(&t); });
        if (pa.size() != pb.size()) {
            return false;
        }
        for (std::size_t i = 0; i < pa.size(); ++i) {
            if (!bit_identical(*pa[i], *pb[i])) {
                return false;
            }
        }
        return true;
    }
};

namespace detail {

template <class T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double bound)
{
    Tensor<T> t(shape);
    for (auto& v : t.mutable_data()) {
        v = static_cast<T>(rng.uniform(-bound, bound));
    }
    return t;
}

template <class T>
Tensor<T> linear_init(Rng& rng, std::size_t out, std::size_t in)
{
    return uniform_tensor<T>(rng, Shape{out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace detail

/// Fresh task head of the given kind, replacing whatever head the weights carry.
template <class T>
void reset_head(BackboneWeights<T>& w, HeadKind head, std::size_t n_classes, std::uint64_t seed)
{
    Rng rng(derive_seed(seed, "head"));
    w.head = head;
    w.n_classes = n_classes;
    w.head_w = detail::linear_init<T>(rng, n_classes, w.config.d);
    w.head_b = Tensor<T>(Shape{n_classes});
}

template <class T>
BackboneWeights<T> init_backbone(const BackboneConfig& config, HeadKind head, std::size_t n_classes,
                                 std::uint64_t seed)
{
    config.validate();
    if (n_classes == 0) {
        throw ConfigError("a task head needs at least one class");
    }
    Rng rng(derive_seed(seed, "backbone-init"));
    const std::size_t d = config.d, f = config.ffn_dim();
    BackboneWeights<T> w;
    w.config = config;
    w.token_emb = detail::uniform_tensor<T>(rng, Shape{config.vocab_size, d}, 1.0);
    w.pos_emb = detail::uniform_tensor<T>(rng, Shape{config.max_seq_len, d}, 0.5);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights<T> lw;
        lw.attn_norm = Tensor<T>::full(Shape{d}, T{1});
        lw.wq = detail::linear_init<T>(rng, d, d);
        lw.wk = detail::linear_init<T>(rng, d, d);
        lw.wv = detail::linear_init<T>(rng, d, d);
        lw.wo = detail::linear_init<T>(rng, d, d);
        lw.ffn_norm = Tensor<T>::full(Shape{d}, T{1});
        lw.w1 = detail::linear_init<T>(rng, f, d);
        lw.w2 = detail::linear_init<T>(rng, d, f);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor<T>::full(Shape{d}, T{1});
    reset_head(w, head, n_classes, seed);
    return w;
}

/// Parameter handles of a backbone registered on one tape.
template <class T>
struct EncoderVars {
    struct Layer {
        Var<T> attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2;
    };
    Var<T> token_emb, pos_emb;
    std::vector<Layer> layers;
    Var<T> final_norm, head_w, head_b;

    /// Handles in checkpoint order, matching BackboneWeights::for_each_param.
    std::vector<Var<T>> all() const
    {
        std::vector<Var<T>> v{token_emb, pos_emb};
        for (const auto& l : layers) {
            v.insert(v.end(), {l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.w2});
        }
        v.insert(v.end(), {final_norm, head_w, head_b});
        return v;
    }
};

template <class T>
EncoderVars<T> bind(Tape<T>& tape, const BackboneWeights<T>& w, bool requires_grad)
{
    EncoderVars<T> v;
    v.token_emb = tape.leaf(w.token_emb, requires_grad);
    v.pos_emb = tape.leaf(w.pos_emb, requires_grad);
    for (const auto& l : w.layers) {
        v.layers.push_back({tape.leaf(l.attn_norm, requires_grad), tape.leaf(l.wq, requires_grad),
                            tape.leaf(l.wk, requires_grad), tape.leaf(l.wv, requires_grad),
                            tape.leaf(l.wo, requires_grad), tape.leaf(l.ffn_norm, requires_grad),
                            tape.leaf(l.w1, requires_grad), tape.leaf(l.w2, requires_grad)});
    }
    v.final_norm = tape.leaf(w.final_norm, requires_grad);
    v.head_w = tape.leaf(w.head_w, requires_grad);
    v.head_b = tape.leaf(w.head_b, requires_grad);
    return v;
}

enum class Sublayer { attention, ffn };

/// Intermediates captured from one block.
template <class T>
struct LayerTaps {
    Tensor<T> ffn_input;           ///< rows entering the FFN body (after any compression)
    Tensor<T> ffn_pre_activation;  ///< W1 * input, before relu
    Tensor<T> ffn_output;          ///< FFN body output, before decompression and residual
    Tensor<T> keys;                ///< projected keys as attended (after any compression)
    Tensor<T> values;
    std::vector<Tensor<T>> attention;  ///< per-head [queries x keys] probabilities
};

template <class T>
struct ForwardTaps {
    std::vector<LayerTaps<T>> layers;
};

/// Hook for replacing a sublayer body. The defaults reproduce the plain encoder.
template <class T>
class SublayerInterposer {
public:
    using Body = std::function<Var<T>(Var<T>)>;

    virtual ~SublayerInterposer() = default;

    /// Runs `body` for sublayer `which` of block `layer` on its normalized input.
    virtual Var<T> sublayer(std::size_t layer, Sublayer which, Var<T> normed, const Body& body)
    {
        (void)layer;
        (void)which;
        return body(normed);
    }

    /// Rewrites projected keys [n x d] before they are split into heads.
    virtual Var<T> keys(std::size_t layer, Var<T> k)
    {
        (void)layer;
        return k;
    }

    virtual Var<T> values(std::size_t layer, Var<T> v)
    {
        (void)layer;
        return v;
    }
};

namespace detail {

template <class T>
Var<T> attention_body(const BackboneConfig& cfg, const typename EncoderVars<T>::Layer& lv, std::size_t layer,
                      Var<T> normed, SublayerInterposer<T>* hook, LayerTaps<T>* taps)
{
    Var<T> q = linear(normed, lv.wq);
    Var<T> k = linear(normed, lv.wk);
    Var<T> v = linear(normed, lv.wv);
    if (hook) {
        k = hook->keys(layer, k);
        v = hook->values(layer, v);
    }
    if (taps) {
        taps->keys = k.value();
        taps->values = v.value();
        taps->attention.clear();
    }
    const std::size_t dh = cfg.head_dim();
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        Var<T> qh = slice_cols(q, h * dh, dh);
        Var<T> kh = slice_cols(k, h * dh, dh);
        Var<T> vh = slice_cols(v, h * dh, dh);
        Var<T> probs = softmax(scale(linear(qh, kh), inv_sqrt));
        if (taps) {
            taps->attention.push_back(probs.value());
        }
        // probs[n x m] . vh[m x dh]
        heads.push_back(matmul(probs, vh));
    }
    return linear(concat_cols(heads), lv.wo);
}

template <class T>
Var<T> ffn_body(const typename EncoderVars<T>::Layer& lv, Var<T> input, LayerTaps<T>* taps)
{
    Var<T> pre = linear(input, lv.w1);
    Var<T> out = linear(relu(pre), lv.w2);
    if (taps) {
        taps->ffn_input = input.value();
        taps->ffn_pre_activation = pre.value();
        taps->ffn_output = out.value();
    }
    return out;
}

}  // namespace detail

template <class T>
void check_tokens(const BackboneConfig& cfg, std::span<const int> tokens)
{
    if (tokens.empty()) {
        throw InputError("empty token sequence");
    }
    if (tokens.size() > cfg.max_seq_len) {
        throw InputError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    }
    for (int id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(cfg.vocab_size));
        }
    }
}

/// Final hidden states [n x d] of one sequence, recorded on `tape`.
template <class T>
Var<T> encode_on_tape(Tape<T>& tape, const EncoderVars<T>& vars, const BackboneConfig& cfg,
                      std::span<const int> tokens, SublayerInterposer<T>* hook = nullptr,
                      ForwardTaps<T>* taps = nullptr)
{
    check_tokens<T>(cfg, tokens);
    FlopCounter* counter = tape.counter();
    if (counter) {
        counter->set_layer(FlopCounter::kNoLayer);
    }
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = static_cast<int>(i);
    }
    Var<T> x = add(embedding(vars.token_emb, tokens), embedding(vars.pos_emb, std::span<const int>(positions)));
    if (taps) {
        taps->layers.assign(cfg.n_layers, LayerTaps<T>{});
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lv = vars.layers[l];
        LayerTaps<T>* lt = taps ? &taps->layers[l] : nullptr;
        if (counter) {
            counter->set_layer(static_cast<int>(l));
        }

        typename SublayerInterposer<T>::Body attn = [&](Var<T> h) {
            return detail::attention_body<T>(cfg, lv, l, h, hook, lt);
        };
        Var<T> h = rms_norm(x, lv.attn_norm);
        Var<T> a = hook ? hook->sublayer(l, Sublayer::attention, h, attn) : attn(h);
        x = add(x, a);

        typename SublayerInterposer<T>::Body ffn = [&](Var<T> in) { return detail::ffn_body<T>(lv, in, lt); };
        Var<T> g = rms_norm(x, lv.ffn_norm);
        Var<T> f = hook ? hook->sublayer(l, Sublayer::ffn, g, ffn) : ffn(g);
        x = add(x, f);
    }
    if (counter) {
        counter->set_layer(FlopCounter::kNoLayer);
    }
    return rms_norm(x, vars.final_norm);
}

/// Task-head logits: [1 x C] for sequence heads, [n x C] for token heads.
template <class T>
Var<T> head_logits(const EncoderVars<T>& vars, HeadKind head, Var<T> final_states)
{
    Var<T> src = head == HeadKind::sequence ? mean_rows(final_states) : final_states;
    return linear(src, vars.head_w, vars.head_b);
}

/// Unplugged forward pass without gradients.
template <class T>
Tensor<T> encode(std::span<const int> tokens, const BackboneWeights<T>& weights, ForwardTaps<T>* taps = nullptr)
{
    Tape<T> tape;
    const auto vars = bind(tape, weights, false);
    return encode_on_tape<T>(tape, vars, weights.config, tokens, nullptr, taps).value();
}

/// Argmax predictions per scored position.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits)
{
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto r = logits.row(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

/// Correct and scored label counts of one example's logits.
template <class T>
std::pair<std::size_t, std::size_t> score_example(const Tensor<T>& logits, const Example& ex)
{
    const auto pred = argmax_rows(logits);
    std::size_t correct = 0, scored = 0;
    for (std::size_t i = 0; i < ex.labels.size() && i < pred.size(); ++i) {
        if (ex.labels[i] < 0) {
            continue;
        }
        ++scored;
        correct += pred[i] == ex.labels[i] ? 1 : 0;
    }
    return {correct, scored};
}

/// Accuracy over all scored labels, with the body of every forward supplied by `hook_factory`
/// (null for the plain encoder).
template <class T>
double task_accuracy(const ToyTask& task, const BackboneWeights<T>& weights,
                     const std::function<std::unique_ptr<SublayerInterposer<T>>(Tape<T>&)>& hook_factory = nullptr)
{
    std::size_t correct = 0, scored = 0;
    for (const auto& ex : task.examples) {
        Tape<T> tape;
        const auto vars = bind(tape, weights, false);
        auto hook = hook_factory ? hook_factory(tape) : nullptr;
        Var<T> out = encode_on_tape(tape, vars, weights.config, ex.tokens, hook.get());
        const auto [c, s] = score_example(head_logits(vars, weights.head, out).value(), ex);
        correct += c;
        scored += s;
    }
    return scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
}

struct BackboneTrainSettings {
    std::size_t steps = 2000;
    std::size_t batch_size = 16;
    AdamSettings adam{3e-3, 0.9, 0.999, 1e-8};
    std::size_t eval_every = 0;
};

/// Trains every backbone parameter (starting from `init`, or a fresh initialization) on a
/// labelled task, and returns the weights frozen. Zero steps returns the initialization.
template <class T>
BackboneWeights<T> train_backbone(const ToyTask& task, const BackboneConfig& config,
                                  const BackboneTrainSettings& settings, std::uint64_t seed,
                                  const BackboneWeights<T>* init = nullptr, const ToyTask* eval_task = nullptr,
                                  const MetricsSink& sink = nullptr)
{
    if (task.examples.empty()) {
        throw ConfigError("training task has no examples");
    }
    BackboneWeights<T> w;
    if (init) {
        w = *init;
        if (w.head != task.head || w.n_classes != static_cast<std::size_t>(task.n_classes)) {
            reset_head(w, task.head, static_cast<std::size_t>(task.n_classes), derive_seed(seed, "finetune-head"));
        }
    } else {
        w = init_backbone<T>(config, task.head, static_cast<std::size_t>(task.n_classes), seed);
    }
    w.frozen = false;
    Adam<T> opt(settings.adam);
    Rng rng(derive_seed(seed, "backbone-batches"));
    for (std::size_t step = 0; step < settings.steps; ++step) {
        Tape<T> tape;
        const auto vars = bind(tape, w, true);
        std::optional<Var<T>> total;
        const std::size_t bs = std::max<std::size_t>(1, settings.batch_size);
        for (std::size_t b = 0; b < bs; ++b) {
            const Example& ex = task.examples[rng.below(task.examples.size())];
            Var<T> out = encode_on_tape(tape, vars, w.config, ex.tokens);
            Var<T> loss = cross_entropy(head_logits(vars, w.head, out), std::span<const int>(ex.labels));
            total = total ? add(*total, loss) : loss;
        }
        Var<T> loss = scale(*total, T{1} / static_cast<T>(bs));
        const double lv = static_cast<double>(loss.value().item());
        if (!std::isfinite(lv)) {
            throw TrainingError("backbone loss became non-finite", step);
        }
        tape.backward(loss);
        opt.begin_step();
        std::size_t slot = 0;
        const auto handles = vars.all();
        w.for_each_param([&](Tensor<T>& p) {
            const auto* g = tape.grad(handles[slot]);
            if (g) {
                opt.update(slot, p, *g);
            }
            ++slot;
        });
        if (sink) {
            StepMetrics m;
            m.step = step + 1;
            m.task_loss = lv;
            if (eval_task && settings.eval_every && (step + 1) % settings.eval_every == 0) {
                m.eval_accuracy = task_accuracy(*eval_task, w);
            }
            sink(m);
        }
    }
    w.frozen = true;
    return w;
}

// Checkpoint layout ("VBKB", all little-endian):
//   magic[4] version:u32
//   vocab d n_layers n_heads ffn_mult max_seq_len head_kind n_classes : u32 each
//   f32 arrays in BackboneWeights::for_each_param order
inline constexpr std::uint32_t kBackboneFormatVersion = 1;

template <class T>
std::vector<char> serialize_backbone(const BackboneWeights<T>& w)
{
    ByteWriter out;
    out.magic("VBKB");
    out.u32(kBackboneFormatVersion);
    const auto& c = w.config;
    for (std::size_t v : {c.vocab_size, c.d, c.n_layers, c.n_heads, c.ffn_mult, c.max_seq_len}) {
        out.u32(static_cast<std::uint32_t>(v));
    }
    out.u32(static_cast<std::uint32_t>(w.head));
    out.u32(static_cast<std::uint32_t>(w.n_classes));
    w.for_each_param([&](const Tensor<T>& t) { out.tensor_f32(t); });
    return out.bytes();
}

template <class T>
void save_backbone(const BackboneWeights<T>& w, const std::filesystem::path& path)
{
    write_file_bytes(path, serialize_backbone(w));
}

/// Parses a checkpoint; the result is marked frozen.
template <class T>
BackboneWeights<T> deserialize_backbone(std::vector<char> bytes)
{
    ByteReader in(std::move(bytes));
    in.expect_magic("VBKB");
    const std::size_t version_at = in.offset();
    if (in.u32("version") != kBackboneFormatVersion) {
        throw FormatError("unsupported backbone format version", version_at);
    }
    BackboneConfig c;
    c.vocab_size = in.u32("vocab_size");
    c.d = in.u32("d");
    c.n_layers = in.u32("n_layers");
    c.n_heads = in.u32("n_heads");
    c.ffn_mult = in.u32("ffn_mult");
    c.max_seq_len = in.u32("max_seq_len");
    const std::size_t head_at = in.offset();
    const std::uint32_t head = in.u32("head_kind");
    const std::uint32_t n_classes = in.u32("n_classes");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("invalid config block: ") + e.what(), head_at);
    }
    if (head > 1 || n_classes == 0) {
        throw FormatError("invalid head block", head_at);
    }
    BackboneWeights<T> w = init_backbone<T>(c, static_cast<HeadKind>(head), n_classes, 0);
    w.for_each_param([&](Tensor<T>& t) { t = in.tensor_f32<T>(t.shape(), "backbone parameters"); });
    in.expect_end();
    w.frozen = true;
    return w;
}

template <class T>
BackboneWeights<T> load_backbone(const std::filesystem::path& path)
{
    return deserialize_backbone<T>(read_file_bytes(path));
}

}  // namespace varikit
