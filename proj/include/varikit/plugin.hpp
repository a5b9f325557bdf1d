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

// Insertable compression plugins.
//
// A plugin shortens the sequence entering a host sublayer and restores it
// afterwards. The input H[n x d] is right-padded with zero rows to a multiple
// of k and split into contiguous groups of k rows. Each group collapses to a
// convex combination of its members,
//
//     a   = softmax(Wc . concat(h_ik, ..., h_ik+k-1) + bc)     Wc: [k x kd]
//     g_i = sum_j a_j h_ik+j
//
// the host runs on the ceil(n/k) group vectors, and every member position is
// rebuilt from its group's host output go_i and its own input,
//
//     o_ik+j = go_i + Wu2 (Wu1 . concat(go_i, h_ik+j) + bu1) + bu2
//
// before padded positions are dropped. Ablations swap the softmax weights for
// a plain mean (mean_pool) or drop the adapter term (copy).

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "varikit/autograd.hpp"
#include "varikit/backbone.hpp"
#include "varikit/binary_io.hpp"
#include "varikit/rng.hpp"

namespace varikit {

enum class PluginSite : std::uint32_t {
    ffn = 0,           ///< wraps every FFN sublayer
    attention = 1,     ///< wraps every self-attention sublayer
    attention_kv = 2,  ///< compresses keys and values only; queries keep full length
};

enum class PluginStage : std::uint32_t { init = 0, pretrained = 1, adapted = 2 };

enum class CompressMode { learned, mean_pool };
enum class DecompressMode { learned, copy };

inline std::string to_string(PluginSite s)
{
    switch (s) {
    case PluginSite::ffn: return "ffn";
    case PluginSite::attention: return "att";
    case PluginSite::attention_kv: return "att_kv";
    }
    return "?";
}

inline PluginSite parse_site(const std::string& s)
{
    if (s == "ffn" || s == "FFN") return PluginSite::ffn;
    if (s == "att" || s == "ATT") return PluginSite::attention;
    if (s == "att_kv" || s == "ATT_KV") return PluginSite::attention_kv;
    throw ConfigError("unknown plugin site '" + s + "' (expected ffn, att or att_kv)");
}

inline std::string to_string(PluginStage s)
{
    switch (s) {
    case PluginStage::init: return "init";
    case PluginStage::pretrained: return "pretrained";
    case PluginStage::adapted: return "adapted";
    }
    return "?";
}

template <class T>
struct PluginLayer {
    Tensor<T> wc;   // [k x k*d]
    Tensor<T> bc;   // [k]
    Tensor<T> wu1;  // [r x 2d]   empty for attention_kv
    Tensor<T> bu1;  // [r]
    Tensor<T> wu2;  // [d x r]
    Tensor<T> bu2;  // [d]
};

/// All parameters of one plugin: one PluginLayer per host block.
template <class T>
struct PluginBundle {
    std::size_t d = 0;
    std::size_t k = 1;
    std::size_t r = 1;
    PluginSite site = PluginSite::ffn;
    PluginStage stage = PluginStage::init;
    CompressMode compress_mode = CompressMode::learned;
    DecompressMode decompress_mode = DecompressMode::learned;
    std::vector<PluginLayer<T>> layers;

    bool has_adapters() const { return site != PluginSite::attention_kv; }

    void validate() const
    {
        if (d == 0 || k == 0 || r == 0) {
            throw ConfigError("plugin extents d, k, r must be positive");
        }
        if (r >= d) {
            throw ConfigError("bottleneck r = " + std::to_string(r) + " must be smaller than d = " + std::to_string(d));
        }
        for (const auto& l : layers) {
            const bool ok_c = l.wc.shape() == Shape{k, k * d} && l.bc.shape() == Shape{k};
            const bool ok_u = has_adapters()
                                  ? (l.wu1.shape() == Shape{r, 2 * d} && l.bu1.shape() == Shape{r} &&
                                     l.wu2.shape() == Shape{d, r} && l.bu2.shape() == Shape{d})
                                  : (l.wu1.numel() <= 1 && l.wu2.numel() <= 1);
            if (!ok_c || !ok_u) {
                throw ConfigError("plugin layer tensors do not match d = " + std::to_string(d) +
                                  ", k = " + std::to_string(k) + ", r = " + std::to_string(r));
            }
        }
    }

    /// Visits the trainable tensors in file order (adapters skipped for attention_kv).
    template <class Fn>
    void for_each_param(Fn&& fn)
    {
        for (auto& l : layers) {
            fn(l.wc);
            fn(l.bc);
            if (has_adapters()) {
                fn(l.wu1);
                fn(l.bu1);
                fn(l.wu2);
                fn(l.bu2);
            }
        }
    }

    template <class Fn>
    void for_each_param(Fn&& fn) const
    {
        const_cast<PluginBundle*>(this)->for_each_param([&](Tensor<T>& t) { fn(static_cast<const Tensor<T>&>(t)); });
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for_each_param([&](const Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    std::uint64_t checksum() const
    {
        Checksum c;
        for_each_param([&](const Tensor<T>& t) { c.add(t); });
        return c.value();
    }

    template <class U>
    PluginBundle<U> cast() const
    {
        PluginBundle<U> out;
        out.d = d;
        out.k = k;
        out.r = r;
        out.site = site;
        out.stage = stage;
        out.compress_mode = compress_mode;
        out.decompress_mode = decompress_mode;
        for (const auto& l : layers) {
            out.layers.push_back({l.wc.template cast<U>(), l.bc.template cast<U>(), l.wu1.template cast<U>(),
                                  l.bu1.template cast<U>(), l.wu2.template cast<U>(), l.bu2.template cast<U>()});
        }
        return out;
    }

    /// Compares everything the plugin file carries: extents, site and bit-exact parameters.
    friend bool operator==(const PluginBundle& a, const PluginBundle& b)
    {
        if (a.d != b.d || a.k != b.k || a.r != b.r || a.site != b.site || a.layers.size() != b.layers.size()) {
            return false;
        }
        std::vector<const Tensor<T>*> pa, pb;
        a.for_each_param([&](const Tensor<T>& t) { pa.push_back(&t); });
        b.for_each_param([&](const Tensor<T>& t) { pb.push_back(&t); });
        for (std::size_t i = 0; i < pa.size(); ++i) {
            if (!bit_identical(*pa[i], *pb[i])) {
                return false;
            }
        }
        return true;
    }
};

/// Fresh plugin: Wc, Wu1, Wu2 ~ U(+-1/sqrt(fan_in)), all biases zero.
template <class T>
PluginBundle<T> init_plugin(std::size_t d, std::size_t k, std::size_t r, PluginSite site, std::size_t n_layers,
                            std::uint64_t seed)
{
    PluginBundle<T> b;
    b.d = d;
    b.k = k;
    b.r = r;
    b.site = site;
    Rng rng(derive_seed(seed, "plugin-init"));
    for (std::size_t l = 0; l < n_layers; ++l) {
        PluginLayer<T> pl;
        pl.wc = detail::linear_init<T>(rng, k, k * d);
        pl.bc = Tensor<T>(Shape{k});
        if (b.has_adapters()) {
            pl.wu1 = detail::linear_init<T>(rng, r, 2 * d);
            pl.bu1 = Tensor<T>(Shape{r});
            pl.wu2 = detail::linear_init<T>(rng, d, r);
            pl.bu2 = Tensor<T>(Shape{d});
        }
        b.layers.push_back(std::move(pl));
    }
    b.validate();
    return b;
}

/// Zeroes the decompression adapter so that every member receives its group output unchanged.
template <class T>
void zero_adapters(PluginBundle<T>& b)
{
    for (auto& l : b.layers) {
        for (Tensor<T>* t : {&l.wu1, &l.bu1, &l.wu2, &l.bu2}) {
            std::fill(t->mutable_data().begin(), t->mutable_data().end(), T{});
        }
    }
}

template <class T>
void check_compatible(const PluginBundle<T>& b, const BackboneConfig& cfg)
{
    b.validate();
    if (b.d != cfg.d || b.layers.size() != cfg.n_layers) {
        throw ConfigError("plugin (d = " + std::to_string(b.d) + ", " + std::to_string(b.layers.size()) +
                          " layers) does not fit backbone (d = " + std::to_string(cfg.d) + ", " +
                          std::to_string(cfg.n_layers) + " layers)");
    }
}

inline std::size_t group_count(std::size_t n, std::size_t k) { return (n + k - 1) / k; }

/// Compression layer on a tape. Returns [ceil(n/k) x d]; `weights_out` receives the
/// per-group mixing weights when non-null.
template <class T>
Var<T> compress_on_tape(Var<T> h, Var<T> wc, Var<T> bc, std::size_t k, CompressMode mode,
                        Var<T>* weights_out = nullptr)
{
    const Tensor<T>& H = h.value();
    detail::require_rank(H, 2, "compress");
    const std::size_t n = H.dim(0), d = H.dim(1);
    if (wc.value().rank() != 2 || wc.value().dim(1) != k * d || wc.value().dim(0) != k) {
        throw DimensionError("compress: input " + H.shape().str() + " does not match Wc " + wc.shape().str() +
                             " for k = " + std::to_string(k));
    }
    const std::size_t m = group_count(n, k);
    Var<T> padded = pad_rows(h, m * k);
    Var<T> a;
    if (mode == CompressMode::learned) {
        a = softmax(linear(reshape(padded, Shape{m, k * d}), wc, bc));
    } else {
        a = h.tape->constant(Tensor<T>::full(Shape{m, k}, T{1} / static_cast<T>(k)));
    }
    if (weights_out) {
        *weights_out = a;
    }
    return group_weighted_sum(a, padded);
}

/// Decompression layer on a tape: rebuilds n rows from group outputs [m x d] and the
/// pre-compression rows [n x d].
template <class T>
Var<T> decompress_on_tape(Var<T> group_out, Var<T> original, const Var<T>* adapter, std::size_t k,
                          DecompressMode mode)
{
    const Tensor<T>& G = group_out.value();
    const Tensor<T>& H = original.value();
    detail::require_rank(G, 2, "decompress");
    detail::require_rank(H, 2, "decompress");
    const std::size_t m = G.dim(0), n = H.dim(0);
    if (m != group_count(n, k) || G.dim(1) != H.dim(1)) {
        throw DimensionError("decompress: " + std::to_string(m) + " group rows " + G.shape().str() +
                             " inconsistent with original " + H.shape().str() + " at k = " + std::to_string(k));
    }
    Var<T> broadcast = repeat_rows(group_out, k);
    Var<T> out = broadcast;
    if (mode == DecompressMode::learned) {
        // adapter = {Wu1, bu1, Wu2, bu2}
        Var<T> joined = concat_cols<T>({broadcast, pad_rows(original, m * k)});
        Var<T> delta = linear(linear(joined, adapter[0], adapter[1]), adapter[2], adapter[3]);
        out = add(broadcast, delta);
    }
    return slice_rows(out, 0, n);
}

/// Plugin parameters registered on a tape, one entry per layer.
template <class T>
struct PluginVars {
    struct Layer {
        Var<T> wc, bc;
        std::array<Var<T>, 4> adapter;  // Wu1, bu1, Wu2, bu2
    };
    std::vector<Layer> layers;

    std::vector<Var<T>> all(bool with_adapters) const
    {
        std::vector<Var<T>> v;
        for (const auto& l : layers) {
            v.push_back(l.wc);
            v.push_back(l.bc);
            if (with_adapters) {
                v.insert(v.end(), l.adapter.begin(), l.adapter.end());
            }
        }
        return v;
    }
};

template <class T>
PluginVars<T> bind(Tape<T>& tape, const PluginBundle<T>& b, bool requires_grad)
{
    PluginVars<T> v;
    for (const auto& l : b.layers) {
        typename PluginVars<T>::Layer pl;
        pl.wc = tape.leaf(l.wc, requires_grad);
        pl.bc = tape.leaf(l.bc, requires_grad);
        if (b.has_adapters()) {
            pl.adapter = {tape.leaf(l.wu1, requires_grad), tape.leaf(l.bu1, requires_grad),
                          tape.leaf(l.wu2, requires_grad), tape.leaf(l.bu2, requires_grad)};
        }
        v.layers.push_back(pl);
    }
    return v;
}

/// Routes the host sublayer of every block through a plugin.
template <class T>
class PluginInterposer final : public SublayerInterposer<T> {
public:
    using Body = typename SublayerInterposer<T>::Body;

    PluginInterposer(const PluginBundle<T>& bundle, PluginVars<T> vars, FlopCounter* counter)
        : bundle_(bundle), vars_(std::move(vars)), counter_(counter)
    {
    }

    Var<T> sublayer(std::size_t layer, Sublayer which, Var<T> normed, const Body& body) override
    {
        const bool ffn_host = bundle_.site == PluginSite::ffn && which == Sublayer::ffn;
        const bool att_host = bundle_.site != PluginSite::ffn && which == Sublayer::attention;
        if (!ffn_host && !att_host) {
            return body(normed);
        }
        if (bundle_.site == PluginSite::attention_kv) {
            SiteScope scope(counter_, CostSite::host);
            return body(normed);
        }
        const auto& lv = vars_.layers.at(layer);
        Var<T> groups;
        {
            SiteScope scope(counter_, CostSite::compression);
            groups = compress_on_tape(normed, lv.wc, lv.bc, bundle_.k, bundle_.compress_mode);
        }
        Var<T> host_out;
        {
            SiteScope scope(counter_, CostSite::host);
            host_out = body(groups);
        }
        SiteScope scope(counter_, CostSite::decompression);
        return decompress_on_tape(host_out, normed, lv.adapter.data(), bundle_.k, bundle_.decompress_mode);
    }

    Var<T> keys(std::size_t layer, Var<T> k) override { return kv(layer, k); }
    Var<T> values(std::size_t layer, Var<T> v) override { return kv(layer, v); }

private:
    Var<T> kv(std::size_t layer, Var<T> x)
    {
        if (bundle_.site != PluginSite::attention_kv) {
            return x;
        }
        SiteScope scope(counter_, CostSite::compression);
        const auto& lv = vars_.layers.at(layer);
        return compress_on_tape(x, lv.wc, lv.bc, bundle_.k, bundle_.compress_mode);
    }

    const PluginBundle<T>& bundle_;
    PluginVars<T> vars_;
    FlopCounter* counter_;
};

/// Final hidden states with `bundle` inserted (or the plain encoder when bundle is null).
template <class T>
Var<T> plugged_encode_on_tape(Tape<T>& tape, const EncoderVars<T>& enc, const BackboneConfig& cfg,
                              const PluginBundle<T>* bundle, const PluginVars<T>* pvars, std::span<const int> tokens,
                              ForwardTaps<T>* taps = nullptr)
{
    if (!bundle) {
        return encode_on_tape<T>(tape, enc, cfg, tokens, nullptr, taps);
    }
    check_compatible(*bundle, cfg);
    PluginInterposer<T> hook(*bundle, *pvars, tape.counter());
    return encode_on_tape<T>(tape, enc, cfg, tokens, &hook, taps);
}

/// Inference with an inserted plugin. A null bundle gives exactly encode().
template <class T>
Tensor<T> plugged_forward(std::span<const int> tokens, const BackboneWeights<T>& weights,
                          const PluginBundle<T>* bundle, ForwardTaps<T>* taps = nullptr,
                          FlopCounter* counter = nullptr)
{
    Tape<T> tape;
    tape.set_counter(counter);
    const auto enc = bind(tape, weights, false);
    if (!bundle) {
        return encode_on_tape<T>(tape, enc, weights.config, tokens, nullptr, taps).value();
    }
    check_compatible(*bundle, weights.config);
    const auto pv = bind(tape, *bundle, false);
    return plugged_encode_on_tape<T>(tape, enc, weights.config, bundle, &pv, tokens, taps).value();
}

/// Tensor-level compression of H through layer `layer` of a bundle.
template <class T>
Tensor<T> compress(const Tensor<T>& h, const PluginBundle<T>& bundle, CompressMode mode, std::size_t layer = 0)
{
    if (h.rank() != 2 || h.dim(1) != bundle.d) {
        throw DimensionError("compress: input " + h.shape().str() + " does not match plugin width d = " +
                             std::to_string(bundle.d));
    }
    Tape<T> tape;
    const auto& l = bundle.layers.at(layer);
    return compress_on_tape(tape.constant(h), tape.constant(l.wc), tape.constant(l.bc), bundle.k, mode).value();
}

template <class T>
Tensor<T> compress(const Tensor<T>& h, const PluginBundle<T>& bundle)
{
    return compress(h, bundle, bundle.compress_mode);
}

/// Tensor-level decompression of host outputs against the pre-compression rows.
template <class T>
Tensor<T> decompress(const Tensor<T>& group_out, const Tensor<T>& original, const PluginBundle<T>& bundle,
                     DecompressMode mode, std::size_t layer = 0)
{
    if (mode == DecompressMode::learned && !bundle.has_adapters()) {
        throw ConfigError("attention_kv plugins carry no decompression layer");
    }
    Tape<T> tape;
    const auto& l = bundle.layers.at(layer);
    std::array<Var<T>, 4> adapter{};
    if (bundle.has_adapters()) {
        adapter = {tape.constant(l.wu1), tape.constant(l.bu1), tape.constant(l.wu2), tape.constant(l.bu2)};
    }
    return decompress_on_tape(tape.constant(group_out), tape.constant(original), adapter.data(), bundle.k, mode)
        .value();
}

template <class T>
Tensor<T> decompress(const Tensor<T>& group_out, const Tensor<T>& original, const PluginBundle<T>& bundle)
{
    return decompress(group_out, original, bundle, bundle.decompress_mode);
}

/// Keys and values [n x w] compressed independently with the same layer weights.
template <class T>
std::pair<Tensor<T>, Tensor<T>> att_kv_compress(const Tensor<T>& keys, const Tensor<T>& values,
                                                const PluginBundle<T>& bundle, std::size_t layer = 0)
{
    if (bundle.site != PluginSite::attention_kv) {
        throw ConfigError("att_kv_compress needs an attention_kv plugin, got " + to_string(bundle.site));
    }
    return {compress(keys, bundle, bundle.compress_mode, layer), compress(values, bundle, bundle.compress_mode, layer)};
}

// Plugin file ("VPLG", all little-endian):
//   magic[4] version:u32 d:u32 k:u32 r:u32 site:u32 n_layers:u32
//   per layer f32 arrays: Wc, bc, Wu1, bu1, Wu2, bu2 (adapters omitted for attention_kv)
inline constexpr std::uint32_t kPluginFormatVersion = 1;
inline constexpr std::size_t kPluginHeaderBytes = 28;

template <class T>
std::vector<char> serialize_plugin(const PluginBundle<T>& b)
{
    b.validate();
    ByteWriter out;
    out.magic("VPLG");
    out.u32(kPluginFormatVersion);
    out.u32(static_cast<std::uint32_t>(b.d));
    out.u32(static_cast<std::uint32_t>(b.k));
    out.u32(static_cast<std::uint32_t>(b.r));
    out.u32(static_cast<std::uint32_t>(b.site));
    out.u32(static_cast<std::uint32_t>(b.layers.size()));
    b.for_each_param([&](const Tensor<T>& t) { out.tensor_f32(t); });
    return out.bytes();
}

template <class T>
void save_plugin(const PluginBundle<T>& b, const std::filesystem::path& path)
{
    write_file_bytes(path, serialize_plugin(b));
}

/// Parses a plugin file. The header is validated before any array is read; the stage
/// is not stored on disk and is set from `stage`.
template <class T>
PluginBundle<T> deserialize_plugin(std::vector<char> bytes, PluginStage stage = PluginStage::adapted)
{
    ByteReader in(std::move(bytes));
    in.expect_magic("VPLG");
    std::size_t at = in.offset();
    if (in.u32("version") != kPluginFormatVersion) {
        throw FormatError("unsupported plugin format version", at);
    }
    at = in.offset();
    PluginBundle<T> b;
    b.d = in.u32("d");
    b.k = in.u32("k");
    b.r = in.u32("r");
    const std::size_t site_at = in.offset();
    const std::uint32_t site = in.u32("site");
    const std::uint32_t n_layers = in.u32("n_layers");
    if (site > 2) {
        throw FormatError("unknown site enum " + std::to_string(site), site_at);
    }
    b.site = static_cast<PluginSite>(site);
    if (b.d == 0 || b.k == 0 || b.r == 0 || b.r >= b.d || n_layers == 0 || b.k > (1u << 16) || b.d > (1u << 20)) {
        throw FormatError("invalid plugin shape header", at);
    }
    const std::size_t per_layer =
        b.k * b.k * b.d + b.k + (b.has_adapters() ? 3 * b.r * b.d + b.r + b.d : 0);
    if (in.remaining() != 4 * per_layer * n_layers) {
        throw FormatError("payload of " + std::to_string(in.remaining()) + " bytes does not match header (expected " +
                              std::to_string(4 * per_layer * n_layers) + ")",
                          in.offset());
    }
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        PluginLayer<T> pl;
        pl.wc = in.tensor_f32<T>(Shape{b.k, b.k * b.d}, "Wc");
        pl.bc = in.tensor_f32<T>(Shape{b.k}, "bc");
        if (b.has_adapters()) {
            pl.wu1 = in.tensor_f32<T>(Shape{b.r, 2 * b.d}, "Wu1");
            pl.bu1 = in.tensor_f32<T>(Shape{b.r}, "bu1");
            pl.wu2 = in.tensor_f32<T>(Shape{b.d, b.r}, "Wu2");
            pl.bu2 = in.tensor_f32<T>(Shape{b.d}, "bu2");
        }
        b.layers.push_back(std::move(pl));
    }
    in.expect_end();
    b.stage = stage;
    return b;
}

template <class T>
PluginBundle<T> load_plugin(const std::filesystem::path& path, PluginStage stage = PluginStage::adapted)
{
    return deserialize_plugin<T>(read_file_bytes(path), stage);
}

}  // namespace varikit
