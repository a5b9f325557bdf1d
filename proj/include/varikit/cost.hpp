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

// Parameter and FLOP accounting for FFN-site plugins.
//
// Per token, a plugin costs (kd + 2d + 3) FLOPs to compress and (3rd + 2d + r)
// to decompress; it stores k^2 d + k and 3rd + r + d parameters per host layer.
// A bias-free FFN with middle width 4d stores 8d^2 parameters and costs 8d^2
// FLOPs per row it processes. Matrix products count one FLOP per
// multiply-accumulate; see flops.hpp for the elementwise convention that makes
// the instrumented counter agree with these forms.

#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "varikit/errors.hpp"
#include "varikit/flops.hpp"
#include "varikit/plugin.hpp"

namespace varikit {

inline constexpr const char* kCostConvention = "MAC=1 for matrix products; plugin closed forms";

struct PluginCost {
    std::uint64_t compression_params = 0;
    std::uint64_t decompression_params = 0;
    std::uint64_t compression_flops = 0;
    std::uint64_t decompression_flops = 0;

    std::uint64_t params() const { return compression_params + decompression_params; }
    std::uint64_t flops() const { return compression_flops + decompression_flops; }
};

struct HostCost {
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

namespace detail {

inline std::uint64_t positive(std::int64_t v, const char* name)
{
    if (v <= 0) {
        throw DomainError(std::string(name) + " must be positive, got " + std::to_string(v));
    }
    return static_cast<std::uint64_t>(v);
}

}  // namespace detail

inline PluginCost plugin_cost(std::int64_t n, std::int64_t d, std::int64_t k, std::int64_t r)
{
    const auto N = detail::positive(n, "n"), D = detail::positive(d, "d"), K = detail::positive(k, "k"),
               R = detail::positive(r, "r");
    if (K > N) {
        throw DomainError("compression ratio k = " + std::to_string(K) + " exceeds sequence length n = " +
                          std::to_string(N));
    }
    PluginCost c;
    c.compression_params = K * K * D + K;
    c.decompression_params = 3 * R * D + R + D;
    c.compression_flops = (K * D + 2 * D + 3) * N;
    c.decompression_flops = (3 * R * D + 2 * D + R) * N;
    return c;
}

inline HostCost ffn_cost(std::int64_t n, std::int64_t d)
{
    const auto N = detail::positive(n, "n"), D = detail::positive(d, "d");
    return {8 * D * D, 8 * N * D * D};
}

/// FFN cost when it only sees the ceil(n/k) group vectors.
inline std::uint64_t ffn_flops_compressed(std::int64_t n, std::int64_t d, std::int64_t k)
{
    const auto N = detail::positive(n, "n"), D = detail::positive(d, "d"), K = detail::positive(k, "k");
    return 8 * ((N + K - 1) / K) * D * D;
}

struct CostReport {
    std::int64_t n = 0, d = 0, k = 0, r = 0;
    std::uint64_t plugin_params = 0;
    std::uint64_t host_params = 0;
    std::uint64_t plugin_flops = 0;
    std::uint64_t host_flops_compressed = 0;
    std::uint64_t host_flops_uncompressed = 0;
    double param_overhead_ratio = 0.0;
    /// 1 - (plugin + compressed host) / uncompressed host. Negative when the plugin only adds work.
    double flops_saving_ratio = 0.0;
    /// plugin_flops / host_flops_uncompressed.
    double plugin_flops_ratio = 0.0;
    /// (4 + k + 3r) / (8d), the small-k, small-r approximation of plugin_flops_ratio.
    double approx_overhead_ratio = 0.0;
    std::string convention = kCostConvention;
};

inline CostReport speedup_report(std::int64_t n, std::int64_t d, std::int64_t k, std::int64_t r)
{
    const PluginCost p = plugin_cost(n, d, k, r);
    const HostCost h = ffn_cost(n, d);
    CostReport rep;
    rep.n = n;
    rep.d = d;
    rep.k = k;
    rep.r = r;
    rep.plugin_params = p.params();
    rep.host_params = h.params;
    rep.plugin_flops = p.flops();
    rep.host_flops_uncompressed = h.flops;
    rep.host_flops_compressed = ffn_flops_compressed(n, d, k);
    rep.param_overhead_ratio = static_cast<double>(rep.plugin_params) / static_cast<double>(rep.host_params);
    rep.flops_saving_ratio = 1.0 - static_cast<double>(rep.plugin_flops + rep.host_flops_compressed) /
                                       static_cast<double>(rep.host_flops_uncompressed);
    rep.plugin_flops_ratio = static_cast<double>(rep.plugin_flops) / static_cast<double>(rep.host_flops_uncompressed);
    rep.approx_overhead_ratio = static_cast<double>(4 + k + 3 * r) / static_cast<double>(8 * d);
    return rep;
}

/// Fixed-width text rendering of a report.
inline std::string format_table(const CostReport& rep)
{
    auto line = [](const char* name, const std::string& value) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-26s %18s\n", name, value.c_str());
        return std::string(buf);
    };
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
        return std::string(buf);
    };
    std::string s;
    s += line("n / d / k / r", std::to_string(rep.n) + " / " + std::to_string(rep.d) + " / " + std::to_string(rep.k) +
                                   " / " + std::to_string(rep.r));
    s += line("plugin params", std::to_string(rep.plugin_params));
    s += line("host (FFN) params", std::to_string(rep.host_params));
    s += line("plugin FLOPs", std::to_string(rep.plugin_flops));
    s += line("host FLOPs (compressed)", std::to_string(rep.host_flops_compressed));
    s += line("host FLOPs (uncompressed)", std::to_string(rep.host_flops_uncompressed));
    s += line("param overhead", pct(rep.param_overhead_ratio));
    s += line("FLOPs saving", pct(rep.flops_saving_ratio));
    s += line("plugin/FFN FLOPs (exact)", pct(rep.plugin_flops_ratio));
    s += line("plugin/FFN FLOPs (approx)", pct(rep.approx_overhead_ratio));
    s += "convention: " + rep.convention + "\n";
    return s;
}

/// Expected per-layer counts for an FFN-site plugin on n tokens, from the closed forms.
inline SiteCounts closed_form_site_flops(std::int64_t n, std::int64_t d, std::int64_t k, std::int64_t r)
{
    const PluginCost p = plugin_cost(n, d, k, r);
    SiteCounts c{};
    c[static_cast<std::size_t>(CostSite::compression)] = p.compression_flops;
    c[static_cast<std::size_t>(CostSite::host)] = ffn_flops_compressed(n, d, k);
    c[static_cast<std::size_t>(CostSite::decompression)] = p.decompression_flops;
    return c;
}

struct MeasuredFlops {
    std::vector<SiteCounts> per_layer;
    SiteCounts global{};

    std::uint64_t site_total(CostSite s) const
    {
        std::uint64_t t = global[static_cast<std::size_t>(s)];
        for (const auto& l : per_layer) {
            t += l[static_cast<std::size_t>(s)];
        }
        return t;
    }
};

/// Counts FLOPs of one instrumented plugged forward pass, bucketed by layer and site.
template <class T>
MeasuredFlops measured_flops(std::span<const int> tokens, const BackboneWeights<T>& weights,
                             const PluginBundle<T>* bundle)
{
    FlopCounter counter;
    plugged_forward<T>(tokens, weights, bundle, nullptr, &counter);
    MeasuredFlops m;
    m.per_layer = counter.per_layer();
    m.per_layer.resize(weights.config.n_layers, SiteCounts{});
    m.global = counter.global();
    return m;
}

/// Matrix-product FLOPs of one whole encoder forward on n tokens with an FFN-site plugin of
/// ratio k (k = 1 means no plugin). Attention is charged 4nd^2 for projections plus 2n^2 d
/// for scores and mixing; the FFN is charged 2 * ffn_mult * d^2 per row it processes.
inline std::uint64_t encoder_flops(std::int64_t n, const BackboneConfig& cfg, std::int64_t k, std::int64_t r)
{
    const auto N = detail::positive(n, "n");
    const auto D = static_cast<std::uint64_t>(cfg.d);
    const std::uint64_t per_row = 2 * static_cast<std::uint64_t>(cfg.ffn_mult) * D * D;
    const std::uint64_t attention = 4 * N * D * D + 2 * N * N * D;
    std::uint64_t ffn = N * per_row;
    if (k > 1) {
        const auto K = static_cast<std::uint64_t>(k);
        const std::uint64_t groups = (N + K - 1) / K;
        ffn = groups * per_row +
              plugin_cost(static_cast<std::int64_t>(groups * K), static_cast<std::int64_t>(D), k, r).flops();
    }
    return static_cast<std::uint64_t>(cfg.n_layers) * (attention + ffn);
}

}  // namespace varikit
