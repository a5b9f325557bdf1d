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

// Activated-neuron statistics for FFN-site plugins.
//
// For a group of k consecutive tokens, I holds the FFN middle units that are
// positive for every member in the unplugged model, U those positive for at
// least one member, and C those positive for the compressed vector in the
// plugged model at the same layer.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "varikit/backbone.hpp"
#include "varikit/errors.hpp"
#include "varikit/plugin.hpp"

namespace varikit {

/// Sorted unit indices.
using IndexSet = std::vector<std::size_t>;

template <class T>
IndexSet activated_set(std::span<const T> pre_activation)
{
    IndexSet s;
    for (std::size_t i = 0; i < pre_activation.size(); ++i) {
        if (pre_activation[i] > T{0}) {
            s.push_back(i);
        }
    }
    return s;
}

inline IndexSet set_intersection(const IndexSet& a, const IndexSet& b)
{
    IndexSet out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

inline IndexSet set_union(const IndexSet& a, const IndexSet& b)
{
    IndexSet out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

struct ActivationSets {
    IndexSet I;
    IndexSet U;
    IndexSet C;
    std::size_t layer = 0;
    std::size_t group = 0;
};

/// Both fractions, or nothing when I or C is empty.
struct ContainmentRatios {
    double c_of_i = 0.0;  ///< |C ∩ I| / |I|
    double u_of_c = 0.0;  ///< |C ∩ U| / |C|
};

inline std::optional<ContainmentRatios> containment(const ActivationSets& s)
{
    if (s.I.empty() || s.C.empty()) {
        return std::nullopt;
    }
    return ContainmentRatios{
        static_cast<double>(set_intersection(s.C, s.I).size()) / static_cast<double>(s.I.size()),
        static_cast<double>(set_intersection(s.C, s.U).size()) / static_cast<double>(s.C.size())};
}

/// Builds the sets of group `group` from per-token original pre-activations [n x 4d] and
/// compressed pre-activations [m x 4d]. A trailing partial group uses only its real members.
template <class T>
ActivationSets group_sets(const Tensor<T>& original, const Tensor<T>& compressed, std::size_t k, std::size_t group,
                          std::size_t layer = 0)
{
    const std::size_t n = original.rows();
    if (k == 0 || compressed.rows() != group_count(n, k) || compressed.cols() != original.cols()) {
        throw DimensionError("group_sets: original " + original.shape().str() + " and compressed " +
                             compressed.shape().str() + " do not match k = " + std::to_string(k));
    }
    if (group >= compressed.rows()) {
        throw DimensionError("group_sets: group " + std::to_string(group) + " out of range");
    }
    ActivationSets s;
    s.layer = layer;
    s.group = group;
    const std::size_t end = std::min(n, (group + 1) * k);
    for (std::size_t t = group * k; t < end; ++t) {
        const IndexSet a = activated_set(original.row(t));
        if (t == group * k) {
            s.I = a;
            s.U = a;
        } else {
            s.I = set_intersection(s.I, a);
            s.U = set_union(s.U, a);
        }
    }
    s.C = activated_set(compressed.row(group));
    return s;
}

/// Sets for every (layer, group) of one input, from an unplugged and a plugged forward pass.
template <class T>
std::vector<ActivationSets> collect_groups(std::span<const int> tokens, const BackboneWeights<T>& backbone,
                                           const PluginBundle<T>& bundle)
{
    if (bundle.site != PluginSite::ffn) {
        throw ConfigError("neuron analysis needs an FFN-site plugin");
    }
    ForwardTaps<T> plain, plugged;
    plugged_forward<T>(tokens, backbone, nullptr, &plain);
    plugged_forward<T>(tokens, backbone, &bundle, &plugged);
    std::vector<ActivationSets> out;
    for (std::size_t l = 0; l < backbone.config.n_layers; ++l) {
        const auto& orig = plain.layers[l].ffn_pre_activation;
        const auto& comp = plugged.layers[l].ffn_pre_activation;
        for (std::size_t g = 0; g < comp.rows(); ++g) {
            out.push_back(group_sets(orig, comp, bundle.k, g, l));
        }
    }
    return out;
}

template <class T>
std::optional<ContainmentRatios> group_containment(std::span<const int> tokens, std::size_t layer, std::size_t group,
                                                   const BackboneWeights<T>& backbone, const PluginBundle<T>& bundle)
{
    for (const auto& s : collect_groups(tokens, backbone, bundle)) {
        if (s.layer == layer && s.group == group) {
            return containment(s);
        }
    }
    throw DimensionError("group_containment: no group " + std::to_string(group) + " at layer " +
                         std::to_string(layer));
}

struct ContainmentSummary {
    std::size_t k = 0;
    double mean_c_of_i = 0.0;
    double mean_u_of_c = 0.0;
    std::size_t defined = 0;
    std::size_t undefined = 0;
};

/// Mean ratios over all groups of all sequences; undefined groups are counted, not averaged.
template <class T>
ContainmentSummary containment_summary(const std::vector<std::vector<int>>& sequences,
                                       const BackboneWeights<T>& backbone, const PluginBundle<T>& bundle)
{
    ContainmentSummary sum;
    sum.k = bundle.k;
    for (const auto& seq : sequences) {
        for (const auto& s : collect_groups(std::span<const int>(seq), backbone, bundle)) {
            if (const auto r = containment(s)) {
                sum.mean_c_of_i += r->c_of_i;
                sum.mean_u_of_c += r->u_of_c;
                ++sum.defined;
            } else {
                ++sum.undefined;
            }
        }
    }
    if (sum.defined) {
        sum.mean_c_of_i /= static_cast<double>(sum.defined);
        sum.mean_u_of_c /= static_cast<double>(sum.defined);
    }
    return sum;
}

struct ActivationFraction {
    std::size_t k = 0;
    std::size_t layer = 0;
    double mean_fraction = 0.0;
};

/// Activated fraction of FFN middle units per layer for each k. `bundles[i]` serves ks[i];
/// a null entry means the unplugged model.
template <class T>
std::vector<ActivationFraction> activation_ratio_sweep(const std::vector<std::size_t>& ks,
                                                       const std::vector<std::vector<int>>& sequences,
                                                       const BackboneWeights<T>& backbone,
                                                       const std::vector<const PluginBundle<T>*>& bundles)
{
    if (ks.size() != bundles.size()) {
        throw ConfigError("activation_ratio_sweep: " + std::to_string(ks.size()) + " ratios but " +
                          std::to_string(bundles.size()) + " bundles");
    }
    const std::size_t L = backbone.config.n_layers;
    const double width = static_cast<double>(backbone.config.ffn_dim());
    std::vector<ActivationFraction> out;
    for (std::size_t i = 0; i < ks.size(); ++i) {
        const PluginBundle<T>* b = bundles[i];
        if (b && b->k != ks[i]) {
            throw ConfigError("bundle for k = " + std::to_string(ks[i]) + " has k = " + std::to_string(b->k));
        }
        std::vector<std::uint64_t> active(L, 0), rows(L, 0);
        for (const auto& seq : sequences) {
            ForwardTaps<T> taps;
            plugged_forward<T>(std::span<const int>(seq), backbone, b, &taps);
            for (std::size_t l = 0; l < L; ++l) {
                const auto& pre = taps.layers[l].ffn_pre_activation;
                for (std::size_t r = 0; r < pre.rows(); ++r) {
                    active[l] += activated_set(pre.row(r)).size();
                }
                rows[l] += pre.rows();
            }
        }
        for (std::size_t l = 0; l < L; ++l) {
            const double f = rows[l] ? static_cast<double>(active[l]) / (static_cast<double>(rows[l]) * width) : 0.0;
            out.push_back({ks[i], l, f});
        }
    }
    return out;
}

/// Layer mean of a sweep's fractions for one k.
inline double mean_fraction(const std::vector<ActivationFraction>& sweep, std::size_t k)
{
    double s = 0.0;
    std::size_t c = 0;
    for (const auto& f : sweep) {
        if (f.k == k) {
            s += f.mean_fraction;
            ++c;
        }
    }
    return c ? s / static_cast<double>(c) : 0.0;
}

inline std::string sweep_csv(const std::vector<ActivationFraction>& sweep)
{
    std::ostringstream os;
    os.precision(17);
    os << "k,layer,mean_fraction\n";
    for (const auto& f : sweep) {
        os << f.k << ',' << f.layer << ',' << f.mean_fraction << '\n';
    }
    return os.str();
}

}  // namespace varikit
