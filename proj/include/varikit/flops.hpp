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

#include <array>
#include <cstdint>
#include <vector>

namespace varikit {

/// Where an instrumented operation runs relative to an inserted plugin.
enum class CostSite : std::uint8_t { other = 0, compression = 1, host = 2, decompression = 3 };

inline constexpr std::size_t kCostSiteCount = 4;

using SiteCounts = std::array<std::uint64_t, kCostSiteCount>;

// Counting convention used by every instrumented op:
//   matrix product       1 per multiply-accumulate
//   bias add             1 per output element
//   elementwise add      1 per element (residuals)
//   softmax              2 per element (exp, normalize)
//   group weighted sum   2 per member element (scale, accumulate)
//   relu, copies, pads   0
// Backbone FFNs carry no biases, so a host FFN costs exactly its two matrix products.
class FlopCounter {
public:
    static constexpr int kNoLayer = -1;

    void add(std::uint64_t flops)
    {
        auto& bucket = layer_ < 0 ? global_ : layer_bucket(static_cast<std::size_t>(layer_));
        bucket[static_cast<std::size_t>(site_)] += flops;
    }

    void set_layer(int layer) { layer_ = layer; }
    int layer() const { return layer_; }
    void set_site(CostSite site) { site_ = site; }
    CostSite site() const { return site_; }

    const std::vector<SiteCounts>& per_layer() const { return layers_; }
    const SiteCounts& global() const { return global_; }

    std::uint64_t layer_total(std::size_t layer, CostSite site) const
    {
        return layer < layers_.size() ? layers_[layer][static_cast<std::size_t>(site)] : 0;
    }

    std::uint64_t site_total(CostSite site) const
    {
        std::uint64_t t = global_[static_cast<std::size_t>(site)];
        for (const auto& l : layers_) {
            t += l[static_cast<std::size_t>(site)];
        }
        return t;
    }

private:
    SiteCounts& layer_bucket(std::size_t layer)
    {
        if (layers_.size() <= layer) {
            layers_.resize(layer + 1, SiteCounts{});
        }
        return layers_[layer];
    }

    std::vector<SiteCounts> layers_;
    SiteCounts global_{};
    int layer_ = kNoLayer;
    CostSite site_ = CostSite::other;
};

/// Restores the counter's site tag on scope exit. Tolerates a null counter.
class SiteScope {
public:
    SiteScope(FlopCounter* counter, CostSite site) : counter_(counter)
    {
        if (counter_) {
            saved_ = counter_->site();
            counter_->set_site(site);
        }
    }
    ~SiteScope()
    {
        if (counter_) {
            counter_->set_site(saved_);
        }
    }
    SiteScope(const SiteScope&) = delete;
    SiteScope& operator=(const SiteScope&) = delete;

private:
    FlopCounter* counter_;
    CostSite saved_ = CostSite::other;
};

}  // namespace varikit
