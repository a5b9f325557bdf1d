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

// Workload-adaptive choice of compression ratio, simulated on a logical clock.
//
// One server drains requests first-in first-out at `capacity` FLOPs per tick.
// A request of n tokens served at ratio k costs encoder_flops(n, config, k, r).
// The adaptive policy picks, at each arrival, the smallest registered k whose
// predicted completion (current backlog plus this request) fits the latency
// budget, and the largest k when none does.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "varikit/backbone.hpp"
#include "varikit/cost.hpp"
#include "varikit/errors.hpp"
#include "varikit/plugin.hpp"
#include "varikit/rng.hpp"

namespace varikit {

struct RegistryEntry {
    std::size_t k = 1;
    std::size_t r = 1;
    double quality = 1.0;
    /// Loaded bundle, if any; the simulator only needs k and r.
    std::shared_ptr<const PluginBundle<float>> bundle;
};

class PluginRegistry {
public:
    explicit PluginRegistry(BackboneConfig config = {}) : config_(config) {}

    /// Adds or replaces the entry for `e.k`, keeping quality non-increasing in k.
    void add(RegistryEntry e)
    {
        if (e.k == 0) {
            throw ConfigError("registry ratio must be positive");
        }
        if (!(e.quality >= 0.0 && e.quality <= 1.0)) {
            throw ConfigError("quality for k = " + std::to_string(e.k) + " must lie in [0, 1]");
        }
        if (e.k == 1 && e.quality != 1.0) {
            throw ConfigError("the k = 1 baseline must have quality 1.0");
        }
        if (e.k > 1 && (e.r == 0 || e.r >= config_.d)) {
            throw ConfigError("bottleneck r for k = " + std::to_string(e.k) + " must lie in [1, d)");
        }
        auto next = entries_;
        next[e.k] = e;
        double prev = 2.0;
        for (const auto& [k, entry] : next) {
            if (entry.quality > prev) {
                throw ConfigError("quality must be non-increasing in k; k = " + std::to_string(k) + " breaks it");
            }
            prev = entry.quality;
        }
        entries_ = std::move(next);
    }

    void validate() const
    {
        if (!entries_.count(1)) {
            throw ConfigError("registry has no k = 1 baseline entry");
        }
    }

    const BackboneConfig& config() const { return config_; }
    const std::map<std::size_t, RegistryEntry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }
    std::size_t max_k() const { return entries_.rbegin()->first; }
    const RegistryEntry& at(std::size_t k) const
    {
        const auto it = entries_.find(k);
        if (it == entries_.end()) {
            throw ConfigError("no registry entry for k = " + std::to_string(k));
        }
        return it->second;
    }

    /// Whole-forward FLOPs of an n-token request served at ratio k.
    std::uint64_t request_flops(std::size_t k, std::size_t n) const
    {
        const auto& e = at(k);
        return encoder_flops(static_cast<std::int64_t>(n), config_, static_cast<std::int64_t>(k),
                             static_cast<std::int64_t>(e.r));
    }

    double cost_per_token(std::size_t k, std::size_t n) const
    {
        return static_cast<double>(request_flops(k, n)) / static_cast<double>(n);
    }

private:
    BackboneConfig config_;
    std::map<std::size_t, RegistryEntry> entries_;
};

struct TraceEvent {
    double arrival = 0.0;
    std::size_t length = 0;
};

struct WorkloadTrace {
    double capacity = 1.0;        ///< FLOPs per tick
    double latency_budget = 1.0;  ///< ticks, applied to p95
    std::vector<TraceEvent> events;

    void validate() const
    {
        if (!(capacity > 0.0) || !(latency_budget > 0.0)) {
            throw InputError("trace capacity and latency budget must be positive");
        }
        double prev = 0.0;
        for (std::size_t i = 0; i < events.size(); ++i) {
            const auto& e = events[i];
            if (!(e.arrival >= 0.0) || e.length == 0) {
                throw InputError("trace event " + std::to_string(i) + " must have arrival >= 0 and length > 0");
            }
            if (e.arrival < prev) {
                throw InputError("trace arrivals decrease at event " + std::to_string(i));
            }
            prev = e.arrival;
        }
    }
};

/// Smallest k whose drain time (backlog + request cost) / capacity fits the budget, else max k.
inline std::size_t select_plugin(double backlog_flops, std::size_t request_length, double capacity, double budget,
                                 const PluginRegistry& registry)
{
    if (registry.empty()) {
        throw ConfigError("empty plugin registry");
    }
    for (const auto& [k, e] : registry.entries()) {
        const double drain = (backlog_flops + static_cast<double>(registry.request_flops(k, request_length))) / capacity;
        if (drain <= budget) {
            return k;
        }
    }
    return registry.max_k();
}

struct Policy {
    enum class Kind { adaptive, fixed } kind = Kind::adaptive;
    std::size_t k = 1;

    static Policy adaptive() { return {Kind::adaptive, 0}; }
    static Policy fixed(std::size_t k) { return {Kind::fixed, k}; }
    std::string name() const { return kind == Kind::adaptive ? "adaptive" : "fixed_k=" + std::to_string(k); }
};

struct ServedRequest {
    double arrival = 0.0;
    std::size_t length = 0;
    std::size_t k = 1;
    std::uint64_t flops = 0;
    double start = 0.0;
    double finish = 0.0;
    double latency() const { return finish - arrival; }
};

struct SimReport {
    std::string policy;
    std::size_t requests = 0;
    double p50_latency = 0.0;
    double p95_latency = 0.0;
    double mean_latency = 0.0;
    double mean_quality = 0.0;
    std::map<std::size_t, std::size_t> usage;
    std::uint64_t total_flops = 0;
    double latency_budget = 0.0;
    bool meets_budget = true;
    std::vector<ServedRequest> served;
};

/// Nearest-rank percentile of unsorted values; 0 for an empty list.
inline double percentile(std::vector<double> v, double p)
{
    if (v.empty()) {
        return 0.0;
    }
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline SimReport simulate(const WorkloadTrace& trace, const PluginRegistry& registry, const Policy& policy)
{
    trace.validate();
    registry.validate();
    if (policy.kind == Policy::Kind::fixed) {
        registry.at(policy.k);
    }
    SimReport rep;
    rep.policy = policy.name();
    rep.latency_budget = trace.latency_budget;
    double free_at = 0.0;
    double quality = 0.0;
    std::vector<double> latencies;
    for (const auto& ev : trace.events) {
        const double backlog = std::max(0.0, free_at - ev.arrival) * trace.capacity;
        const std::size_t k = policy.kind == Policy::Kind::fixed
                                  ? policy.k
                                  : select_plugin(backlog, ev.length, trace.capacity, trace.latency_budget, registry);
        ServedRequest s;
        s.arrival = ev.arrival;
        s.length = ev.length;
        s.k = k;
        s.flops = registry.request_flops(k, ev.length);
        s.start = std::max(ev.arrival, free_at);
        s.finish = s.start + static_cast<double>(s.flops) / trace.capacity;
        free_at = s.finish;
        latencies.push_back(s.latency());
        quality += registry.at(k).quality;
        rep.total_flops += s.flops;
        ++rep.usage[k];
        rep.served.push_back(s);
    }
    rep.requests = trace.events.size();
    if (rep.requests) {
        rep.mean_quality = quality / static_cast<double>(rep.requests);
        double sum = 0.0;
        for (double l : latencies) {
            sum += l;
        }
        rep.mean_latency = sum / static_cast<double>(rep.requests);
    }
    rep.p50_latency = percentile(latencies, 50.0);
    rep.p95_latency = percentile(latencies, 95.0);
    rep.meets_budget = rep.p95_latency <= trace.latency_budget;
    return rep;
}

inline nlohmann::ordered_json to_json(const SimReport& r, bool with_requests = false)
{
    nlohmann::ordered_json j;
    j["policy"] = r.policy;
    j["requests"] = r.requests;
    j["p50_latency"] = r.p50_latency;
    j["p95_latency"] = r.p95_latency;
    j["mean_latency"] = r.mean_latency;
    j["latency_budget"] = r.latency_budget;
    j["meets_budget"] = r.meets_budget;
    j["mean_quality"] = r.mean_quality;
    j["total_flops"] = r.total_flops;
    nlohmann::ordered_json usage = nlohmann::ordered_json::object();
    for (const auto& [k, c] : r.usage) {
        usage[std::to_string(k)] = c;
    }
    j["usage"] = usage;
    if (with_requests) {
        auto& arr = j["served"] = nlohmann::ordered_json::array();
        for (const auto& s : r.served) {
            arr.push_back({{"arrival", s.arrival}, {"length", s.length}, {"k", s.k}, {"flops", s.flops},
                           {"start", s.start}, {"finish", s.finish}});
        }
    }
    return j;
}

// Trace files are JSON lines: a header {"capacity": c, "latency_budget": b}
// followed by one {"arrival": t, "length": n} object per request.

inline WorkloadTrace parse_trace(std::istream& in)
{
    WorkloadTrace t;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            if (!header) {
                t.capacity = j.at("capacity").get<double>();
                t.latency_budget = j.at("latency_budget").get<double>();
                header = true;
            } else {
                const double len = j.at("length").get<double>();
                if (len < 1 || len != std::floor(len)) {
                    throw InputError("length must be a positive integer");
                }
                t.events.push_back({j.at("arrival").get<double>(), static_cast<std::size_t>(len)});
            }
        } catch (const nlohmann::json::exception& e) {
            throw InputError("trace line " + std::to_string(lineno) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError("trace line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!header) {
        throw InputError("trace has no header line");
    }
    t.validate();
    return t;
}

inline std::string format_trace(const WorkloadTrace& t)
{
    std::ostringstream os;
    os << nlohmann::ordered_json{{"capacity", t.capacity}, {"latency_budget", t.latency_budget}}.dump() << '\n';
    for (const auto& e : t.events) {
        os << nlohmann::ordered_json{{"arrival", e.arrival}, {"length", e.length}}.dump() << '\n';
    }
    return os.str();
}

struct TwoPhaseSpec {
    std::size_t light_requests = 300;
    std::size_t heavy_requests = 300;
    double light_gap = 12.0;  ///< mean ticks between arrivals in the quiet phase
    double heavy_gap = 4.0;   ///< mean ticks between arrivals at the peak
    std::size_t min_len = 8;
    std::size_t max_len = 24;
    double capacity = 1.0e5;
    double latency_budget = 25.0;
};

inline constexpr std::uint64_t kBundledTraceSeed = 7;

/// A quiet phase followed by a burst; gaps are uniform in [0.5, 1.5] times the phase mean.
inline WorkloadTrace make_two_phase_trace(std::uint64_t seed, const TwoPhaseSpec& spec = {})
{
    if (spec.min_len == 0 || spec.max_len < spec.min_len) {
        throw ConfigError("two-phase trace needs 0 < min_len <= max_len");
    }
    Rng rng(derive_seed(seed, "two-phase-trace"));
    WorkloadTrace t;
    t.capacity = spec.capacity;
    t.latency_budget = spec.latency_budget;
    double clock = 0.0;
    auto emit = [&](std::size_t count, double gap) {
        for (std::size_t i = 0; i < count; ++i) {
            clock += gap * rng.uniform(0.5, 1.5);
            const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            t.events.push_back({clock, len});
        }
    };
    emit(spec.light_requests, spec.light_gap);
    emit(spec.heavy_requests, spec.heavy_gap);
    return t;
}

}  // namespace varikit
