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

#include <set>

#include "support.hpp"
#include "varikit/analysis.hpp"

using namespace varikit;

namespace {

BackboneConfig small_config()
{
    BackboneConfig c;
    c.d = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    return c;
}

std::set<std::size_t> positives(const Tensor<double>& m, std::size_t row)
{
    std::set<std::size_t> s;
    for (std::size_t j = 0; j < m.cols(); ++j) {
        if (m(row, j) > 0.0) {
            s.insert(j);
        }
    }
    return s;
}

bool subset(const IndexSet& a, const IndexSet& b)
{
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace

TEST(Analysis, ActivatedSetExamples)
{
    const std::vector<double> neg{-1.0, -0.5, -3.0};
    EXPECT_TRUE(activated_set(std::span<const double>(neg)).empty());
    const std::vector<double> mixed{1.0, 0.0, -1.0, 2.0};
    EXPECT_EQ(activated_set(std::span<const double>(mixed)), (IndexSet{0, 3}));
    const std::vector<double> signed_zero{-0.0, 1e-300};
    EXPECT_EQ(activated_set(std::span<const double>(signed_zero)), (IndexSet{1}));
}

TEST(Analysis, ActivatedSetMatchesScan)
{
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto v = vt::random_tensor<double>(rng, Shape{1, 1 + rng.below(40)});
        const auto s = activated_set(v.row(0));
        const auto oracle = positives(v, 0);
        EXPECT_EQ(s, IndexSet(oracle.begin(), oracle.end()));
    }
}

TEST(Analysis, InclusionCaseGivesUnitRatios)
{
    ActivationSets s;
    s.I = {2, 5};
    s.U = {1, 2, 5, 7};
    s.C = {1, 2, 5};
    const auto r = containment(s);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->c_of_i, 1.0);
    EXPECT_EQ(r->u_of_c, 1.0);
}

TEST(Analysis, EmptySetsAreUndefined)
{
    ActivationSets s;
    s.U = {1};
    s.C = {1};
    EXPECT_FALSE(containment(s));
    s.I = {1};
    s.C = {};
    EXPECT_FALSE(containment(s));
}

TEST(Analysis, GroupSetsMatchBruteForce)
{
    Rng rng(8);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t k = 1 + rng.below(4), n = 1 + rng.below(10), w = 1 + rng.below(12);
        const std::size_t m = group_count(n, k);
        const auto orig = vt::random_tensor<double>(rng, Shape{n, w});
        const auto comp = vt::random_tensor<double>(rng, Shape{m, w});
        for (std::size_t g = 0; g < m; ++g) {
            const auto s = group_sets(orig, comp, k, g);
            std::set<std::size_t> inter, uni;
            bool first = true;
            for (std::size_t t = g * k; t < std::min(n, (g + 1) * k); ++t) {
                const auto p = positives(orig, t);
                uni.insert(p.begin(), p.end());
                if (first) {
                    inter = p;
                    first = false;
                } else {
                    std::set<std::size_t> keep;
                    for (auto x : inter) {
                        if (p.count(x)) {
                            keep.insert(x);
                        }
                    }
                    inter = keep;
                }
            }
            const auto c = positives(comp, g);
            EXPECT_EQ(s.I, IndexSet(inter.begin(), inter.end()));
            EXPECT_EQ(s.U, IndexSet(uni.begin(), uni.end()));
            EXPECT_EQ(s.C, IndexSet(c.begin(), c.end()));
            EXPECT_TRUE(subset(s.I, s.U));
        }
    }
    EXPECT_THROW(group_sets(Tensor<double>(Shape{5, 4}), Tensor<double>(Shape{2, 4}), 2, 0), DimensionError);
    EXPECT_THROW(group_sets(Tensor<double>(Shape{4, 4}), Tensor<double>(Shape{2, 4}), 2, 2), DimensionError);
}

TEST(Analysis, IdentityPluginGivesUnitRatios)
{
    const auto c = small_config();
    const auto w = init_backbone<double>(c, HeadKind::token, 2, 4);
    auto b = init_plugin<double>(c.d, 1, 4, PluginSite::ffn, c.n_layers, 5);
    zero_adapters(b);
    Rng rng(2);
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < 6; ++i) {
        seqs.push_back(vt::random_tokens(rng, 4 + rng.below(10), 63));
    }
    for (const auto& s : seqs) {
        for (const auto& g : collect_groups(std::span<const int>(s), w, b)) {
            EXPECT_EQ(g.I, g.U);
            EXPECT_EQ(g.I, g.C);
            if (const auto r = containment(g)) {
                EXPECT_EQ(r->c_of_i, 1.0);
                EXPECT_EQ(r->u_of_c, 1.0);
            }
        }
    }
    const auto sum = containment_summary(seqs, w, b);
    EXPECT_EQ(sum.mean_c_of_i, 1.0);
    EXPECT_EQ(sum.mean_u_of_c, 1.0);
    EXPECT_GT(sum.defined, 0u);
}

TEST(Analysis, TrainedShapeRatiosStayInRange)
{
    const auto c = small_config();
    const auto w = init_backbone<double>(c, HeadKind::token, 2, 4);
    Rng rng(12);
    for (std::size_t k : {2u, 3u, 4u}) {
        const auto b = init_plugin<double>(c.d, k, 4, PluginSite::ffn, c.n_layers, k);
        for (int trial = 0; trial < 5; ++trial) {
            const auto toks = vt::random_tokens(rng, 3 + rng.below(14), 63);
            ForwardTaps<double> plain, plugged;
            plugged_forward<double>(toks, w, nullptr, &plain);
            plugged_forward<double>(toks, w, &b, &plugged);
            const auto groups = collect_groups(std::span<const int>(toks), w, b);
            EXPECT_EQ(groups.size(), c.n_layers * group_count(toks.size(), k));
            for (const auto& g : groups) {
                EXPECT_TRUE(subset(g.I, g.U));
                for (auto x : g.U) {
                    EXPECT_LT(x, c.ffn_dim());
                }
                const auto oracle = group_sets(plain.layers[g.layer].ffn_pre_activation,
                                               plugged.layers[g.layer].ffn_pre_activation, k, g.group, g.layer);
                EXPECT_EQ(g.C, oracle.C);
                if (const auto r = containment(g)) {
                    EXPECT_GE(r->c_of_i, 0.0);
                    EXPECT_LE(r->c_of_i, 1.0);
                    EXPECT_GE(r->u_of_c, 0.0);
                    EXPECT_LE(r->u_of_c, 1.0);
                    const double ci = static_cast<double>(set_intersection(g.C, g.I).size()) / g.I.size();
                    EXPECT_EQ(r->c_of_i, ci);
                }
            }
        }
    }
}

TEST(Analysis, GroupContainmentLooksUpOneGroup)
{
    const auto c = small_config();
    const auto w = init_backbone<double>(c, HeadKind::token, 2, 4);
    auto b = init_plugin<double>(c.d, 1, 4, PluginSite::ffn, c.n_layers, 5);
    zero_adapters(b);
    const std::vector<int> toks{5, 6, 7, 8};
    const auto r = group_containment(std::span<const int>(toks), 1, 2, w, b);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->c_of_i, 1.0);
    EXPECT_THROW(group_containment(std::span<const int>(toks), 0, 9, w, b), DimensionError);
    const auto att = init_plugin<double>(c.d, 2, 4, PluginSite::attention, c.n_layers, 5);
    EXPECT_THROW(collect_groups(std::span<const int>(toks), w, att), ConfigError);
}

TEST(Analysis, SweepFractions)
{
    const auto c = small_config();
    const auto w = init_backbone<double>(c, HeadKind::token, 2, 4);
    auto b1 = init_plugin<double>(c.d, 1, 4, PluginSite::ffn, c.n_layers, 5);
    zero_adapters(b1);
    const auto b2 = init_plugin<double>(c.d, 2, 4, PluginSite::ffn, c.n_layers, 6);
    const auto b4 = init_plugin<double>(c.d, 4, 4, PluginSite::ffn, c.n_layers, 7);
    Rng rng(9);
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < 8; ++i) {
        seqs.push_back(vt::random_tokens(rng, 5 + rng.below(10), 63));
    }
    const std::vector<std::size_t> ks{1, 2, 4};
    const auto sweep = activation_ratio_sweep<double>(ks, seqs, w, {&b1, &b2, &b4});
    ASSERT_EQ(sweep.size(), ks.size() * c.n_layers);
    for (const auto& f : sweep) {
        EXPECT_GE(f.mean_fraction, 0.0);
        EXPECT_LE(f.mean_fraction, 1.0);
    }
    const auto base = activation_ratio_sweep<double>({1}, seqs, w, {nullptr});
    EXPECT_EQ(mean_fraction(sweep, 1), mean_fraction(base, 1));
    EXPECT_EQ(sweep_csv(sweep), sweep_csv(activation_ratio_sweep<double>(ks, seqs, w, {&b1, &b2, &b4})));
    EXPECT_EQ(sweep_csv(sweep).rfind("k,layer,mean_fraction\n", 0), 0u);
    EXPECT_THROW(activation_ratio_sweep<double>({1, 2}, seqs, w, {&b1}), ConfigError);
    EXPECT_THROW(activation_ratio_sweep<double>({2}, seqs, w, {&b4}), ConfigError);
}
