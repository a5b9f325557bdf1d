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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "varikit/cli.hpp"

namespace fs = std::filesystem;
using varikit::cli::json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = varikit::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override
    {
        root_ = fs::temp_directory_path() /
                ("varikit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    std::string path(const std::string& rel) const { return (root_ / rel).string(); }

    // Tiny pre-trained and fine-tuned checkpoints.
    void make_backbones()
    {
        const std::vector<std::string> shape{"--d", "16", "--heads", "2", "--layers", "2"};
        auto pre = std::vector<std::string>{"train-backbone", "--task", "reconstruction", "--steps", "4",
                                            "--batch", "2", "--train-size", "32", "--eval-size", "8",
                                            "--seed", "1", "--out", path("m")};
        pre.insert(pre.end(), shape.begin(), shape.end());
        ASSERT_EQ(run(pre).code, 0);
        auto tag = std::vector<std::string>{"train-backbone", "--task", "token_tag", "--steps", "4",
                                            "--batch", "2", "--train-size", "32", "--eval-size", "8",
                                            "--seed", "2", "--init", path("m/backbone.vbkb"), "--out", path("mt")};
        tag.insert(tag.end(), shape.begin(), shape.end());
        const auto r = run(tag);
        ASSERT_EQ(r.code, 0) << r.err;
    }

    std::vector<std::string> sweep(const std::string& out) const
    {
        return {"sweep-k",  "--backbone",   path("mt/backbone.vbkb"),
                "--pretrain-backbone", path("m/backbone.vbkb"),
                "--ks",     "1,2,4",        "--r", "4", "--steps", "3", "--batch", "2", "--train-size", "16",
                "--eval-size", "8", "--corpus-size", "16", "--seed", "5", "--out", path(out)};
    }

    fs::path root_;
};

}  // namespace

TEST_F(CliTest, NoArgumentsPrintsUsage)
{
    const auto r = run({});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("sweep-k"), std::string::npos);
}

TEST_F(CliTest, UsageErrors)
{
    EXPECT_EQ(run({"frobnicate"}).code, 1);
    EXPECT_EQ(run({"cost", "--bogus", "1"}).code, 1);
    EXPECT_EQ(run({"cost", "--k", "0"}).code, 1);
    EXPECT_EQ(run({"cost", "--format", "xml"}).code, 1);
    EXPECT_EQ(run({"train-backbone", "--out", path("x")}).code, 1);
    EXPECT_EQ(run({"simulate"}).code, 1);
    EXPECT_EQ(run({"eval", "--seed", "1"}).code, 1);
}

TEST_F(CliTest, HelpExitsZero)
{
    const auto r = run({"cost", "--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("--format"), std::string::npos);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, CostReportJson)
{
    const auto r = run({"cost", "--d", "768", "--k", "4", "--r", "64", "--n", "512"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_NEAR(j["flops_saving_ratio"].get<double>(), 0.717, 0.001);
    EXPECT_NEAR(j["param_overhead_ratio"].get<double>(), 0.034, 0.0005);
    EXPECT_EQ(j["plugin_params"].get<std::uint64_t>(), 160580u);
    EXPECT_TRUE(j.contains("convention"));
    const auto t = run({"cost", "--format", "table"});
    EXPECT_EQ(t.code, 0);
    EXPECT_NE(t.out.find("FLOPs saving"), std::string::npos);
}

TEST_F(CliTest, ConfigFileAndOverrides)
{
    std::ofstream(path("c.json")) << R"({"d": 768, "k": 8, "r": 64, "n": 512})";
    const auto a = json::parse(run({"cost", "--config", path("c.json")}).out);
    EXPECT_EQ(a["k"], 8);
    const auto b = json::parse(run({"cost", "--config", path("c.json"), "--k", "2"}).out);
    EXPECT_EQ(b["k"], 2);
    EXPECT_EQ(b["d"], 768);

    std::ofstream(path("bad.json")) << R"({"d": 768, "kk": 8})";
    const auto bad = run({"cost", "--config", path("bad.json")});
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("kk"), std::string::npos);
}

TEST_F(CliTest, MissingInputsAreRuntimeErrors)
{
    EXPECT_EQ(run({"eval", "--backbone", path("none.vbkb"), "--seed", "1", "--out", path("e")}).code, 2);
    std::ofstream(path("junk.vbkb")) << "not a checkpoint";
    EXPECT_EQ(run({"eval", "--backbone", path("junk.vbkb"), "--seed", "1", "--out", path("e")}).code, 2);
}

TEST_F(CliTest, EndToEndPipelineIsDeterministic)
{
    make_backbones();
    EXPECT_TRUE(fs::exists(path("mt/eval.json")));
    EXPECT_TRUE(fs::exists(path("mt/config.resolved.json")));
    const auto snap = json::parse(slurp(path("mt/config.resolved.json")));
    EXPECT_EQ(snap["command"], "train-backbone");
    EXPECT_EQ(snap["params"]["seed"], 2);

    auto first = run(sweep("s1"));
    ASSERT_EQ(first.code, 0) << first.err;
    ASSERT_EQ(run(sweep("s2")).code, 0);
    for (const char* f : {"plugin_k1.vplg", "plugin_k2.vplg", "plugin_k4.vplg", "summary.csv", "metrics.jsonl",
                          "summary.json"}) {
        EXPECT_EQ(slurp(path(std::string("s1/") + f)), slurp(path(std::string("s2/") + f))) << f;
    }
    const auto csv = slurp(path("s1/summary.csv"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    const auto reg = json::parse(slurp(path("s1/registry.json")));
    double prev = 1.0;
    for (const auto& e : reg["entries"]) {
        EXPECT_LE(e["quality"].get<double>(), prev);
        prev = e["quality"].get<double>();
    }

    const auto sim = run({"simulate", "--registry", path("s1/registry.json"), "--compare", "--out", path("sim")});
    ASSERT_EQ(sim.code, 0) << sim.err;
    const auto rep = json::parse(slurp(path("sim/sim_report.json")));
    EXPECT_EQ(rep["reports"].size(), 4u);
    EXPECT_EQ(rep["reports"][0]["policy"], "adaptive");
    ASSERT_EQ(run({"simulate", "--registry", path("s1/registry.json"), "--compare", "--out", path("sim2")}).code, 0);
    EXPECT_EQ(slurp(path("sim/sim_report.json")), slurp(path("sim2/sim_report.json")));
    const auto replay = run({"simulate", "--registry", path("s1/registry.json"), "--trace", path("sim/trace.jsonl"),
                             "--policy", "fixed", "--k", "2", "--out", path("sim3")});
    ASSERT_EQ(replay.code, 0) << replay.err;

    const auto an = run({"analyze-neurons", "--backbone", path("mt/backbone.vbkb"), "--plugins",
                         path("s1/plugin_k1.vplg") + "," + path("s1/plugin_k2.vplg"), "--eval-size", "4", "--seed",
                         "3", "--out", path("an")});
    ASSERT_EQ(an.code, 0) << an.err;
    EXPECT_EQ(slurp(path("an/activation.csv")).rfind("k,layer,mean_fraction\n", 0), 0u);

    const auto ev = run({"eval", "--backbone", path("mt/backbone.vbkb"), "--plugin", path("s1/plugin_k2.vplg"),
                         "--eval-size", "8", "--seed", "3", "--out", path("ev")});
    ASSERT_EQ(ev.code, 0) << ev.err;
}

TEST_F(CliTest, PluginStagesByHand)
{
    make_backbones();
    const auto pre = run({"pretrain-plugin", "--backbone", path("m/backbone.vbkb"), "--k", "2", "--r", "4",
                          "--steps", "3", "--batch", "2", "--corpus-size", "16", "--eval-size", "4", "--seed", "7",
                          "--out", path("p")});
    ASSERT_EQ(pre.code, 0) << pre.err;
    const auto ad = run({"adapt-plugin", "--backbone", path("mt/backbone.vbkb"), "--plugin", path("p/plugin.vplg"),
                         "--steps", "3", "--batch", "2", "--train-size", "16", "--eval-size", "4", "--seed", "7",
                         "--out", path("a")});
    ASSERT_EQ(ad.code, 0) << ad.err;
    EXPECT_TRUE(fs::exists(path("a/plugin.vplg")));
    EXPECT_TRUE(fs::exists(path("a/metrics.jsonl")));
    const auto neg = run({"adapt-plugin", "--backbone", path("mt/backbone.vbkb"), "--lambda", "-1", "--steps", "1",
                          "--seed", "7", "--out", path("b")});
    EXPECT_EQ(neg.code, 2);
}

TEST_F(CliTest, OutputDefaultsToEnvironment)
{
    make_backbones();
    ::setenv("VARIKIT_OUT", path("envout").c_str(), 1);
    const auto r = run({"eval", "--backbone", path("mt/backbone.vbkb"), "--eval-size", "4", "--seed", "1"});
    ::unsetenv("VARIKIT_OUT");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("envout/config.resolved.json")));
}
