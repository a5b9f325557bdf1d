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

// The `varikit` command line.
//
// Every subcommand takes its parameters from flags, from a JSON object given
// with --config (keys are flag names without the leading dashes), or both;
// flags win. Each run that writes files records the fully resolved parameters
// in <out>/config.resolved.json. Stochastic commands need --seed; all random
// streams are derived from it by name, so two commands that share a seed also
// share their generated datasets.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "varikit/analysis.hpp"
#include "varikit/backbone.hpp"
#include "varikit/cost.hpp"
#include "varikit/data.hpp"
#include "varikit/plugin.hpp"
#include "varikit/scheduler.hpp"
#include "varikit/training.hpp"

namespace varikit::cli {

using json = nlohmann::ordered_json;

/// Bad invocation: reported with exit code 1.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flags of one subcommand, mirrored as config-file keys.
class ParamSet {
public:
    template <class V>
    CLI::Option* add(CLI::App* app, const std::string& name, V& ref, const std::string& help)
    {
        CLI::Option* opt = app->add_option("--" + name, ref, help)->capture_default_str();
        entries_.push_back({name, opt,
                            [&ref, name](const nlohmann::json& j) {
                                try {
                                    ref = j.get<V>();
                                } catch (const nlohmann::json::exception&) {
                                    throw UsageError("config key '" + name + "' has the wrong type");
                                }
                            },
                            [&ref] { return json(ref); }});
        return opt;
    }

    CLI::Option* flag(CLI::App* app, const std::string& name, bool& ref, const std::string& help)
    {
        CLI::Option* opt = app->add_flag("--" + name, ref, help);
        entries_.push_back({name, opt,
                            [&ref, name](const nlohmann::json& j) {
                                if (!j.is_boolean()) {
                                    throw UsageError("config key '" + name + "' must be a boolean");
                                }
                                ref = j.get<bool>();
                            },
                            [&ref] { return json(ref); }});
        return opt;
    }

    /// Fills every parameter not given on the command line from `cfg`.
    void apply_config(const nlohmann::json& cfg)
    {
        if (!cfg.is_object()) {
            throw UsageError("config file must hold a JSON object");
        }
        for (const auto& [key, value] : cfg.items()) {
            Entry* e = find(key);
            if (!e) {
                throw UsageError("unknown config key '" + key + "'");
            }
            if (e->opt->count() == 0) {
                e->set(value);
                e->from_config = true;
            }
        }
    }

    bool given(const std::string& name) const
    {
        for (const auto& e : entries_) {
            if (e.name == name) {
                return e.opt->count() > 0 || e.from_config;
            }
        }
        return false;
    }

    json resolved() const
    {
        json j = json::object();
        for (const auto& e : entries_) {
            j[e.name] = e.get();
        }
        return j;
    }

private:
    struct Entry {
        std::string name;
        CLI::Option* opt;
        std::function<void(const nlohmann::json&)> set;
        std::function<json()> get;
        bool from_config = false;
    };

    Entry* find(const std::string& name)
    {
        for (auto& e : entries_) {
            if (e.name == name) {
                return &e;
            }
        }
        return nullptr;
    }

    std::vector<Entry> entries_;
};

struct BackboneFlags {
    std::size_t d = 32;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_len = 64;

    void add(ParamSet& ps, CLI::App* app)
    {
        ps.add(app, "d", d, "hidden size");
        ps.add(app, "layers", layers, "encoder blocks");
        ps.add(app, "heads", heads, "attention heads");
        ps.add(app, "ffn-mult", ffn_mult, "FFN middle width as a multiple of d");
        ps.add(app, "max-len", max_len, "longest sequence the position table covers");
    }

    BackboneConfig config() const
    {
        BackboneConfig c;
        c.d = d;
        c.n_layers = layers;
        c.n_heads = heads;
        c.ffn_mult = ffn_mult;
        c.max_seq_len = max_len;
        c.validate();
        return c;
    }
};

namespace detail {

inline std::filesystem::path prepare_out(const std::string& out)
{
    std::filesystem::path p = out;
    if (p.empty()) {
        const char* env = std::getenv("VARIKIT_OUT");
        p = env && *env ? env : "varikit-out";
    }
    std::filesystem::create_directories(p);
    return p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("cannot write '" + path.string() + "'");
    }
    f << text;
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json metrics_json(const StepMetrics& m)
{
    json j;
    j["step"] = m.step;
    if (m.distill_loss) {
        j["distill_loss"] = *m.distill_loss;
    }
    if (m.task_loss) {
        j["task_loss"] = *m.task_loss;
    }
    if (m.eval_accuracy) {
        j["eval_accuracy"] = *m.eval_accuracy;
    }
    return j;
}

/// Appends one JSON line per training step.
class MetricsFile {
public:
    explicit MetricsFile(const std::filesystem::path& path) : f_(path, std::ios::binary | std::ios::trunc)
    {
        if (!f_) {
            throw std::runtime_error("cannot write '" + path.string() + "'");
        }
    }
    void write(const json& j) { f_ << j.dump() << '\n'; }

    MetricsSink sink()
    {
        return [this](const StepMetrics& m) { write(metrics_json(m)); };
    }

private:
    std::ofstream f_;
};

struct TaskData {
    ToyTask train;
    ToyTask eval;
};

inline TaskData make_data(TaskKind kind, std::uint64_t seed, std::size_t train_size, std::size_t eval_size)
{
    if (kind == TaskKind::reconstruction) {
        const auto corpus = make_toy_corpus(derive_seed(seed, "corpus"), train_size);
        const auto held = make_toy_corpus(derive_seed(seed, "corpus-eval"), eval_size);
        return {make_reconstruction_task(corpus, derive_seed(seed, "mask")),
                make_reconstruction_task(held, derive_seed(seed, "mask-eval"))};
    }
    return {make_toy_task(kind, derive_seed(seed, "task-train"), train_size),
            make_toy_task(kind, derive_seed(seed, "task-eval"), eval_size)};
}

inline TaskKind task_kind(const std::string& s)
{
    try {
        return parse_task_kind(s);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

inline PluginSite site_of(const std::string& s)
{
    try {
        return parse_site(s);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

inline json eval_json(const ToyTask& eval, const BackboneWeights<float>& w, const PluginBundle<float>* b)
{
    json j;
    j["task"] = to_string(eval.kind);
    j["examples"] = eval.examples.size();
    j["majority_baseline"] = majority_baseline(eval);
    const double base = plugged_accuracy<float>(eval, w, nullptr);
    j["baseline_accuracy"] = base;
    if (b) {
        const double acc = plugged_accuracy<float>(eval, w, b);
        j["k"] = b->k;
        j["r"] = b->r;
        j["site"] = to_string(b->site);
        j["accuracy"] = acc;
        j["relative_accuracy"] = base > 0 ? acc / base : 0.0;
        j["distill_loss"] = mean_distill_loss<float>(sequences_of(eval), w, b);
    } else {
        j["accuracy"] = base;
    }
    return j;
}

inline json cost_json(const CostReport& r)
{
    json j;
    j["n"] = r.n;
    j["d"] = r.d;
    j["k"] = r.k;
    j["r"] = r.r;
    j["plugin_params"] = r.plugin_params;
    j["host_params"] = r.host_params;
    j["plugin_flops"] = r.plugin_flops;
    j["host_flops_compressed"] = r.host_flops_compressed;
    j["host_flops_uncompressed"] = r.host_flops_uncompressed;
    j["param_overhead_ratio"] = r.param_overhead_ratio;
    j["flops_saving_ratio"] = r.flops_saving_ratio;
    j["plugin_flops_ratio"] = r.plugin_flops_ratio;
    j["approx_overhead_ratio"] = r.approx_overhead_ratio;
    j["convention"] = r.convention;
    return j;
}

inline json config_json(const BackboneConfig& c)
{
    return json{{"vocab", c.vocab_size}, {"d", c.d},         {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},  {"ffn_mult", c.ffn_mult}, {"max_seq_len", c.max_seq_len}};
}

/// Reads a registry written by sweep-k: {"backbone": {...}, "entries": [{"k", "r", "quality", "plugin"?}]}.
inline PluginRegistry load_registry(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("cannot open registry '" + path.string() + "'");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
        BackboneConfig c;
        for (const auto& [key, v] : j.at("backbone").items()) {
            if (key == "vocab") c.vocab_size = v.get<std::size_t>();
            else if (key == "d") c.d = v.get<std::size_t>();
            else if (key == "n_layers") c.n_layers = v.get<std::size_t>();
            else if (key == "n_heads") c.n_heads = v.get<std::size_t>();
            else if (key == "ffn_mult") c.ffn_mult = v.get<std::size_t>();
            else if (key == "max_seq_len") c.max_seq_len = v.get<std::size_t>();
            else throw InputError("unknown registry backbone key '" + key + "'");
        }
        c.validate();
        PluginRegistry reg(c);
        for (const auto& e : j.at("entries")) {
            for (const auto& [key, v] : e.items()) {
                (void)v;
                if (key != "k" && key != "r" && key != "quality" && key != "plugin") {
                    throw InputError("unknown registry entry key '" + key + "'");
                }
            }
            RegistryEntry re;
            re.k = e.at("k").get<std::size_t>();
            re.r = e.at("r").get<std::size_t>();
            re.quality = e.at("quality").get<double>();
            if (e.contains("plugin")) {
                auto p = std::filesystem::path(e.at("plugin").get<std::string>());
                if (p.is_relative()) {
                    p = path.parent_path() / p;
                }
                re.bundle = std::make_shared<const PluginBundle<float>>(load_plugin<float>(p));
            }
            reg.add(std::move(re));
        }
        reg.validate();
        return reg;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("registry '" + path.string() + "': " + e.what());
    }
}

}  // namespace detail


/// One subcommand: its flags, their defaults and its action.
class Command {
public:
    virtual ~Command() = default;

    CLI::App* attach(CLI::App& app)
    {
        app_ = app.add_subcommand(name(), summary());
        app_->add_option("--config", config_path_, "JSON file of parameters (keys are flag names)");
        if (writes_files()) {
            app_->add_option("--out", out_dir_, "output directory (default: $VARIKIT_OUT)");
        }
        if (stochastic()) {
            ps_.add(app_, "seed", seed_, "root seed (required)");
        }
        declare();
        return app_;
    }

    bool selected() const { return app_ && app_->parsed(); }

    void execute(std::ostream& out)
    {
        if (!config_path_.empty()) {
            std::ifstream f(config_path_);
            if (!f) {
                throw UsageError("cannot open config '" + config_path_ + "'");
            }
            nlohmann::json cfg;
            try {
                cfg = nlohmann::json::parse(f);
            } catch (const nlohmann::json::exception& e) {
                throw UsageError("config '" + config_path_ + "' is not valid JSON: " + e.what());
            }
            ps_.apply_config(cfg);
        }
        if (stochastic() && !ps_.given("seed")) {
            throw UsageError("--seed is required for " + name());
        }
        run(out);
    }

protected:
    virtual std::string name() const = 0;
    virtual std::string summary() const = 0;
    virtual bool stochastic() const { return true; }
    virtual bool writes_files() const { return true; }
    virtual void declare() = 0;
    virtual void run(std::ostream& out) = 0;

    template <class V>
    CLI::Option* param(const std::string& flag, V& ref, const std::string& help)
    {
        return ps_.add(app_, flag, ref, help);
    }

    /// Creates the output directory and records the resolved parameters in it.
    std::filesystem::path output_dir()
    {
        const auto dir = detail::prepare_out(out_dir_);
        json j;
        j["command"] = name();
        j["params"] = ps_.resolved();
        detail::write_json(dir / "config.resolved.json", j);
        return dir;
    }

    static BackboneWeights<float> require_backbone(const std::string& path, const char* flag)
    {
        if (path.empty()) {
            throw UsageError(std::string("--") + flag + " is required");
        }
        return load_backbone<float>(path);
    }

    CLI::App* app_ = nullptr;
    ParamSet ps_;
    std::string config_path_;
    std::string out_dir_;
    std::uint64_t seed_ = 0;
};

class TrainBackbone final : public Command {
    std::string name() const override { return "train-backbone"; }
    std::string summary() const override { return "train (or fine-tune) the encoder on a toy task"; }
    void declare() override
    {
        bb_.add(ps_, app_);
        param("task", task_, "seq_cls | token_tag | reconstruction");
        param("steps", steps_, "optimizer steps");
        param("batch", batch_, "sequences per step");
        param("lr", lr_, "Adam learning rate");
        param("train-size", train_size_, "training examples (corpus sequences for reconstruction)");
        param("eval-size", eval_size_, "held-out examples");
        param("eval-every", eval_every_, "steps between held-out evaluations (0: never)");
        param("init", init_, "checkpoint to fine-tune from; its head is replaced when the task differs");
    }
    void run(std::ostream& out) override
    {
        const auto kind = detail::task_kind(task_);
        const auto cfg = bb_.config();
        std::optional<BackboneWeights<float>> init;
        if (!init_.empty()) {
            init = load_backbone<float>(init_);
            if (!(init->config == cfg)) {
                throw ConfigError("--init checkpoint has a different backbone shape");
            }
        }
        const auto data = detail::make_data(kind, seed_, train_size_, eval_size_);
        const auto dir = output_dir();
        detail::MetricsFile metrics(dir / "metrics.jsonl");
        BackboneTrainSettings s;
        s.steps = steps_;
        s.batch_size = batch_;
        s.adam.learning_rate = lr_;
        s.eval_every = eval_every_;
        const auto w = train_backbone<float>(data.train, cfg, s, derive_seed(seed_, "backbone"),
                                             init ? &*init : nullptr, &data.eval, metrics.sink());
        save_backbone(w, dir / "backbone.vbkb");
        json e = detail::eval_json(data.eval, w, nullptr);
        e["checksum"] = w.checksum();
        detail::write_json(dir / "eval.json", e);
        out << e.dump(2) << '\n';
    }

    BackboneFlags bb_;
    std::string task_ = "token_tag";
    std::size_t steps_ = 1500, batch_ = 16, train_size_ = 8192, eval_size_ = 512, eval_every_ = 0;
    double lr_ = 3e-3;
    std::string init_;
};

class PretrainPlugin final : public Command {
    std::string name() const override { return "pretrain-plugin"; }
    std::string summary() const override { return "task-agnostic plugin distillation on corpus text"; }
    void declare() override
    {
        param("backbone", backbone_, "frozen pre-trained backbone checkpoint");
        param("k", k_, "compression ratio");
        param("r", r_, "decompression bottleneck");
        param("site", site_, "ffn | attention | attention_kv");
        param("steps", steps_, "optimizer steps");
        param("batch", batch_, "sequences per step");
        param("lr", lr_, "Adam learning rate");
        param("corpus-size", corpus_size_, "corpus sequences");
        param("eval-size", eval_size_, "held-out corpus sequences for the loss summary");
    }
    void run(std::ostream& out) override
    {
        const auto w = require_backbone(backbone_, "backbone");
        auto bundle = init_plugin<float>(w.config.d, k_, r_, detail::site_of(site_), w.config.n_layers,
                                         derive_seed(seed_, "plugin-init"));
        const auto corpus = make_toy_corpus(derive_seed(seed_, "corpus"), corpus_size_);
        const auto held = make_toy_corpus(derive_seed(seed_, "corpus-eval"), eval_size_);
        const auto dir = output_dir();
        detail::MetricsFile metrics(dir / "metrics.jsonl");
        TrainingConfig tc;
        tc.steps = steps_;
        tc.batch_size = batch_;
        tc.adam.learning_rate = lr_;
        tc.seed = derive_seed(seed_, "plugin-train");
        const double before = mean_distill_loss<float>(held.sequences, w, &bundle);
        const auto trained = pretrain_plugin<float>(corpus, w, bundle, tc, metrics.sink());
        save_plugin(trained, dir / "plugin.vplg");
        json s;
        s["k"] = k_;
        s["r"] = r_;
        s["site"] = to_string(trained.site);
        s["initial_distill_loss"] = before;
        s["final_distill_loss"] = mean_distill_loss<float>(held.sequences, w, &trained);
        s["plugin_checksum"] = trained.checksum();
        detail::write_json(dir / "summary.json", s);
        out << s.dump(2) << '\n';
    }

    std::string backbone_, site_ = "ffn";
    std::size_t k_ = 2, r_ = 8, steps_ = 1000, batch_ = 8, corpus_size_ = 4096, eval_size_ = 256;
    double lr_ = 3e-3;
};

class AdaptPlugin final : public Command {
    std::string name() const override { return "adapt-plugin"; }
    std::string summary() const override { return "task-specific plugin distillation against a task model"; }
    void declare() override
    {
        param("backbone", backbone_, "frozen task model checkpoint");
        param("plugin", plugin_, "pre-trained plugin to start from (default: fresh initialization)");
        param("k", k_, "compression ratio of a fresh plugin");
        param("r", r_, "bottleneck of a fresh plugin");
        param("site", site_, "site of a fresh plugin");
        param("task", task_, "seq_cls | token_tag");
        param("steps", steps_, "optimizer steps");
        param("batch", batch_, "sequences per step");
        param("lr", lr_, "Adam learning rate");
        param("lambda", lambda_, "weight of the task loss (0: distillation only)");
        param("train-size", train_size_, "training examples");
        param("eval-size", eval_size_, "held-out examples");
        param("eval-every", eval_every_, "steps between held-out evaluations (0: never)");
    }
    void run(std::ostream& out) override
    {
        const auto w = require_backbone(backbone_, "backbone");
        const auto bundle = plugin_.empty()
                                ? init_plugin<float>(w.config.d, k_, r_, detail::site_of(site_), w.config.n_layers,
                                                     derive_seed(seed_, "plugin-init"))
                                : load_plugin<float>(plugin_, PluginStage::pretrained);
        const auto data = detail::make_data(detail::task_kind(task_), seed_, train_size_, eval_size_);
        const auto dir = output_dir();
        detail::MetricsFile metrics(dir / "metrics.jsonl");
        TrainingConfig tc;
        tc.steps = steps_;
        tc.batch_size = batch_;
        tc.adam.learning_rate = lr_;
        tc.lambda = lambda_;
        tc.eval_every = eval_every_;
        tc.seed = derive_seed(seed_, "plugin-adapt");
        const auto adapted = adapt_plugin<float>(data.train, w, bundle, tc, &data.eval, metrics.sink());
        save_plugin(adapted, dir / "plugin.vplg");
        json e = detail::eval_json(data.eval, w, &adapted);
        e["plugin_checksum"] = adapted.checksum();
        detail::write_json(dir / "eval.json", e);
        out << e.dump(2) << '\n';
    }

    std::string backbone_, plugin_, site_ = "ffn", task_ = "token_tag";
    std::size_t k_ = 2, r_ = 8, steps_ = 1000, batch_ = 8, train_size_ = 8192, eval_size_ = 512, eval_every_ = 0;
    double lr_ = 3e-3, lambda_ = 0.0;
};

class Eval final : public Command {
    std::string name() const override { return "eval"; }
    std::string summary() const override { return "task accuracy with or without a plugin"; }
    void declare() override
    {
        param("backbone", backbone_, "task model checkpoint");
        param("plugin", plugin_, "plugin to insert (default: none)");
        param("task", task_, "seq_cls | token_tag | reconstruction");
        param("eval-size", eval_size_, "held-out examples");
    }
    void run(std::ostream& out) override
    {
        const auto w = require_backbone(backbone_, "backbone");
        std::optional<PluginBundle<float>> b;
        if (!plugin_.empty()) {
            b = load_plugin<float>(plugin_);
        }
        const auto data = detail::make_data(detail::task_kind(task_), seed_, 0, eval_size_);
        const auto dir = output_dir();
        const json e = detail::eval_json(data.eval, w, b ? &*b : nullptr);
        detail::write_json(dir / "eval.json", e);
        out << e.dump(2) << '\n';
    }

    std::string backbone_, plugin_, task_ = "token_tag";
    std::size_t eval_size_ = 512;
};

class Cost final : public Command {
    std::string name() const override { return "cost"; }
    std::string summary() const override { return "closed-form parameter and FLOP accounting for an FFN plugin"; }
    bool stochastic() const override { return false; }
    bool writes_files() const override { return false; }
    void declare() override
    {
        param("n", n_, "sequence length");
        param("d", d_, "hidden size");
        param("k", k_, "compression ratio");
        param("r", r_, "decompression bottleneck");
        param("format", format_, "json | table");
    }
    void run(std::ostream& out) override
    {
        if (format_ != "json" && format_ != "table") {
            throw UsageError("--format must be json or table");
        }
        CostReport rep;
        try {
            rep = speedup_report(n_, d_, k_, r_);
        } catch (const DomainError& e) {
            throw UsageError(e.what());
        }
        if (format_ == "table") {
            out << format_table(rep);
        } else {
            out << detail::cost_json(rep).dump(2) << '\n';
        }
    }

    std::int64_t n_ = 512, d_ = 768, k_ = 4, r_ = 64;
    std::string format_ = "json";
};

class SweepK final : public Command {
    std::string name() const override { return "sweep-k"; }
    std::string summary() const override { return "adapt and evaluate one plugin per compression ratio"; }
    void declare() override
    {
        param("backbone", backbone_, "frozen task model checkpoint");
        param("pretrain-backbone", pretrain_backbone_,
              "pre-trained backbone; when given, each plugin is first pre-trained on corpus text");
        param("ks", ks_, "compression ratios")->delimiter(',');
        param("r", r_, "decompression bottleneck");
        param("task", task_, "seq_cls | token_tag");
        param("steps", steps_, "training steps per stage and ratio");
        param("batch", batch_, "sequences per step");
        param("lr", lr_, "Adam learning rate");
        param("lambda", lambda_, "weight of the task loss");
        param("train-size", train_size_, "training examples");
        param("eval-size", eval_size_, "held-out examples");
        param("corpus-size", corpus_size_, "corpus sequences for pre-training");
    }
    void run(std::ostream& out) override
    {
        if (ks_.empty()) {
            throw UsageError("--ks must name at least one ratio");
        }
        for (std::size_t k : ks_) {
            if (k == 0) {
                throw UsageError("compression ratios must be positive");
            }
        }
        const auto w = require_backbone(backbone_, "backbone");
        std::optional<BackboneWeights<float>> pre;
        if (!pretrain_backbone_.empty()) {
            pre = load_backbone<float>(pretrain_backbone_);
            if (!(pre->config == w.config)) {
                throw ConfigError("--pretrain-backbone has a different backbone shape");
            }
        }
        const auto data = detail::make_data(detail::task_kind(task_), seed_, train_size_, eval_size_);
        const auto corpus = make_toy_corpus(derive_seed(seed_, "corpus"), corpus_size_);
        const auto dir = output_dir();
        detail::MetricsFile metrics(dir / "metrics.jsonl");
        const double base = plugged_accuracy<float>(data.eval, w, nullptr);
        const auto eval_seqs = sequences_of(data.eval);

        std::ostringstream csv;
        csv << std::setprecision(17);
        csv << "k,r,accuracy,baseline_accuracy,relative_accuracy,distill_loss,ffn_flops_saving\n";
        json registry;
        registry["backbone"] = detail::config_json(w.config);
        registry["entries"] = json::array({json{{"k", 1}, {"r", r_}, {"quality", 1.0}}});
        json ratios = json::array();
        std::vector<std::pair<std::size_t, double>> measured;
        for (std::size_t k : ks_) {
            const std::string tag = "-k" + std::to_string(k);
            auto bundle = init_plugin<float>(w.config.d, k, r_, PluginSite::ffn, w.config.n_layers,
                                             derive_seed(seed_, "plugin-init" + tag));
            TrainingConfig tc;
            tc.steps = steps_;
            tc.batch_size = batch_;
            tc.adam.learning_rate = lr_;
            tc.lambda = lambda_;
            auto sink_for = [&](const char* stage) {
                return [&metrics, k, stage](const StepMetrics& m) {
                    json j = detail::metrics_json(m);
                    j["k"] = k;
                    j["stage"] = stage;
                    metrics.write(j);
                };
            };
            if (pre) {
                tc.seed = derive_seed(seed_, "plugin-train" + tag);
                bundle = pretrain_plugin<float>(corpus, *pre, bundle, tc, sink_for("pretrain"));
            }
            tc.seed = derive_seed(seed_, "plugin-adapt" + tag);
            const auto adapted = adapt_plugin<float>(data.train, w, bundle, tc, nullptr, sink_for("adapt"));
            const std::string file = "plugin_k" + std::to_string(k) + ".vplg";
            save_plugin(adapted, dir / file);
            const double acc = plugged_accuracy<float>(data.eval, w, &adapted);
            const double rel = base > 0 ? acc / base : 0.0;
            const double dl = mean_distill_loss<float>(eval_seqs, w, &adapted);
            const double saving = speedup_report(512, static_cast<std::int64_t>(w.config.d),
                                                 static_cast<std::int64_t>(k), static_cast<std::int64_t>(r_))
                                      .flops_saving_ratio;
            csv << k << ',' << r_ << ',' << acc << ',' << base << ',' << rel << ',' << dl << ',' << saving << '\n';
            ratios.push_back({{"k", k},
                              {"accuracy", acc},
                              {"relative_accuracy", rel},
                              {"distill_loss", dl},
                              {"ffn_flops_saving", saving},
                              {"plugin", file}});
            measured.emplace_back(k, rel);
        }
        // Registry quality: running minimum of relative accuracy over increasing k.
        std::sort(measured.begin(), measured.end());
        double floor = 1.0;
        for (const auto& [k, rel] : measured) {
            floor = std::min(floor, rel);
            if (k > 1) {
                registry["entries"].push_back({{"k", k},
                                               {"r", r_},
                                               {"quality", floor},
                                               {"plugin", "plugin_k" + std::to_string(k) + ".vplg"}});
            }
        }
        detail::write_text(dir / "summary.csv", csv.str());
        detail::write_json(dir / "registry.json", registry);
        const json s{{"baseline_accuracy", base}, {"ratios", ratios}};
        detail::write_json(dir / "summary.json", s);
        out << s.dump(2) << '\n';
    }

    std::string backbone_, pretrain_backbone_, task_ = "token_tag";
    std::vector<std::size_t> ks_{1, 2, 4};
    std::size_t r_ = 8, steps_ = 1000, batch_ = 8, train_size_ = 8192, eval_size_ = 512, corpus_size_ = 4096;
    double lr_ = 3e-3, lambda_ = 0.0;
};

class AnalyzeNeurons final : public Command {
    std::string name() const override { return "analyze-neurons"; }
    std::string summary() const override { return "activated-neuron statistics under compression"; }
    void declare() override
    {
        param("backbone", backbone_, "frozen model checkpoint");
        param("plugins", plugins_, "FFN-site plugin files, one per ratio")->delimiter(',');
        param("task", task_, "seq_cls | token_tag | reconstruction (source of input sequences)");
        param("eval-size", eval_size_, "sequences analysed");
    }
    void run(std::ostream& out) override
    {
        const auto w = require_backbone(backbone_, "backbone");
        std::vector<PluginBundle<float>> bundles;
        for (const auto& p : plugins_) {
            bundles.push_back(load_plugin<float>(p));
        }
        const auto data = detail::make_data(detail::task_kind(task_), seed_, 0, eval_size_);
        const auto seqs = sequences_of(data.eval);
        const auto dir = output_dir();
        std::vector<std::size_t> ks{1};
        std::vector<const PluginBundle<float>*> sweep_bundles{nullptr};
        json groups = json::array();
        for (const auto& b : bundles) {
            ks.push_back(b.k);
            sweep_bundles.push_back(&b);
            const auto c = containment_summary<float>(seqs, w, b);
            groups.push_back({{"k", c.k},
                              {"mean_c_of_i", c.mean_c_of_i},
                              {"mean_u_of_c", c.mean_u_of_c},
                              {"defined_groups", c.defined},
                              {"undefined_groups", c.undefined}});
        }
        const auto sweep = activation_ratio_sweep<float>(ks, seqs, w, sweep_bundles);
        detail::write_text(dir / "activation.csv", sweep_csv(sweep));
        json fractions = json::array();
        for (std::size_t i = 0; i < ks.size(); ++i) {
            // Entries for one k share a layer list; average only this entry's rows.
            double s = 0.0;
            const std::size_t L = w.config.n_layers;
            for (std::size_t l = 0; l < L; ++l) {
                s += sweep[i * L + l].mean_fraction;
            }
            fractions.push_back({{"k", ks[i]},
                                 {"plugged", sweep_bundles[i] != nullptr},
                                 {"mean_fraction", s / static_cast<double>(L)}});
        }
        const json s{{"activated_fraction", fractions}, {"containment", groups}};
        detail::write_json(dir / "neurons.json", s);
        out << s.dump(2) << '\n';
    }

    std::string backbone_, task_ = "token_tag";
    std::vector<std::string> plugins_;
    std::size_t eval_size_ = 128;
};

class Simulate final : public Command {
    std::string name() const override { return "simulate"; }
    std::string summary() const override { return "replay a workload trace under a plugin-selection policy"; }
    bool stochastic() const override { return false; }
    void declare() override
    {
        param("registry", registry_, "registry JSON written by sweep-k");
        param("trace", trace_, "JSON-lines trace (default: the bundled two-phase trace)");
        param("trace-seed", trace_seed_, "seed of the generated two-phase trace");
        param("policy", policy_, "adaptive | fixed");
        param("k", k_, "ratio of the fixed policy");
        ps_.flag(app_, "compare", compare_, "also run every fixed-k policy");
        ps_.flag(app_, "requests", requests_, "include per-request records in the report");
    }
    void run(std::ostream& out) override
    {
        if (registry_.empty()) {
            throw UsageError("--registry is required");
        }
        if (policy_ != "adaptive" && policy_ != "fixed") {
            throw UsageError("--policy must be adaptive or fixed");
        }
        const auto reg = detail::load_registry(registry_);
        WorkloadTrace trace;
        if (trace_.empty()) {
            trace = make_two_phase_trace(trace_seed_);
        } else {
            std::ifstream f(trace_);
            if (!f) {
                throw std::runtime_error("cannot open trace '" + trace_ + "'");
            }
            trace = parse_trace(f);
        }
        const auto dir = output_dir();
        detail::write_text(dir / "trace.jsonl", format_trace(trace));
        const Policy main = policy_ == "fixed" ? Policy::fixed(k_) : Policy::adaptive();
        json reports = json::array();
        reports.push_back(to_json(simulate(trace, reg, main), requests_));
        if (compare_) {
            for (const auto& entry : reg.entries()) {
                const std::size_t k = entry.first;
                if (main.kind == Policy::Kind::fixed && main.k == k) {
                    continue;
                }
                reports.push_back(to_json(simulate(trace, reg, Policy::fixed(k)), requests_));
            }
        }
        const json s{{"capacity", trace.capacity}, {"latency_budget", trace.latency_budget}, {"reports", reports}};
        detail::write_json(dir / "sim_report.json", s);
        out << s.dump(2) << '\n';
    }

    std::string registry_, trace_, policy_ = "adaptive";
    std::uint64_t trace_seed_ = kBundledTraceSeed;
    std::size_t k_ = 1;
    bool compare_ = false, requests_ = false;
};

/// Parses and runs one command line (without the program name). Output text goes to
/// `out`, diagnostics to `err`.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"varikit: plug-in sequence compression for frozen Transformer encoders", "varikit"};
    app.require_subcommand(1);

    std::vector<std::unique_ptr<Command>> commands;
    commands.push_back(std::make_unique<TrainBackbone>());
    commands.push_back(std::make_unique<PretrainPlugin>());
    commands.push_back(std::make_unique<AdaptPlugin>());
    commands.push_back(std::make_unique<Eval>());
    commands.push_back(std::make_unique<Cost>());
    commands.push_back(std::make_unique<SweepK>());
    commands.push_back(std::make_unique<AnalyzeNeurons>());
    commands.push_back(std::make_unique<Simulate>());
    for (auto& c : commands) {
        c->attach(app);
    }

    if (args.empty()) {
        err << app.help();
        return 1;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "varikit: " << e.what() << "\n\n" << app.help();
        return 1;
    }
    try {
        for (auto& c : commands) {
            if (c->selected()) {
                c->execute(out);
                return 0;
            }
        }
        throw UsageError("no subcommand given");
    } catch (const UsageError& e) {
        err << "varikit: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "varikit: error: " << e.what() << "\n";
        return 2;
    }
}

inline int run(int argc, char** argv)
{
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args);
}

}  // namespace varikit::cli
