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

// Deterministic synthetic data standing in for a text corpus and downstream tasks.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "varikit/errors.hpp"
#include "varikit/rng.hpp"

namespace varikit {

/// Readout style of a task head.
enum class HeadKind : std::uint32_t {
    sequence = 0,  ///< mean-pooled final states -> one label per sequence
    token = 1,     ///< per-token readout -> one label per position
};

enum class TaskKind : std::uint32_t { seq_cls = 0, token_tag = 1, reconstruction = 2 };

inline std::string to_string(TaskKind k)
{
    switch (k) {
    case TaskKind::seq_cls: return "seq_cls";
    case TaskKind::token_tag: return "token_tag";
    case TaskKind::reconstruction: return "reconstruction";
    }
    return "?";
}

inline TaskKind parse_task_kind(const std::string& s)
{
    if (s == "seq_cls") return TaskKind::seq_cls;
    if (s == "token_tag") return TaskKind::token_tag;
    if (s == "reconstruction") return TaskKind::reconstruction;
    throw ConfigError("unknown task kind '" + s + "' (expected seq_cls, token_tag or reconstruction)");
}

struct Example {
    std::vector<int> tokens;
    /// One entry for sequence tasks, one per token for token tasks; -1 = not scored.
    std::vector<int> labels;
};

struct ToyCorpus {
    std::vector<std::vector<int>> sequences;
};

struct ToyTask {
    TaskKind kind = TaskKind::seq_cls;
    HeadKind head = HeadKind::sequence;
    int n_classes = 2;
    std::vector<Example> examples;
};

/// Shape parameters shared by the generators. Token ids stay below vocab_size - 1;
/// the last id is reserved as the mask symbol.
struct ToyDataSpec {
    int vocab_size = 64;
    int min_len = 8;
    int max_len = 24;
    int n_motifs = 12;
    int motif_len = 4;
    /// Ids below this count as markers in the tagging task.
    int marker_ids = 8;
};

inline int mask_token(const ToyDataSpec& spec) { return spec.vocab_size - 1; }

namespace detail {

inline void check_spec(const ToyDataSpec& s)
{
    if (s.vocab_size < 8 || s.min_len < 1 || s.max_len < s.min_len || s.marker_ids < 1 ||
        s.marker_ids >= s.vocab_size - 1) {
        throw ConfigError("invalid toy data specification");
    }
}

inline int draw_len(Rng& rng, const ToyDataSpec& s) { return s.min_len + rng.below_int(s.max_len - s.min_len + 1); }

}  // namespace detail

/// Random sequences built from a fixed bank of repeated motifs interleaved with noise tokens.
inline ToyCorpus make_toy_corpus(std::uint64_t seed, std::size_t size, const ToyDataSpec& spec = {})
{
    detail::check_spec(spec);
    Rng rng(derive_seed(seed, "corpus"));
    const int usable = spec.vocab_size - 1;
    std::vector<std::vector<int>> motifs(static_cast<std::size_t>(spec.n_motifs));
    for (auto& m : motifs) {
        for (int i = 0; i < spec.motif_len; ++i) {
            m.push_back(rng.below_int(usable));
        }
    }
    ToyCorpus c;
    c.sequences.reserve(size);
    for (std::size_t s = 0; s < size; ++s) {
        const int len = detail::draw_len(rng, spec);
        std::vector<int> seq;
        while (static_cast<int>(seq.size()) < len) {
            if (rng.bernoulli(0.6)) {
                const auto& m = motifs[rng.below(motifs.size())];
                seq.insert(seq.end(), m.begin(), m.end());
            } else {
                seq.push_back(rng.below_int(usable));
            }
        }
        seq.resize(static_cast<std::size_t>(len));
        c.sequences.push_back(std::move(seq));
    }
    return c;
}

/// Parity of the number of marker ids in tokens[0..t], for every t.
inline std::vector<int> prefix_parity_labels(const std::vector<int>& tokens, int marker_ids)
{
    std::vector<int> labels(tokens.size());
    int parity = 0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < marker_ids) {
            parity ^= 1;
        }
        labels[t] = parity;
    }
    return labels;
}

/// seq_cls: which half of the id range holds the majority of tokens (exactly balanced labels).
/// token_tag: per-position parity of markers seen so far.
inline ToyTask make_toy_task(TaskKind kind, std::uint64_t seed, std::size_t size, const ToyDataSpec& spec = {})
{
    detail::check_spec(spec);
    ToyTask task;
    task.kind = kind;
    const int usable = spec.vocab_size - 1;
    switch (kind) {
    case TaskKind::seq_cls: {
        Rng rng(derive_seed(seed, "seq_cls"));
        task.head = HeadKind::sequence;
        task.n_classes = 2;
        const int half = usable / 2;
        for (std::size_t i = 0; i < size; ++i) {
            const int label = static_cast<int>(i % 2);
            int len = detail::draw_len(rng, spec) | 1;  // odd length: no ties
            if (len > spec.max_len) {
                len -= 2;
            }
            const int majority = len / 2 + 1 + rng.below_int(len - len / 2);
            std::vector<int> toks;
            for (int t = 0; t < len; ++t) {
                const bool from_label_half = t < majority;
                const int side = from_label_half ? label : 1 - label;
                toks.push_back(side == 0 ? rng.below_int(half) : half + rng.below_int(usable - half));
            }
            for (std::size_t t = toks.size(); t > 1; --t) {
                std::swap(toks[t - 1], toks[rng.below(t)]);
            }
            task.examples.push_back({std::move(toks), {label}});
        }
        for (std::size_t i = task.examples.size(); i > 1; --i) {
            std::swap(task.examples[i - 1], task.examples[rng.below(i)]);
        }
        break;
    }
    case TaskKind::token_tag: {
        Rng rng(derive_seed(seed, "token_tag"));
        task.head = HeadKind::token;
        task.n_classes = 2;
        for (std::size_t i = 0; i < size; ++i) {
            const int len = detail::draw_len(rng, spec);
            std::vector<int> toks;
            for (int t = 0; t < len; ++t) {
                toks.push_back(rng.below_int(usable));
            }
            auto labels = prefix_parity_labels(toks, spec.marker_ids);
            task.examples.push_back({std::move(toks), std::move(labels)});
        }
        break;
    }
    case TaskKind::reconstruction:
        throw ConfigError("reconstruction tasks are derived from a corpus; use make_reconstruction_task");
    }
    return task;
}

/// Masked-token reconstruction over a corpus: masked positions are replaced by the mask id
/// and labelled with the original token; unmasked positions are not scored.
inline ToyTask make_reconstruction_task(const ToyCorpus& corpus, std::uint64_t seed, double mask_rate = 0.15,
                                        const ToyDataSpec& spec = {})
{
    detail::check_spec(spec);
    Rng rng(derive_seed(seed, "reconstruction"));
    ToyTask task;
    task.kind = TaskKind::reconstruction;
    task.head = HeadKind::token;
    task.n_classes = spec.vocab_size;
    for (const auto& seq : corpus.sequences) {
        Example ex{seq, std::vector<int>(seq.size(), -1)};
        bool any = false;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            if (rng.bernoulli(mask_rate)) {
                ex.labels[t] = seq[t];
                ex.tokens[t] = mask_token(spec);
                any = true;
            }
        }
        if (!any && !seq.empty()) {
            const std::size_t t = rng.below(seq.size());
            ex.labels[t] = seq[t];
            ex.tokens[t] = mask_token(spec);
        }
        task.examples.push_back(std::move(ex));
    }
    return task;
}

/// Accuracy of always predicting the most frequent label.
inline double majority_baseline(const ToyTask& task)
{
    std::vector<std::size_t> counts(static_cast<std::size_t>(task.n_classes), 0);
    std::size_t total = 0;
    for (const auto& ex : task.examples) {
        for (int l : ex.labels) {
            if (l >= 0) {
                ++counts[static_cast<std::size_t>(l)];
                ++total;
            }
        }
    }
    if (total == 0) {
        return 0.0;
    }
    return static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(total);
}

}  // namespace varikit
