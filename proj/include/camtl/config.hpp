#pragma once

// Experiment configuration and its JSON form.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "camtl/data.hpp"
#include "camtl/model.hpp"
#include "camtl/sampler.hpp"

namespace camtl {

using json = nlohmann::json;

struct SyntheticSource {
    Generator generator = Generator::pattern_presence;
    std::size_t size = 1000;
    std::size_t dev_size = 200;
    std::size_t vocab = 16;
    std::size_t motif_length = 2;
    double label_noise = 0.0;
    double dev_noise = 0.0;
    std::size_t min_length = 0;
    std::uint64_t seed = 0;
};

struct TsvSource {
    std::string train;
    std::string dev;
};

struct TaskSpec {
    std::string name;
    HeadKind kind = HeadKind::classification;
    std::size_t classes = 2;
    double range_lo = 0.0, range_hi = 1.0;  // regression outputs
    std::optional<SyntheticSource> synthetic;
    std::optional<TsvSource> tsv;

    TaskHeadSpec head() const { return {name, kind, classes}; }
};

struct OptimizerConfig {
    double lr = 1e-3;
    double warmup_fraction = 0.1;
    bool linear_decay = true;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

enum class RegressionScoring { bins, exclude };

struct ExperimentConfig {
    ModelConfig model;
    std::vector<TaskSpec> tasks;
    SamplerPolicy sampler = SamplerPolicy::mt_uncertainty;
    OptimizerConfig optimizer;
    std::size_t steps = 1000;
    std::size_t batch_size = 32;
    std::uint64_t seed = 12;
    std::size_t eval_every = 100;
    std::size_t checkpoint_every = 0;  // 0 keeps only the final checkpoint
    std::string out_dir = "runs/default";
    RegressionScoring regression_scoring = RegressionScoring::bins;
    bool policy_trace = false;

    void validate() const {
        model.validate();
        if (tasks.empty()) throw std::invalid_argument("config: no tasks");
        if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
        if (optimizer.warmup_fraction < 0.0 || optimizer.warmup_fraction > 1.0) {
            throw std::invalid_argument("config: warmup_fraction must be in [0, 1]");
        }
        std::vector<std::string> seen;
        for (const auto& t : tasks) {
            if (t.name.empty()) throw std::invalid_argument("config: task without a name");
            if (std::find(seen.begin(), seen.end(), t.name) != seen.end()) {
                throw std::invalid_argument("config: duplicate task '" + t.name + "'");
            }
            seen.push_back(t.name);
            if (t.kind == HeadKind::classification && t.classes < 2) {
                throw std::invalid_argument("config: task '" + t.name + "' needs at least 2 classes");
            }
            if (t.kind == HeadKind::regression && !(t.range_hi > t.range_lo)) {
                throw std::invalid_argument("config: task '" + t.name + "' has an empty output range");
            }
            if (t.synthetic.has_value() == t.tsv.has_value()) {
                throw std::invalid_argument("config: task '" + t.name + "' needs exactly one of synthetic or tsv");
            }
            if (t.synthetic) {
                if (t.synthetic->size < batch_size) {
                    throw std::invalid_argument("config: task '" + t.name + "' has fewer examples than batch_size");
                }
                if (t.synthetic->vocab + 2 > model.vocab_size) {
                    throw std::invalid_argument("config: task '" + t.name + "' uses more tokens than vocab_size");
                }
            }
        }
    }
};

// JSON.

inline std::string to_string(BottleneckVariant v) {
    switch (v) {
        case BottleneckVariant::none: return "none";
        case BottleneckVariant::base_top: return "base_top";
        case BottleneckVariant::large_skip: return "large_skip";
    }
    return "?";
}

inline std::string to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::none: return "none";
        case AttentionVariant::block_diagonal: return "block_diagonal";
        case AttentionVariant::full_block: return "full_block";
    }
    return "?";
}

inline BottleneckVariant parse_bottleneck(const std::string& s) {
    if (s == "none") return BottleneckVariant::none;
    if (s == "base_top") return BottleneckVariant::base_top;
    if (s == "large_skip") return BottleneckVariant::large_skip;
    throw std::invalid_argument("unknown bottleneck variant '" + s + "'");
}

inline AttentionVariant parse_attention(const std::string& s) {
    if (s == "none") return AttentionVariant::none;
    if (s == "block_diagonal") return AttentionVariant::block_diagonal;
    if (s == "full_block") return AttentionVariant::full_block;
    throw std::invalid_argument("unknown attention variant '" + s + "'");
}

namespace detail {

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

template <class T>
void read(const json& j, const char* key, std::optional<T>& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

}  // namespace detail

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"seq_len", c.seq_len},
             {"d_model", c.d_model},
             {"n_layers", c.n_layers},
             {"n_heads", c.n_heads},
             {"bottleneck", to_string(c.bottleneck)},
             {"attention", to_string(c.attention)},
             {"conditional_alignment", c.conditional_alignment},
             {"conditional_layer_norm", c.conditional_layer_norm},
             {"vocab_size", c.vocab_size},
             {"seed", c.seed}};
    if (c.n_blocks) j["n_blocks"] = *c.n_blocks;
    if (c.frozen_layers) j["frozen_layers"] = *c.frozen_layers;
    if (c.bottleneck_width) j["bottleneck_width"] = *c.bottleneck_width;
    if (c.ffn_width) j["ffn_width"] = *c.ffn_width;
}

inline void from_json(const json& j, ModelConfig& c) {
    detail::read(j, "seq_len", c.seq_len);
    detail::read(j, "d_model", c.d_model);
    detail::read(j, "n_layers", c.n_layers);
    detail::read(j, "n_heads", c.n_heads);
    detail::read(j, "n_blocks", c.n_blocks);
    detail::read(j, "frozen_layers", c.frozen_layers);
    if (j.contains("bottleneck")) c.bottleneck = parse_bottleneck(j.at("bottleneck").get<std::string>());
    if (j.contains("attention")) c.attention = parse_attention(j.at("attention").get<std::string>());
    detail::read(j, "conditional_alignment", c.conditional_alignment);
    detail::read(j, "conditional_layer_norm", c.conditional_layer_norm);
    detail::read(j, "vocab_size", c.vocab_size);
    detail::read(j, "bottleneck_width", c.bottleneck_width);
    detail::read(j, "ffn_width", c.ffn_width);
    detail::read(j, "seed", c.seed);
}

inline void to_json(json& j, const TaskSpec& t) {
    j = json{{"name", t.name}, {"kind", t.kind == HeadKind::classification ? "classification" : "regression"}};
    if (t.kind == HeadKind::classification) {
        j["classes"] = t.classes;
    } else {
        j["range"] = {t.range_lo, t.range_hi};
    }
    if (t.synthetic) {
        const auto& s = *t.synthetic;
        j["synthetic"] = json{{"generator", to_string(s.generator)}, {"size", s.size},
                              {"dev_size", s.dev_size},           {"vocab", s.vocab},
                              {"motif_length", s.motif_length},   {"label_noise", s.label_noise},
                              {"dev_noise", s.dev_noise},         {"min_length", s.min_length},
                              {"seed", s.seed}};
    }
    if (t.tsv) j["tsv"] = json{{"train", t.tsv->train}, {"dev", t.tsv->dev}};
}

inline void from_json(const json& j, TaskSpec& t) {
    j.at("name").get_to(t.name);
    const std::string kind = j.value("kind", std::string("classification"));
    if (kind == "classification") {
        t.kind = HeadKind::classification;
    } else if (kind == "regression") {
        t.kind = HeadKind::regression;
    } else {
        throw std::invalid_argument("task '" + t.name + "': unknown kind '" + kind + "'");
    }
    detail::read(j, "classes", t.classes);
    if (j.contains("range")) {
        t.range_lo = j.at("range").at(0).get<double>();
        t.range_hi = j.at("range").at(1).get<double>();
    }
    if (j.contains("synthetic")) {
        const auto& s = j.at("synthetic");
        SyntheticSource src;
        if (s.contains("generator")) src.generator = parse_generator(s.at("generator").get<std::string>());
        detail::read(s, "size", src.size);
        detail::read(s, "dev_size", src.dev_size);
        detail::read(s, "vocab", src.vocab);
        detail::read(s, "motif_length", src.motif_length);
        detail::read(s, "label_noise", src.label_noise);
        detail::read(s, "dev_noise", src.dev_noise);
        detail::read(s, "min_length", src.min_length);
        detail::read(s, "seed", src.seed);
        t.synthetic = src;
    }
    if (j.contains("tsv")) t.tsv = TsvSource{j.at("tsv").at("train").get<std::string>(), j.at("tsv").value("dev", "")};
}

inline void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"model", c.model},
             {"tasks", c.tasks},
             {"sampler", to_string(c.sampler)},
             {"optimizer",
              {{"lr", c.optimizer.lr},
               {"warmup_fraction", c.optimizer.warmup_fraction},
               {"linear_decay", c.optimizer.linear_decay},
               {"beta1", c.optimizer.beta1},
               {"beta2", c.optimizer.beta2},
               {"eps", c.optimizer.eps}}},
             {"steps", c.steps},
             {"batch_size", c.batch_size},
             {"seed", c.seed},
             {"eval_every", c.eval_every},
             {"checkpoint_every", c.checkpoint_every},
             {"out_dir", c.out_dir},
             {"regression_scoring", c.regression_scoring == RegressionScoring::bins ? "bins" : "exclude"},
             {"policy_trace", c.policy_trace}};
}

inline void from_json(const json& j, ExperimentConfig& c) {
    detail::read(j, "model", c.model);
    detail::read(j, "tasks", c.tasks);
    if (j.contains("sampler")) c.sampler = parse_policy(j.at("sampler").get<std::string>());
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        detail::read(o, "lr", c.optimizer.lr);
        detail::read(o, "warmup_fraction", c.optimizer.warmup_fraction);
        detail::read(o, "linear_decay", c.optimizer.linear_decay);
        detail::read(o, "beta1", c.optimizer.beta1);
        detail::read(o, "beta2", c.optimizer.beta2);
        detail::read(o, "eps", c.optimizer.eps);
    }
    detail::read(j, "steps", c.steps);
    detail::read(j, "batch_size", c.batch_size);
    detail::read(j, "seed", c.seed);
    detail::read(j, "eval_every", c.eval_every);
    detail::read(j, "checkpoint_every", c.checkpoint_every);
    detail::read(j, "out_dir", c.out_dir);
    if (j.contains("regression_scoring")) {
        const auto mode = j.at("regression_scoring").get<std::string>();
        if (mode == "bins") {
            c.regression_scoring = RegressionScoring::bins;
        } else if (mode == "exclude") {
            c.regression_scoring = RegressionScoring::exclude;
        } else {
            throw std::invalid_argument("unknown regression_scoring '" + mode + "'");
        }
    }
    detail::read(j, "policy_trace", c.policy_trace);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("config " + path + ": " + e.what());
    }
    auto c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

}  // namespace camtl
