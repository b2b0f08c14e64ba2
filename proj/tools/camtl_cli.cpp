// camtl: train, evaluate and inspect conditionally adaptive multi-task models.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "camtl/analysis.hpp"
#include "camtl/checkpoint.hpp"
#include "camtl/trainer.hpp"

using namespace camtl;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string out_dir;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> sampler;
    bool policy_trace = false;
    std::optional<std::size_t> steps;
};

ExperimentConfig resolve_config(const Common& c) {
    if (c.config.empty()) throw std::invalid_argument("--config is required");
    ExperimentConfig cfg = load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.sampler) cfg.sampler = parse_policy(*c.sampler);
    if (c.policy_trace) cfg.policy_trace = true;
    if (c.steps) cfg.steps = *c.steps;
    if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
    return cfg;
}

std::string checkpoint_path(const Common& c) {
    if (!c.checkpoint.empty()) return c.checkpoint;
    if (!c.out_dir.empty()) return (fs::path(c.out_dir) / "checkpoint_final.camt").string();
    if (!c.config.empty()) return (fs::path(resolve_config(c).out_dir) / "checkpoint_final.camt").string();
    throw std::invalid_argument("give --checkpoint, --out-dir or --config");
}

void append_metrics(const std::string& out_dir, const json& record) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "metrics.jsonl", std::ios::app) << record.dump() << "\n";
}

int run_train(const Common& c) {
    auto cfg = resolve_config(c);
    std::cerr << "training " << cfg.tasks.size() << " tasks for " << cfg.steps << " steps, sampler "
              << to_string(cfg.sampler) << ", out " << cfg.out_dir << "\n";
    auto result = train(cfg);
    for (const auto& m : result.final_metrics) std::cout << m.task << "\t" << metrics_json(m).dump() << "\n";
    std::cout << "data\t" << result.metrics.back()["data"].dump() << "\n";
    return 0;
}

int run_eval(const Common& c, const std::vector<std::string>& tasks) {
    const auto metrics = evaluate_checkpoint(checkpoint_path(c), tasks);
    json out = json::object();
    for (const auto& m : metrics) out[m.task] = metrics_json(m);
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_covsim(const Common& c, std::size_t examples, const std::string& rule, const std::string& norm,
               const std::string& csv) {
    auto loaded = load_checkpoint(checkpoint_path(c));
    const auto tasks = load_task_data(loaded.config);
    if (tasks.size() < 2) throw std::invalid_argument("covsim needs at least 2 tasks");
    std::vector<std::string> names;
    std::vector<Matrix> samples;
    for (const auto& t : tasks) {
        names.push_back(t.spec.name);
        samples.push_back(first_layer_inputs(loaded.model, t.spec.name, *t.dev, examples));
    }
    const RankRule r = rule == "count" ? RankRule::count : RankRule::mass;
    const CovSimNorm n = norm == "literal" ? CovSimNorm::literal : CovSimNorm::self_normalized;
    const auto rep = covsim_report(names, samples, r, n);

    std::ofstream file;
    std::ostream* out = &std::cout;
    if (!csv.empty()) {
        file.open(csv, std::ios::trunc);
        out = &file;
    }
    *out << "task";
    for (const auto& name : names) *out << "," << name;
    *out << ",average,rank\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
        *out << names[i];
        for (std::size_t j = 0; j < names.size(); ++j) *out << "," << json(rep.pairwise(i, j)).dump();
        *out << "," << json(rep.averaged[i]).dump() << "," << rep.ranks[i] << "\n";
    }
    json avg = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) avg[names[i]] = rep.averaged[i];
    append_metrics(c.out_dir, json{{"type", "covsim"}, {"rank_rule", rule}, {"norm", norm}, {"averaged", avg}, {"ranks", rep.ranks}});
    return 0;
}

int run_report(const Common& c) {
    auto loaded = load_checkpoint(checkpoint_path(c));
    const auto rep = parameter_report(loaded.model);
    json groups = json::object(), trainable = json::object();
    for (const auto& [g, n] : rep.by_group) groups[g] = n;
    for (const auto& [g, n] : rep.trainable_by_group) trainable[g] = n;
    const auto tasks = load_task_data(loaded.config);
    const auto metrics = evaluate_all(loaded.model, tasks);
    std::vector<double> scores;
    json dev = json::object();
    for (const auto& m : metrics) {
        scores.push_back(m.score);
        dev[m.task] = metrics_json(m);
    }
    json out{{"parameters",
              {{"total", rep.total},
               {"trainable", rep.trainable},
               {"frozen", rep.frozen},
               {"by_group", groups},
               {"trainable_by_group", trainable},
               {"attention_generator_dim", {{"full_block", rep.full_generator_dim}, {"block_diagonal", rep.block_generator_dim}}},
               {"generator_ratio", rep.generator_ratio},
               {"block_entries", {{"full_block", rep.full_block_entries}, {"block_diagonal", rep.block_entries}}},
               {"block_entry_ratio", rep.block_entry_ratio}}},
             {"dev", dev}};
    if (scores.size() >= 2) out["task_sigma"] = task_sigma(scores);
    std::cout << out.dump(2) << "\n";
    append_metrics(c.out_dir, json{{"type", "report"}, {"task_sigma", out.value("task_sigma", 0.0)}, {"dev", dev}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditionally adaptive multi-task training harness"};
    app.require_subcommand(1);
    Common c;
    auto add_common = [&c](CLI::App* sub) {
        sub->add_option("--config", c.config, "experiment config (JSON)");
        sub->add_option("--out-dir", c.out_dir, "output directory");
        sub->add_option("--seed", c.seed, "override the config seed");
    };

    auto* train_cmd = app.add_subcommand("train", "train from a config");
    add_common(train_cmd);
    train_cmd->add_option("--sampler", c.sampler, "mt_uncertainty, random or task_size")
        ->check(CLI::IsMember({"mt_uncertainty", "random", "task_size"}));
    train_cmd->add_flag("--policy-trace", c.policy_trace, "write a sampler record for every step");
    train_cmd->add_option("--steps", c.steps, "override the number of steps");

    std::vector<std::string> eval_tasks;
    auto* eval_cmd = app.add_subcommand("eval", "dev-set metrics of a checkpoint");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", c.checkpoint, "checkpoint file");
    eval_cmd->add_option("--task", eval_tasks, "restrict to these tasks");

    std::size_t examples = 256;
    std::string rule = "mass", norm = "self", csv;
    auto* cov_cmd = app.add_subcommand("covsim", "covariance similarity of first-layer inputs");
    add_common(cov_cmd);
    cov_cmd->add_option("--checkpoint", c.checkpoint, "checkpoint file");
    cov_cmd->add_option("--examples", examples, "dev examples per task");
    cov_cmd->add_option("--rank-rule", rule, "mass or count")->check(CLI::IsMember({"mass", "count"}));
    cov_cmd->add_option("--norm", norm, "self or literal")->check(CLI::IsMember({"self", "literal"}));
    cov_cmd->add_option("--csv", csv, "write the pairwise matrix here");

    auto* report_cmd = app.add_subcommand("report", "parameter accounting and task dispersion");
    add_common(report_cmd);
    report_cmd->add_option("--checkpoint", c.checkpoint, "checkpoint file");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train_cmd) return run_train(c);
        if (*eval_cmd) return run_eval(c, eval_tasks);
        if (*cov_cmd) return run_covsim(c, examples, rule, norm, csv);
        if (*report_cmd) return run_report(c);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
