#pragma once

// Training loop, evaluation and metrics output.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "camtl/analysis.hpp"
#include "camtl/checkpoint.hpp"
#include "camtl/config.hpp"
#include "camtl/data.hpp"
#include "camtl/optimizer.hpp"
#include "camtl/sampler.hpp"

namespace camtl {

inline std::uint64_t mix_seed(std::uint64_t seed, const std::string& a, const std::string& b = "") {
    std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9e3779b97f4a7c15ULL);
    for (unsigned char c : a) h = (h ^ c) * 1099511628211ULL;
    h = (h ^ 0xff) * 1099511628211ULL;
    for (unsigned char c : b) h = (h ^ c) * 1099511628211ULL;
    return h;
}

struct TaskData {
    TaskSpec spec;
    std::shared_ptr<const Dataset> train;
    std::shared_ptr<const Dataset> dev;
};

inline SyntheticSpec synthetic_spec(const ExperimentConfig& config, const TaskSpec& t, bool dev) {
    const auto& src = *t.synthetic;
    SyntheticSpec s;
    s.generator = src.generator;
    s.size = dev ? src.dev_size : src.size;
    s.seq_len = config.model.seq_len;
    s.vocab = src.vocab;
    s.motif_length = src.motif_length;
    s.classes = t.kind == HeadKind::classification ? t.classes : 2;
    s.label_noise = dev ? src.dev_noise : src.label_noise;
    s.min_length = src.min_length;
    s.seed = src.seed;
    s.sample_seed = mix_seed(config.seed, t.name, dev ? "dev" : "train");
    return s;
}

inline std::vector<TaskData> load_task_data(const ExperimentConfig& config) {
    std::vector<TaskData> out;
    Vocabulary vocab(config.model.vocab_size, config.seed);
    for (const auto& t : config.tasks) {
        TaskData d{t, nullptr, nullptr};
        if (t.synthetic) {
            if (t.kind == HeadKind::classification && t.synthetic->generator == Generator::regression) {
                throw std::invalid_argument("task '" + t.name + "': regression generator on a classification task");
            }
            d.train = std::make_shared<Dataset>(generate_synthetic(synthetic_spec(config, t, false), t.name));
            d.dev = std::make_shared<Dataset>(generate_synthetic(synthetic_spec(config, t, true), t.name));
        } else {
            const std::size_t classes = t.kind == HeadKind::classification ? t.classes : 0;
            d.train = std::make_shared<Dataset>(ingest_tsv(t.tsv->train, vocab, config.model.seq_len, classes));
            d.dev = t.tsv->dev.empty()
                        ? d.train
                        : std::make_shared<Dataset>(ingest_tsv(t.tsv->dev, vocab, config.model.seq_len, classes));
        }
        out.push_back(std::move(d));
    }
    return out;
}

// Class probabilities used for scoring: softmax for classification, the
// two-bin histogram for regression.
inline std::vector<double> predictive_distribution(const CamtlModel& model, const TaskSpec& spec,
                                                   const std::vector<int>& tokens) {
    NoGradGuard guard;
    Tensor out = model.forward(tokens, spec.name);
    if (spec.kind == HeadKind::regression) return regression_pseudo_distribution(out.at(0), spec.range_lo, spec.range_hi);
    Tensor p = softmax_lastdim(out);
    std::vector<double> probs(p.data().begin(), p.data().end());
    // Renormalise against rounding so the entropy validator sees a clean simplex.
    double total = 0.0;
    for (double v : probs) total += v;
    for (double& v : probs) v /= total;
    return probs;
}

inline Tensor example_loss(const CamtlModel& model, const TaskSpec& spec, const Example& ex) {
    Tensor out = model.forward(ex.tokens, spec.name);
    if (spec.kind == HeadKind::regression) return squared_error(out, ex.label);
    return cross_entropy(out, static_cast<std::size_t>(ex.class_index()));
}

struct BatchLoss {
    Tensor total;
    std::vector<double> per_task;  // mean loss of each task's sub-batch, 0 when absent
    std::vector<std::size_t> counts;
};

// Sum over tasks of each sub-batch's mean per-example loss.
inline BatchLoss batch_loss(const CamtlModel& model, const std::vector<TaskData>& tasks,
                            const std::vector<BatchItem>& batch) {
    BatchLoss out;
    out.per_task.assign(tasks.size(), 0.0);
    out.counts.assign(tasks.size(), 0);
    for (const auto& item : batch) ++out.counts.at(item.task);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (out.counts[t] == 0) continue;
        Tensor acc;
        for (const auto& item : batch) {
            if (item.task != t) continue;
            Tensor l = example_loss(model, tasks[t].spec, (*tasks[t].train)[item.example]);
            acc = acc.defined() ? add(acc, l) : l;
        }
        Tensor mean = scale(acc, 1.0 / static_cast<double>(out.counts[t]));
        out.per_task[t] = mean.item();
        out.total = out.total.defined() ? add(out.total, mean) : mean;
    }
    return out;
}

struct TaskMetrics {
    std::string task;
    HeadKind kind = HeadKind::classification;
    double accuracy = std::nan("");  // percent
    double mse = std::nan("");
    double pearson = std::nan("");
    double score = 0.0;  // accuracy, or 100 r for regression
    std::size_t examples = 0;
};

inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

inline TaskMetrics evaluate_task(const CamtlModel& model, const TaskSpec& spec, const Dataset& dev) {
    NoGradGuard guard;
    TaskMetrics m;
    m.task = spec.name;
    m.kind = spec.kind;
    m.examples = dev.size();
    if (spec.kind == HeadKind::classification) {
        std::size_t correct = 0;
        for (const auto& ex : dev.examples) {
            Tensor logits = model.forward(ex.tokens, spec.name);
            const auto d = logits.data();
            const auto best = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
            correct += best == ex.class_index();
        }
        m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(dev.size());
        m.score = m.accuracy;
    } else {
        std::vector<double> pred, gold;
        double se = 0.0;
        for (const auto& ex : dev.examples) {
            const double y = model.forward(ex.tokens, spec.name).at(0);
            pred.push_back(y);
            gold.push_back(ex.label);
            se += (y - ex.label) * (y - ex.label);
        }
        m.mse = se / static_cast<double>(dev.size());
        m.pearson = pearson_r(pred, gold);
        m.score = 100.0 * m.pearson;
    }
    return m;
}

inline std::vector<TaskMetrics> evaluate_all(const CamtlModel& model, const std::vector<TaskData>& tasks) {
    std::vector<TaskMetrics> out;
    for (const auto& t : tasks) out.push_back(evaluate_task(model, t.spec, *t.dev));
    return out;
}

inline json metrics_json(const TaskMetrics& m) {
    json j{{"score", m.score}, {"examples", m.examples}};
    if (m.kind == HeadKind::classification) {
        j["accuracy"] = m.accuracy;
    } else {
        j["mse"] = m.mse;
        j["pearson"] = m.pearson;
    }
    return j;
}

inline std::size_t worker_count(std::size_t tasks) {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CAMTL_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap > 0) n = std::min(n, static_cast<std::size_t>(cap));
    }
    return std::min(n, std::max<std::size_t>(tasks, 1));
}

struct TrainOptions {
    bool write_files = true;
    bool verbose = false;
};

struct TrainResult {
    std::vector<json> metrics;  // the metrics stream, one object per line
    std::vector<std::vector<TaskMetrics>> evals;
    std::vector<std::size_t> eval_steps;
    std::size_t selected = 0;  // samples used for weight updates
    std::size_t scored = 0;    // candidates scored by the sampler
    std::size_t drawn = 0;     // all samples taken from the task cursors
    std::size_t fallbacks = 0;
    std::vector<unsigned char> checkpoint;  // final checkpoint bytes
    std::vector<TaskMetrics> final_metrics;
};

class Trainer {
public:
    explicit Trainer(ExperimentConfig config)
        : config_(prepare(std::move(config))), model_(build_model(config_)), optimizer_(config_.optimizer) {
        tasks_ = load_task_data(config_);
        for (std::size_t t = 0; t < tasks_.size(); ++t) {
            const auto& spec = tasks_[t].spec;
            const bool reg = spec.kind == HeadKind::regression;
            cursors_.emplace_back(spec.name, tasks_[t].train, reg ? 2 : spec.classes, reg,
                                  mix_seed(config_.seed, spec.name, "cursor"));
            exclude_.push_back(reg && config_.regression_scoring == RegressionScoring::exclude);
        }
        rng_.seed(mix_seed(config_.seed, "sampler"));
    }

    const ExperimentConfig& config() const { return config_; }
    CamtlModel& model() { return model_; }
    const CamtlModel& model() const { return model_; }
    const std::vector<TaskData>& tasks() const { return tasks_; }

    TrainResult run(const TrainOptions& opts = {}) {
        namespace fs = std::filesystem;
        TrainResult result;
        std::ofstream metrics_out, timing_out;
        const fs::path dir = config_.out_dir;
        if (opts.write_files) {
            fs::create_directories(dir);
            metrics_out.open(dir / "metrics.jsonl", std::ios::trunc);
            timing_out.open(dir / "timing.jsonl", std::ios::trunc);
            std::ofstream(dir / "config.json", std::ios::trunc) << json(config_).dump(2) << "\n";
        }
        auto emit = [&](json record) {
            if (opts.write_files) metrics_out << record.dump() << "\n" << std::flush;
            result.metrics.push_back(std::move(record));
        };
        const auto start = std::chrono::steady_clock::now();
        auto timing = [&](std::size_t step, const char* what) {
            if (!opts.write_files) return;
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            timing_out << json{{"step", step}, {"event", what}, {"elapsed_s", s}}.dump() << "\n" << std::flush;
        };

        const std::size_t T = tasks_.size();
        const std::size_t threads = worker_count(T);
        ScoreFn predict = [this](std::size_t t, std::span<const std::size_t> examples) {
            std::vector<std::vector<double>> out;
            out.reserve(examples.size());
            for (std::size_t e : examples) {
                out.push_back(predictive_distribution(model_, tasks_[t].spec, (*tasks_[t].train)[e].tokens));
            }
            return out;
        };

        std::vector<std::size_t> window_counts(T, 0);
        double window_loss = 0.0;
        std::size_t window_steps = 0;
        std::vector<double> last_entropy(T, std::nan(""));
        double last_max_entropy = 0.0;

        auto record_eval = [&](std::size_t step) {
            auto evals = evaluate_all(model_, tasks_);
            json dev = json::object();
            std::vector<double> scores;
            for (const auto& m : evals) {
                dev[m.task] = metrics_json(m);
                scores.push_back(m.score);
            }
            double mean = 0.0;
            for (double s : scores) mean += s / static_cast<double>(scores.size());
            json counts = json::object();
            for (std::size_t t = 0; t < T; ++t) counts[tasks_[t].spec.name] = window_counts[t];
            json entropy = json::object();
            for (std::size_t t = 0; t < T; ++t) entropy[tasks_[t].spec.name] = last_entropy[t];
            emit(json{{"type", "eval"},
                      {"step", step},
                      {"train_loss", window_steps ? window_loss / static_cast<double>(window_steps) : 0.0},
                      {"dev", dev},
                      {"mean_score", mean},
                      {"task_sigma", scores.size() >= 2 ? task_sigma(scores) : 0.0},
                      {"sampler",
                       {{"policy", to_string(config_.sampler)},
                        {"task_counts", counts},
                        {"mean_entropy", entropy},
                        {"max_mean_entropy", last_max_entropy},
                        {"fallbacks", result.fallbacks}}},
                      {"data", data_json(result)}});
            timing(step, "eval");
            result.evals.push_back(std::move(evals));
            result.eval_steps.push_back(step);
            std::fill(window_counts.begin(), window_counts.end(), 0);
            window_loss = 0.0;
            window_steps = 0;
        };

        record_eval(0);
        for (std::size_t step = 0; step < config_.steps; ++step) {
            const std::size_t before = drawn_total();
            SamplerStep s = next_batch(config_.sampler, cursors_, config_.batch_size, rng_, predict, threads, exclude_);
            result.drawn += drawn_total() - before;
            result.scored += s.trace.scored;
            result.selected += s.batch.size();
            result.fallbacks += s.trace.fallback;
            for (std::size_t t = 0; t < T; ++t) window_counts[t] += s.trace.task_counts[t];
            if (!s.trace.mean_entropy.empty()) {
                last_entropy = s.trace.mean_entropy;
                last_max_entropy = s.trace.max_mean_entropy;
            }
            if (config_.policy_trace) {
                emit(json{{"type", "trace"},
                          {"step", step + 1},
                          {"task_counts", s.trace.task_counts},
                          {"mean_entropy", s.trace.mean_entropy},
                          {"max_mean_entropy", s.trace.max_mean_entropy},
                          {"fallback", s.trace.fallback}});
            }

            BatchLoss loss = batch_loss(model_, tasks_, s.batch);
            const double value = loss.total.item();
            if (!std::isfinite(value)) {
                dump_batch(step, s.batch, loss, opts.write_files);
                throw NumericError("non-finite loss at step " + std::to_string(step + 1) + "; batch dumped to " +
                                   (dir / ("nonfinite_step_" + std::to_string(step + 1) + ".json")).string());
            }
            backward(loss.total);
            const auto params = model_.parameters();
            optimizer_.step(params, scheduled_lr(config_.optimizer, step, config_.steps));
            for (const auto& p : params) Tensor(p.tensor).zero_grad();
            window_loss += value;
            ++window_steps;

            const std::size_t done = step + 1;
            if (config_.eval_every > 0 && done % config_.eval_every == 0 && done != config_.steps) record_eval(done);
            if (opts.write_files && config_.checkpoint_every > 0 && done % config_.checkpoint_every == 0) {
                save_checkpoint((dir / ("checkpoint_step_" + std::to_string(done) + ".camt")).string(), config_, model_);
            }
        }
        if (config_.steps > 0) record_eval(config_.steps);
        result.final_metrics = result.evals.back();
        emit(json{{"type", "final"}, {"step", config_.steps}, {"data", data_json(result)}});
        result.checkpoint = serialize_checkpoint(config_, model_);
        if (opts.write_files) {
            std::ofstream ck(dir / "checkpoint_final.camt", std::ios::binary | std::ios::trunc);
            ck.write(reinterpret_cast<const char*>(result.checkpoint.data()),
                     static_cast<std::streamsize>(result.checkpoint.size()));
            write_summary(dir / "summary.csv", result);
            timing(config_.steps, "done");
        }
        return result;
    }

private:
    static ExperimentConfig prepare(ExperimentConfig c) {
        c.model.seed = c.seed;
        c.validate();
        return c;
    }

    std::size_t drawn_total() const {
        std::size_t n = 0;
        for (const auto& c : cursors_) n += c.drawn();
        return n;
    }

    static json data_json(const TrainResult& r) {
        return json{{"selected", r.selected},
                    {"scored", r.scored},
                    {"drawn", r.drawn},
                    {"update_fraction", r.drawn ? static_cast<double>(r.selected) / static_cast<double>(r.drawn) : 1.0}};
    }

    void dump_batch(std::size_t step, const std::vector<BatchItem>& batch, const BatchLoss& loss, bool write) const {
        if (!write) return;
        json items = json::array();
        for (const auto& item : batch) {
            const auto& ex = (*tasks_[item.task].train)[item.example];
            items.push_back({{"task", tasks_[item.task].spec.name},
                             {"example", item.example},
                             {"tokens", ex.tokens},
                             {"label", ex.label}});
        }
        json per_task = json::object();
        for (std::size_t t = 0; t < tasks_.size(); ++t) per_task[tasks_[t].spec.name] = loss.per_task[t];
        std::filesystem::create_directories(config_.out_dir);
        std::ofstream(std::filesystem::path(config_.out_dir) / ("nonfinite_step_" + std::to_string(step + 1) + ".json"))
            << json{{"step", step + 1}, {"per_task_loss", per_task}, {"batch", items}}.dump(2) << "\n";
    }

    void write_summary(const std::filesystem::path& path, const TrainResult& r) const {
        std::ofstream out(path, std::ios::trunc);
        out << "task,kind,final_score,peak_score,peak_step,final_accuracy,final_mse,final_pearson\n";
        for (std::size_t t = 0; t < tasks_.size(); ++t) {
            double peak = -1e300;
            std::size_t peak_step = 0;
            for (std::size_t e = 0; e < r.evals.size(); ++e) {
                if (r.evals[e][t].score > peak) {
                    peak = r.evals[e][t].score;
                    peak_step = r.eval_steps[e];
                }
            }
            const auto& f = r.final_metrics[t];
            auto num = [](double v) { return std::isnan(v) ? std::string() : json(v).dump(); };
            out << f.task << "," << (f.kind == HeadKind::classification ? "classification" : "regression") << ","
                << json(f.score).dump() << "," << json(peak).dump() << "," << peak_step << "," << num(f.accuracy) << ","
                << num(f.mse) << "," << num(f.pearson) << "\n";
        }
    }

    ExperimentConfig config_;
    CamtlModel model_;
    Adam optimizer_;
    std::vector<TaskData> tasks_;
    std::vector<TaskCursor> cursors_;
    std::vector<bool> exclude_;
    std::mt19937_64 rng_;
};

inline TrainResult train(const ExperimentConfig& config, const TrainOptions& opts = {}) {
    Trainer trainer(config);
    return trainer.run(opts);
}

// Dev-set metrics for the named tasks of a saved checkpoint, all tasks when
// the list is empty.
inline std::vector<TaskMetrics> evaluate_checkpoint(const std::string& path, const std::vector<std::string>& names = {}) {
    auto loaded = load_checkpoint(path);
    const auto tasks = load_task_data(loaded.config);
    std::vector<TaskMetrics> out;
    if (names.empty()) return evaluate_all(loaded.model, tasks);
    for (const auto& name : names) {
        auto it = std::find_if(tasks.begin(), tasks.end(), [&](const TaskData& t) { return t.spec.name == name; });
        if (it == tasks.end()) {
            throw LookupError("task '" + name + "' is not in the checkpoint; register it with extend_table and "
                              "fine-tune before evaluating");
        }
        out.push_back(evaluate_task(loaded.model, it->spec, *it->dev));
    }
    return out;
}

}  // namespace camtl
