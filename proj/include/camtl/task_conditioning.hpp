#pragma once

// Task embeddings and the FiLM machinery that turns them into per-task
// modulations of shared weights: phi(W | z) = gamma(z) * W + beta(z).

#include <map>
#include <variant>

#include "camtl/ops.hpp"

namespace camtl {

class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Learnable task vectors, one leaf tensor per task so that an update driven
// by one task never touches another task's row.
class TaskEmbeddingTable {
public:
    explicit TaskEmbeddingTable(std::size_t dim) : dim_(dim) {
        if (dim == 0) throw DimensionError("task embedding dimension must be positive");
    }

    struct CopyOf {
        std::string task;
    };
    struct RandomInit {
        std::uint64_t seed = 0;
        double scale = 0.02;
    };
    struct ZerosInit {};
    using Init = std::variant<CopyOf, RandomInit, ZerosInit>;

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& task_names() const { return names_; }

    bool contains(const std::string& task) const { return index_.count(task) != 0; }

    std::size_t index_of(const std::string& task) const {
        auto it = index_.find(task);
        if (it == index_.end()) {
            std::string known;
            for (const auto& n : names_) known += (known.empty() ? "" : ", ") + n;
            throw LookupError("unknown task '" + task + "' (known tasks: " + known + ")");
        }
        return it->second;
    }

    // Registers a task with an explicit initial vector.
    void register_task(const std::string& task, std::vector<double> values) {
        if (contains(task)) throw std::invalid_argument("task '" + task + "' is already registered");
        if (values.size() != dim_) {
            throw DimensionError("task embedding for '" + task + "' has " + std::to_string(values.size()) +
                                 " entries, expected " + std::to_string(dim_));
        }
        index_[task] = names_.size();
        names_.push_back(task);
        rows_.push_back(Tensor::vector(std::move(values), true));
    }

    void register_task(const std::string& task, const Init& init) {
        std::vector<double> values(dim_, 0.0);
        if (const auto* copy = std::get_if<CopyOf>(&init)) {
            auto src = embedding(copy->task).data();
            values.assign(src.begin(), src.end());
        } else if (const auto* rnd = std::get_if<RandomInit>(&init)) {
            std::mt19937_64 rng(rnd->seed);
            std::uniform_real_distribution<double> dist(-rnd->scale, rnd->scale);
            for (auto& v : values) v = dist(rng);
        }
        register_task(task, std::move(values));
    }

    // The learnable row itself; graphs built on it send gradients to it.
    const Tensor& embedding(const std::string& task) const { return rows_[index_of(task)]; }
    Tensor& embedding(const std::string& task) { return rows_[index_of(task)]; }

private:
    std::size_t dim_;
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
    std::vector<Tensor> rows_;
};

inline Tensor embed_task(const TaskEmbeddingTable& table, const std::string& task) {
    return table.embedding(task);
}

// Returns a copy of the table with one more task; existing rows keep their
// values bitwise (the row tensors are shared, not re-created).
inline TaskEmbeddingTable extend_table(const TaskEmbeddingTable& table, const std::string& new_task,
                                       const TaskEmbeddingTable::Init& init) {
    TaskEmbeddingTable out = table;
    out.register_task(new_task, init);
    return out;
}

// Two affine maps R^d -> R^p producing the FiLM scale and shift.
struct FiLMGenerator {
    Tensor gamma_weight;  // [d, p]
    Tensor gamma_bias;    // [p]
    Tensor beta_weight;   // [d, p]
    Tensor beta_bias;     // [p]

    std::size_t input_dim() const { return gamma_weight.dim(0); }
    std::size_t output_dim() const { return gamma_weight.dim(1); }

    // Zero weights, so every z maps to (gamma_init, beta_init).
    static FiLMGenerator constant(std::size_t input_dim, std::vector<double> gamma_init,
                                  std::vector<double> beta_init) {
        if (gamma_init.size() != beta_init.size()) {
            throw DimensionError("FiLM gamma/beta initial vectors differ in length");
        }
        const std::size_t p = gamma_init.size();
        FiLMGenerator g;
        g.gamma_weight = Tensor::zeros({input_dim, p}, true);
        g.gamma_bias = Tensor::vector(std::move(gamma_init), true);
        g.beta_weight = Tensor::zeros({input_dim, p}, true);
        g.beta_bias = Tensor::vector(std::move(beta_init), true);
        return g;
    }

    // gamma = 1, beta = 0 for every input.
    static FiLMGenerator identity(std::size_t input_dim, std::size_t output_dim) {
        return constant(input_dim, std::vector<double>(output_dim, 1.0),
                        std::vector<double>(output_dim, 0.0));
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
        return {{prefix + ".gamma.weight", gamma_weight},
                {prefix + ".gamma.bias", gamma_bias},
                {prefix + ".beta.weight", beta_weight},
                {prefix + ".beta.bias", beta_bias}};
    }
};

struct FiLMOutput {
    Tensor gamma;
    Tensor beta;
};

inline FiLMOutput film_generate(const FiLMGenerator& g, const Tensor& z) {
    if (z.rank() != 1 || z.dim(0) != g.input_dim()) {
        throw DimensionError("film_generate: task embedding " + shape_str(z.shape()) +
                             " does not match generator input dimension " + std::to_string(g.input_dim()));
    }
    const std::size_t d = g.input_dim(), p = g.output_dim();
    Tensor row = reshape(z, {1, d});
    Tensor gamma = add(reshape(matmul(row, g.gamma_weight), {p}), g.gamma_bias);
    Tensor beta = add(reshape(matmul(row, g.beta_weight), {p}), g.beta_bias);
    return {gamma, beta};
}

// How a p-vector of FiLM factors lines up with the weight it modulates.
enum class ModulationArity {
    per_element,  // p == numel(W)
    per_row,      // p == rows(W); factor r scales and shifts row r
    scalar,       // p == 1, broadcast to all entries
};

inline std::size_t arity_dim(ModulationArity arity, const Shape& base) {
    switch (arity) {
        case ModulationArity::per_element: return shape_numel(base);
        case ModulationArity::per_row: return base.empty() ? 1 : base.front();
        case ModulationArity::scalar: return 1;
    }
    return 0;
}

// gamma (*) W + beta with the factors laid out per `arity`.
inline Tensor apply_film(const Tensor& base, const FiLMOutput& film, ModulationArity arity) {
    const std::size_t p = arity_dim(arity, base.shape());
    if (film.gamma.numel() != p || film.beta.numel() != p) {
        throw DimensionError("apply_film: FiLM output of size " + std::to_string(film.gamma.numel()) +
                             " does not fit weight " + shape_str(base.shape()));
    }
    switch (arity) {
        case ModulationArity::per_element:
            return add(mul(reshape(film.gamma, base.shape()), base), reshape(film.beta, base.shape()));
        case ModulationArity::per_row: {
            if (base.rank() != 2) throw DimensionError("apply_film: per_row needs a matrix");
            const std::size_t cols = base.dim(1);
            return add(mul(broadcast_cols(film.gamma, cols), base), broadcast_cols(film.beta, cols));
        }
        case ModulationArity::scalar: {
            const std::size_t n = base.numel();
            Tensor g = reshape(broadcast_rows(reshape(film.gamma, {1}), n), base.shape());
            Tensor b = reshape(broadcast_rows(reshape(film.beta, {1}), n), base.shape());
            return add(mul(g, base), b);
        }
    }
    throw std::logic_error("unreachable");
}

// A shared weight plus the generator that specializes it per task.
class ModulatedWeight {
public:
    ModulatedWeight() = default;
    ModulatedWeight(Tensor base, FiLMGenerator generator, ModulationArity arity, bool trainable_base)
        : base_(std::move(base)), generator_(std::move(generator)), arity_(arity) {
        if (generator_.output_dim() != arity_dim(arity_, base_.shape())) {
            throw DimensionError("modulated weight " + shape_str(base_.shape()) + " needs a generator of width " +
                                 std::to_string(arity_dim(arity_, base_.shape())) + ", got " +
                                 std::to_string(generator_.output_dim()));
        }
        base_.set_requires_grad(trainable_base);
    }

    const Tensor& base() const { return base_; }
    Tensor& base() { return base_; }
    const FiLMGenerator& generator() const { return generator_; }
    FiLMGenerator& generator() { return generator_; }
    ModulationArity arity() const { return arity_; }
    bool trainable_base() const { return base_.requires_grad(); }

private:
    Tensor base_;
    FiLMGenerator generator_;
    ModulationArity arity_ = ModulationArity::per_element;
};

inline Tensor modulate(const ModulatedWeight& w, const Tensor& z) {
    return apply_film(w.base(), film_generate(w.generator(), z), w.arity());
}

}  // namespace camtl
