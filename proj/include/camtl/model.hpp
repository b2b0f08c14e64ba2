#pragma once

// The conditionally adaptive encoder: frozen embeddings, conditional
// alignment, post-LN transformer layers with conditional attention and
// conditional layer norm in the trainable layers, a conditional bottleneck,
// and one decoder head per task.

#include <map>

#include "camtl/conditional_modules.hpp"

namespace camtl {

struct ModelConfig {
    std::size_t seq_len = 16;   // L
    std::size_t d_model = 32;   // d
    std::size_t n_layers = 4;
    std::size_t n_heads = 2;
    std::optional<std::size_t> n_blocks;  // N; defaults to d / L
    std::optional<std::vector<std::size_t>> frozen_layers;  // defaults to the bottom half
    BottleneckVariant bottleneck = BottleneckVariant::base_top;
    AttentionVariant attention = AttentionVariant::block_diagonal;
    bool conditional_alignment = true;
    bool conditional_layer_norm = true;
    std::size_t vocab_size = 64;
    std::optional<std::size_t> bottleneck_width;  // defaults to d / 4
    std::optional<std::size_t> ffn_width;         // defaults to 2 d
    std::uint64_t seed = 12;

    std::size_t head_dim() const { return d_model / n_heads; }

    std::size_t blocks() const {
        if (n_blocks) return *n_blocks;
        if (d_model >= seq_len && d_model % seq_len == 0) return d_model / seq_len;
        throw std::invalid_argument("n_blocks must be given explicitly when d (" + std::to_string(d_model) +
                                    ") is not a multiple of L (" + std::to_string(seq_len) + ")");
    }

    std::vector<std::size_t> frozen() const {
        if (frozen_layers) return *frozen_layers;
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < n_layers / 2; ++j) out.push_back(j);
        return out;
    }

    bool layer_frozen(std::size_t j) const {
        const auto f = frozen();
        return std::find(f.begin(), f.end(), j) != f.end();
    }

    std::size_t bottleneck_dim() const { return bottleneck_width.value_or(std::max<std::size_t>(1, d_model / 4)); }
    std::size_t ffn_dim() const { return ffn_width.value_or(2 * d_model); }

    // Layers that receive a base_top bottleneck: the top 2 when there are at
    // most 4 layers, otherwise the top quarter.
    std::vector<std::size_t> top_layers() const {
        const std::size_t count = n_layers <= 4 ? std::min<std::size_t>(2, n_layers) : n_layers / 4;
        std::vector<std::size_t> out;
        for (std::size_t j = n_layers - count; j < n_layers; ++j) out.push_back(j);
        return out;
    }

    bool any_conditioning() const {
        return attention != AttentionVariant::none || bottleneck != BottleneckVariant::none ||
               conditional_alignment || conditional_layer_norm;
    }

    void validate() const {
        if (seq_len == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || vocab_size < 3) {
            throw std::invalid_argument("model config: sizes must be positive (vocab_size >= 3)");
        }
        if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model not divisible by n_heads");
        if (attention == AttentionVariant::block_diagonal) {
            const std::size_t n = blocks();
            if (n == 0 || seq_len % n != 0) {
                throw std::invalid_argument("model config: N=" + std::to_string(n) + " does not divide L=" +
                                            std::to_string(seq_len));
            }
        }
        for (std::size_t j : frozen()) {
            if (j >= n_layers) throw std::invalid_argument("model config: frozen layer index out of range");
        }
    }
};

enum class HeadKind { classification, regression };

struct TaskHeadSpec {
    std::string name;
    HeadKind kind = HeadKind::classification;
    std::size_t classes = 2;

    std::size_t outputs() const { return kind == HeadKind::classification ? classes : 1; }
};

struct DecoderHead {
    TaskHeadSpec spec;
    Tensor weight;  // [d, outputs]
    Tensor bias;    // [outputs]
};

// Pools the first position and applies the head's affine map.
inline Tensor head_forward(const Tensor& encoded, const DecoderHead& head, const std::string& task) {
    if (head.spec.name != task) {
        throw std::invalid_argument("head for task '" + head.spec.name + "' applied to a batch of task '" + task + "'");
    }
    const std::size_t d = head.weight.dim(0), out = head.weight.dim(1);
    if (encoded.rank() != 2 || encoded.dim(1) != d) {
        throw DimensionError("head_forward: encoder output " + shape_str(encoded.shape()) + " does not match head");
    }
    Tensor pooled = reshape(select_row(encoded, 0), {1, d});
    return add(reshape(matmul(pooled, head.weight), {out}), head.bias);
}

struct TransformerLayer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_gamma, ln1_beta;
    Tensor w1, b1, w2, b2;
    Tensor ln2_gamma, ln2_beta;
    std::optional<ConditionalAttentionSite> cond_attention;
    std::optional<ConditionalLayerNormSite> cln1, cln2;
    std::optional<ConditionalBottleneckSite> bottleneck;
};

struct NamedParameter {
    std::string name;
    std::string group;
    Tensor tensor;

    bool trainable() const { return tensor.requires_grad(); }
};

inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr double kMaskPenalty = -1e9;

class CamtlModel {
public:
    CamtlModel(ModelConfig config, const std::vector<TaskHeadSpec>& tasks)
        : config_(std::move(config)), table_(config_.d_model) {
        config_.validate();
        build_base();
        build_conditional();
        for (const auto& t : tasks) add_task(t);
    }

    const ModelConfig& config() const { return config_; }
    const TaskEmbeddingTable& task_table() const { return table_; }
    TaskEmbeddingTable& task_table() { return table_; }
    const std::vector<TransformerLayer>& layers() const { return layers_; }
    std::vector<TransformerLayer>& layers() { return layers_; }
    const std::optional<ConditionalAlignmentSite>& alignment() const { return alignment_; }
    const std::vector<ConditionalBottleneckSite>& skip_sites() const { return skip_; }
    std::vector<ConditionalBottleneckSite>& skip_sites() { return skip_; }
    const Tensor& token_embedding() const { return token_embedding_; }
    const Tensor& position_embedding() const { return position_embedding_; }

    std::vector<TaskHeadSpec> task_specs() const {
        std::vector<TaskHeadSpec> out;
        for (const auto& name : table_.task_names()) out.push_back(heads_.at(name).spec);
        return out;
    }

    const DecoderHead& head(const std::string& task) const {
        table_.index_of(task);
        return heads_.at(task);
    }
    DecoderHead& head(const std::string& task) {
        table_.index_of(task);
        return heads_.at(task);
    }

    // Registers a task: a new embedding row (random unless init says
    // otherwise) and a fresh decoder head. Nothing else changes.
    void add_task(const TaskHeadSpec& spec, std::optional<TaskEmbeddingTable::Init> init = std::nullopt) {
        if (spec.name.empty()) throw std::invalid_argument("task name must not be empty");
        if (spec.kind == HeadKind::classification && spec.classes < 2) {
            throw std::invalid_argument("classification task '" + spec.name + "' needs at least 2 classes");
        }
        std::mt19937_64 rng(task_seed(spec.name));
        table_.register_task(spec.name, init.value_or(TaskEmbeddingTable::RandomInit{rng(), 0.02}));
        const std::size_t d = config_.d_model, out = spec.outputs();
        const double limit = std::sqrt(6.0 / static_cast<double>(d + out));
        heads_[spec.name] = DecoderHead{spec, Tensor::uniform({d, out}, -limit, limit, rng, true),
                                        Tensor::zeros({out}, true)};
    }

    // Copies embedding and transformer weights from a model of the same shape
    // (the "pretrained" network) and rebuilds every conditional site from
    // them, so the conditional layer norms inherit the new affine parameters.
    void adopt_base_weights(const CamtlModel& source) {
        std::map<std::string, Tensor> by_name;
        for (const auto& p : source.parameters()) {
            if (p.group == "embedding" || p.group == "transformer") by_name.emplace(p.name, p.tensor);
        }
        for (auto& p : parameters()) {
            if (p.group != "embedding" && p.group != "transformer") continue;
            auto it = by_name.find(p.name);
            if (it == by_name.end() || it->second.shape() != p.tensor.shape()) {
                throw DimensionError("adopt_base_weights: no matching source parameter for " + p.name);
            }
            auto src = it->second.data();
            std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
        }
        alignment_.reset();
        skip_.clear();
        for (std::size_t j = 0; j < layers_.size(); ++j) {
            auto& l = layers_[j];
            l.cond_attention.reset();
            l.cln1.reset();
            l.cln2.reset();
            l.bottleneck.reset();
            if (!config_.layer_frozen(j)) {
                for (Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta}) t->set_requires_grad(true);
            }
        }
        build_conditional();
    }

    // Input to the first transformer layer: E(x), then conditional alignment.
    Tensor embed(std::span<const int> tokens, const std::string& task) const {
        check_tokens(tokens);
        const Tensor& z = table_.embedding(task);
        Tensor x = add(gather_rows(token_embedding_, tokens), position_embedding_);
        if (alignment_) x = conditional_alignment(x, *alignment_, z);
        return x;
    }

    Tensor encode(std::span<const int> tokens, const std::string& task) const {
        const Tensor& z = table_.embedding(task);
        Tensor x = embed(tokens, task);
        std::optional<Tensor> mask = key_mask(tokens);
        Tensor skip_state;
        for (std::size_t j = 0; j < layers_.size(); ++j) {
            x = layer_forward(layers_[j], x, z, mask ? &*mask : nullptr);
            if (!skip_.empty()) skip_state = skip_bottleneck(x, skip_state, skip_[j], z);
            if (layers_[j].bottleneck) x = conditional_bottleneck(x, *layers_[j].bottleneck, z);
        }
        if (skip_state.defined()) x = add(x, skip_state);
        return x;
    }

    Tensor forward(std::span<const int> tokens, const std::string& task) const {
        return head_forward(encode(tokens, task), head(task), task);
    }

    // All parameters in a fixed order. Frozen ones have requires_grad off.
    std::vector<NamedParameter> parameters() const {
        std::vector<NamedParameter> out;
        auto push = [&](const std::string& group, std::vector<std::pair<std::string, Tensor>> items) {
            for (auto& [name, t] : items) out.push_back({name, group, t});
        };
        push("embedding", {{"embeddings.token", token_embedding_}, {"embeddings.position", position_embedding_}});
        if (alignment_) push("conditional_alignment", alignment_->named_parameters("alignment"));
        for (std::size_t j = 0; j < layers_.size(); ++j) {
            const auto& l = layers_[j];
            const std::string p = "layers." + std::to_string(j) + ".";
            push("transformer", {{p + "attn.wq", l.wq}, {p + "attn.bq", l.bq}, {p + "attn.wk", l.wk},
                                 {p + "attn.bk", l.bk}, {p + "attn.wv", l.wv}, {p + "attn.bv", l.bv},
                                 {p + "attn.wo", l.wo}, {p + "attn.bo", l.bo}, {p + "ln1.gamma", l.ln1_gamma},
                                 {p + "ln1.beta", l.ln1_beta}, {p + "ffn.w1", l.w1}, {p + "ffn.b1", l.b1},
                                 {p + "ffn.w2", l.w2}, {p + "ffn.b2", l.b2}, {p + "ln2.gamma", l.ln2_gamma},
                                 {p + "ln2.beta", l.ln2_beta}});
            if (l.cond_attention) push("conditional_attention", l.cond_attention->named_parameters(p + "cond_attn"));
            if (l.cln1) push("conditional_layer_norm", l.cln1->named_parameters(p + "cln1"));
            if (l.cln2) push("conditional_layer_norm", l.cln2->named_parameters(p + "cln2"));
            if (l.bottleneck) push("conditional_bottleneck", l.bottleneck->named_parameters(p + "bottleneck"));
        }
        for (std::size_t j = 0; j < skip_.size(); ++j) {
            push("conditional_bottleneck", skip_[j].named_parameters("skip." + std::to_string(j)));
        }
        for (const auto& name : table_.task_names()) {
            push("task_embedding", {{"tasks." + name + ".embedding", table_.embedding(name)}});
            const auto& h = heads_.at(name);
            push("head", {{"heads." + name + ".weight", h.weight}, {"heads." + name + ".bias", h.bias}});
        }
        return out;
    }

private:
    std::uint64_t task_seed(const std::string& name) const {
        std::uint64_t h = 1469598103934665603ULL ^ config_.seed;
        for (unsigned char c : name) h = (h ^ c) * 1099511628211ULL;
        return h;
    }

    void check_tokens(std::span<const int> tokens) const {
        if (tokens.size() != config_.seq_len) {
            throw DimensionError("expected " + std::to_string(config_.seq_len) + " tokens, got " +
                                 std::to_string(tokens.size()));
        }
    }

    std::optional<Tensor> key_mask(std::span<const int> tokens) const {
        if (std::find(tokens.begin(), tokens.end(), kPadToken) == tokens.end()) return std::nullopt;
        std::vector<double> m(tokens.size(), 0.0);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] == kPadToken) m[i] = kMaskPenalty;
        }
        return Tensor::vector(std::move(m));
    }

    static Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
        return add(matmul(x, w), broadcast_rows(b, x.dim(0)));
    }

    Tensor layer_forward(const TransformerLayer& l, const Tensor& x, const Tensor& z, const Tensor* mask) const {
        const std::size_t dh = config_.head_dim();
        Tensor q = affine(x, l.wq, l.bq), k = affine(x, l.wk, l.bk), v = affine(x, l.wv, l.bv);
        std::optional<Tensor> bias;
        if (l.cond_attention) bias = assemble_conditional_bias(*l.cond_attention, z);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < config_.n_heads; ++h) {
            heads.push_back(attention(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh), slice_cols(v, h * dh, dh),
                                      bias ? &*bias : nullptr, mask));
        }
        Tensor attended = config_.n_heads == 1 ? heads.front() : concat_cols(heads);
        Tensor a = add(x, affine(attended, l.wo, l.bo));
        Tensor h1 = l.cln1 ? conditional_layer_norm(a, *l.cln1, z) : layer_norm(a, l.ln1_gamma, l.ln1_beta);
        Tensor f = affine(gelu(affine(h1, l.w1, l.b1)), l.w2, l.b2);
        Tensor h2 = add(h1, f);
        return l.cln2 ? conditional_layer_norm(h2, *l.cln2, z) : layer_norm(h2, l.ln2_gamma, l.ln2_beta);
    }

    // Base weights come from their own stream so that toggling conditional
    // modules never changes them.
    void build_base() {
        std::mt19937_64 rng(config_.seed);
        const std::size_t d = config_.d_model, L = config_.seq_len, ff = config_.ffn_dim();
        token_embedding_ = Tensor::uniform({config_.vocab_size, d}, -1.0, 1.0, rng, false);
        position_embedding_ = Tensor::uniform({L, d}, -0.1, 0.1, rng, false);
        auto xavier = [&](std::size_t in, std::size_t out) {
            const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
            return Tensor::uniform({in, out}, -limit, limit, rng, true);
        };
        for (std::size_t j = 0; j < config_.n_layers; ++j) {
            TransformerLayer l;
            l.wq = xavier(d, d);
            l.bq = Tensor::zeros({d}, true);
            l.wk = xavier(d, d);
            l.bk = Tensor::zeros({d}, true);
            l.wv = xavier(d, d);
            l.bv = Tensor::zeros({d}, true);
            l.wo = xavier(d, d);
            l.bo = Tensor::zeros({d}, true);
            l.ln1_gamma = Tensor::full({d}, 1.0, true);
            l.ln1_beta = Tensor::zeros({d}, true);
            l.w1 = xavier(d, ff);
            l.b1 = Tensor::zeros({ff}, true);
            l.w2 = xavier(ff, d);
            l.b2 = Tensor::zeros({d}, true);
            l.ln2_gamma = Tensor::full({d}, 1.0, true);
            l.ln2_beta = Tensor::zeros({d}, true);
            if (config_.layer_frozen(j)) {
                for (Tensor* t : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gamma, &l.ln1_beta,
                                  &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_gamma, &l.ln2_beta}) {
                    t->set_requires_grad(false);
                }
            }
            layers_.push_back(std::move(l));
        }
    }

    void build_conditional() {
        std::mt19937_64 rng(config_.seed ^ 0x9e3779b97f4a7c15ULL);
        const std::size_t d = config_.d_model, L = config_.seq_len;
        if (config_.conditional_alignment) alignment_ = ConditionalAlignmentSite::make(d, d);
        for (std::size_t j = 0; j < layers_.size(); ++j) {
            auto& l = layers_[j];
            if (config_.layer_frozen(j)) continue;
            if (config_.attention == AttentionVariant::block_diagonal) {
                l.cond_attention = ConditionalAttentionSite::make(L, config_.blocks(), d, rng);
            } else if (config_.attention == AttentionVariant::full_block) {
                l.cond_attention = ConditionalAttentionSite::make(L, 1, d, rng);
            }
            if (config_.conditional_layer_norm) {
                l.cln1 = ConditionalLayerNormSite::make(l.ln1_gamma, l.ln1_beta, d);
                l.cln2 = ConditionalLayerNormSite::make(l.ln2_gamma, l.ln2_beta, d);
                // The conditional site takes over these parameters.
                for (Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta}) t->set_requires_grad(false);
            }
        }
        if (config_.bottleneck == BottleneckVariant::base_top) {
            for (std::size_t j : config_.top_layers()) {
                layers_[j].bottleneck =
                    ConditionalBottleneckSite::make(BottleneckVariant::base_top, d, config_.bottleneck_dim(), d, rng);
            }
        } else if (config_.bottleneck == BottleneckVariant::large_skip) {
            for (std::size_t j = 0; j < layers_.size(); ++j) {
                skip_.push_back(
                    ConditionalBottleneckSite::make(BottleneckVariant::large_skip, d, config_.bottleneck_dim(), d, rng));
            }
        }
    }

    ModelConfig config_;
    TaskEmbeddingTable table_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    std::optional<ConditionalAlignmentSite> alignment_;
    std::vector<TransformerLayer> layers_;
    std::vector<ConditionalBottleneckSite> skip_;
    std::map<std::string, DecoderHead> heads_;
};

inline Tensor encoder_forward(std::span<const int> tokens, const std::string& task, const CamtlModel& model) {
    return model.encode(tokens, task);
}

}  // namespace camtl
