#pragma once

// Task-conditioned building blocks of the encoder. Each site owns its own
// FiLM generator; nothing is shared between sites.

#include <cmath>
#include <optional>

#include "camtl/task_conditioning.hpp"

namespace camtl {

enum class BottleneckVariant { none, base_top, large_skip };
enum class AttentionVariant { none, block_diagonal, full_block };

// Block-diagonal composition of square matrices. Entries outside the blocks
// are exactly 0.0.
inline Tensor direct_sum(const std::vector<Tensor>& blocks) {
    if (blocks.empty()) throw DimensionError("direct_sum: no blocks given");
    std::vector<std::size_t> sides;
    std::size_t total = 0;
    for (const auto& b : blocks) {
        if (b.rank() != 2 || b.dim(0) != b.dim(1)) {
            throw DimensionError("direct_sum: block " + shape_str(b.shape()) + " is not square");
        }
        sides.push_back(b.dim(0));
        total += b.dim(0);
    }
    std::vector<double> out(total * total, 0.0);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        const std::size_t s = sides[k];
        auto bd = blocks[k].data();
        for (std::size_t i = 0; i < s; ++i)
            std::copy_n(bd.begin() + i * s, s, out.begin() + (offset + i) * total + offset);
        offset += s;
    }
    return detail::make_op(
        "direct_sum", {total, total}, std::move(out), blocks,
        [sides, total](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < sides.size(); ++k) {
                const std::size_t s = sides[k];
                if (detail::wants(self, k)) {
                    gin[k].resize(s * s);
                    for (std::size_t i = 0; i < s; ++i)
                        std::copy_n(g.begin() + (off + i) * total + off, s, gin[k].begin() + i * s);
                }
                off += s;
            }
        });
}

// softmax(Q K^T / sqrt(d_h) + bias + key_mask) V for one head.
// bias is [L, L]; key_mask is a [L] vector of additive key penalties.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* bias = nullptr,
                        const Tensor* key_mask = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw DimensionError("attention: incompatible Q/K/V shapes " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);
    if (bias) {
        if (bias->shape() != scores.shape()) {
            throw DimensionError("attention: bias " + shape_str(bias->shape()) + " does not match scores " +
                                 shape_str(scores.shape()));
        }
        scores = add(*bias, scores);
    }
    if (key_mask) scores = add(scores, broadcast_rows(*key_mask, scores.dim(0)));
    return matmul(softmax_lastdim(scores), v);
}

// N trainable (L/N)x(L/N) blocks A_n and one generator, of width (L/N)^2,
// shared by every block. The full-block variant is the N = 1 case.
struct ConditionalAttentionSite {
    std::size_t seq_len = 0;
    std::vector<Tensor> blocks;
    FiLMGenerator generator;

    std::size_t block_count() const { return blocks.size(); }
    std::size_t block_size() const { return blocks.empty() ? 0 : blocks.front().dim(0); }

    // Blocks start as stacks of small random row vectors; the generator's gain
    // starts at zero so M(z) is exactly zero before training.
    template <class Rng>
    static ConditionalAttentionSite make(std::size_t seq_len, std::size_t block_count, std::size_t task_dim,
                                         Rng& rng, double block_scale = 0.01, double initial_gain = 0.0) {
        if (block_count == 0 || seq_len % block_count != 0) {
            throw DimensionError("conditional attention: sequence length " + std::to_string(seq_len) +
                                 " is not divisible into " + std::to_string(block_count) + " blocks");
        }
        const std::size_t side = seq_len / block_count;
        ConditionalAttentionSite site;
        site.seq_len = seq_len;
        for (std::size_t n = 0; n < block_count; ++n) {
            site.blocks.push_back(Tensor::uniform({side, side}, -block_scale, block_scale, rng, true));
        }
        site.generator = FiLMGenerator::constant(task_dim, std::vector<double>(side * side, initial_gain),
                                                 std::vector<double>(side * side, 0.0));
        return site;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t n = 0; n < blocks.size(); ++n) out.emplace_back(prefix + ".block" + std::to_string(n), blocks[n]);
        for (auto& p : generator.named_parameters(prefix + ".film")) out.push_back(std::move(p));
        return out;
    }
};

// M(z) = direct_sum_n (gamma(z) (*) A_n + beta(z)).
inline Tensor assemble_conditional_bias(const ConditionalAttentionSite& site, const Tensor& z) {
    FiLMOutput film = film_generate(site.generator, z);
    std::vector<Tensor> modulated;
    modulated.reserve(site.blocks.size());
    for (const auto& a : site.blocks) modulated.push_back(apply_film(a, film, ModulationArity::per_element));
    return direct_sum(modulated);
}

inline Tensor conditional_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const ConditionalAttentionSite& site, const Tensor& z,
                                    const Tensor* key_mask = nullptr) {
    if (q.dim(0) != site.seq_len || k.dim(0) != site.seq_len) {
        throw DimensionError("conditional attention: site built for L=" + std::to_string(site.seq_len) +
                             ", got sequences of length " + std::to_string(q.dim(0)));
    }
    Tensor bias = assemble_conditional_bias(site, z);
    return attention(q, k, v, &bias, key_mask);
}

// R starts as the identity with an identity generator, so alignment is a
// no-op before training.
struct ConditionalAlignmentSite {
    ModulatedWeight r;

    static ConditionalAlignmentSite make(std::size_t d, std::size_t task_dim) {
        return {ModulatedWeight(Tensor::identity(d, true), FiLMGenerator::identity(task_dim, d),
                                ModulationArity::per_row, true)};
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out{{prefix + ".R", r.base()}};
        for (auto& p : r.generator().named_parameters(prefix + ".film")) out.push_back(std::move(p));
        return out;
    }
};

inline Tensor conditional_alignment(const Tensor& x_emb, const ConditionalAlignmentSite& site, const Tensor& z) {
    if (x_emb.rank() != 2 || x_emb.dim(1) != site.r.base().dim(0)) {
        throw DimensionError("conditional alignment: input " + shape_str(x_emb.shape()) +
                             " does not match alignment matrix " + shape_str(site.r.base().shape()));
    }
    return matmul(x_emb, modulate(site.r, z));
}

inline constexpr double kLayerNormEps = 1e-12;

inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
    Tensor normed = normalize_rows(a, eps);
    const std::size_t rows = a.dim(0);
    return add(mul(normed, broadcast_rows(gamma, rows)), broadcast_rows(beta, rows));
}

// Layer norm whose scale is gamma' (*) gamma(z) and whose shift is beta(z).
// The inherited bias beta' seeds the shift generator's bias, so the site
// reproduces the plain layer norm exactly before training.
struct ConditionalLayerNormSite {
    Tensor gamma_prime;
    FiLMGenerator generator;

    static ConditionalLayerNormSite make(const Tensor& inherited_gamma, const Tensor& inherited_beta,
                                         std::size_t task_dim, bool train_gamma_prime = false) {
        ConditionalLayerNormSite site;
        site.gamma_prime = inherited_gamma.detach();
        site.gamma_prime.set_requires_grad(train_gamma_prime);
        auto beta = inherited_beta.data();
        site.generator = FiLMGenerator::constant(task_dim, std::vector<double>(inherited_gamma.numel(), 1.0),
                                                 std::vector<double>(beta.begin(), beta.end()));
        return site;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out{{prefix + ".gamma_prime", gamma_prime}};
        for (auto& p : generator.named_parameters(prefix + ".film")) out.push_back(std::move(p));
        return out;
    }
};

inline Tensor conditional_layer_norm(const Tensor& a, const ConditionalLayerNormSite& site, const Tensor& z) {
    if (a.rank() != 2 || a.dim(1) != site.gamma_prime.numel()) {
        throw DimensionError("conditional layer norm: input " + shape_str(a.shape()) + " does not match width " +
                             std::to_string(site.gamma_prime.numel()));
    }
    FiLMOutput film = film_generate(site.generator, z);
    Tensor normed = normalize_rows(a, kLayerNormEps);
    const std::size_t rows = a.dim(0);
    Tensor gain = mul(site.gamma_prime, film.gamma);
    return add(mul(normed, broadcast_rows(gain, rows)), broadcast_rows(film.beta, rows));
}

// Task-modulated down/up projection pair with a GELU in between. The
// up-projection starts at zero so the module contributes nothing at init.
struct ConditionalBottleneckSite {
    BottleneckVariant variant = BottleneckVariant::base_top;
    ModulatedWeight down;  // [d, k], one FiLM factor per input feature
    ModulatedWeight up;    // [k, d], one FiLM factor per hidden unit
    Tensor down_bias;      // [k]
    Tensor up_bias;        // [d]
    std::optional<ConditionalLayerNormSite> norm;  // base_top only

    std::size_t width() const { return down.base().dim(1); }

    template <class Rng>
    static ConditionalBottleneckSite make(BottleneckVariant variant, std::size_t d, std::size_t k,
                                          std::size_t task_dim, Rng& rng) {
        if (variant == BottleneckVariant::none) throw std::invalid_argument("bottleneck site needs a variant");
        ConditionalBottleneckSite site;
        site.variant = variant;
        const double limit = std::sqrt(6.0 / static_cast<double>(d + k));
        site.down = ModulatedWeight(Tensor::uniform({d, k}, -limit, limit, rng, true),
                                    FiLMGenerator::identity(task_dim, d), ModulationArity::per_row, true);
        site.up = ModulatedWeight(Tensor::zeros({k, d}, true), FiLMGenerator::identity(task_dim, k),
                                  ModulationArity::per_row, true);
        site.down_bias = Tensor::zeros({k}, true);
        site.up_bias = Tensor::zeros({d}, true);
        if (variant == BottleneckVariant::base_top) {
            site.norm = ConditionalLayerNormSite::make(Tensor::full({d}, 1.0), Tensor::zeros({d}), task_dim, false);
        }
        return site;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out{{prefix + ".down", down.base()},
                                                        {prefix + ".down_bias", down_bias},
                                                        {prefix + ".up", up.base()},
                                                        {prefix + ".up_bias", up_bias}};
        for (auto& p : down.generator().named_parameters(prefix + ".down_film")) out.push_back(std::move(p));
        for (auto& p : up.generator().named_parameters(prefix + ".up_film")) out.push_back(std::move(p));
        if (norm) {
            for (auto& p : norm->named_parameters(prefix + ".norm")) out.push_back(std::move(p));
        }
        return out;
    }
};

// up'(gelu(x down' + b_down)) + b_up with down', up' modulated by z.
inline Tensor bottleneck_transform(const Tensor& x, const ConditionalBottleneckSite& site, const Tensor& z) {
    const std::size_t rows = x.dim(0);
    Tensor hidden = add(matmul(x, modulate(site.down, z)), broadcast_rows(site.down_bias, rows));
    return add(matmul(gelu(hidden), modulate(site.up, z)), broadcast_rows(site.up_bias, rows));
}

// Top-layer variant: h + bottleneck(CLN(h)).
inline Tensor conditional_bottleneck(const Tensor& h, const ConditionalBottleneckSite& site, const Tensor& z) {
    if (site.variant != BottleneckVariant::base_top || !site.norm) {
        throw std::invalid_argument("conditional_bottleneck: site is not a base_top bottleneck");
    }
    return add(h, bottleneck_transform(conditional_layer_norm(h, *site.norm, z), site, z));
}

// Skip-path variant: s_j = bottleneck(h_j + s_{j-1}); an undefined previous
// state stands for s_0 = 0.
inline Tensor skip_bottleneck(const Tensor& h, const Tensor& previous, const ConditionalBottleneckSite& site,
                              const Tensor& z) {
    if (site.variant != BottleneckVariant::large_skip) {
        throw std::invalid_argument("skip_bottleneck: site is not a large_skip bottleneck");
    }
    return bottleneck_transform(previous.defined() ? add(h, previous) : h, site, z);
}

}  // namespace camtl
