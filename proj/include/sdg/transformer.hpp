// Copyright (C) 2026 sdg authors
// SPDX-License-Identifier: Apache-2.0
//
// Attention primitives and the encoder/decoder blocks. The decoder block
// fuses masked self-attention over the decoded prefix with cross-attention
// over the encoder output by elementwise averaging, then optionally adds a
// style embedding to every time step before the residual path continues.

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sdg/instrumentation.hpp"
#include "sdg/tensor.hpp"

namespace sdg {

/// Boolean attention mask: allow[q * cols + k] says whether query position q
/// may attend to key position k.
struct AttnMask {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> allow;

    static AttnMask causal(std::size_t l) {
        AttnMask m{l, l, std::vector<std::uint8_t>(l * l, 0)};
        for (std::size_t q = 0; q < l; ++q)
            for (std::size_t k = 0; k <= q; ++k) m.allow[q * l + k] = 1;
        return m;
    }
};

/// Query/key/value/output projections for one attention operation.
struct AttentionWeights {
    Tensor wq, wk, wv, wo;  // each h x h
};

/// One shared encoder/decoder block. The encoder path uses self_attn with no
/// mask; the decoder path uses self_attn with a causal mask plus cross_attn
/// against the encoder output. Feed-forward and both layer norms are shared
/// between the two paths.
struct BlockWeights {
    AttentionWeights self_attn;
    AttentionWeights cross_attn;
    Tensor ff_w1, ff_b1;  // h x 4h, 1 x 4h
    Tensor ff_w2, ff_b2;  // 4h x h, 1 x h
    Tensor ln1_gain, ln1_bias;  // h
    Tensor ln2_gain, ln2_bias;  // h
};

/// Fused decoder-block state: masked prefix self-attention, unmasked
/// cross-attention over the encoder output, and their elementwise average.
struct RoutingState {
    Tensor r_prev;
    Tensor r_post;
    Tensor r_avg;
};

namespace detail {
inline Tensor masked_logit_fill(const Tensor& scores, const AttnMask& mask) {
    if (mask.rows != scores.dim(0) || mask.cols != scores.dim(1))
        throw ShapeError("attention mask " + shape_str({mask.rows, mask.cols}) +
                         " does not match scores " + shape_str(scores.shape()));
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = mask.allow[i] ? scores.values()[i] : kNegInf;
    return Tensor::from_op(scores.shape(), std::move(out), {scores},
                           [allow = mask.allow](Tensor& out_t, std::vector<Tensor>& in) {
                               const auto& g = out_t.grad();
                               auto& gi = in[0].mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   if (allow[i]) gi[i] += g[i];
                           });
}
}  // namespace detail

/// Scaled dot-product attention with n_heads heads: project, attend per head,
/// concatenate, project out. Masked logits receive -inf before the softmax.
inline Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                                   const AttnMask* mask, const AttentionWeights& w,
                                   std::size_t n_heads) {
    std::size_t h = query.dim(1);
    if (key.dim(1) != h || value.dim(1) != h)
        throw ShapeError("attention: hidden size mismatch, " + shape_str(query.shape()) + " vs " +
                         shape_str(key.shape()) + " vs " + shape_str(value.shape()));
    if (key.dim(0) != value.dim(0))
        throw ShapeError("attention: key/value length mismatch, " + shape_str(key.shape()) +
                         " vs " + shape_str(value.shape()));
    if (n_heads == 0 || h % n_heads != 0)
        throw ConfigError("attention: hidden size " + std::to_string(h) +
                          " not divisible by " + std::to_string(n_heads) + " heads");
    if (mask && (mask->rows != query.dim(0) || mask->cols != key.dim(0)))
        throw ShapeError("attention mask " + shape_str({mask->rows, mask->cols}) +
                         " does not match query " + shape_str(query.shape()) + " / key " +
                         shape_str(key.shape()));

    Tensor q = matmul(query, w.wq);
    Tensor k = matmul(key, w.wk);
    Tensor v = matmul(value, w.wv);
    std::size_t dh = h / n_heads;
    double scaling = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (std::size_t i = 0; i < n_heads; ++i) {
        Tensor qh = slice_cols(q, i * dh, dh);
        Tensor kh = slice_cols(k, i * dh, dh);
        Tensor vh = slice_cols(v, i * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), scaling);
        if (mask) scores = detail::masked_logit_fill(scores, *mask);
        heads.push_back(matmul(softmax(scores, -1), vh));
    }
    return matmul(concat_cols(heads), w.wo);
}

/// Elementwise average of the two routed representations.
inline Tensor routing_average(const Tensor& r_prev, const Tensor& r_post) {
    return scale(add(r_prev, r_post), 0.5);
}

/// Masked self-attention over the decoded prefix, cross-attention over the
/// encoder output, and their average.
inline RoutingState attention_routing(const Tensor& prefix_states, const Tensor& enc_out,
                                      const AttentionWeights& w_self,
                                      const AttentionWeights& w_cross, std::size_t n_heads) {
    if (prefix_states.dim(0) == 0)
        throw ContractError("attention_routing: empty decoded prefix (decoding starts from a "
                            "start token)");
    AttnMask causal = AttnMask::causal(prefix_states.dim(0));
    RoutingState state;
    state.r_prev =
        multi_head_attention(prefix_states, prefix_states, prefix_states, &causal, w_self, n_heads);
    state.r_post = multi_head_attention(prefix_states, enc_out, enc_out, nullptr, w_cross, n_heads);
    state.r_avg = routing_average(state.r_prev, state.r_post);
    return state;
}

/// Adds the style embedding [1 x h] to every time step of r_avg.
inline Tensor style_routing(const Tensor& r_avg, const Tensor& style_emb) {
    if (style_emb.ndim() != 2 || style_emb.dim(0) != 1 || style_emb.dim(1) != r_avg.dim(1))
        throw ShapeError("style_routing: style embedding " + shape_str(style_emb.shape()) +
                         " incompatible with " + shape_str(r_avg.shape()));
    instrumentation().style_routing_applications.fetch_add(1, std::memory_order_relaxed);
    return add(r_avg, style_emb);
}

namespace detail {
inline Tensor feed_forward(const Tensor& x, const BlockWeights& w) {
    Tensor hidden = gelu(add(matmul(x, w.ff_w1), w.ff_b1));
    return add(matmul(hidden, w.ff_w2), w.ff_b2);
}
}  // namespace detail

/// Decoder block: attention routing, optional style routing, then the
/// post-norm residual structure with a shared feed-forward sub-layer.
/// style_emb is present only in the stylized model's decoder.
inline Tensor decoder_block(const Tensor& prefix_states, const Tensor& enc_out,
                            const std::optional<Tensor>& style_emb, const BlockWeights& w,
                            std::size_t n_heads) {
    RoutingState routed = attention_routing(prefix_states, enc_out, w.self_attn, w.cross_attn,
                                            n_heads);
    Tensor merged = style_emb ? style_routing(routed.r_avg, *style_emb) : routed.r_avg;
    Tensor x = layer_norm(add(prefix_states, merged), w.ln1_gain, w.ln1_bias);
    Tensor ff = detail::feed_forward(x, w);
    return layer_norm(add(x, ff), w.ln2_gain, w.ln2_bias);
}

/// Encoder block: unmasked self-attention with the same post-norm structure.
inline Tensor encoder_block(const Tensor& states, const BlockWeights& w, std::size_t n_heads) {
    Tensor attn = multi_head_attention(states, states, states, nullptr, w.self_attn, n_heads);
    Tensor x = layer_norm(add(states, attn), w.ln1_gain, w.ln1_bias);
    Tensor ff = detail::feed_forward(x, w);
    return layer_norm(add(x, ff), w.ln2_gain, w.ln2_bias);
}

}  // namespace sdg
