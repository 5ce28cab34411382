#include "seq2seg/encoder.hpp"

#include <cmath>

namespace seq2seg {

void EncoderConfig::validate() const {
    if (layers < 1) throw ConfigError("encoder: layer count must be >= 1");
    if (heads < 1 || hidden < 1) throw ConfigError("encoder: bad hidden/head sizes");
    if (hidden % heads != 0) {
        throw ConfigError("encoder: hidden size " + std::to_string(hidden) +
                          " not divisible by head count " + std::to_string(heads));
    }
    if (mlp_ratio < 1) throw ConfigError("encoder: mlp_ratio must be >= 1");
}

Tensor single_head_attention(const Tensor& z, const Tensor& wq, const Tensor& wk,
                             const Tensor& wv, Tensor* attention_out) {
    const int d = wq.dim(1);
    Tensor q = matmul(z, wq);
    Tensor k = matmul(z, wk);
    Tensor v = matmul(z, wv);
    Tensor logits = scale(matmul(q, transpose(k)), 1.0f / std::sqrt(static_cast<float>(d)));
    Tensor attn = softmax_rows(logits);
    if (attention_out) *attention_out = attn;
    return matmul(attn, v);
}

Encoder::Encoder(EncoderConfig cfg, Rng& rng, InitMode init) : config(cfg) {
    config.validate();
    const int c = config.hidden;
    const int md = config.heads * config.head_dim();
    const int mh = config.mlp_ratio * c;
    weights.reserve(static_cast<size_t>(config.layers));
    auto make = [&](Shape shape) {
        return init == InitMode::TruncNormal ? Tensor::trunc_normal(shape, rng, 0.02f, true)
                                             : Tensor::zeros(shape, true);
    };
    for (int l = 0; l < config.layers; ++l) {
        LayerWeights w;
        w.wq = make({c, md});
        w.wk = make({c, md});
        w.wv = make({c, md});
        w.wo = make({md, c});
        w.ln1_g = Tensor::full({c}, 1.0f, true);
        w.ln1_b = Tensor::zeros({c}, true);
        w.ln2_g = Tensor::full({c}, 1.0f, true);
        w.ln2_b = Tensor::zeros({c}, true);
        w.mlp1_w = make({c, mh});
        w.mlp1_b = Tensor::zeros({mh}, true);
        w.mlp2_w = make({mh, c});
        w.mlp2_b = Tensor::zeros({c}, true);
        weights.push_back(std::move(w));
    }
    final_g = Tensor::full({c}, 1.0f, true);
    final_b = Tensor::zeros({c}, true);
}

Tensor Encoder::msa_block(const Tensor& z, const LayerWeights& w,
                          std::vector<Tensor>* attention_out, Rng* dropout_rng) const {
    const int d = config.head_dim();
    Tensor normed = layer_norm(z, w.ln1_g, w.ln1_b, config.ln_eps);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(config.heads));
    for (int h = 0; h < config.heads; ++h) {
        Tensor wq = col_slice(w.wq, h * d, d);
        Tensor wk = col_slice(w.wk, h * d, d);
        Tensor wv = col_slice(w.wv, h * d, d);
        Tensor attn;
        heads.push_back(single_head_attention(normed, wq, wk, wv, attention_out ? &attn : nullptr));
        if (attention_out) attention_out->push_back(attn);
    }
    Tensor projected = matmul(concat_cols(heads), w.wo);
    if (dropout_rng && config.dropout > 0.0f) {
        projected = dropout(projected, config.dropout, *dropout_rng);
    }
    return add(z, projected);
}

Tensor Encoder::mlp_block(const Tensor& h, const LayerWeights& w, Rng* dropout_rng) const {
    Tensor normed = layer_norm(h, w.ln2_g, w.ln2_b, config.ln_eps);
    Tensor hidden = gelu(add_bias_rows(matmul(normed, w.mlp1_w), w.mlp1_b));
    Tensor out = add_bias_rows(matmul(hidden, w.mlp2_w), w.mlp2_b);
    if (dropout_rng && config.dropout > 0.0f) {
        out = dropout(out, config.dropout, *dropout_rng);
    }
    return add(h, out);
}

EncoderFeatures Encoder::forward(const Tensor& embedding, bool keep_attention,
                                 Rng* dropout_rng) const {
    if (embedding.rank() != 2 || embedding.dim(1) != config.hidden) {
        throw ShapeError("encoder: embedding " + embedding.shape_str() + " does not match hidden size " +
                         std::to_string(config.hidden));
    }
    if (static_cast<int>(weights.size()) != config.layers) {
        throw ConfigError("encoder: configured for " + std::to_string(config.layers) +
                          " layers but holds " + std::to_string(weights.size()) + " weight sets");
    }
    EncoderFeatures features;
    features.layers.reserve(static_cast<size_t>(config.layers));
    if (keep_attention) features.attention.resize(static_cast<size_t>(config.layers));
    Tensor z = embedding;
    for (int l = 0; l < config.layers; ++l) {
        std::vector<Tensor>* attn = keep_attention ? &features.attention[static_cast<size_t>(l)] : nullptr;
        Tensor after_msa = msa_block(z, weights[static_cast<size_t>(l)], attn, dropout_rng);
        z = mlp_block(after_msa, weights[static_cast<size_t>(l)], dropout_rng);
        features.layers.push_back(z);
    }
    if (config.final_ln) {
        features.layers.back() = layer_norm(features.layers.back(), final_g, final_b, config.ln_eps);
    }
    return features;
}

}  // namespace seq2seg
