#pragma once

#include <vector>

#include "seq2seg/ops.hpp"
#include "seq2seg/sequentializer.hpp"

namespace seq2seg {

struct EncoderConfig {
    int layers = 12;
    int hidden = 768;
    int heads = 12;
    int mlp_ratio = 4;
    bool final_ln = true;   // extra layer norm applied to the last feature
    float ln_eps = 1e-6f;
    float dropout = 0.0f;

    int head_dim() const { return hidden / heads; }
    void validate() const;

    static EncoderConfig t_base() { return {.layers = 12, .hidden = 768, .heads = 12}; }
    static EncoderConfig t_large() { return {.layers = 24, .hidden = 1024, .heads = 16}; }
    // Desk-scale preset used throughout the test suites.
    static EncoderConfig t_tiny() { return {.layers = 4, .hidden = 64, .heads = 4}; }
};

struct LayerWeights {
    Tensor wq, wk, wv;  // [C, m*d] fused across heads
    Tensor wo;          // [m*d, C]
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor mlp1_w, mlp1_b;  // [C, mlp_ratio*C], [mlp_ratio*C]
    Tensor mlp2_w, mlp2_b;  // [mlp_ratio*C, C], [C]
};

struct EncoderFeatures {
    // Z^1..Z^{L_e} in order, each [L,C]. With final_ln the last entry is the
    // normalized feature handed to decoders.
    std::vector<Tensor> layers;
    // per layer, per head [L,L]; filled only when requested
    std::vector<std::vector<Tensor>> attention;
};

// One attention head: A = softmax(Q K^T / sqrt(d)), output A (Z W_V).
// The block-level residual is applied by the caller, once per MSA block.
Tensor single_head_attention(const Tensor& z, const Tensor& wq, const Tensor& wk,
                             const Tensor& wv, Tensor* attention_out = nullptr);

class Encoder {
public:
    Encoder() = default;
    Encoder(EncoderConfig cfg, Rng& rng, InitMode init = InitMode::TruncNormal);

    EncoderFeatures forward(const Tensor& embedding, bool keep_attention = false,
                            Rng* dropout_rng = nullptr) const;

    // Pre-norm MSA with residual: z + W_O [SA_1(LN z); ...; SA_m(LN z)].
    Tensor msa_block(const Tensor& z, const LayerWeights& w,
                     std::vector<Tensor>* attention_out = nullptr,
                     Rng* dropout_rng = nullptr) const;

    // h + MLP(LN h) with the GELU nonlinearity.
    Tensor mlp_block(const Tensor& h, const LayerWeights& w, Rng* dropout_rng = nullptr) const;

    EncoderConfig config;
    std::vector<LayerWeights> weights;
    Tensor final_g, final_b;
};

}  // namespace seq2seg
