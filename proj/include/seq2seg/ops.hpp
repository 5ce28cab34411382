#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "seq2seg/tensor.hpp"

namespace seq2seg {

// Differentiable operations. Every op computes eagerly, verifies the output is
// finite, and records its backward step on the thread's active tape when some
// input requires a gradient. Without an active tape they are plain functions.

// a[M,K] * b[K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

// a[R,C] -> [C,R]
Tensor transpose(const Tensor& a);

// Row-wise softmax with row-max subtraction; rows sum to 1.
Tensor softmax_rows(const Tensor& a);

// Per-row standardization of a[L,C] followed by gamma*x + beta.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// Elementwise sum; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float s);

// a[R,C] + b[C] broadcast over rows.
Tensor add_bias_rows(const Tensor& a, const Tensor& b);

// Columns [c0, c0+len) of a[R,C].
Tensor col_slice(const Tensor& a, int c0, int len);

// Join rank-2 tensors with equal row counts along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor sum_all(const Tensor& a);

// Same data, new shape; element count must match.
Tensor reshape(const Tensor& a, Shape shape);

// Inverted dropout. p = 0 returns the input unchanged.
Tensor dropout(const Tensor& a, float p, Rng& rng);

// x[N,H,W,Cin] cross-correlated with kernel[kh,kw,Cin,Cout]; optional bias[Cout].
// Output spatial size (H + 2*pad - kh)/stride + 1 must be positive.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int pad = 0);
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1, int pad = 0);

// Align-corners bilinear resize of x[N,H,W,C] to [N,outH,outW,C].
// Exact identity (bitwise) when the size is unchanged.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    bool initialized = false;
};

// Per-channel normalization of x[N,H,W,C] over the batch and spatial extent.
// Train mode normalizes with batch statistics and updates the running ones;
// eval mode requires initialized running statistics.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool train,
                    float eps = 1e-5f, float momentum = 0.1f);

// Mean negative log-softmax probability of the true class over pixels whose
// label is not ignore_index. logits[N,H,W,K], labels length N*H*W.
Tensor cross_entropy_map(const Tensor& logits, std::span<const uint16_t> labels,
                         int ignore_index);

// Join rank-4 maps with equal N,H,W along channels.
Tensor concat_channels(const std::vector<Tensor>& parts);

// Stack rank-3 maps [H,W,C] into one [N,H,W,C] batch.
Tensor stack_maps(const std::vector<Tensor>& parts);

}  // namespace seq2seg
