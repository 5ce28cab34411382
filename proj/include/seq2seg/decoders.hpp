#pragma once

#include <array>
#include <vector>

#include "seq2seg/ops.hpp"
#include "seq2seg/sequentializer.hpp"

namespace seq2seg {

// Row-major inverse of patch-grid flattening; lossless.
Tensor sequence_to_map(const Tensor& z, int gh, int gw);
Tensor map_to_sequence(const Tensor& map);

struct Conv2dLayer {
    Tensor w;  // [kh,kw,Cin,Cout]
    Tensor b;  // [Cout]
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(int kernel, int cin, int cout, Rng& rng, InitMode init);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct BatchNorm2d {
    Tensor gamma, beta;
    BatchNormState state;
    float eps = 1e-5f;
    float momentum = 0.1f;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);
    Tensor forward(const Tensor& x, bool train) {
        return batch_norm2d(x, gamma, beta, state, train, eps, momentum);
    }
};

// conv + batch norm + ReLU, the building block shared by all decoder heads
struct ConvBnRelu {
    Conv2dLayer conv;
    BatchNorm2d bn;

    ConvBnRelu() = default;
    ConvBnRelu(int kernel, int cin, int cout, Rng& rng, InitMode init);
    Tensor forward(const Tensor& x, bool train) { return relu(bn.forward(conv.forward(x), train)); }
};

// 1x1 conv to an intermediate width + BN + ReLU, then 1x1 conv to the class
// count. Used by the naive decoder and by every auxiliary loss head.
struct TwoLayerHead {
    ConvBnRelu reduce;
    Conv2dLayer classify;

    TwoLayerHead() = default;
    TwoLayerHead(int cin, int width, int classes, Rng& rng, InitMode init);
    // logits at full resolution: head convs then one bilinear to (out_h, out_w)
    Tensor forward(const Tensor& x, int out_h, int out_w, bool train);
};

class NaiveDecoder {
public:
    NaiveDecoder() = default;
    NaiveDecoder(int in_channels, int width, int classes, Rng& rng, InitMode init);
    Tensor forward(const Tensor& feature_map, int out_h, int out_w, bool train);

    TwoLayerHead head;
    int classes = 0;
};

class PupDecoder {
public:
    PupDecoder() = default;
    PupDecoder(int in_channels, int width, int classes, Rng& rng, InitMode init);

    // Four conv+BN+ReLU stages, each followed by a 2x bilinear upsample, then
    // a 1x1 classifier at full resolution. stage_maps, when given, receives
    // the feature right after each of the 4 upsamples plus the logits map.
    Tensor forward(const Tensor& feature_map, int out_h, int out_w, bool train,
                   std::vector<Tensor>* stage_maps = nullptr);

    int last_upsample_count() const { return last_upsample_count_; }

    std::array<ConvBnRelu, 4> stages;
    Conv2dLayer classify;
    int classes = 0;

private:
    int last_upsample_count_ = 0;
};

class MlaDecoder {
public:
    // Encoder layer indices consumed by the M streams: {L/M, 2L/M, ..., L}.
    static std::vector<int> selected_layers(int encoder_layers, int streams);

    MlaDecoder() = default;
    MlaDecoder(int in_channels, int streams, int classes, Rng& rng, InitMode init);

    // feature_maps are the selected layers' batched maps, shallowest first.
    Tensor forward(const std::vector<Tensor>& feature_maps, int out_h, int out_w, bool train);

    struct Stream {
        ConvBnRelu reduce;      // 1x1, C -> C/2
        ConvBnRelu aggregate;   // 3x3 after the top-down addition
        ConvBnRelu mid;         // 3x3, C/2 -> C/2
        ConvBnRelu halve;       // 3x3, C/2 -> C/4
    };

    std::vector<Stream> streams;
    Conv2dLayer classify;  // 1x1, M*C/4 -> K
    int classes = 0;
};

}  // namespace seq2seg
