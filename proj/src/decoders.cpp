#include "seq2seg/decoders.hpp"

namespace seq2seg {

Tensor sequence_to_map(const Tensor& z, int gh, int gw) {
    if (z.rank() != 2) throw ShapeError("sequence_to_map: expected [L,C], got " + z.shape_str());
    if (gh * gw != z.dim(0)) {
        throw ShapeError("sequence_to_map: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                         " does not cover sequence of length " + std::to_string(z.dim(0)));
    }
    return reshape(z, {gh, gw, z.dim(1)});
}

Tensor map_to_sequence(const Tensor& map) {
    if (map.rank() != 3) throw ShapeError("map_to_sequence: expected [h,w,C], got " + map.shape_str());
    return reshape(map, {map.dim(0) * map.dim(1), map.dim(2)});
}

Conv2dLayer::Conv2dLayer(int kernel, int cin, int cout, Rng& rng, InitMode init) {
    if (init == InitMode::TruncNormal) {
        w = Tensor::trunc_normal({kernel, kernel, cin, cout}, rng, 0.02f, true);
    } else {
        w = Tensor::zeros({kernel, kernel, cin, cout}, true);
    }
    b = Tensor::zeros({cout}, true);
    pad = kernel / 2;  // 3x3 stride-1 preserves spatial size
}

BatchNorm2d::BatchNorm2d(int channels) {
    gamma = Tensor::full({channels}, 1.0f, true);
    beta = Tensor::zeros({channels}, true);
}

ConvBnRelu::ConvBnRelu(int kernel, int cin, int cout, Rng& rng, InitMode init)
    : conv(kernel, cin, cout, rng, init), bn(cout) {}

TwoLayerHead::TwoLayerHead(int cin, int width, int classes, Rng& rng, InitMode init)
    : reduce(1, cin, width, rng, init), classify(1, width, classes, rng, init) {}

Tensor TwoLayerHead::forward(const Tensor& x, int out_h, int out_w, bool train) {
    Tensor logits = classify.forward(reduce.forward(x, train));
    return bilinear_resize(logits, out_h, out_w);
}

NaiveDecoder::NaiveDecoder(int in_channels, int width, int classes_, Rng& rng, InitMode init)
    : head(in_channels, width, classes_, rng, init), classes(classes_) {}

Tensor NaiveDecoder::forward(const Tensor& feature_map, int out_h, int out_w, bool train) {
    return head.forward(feature_map, out_h, out_w, train);
}

PupDecoder::PupDecoder(int in_channels, int width, int classes_, Rng& rng, InitMode init)
    : classes(classes_) {
    stages[0] = ConvBnRelu(3, in_channels, width, rng, init);
    for (int s = 1; s < 4; ++s) stages[static_cast<size_t>(s)] = ConvBnRelu(3, width, width, rng, init);
    classify = Conv2dLayer(1, width, classes_, rng, init);
}

Tensor PupDecoder::forward(const Tensor& feature_map, int out_h, int out_w, bool train,
                           std::vector<Tensor>* stage_maps) {
    if (feature_map.dim(1) * 16 != out_h || feature_map.dim(2) * 16 != out_w) {
        throw ShapeError("pup_decode: map " + feature_map.shape_str() +
                         " cannot reach " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " with four 2x upsamples");
    }
    last_upsample_count_ = 0;
    Tensor x = feature_map;
    for (auto& stage : stages) {
        x = stage.forward(x, train);
        x = bilinear_resize(x, x.dim(1) * 2, x.dim(2) * 2);
        ++last_upsample_count_;
        if (stage_maps) stage_maps->push_back(x);
    }
    // the paper's progressive design reaches full resolution in exactly 4 steps
    if (last_upsample_count_ != 4 || x.dim(1) != out_h || x.dim(2) != out_w) {
        throw Error("pup_decode: upsample count invariant violated");
    }
    Tensor logits = classify.forward(x);
    if (stage_maps) stage_maps->push_back(logits);
    return logits;
}

std::vector<int> MlaDecoder::selected_layers(int encoder_layers, int streams) {
    if (streams < 1 || encoder_layers % streams != 0) {
        throw ConfigError("mla_decode: encoder depth " + std::to_string(encoder_layers) +
                          " is not divisible by stream count " + std::to_string(streams));
    }
    std::vector<int> picks;
    const int step = encoder_layers / streams;
    for (int l = step; l <= encoder_layers; l += step) picks.push_back(l);
    return picks;
}

MlaDecoder::MlaDecoder(int in_channels, int stream_count, int classes_, Rng& rng, InitMode init)
    : classes(classes_) {
    if (in_channels % 4 != 0) {
        throw ConfigError("mla_decode: hidden size " + std::to_string(in_channels) +
                          " must be divisible by 4 (channels are halved twice)");
    }
    const int half = in_channels / 2;
    const int quarter = in_channels / 4;
    streams.resize(static_cast<size_t>(stream_count));
    for (auto& s : streams) {
        s.reduce = ConvBnRelu(1, in_channels, half, rng, init);
        s.aggregate = ConvBnRelu(3, half, half, rng, init);
        s.mid = ConvBnRelu(3, half, half, rng, init);
        s.halve = ConvBnRelu(3, half, quarter, rng, init);
    }
    classify = Conv2dLayer(1, quarter * stream_count, classes_, rng, init);
}

Tensor MlaDecoder::forward(const std::vector<Tensor>& feature_maps, int out_h, int out_w, bool train) {
    if (feature_maps.size() != streams.size()) {
        throw ShapeError("mla_decode: got " + std::to_string(feature_maps.size()) + " maps for " +
                         std::to_string(streams.size()) + " streams");
    }
    const int m = static_cast<int>(streams.size());
    // first layer of every stream, then top-down aggregation: the running sum
    // flows from the deepest stream toward the shallowest
    std::vector<Tensor> reduced(static_cast<size_t>(m));
    for (int j = 0; j < m; ++j) {
        reduced[static_cast<size_t>(j)] =
            streams[static_cast<size_t>(j)].reduce.forward(feature_maps[static_cast<size_t>(j)], train);
    }
    std::vector<Tensor> aggregated(static_cast<size_t>(m));
    aggregated[static_cast<size_t>(m - 1)] = reduced[static_cast<size_t>(m - 1)];
    for (int j = m - 2; j >= 0; --j) {
        aggregated[static_cast<size_t>(j)] =
            add(reduced[static_cast<size_t>(j)], aggregated[static_cast<size_t>(j + 1)]);
    }
    std::vector<Tensor> outputs;
    outputs.reserve(static_cast<size_t>(m));
    for (int j = 0; j < m; ++j) {
        auto& s = streams[static_cast<size_t>(j)];
        Tensor x = s.aggregate.forward(aggregated[static_cast<size_t>(j)], train);
        x = s.mid.forward(x, train);
        x = s.halve.forward(x, train);
        x = bilinear_resize(x, x.dim(1) * 4, x.dim(2) * 4);
        outputs.push_back(x);
    }
    Tensor fused = concat_channels(outputs);
    Tensor logits = classify.forward(fused);
    return bilinear_resize(logits, out_h, out_w);
}

}  // namespace seq2seg
