#pragma once

#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "seq2seg/decoders.hpp"
#include "seq2seg/encoder.hpp"
#include "seq2seg/io.hpp"
#include "seq2seg/sequentializer.hpp"

namespace seq2seg {

enum class DecoderKind { Naive, Pup, Mla };

const char* decoder_kind_name(DecoderKind kind);
DecoderKind decoder_kind_from_name(const std::string& name);

struct ModelConfig {
    EncoderConfig encoder = EncoderConfig::t_tiny();
    int patch = 16;
    int classes = 2;
    DecoderKind decoder = DecoderKind::Pup;
    int decoder_width = 256;
    int mla_streams = 4;
    std::vector<int> aux_layers;  // 1-based encoder layers with auxiliary heads
    int crop = 64;                // native grid of the learned position table

    void validate() const;

    // The published layer sets for a 24-layer encoder, rescaled in proportion
    // for other depths.
    static std::vector<int> default_aux_layers(DecoderKind kind, int encoder_layers);
};

struct ForwardOptions {
    bool train = false;
    bool want_aux = false;
    bool keep_attention = false;
    bool keep_decoder_maps = false;  // PUP per-upsample features + logits
    Rng* rng = nullptr;              // dropout source when training
};

struct ForwardResult {
    Tensor logits;                   // [N,H,W,K]
    std::vector<Tensor> aux_logits;  // one per configured aux layer
    // per image: per layer, per head attention matrices (when requested)
    std::vector<std::vector<std::vector<Tensor>>> attention;
    std::vector<Tensor> decoder_maps;
    int gh = 0, gw = 0;
};

class SegModel {
public:
    SegModel(ModelConfig cfg, uint64_t seed, InitMode init = InitMode::TruncNormal);

    // images are raw [H,W,3] values in [0,1]; all batch entries share a size
    // divisible by the patch size. Normalization happens inside.
    ForwardResult forward(const std::vector<Tensor>& images, const ForwardOptions& opt);

    // trainable parameters in a fixed order
    std::vector<Tensor> parameters();
    // parameters plus buffers (BN running stats, input normalization, metadata)
    std::vector<NamedTensor> named_tensors();

    void zero_grads();
    // drop cached derived tensors after parameter updates
    void invalidate_caches() { embed.invalidate_cache(); }

    void set_input_norm(const std::vector<float>& mean, const std::vector<float>& std_dev);

    void save(const std::string& path);
    static SegModel load(const std::string& path);

    ModelConfig config;
    PatchEmbed embed;
    Encoder encoder;
    std::variant<NaiveDecoder, PupDecoder, MlaDecoder> decoder;
    std::vector<TwoLayerHead> aux_heads;
    Tensor norm_mean, norm_std;  // [3] input normalization buffers

private:
    Tensor normalize_image(const Tensor& img) const;
};

}  // namespace seq2seg
