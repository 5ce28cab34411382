#include "seq2seg/model.hpp"

#include <algorithm>
#include <cmath>

namespace seq2seg {

const char* decoder_kind_name(DecoderKind kind) {
    switch (kind) {
        case DecoderKind::Naive: return "naive";
        case DecoderKind::Pup: return "pup";
        case DecoderKind::Mla: return "mla";
    }
    return "?";
}

DecoderKind decoder_kind_from_name(const std::string& name) {
    if (name == "naive") return DecoderKind::Naive;
    if (name == "pup") return DecoderKind::Pup;
    if (name == "mla") return DecoderKind::Mla;
    throw ConfigError("unknown decoder variant `" + name + "` (expected naive|pup|mla)");
}

void ModelConfig::validate() const {
    encoder.validate();
    if (patch < 1) throw ConfigError("model: patch size must be >= 1");
    if (classes < 2) throw ConfigError("model: need at least 2 classes");
    if (decoder_width < 1) throw ConfigError("model: decoder width must be >= 1");
    if (crop % patch != 0) {
        throw ConfigError("model: crop " + std::to_string(crop) + " is not divisible by patch " +
                          std::to_string(patch));
    }
    if (decoder == DecoderKind::Mla) {
        MlaDecoder::selected_layers(encoder.layers, mla_streams);  // throws when invalid
    }
    for (int l : aux_layers) {
        if (l < 1 || l > encoder.layers) {
            throw ConfigError("model: aux layer " + std::to_string(l) + " outside 1.." +
                              std::to_string(encoder.layers));
        }
    }
}

std::vector<int> ModelConfig::default_aux_layers(DecoderKind kind, int encoder_layers) {
    // reference placement on the 24-layer encoder
    std::vector<int> at24;
    switch (kind) {
        case DecoderKind::Naive: at24 = {10, 15, 20}; break;
        case DecoderKind::Pup: at24 = {10, 15, 20, 24}; break;
        case DecoderKind::Mla: at24 = {6, 12, 18, 24}; break;
    }
    std::vector<int> out;
    for (int l : at24) {
        int scaled = static_cast<int>(std::lround(static_cast<double>(l) * encoder_layers / 24.0));
        scaled = std::clamp(scaled, 1, encoder_layers);
        if (out.empty() || out.back() != scaled) out.push_back(scaled);
    }
    return out;
}

namespace {
std::variant<NaiveDecoder, PupDecoder, MlaDecoder> make_decoder(const ModelConfig& cfg, Rng& rng,
                                                                InitMode init) {
    switch (cfg.decoder) {
        case DecoderKind::Naive:
            return NaiveDecoder(cfg.encoder.hidden, cfg.decoder_width, cfg.classes, rng, init);
        case DecoderKind::Pup:
            return PupDecoder(cfg.encoder.hidden, cfg.decoder_width, cfg.classes, rng, init);
        case DecoderKind::Mla:
            return MlaDecoder(cfg.encoder.hidden, cfg.mla_streams, cfg.classes, rng, init);
    }
    throw ConfigError("model: bad decoder kind");
}
}  // namespace

SegModel::SegModel(ModelConfig cfg, uint64_t seed, InitMode init) : config(std::move(cfg)) {
    // all initialization draws come from one seeded stream, so a model is a
    // pure function of (config, seed)
    config.validate();
    Rng rng(seed);
    const int grid = config.crop / config.patch;
    embed = PatchEmbed(config.patch, config.encoder.hidden, grid, grid, rng, init);
    encoder = Encoder(config.encoder, rng, init);
    decoder = make_decoder(config, rng, init);
    for (size_t i = 0; i < config.aux_layers.size(); ++i) {
        aux_heads.emplace_back(config.encoder.hidden, config.decoder_width, config.classes, rng, init);
    }
    norm_mean = Tensor::zeros({3});
    norm_std = Tensor::full({3}, 1.0f);
}

void SegModel::set_input_norm(const std::vector<float>& mean, const std::vector<float>& std_dev) {
    if (mean.size() != 3 || std_dev.size() != 3) throw ShapeError("set_input_norm: need 3 channels");
    for (float s : std_dev) {
        if (s <= 0.0f) throw Error("set_input_norm: std must be positive");
    }
    norm_mean = Tensor::from_data({3}, std::vector<float>(mean));
    norm_std = Tensor::from_data({3}, std::vector<float>(std_dev));
}

Tensor SegModel::normalize_image(const Tensor& img) const {
    if (img.rank() != 3 || img.dim(2) != 3) {
        throw ShapeError("model: expected [H,W,3] image, got " + img.shape_str());
    }
    Tensor out = Tensor::zeros(img.shape());
    const float* src = img.data();
    float* dst = out.data();
    const float* m = norm_mean.data();
    const float* s = norm_std.data();
    const size_t pixels = img.numel() / 3;
    for (size_t i = 0; i < pixels; ++i) {
        for (int c = 0; c < 3; ++c) dst[i * 3 + c] = (src[i * 3 + c] - m[c]) / s[c];
    }
    return out;
}

ForwardResult SegModel::forward(const std::vector<Tensor>& images, const ForwardOptions& opt) {
    if (images.empty()) throw ShapeError("model: empty batch");
    const int h = images[0].dim(0), w = images[0].dim(1);
    for (const auto& img : images) {
        if (img.dim(0) != h || img.dim(1) != w) {
            throw ShapeError("model: batch images must share one size");
        }
    }
    const int gh = h / config.patch, gw = w / config.patch;

    ForwardResult result;
    result.gh = gh;
    result.gw = gw;

    // which encoder layers the decoder and aux heads consume (1-based)
    std::vector<int> wanted;
    if (config.decoder == DecoderKind::Mla) {
        wanted = MlaDecoder::selected_layers(config.encoder.layers, config.mla_streams);
    } else {
        wanted = {config.encoder.layers};
    }
    std::vector<int> aux_wanted = opt.want_aux ? config.aux_layers : std::vector<int>{};

    std::vector<std::vector<Tensor>> per_image_features(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        Tensor e = embed.forward(normalize_image(images[i]));
        EncoderFeatures feats = encoder.forward(e, opt.keep_attention, opt.train ? opt.rng : nullptr);
        per_image_features[i] = std::move(feats.layers);
        if (opt.keep_attention) result.attention.push_back(std::move(feats.attention));
    }

    auto batched_layer = [&](int layer) {
        std::vector<Tensor> maps;
        maps.reserve(images.size());
        for (auto& feats : per_image_features) {
            maps.push_back(sequence_to_map(feats[static_cast<size_t>(layer - 1)], gh, gw));
        }
        return stack_maps(maps);
    };

    if (config.decoder == DecoderKind::Mla) {
        std::vector<Tensor> selected;
        selected.reserve(wanted.size());
        for (int l : wanted) selected.push_back(batched_layer(l));
        result.logits = std::get<MlaDecoder>(decoder).forward(selected, h, w, opt.train);
    } else if (config.decoder == DecoderKind::Pup) {
        auto& pup = std::get<PupDecoder>(decoder);
        result.logits = pup.forward(batched_layer(config.encoder.layers), h, w, opt.train,
                                    opt.keep_decoder_maps ? &result.decoder_maps : nullptr);
    } else {
        result.logits = std::get<NaiveDecoder>(decoder).forward(batched_layer(config.encoder.layers),
                                                                h, w, opt.train);
    }

    for (size_t i = 0; i < aux_wanted.size(); ++i) {
        result.aux_logits.push_back(
            aux_heads[i].forward(batched_layer(aux_wanted[i]), h, w, opt.train));
    }
    return result;
}

namespace {

struct Collector {
    std::vector<NamedTensor> items;

    void param(const std::string& name, const Tensor& t) { items.push_back({name, t, true}); }
    void buffer(const std::string& name, const Tensor& t) {
        if (t.defined()) items.push_back({name, t, false});
    }
    void conv(const std::string& prefix, const Conv2dLayer& c) {
        param(prefix + ".w", c.w);
        param(prefix + ".b", c.b);
    }
    void bn(const std::string& prefix, const BatchNorm2d& b) {
        param(prefix + ".g", b.gamma);
        param(prefix + ".b", b.beta);
        if (b.state.initialized) {
            buffer(prefix + ".mean", b.state.running_mean);
            buffer(prefix + ".var", b.state.running_var);
        }
    }
    void cbr(const std::string& prefix, const ConvBnRelu& c) {
        conv(prefix + ".conv", c.conv);
        bn(prefix + ".bn", c.bn);
    }
    void head(const std::string& prefix, const TwoLayerHead& h) {
        cbr(prefix + ".reduce", h.reduce);
        conv(prefix + ".classify", h.classify);
    }
};

}  // namespace

std::vector<NamedTensor> SegModel::named_tensors() {
    Collector c;
    c.param("embed.proj.w", embed.proj_w);
    c.param("embed.proj.b", embed.proj_b);
    c.param("embed.pos", embed.pos);
    for (int l = 0; l < config.encoder.layers; ++l) {
        const auto& w = encoder.weights[static_cast<size_t>(l)];
        const std::string p = "enc.layer" + std::to_string(l + 1);
        c.param(p + ".wq", w.wq);
        c.param(p + ".wk", w.wk);
        c.param(p + ".wv", w.wv);
        c.param(p + ".wo", w.wo);
        c.param(p + ".ln1.g", w.ln1_g);
        c.param(p + ".ln1.b", w.ln1_b);
        c.param(p + ".ln2.g", w.ln2_g);
        c.param(p + ".ln2.b", w.ln2_b);
        c.param(p + ".mlp1.w", w.mlp1_w);
        c.param(p + ".mlp1.b", w.mlp1_b);
        c.param(p + ".mlp2.w", w.mlp2_w);
        c.param(p + ".mlp2.b", w.mlp2_b);
    }
    if (config.encoder.final_ln) {
        c.param("enc.final_ln.g", encoder.final_g);
        c.param("enc.final_ln.b", encoder.final_b);
    }
    if (auto* naive = std::get_if<NaiveDecoder>(&decoder)) {
        c.head("dec.naive", naive->head);
    } else if (auto* pup = std::get_if<PupDecoder>(&decoder)) {
        for (int s = 0; s < 4; ++s) {
            c.cbr("dec.pup.stage" + std::to_string(s + 1), pup->stages[static_cast<size_t>(s)]);
        }
        c.conv("dec.pup.classify", pup->classify);
    } else if (auto* mla = std::get_if<MlaDecoder>(&decoder)) {
        for (size_t s = 0; s < mla->streams.size(); ++s) {
            const std::string p = "dec.mla.stream" + std::to_string(s + 1);
            c.cbr(p + ".reduce", mla->streams[s].reduce);
            c.cbr(p + ".aggregate", mla->streams[s].aggregate);
            c.cbr(p + ".mid", mla->streams[s].mid);
            c.cbr(p + ".halve", mla->streams[s].halve);
        }
        c.conv("dec.mla.classify", mla->classify);
    }
    for (size_t i = 0; i < aux_heads.size(); ++i) {
        c.head("aux.z" + std::to_string(config.aux_layers[i]), aux_heads[i]);
    }
    c.buffer("norm.mean", norm_mean);
    c.buffer("norm.std", norm_std);
    return c.items;
}

std::vector<Tensor> SegModel::parameters() {
    std::vector<Tensor> params;
    for (auto& nt : named_tensors()) {
        if (nt.trainable) params.push_back(nt.tensor);
    }
    return params;
}

void SegModel::zero_grads() {
    for (auto& p : parameters()) p.zero_grad();
}

void SegModel::save(const std::string& path) {
    std::vector<NamedTensor> tensors = named_tensors();
    const float final_ln_flag = config.encoder.final_ln ? 1.0f : 0.0f;
    Tensor arch = Tensor::from_data(
        {12},
        {1.0f,  // format version
         static_cast<float>(config.patch), static_cast<float>(config.classes),
         static_cast<float>(static_cast<int>(config.decoder)),
         static_cast<float>(config.decoder_width), static_cast<float>(config.mla_streams),
         static_cast<float>(config.encoder.layers), static_cast<float>(config.encoder.hidden),
         static_cast<float>(config.encoder.heads), static_cast<float>(config.encoder.mlp_ratio),
         final_ln_flag, static_cast<float>(config.crop)});
    tensors.push_back({"meta.arch", arch, false});
    if (!config.aux_layers.empty()) {
        std::vector<float> aux(config.aux_layers.begin(), config.aux_layers.end());
        tensors.push_back({"meta.aux_layers",
                           Tensor::from_data({static_cast<int>(aux.size())}, std::move(aux)), false});
    }
    save_checkpoint(path, tensors);
}

SegModel SegModel::load(const std::string& path) {
    auto tensors = load_checkpoint(path);
    auto meta_it = tensors.find("meta.arch");
    if (meta_it == tensors.end()) throw IoError(path + ": checkpoint has no meta.arch entry");
    const Tensor& arch = meta_it->second;
    if (arch.numel() != 12 || arch.data()[0] != 1.0f) {
        throw IoError(path + ": unsupported checkpoint layout");
    }
    ModelConfig cfg;
    cfg.patch = static_cast<int>(arch.data()[1]);
    cfg.classes = static_cast<int>(arch.data()[2]);
    cfg.decoder = static_cast<DecoderKind>(static_cast<int>(arch.data()[3]));
    cfg.decoder_width = static_cast<int>(arch.data()[4]);
    cfg.mla_streams = static_cast<int>(arch.data()[5]);
    cfg.encoder.layers = static_cast<int>(arch.data()[6]);
    cfg.encoder.hidden = static_cast<int>(arch.data()[7]);
    cfg.encoder.heads = static_cast<int>(arch.data()[8]);
    cfg.encoder.mlp_ratio = static_cast<int>(arch.data()[9]);
    cfg.encoder.final_ln = arch.data()[10] != 0.0f;
    cfg.crop = static_cast<int>(arch.data()[11]);
    if (auto it = tensors.find("meta.aux_layers"); it != tensors.end()) {
        for (size_t i = 0; i < it->second.numel(); ++i) {
            cfg.aux_layers.push_back(static_cast<int>(it->second.data()[i]));
        }
    }
    SegModel model(cfg, 0, InitMode::Zeros);

    auto copy_into = [&](const std::string& name, Tensor dst) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError(path + ": checkpoint missing tensor " + name);
        if (it->second.shape() != dst.shape()) {
            throw IoError(path + ": tensor " + name + " has shape " + it->second.shape_str() +
                          ", expected " + dst.shape_str());
        }
        std::copy(it->second.vec().begin(), it->second.vec().end(), dst.vec().begin());
    };
    for (auto& nt : model.named_tensors()) copy_into(nt.name, nt.tensor);

    // restore BN running statistics wherever the checkpoint carries them
    auto restore_bn = [&](BatchNorm2d& bn, const std::string& prefix) {
        auto mean_it = tensors.find(prefix + ".mean");
        auto var_it = tensors.find(prefix + ".var");
        if (mean_it == tensors.end() || var_it == tensors.end()) return;
        bn.state.running_mean = Tensor::from_data(mean_it->second.shape(), mean_it->second.vec());
        bn.state.running_var = Tensor::from_data(var_it->second.shape(), var_it->second.vec());
        bn.state.initialized = true;
    };
    if (auto* naive = std::get_if<NaiveDecoder>(&model.decoder)) {
        restore_bn(naive->head.reduce.bn, "dec.naive.reduce.bn");
    } else if (auto* pup = std::get_if<PupDecoder>(&model.decoder)) {
        for (int s = 0; s < 4; ++s) {
            restore_bn(pup->stages[static_cast<size_t>(s)].bn,
                       "dec.pup.stage" + std::to_string(s + 1) + ".bn");
        }
    } else if (auto* mla = std::get_if<MlaDecoder>(&model.decoder)) {
        for (size_t s = 0; s < mla->streams.size(); ++s) {
            const std::string p = "dec.mla.stream" + std::to_string(s + 1);
            restore_bn(mla->streams[s].reduce.bn, p + ".reduce.bn");
            restore_bn(mla->streams[s].aggregate.bn, p + ".aggregate.bn");
            restore_bn(mla->streams[s].mid.bn, p + ".mid.bn");
            restore_bn(mla->streams[s].halve.bn, p + ".halve.bn");
        }
    }
    for (size_t i = 0; i < model.aux_heads.size(); ++i) {
        restore_bn(model.aux_heads[i].reduce.bn,
                   "aux.z" + std::to_string(model.config.aux_layers[i]) + ".reduce.bn");
    }
    return model;
}

}  // namespace seq2seg
