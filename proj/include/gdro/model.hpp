#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdro/autodiff.hpp"
#include "gdro/rng.hpp"
#include "gdro/tensor.hpp"

namespace gdro {

enum class AggregatorKind { mean, transformer };

/// Desk-scale replica of the volume pipeline: per-slice encoder, sequence
/// aggregator, classification head. Slice inputs are feature vectors; the
/// encoder is a two-layer perceptron standing in for a pretrained backbone.
struct ModelConfig {
    int input_dim = 16;
    int embed_dim = 32;
    int slices = 16;
    int num_classes = 2;
    AggregatorKind aggregator = AggregatorKind::transformer;
    int layers = 2;
    int heads = 4;
    int ff_dim = 0;          // 0 -> 4 * embed_dim
    double dropout_p = 0.3;
    int encoder_hidden = 0;  // 0 -> 2 * embed_dim
    bool positional_encoding = false;  // sinusoidal over the slice axis, off by default

    int ff() const { return ff_dim > 0 ? ff_dim : 4 * embed_dim; }
    int hidden() const { return encoder_hidden > 0 ? encoder_hidden : 2 * embed_dim; }

    void validate() const {
        if (input_dim <= 0) throw std::invalid_argument("model.input_dim must be positive");
        if (embed_dim <= 0) throw std::invalid_argument("model.embed_dim must be positive");
        if (slices <= 0) throw std::invalid_argument("model.slices must be positive");
        if (num_classes != 2 && num_classes != 4) throw std::invalid_argument("model.num_classes must be 2 or 4");
        if (layers <= 0) throw std::invalid_argument("model.layers must be positive");
        if (heads <= 0) throw std::invalid_argument("model.heads must be positive");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::invalid_argument("model.dropout_p must be in [0,1)");
        if (aggregator == AggregatorKind::transformer && embed_dim % heads != 0) {
            throw std::invalid_argument("model.embed_dim must be divisible by model.heads");
        }
    }
};

/// One training batch: b volumes of S slice feature vectors plus labels and
/// group ids.
struct VolumeBatch {
    Tensor features;  // [b, S, D_in]
    std::vector<int> labels;
    std::vector<int> groups;

    int size() const { return static_cast<int>(labels.size()); }

    void validate() const {
        if (features.rank() != 3) throw std::invalid_argument("batch features must be [b,S,D_in]");
        if (features.extent(0) != static_cast<int>(labels.size()) ||
            features.extent(0) != static_cast<int>(groups.size())) {
            throw std::invalid_argument("batch features/labels/groups disagree on batch size");
        }
    }
};

struct ModelParams {
    ModelConfig config;
    std::uint64_t seed = 0;
    ParamSet params;
};

namespace detail {

inline Tensor xavier_uniform(Rng& rng, int fan_in, int fan_out, Shape shape) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
    return t;
}

}  // namespace detail

/// Fresh parameters, fully determined by (config, seed): weights Xavier
/// uniform, biases zero, layer-norm gains one.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams m;
    m.config = config;
    m.seed = seed;
    Rng rng(mix64(seed, 0x696e6974ULL));  // "init" stream

    const int d = config.embed_dim;
    const int h = config.hidden();
    auto& ps = m.params;

    ps.add("encoder.w1", detail::xavier_uniform(rng, config.input_dim, h, {config.input_dim, h}));
    ps.add("encoder.b1", Tensor(Shape{h}));
    ps.add("encoder.w2", detail::xavier_uniform(rng, h, d, {h, d}));
    ps.add("encoder.b2", Tensor(Shape{d}));

    if (config.aggregator == AggregatorKind::transformer) {
        const int ff = config.ff();
        for (int l = 0; l < config.layers; ++l) {
            const std::string base = "layer" + std::to_string(l) + ".";
            for (const char* proj : {"wq", "wk", "wv", "wo"}) {
                ps.add(base + "attn." + proj, detail::xavier_uniform(rng, d, d, {d, d}));
            }
            for (const char* proj : {"bq", "bk", "bv", "bo"}) {
                ps.add(base + "attn." + proj, Tensor(Shape{d}));
            }
            ps.add(base + "ln1.gain", Tensor::full({d}, 1.0));
            ps.add(base + "ln1.bias", Tensor(Shape{d}));
            ps.add(base + "ffn.w1", detail::xavier_uniform(rng, d, ff, {d, ff}));
            ps.add(base + "ffn.b1", Tensor(Shape{ff}));
            ps.add(base + "ffn.w2", detail::xavier_uniform(rng, ff, d, {ff, d}));
            ps.add(base + "ffn.b2", Tensor(Shape{d}));
            ps.add(base + "ln2.gain", Tensor::full({d}, 1.0));
            ps.add(base + "ln2.bias", Tensor(Shape{d}));
        }
    }

    ps.add("head.ln.gain", Tensor::full({d}, 1.0));
    ps.add("head.ln.bias", Tensor(Shape{d}));
    ps.add("head.w", detail::xavier_uniform(rng, d, config.num_classes, {d, config.num_classes}));
    ps.add("head.b", Tensor(Shape{config.num_classes}));
    return m;
}

inline std::int64_t count_params(const ModelParams& m) { return m.params.scalar_count(); }

namespace detail {

inline Value linear(Tape& tape, ModelParams& m, Value x, const std::string& w, const std::string& b) {
    return tape.add_row_vec(tape.matmul(x, tape.param(m.params.at(w))), tape.param(m.params.at(b)));
}

inline Tensor sinusoidal_encoding(int slices, int d) {
    Tensor pe(Shape{slices, d});
    for (int s = 0; s < slices; ++s) {
        for (int j = 0; j < d; ++j) {
            const double rate = std::pow(10000.0, -2.0 * (j / 2) / static_cast<double>(d));
            const double angle = s * rate;
            pe[static_cast<std::int64_t>(s) * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

inline Tensor dropout_mask_tensor(Rng& rng, const Shape& shape, double p) {
    Tensor mask(shape);
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform01() < p ? 0.0 : keep_scale;
    return mask;
}

// One pre-norm encoder layer: x += MHSA(LN1(x)); x += FFN(LN2(x)).
inline Value transformer_layer(Tape& tape, ModelParams& m, Value x, int layer, int b) {
    const ModelConfig& cfg = m.config;
    const int d = cfg.embed_dim;
    const int S = cfg.slices;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const std::string base = "layer" + std::to_string(layer) + ".";

    Value norm1 = tape.layer_norm(x, tape.param(m.params.at(base + "ln1.gain")),
                                  tape.param(m.params.at(base + "ln1.bias")));
    Value flat = tape.reshape(norm1, {b * S, d});

    auto split_heads = [&](Value v) {
        return tape.permute(tape.reshape(v, {b, S, heads, dh}), {0, 2, 1, 3});  // [b,h,S,dh]
    };
    Value q = split_heads(linear(tape, m, flat, base + "attn.wq", base + "attn.bq"));
    Value k = split_heads(linear(tape, m, flat, base + "attn.wk", base + "attn.bk"));
    Value v = split_heads(linear(tape, m, flat, base + "attn.wv", base + "attn.bv"));

    Value scores = tape.affine(tape.matmul(q, tape.permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
    Value attn = tape.softmax(scores);               // [b,h,S,S]
    Value ctx = tape.matmul(attn, v);                // [b,h,S,dh]
    Value merged = tape.reshape(tape.permute(ctx, {0, 2, 1, 3}), {b * S, d});
    Value proj = linear(tape, m, merged, base + "attn.wo", base + "attn.bo");
    x = tape.add(x, tape.reshape(proj, {b, S, d}));

    Value norm2 = tape.layer_norm(x, tape.param(m.params.at(base + "ln2.gain")),
                                  tape.param(m.params.at(base + "ln2.bias")));
    Value hidden = tape.relu(linear(tape, m, tape.reshape(norm2, {b * S, d}), base + "ffn.w1", base + "ffn.b1"));
    Value out = linear(tape, m, hidden, base + "ffn.w2", base + "ffn.b2");
    return tape.add(x, tape.reshape(out, {b, S, d}));
}

}  // namespace detail

/// Shared two-layer perceptron applied to every slice independently:
/// [b,S,D_in] -> [b,S,d].
inline Value encode_slices(Tape& tape, ModelParams& m, const Tensor& features) {
    const ModelConfig& cfg = m.config;
    if (features.rank() != 3 || features.extent(1) != cfg.slices || features.extent(2) != cfg.input_dim) {
        throw std::invalid_argument("encode_slices: expected [b," + std::to_string(cfg.slices) + "," +
                                    std::to_string(cfg.input_dim) + "], got " + shape_str(features.shape()));
    }
    const int b = features.extent(0);
    Value x = tape.reshape(tape.constant(features), {b * cfg.slices, cfg.input_dim});
    Value hidden = tape.relu(detail::linear(tape, m, x, "encoder.w1", "encoder.b1"));
    Value out = detail::linear(tape, m, hidden, "encoder.w2", "encoder.b2");
    return tape.reshape(out, {b, cfg.slices, cfg.embed_dim});
}

/// Sequence aggregation to one vector per volume: plain mean over slices, or
/// the transformer encoder stack followed by mean pooling. No attention
/// masks; all S slices are always valid.
inline Value aggregate(Tape& tape, ModelParams& m, Value embeddings, bool /*train_mode*/ = false,
                       Rng* /*rng*/ = nullptr) {
    const ModelConfig& cfg = m.config;
    const Tensor& e = tape.value(embeddings);
    if (e.rank() != 3 || e.extent(1) != cfg.slices || e.extent(2) != cfg.embed_dim) {
        throw std::invalid_argument("aggregate: expected [b," + std::to_string(cfg.slices) + "," +
                                    std::to_string(cfg.embed_dim) + "], got " + shape_str(e.shape()));
    }
    const int b = e.extent(0);
    Value x = embeddings;
    if (cfg.aggregator == AggregatorKind::transformer) {
        if (cfg.positional_encoding) {
            Tensor pe = detail::sinusoidal_encoding(cfg.slices, cfg.embed_dim);
            Tensor tiled(Shape{b, cfg.slices, cfg.embed_dim});
            for (int i = 0; i < b; ++i) {
                std::copy(pe.raw().begin(), pe.raw().end(), tiled.raw().begin() + static_cast<std::int64_t>(i) * pe.numel());
            }
            x = tape.add(x, tape.constant(std::move(tiled)));
        }
        for (int l = 0; l < cfg.layers; ++l) x = detail::transformer_layer(tape, m, x, l, b);
    }
    return tape.mean_axis(x, 1);  // [b, d]
}

/// Classification head: LayerNorm -> Dropout (train mode only) -> linear.
/// Evaluation mode never builds a dropout node, so inference is
/// deterministic by construction.
inline Value classify(Tape& tape, ModelParams& m, Value z, bool train_mode = false, Rng* rng = nullptr) {
    const ModelConfig& cfg = m.config;
    Value x = tape.layer_norm(z, tape.param(m.params.at("head.ln.gain")), tape.param(m.params.at("head.ln.bias")));
    if (train_mode && cfg.dropout_p > 0.0) {
        if (rng == nullptr) throw std::invalid_argument("classify: train mode with dropout needs an rng");
        x = tape.dropout_mask(x, detail::dropout_mask_tensor(*rng, tape.value(x).shape(), cfg.dropout_p));
    }
    return detail::linear(tape, m, x, "head.w", "head.b");
}

/// Full pipeline: encode -> aggregate -> classify. Returns [b, num_classes].
inline Value forward(Tape& tape, ModelParams& m, const Tensor& features, bool train_mode = false, Rng* rng = nullptr) {
    Value emb = encode_slices(tape, m, features);
    Value z = aggregate(tape, m, emb, train_mode, rng);
    return classify(tape, m, z, train_mode, rng);
}

}  // namespace gdro
