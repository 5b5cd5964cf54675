#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "setpose/autodiff.hpp"
#include "setpose/errors.hpp"
#include "setpose/losses.hpp"
#include "setpose/matching.hpp"
#include "setpose/nn.hpp"
#include "setpose/rng.hpp"

namespace setpose::models {

using ad::Tensor;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Rotation estimator

struct RotEstConfig {
    int input_dim = 64;
    int hidden = 1024;
    int layers = 6;
    double dropout = 0.5;
    int output_dim = 6;

    static RotEstConfig toy() {
        RotEstConfig c;
        c.hidden = 128;
        return c;
    }

    void validate() const {
        if (input_dim <= 0 || hidden <= 0 || layers < 1 || output_dim <= 0)
            throw InvalidArgument("rotation estimator dimensions must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
    }

    json to_json() const {
        return {{"input_dim", input_dim}, {"hidden", hidden}, {"layers", layers}, {"dropout", dropout},
                {"output_dim", output_dim}};
    }
    static RotEstConfig from_json(const json& j) {
        RotEstConfig c;
        c.input_dim = j.at("input_dim").get<int>();
        c.hidden = j.at("hidden").get<int>();
        c.layers = j.at("layers").get<int>();
        c.dropout = j.at("dropout").get<double>();
        c.output_dim = j.at("output_dim").get<int>();
        c.validate();
        return c;
    }
};

/// Keypoint coordinates (normalized by image extents) to a 6D rotation.
/// Linear layers with ReLU between them, dropout after each hidden
/// activation in training mode.
template <typename T>
struct RotEst {
    RotEstConfig config;
    nn::Mlp<T> mlp;

    RotEst() = default;
    RotEst(nn::ParamStore<T>& store, const std::string& name, const RotEstConfig& cfg, RngStream& init)
        : config(cfg) {
        cfg.validate();
        std::vector<std::size_t> widths{std::size_t(cfg.input_dim)};
        for (int i = 0; i + 1 < cfg.layers; ++i) widths.push_back(std::size_t(cfg.hidden));
        widths.push_back(std::size_t(cfg.output_dim));
        mlp = nn::Mlp<T>(store, name, widths, init, cfg.dropout);
        // Start near the identity so the Gram-Schmidt map is well conditioned.
        if (cfg.output_dim == 6) {
            auto b = mlp.layers.back().b;
            auto& v = b.mutable_value();
            v[0] += T(1);
            v[4] += T(1);
        }
    }

    Tensor<T> operator()(const Tensor<T>& x, bool train = false, RngStream* rng = nullptr) const {
        if (x.cols() != std::size_t(config.input_dim))
            throw ShapeMismatch("rotation estimator expects " + std::to_string(config.input_dim) + " inputs");
        return mlp(x, train, rng);
    }
};

// ---------------------------------------------------------------------------
// Positional encoding

/// Sine/cosine encoding of an h x w grid, [h*w, d]. The first d/2 channels
/// encode the row, the rest the column; within a half, channel 2i is
/// sin(pos / 10000^(2i/half)) and 2i+1 the matching cosine.
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t h, std::size_t w, std::size_t d) {
    if (d == 0 || d % 2 != 0) throw InvalidArgument("positional encoding width must be even");
    const std::size_t half = d / 2;
    std::vector<T> v(h * w * d);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t k = 0; k < d; ++k) {
                const std::size_t j = k % half;
                const double pos = k < half ? double(r) : double(c);
                const double freq = std::pow(10000.0, -double(2 * (j / 2)) / double(half));
                v[(r * w + c) * d + k] = T(j % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
            }
    return Tensor<T>::constant(h * w, d, std::move(v));
}

// ---------------------------------------------------------------------------
// Toy set-prediction transformer

struct ToyTransformerConfig {
    int raster_h = 32;
    int raster_w = 32;
    int channels = 3;
    int patch = 4;
    int dim = 64;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int heads = 4;
    int queries = 20;
    int classes = 5;
    int head_hidden = 256;
    int ffn_hidden = 128;
    int keypoints = 32;
    bool rotation_head = true;  // RotEst on predicted keypoints for the pose term
    RotEstConfig rotest = RotEstConfig::toy();

    int tokens() const { return (raster_h / patch) * (raster_w / patch); }
    int patch_features() const { return patch * patch * channels; }

    void validate() const {
        if (raster_h <= 0 || raster_w <= 0 || channels <= 0 || patch <= 0)
            throw InvalidArgument("raster and patch sizes must be positive");
        if (raster_h % patch != 0 || raster_w % patch != 0)
            throw InvalidArgument("raster size must be divisible by the patch size");
        if (dim <= 0 || heads <= 0 || dim % heads != 0) throw InvalidArgument("embedding width must split across heads");
        if (dim % 2 != 0) throw InvalidArgument("embedding width must be even");
        if (encoder_layers < 0 || decoder_layers < 1) throw InvalidArgument("need at least one decoder layer");
        if (queries <= 0 || classes <= 0 || head_hidden <= 0 || ffn_hidden <= 0 || keypoints <= 0)
            throw InvalidArgument("transformer sizes must be positive");
        if (rotation_head) {
            rotest.validate();
            if (rotest.input_dim != 2 * keypoints)
                throw InvalidArgument("rotation head input must match the keypoint count");
        }
    }

    json to_json() const {
        return {{"raster_h", raster_h}, {"raster_w", raster_w}, {"channels", channels},
                {"patch", patch}, {"dim", dim}, {"encoder_layers", encoder_layers},
                {"decoder_layers", decoder_layers}, {"heads", heads}, {"queries", queries},
                {"classes", classes}, {"head_hidden", head_hidden}, {"ffn_hidden", ffn_hidden},
                {"keypoints", keypoints}, {"rotation_head", rotation_head}, {"rotest", rotest.to_json()}};
    }
    static ToyTransformerConfig from_json(const json& j) {
        ToyTransformerConfig c;
        c.raster_h = j.at("raster_h").get<int>();
        c.raster_w = j.at("raster_w").get<int>();
        c.channels = j.at("channels").get<int>();
        c.patch = j.at("patch").get<int>();
        c.dim = j.at("dim").get<int>();
        c.encoder_layers = j.at("encoder_layers").get<int>();
        c.decoder_layers = j.at("decoder_layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.queries = j.at("queries").get<int>();
        c.classes = j.at("classes").get<int>();
        c.head_hidden = j.at("head_hidden").get<int>();
        c.ffn_hidden = j.at("ffn_hidden").get<int>();
        c.keypoints = j.at("keypoints").get<int>();
        c.rotation_head = j.at("rotation_head").get<bool>();
        c.rotest = RotEstConfig::from_json(j.at("rotest"));
        c.validate();
        return c;
    }
};

/// Attention probabilities of one forward pass, one entry per layer.
template <typename T>
struct AttentionRecord {
    std::vector<ad::AttentionMaps<T>> encoder_self;
    std::vector<ad::AttentionMaps<T>> decoder_cross;
};

template <typename T>
struct AttentionBlock {
    nn::Linear<T> q, k, v, o;

    AttentionBlock() = default;
    AttentionBlock(nn::ParamStore<T>& s, const std::string& name, std::size_t d, RngStream& rng)
        : q(s, name + ".q", d, d, rng), k(s, name + ".k", d, d, rng), v(s, name + ".v", d, d, rng),
          o(s, name + ".o", d, d, rng) {}

    Tensor<T> operator()(const Tensor<T>& qin, const Tensor<T>& kin, const Tensor<T>& vin, std::size_t heads,
                         std::size_t batch, ad::AttentionMaps<T>* maps) const {
        return o(ad::multi_head_attention(q(qin), k(kin), v(vin), heads, batch, maps));
    }
};

template <typename T>
struct FeedForward {
    nn::Linear<T> a, b;

    FeedForward() = default;
    FeedForward(nn::ParamStore<T>& s, const std::string& name, std::size_t d, std::size_t hidden, RngStream& rng)
        : a(s, name + ".0", d, hidden, rng), b(s, name + ".1", hidden, d, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return b(ad::relu(a(x))); }
};

/// Post-norm encoder layer; positions are added to queries and keys only.
template <typename T>
struct EncoderLayer {
    AttentionBlock<T> attn;
    nn::LayerNorm<T> n1, n2;
    FeedForward<T> ff;

    EncoderLayer() = default;
    EncoderLayer(nn::ParamStore<T>& s, const std::string& name, const ToyTransformerConfig& c, RngStream& rng)
        : attn(s, name + ".attn", std::size_t(c.dim), rng), n1(s, name + ".norm1", std::size_t(c.dim)),
          n2(s, name + ".norm2", std::size_t(c.dim)),
          ff(s, name + ".ffn", std::size_t(c.dim), std::size_t(c.ffn_hidden), rng) {}

    Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& pos, std::size_t heads, std::size_t batch,
                         ad::AttentionMaps<T>* maps) const {
        auto qk = x + pos;
        auto h = n1(x + attn(qk, qk, x, heads, batch, maps));
        return n2(h + ff(h));
    }
};

/// Post-norm decoder layer: self-attention over the query slots, then
/// cross-attention into the encoder memory.
template <typename T>
struct DecoderLayer {
    AttentionBlock<T> self_attn, cross_attn;
    nn::LayerNorm<T> n1, n2, n3;
    FeedForward<T> ff;

    DecoderLayer() = default;
    DecoderLayer(nn::ParamStore<T>& s, const std::string& name, const ToyTransformerConfig& c, RngStream& rng)
        : self_attn(s, name + ".self", std::size_t(c.dim), rng), cross_attn(s, name + ".cross", std::size_t(c.dim), rng),
          n1(s, name + ".norm1", std::size_t(c.dim)), n2(s, name + ".norm2", std::size_t(c.dim)),
          n3(s, name + ".norm3", std::size_t(c.dim)),
          ff(s, name + ".ffn", std::size_t(c.dim), std::size_t(c.ffn_hidden), rng) {}

    Tensor<T> operator()(const Tensor<T>& t, const Tensor<T>& qpos, const Tensor<T>& mem, const Tensor<T>& mpos,
                         std::size_t heads, std::size_t batch, ad::AttentionMaps<T>* maps) const {
        auto qk = t + qpos;
        auto h = n1(t + self_attn(qk, qk, t, heads, batch, nullptr));
        h = n2(h + cross_attn(h + qpos, mem + mpos, mem, heads, batch, maps));
        return n3(h + ff(h));
    }
};

/// Splits a batch of [h][w][c] rasters into patch rows [B*L, p*p*c]; tokens
/// run row-major over the patch grid, features over (dy, dx, channel).
inline std::vector<float> patchify(const std::vector<const std::vector<float>*>& rasters, const ToyTransformerConfig& c) {
    const std::size_t L = std::size_t(c.tokens()), F = std::size_t(c.patch_features());
    const std::size_t gw = std::size_t(c.raster_w / c.patch);
    std::vector<float> out(rasters.size() * L * F);
    for (std::size_t b = 0; b < rasters.size(); ++b) {
        const auto& r = *rasters[b];
        if (r.size() != std::size_t(c.raster_h * c.raster_w * c.channels))
            throw ShapeMismatch("raster size does not match the model configuration");
        for (std::size_t tok = 0; tok < L; ++tok) {
            const std::size_t pr = tok / gw, pc = tok % gw;
            float* dst = out.data() + (b * L + tok) * F;
            for (int dy = 0; dy < c.patch; ++dy)
                for (int dx = 0; dx < c.patch; ++dx) {
                    const std::size_t y = pr * std::size_t(c.patch) + std::size_t(dy);
                    const std::size_t x = pc * std::size_t(c.patch) + std::size_t(dx);
                    for (int ch = 0; ch < c.channels; ++ch)
                        *dst++ = r[(y * std::size_t(c.raster_w) + x) * std::size_t(c.channels) + std::size_t(ch)];
                }
        }
    }
    return out;
}

/// Linear patch embedding, encoder, decoder with learned object queries and
/// four shared three-layer heads (class, box, translation code, keypoints).
template <typename T>
struct ToyTransformer {
    ToyTransformerConfig config;
    nn::ParamStore<T> params;
    nn::Linear<T> embed;
    std::vector<EncoderLayer<T>> encoder;
    std::vector<DecoderLayer<T>> decoder;
    Tensor<T> query_embed;  // [N, d]
    nn::Mlp<T> class_head, box_head, translation_head, keypoint_head;
    RotEst<T> rotest;
    Tensor<T> positions;  // [L, d], constant

    explicit ToyTransformer(const ToyTransformerConfig& cfg, std::uint64_t seed) : config(cfg) {
        cfg.validate();
        RngStream rng(seed, "init");
        const auto d = std::size_t(cfg.dim);
        embed = nn::Linear<T>(params, "embed", std::size_t(cfg.patch_features()), d, rng);
        for (int i = 0; i < cfg.encoder_layers; ++i)
            encoder.emplace_back(params, "encoder." + std::to_string(i), cfg, rng);
        query_embed = params.add_uniform("queries", std::size_t(cfg.queries), d, 1.0, rng);
        for (int i = 0; i < cfg.decoder_layers; ++i)
            decoder.emplace_back(params, "decoder." + std::to_string(i), cfg, rng);
        const auto hh = std::size_t(cfg.head_hidden);
        class_head = nn::Mlp<T>(params, "head.class", {d, hh, hh, std::size_t(cfg.classes + 1)}, rng);
        box_head = nn::Mlp<T>(params, "head.box", {d, hh, hh, 4}, rng);
        translation_head = nn::Mlp<T>(params, "head.translation", {d, hh, hh, 3}, rng);
        keypoint_head = nn::Mlp<T>(params, "head.keypoints", {d, hh, hh, std::size_t(2 * cfg.keypoints)}, rng);
        if (cfg.rotation_head) rotest = RotEst<T>(params, "rotest", cfg.rotest, rng);
        positions = sinusoidal_positions<T>(std::size_t(cfg.raster_h / cfg.patch), std::size_t(cfg.raster_w / cfg.patch), d);
    }

    ToyTransformer(const ToyTransformer&) = delete;
    ToyTransformer& operator=(const ToyTransformer&) = delete;

    /// Encoder output [B*L, d] from patch rows.
    Tensor<T> encode(const Tensor<T>& patches, std::size_t batch, AttentionRecord<T>* rec,
                     const Tensor<T>* pos_override = nullptr) const {
        auto x = embed(patches);
        const auto pos = pos_override ? *pos_override : ad::tile_rows(positions, batch);
        for (const auto& layer : encoder) {
            ad::AttentionMaps<T>* maps = nullptr;
            if (rec) maps = &rec->encoder_self.emplace_back();
            x = layer(x, pos, std::size_t(config.heads), batch, maps);
        }
        return x;
    }

    /// Decoder output [B*N, d]. The slots start from the query embeddings
    /// (not zeros) so the first self-attention value path gets gradient.
    Tensor<T> decode(const Tensor<T>& memory, const Tensor<T>& mem_pos, std::size_t batch,
                     AttentionRecord<T>* rec) const {
        const auto qpos = ad::tile_rows(query_embed, batch);
        auto t = qpos;
        for (const auto& layer : decoder) {
            ad::AttentionMaps<T>* maps = nullptr;
            if (rec) maps = &rec->decoder_cross.emplace_back();
            t = layer(t, qpos, memory, mem_pos, std::size_t(config.heads), batch, maps);
        }
        return t;
    }

    /// Heads applied row-wise to decoder embeddings.
    losses::SetOutputs<T> heads(const Tensor<T>& emb, std::size_t batch) const {
        losses::SetOutputs<T> out;
        out.batch = batch;
        out.queries = std::size_t(config.queries);
        out.logits = class_head(emb);
        out.boxes = ad::sigmoid(box_head(emb));
        auto tr = translation_head(emb);
        out.translation = ad::concat<T>({ad::sigmoid(ad::slice(tr, 1, 0, 2)), ad::exp(ad::slice(tr, 1, 2, 3))}, 1);
        out.keypoints = ad::sigmoid(keypoint_head(emb));
        return out;
    }

    losses::SetOutputs<T> forward(const std::vector<const std::vector<float>*>& rasters, AttentionRecord<T>* rec = nullptr) const {
        const std::size_t B = rasters.size();
        if (B == 0) throw EmptyInput("forward on an empty batch");
        const auto flat = patchify(rasters, config);
        std::vector<T> pv(flat.begin(), flat.end());
        const auto patches = Tensor<T>::constant(B * std::size_t(config.tokens()), std::size_t(config.patch_features()),
                                                 std::move(pv));
        const auto mem_pos = ad::tile_rows(positions, B);
        const auto memory = encode(patches, B, rec, &mem_pos);
        return heads(decode(memory, mem_pos, B, rec), B);
    }

    /// Maps predicted keypoint rows to 6D rotations; empty when the model has
    /// no rotation head.
    losses::RotationHead<T> rotation_head(bool train, RngStream* rng) const {
        if (!config.rotation_head) return {};
        return [this, train, rng](const Tensor<T>& kps) { return rotest(kps, train, rng); };
    }
};

/// Converts network outputs to per-sample prediction tuples for matching.
template <typename T>
std::vector<std::vector<PredictionTuple>> to_predictions(const losses::SetOutputs<T>& out) {
    const std::size_t C1 = out.logits.cols(), K2 = out.keypoints.cols();
    std::vector<std::vector<PredictionTuple>> res(out.batch);
    for (std::size_t b = 0; b < out.batch; ++b) {
        res[b].resize(out.queries);
        for (std::size_t q = 0; q < out.queries; ++q) {
            const std::size_t r = b * out.queries + q;
            auto& p = res[b][q];
            p.class_logits.resize(C1);
            for (std::size_t c = 0; c < C1; ++c) p.class_logits[c] = double(out.logits(r, c));
            p.box = {double(out.boxes(r, 0)), double(out.boxes(r, 1)), double(out.boxes(r, 2)), double(out.boxes(r, 3))};
            p.translation = {double(out.translation(r, 0)), double(out.translation(r, 1)), double(out.translation(r, 2))};
            p.keypoints.rep = K2 == 64 ? KeypointRep::IBB32 : KeypointRep::BB8;
            for (std::size_t k = 0; k < K2 / 2; ++k)
                p.keypoints.points.emplace_back(double(out.keypoints(r, 2 * k)), double(out.keypoints(r, 2 * k + 1)));
        }
    }
    return res;
}

}  // namespace setpose::models
