#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hnseg/nn3d.hpp"
#include "hnseg/tensor.hpp"

namespace hnseg {

// ViT-B16 backbone by default: 12 layers, 768-dim embeddings, 16^3 patches,
// skip taps at {L/4, L/2, 3L/4, L} plus the raw input.
struct UnetrConfig {
    int64_t img_size = 144;
    int64_t patch_size = 16;
    int64_t embed_dim = 768;
    int64_t num_layers = 12;
    int64_t num_heads = 12;
    int64_t mlp_dim = 3072;
    int64_t in_channels = 2;
    int64_t out_channels = 1;
    int64_t base_features = 16;
    std::vector<int64_t> skip_layers;  // empty -> {L/4, L/2, 3L/4, L}
    double dropout = 0.0;
    uint64_t seed = 0;

    void validate() const;
    std::vector<int64_t> skips() const;
    int64_t grid_per_axis() const { return img_size / patch_size; }
    int64_t num_tokens() const {
        int64_t g = grid_per_axis();
        return g * g * g;
    }
    // upsampling stages from token grid back to img resolution: log2(patch)
    int64_t num_stages() const;
    // decoder width at stage s in 1..S: F * 2^(S-s)
    int64_t stage_width(int64_t s) const;

    // equality on the effective architecture: implicit and materialized
    // default skip taps compare equal
    bool operator==(const UnetrConfig& o) const {
        return img_size == o.img_size && patch_size == o.patch_size &&
               embed_dim == o.embed_dim && num_layers == o.num_layers &&
               num_heads == o.num_heads && mlp_dim == o.mlp_dim &&
               in_channels == o.in_channels && out_channels == o.out_channels &&
               base_features == o.base_features && skips() == o.skips() &&
               dropout == o.dropout && seed == o.seed;
    }
};

template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool decay = true;  // weight decay applies; off for norm gains/biases and pos embeddings
};

template <typename T>
struct ConvBlockParams {
    Tensor<T> w, b;        // conv kernel + bias
    Tensor<T> gain, bias;  // instance norm
};

template <typename T>
struct DeconvParams {
    Tensor<T> w, b;
};

template <typename T>
struct VitLayerParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct SkipChainStage {
    DeconvParams<T> deconv;
    ConvBlockParams<T> conv;
};

template <typename T>
struct UpStageParams {
    DeconvParams<T> deconv;
    ConvBlockParams<T> conv1, conv2;
};

template <typename T>
struct UnetrParams {
    UnetrConfig cfg;
    Tensor<T> patch_w, patch_b, pos_embed;
    std::vector<VitLayerParams<T>> layers;
    // decoder: one processed-skip chain per upsampling stage except the last,
    // which concatenates the full-resolution z0 block instead
    ConvBlockParams<T> z0_block;
    std::vector<std::vector<SkipChainStage<T>>> skip_chains;
    std::vector<UpStageParams<T>> up_stages;
    Tensor<T> head_w, head_b;

    std::vector<ParamEntry<T>> entries() const;
    int64_t parameter_count() const;
    void set_requires_grad(bool on);
    void zero_grads();
};

template <typename T>
struct EncoderOutput {
    Tensor<T> z0;                 // the input volume [C, img^3]
    std::vector<Tensor<T>> taps;  // token grids [E,G,G,G], one per skip layer
};

template <typename T>
UnetrParams<T> init_params(const UnetrConfig& cfg, uint64_t seed);

template <typename T>
Tensor<T> patchify_embed(Tape<T>& tape, const Tensor<T>& x, const UnetrParams<T>& p);

template <typename T>
Tensor<T> vit_layer(Tape<T>& tape, const Tensor<T>& tokens, const VitLayerParams<T>& lp,
                    int64_t num_heads, double dropout = 0.0, CounterRng* drop_rng = nullptr);

template <typename T>
EncoderOutput<T> encoder_forward(Tape<T>& tape, const Tensor<T>& x, const UnetrParams<T>& p,
                                 CounterRng* drop_rng = nullptr);

template <typename T>
Tensor<T> decoder_forward(Tape<T>& tape, const EncoderOutput<T>& enc, const UnetrParams<T>& p);

template <typename T>
Tensor<T> unetr_forward(Tape<T>& tape, const Tensor<T>& x, const UnetrParams<T>& p,
                        CounterRng* drop_rng = nullptr);

// sigmoid over the single-channel logits, outside the tape
template <typename T>
Tensor<T> predict(const Tensor<T>& x, const UnetrParams<T>& p);

// tokens [Nt,E] -> [E,G,G,G] honoring the x-fastest token order
template <typename T>
Tensor<T> tokens_to_grid(Tape<T>& tape, const Tensor<T>& tokens, int64_t g);

// ---------------------------------------------------------------------------
// implementation

inline int64_t UnetrConfig::num_stages() const {
    int64_t s = 0, p = patch_size;
    while (p > 1) {
        p >>= 1;
        ++s;
    }
    return s;
}

inline int64_t UnetrConfig::stage_width(int64_t s) const {
    return base_features * (int64_t(1) << (num_stages() - s));
}

inline std::vector<int64_t> UnetrConfig::skips() const {
    if (!skip_layers.empty()) return skip_layers;
    return {num_layers / 4, num_layers / 2, 3 * num_layers / 4, num_layers};
}

inline void UnetrConfig::validate() const {
    auto fail = [](const std::string& m) {
        throw TensorError(TensorError::Code::BadArgument, "UnetrConfig: " + m);
    };
    if (img_size < 1 || patch_size < 2) fail("img/patch size");
    if ((patch_size & (patch_size - 1)) != 0) fail("patch size must be a power of two");
    if (img_size % patch_size != 0) fail("img_size not divisible by patch_size");
    if (num_layers % 4 != 0) fail("num_layers must be divisible by 4");
    if (embed_dim % num_heads != 0) fail("embed_dim not divisible by num_heads");
    if (in_channels < 1 || out_channels < 1 || base_features < 1) fail("channel counts");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0,1)");
    auto sk = skips();
    for (size_t i = 0; i < sk.size(); ++i) {
        if (sk[i] < 1 || sk[i] > num_layers) fail("skip layer out of range");
        if (i > 0 && sk[i] <= sk[i - 1]) fail("skip layers must be strictly increasing");
    }
    if (sk.back() != num_layers) fail("last skip tap must be the final layer");
    if (int64_t(sk.size()) < num_stages()) fail("need at least num_stages skip taps");
}

namespace detail {

template <typename T>
Tensor<T> trunc_normal_tensor(std::vector<int64_t> shape, CounterRng& rng, double std_dev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    for (int64_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = T(rng.truncated_normal(std_dev));
    }
    return t;
}

template <typename T>
Tensor<T> fan_in_uniform_tensor(std::vector<int64_t> shape, CounterRng& rng, int64_t fan_in) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = T(rng.uniform(-bound, bound));
    }
    return t;
}

}  // namespace detail

template <typename T>
UnetrParams<T> init_params(const UnetrConfig& cfg, uint64_t seed) {
    cfg.validate();
    UnetrParams<T> p;
    p.cfg = cfg;
    uint64_t stream = 0;
    auto rng = [&]() { return CounterRng(seed, ++stream); };

    const int64_t E = cfg.embed_dim;
    const int64_t D = cfg.in_channels * cfg.patch_size * cfg.patch_size * cfg.patch_size;
    auto r0 = rng();
    p.patch_w = detail::trunc_normal_tensor<T>({D, E}, r0, 0.02);
    p.patch_b = Tensor<T>::zeros({E}, true);
    p.pos_embed = Tensor<T>::zeros({cfg.num_tokens(), E}, true);

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        VitLayerParams<T> lp;
        lp.ln1_g = Tensor<T>::full({E}, T(1), true);
        lp.ln1_b = Tensor<T>::zeros({E}, true);
        auto rq = rng(); lp.wq = detail::trunc_normal_tensor<T>({E, E}, rq, 0.02);
        lp.bq = Tensor<T>::zeros({E}, true);
        auto rk = rng(); lp.wk = detail::trunc_normal_tensor<T>({E, E}, rk, 0.02);
        lp.bk = Tensor<T>::zeros({E}, true);
        auto rv = rng(); lp.wv = detail::trunc_normal_tensor<T>({E, E}, rv, 0.02);
        lp.bv = Tensor<T>::zeros({E}, true);
        auto ro = rng(); lp.wo = detail::trunc_normal_tensor<T>({E, E}, ro, 0.02);
        lp.bo = Tensor<T>::zeros({E}, true);
        lp.ln2_g = Tensor<T>::full({E}, T(1), true);
        lp.ln2_b = Tensor<T>::zeros({E}, true);
        auto r1 = rng(); lp.mlp_w1 = detail::trunc_normal_tensor<T>({E, cfg.mlp_dim}, r1, 0.02);
        lp.mlp_b1 = Tensor<T>::zeros({cfg.mlp_dim}, true);
        auto r2 = rng(); lp.mlp_w2 = detail::trunc_normal_tensor<T>({cfg.mlp_dim, E}, r2, 0.02);
        lp.mlp_b2 = Tensor<T>::zeros({E}, true);
        p.layers.push_back(std::move(lp));
    }

    auto conv_block = [&](int64_t ci, int64_t co, int64_t k) {
        ConvBlockParams<T> cb;
        auto r = rng();
        cb.w = detail::fan_in_uniform_tensor<T>({co, ci, k, k, k}, r, ci * k * k * k);
        cb.b = Tensor<T>::zeros({co}, true);
        cb.gain = Tensor<T>::full({co}, T(1), true);
        cb.bias = Tensor<T>::zeros({co}, true);
        return cb;
    };
    auto deconv = [&](int64_t ci, int64_t co) {
        DeconvParams<T> d;
        auto r = rng();
        d.w = detail::fan_in_uniform_tensor<T>({ci, co, 2, 2, 2}, r, ci * 8);
        d.b = Tensor<T>::zeros({co}, true);
        return d;
    };

    const int64_t S = cfg.num_stages();
    p.z0_block = conv_block(cfg.in_channels, cfg.stage_width(S), 3);

    // chain for stage s runs s deconv+conv steps from the token grid
    for (int64_t s = 1; s < S; ++s) {
        std::vector<SkipChainStage<T>> chain;
        int64_t prev = E;
        for (int64_t j = 1; j <= s; ++j) {
            SkipChainStage<T> st;
            st.deconv = deconv(prev, cfg.stage_width(j));
            st.conv = conv_block(cfg.stage_width(j), cfg.stage_width(j), 3);
            prev = cfg.stage_width(j);
            chain.push_back(std::move(st));
        }
        p.skip_chains.push_back(std::move(chain));
    }

    int64_t prev = E;
    for (int64_t s = 1; s <= S; ++s) {
        UpStageParams<T> st;
        const int64_t w = cfg.stage_width(s);
        st.deconv = deconv(prev, w);
        st.conv1 = conv_block(2 * w, w, 3);
        st.conv2 = conv_block(w, w, 3);
        prev = w;
        p.up_stages.push_back(std::move(st));
    }

    auto rh = rng();
    p.head_w = detail::fan_in_uniform_tensor<T>(
        {cfg.out_channels, cfg.stage_width(S), 1, 1, 1}, rh, cfg.stage_width(S));
    p.head_b = Tensor<T>::zeros({cfg.out_channels}, true);
    return p;
}

template <typename T>
std::vector<ParamEntry<T>> UnetrParams<T>::entries() const {
    std::vector<ParamEntry<T>> out;
    auto put = [&](const std::string& name, const Tensor<T>& t, bool decay) {
        out.push_back({name, t, decay});
    };
    put("enc.patch.w", patch_w, true);
    put("enc.patch.b", patch_b, true);
    put("enc.pos", pos_embed, false);
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& lp = layers[l];
        const std::string pre = "enc.l" + std::to_string(l) + ".";
        put(pre + "ln1.g", lp.ln1_g, false);
        put(pre + "ln1.b", lp.ln1_b, false);
        put(pre + "attn.q.w", lp.wq, true);
        put(pre + "attn.q.b", lp.bq, true);
        put(pre + "attn.k.w", lp.wk, true);
        put(pre + "attn.k.b", lp.bk, true);
        put(pre + "attn.v.w", lp.wv, true);
        put(pre + "attn.v.b", lp.bv, true);
        put(pre + "attn.o.w", lp.wo, true);
        put(pre + "attn.o.b", lp.bo, true);
        put(pre + "ln2.g", lp.ln2_g, false);
        put(pre + "ln2.b", lp.ln2_b, false);
        put(pre + "mlp.w1", lp.mlp_w1, true);
        put(pre + "mlp.b1", lp.mlp_b1, true);
        put(pre + "mlp.w2", lp.mlp_w2, true);
        put(pre + "mlp.b2", lp.mlp_b2, true);
    }
    auto put_block = [&](const std::string& pre, const ConvBlockParams<T>& cb) {
        put(pre + ".w", cb.w, true);
        put(pre + ".b", cb.b, true);
        put(pre + ".in.g", cb.gain, false);
        put(pre + ".in.b", cb.bias, false);
    };
    put_block("dec.z0", z0_block);
    for (size_t c = 0; c < skip_chains.size(); ++c) {
        for (size_t j = 0; j < skip_chains[c].size(); ++j) {
            const std::string pre =
                "dec.skip" + std::to_string(c) + ".s" + std::to_string(j);
            put(pre + ".deconv.w", skip_chains[c][j].deconv.w, true);
            put(pre + ".deconv.b", skip_chains[c][j].deconv.b, true);
            put_block(pre + ".conv", skip_chains[c][j].conv);
        }
    }
    for (size_t s = 0; s < up_stages.size(); ++s) {
        const std::string pre = "dec.up" + std::to_string(s);
        put(pre + ".deconv.w", up_stages[s].deconv.w, true);
        put(pre + ".deconv.b", up_stages[s].deconv.b, true);
        put_block(pre + ".conv1", up_stages[s].conv1);
        put_block(pre + ".conv2", up_stages[s].conv2);
    }
    put("head.w", head_w, true);
    put("head.b", head_b, true);
    return out;
}

template <typename T>
int64_t UnetrParams<T>::parameter_count() const {
    int64_t n = 0;
    for (const auto& e : entries()) n += e.tensor.numel();
    return n;
}

template <typename T>
void UnetrParams<T>::set_requires_grad(bool on) {
    for (auto& e : entries()) {
        Tensor<T> t = e.tensor;
        t.set_requires_grad(on);
    }
}

template <typename T>
void UnetrParams<T>::zero_grads() {
    for (auto& e : entries()) {
        Tensor<T> t = e.tensor;
        t.zero_grad();
    }
}

template <typename T>
Tensor<T> patchify_embed(Tape<T>& tape, const Tensor<T>& x, const UnetrParams<T>& p) {
    const auto& cfg = p.cfg;
    detail::check(x.rank() == 4 && x.dim(0) == cfg.in_channels && x.dim(1) == cfg.img_size &&
                      x.dim(2) == cfg.img_size && x.dim(3) == cfg.img_size,
                  "patchify_embed: input shape does not match config");
    Tensor<T> patches = extract_patches(tape, x, cfg.patch_size);
    Tensor<T> tokens = linear(tape, patches, p.patch_w, p.patch_b);
    return add(tape, tokens, p.pos_embed);
}

namespace detail {

// inverted dropout as a constant mask multiply; the mask is drawn from the
// caller's counter stream so fixed keys give fixed masks
template <typename T>
Tensor<T> apply_dropout(Tape<T>& tape, const Tensor<T>& x, double rate, CounterRng* rng) {
    if (rate <= 0.0 || rng == nullptr || !tape.recording()) return x;
    Tensor<T> mask = Tensor<T>::zeros(x.shape());
    const T keep = T(1.0 - rate);
    for (int64_t i = 0; i < mask.numel(); ++i) {
        mask.data()[i] = rng->uniform() < rate ? T(0) : T(1) / keep;
    }
    return mul(tape, x, mask);
}

}  // namespace detail

template <typename T>
Tensor<T> vit_layer(Tape<T>& tape, const Tensor<T>& tokens, const VitLayerParams<T>& lp,
                    int64_t num_heads, double dropout, CounterRng* drop_rng) {
    const int64_t Nt = tokens.dim(0), E = tokens.dim(1);
    detail::check(E % num_heads == 0, "vit_layer: embed dim not divisible by heads");
    const int64_t dh = E / num_heads;

    // pre-norm residual attention
    Tensor<T> h = layer_norm(tape, tokens, lp.ln1_g, lp.ln1_b);
    Tensor<T> q = linear(tape, h, lp.wq, lp.bq);
    Tensor<T> k = linear(tape, h, lp.wk, lp.bk);
    Tensor<T> v = linear(tape, h, lp.wv, lp.bv);
    q = permute(tape, reshape(tape, q, {Nt, num_heads, dh}), {1, 0, 2});
    k = permute(tape, reshape(tape, k, {Nt, num_heads, dh}), {1, 0, 2});
    v = permute(tape, reshape(tape, v, {Nt, num_heads, dh}), {1, 0, 2});
    Tensor<T> scores = matmul(tape, q, permute(tape, k, {0, 2, 1}));
    scores = scale(tape, scores, T(1.0 / std::sqrt(double(dh))));
    Tensor<T> attn = softmax_lastdim(tape, scores);
    Tensor<T> ctx = matmul(tape, attn, v);
    ctx = reshape(tape, permute(tape, ctx, {1, 0, 2}), {Nt, E});
    Tensor<T> proj = linear(tape, ctx, lp.wo, lp.bo);
    proj = detail::apply_dropout(tape, proj, dropout, drop_rng);
    Tensor<T> t1 = add(tape, tokens, proj);

    // pre-norm residual MLP
    Tensor<T> h2 = layer_norm(tape, t1, lp.ln2_g, lp.ln2_b);
    Tensor<T> m = gelu(tape, linear(tape, h2, lp.mlp_w1, lp.mlp_b1));
    m = linear(tape, m, lp.mlp_w2, lp.mlp_b2);
    m = detail::apply_dropout(tape, m, dropout, drop_rng);
    return add(tape, t1, m);
}

template <typename T>
Tensor<T> tokens_to_grid(Tape<T>& tape, const Tensor<T>& tokens, int64_t g) {
    const int64_t E = tokens.dim(1);
    detail::check(tokens.dim(0) == g * g * g, "tokens_to_grid: token count");
    Tensor<T> r = reshape(tape, tokens, {g, g, g, E});  // [pz,py,px,E], x fastest tokens
    return permute(tape, r, {3, 2, 1, 0});              // [E, px, py, pz]
}

template <typename T>
EncoderOutput<T> encoder_forward(Tape<T>& tape, const Tensor<T>& x, const UnetrParams<T>& p,
                                 CounterRng* drop_rng) {
    const auto& cfg = p.cfg;
    EncoderOutput<T> out;
    out.z0 = x;
    Tensor<T> tokens = patchify_embed(tape, x, p);
    auto sk = cfg.skips();
    size_t next = 0;
    for (int64_t l = 1; l <= cfg.num_layers; ++l) {
        tokens = vit_layer(tape, tokens, p.layers[size_t(l - 1)], cfg.num_heads, cfg.dropout,
                           drop_rng);
        if (next < sk.size() && sk[next] == l) {
            out.taps.push_back(tokens_to_grid(tape, tokens, cfg.grid_per_axis()));
            ++next;
        }
    }
    detail::check(out.taps.size() == sk.size(), "encoder_forward: missing taps");
    return out;
}

namespace detail {

template <typename T>
Tensor<T> conv_block(Tape<T>& tape, const Tensor<T>& x, const ConvBlockParams<T>& cb) {
    const int64_t k = cb.w.dim(2);
    Tensor<T> y = conv3d(tape, x, cb.w, cb.b, 1, (k - 1) / 2);
    y = instance_norm(tape, y, cb.gain, cb.bias);
    return gelu(tape, y);
}

}  // namespace detail

template <typename T>
Tensor<T> decoder_forward(Tape<T>& tape, const EncoderOutput<T>& enc, const UnetrParams<T>& p) {
    const auto& cfg = p.cfg;
    const int64_t S = cfg.num_stages();
    const auto sk = cfg.skips();
    detail::check(int64_t(enc.taps.size()) == int64_t(sk.size()), "decoder: tap count");

    // deepest tap drives the upsampling trunk; stage s < S concatenates the
    // processed tap (S-1-s from the deep end), stage S the z0 block
    Tensor<T> cur = enc.taps.back();
    for (int64_t s = 1; s <= S; ++s) {
        const auto& st = p.up_stages[size_t(s - 1)];
        cur = conv_transpose3d(tape, cur, st.deconv.w, st.deconv.b);
        Tensor<T> skip;
        if (s < S) {
            // taps vector is shallow-to-deep; stage 1 takes the tap just below the last
            Tensor<T> tap = enc.taps[enc.taps.size() - 1 - size_t(s)];
            const auto& chain = p.skip_chains[size_t(s - 1)];
            skip = tap;
            for (const auto& step : chain) {
                skip = conv_transpose3d(tape, skip, step.deconv.w, step.deconv.b);
                skip = detail::conv_block(tape, skip, step.conv);
            }
        } else {
            skip = detail::conv_block(tape, enc.z0, p.z0_block);
        }
        cur = concat_channels(tape, cur, skip);
        cur = detail::conv_block(tape, cur, st.conv1);
        cur = detail::conv_block(tape, cur, st.conv2);
    }
    return conv3d(tape, cur, p.head_w, p.head_b, 1, 0);
}

template <typename T>
Tensor<T> unetr_forward(Tape<T>& tape, const Tensor<T>& x, const UnetrParams<T>& p,
                        CounterRng* drop_rng) {
    return decoder_forward(tape, encoder_forward(tape, x, p, drop_rng), p);
}

template <typename T>
Tensor<T> predict(const Tensor<T>& x, const UnetrParams<T>& p) {
    Tape<T> tape;
    tape.set_recording(false);
    Tensor<T> logits = unetr_forward(tape, x, p);
    return sigmoid(tape, logits);
}

}  // namespace hnseg
