#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "grad_check.hpp"
#include "hnseg/losses.hpp"
#include "hnseg/unetr.hpp"

using namespace hnseg;
using hnseg::testing::random_tensor;
using hnseg::testing::random_tensor_f;

namespace {

UnetrConfig toy_config() {
    UnetrConfig c;
    c.img_size = 32;
    c.patch_size = 16;
    c.embed_dim = 32;
    c.num_layers = 4;
    c.num_heads = 4;
    c.mlp_dim = 64;
    c.in_channels = 2;
    c.out_channels = 1;
    c.base_features = 4;
    return c;
}

}  // namespace

TEST_CASE("config validation") {
    UnetrConfig c = toy_config();
    CHECK_NOTHROW(c.validate());
    c.img_size = 33;
    CHECK_THROWS_AS(c.validate(), TensorError);
    c = toy_config();
    c.num_layers = 6;
    CHECK_THROWS_AS(c.validate(), TensorError);
    c = toy_config();
    c.embed_dim = 30;
    CHECK_THROWS_AS(c.validate(), TensorError);
    c = toy_config();
    c.patch_size = 12;  // not a power of two
    CHECK_THROWS_AS(c.validate(), TensorError);
    c = toy_config();
    c.skip_layers = {2, 1, 4};
    CHECK_THROWS_AS(c.validate(), TensorError);

    CHECK(UnetrConfig{}.skips() == std::vector<int64_t>{3, 6, 9, 12});
    UnetrConfig l4 = toy_config();
    CHECK(l4.skips() == std::vector<int64_t>{1, 2, 3, 4});
}

TEST_CASE("token counts and grid geometry") {
    UnetrConfig vit;
    CHECK(vit.num_tokens() == 729);  // (144/16)^3
    CHECK(vit.grid_per_axis() == 9); // deepest tap reshapes to 9x9x9 x embed
    CHECK(vit.in_channels * vit.patch_size * vit.patch_size * vit.patch_size == 8192);
    UnetrConfig small = toy_config();
    CHECK(small.num_tokens() == 8);  // (32/16)^3
}

TEST_CASE("patchify embeds the bias at zero input") {
    UnetrConfig cfg = toy_config();
    UnetrParams<double> p = init_params<double>(cfg, 3);
    // zero input, zero position embeddings -> tokens equal the bias broadcast
    for (int64_t i = 0; i < p.patch_b.numel(); ++i) p.patch_b.data()[i] = 0.01 * double(i);
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::zeros({2, 32, 32, 32});
    Tensor<double> tokens = patchify_embed(tape, x, p);
    CHECK(tokens.shape() == std::vector<int64_t>{8, 32});
    for (int64_t t = 0; t < 8; ++t) {
        for (int64_t e = 0; e < 32; ++e) {
            CHECK(tokens.data()[t * 32 + e] == doctest::Approx(0.01 * double(e)));
        }
    }
}

TEST_CASE("vit layer with zero weights is the identity") {
    UnetrConfig cfg = toy_config();
    UnetrParams<double> p = init_params<double>(cfg, 4);
    VitLayerParams<double>& lp = p.layers[0];
    for (Tensor<double>* w : {&lp.wq, &lp.wk, &lp.wv, &lp.wo, &lp.mlp_w1, &lp.mlp_w2}) {
        std::fill(w->values().begin(), w->values().end(), 0.0);
    }
    Tape<double> tape;
    Tensor<double> tokens = random_tensor({8, 32}, 5);
    Tensor<double> out = vit_layer(tape, tokens, lp, cfg.num_heads);
    for (int64_t i = 0; i < tokens.numel(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(tokens.data()[i]));
    }
}

TEST_CASE("single token attends to itself with weight one") {
    // wq = wk = 0 makes the single-key softmax exactly 1; with wv = wo = I and
    // a zero MLP the block reduces to t + LN(t)
    UnetrConfig cfg = toy_config();
    cfg.num_heads = 1;
    UnetrParams<double> p = init_params<double>(cfg, 6);
    VitLayerParams<double>& lp = p.layers[0];
    const int64_t E = cfg.embed_dim;
    std::fill(lp.wq.values().begin(), lp.wq.values().end(), 0.0);
    std::fill(lp.wk.values().begin(), lp.wk.values().end(), 0.0);
    std::fill(lp.wv.values().begin(), lp.wv.values().end(), 0.0);
    std::fill(lp.wo.values().begin(), lp.wo.values().end(), 0.0);
    for (int64_t i = 0; i < E; ++i) {
        lp.wv.data()[i * E + i] = 1.0;
        lp.wo.data()[i * E + i] = 1.0;
    }
    std::fill(lp.mlp_w1.values().begin(), lp.mlp_w1.values().end(), 0.0);
    std::fill(lp.mlp_w2.values().begin(), lp.mlp_w2.values().end(), 0.0);

    Tape<double> tape;
    Tensor<double> tok = random_tensor({1, E}, 7);
    Tensor<double> ln = layer_norm(tape, tok, lp.ln1_g, lp.ln1_b);
    Tensor<double> out = vit_layer(tape, tok, lp, cfg.num_heads);
    for (int64_t i = 0; i < E; ++i) {
        CHECK(out.data()[i] == doctest::Approx(tok.data()[i] + ln.data()[i]).epsilon(1e-9));
    }
}

TEST_CASE("vit layer is permutation-equivariant") {
    UnetrConfig cfg = toy_config();
    UnetrParams<double> p = init_params<double>(cfg, 8);
    Tape<double> tape;
    Tensor<double> tokens = random_tensor({8, 32}, 9);
    Tensor<double> out = vit_layer(tape, tokens, p.layers[0], cfg.num_heads);

    const std::vector<int64_t> perm = {3, 1, 7, 0, 5, 2, 6, 4};
    Tensor<double> permuted = Tensor<double>::zeros({8, 32});
    for (int64_t t = 0; t < 8; ++t) {
        for (int64_t e = 0; e < 32; ++e) {
            permuted.data()[t * 32 + e] = tokens.data()[perm[size_t(t)] * 32 + e];
        }
    }
    Tensor<double> out_p = vit_layer(tape, permuted, p.layers[0], cfg.num_heads);
    for (int64_t t = 0; t < 8; ++t) {
        for (int64_t e = 0; e < 32; ++e) {
            CHECK(out_p.data()[t * 32 + e] ==
                  doctest::Approx(out.data()[perm[size_t(t)] * 32 + e]).epsilon(1e-5));
        }
    }
}

TEST_CASE("encoder taps sit at L/4 multiples and reshape to grids") {
    UnetrConfig cfg = toy_config();
    UnetrParams<float> p = init_params<float>(cfg, 10);
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> x = random_tensor_f({2, 32, 32, 32}, 11);
    EncoderOutput<float> enc = encoder_forward(tape, x, p);
    REQUIRE(enc.taps.size() == 4);
    for (const auto& tap : enc.taps) {
        CHECK(tap.shape() == std::vector<int64_t>{32, 2, 2, 2});
    }
    CHECK(enc.z0.id() == x.id());
}

TEST_CASE("token grid reshape honors the x-fastest token order") {
    Tape<double> tape;
    // token t carries constant value t; grid voxel (px,py,pz) must read
    // t = (pz*G + py)*G + px
    const int64_t g = 2, E = 3;
    Tensor<double> tokens = Tensor<double>::zeros({g * g * g, E});
    for (int64_t t = 0; t < g * g * g; ++t) {
        for (int64_t e = 0; e < E; ++e) tokens.data()[t * E + e] = double(t);
    }
    Tensor<double> grid = tokens_to_grid(tape, tokens, g);
    CHECK(grid.shape() == std::vector<int64_t>{E, g, g, g});
    for (int64_t px = 0; px < g; ++px) {
        for (int64_t py = 0; py < g; ++py) {
            for (int64_t pz = 0; pz < g; ++pz) {
                double expect = double((pz * g + py) * g + px);
                CHECK(grid.data()[((0 * g + px) * g + py) * g + pz] == expect);
            }
        }
    }
}

TEST_CASE("forward output shape equals input spatial shape across configs") {
    for (auto [img, patch] : std::vector<std::pair<int64_t, int64_t>>{{16, 8}, {32, 16}, {48, 16}}) {
        UnetrConfig cfg = toy_config();
        cfg.img_size = img;
        cfg.patch_size = patch;
        cfg.embed_dim = 16;
        cfg.num_heads = 2;
        cfg.mlp_dim = 32;
        cfg.base_features = 2;
        UnetrParams<float> p = init_params<float>(cfg, 12);
        Tape<float> tape;
        tape.set_recording(false);
        Tensor<float> x = random_tensor_f({2, img, img, img}, 13);
        Tensor<float> logits = unetr_forward(tape, x, p);
        CHECK(logits.shape() == std::vector<int64_t>{1, img, img, img});
        for (int64_t i = 0; i < logits.numel(); ++i) CHECK(std::isfinite(logits.data()[i]));
    }
}

TEST_CASE("fixed seed gives bit-identical params and logits") {
    UnetrConfig cfg = toy_config();
    UnetrParams<float> p1 = init_params<float>(cfg, 42);
    UnetrParams<float> p2 = init_params<float>(cfg, 42);
    auto e1 = p1.entries(), e2 = p2.entries();
    REQUIRE(e1.size() == e2.size());
    for (size_t i = 0; i < e1.size(); ++i) {
        CHECK(e1[i].tensor.values() == e2[i].tensor.values());
    }
    UnetrParams<float> p3 = init_params<float>(cfg, 43);
    bool all_same = true;
    auto e3 = p3.entries();
    for (size_t i = 0; i < e1.size(); ++i) {
        all_same = all_same && e1[i].tensor.values() == e3[i].tensor.values();
    }
    CHECK(!all_same);

    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> x = random_tensor_f({2, 32, 32, 32}, 14);
    Tensor<float> a = unetr_forward(tape, x, p1);
    Tensor<float> b = unetr_forward(tape, x, p2);
    CHECK(a.values() == b.values());
}

TEST_CASE("init conventions: zero biases and position embeddings") {
    UnetrParams<float> p = init_params<float>(toy_config(), 15);
    int64_t zero_tensors = 0;
    for (const auto& e : p.entries()) {
        const bool is_bias = e.name.ends_with(".b") || e.name.ends_with(".b1") ||
                             e.name.ends_with(".b2") || e.name.ends_with(".bias");
        if (is_bias || e.name == "enc.pos") {
            for (float v : e.tensor.values()) CHECK(v == 0.0f);
            ++zero_tensors;
        }
    }
    CHECK(zero_tensors > 10);
}

TEST_CASE("decay flags exclude norms and position embeddings") {
    UnetrParams<float> p = init_params<float>(toy_config(), 16);
    for (const auto& e : p.entries()) {
        const bool norm_or_pos = e.name == "enc.pos" ||
                                 e.name.find("ln1") != std::string::npos ||
                                 e.name.find("ln2") != std::string::npos ||
                                 e.name.find(".in.") != std::string::npos;
        CHECK(e.decay == !norm_or_pos);
    }
}

TEST_CASE("every parameter receives gradient through the full model") {
    UnetrConfig cfg = toy_config();
    cfg.img_size = 16;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.mlp_dim = 32;
    cfg.base_features = 2;
    UnetrParams<float> p = init_params<float>(cfg, 17);
    Tape<float> tape;
    Tensor<float> x = random_tensor_f({2, 16, 16, 16}, 18);
    Tensor<float> gt = Tensor<float>::zeros({1, 16, 16, 16});
    CounterRng rng(19, 2);
    for (int64_t i = 0; i < gt.numel(); ++i) gt.data()[i] = rng.uniform() < 0.3 ? 1.0f : 0.0f;

    Tensor<float> prob = sigmoid(tape, unetr_forward(tape, x, p));
    Tensor<float> loss = combined_loss(tape, prob, gt);
    tape.backward(loss);

    for (const auto& e : p.entries()) {
        bool any = false;
        if (e.tensor.grad_allocated()) {
            for (float g : e.tensor.grad()) {
                if (g != 0.0f) {
                    any = true;
                    break;
                }
            }
        }
        INFO("parameter ", e.name);
        CHECK(any);
    }
}

TEST_CASE("zeroing any skip tap changes the decoder output") {
    UnetrConfig cfg = toy_config();
    UnetrParams<float> p = init_params<float>(cfg, 20);
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> x = random_tensor_f({2, 32, 32, 32}, 21);
    EncoderOutput<float> enc = encoder_forward(tape, x, p);
    Tensor<float> base = decoder_forward(tape, enc, p);

    // z0 plus the intermediate taps the decoder consumes (the deepest S-1)
    const int64_t S = cfg.num_stages();
    std::vector<int> tap_ids;
    for (int64_t s = 1; s < S; ++s) tap_ids.push_back(int(enc.taps.size() - 1 - size_t(s)));
    tap_ids.push_back(int(enc.taps.size()) - 1);  // the trunk itself

    for (int id : tap_ids) {
        EncoderOutput<float> mod = enc;
        mod.taps[size_t(id)] = Tensor<float>::zeros(enc.taps[size_t(id)].shape());
        Tensor<float> out = decoder_forward(tape, mod, p);
        float max_diff = 0;
        for (int64_t i = 0; i < out.numel(); ++i) {
            max_diff = std::max(max_diff, std::abs(out.data()[i] - base.data()[i]));
        }
        INFO("tap index ", id);
        CHECK(max_diff > 0.0f);
    }
    {
        EncoderOutput<float> mod = enc;
        mod.z0 = Tensor<float>::zeros(enc.z0.shape());
        Tensor<float> out = decoder_forward(tape, mod, p);
        float max_diff = 0;
        for (int64_t i = 0; i < out.numel(); ++i) {
            max_diff = std::max(max_diff, std::abs(out.data()[i] - base.data()[i]));
        }
        CHECK(max_diff > 0.0f);
    }
}

TEST_CASE("predict applies a sigmoid over single-channel logits") {
    UnetrConfig cfg = toy_config();
    UnetrParams<float> p = init_params<float>(cfg, 22);
    Tensor<float> x = random_tensor_f({2, 32, 32, 32}, 23);

    // zero head forces zero logits, so probability 0.5 everywhere
    std::fill(p.head_w.values().begin(), p.head_w.values().end(), 0.0f);
    std::fill(p.head_b.values().begin(), p.head_b.values().end(), 0.0f);
    Tensor<float> half = predict(x, p);
    CHECK(half.shape() == std::vector<int64_t>{1, 32, 32, 32});
    for (int64_t i = 0; i < half.numel(); ++i) CHECK(half.data()[i] == doctest::Approx(0.5f));

    UnetrParams<float> q = init_params<float>(cfg, 22);
    Tensor<float> prob = predict(x, q);
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> logits = unetr_forward(tape, x, q);
    for (int64_t i = 0; i < prob.numel(); ++i) {
        CHECK(prob.data()[i] > 0.0f);
        CHECK(prob.data()[i] < 1.0f);
        CHECK((prob.data()[i] > 0.5f) == (logits.data()[i] > 0.0f));
    }
}

TEST_CASE("parameter count matches the closed-form formula") {
    // independent closed-form count derived from the architecture plan
    auto closed_form = [](const UnetrConfig& c) {
        const int64_t E = c.embed_dim, L = c.num_layers, M = c.mlp_dim;
        const int64_t D = c.in_channels * c.patch_size * c.patch_size * c.patch_size;
        const int64_t S = c.num_stages();
        auto width = [&](int64_t s) { return c.base_features << (S - s); };
        int64_t n = D * E + E + c.num_tokens() * E;                    // patch + pos
        n += L * (2 * E + 4 * (E * E + E) + 2 * E + E * M + M + M * E + E);
        auto conv_block = [&](int64_t ci, int64_t co) { return co * ci * 27 + co + 2 * co; };
        auto deconv = [&](int64_t ci, int64_t co) { return ci * co * 8 + co; };
        n += conv_block(c.in_channels, width(S));                      // z0 block
        for (int64_t s = 1; s < S; ++s) {                              // skip chains
            int64_t prev = E;
            for (int64_t j = 1; j <= s; ++j) {
                n += deconv(prev, width(j)) + conv_block(width(j), width(j));
                prev = width(j);
            }
        }
        int64_t prev = E;
        for (int64_t s = 1; s <= S; ++s) {                             // trunk stages
            n += deconv(prev, width(s)) + conv_block(2 * width(s), width(s)) +
                 conv_block(width(s), width(s));
            prev = width(s);
        }
        n += c.out_channels * width(S) + c.out_channels;               // head
        return n;
    };

    UnetrConfig toy = toy_config();
    UnetrParams<float> tp = init_params<float>(toy, 30);
    CHECK(tp.parameter_count() == closed_form(toy));

    // ViT-B16 backbone regression constant (sits inside the 85-100M window)
    UnetrConfig vit;
    CHECK(closed_form(vit) == 98629041);
    CHECK(closed_form(vit) > 85000000);
    CHECK(closed_form(vit) < 100000000);
}
