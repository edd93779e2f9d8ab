#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "spos/encoder.hpp"
#include "spos/rng.hpp"

using namespace spos;
using spos::testing::grad_check;

namespace {

EncoderConfig small_cfg(EncoderKind kind, Positional pos = Positional::sinusoidal) {
    EncoderConfig cfg;
    cfg.kind = kind;
    cfg.layers = 1;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.positional = pos;
    cfg.window_len = 5;
    return cfg;
}

}  // namespace

TEST_CASE("config names round trip; validation rejects bad configs") {
    for (auto k : {EncoderKind::transformer, EncoderKind::gru, EncoderKind::lstm})
        CHECK(encoder_kind_from_name(encoder_kind_name(k)) == k);
    CHECK_THROWS_AS(encoder_kind_from_name("rnn"), ConfigError);
    for (auto p : {Positional::sinusoidal, Positional::learned, Positional::none})
        CHECK(positional_from_name(positional_name(p)) == p);
    CHECK_THROWS_AS(positional_from_name("rope"), ConfigError);

    EncoderConfig bad = small_cfg(EncoderKind::transformer);
    bad.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_cfg(EncoderKind::transformer);
    bad.layers = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_cfg(EncoderKind::transformer, Positional::learned);
    bad.window_len = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    EncoderConfig dflt;
    CHECK(dflt.ffn() == 4 * dflt.model_dim);
    dflt.ffn_dim = 100;
    CHECK(dflt.ffn() == 100);
}

TEST_CASE("output shape equals input shape for every kind") {
    Rng rng(700);
    for (auto kind : {EncoderKind::transformer, EncoderKind::gru, EncoderKind::lstm}) {
        ParamStoreT<float> store;
        Rng init(42);
        EncoderT<float> enc(small_cfg(kind), store, init);
        auto x = TensorT<float>::uniform(Shape{3, 5, 8}, rng, -1.0, 1.0);
        auto y = enc.forward(x);
        CHECK(y.shape() == x.shape());
        CHECK_THROWS_AS(enc.forward(TensorT<float>(Shape{3, 5, 7})), DimError);
    }
}

TEST_CASE("attention weights per head per query sum to 1") {
    Rng rng(701);
    ParamStoreT<float> store;
    Rng init(43);
    EncoderConfig cfg = small_cfg(EncoderKind::transformer);
    cfg.layers = 2;
    EncoderT<float> enc(cfg, store, init);
    auto x = TensorT<float>::uniform(Shape{2, 5, 8}, rng, -1.0, 1.0);
    (void)enc.forward(x);
    REQUIRE(enc.attention.size() == 2);
    for (const auto& probs : enc.attention) {
        REQUIRE(probs.shape() == Shape{2 * 2, 5, 5});
        for (std::int64_t r = 0; r < 4 * 5; ++r) {
            float s = 0;
            for (std::int64_t j = 0; j < 5; ++j) s += probs.val()[r * 5 + j];
            CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
        }
    }
}

TEST_CASE("without positions, constant rows stay constant through attention") {
    Rng rng(702);
    ParamStoreT<float> store;
    Rng init(44);
    EncoderT<float> enc(small_cfg(EncoderKind::transformer, Positional::none), store, init);
    // every row of the window identical
    std::vector<float> v(2 * 5 * 8);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t l = 0; l < 5; ++l)
            for (std::int64_t c = 0; c < 8; ++c)
                v[(b * 5 + l) * 8 + c] = 0.1f * static_cast<float>(c) - 0.3f * static_cast<float>(b);
    auto y = enc.forward(TensorT<float>::from_values(Shape{2, 5, 8}, v));
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t l = 1; l < 5; ++l)
            for (std::int64_t c = 0; c < 8; ++c)
                CHECK(y.val()[(b * 5 + l) * 8 + c] ==
                      doctest::Approx(y.val()[(b * 5 + 0) * 8 + c]).epsilon(1e-5));
}

TEST_CASE("sinusoidal positions break the constant-row symmetry") {
    Rng rng(703);
    ParamStoreT<float> store;
    Rng init(44);
    EncoderT<float> enc(small_cfg(EncoderKind::transformer, Positional::sinusoidal), store, init);
    auto x = TensorT<float>::full(Shape{1, 5, 8}, 0.25f);
    auto y = enc.forward(x);
    bool differs = false;
    for (std::int64_t c = 0; c < 8 && !differs; ++c)
        if (std::abs(y.val()[0 * 8 + c] - y.val()[1 * 8 + c]) > 1e-4f) differs = true;
    CHECK(differs);
}

TEST_CASE("sinusoidal table matches the closed form") {
    auto pe = sinusoidal_positions<double>(4, 6);
    for (std::int64_t pos = 0; pos < 4; ++pos)
        for (std::int64_t i = 0; i < 6; ++i) {
            double angle = pos / std::pow(10000.0, (2.0 * (i / 2)) / 6.0);
            double want = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
            CHECK(pe.val()[pos * 6 + i] == doctest::Approx(want).epsilon(1e-9));
        }
    CHECK(pe.val()[0] == 0.0);  // sin(0)
    CHECK(pe.val()[1] == 1.0);  // cos(0)
}

TEST_CASE("determinism: same seed, same input, bitwise identical output") {
    for (auto kind : {EncoderKind::transformer, EncoderKind::gru, EncoderKind::lstm}) {
        auto run = [&]() {
            Rng rng(800);
            ParamStoreT<float> store;
            Rng init(900);
            EncoderT<float> enc(small_cfg(kind), store, init);
            auto x = TensorT<float>::uniform(Shape{2, 5, 8}, rng, -1.0, 1.0);
            return enc.forward(x);
        };
        auto a = run(), b = run();
        REQUIRE(a.numel() == b.numel());
        for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.val()[i] == b.val()[i]);
    }
}

TEST_CASE("learned positions are trainable parameters added to the input") {
    ParamStoreT<float> store;
    Rng init(45);
    EncoderT<float> enc(small_cfg(EncoderKind::transformer, Positional::learned), store, init);
    auto pos = store.find("enc.pos");
    CHECK(pos.shape() == Shape{5, 8});
    CHECK(pos.requires_grad());
    // using it with a different L must fail loudly
    CHECK_THROWS_AS(enc.forward(TensorT<float>(Shape{1, 7, 8})), DimError);
}

TEST_CASE("gradient of mean(encode(x)) matches finite differences") {
    // 64-bit, L=5, C=8, one layer, every encoder kind and input + parameters
    for (auto kind : {EncoderKind::transformer, EncoderKind::gru, EncoderKind::lstm}) {
        Rng rng(1000 + static_cast<int>(kind));
        ParamStoreT<double> store;
        Rng init(2000 + static_cast<int>(kind));
        EncoderT<double> enc(small_cfg(kind), store, init);
        auto x = TensorT<double>::uniform(Shape{2, 5, 8}, rng, -0.8, 0.8, true);

        std::vector<TensorT<double>> inputs{x};
        for (const auto& p : store.list()) inputs.push_back(p.tensor);

        auto build = [&]() { return mean_all(enc.forward(x)); };
        auto res = grad_check(inputs, build, 1e-5, 1e-4, 40);
        CHECK_MESSAGE(res.ok, res.detail);
    }
}
