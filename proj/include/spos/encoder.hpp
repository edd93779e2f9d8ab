#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "spos/params.hpp"
#include "spos/tensor.hpp"

// Temporal encoder over context windows: a post-norm transformer or a
// bidirectional GRU/LSTM, applied independently to each window's L frame
// vectors. Input and output are both [B, L, C].
namespace spos {

enum class EncoderKind { transformer, gru, lstm };
enum class Positional { sinusoidal, learned, none };

inline EncoderKind encoder_kind_from_name(const std::string& name) {
    if (name == "transformer") return EncoderKind::transformer;
    if (name == "gru") return EncoderKind::gru;
    if (name == "lstm") return EncoderKind::lstm;
    throw ConfigError("unknown encoder '" + name + "' (expected transformer, gru or lstm)");
}

inline std::string encoder_kind_name(EncoderKind k) {
    switch (k) {
        case EncoderKind::transformer: return "transformer";
        case EncoderKind::gru: return "gru";
        case EncoderKind::lstm: return "lstm";
    }
    return "?";
}

inline Positional positional_from_name(const std::string& name) {
    if (name == "sinusoidal") return Positional::sinusoidal;
    if (name == "learned") return Positional::learned;
    if (name == "none") return Positional::none;
    throw ConfigError("unknown positional mode '" + name +
                      "' (expected sinusoidal, learned or none)");
}

inline std::string positional_name(Positional p) {
    switch (p) {
        case Positional::sinusoidal: return "sinusoidal";
        case Positional::learned: return "learned";
        case Positional::none: return "none";
    }
    return "?";
}

struct EncoderConfig {
    EncoderKind kind = EncoderKind::transformer;
    std::int64_t layers = 6;
    std::int64_t model_dim = 256;          // C
    std::int64_t heads = 4;                // transformer only
    std::int64_t ffn_dim = 0;              // transformer only; 0 means 4*C
    Positional positional = Positional::sinusoidal;  // transformer only
    std::int64_t window_len = 0;           // required for learned positions

    std::int64_t ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * model_dim; }

    void validate() const {
        if (layers < 1) throw ConfigError("encoder: layers must be >= 1");
        if (model_dim < 1) throw ConfigError("encoder: model_dim must be >= 1");
        if (kind == EncoderKind::transformer) {
            if (heads < 1 || model_dim % heads != 0)
                throw ConfigError("encoder: model_dim " + std::to_string(model_dim) +
                                  " not divisible by heads " + std::to_string(heads));
            if (positional == Positional::learned && window_len < 1)
                throw ConfigError("encoder: learned positions need window_len");
        }
    }
};

// pe[pos, 2i] = sin(pos / 10000^(2i/C)), pe[pos, 2i+1] = cos(same angle)
template <class S>
TensorT<S> sinusoidal_positions(std::int64_t l, std::int64_t c) {
    std::vector<S> v(static_cast<std::size_t>(l * c));
    for (std::int64_t pos = 0; pos < l; ++pos)
        for (std::int64_t i = 0; i < c; ++i) {
            double angle = pos * std::exp(-(2.0 * (i / 2)) / c * std::log(10000.0));
            v[pos * c + i] = static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return TensorT<S>::from_values(Shape{l, c}, std::move(v));
}

template <class S>
class EncoderT {
  public:
    EncoderT() = default;

    EncoderT(EncoderConfig cfg, ParamStoreT<S>& store, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        std::int64_t c = cfg_.model_dim;
        switch (cfg_.kind) {
            case EncoderKind::transformer: {
                if (cfg_.positional == Positional::learned)
                    pos_ = store.weight("enc.pos", Shape{cfg_.window_len, c}, c, rng);
                std::int64_t f = cfg_.ffn();
                for (std::int64_t i = 0; i < cfg_.layers; ++i) {
                    std::string p = "enc.l" + std::to_string(i) + ".";
                    Attn a;
                    a.wq = store.weight(p + "wq", Shape{c, c}, c, rng);
                    a.bq = store.zeros(p + "bq", Shape{c});
                    a.wk = store.weight(p + "wk", Shape{c, c}, c, rng);
                    a.bk = store.zeros(p + "bk", Shape{c});
                    a.wv = store.weight(p + "wv", Shape{c, c}, c, rng);
                    a.bv = store.zeros(p + "bv", Shape{c});
                    a.wo = store.weight(p + "wo", Shape{c, c}, c, rng);
                    a.bo = store.zeros(p + "bo", Shape{c});
                    a.ln1_g = store.constant(p + "ln1.g", Shape{c}, S(1));
                    a.ln1_b = store.zeros(p + "ln1.b", Shape{c});
                    a.w1 = store.weight(p + "ffn.w1", Shape{c, f}, c, rng);
                    a.b1 = store.zeros(p + "ffn.b1", Shape{f});
                    a.w2 = store.weight(p + "ffn.w2", Shape{f, c}, f, rng);
                    a.b2 = store.zeros(p + "ffn.b2", Shape{c});
                    a.ln2_g = store.constant(p + "ln2.g", Shape{c}, S(1));
                    a.ln2_b = store.zeros(p + "ln2.b", Shape{c});
                    attn_.push_back(a);
                }
                break;
            }
            case EncoderKind::gru:
            case EncoderKind::lstm: {
                std::int64_t gates = cfg_.kind == EncoderKind::gru ? 3 : 4;
                for (std::int64_t i = 0; i < cfg_.layers; ++i) {
                    std::string p = "enc.l" + std::to_string(i) + ".";
                    Rnn r;
                    for (int d = 0; d < 2; ++d) {
                        std::string q = p + (d == 0 ? "fwd." : "bwd.");
                        r.dir[d].w_ih = store.weight(q + "w_ih", Shape{c, gates * c}, c, rng);
                        r.dir[d].w_hh = store.weight(q + "w_hh", Shape{c, gates * c}, c, rng);
                        r.dir[d].b_ih = store.zeros(q + "b_ih", Shape{gates * c});
                        r.dir[d].b_hh = store.zeros(q + "b_hh", Shape{gates * c});
                    }
                    r.w_proj = store.weight(p + "proj.w", Shape{2 * c, c}, 2 * c, rng);
                    r.b_proj = store.zeros(p + "proj.b", Shape{c});
                    rnn_.push_back(r);
                }
                break;
            }
        }
    }

    const EncoderConfig& config() const { return cfg_; }

    // x [B,L,C] -> [B,L,C]
    TensorT<S> forward(const TensorT<S>& x) {
        if (x.rank() != 3 || x.extent(2) != cfg_.model_dim)
            throw DimError("encode: expected [B,L," + std::to_string(cfg_.model_dim) + "], got " +
                           shape_str(x.shape()));
        attention.clear();
        switch (cfg_.kind) {
            case EncoderKind::transformer: return forward_transformer(x);
            case EncoderKind::gru: return forward_rnn(x, false);
            case EncoderKind::lstm: return forward_rnn(x, true);
        }
        throw ContractError("encode: bad kind");
    }

    // attention maps of the latest forward, one [B*H, L, L] tensor per layer
    std::vector<TensorT<S>> attention;

  private:
    struct Attn {
        TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
        TensorT<S> ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
    };
    struct RnnDir {
        TensorT<S> w_ih, w_hh, b_ih, b_hh;
    };
    struct Rnn {
        RnnDir dir[2];
        TensorT<S> w_proj, b_proj;
    };

    EncoderConfig cfg_;
    TensorT<S> pos_;
    std::vector<Attn> attn_;
    std::vector<Rnn> rnn_;

    static TensorT<S> linear(const TensorT<S>& x2d, const TensorT<S>& w, const TensorT<S>& b) {
        return add(matmul(x2d, w), b);
    }

    TensorT<S> forward_transformer(const TensorT<S>& x0) {
        std::int64_t b = x0.extent(0), l = x0.extent(1), c = x0.extent(2);
        std::int64_t h = cfg_.heads, dh = c / h;
        TensorT<S> x = x0;
        if (cfg_.positional == Positional::sinusoidal) {
            x = add(x, sinusoidal_positions<S>(l, c));
        } else if (cfg_.positional == Positional::learned) {
            if (l != cfg_.window_len)
                throw DimError("encode: learned positions built for L=" +
                               std::to_string(cfg_.window_len) + ", got L=" + std::to_string(l));
            x = add(x, pos_);
        }
        for (auto& ly : attn_) {
            TensorT<S> flat = view(x, Shape{b * l, c});
            auto heads_of = [&](const TensorT<S>& t2d) {
                // [B*L,C] -> [B,L,H,Dh] -> [B,H,L,Dh] -> [B*H,L,Dh]
                return view(permute(view(t2d, Shape{b, l, h, dh}), {0, 2, 1, 3}),
                            Shape{b * h, l, dh});
            };
            TensorT<S> q = heads_of(linear(flat, ly.wq, ly.bq));
            TensorT<S> k = heads_of(linear(flat, ly.wk, ly.bk));
            TensorT<S> v = heads_of(linear(flat, ly.wv, ly.bv));
            TensorT<S> scores = mul_scalar(bmm(q, k, true), S(1.0 / std::sqrt(double(dh))));
            TensorT<S> probs = softmax_lastdim(scores);
            attention.push_back(probs);
            TensorT<S> ctx = bmm(probs, v);  // [B*H,L,Dh]
            TensorT<S> merged = view(permute(view(ctx, Shape{b, h, l, dh}), {0, 2, 1, 3}),
                                     Shape{b * l, c});
            TensorT<S> att_out = linear(merged, ly.wo, ly.bo);
            TensorT<S> x1 = layer_norm(add(flat, att_out), ly.ln1_g, ly.ln1_b);
            TensorT<S> hme = relu(linear(x1, ly.w1, ly.b1));
            TensorT<S> ffn_out = linear(hme, ly.w2, ly.b2);
            TensorT<S> x2 = layer_norm(add(x1, ffn_out), ly.ln2_g, ly.ln2_b);
            x = view(x2, Shape{b, l, c});
        }
        return x;
    }

    // One direction of a GRU/LSTM scan; xs holds per-position [B,C] inputs in
    // scan order. Returns per-position hidden states in the same order.
    std::vector<TensorT<S>> scan(const std::vector<TensorT<S>>& xs, const RnnDir& d, bool lstm,
                                 std::int64_t bsz, std::int64_t c) {
        std::vector<TensorT<S>> hs;
        hs.reserve(xs.size());
        TensorT<S> hct(Shape{bsz, c});  // h_0 = 0
        TensorT<S> cell(Shape{bsz, c}); // c_0 = 0 (lstm only)
        for (const auto& xt : xs) {
            TensorT<S> gi = linear(xt, d.w_ih, d.b_ih);    // [B, gates*C]
            TensorT<S> gh = linear(hct, d.w_hh, d.b_hh);
            if (!lstm) {
                TensorT<S> r = sigmoid(add(slice(gi, 1, 0, c), slice(gh, 1, 0, c)));
                TensorT<S> z = sigmoid(add(slice(gi, 1, c, c), slice(gh, 1, c, c)));
                TensorT<S> n = tanh(add(slice(gi, 1, 2 * c, c), mul(r, slice(gh, 1, 2 * c, c))));
                // h' = (1-z)*n + z*h
                hct = add(mul(rsub_scalar(S(1), z), n), mul(z, hct));
            } else {
                TensorT<S> i = sigmoid(add(slice(gi, 1, 0, c), slice(gh, 1, 0, c)));
                TensorT<S> f = sigmoid(add(slice(gi, 1, c, c), slice(gh, 1, c, c)));
                TensorT<S> g = tanh(add(slice(gi, 1, 2 * c, c), slice(gh, 1, 2 * c, c)));
                TensorT<S> o = sigmoid(add(slice(gi, 1, 3 * c, c), slice(gh, 1, 3 * c, c)));
                cell = add(mul(f, cell), mul(i, g));
                hct = mul(o, tanh(cell));
            }
            hs.push_back(hct);
        }
        return hs;
    }

    TensorT<S> forward_rnn(const TensorT<S>& x0, bool lstm) {
        std::int64_t b = x0.extent(0), l = x0.extent(1), c = x0.extent(2);
        TensorT<S> x = x0;
        for (auto& ly : rnn_) {
            std::vector<TensorT<S>> xs_fwd, xs_bwd;
            for (std::int64_t t = 0; t < l; ++t)
                xs_fwd.push_back(view(slice(x, 1, t, 1), Shape{b, c}));
            for (std::int64_t t = l - 1; t >= 0; --t) xs_bwd.push_back(xs_fwd[t]);

            auto hf = scan(xs_fwd, ly.dir[0], lstm, b, c);
            auto hb = scan(xs_bwd, ly.dir[1], lstm, b, c);

            std::vector<TensorT<S>> rows;
            rows.reserve(l);
            for (std::int64_t t = 0; t < l; ++t) {
                TensorT<S> both = concat<S>({hf[t], hb[l - 1 - t]}, 1);  // [B, 2C]
                rows.push_back(view(linear(both, ly.w_proj, ly.b_proj), Shape{b, 1, c}));
            }
            x = concat<S>(rows, 1);  // [B,L,C]
        }
        return x;
    }
};

using Encoder = EncoderT<float>;

}  // namespace spos
