#pragma once

#include <string>
#include <vector>

#include "spos/params.hpp"
#include "spos/tensor.hpp"

// Boundary head: a 4-layer fully convolutional stack over each L x L
// similarity map pooled to one feature vector per window, then a 3-layer 1D
// convolutional scorer over the frame sequence ending in a sigmoid.
namespace spos {

struct HeadConfig {
    std::int64_t groups = 4;        // G, input channels of the FCN
    std::int64_t model_dim = 256;   // C, output channels of the FCN
    // Four FCN stages; empty means the ladder [C/8, C/4, C/2, C] (clamped to
    // at least 1), which is [32, 64, 128, 256] at C=256.
    std::vector<std::int64_t> fcn_channels;
    std::int64_t fcn_kernel = 3;
    // Three scorer stages; empty means [C/2, C/4, 1] (clamped to at least 1).
    std::vector<std::int64_t> scorer_channels;
    std::int64_t scorer_kernel = 3;

    std::vector<std::int64_t> fcn_plan() const {
        if (!fcn_channels.empty()) return fcn_channels;
        auto at_least_one = [](std::int64_t v) { return v < 1 ? 1 : v; };
        return {at_least_one(model_dim / 8), at_least_one(model_dim / 4),
                at_least_one(model_dim / 2), model_dim};
    }

    std::vector<std::int64_t> scorer_plan() const {
        if (!scorer_channels.empty()) return scorer_channels;
        auto at_least_one = [](std::int64_t v) { return v < 1 ? 1 : v; };
        return {at_least_one(model_dim / 2), at_least_one(model_dim / 4), 1};
    }

    void validate() const {
        if (groups < 1) throw ConfigError("head: groups must be >= 1");
        if (model_dim < 1) throw ConfigError("head: model_dim must be >= 1");
        if (fcn_kernel < 1 || fcn_kernel % 2 == 0)
            throw ConfigError("head: fcn_kernel must be odd");
        if (scorer_kernel < 1 || scorer_kernel % 2 == 0)
            throw ConfigError("head: scorer_kernel must be odd");
        auto fp = fcn_plan();
        if (fp.size() != 4) throw ConfigError("head: fcn_channels needs exactly 4 entries");
        if (fp.back() != model_dim)
            throw ConfigError("head: last FCN channel must equal model_dim");
        for (auto v : fp)
            if (v < 1) throw ConfigError("head: FCN channels must be positive");
        auto sp = scorer_plan();
        if (sp.size() != 3) throw ConfigError("head: scorer_channels needs exactly 3 entries");
        if (sp.back() != 1) throw ConfigError("head: last scorer channel must be 1");
        for (auto v : sp)
            if (v < 1) throw ConfigError("head: scorer channels must be positive");
    }
};

template <class S>
struct ScoreSequenceT {
    TensorT<S> scores;        // [T_real], values in (0,1)
    std::int64_t real_length;
};

using ScoreSequence = ScoreSequenceT<float>;

template <class S>
class HeadT {
  public:
    HeadT() = default;

    HeadT(HeadConfig cfg, ParamStoreT<S>& store, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        std::int64_t kf = cfg_.fcn_kernel, ks = cfg_.scorer_kernel;
        auto fp = cfg_.fcn_plan();
        std::int64_t ci = cfg_.groups;
        for (std::size_t i = 0; i < fp.size(); ++i) {
            std::string p = "head.fcn" + std::to_string(i) + ".";
            fcn_w_.push_back(store.weight(p + "w", Shape{kf, kf, ci, fp[i]}, kf * kf * ci, rng));
            fcn_b_.push_back(store.zeros(p + "b", Shape{fp[i]}));
            ci = fp[i];
        }
        auto sp = cfg_.scorer_plan();
        ci = cfg_.model_dim;
        for (std::size_t i = 0; i < sp.size(); ++i) {
            std::string p = "head.scorer" + std::to_string(i) + ".";
            scorer_w_.push_back(store.weight(p + "w", Shape{ks, ci, sp[i]}, ks * ci, rng));
            scorer_b_.push_back(store.zeros(p + "b", Shape{sp[i]}));
            ci = sp[i];
        }
    }

    const HeadConfig& config() const { return cfg_; }

    // maps [B,G,L,L] -> pooled window features [B,C]. Replicate padding keeps
    // a constant map constant through every stage, so the pooled feature of a
    // constant input does not depend on L.
    TensorT<S> fcn_pool(const TensorT<S>& maps) {
        if (maps.rank() != 4 || maps.extent(1) != cfg_.groups)
            throw DimError("fcn_pool: expected [B," + std::to_string(cfg_.groups) +
                           ",L,L], got " + shape_str(maps.shape()));
        if (maps.extent(2) != maps.extent(3))
            throw DimError("fcn_pool: maps must be square, got " + shape_str(maps.shape()));
        std::int64_t b = maps.extent(0), l = maps.extent(2);
        TensorT<S> x = permute(maps, {0, 2, 3, 1});  // [B,L,L,G]
        for (std::size_t i = 0; i < fcn_w_.size(); ++i)
            x = relu(conv2d_nhwc(x, fcn_w_[i], fcn_b_[i], kernels::Pad::replicate));
        // average pool over the L*L plane
        TensorT<S> flat = view(x, Shape{b, l * l, cfg_.model_dim});
        return reduce_mean(flat, 1);  // [B,C]
    }

    // h [T_real, C] -> per-frame boundary scores in (0,1)
    ScoreSequenceT<S> score_sequence(const TensorT<S>& h) {
        if (h.rank() != 2 || h.extent(1) != cfg_.model_dim)
            throw DimError("score_sequence: expected [T," + std::to_string(cfg_.model_dim) +
                           "], got " + shape_str(h.shape()));
        std::int64_t t = h.extent(0);
        TensorT<S> x = h;
        for (std::size_t i = 0; i < scorer_w_.size(); ++i) {
            x = conv1d_seq(x, scorer_w_[i], scorer_b_[i]);
            if (i + 1 < scorer_w_.size()) x = relu(x);
        }
        TensorT<S> s = sigmoid(view(x, Shape{t}));
        return {s, t};
    }

  private:
    HeadConfig cfg_;
    std::vector<TensorT<S>> fcn_w_, fcn_b_;
    std::vector<TensorT<S>> scorer_w_, scorer_b_;
};

using Head = HeadT<float>;

}  // namespace spos
