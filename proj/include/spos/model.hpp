#pragma once

#include <cstdint>
#include <string>

#include "spos/encoder.hpp"
#include "spos/head.hpp"
#include "spos/params.hpp"
#include "spos/partition.hpp"
#include "spos/similarity.hpp"

// Full boundary detector: project input features to the model width, build
// every frame's structured context window, encode the windows, take grouped
// similarity maps, pool them with the FCN and score the real frames with the
// 1D scorer. One forward pass handles one video.
namespace spos {

struct ModelConfig {
    std::int64_t in_dim = 32;      // feature channels of the input sequences
    std::int64_t model_dim = 256;  // C
    std::int64_t k = 8;            // half window K, L = 2K+1
    std::int64_t groups = 4;       // G
    Metric metric = Metric::cosine;
    EncoderConfig encoder;  // model_dim / window_len are overwritten by resolved()
    HeadConfig head;        // model_dim / groups are overwritten by resolved()
    // Escape hatch: clamp the right context at the last real frame instead of
    // the last padded row. Off by default.
    bool clamp_right_to_real = false;

    std::int64_t window_len() const { return 2 * k + 1; }

    // Copies the shared widths into the sub-configs and validates the result.
    ModelConfig resolved() const {
        ModelConfig r = *this;
        if (r.in_dim < 1) throw ConfigError("model: in_dim must be >= 1");
        if (r.k < 1) throw ConfigError("model: k must be >= 1");
        if (r.groups < 1 || r.model_dim % r.groups != 0)
            throw ConfigError("model: model_dim " + std::to_string(r.model_dim) +
                              " not divisible by groups " + std::to_string(r.groups));
        r.encoder.model_dim = r.model_dim;
        r.encoder.window_len = r.window_len();
        r.head.model_dim = r.model_dim;
        r.head.groups = r.groups;
        r.encoder.validate();
        r.head.validate();
        return r;
    }
};

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

template <class S>
class ModelT {
  public:
    ModelT(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg.resolved()) {
        Rng rng(seed);
        proj_w_ = store_.weight("proj.w", Shape{cfg_.in_dim, cfg_.model_dim}, cfg_.in_dim, rng);
        proj_b_ = store_.zeros("proj.b", Shape{cfg_.model_dim});
        enc_ = EncoderT<S>(cfg_.encoder, store_, rng);
        head_ = HeadT<S>(cfg_.head, store_, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStoreT<S>& params() { return store_; }
    const ParamStoreT<S>& params() const { return store_; }
    EncoderT<S>& encoder() { return enc_; }

    // frames [T, in_dim] -> one score per real frame
    ScoreSequenceT<S> forward(const TensorT<S>& frames) {
        if (frames.rank() != 2 || frames.extent(1) != cfg_.in_dim)
            throw DimError("model: expected [T," + std::to_string(cfg_.in_dim) + "], got " +
                           shape_str(frames.shape()));
        TensorT<S> x = add(matmul(frames, proj_w_), proj_b_);  // [T, C]
        PaddedSequenceT<S> p = pad(x, cfg_.k);
        std::vector<SliceContextT<S>> slices;
        slices.reserve(static_cast<std::size_t>(cfg_.k));
        std::int64_t hi = cfg_.clamp_right_to_real ? p.t_real - 1 : -1;
        for (std::int64_t k = 0; k < cfg_.k; ++k) slices.push_back(build_slice(p, k, hi));
        TensorT<S> windows = structured_context(p, slices);       // [T', L, C]
        TensorT<S> enc = enc_.forward(windows);                   // [T', L, C]
        TensorT<S> xg = group_split(enc, cfg_.groups);            // [T', L, G, C/G]
        TensorT<S> maps = similarity_maps(xg, cfg_.metric);  // [T', G, L, L]
        // Padded candidates never reach the score, and the head works per
        // window, so drop them before the expensive part.
        if (p.t_padded > p.t_real) maps = slice(maps, 0, 0, p.t_real);
        TensorT<S> h = head_.fcn_pool(maps);  // [T, C]
        return head_.score_sequence(h);
    }

  private:
    ModelConfig cfg_;
    ParamStoreT<S> store_;
    TensorT<S> proj_w_, proj_b_;
    EncoderT<S> enc_;
    HeadT<S> head_;
};

using Model = ModelT<float>;

// Checkpoint: one self-contained binary file holding the JSON model config
// followed by every named parameter tensor, all little-endian.
template <class S>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStoreT<S>& params);

ModelConfig checkpoint_config(const std::string& path);

// Overwrites the values of an already built store; names, shapes and scalar
// width must match the file exactly.
template <class S>
void load_checkpoint(const std::string& path, ParamStoreT<S>& params);

template <class S>
ModelT<S> load_model(const std::string& path) {
    ModelT<S> m(checkpoint_config(path), 0);
    load_checkpoint(path, m.params());
    return m;
}

}  // namespace spos
