#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spos/dataio.hpp"
#include "spos/error.hpp"
#include "spos/eval.hpp"
#include "spos/model.hpp"

// Gaussian-smoothed boundary supervision, BCE/MSE losses on the score curve,
// SGD with momentum and a step lr schedule, and the epoch loop that ties them
// to the model. One video is one training example.
namespace spos {

enum class LossKind { bce, mse };

LossKind loss_from_name(const std::string& name);
std::string loss_name(LossKind kind);
bool smoothing_from_name(const std::string& name);  // "on" | "off"

// labels[i] = min(1, sum_b exp(-(b-i)^2 / (2 sigma^2))), each boundary only
// reaching frames within truncation_radius of its rounded position.
struct SoftLabelSequence {
    std::vector<double> labels;
    double sigma = 1.0;
    std::int64_t truncation_radius = 3;
};

// Boundaries round to the nearest frame before kernel placement; a position
// outside [0, t) is an annotation error naming video_id.
SoftLabelSequence soft_labels(const std::vector<double>& boundaries, std::int64_t t,
                              double sigma = 1.0, std::int64_t radius = 3,
                              const std::string& video_id = "");

// smoothing off: 1 exactly at the rounded boundary frames, 0 elsewhere
std::vector<double> hard_labels(const std::vector<double>& boundaries, std::int64_t t,
                                const std::string& video_id = "");

// Mean per-frame loss over the score curve; scores carry only real frames, so
// padding never contributes. bce clips probabilities to [1e-7, 1 - 1e-7].
template <class S>
TensorT<S> loss(const TensorT<S>& scores, const std::vector<double>& labels, LossKind kind) {
    if (scores.rank() != 1)
        throw DimError("loss: scores must be rank 1, got " + shape_str(scores.shape()));
    if (scores.extent(0) != static_cast<std::int64_t>(labels.size()))
        throw ContractError("loss: " + std::to_string(scores.extent(0)) + " scores vs " +
                            std::to_string(labels.size()) + " labels");
    TensorT<S> y = TensorT<S>::from_values(Shape{scores.extent(0)},
                                           std::vector<S>(labels.begin(), labels.end()));
    if (kind == LossKind::mse) {
        TensorT<S> d = sub(scores, y);
        return mean_all(mul(d, d));
    }
    TensorT<S> p = clamp(scores, S(1e-7), S(1) - S(1e-7));
    TensorT<S> hit = mul(y, log(p));
    TensorT<S> miss = mul(rsub_scalar(S(1), y), log(rsub_scalar(S(1), p)));
    return neg(mean_all(add(hit, miss)));
}

template <class S>
void zero_grads(ParamStoreT<S>& params) {
    for (const auto& p : params.list()) {
        TensorT<S> t = p.tensor;
        zero_grad(t);
    }
}

// Velocity buffers, one per parameter in store order. Starts at zero.
template <class S>
struct SgdStateT {
    std::vector<std::vector<S>> velocity;
};

// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v
template <class S>
void sgd_step(ParamStoreT<S>& params, SgdStateT<S>& state, double lr, double momentum,
              double weight_decay) {
    const auto& list = params.list();
    if (state.velocity.empty()) state.velocity.resize(list.size());
    if (state.velocity.size() != list.size())
        throw ContractError("sgd_step: state holds " + std::to_string(state.velocity.size()) +
                            " slots for " + std::to_string(list.size()) + " params");
    const S mu = static_cast<S>(momentum);
    const S wd = static_cast<S>(weight_decay);
    const S step = static_cast<S>(lr);
    for (std::size_t i = 0; i < list.size(); ++i) {
        TensorT<S> w = list[i].tensor;
        auto& val = w.val();
        auto& g = w.grad();
        if (g.size() != val.size())
            throw ContractError("sgd_step: no gradient for '" + list[i].name + "'");
        auto& v = state.velocity[i];
        if (v.empty()) v.assign(val.size(), S(0));
        for (std::size_t j = 0; j < val.size(); ++j) {
            v[j] = mu * v[j] + g[j] + wd * val[j];
            val[j] -= step * v[j];
        }
    }
}

struct TrainConfig {
    LossKind loss = LossKind::bce;
    bool smoothing = true;
    double sigma = 1.0;
    std::int64_t label_radius = 3;
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::int64_t epochs = 30;
    std::vector<std::int64_t> lr_drops = {16, 24};  // epochs where lr divides by the factor
    double lr_drop_factor = 10.0;
    std::int64_t batch_videos = 4;
    std::uint64_t seed = 0;

    void validate() const;
    double lr_at(std::int64_t epoch) const;
};

struct VideoSample {
    FeatureSequence features;
    AnnotationSet annotation;
};

struct EpochRecord {
    std::int64_t epoch = 0;
    double mean_loss = 0;
    double val_f1_at_005 = 0;
    double val_avg_f1 = 0;
    double lr = 0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
};

// One fixed-format line per epoch.
std::string format_train_report(const TrainReport& report);

// Shuffles videos each epoch with an rng seeded from cfg.seed, steps once per
// batch on the mean of the per-video losses, evaluates the validation split
// after every epoch, and writes the final checkpoint unless epochs is zero or
// checkpoint_path is empty. Labels pool the boundaries of every rater.
// on_epoch, when set, sees each record as soon as it is complete.
TrainReport train_loop(Model& model, const std::vector<VideoSample>& train,
                       const std::vector<VideoSample>& val, const TrainConfig& cfg,
                       const std::string& checkpoint_path,
                       const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace spos
