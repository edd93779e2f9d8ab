#include "spos/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "spos/rng.hpp"

namespace spos {

LossKind loss_from_name(const std::string& name) {
    if (name == "bce") return LossKind::bce;
    if (name == "mse") return LossKind::mse;
    throw ConfigError("unknown loss '" + name + "', expected bce or mse");
}

std::string loss_name(LossKind kind) {
    return kind == LossKind::bce ? "bce" : "mse";
}

bool smoothing_from_name(const std::string& name) {
    if (name == "on") return true;
    if (name == "off") return false;
    throw ConfigError("unknown smoothing '" + name + "', expected on or off");
}

namespace {

std::int64_t rounded_frame(double b, std::int64_t t, const std::string& video_id) {
    if (!(b >= 0.0) || !(b < static_cast<double>(t)))
        throw AnnotationError((video_id.empty() ? std::string("sequence")
                                                : "video '" + video_id + "'") +
                              ": boundary " + std::to_string(b) + " outside [0, " +
                              std::to_string(t) + ")");
    // positions just below t round down to the last frame that exists
    return std::min<std::int64_t>(std::llround(b), t - 1);
}

}  // namespace

SoftLabelSequence soft_labels(const std::vector<double>& boundaries, std::int64_t t, double sigma,
                              std::int64_t radius, const std::string& video_id) {
    if (t < 1) throw ContractError("soft_labels: T must be >= 1");
    if (sigma <= 0) throw ContractError("soft_labels: sigma must be positive");
    if (radius < 1) throw ContractError("soft_labels: radius must be >= 1");
    SoftLabelSequence out;
    out.sigma = sigma;
    out.truncation_radius = radius;
    out.labels.assign(static_cast<std::size_t>(t), 0.0);
    for (double b : boundaries) {
        std::int64_t bi = rounded_frame(b, t, video_id);
        std::int64_t lo = std::max<std::int64_t>(0, bi - radius);
        std::int64_t hi = std::min<std::int64_t>(t - 1, bi + radius);
        for (std::int64_t i = lo; i <= hi; ++i) {
            double d = static_cast<double>(i - bi);
            out.labels[static_cast<std::size_t>(i)] += std::exp(-d * d / (2.0 * sigma * sigma));
        }
    }
    for (double& v : out.labels) v = std::min(1.0, v);
    return out;
}

std::vector<double> hard_labels(const std::vector<double>& boundaries, std::int64_t t,
                                const std::string& video_id) {
    if (t < 1) throw ContractError("hard_labels: T must be >= 1");
    std::vector<double> labels(static_cast<std::size_t>(t), 0.0);
    for (double b : boundaries) labels[static_cast<std::size_t>(rounded_frame(b, t, video_id))] = 1.0;
    return labels;
}

void TrainConfig::validate() const {
    if (sigma <= 0) throw ConfigError("train: sigma must be positive");
    if (label_radius < 1) throw ConfigError("train: label radius must be >= 1");
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train: momentum must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (lr_drop_factor <= 0) throw ConfigError("train: lr drop factor must be positive");
    if (batch_videos < 1) throw ConfigError("train: batch size must be >= 1");
    for (std::size_t i = 0; i < lr_drops.size(); ++i) {
        if (lr_drops[i] < 0 || lr_drops[i] >= epochs)
            throw ConfigError("train: lr drop at epoch " + std::to_string(lr_drops[i]) +
                              " outside [0, " + std::to_string(epochs) + ")");
        if (i > 0 && lr_drops[i] <= lr_drops[i - 1])
            throw ConfigError("train: lr drops must be strictly increasing");
    }
}

double TrainConfig::lr_at(std::int64_t epoch) const {
    double out = lr;
    for (std::int64_t d : lr_drops)
        if (epoch >= d) out /= lr_drop_factor;
    return out;
}

std::string format_train_report(const TrainReport& report) {
    std::string out;
    char buf[160];
    for (const EpochRecord& e : report.epochs) {
        std::snprintf(buf, sizeof(buf),
                      "epoch %3lld  loss %.6f  val-f1@0.05 %.4f  val-avg-f1 %.4f  lr %g\n",
                      static_cast<long long>(e.epoch), e.mean_loss, e.val_f1_at_005, e.val_avg_f1,
                      e.lr);
        out += buf;
    }
    return out;
}

namespace {

struct PreparedVideo {
    TensorT<float> frames;
    std::vector<double> labels;
};

void check_video(const VideoSample& s, std::int64_t in_dim) {
    s.annotation.validate();
    if (s.features.c != in_dim)
        throw DimError("train_loop: video '" + s.features.video_id + "' has " +
                       std::to_string(s.features.c) + " channels, model wants " +
                       std::to_string(in_dim));
    if (s.annotation.instance_length != static_cast<double>(s.features.t))
        throw ContractError("train_loop: video '" + s.features.video_id + "': " +
                            std::to_string(s.features.t) + " frames vs instance_length " +
                            std::to_string(s.annotation.instance_length));
}

}  // namespace

TrainReport train_loop(Model& model, const std::vector<VideoSample>& train,
                       const std::vector<VideoSample>& val, const TrainConfig& cfg,
                       const std::string& checkpoint_path,
                       const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    if (train.empty()) throw ContractError("train_loop: no training videos");
    const std::int64_t in_dim = model.config().in_dim;

    std::vector<PreparedVideo> prepared(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        const VideoSample& s = train[i];
        check_video(s, in_dim);
        prepared[i].frames =
            TensorT<float>::from_values(Shape{s.features.t, s.features.c}, s.features.values);
        std::vector<double> pooled;
        for (const auto& r : s.annotation.raters) pooled.insert(pooled.end(), r.begin(), r.end());
        prepared[i].labels =
            cfg.smoothing
                ? soft_labels(pooled, s.features.t, cfg.sigma, cfg.label_radius, s.features.video_id)
                      .labels
                : hard_labels(pooled, s.features.t, s.features.video_id);
    }

    std::vector<TensorT<float>> val_frames;
    std::vector<AnnotationSet> val_annos;
    val_frames.reserve(val.size());
    val_annos.reserve(val.size());
    for (const VideoSample& s : val) {
        check_video(s, in_dim);
        val_frames.push_back(
            TensorT<float>::from_values(Shape{s.features.t, s.features.c}, s.features.values));
        val_annos.push_back(s.annotation);
    }

    Rng rng(cfg.seed);
    SgdStateT<float> state;
    TrainReport report;
    report.epochs.reserve(static_cast<std::size_t>(cfg.epochs));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        const double lr = cfg.lr_at(epoch);
        double loss_sum = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_videos)) {
            std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_videos));
            zero_grads(model.params());
            TensorT<float> total;
            for (std::size_t i = start; i < stop; ++i) {
                const PreparedVideo& p = prepared[order[i]];
                TensorT<float> li = loss(model.forward(p.frames).scores, p.labels, cfg.loss);
                loss_sum += static_cast<double>(li.item());
                total = i == start ? li : add(total, li);
            }
            backward(mul_scalar(total, 1.0f / static_cast<float>(stop - start)));
            sgd_step(model.params(), state, lr, cfg.momentum, cfg.weight_decay);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_loss = loss_sum / static_cast<double>(train.size());
        rec.lr = lr;
        if (!val.empty()) {
            NoGrad ng;
            std::vector<VideoPredictions> preds;
            preds.reserve(val.size());
            for (std::size_t i = 0; i < val.size(); ++i) {
                std::vector<std::int64_t> dets = extract_boundaries(model.forward(val_frames[i]));
                VideoPredictions vp;
                vp.video_id = val[i].features.video_id;
                vp.boundaries.assign(dets.begin(), dets.end());
                preds.push_back(std::move(vp));
            }
            EvalReport er = evaluate(preds, val_annos);
            rec.val_f1_at_005 = er.columns.front().f1;
            rec.val_avg_f1 = er.avg_f1;
        }
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }

    if (cfg.epochs > 0 && !checkpoint_path.empty())
        save_checkpoint(checkpoint_path, model.config(), model.params());
    return report;
}

}  // namespace spos
