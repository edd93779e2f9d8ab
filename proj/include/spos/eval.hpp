#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spos/error.hpp"
#include "spos/head.hpp"

// Boundary extraction from score curves and the relative-distance F1
// protocol: a detection counts when |det - gt| / instance_length is within
// the threshold, matched one-to-one, best rater kept per video.
namespace spos {

struct AnnotationSet {
    std::string video_id;
    double instance_length = 0;  // Rel.Dis. normalizer, frames
    std::vector<std::vector<double>> raters;

    void validate() const {
        if (instance_length <= 0)
            throw AnnotationError("video '" + video_id + "': instance_length must be positive");
        if (raters.empty()) throw AnnotationError("video '" + video_id + "': needs at least one rater");
        for (const auto& r : raters)
            for (double b : r)
                if (b < 0 || b >= instance_length)
                    throw AnnotationError("video '" + video_id + "': boundary " +
                                          std::to_string(b) + " outside [0, " +
                                          std::to_string(instance_length) + ")");
    }
};

struct VideoPredictions {
    std::string video_id;
    std::vector<double> boundaries;
};

struct MatchResult {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::int64_t tp = 0;
};

enum class Aggregate { video_mean, corpus_pool };

Aggregate aggregate_from_name(const std::string& name);
std::string aggregate_name(Aggregate a);

struct EvalColumn {
    double threshold = 0;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

struct EvalReport {
    std::vector<EvalColumn> columns;  // one per threshold, ascending
    double avg_precision = 0;         // plain means over the columns
    double avg_recall = 0;
    double avg_f1 = 0;
    std::int64_t videos = 0;
    Aggregate aggregate = Aggregate::video_mean;
};

// 0.05 .. 0.5 in steps of 0.05
std::vector<double> default_thresholds();

// t is a boundary iff scores[t] >= tau and scores[t] is a maximum over the
// surrounding 2*radius+1 frames; of each run of consecutive equal peaks only
// the first index is kept.
std::vector<std::int64_t> extract_boundaries(const std::vector<double>& scores, double tau = 0.5,
                                             std::int64_t radius = 2);

template <class S>
std::vector<std::int64_t> extract_boundaries(const ScoreSequenceT<S>& s, double tau = 0.5,
                                             std::int64_t radius = 2) {
    TensorT<S> t = s.scores;
    return extract_boundaries(std::vector<double>(t.val().begin(), t.val().end()), tau, radius);
}

// Maximum one-to-one matching under |det - gt| <= threshold * instance_length,
// computed by a greedy sweep over sorted detections. Both sets empty counts
// as a perfect score.
MatchResult match_f1(std::vector<double> dets, std::vector<double> gts, double instance_length,
                     double threshold);

// Per video and threshold: score against every rater and keep the best, then
// aggregate over videos (mean of per-video scores, or pooled counts of each
// video's best-F1 rater). Predictions and annotations must cover the same
// video ids.
EvalReport evaluate(const std::vector<VideoPredictions>& preds,
                    const std::vector<AnnotationSet>& annos,
                    const std::vector<double>& thresholds = default_thresholds(),
                    Aggregate aggregate = Aggregate::video_mean);

// Aligned text table: one column per threshold plus avg; rows P, R, F1.
std::string format_report(const EvalReport& report);

// The same content as a JSON record.
std::string report_json(const EvalReport& report);

}  // namespace spos
