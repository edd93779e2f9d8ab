#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spos/error.hpp"
#include "spos/eval.hpp"
#include "spos/rng.hpp"

// Feature and annotation files, the synthetic change-point generator, and
// uniform frame sampling.
namespace spos {

struct FeatureSequence {
    std::string video_id;
    std::int64_t t = 0;
    std::int64_t c = 0;
    std::vector<float> values;  // row-major [T, C]
};

// SPOSFEAT v1: 8-byte magic, version u32, T u32, C u32, then exactly T*C
// little-endian f32. The video id is the file name without extension.
void write_features(const std::string& path, const FeatureSequence& seq);
FeatureSequence read_features(const std::string& path);

// One JSON document: a list of {video_id, instance_length, raters} records.
void write_annotations(const std::string& path, const std::vector<AnnotationSet>& annos);
std::vector<AnnotationSet> read_annotations(const std::string& path);

struct SynthConfig {
    std::int64_t videos = 1;
    std::int64_t t = 100;
    std::int64_t c = 32;
    std::int64_t segments_min = 2;
    std::int64_t segments_max = 6;
    double noise_sigma = 0.1;
    std::int64_t rater_count = 5;
    double rater_jitter = 1.0;  // each rater offsets each boundary by U(-j, j)
    std::uint64_t seed = 0;
    std::string id_prefix = "video";

    void validate() const {
        if (videos < 1) throw ConfigError("gen: videos must be >= 1");
        if (c < 1) throw ConfigError("gen: feature channels must be >= 1");
        if (segments_min < 2) throw ConfigError("gen: segments_min must be >= 2");
        if (segments_max < segments_min) throw ConfigError("gen: segments_max < segments_min");
        if (t < 5 * segments_max)
            throw ConfigError("gen: T=" + std::to_string(t) + " cannot hold " +
                              std::to_string(segments_max) + " segments of >= 5 frames");
        if (noise_sigma < 0) throw ConfigError("gen: noise_sigma must be >= 0");
        if (rater_count < 1) throw ConfigError("gen: rater_count must be >= 1");
        if (rater_jitter < 0) throw ConfigError("gen: rater_jitter must be >= 0");
    }
};

struct SynthVideo {
    FeatureSequence features;
    AnnotationSet annotation;
    std::vector<double> true_boundaries;  // segment starts, excluding 0
};

// Per video: segment means drawn standard-normal with pairwise distance >= 1
// (rejection), segment lengths >= 5 via a random composition of T, frames =
// mean + N(0, noise_sigma^2) noise, raters = true boundaries + jitter.
std::vector<SynthVideo> generate(const SynthConfig& cfg);

// Picks target_t indices evenly spaced over [0, T-1]; boundaries are scaled
// by target_t / T and rounded to the nearest sampled slot.
std::pair<FeatureSequence, AnnotationSet> sample_uniform(const FeatureSequence& seq,
                                                         const AnnotationSet& annos,
                                                         std::int64_t target_t = 100);

// Features only, same row choice.
FeatureSequence sample_uniform(const FeatureSequence& seq, std::int64_t target_t);

}  // namespace spos
