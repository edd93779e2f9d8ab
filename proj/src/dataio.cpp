#include "spos/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "json.hpp"

#include "bytes.hpp"

namespace spos {

namespace {
constexpr char kFeatMagic[] = "SPOSFEAT";
constexpr std::uint32_t kFeatVersion = 1;
}  // namespace

void write_features(const std::string& path, const FeatureSequence& seq) {
    if (seq.t < 1 || seq.c < 1)
        throw ContractError("features '" + seq.video_id + "': T and C must be >= 1");
    if (static_cast<std::int64_t>(seq.values.size()) != seq.t * seq.c)
        throw ContractError("features '" + seq.video_id + "': payload holds " +
                            std::to_string(seq.values.size()) + " values, expected " +
                            std::to_string(seq.t * seq.c));
    std::string out;
    out.reserve(20 + seq.values.size() * 4);
    out.append(kFeatMagic, 8);
    bytes::put_u32(out, kFeatVersion);
    bytes::put_u32(out, static_cast<std::uint32_t>(seq.t));
    bytes::put_u32(out, static_cast<std::uint32_t>(seq.c));
    for (float v : seq.values) bytes::put_scalar(out, v);
    bytes::write_file(path, out);
}

FeatureSequence read_features(const std::string& path) {
    bytes::Reader r = bytes::read_file(path);
    std::string magic = r.bytes(8);
    if (std::memcmp(magic.data(), kFeatMagic, 8) != 0)
        throw IoError("'" + path + "' is not a feature file (bad magic)");
    std::uint32_t version = r.u32();
    if (version != kFeatVersion)
        throw IoError("feature file '" + path + "' has unsupported version " +
                      std::to_string(version));
    FeatureSequence seq;
    seq.video_id = std::filesystem::path(path).stem().string();
    seq.t = r.u32();
    seq.c = r.u32();
    if (seq.t < 1 || seq.c < 1) throw IoError("feature file '" + path + "' has empty dimensions");
    seq.values.resize(static_cast<std::size_t>(seq.t * seq.c));
    for (float& v : seq.values) r.scalar(v);
    if (r.pos != r.buf.size()) throw IoError("feature file '" + path + "' has trailing bytes");
    return seq;
}

void write_annotations(const std::string& path, const std::vector<AnnotationSet>& annos) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& a : annos) {
        a.validate();
        j.push_back({{"video_id", a.video_id},
                     {"instance_length", a.instance_length},
                     {"raters", a.raters}});
    }
    bytes::write_file(path, j.dump(2) + "\n");
}

std::vector<AnnotationSet> read_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        nlohmann::json j = nlohmann::json::parse(text);
        std::vector<AnnotationSet> out;
        out.reserve(j.size());
        for (const auto& rec : j) {
            AnnotationSet a;
            a.video_id = rec.at("video_id").get<std::string>();
            a.instance_length = rec.at("instance_length").get<double>();
            a.raters = rec.at("raters").get<std::vector<std::vector<double>>>();
            a.validate();
            out.push_back(std::move(a));
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw AnnotationError("annotations '" + path + "': " + e.what());
    }
}

std::vector<SynthVideo> generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<SynthVideo> out;
    out.reserve(static_cast<std::size_t>(cfg.videos));
    std::size_t c = static_cast<std::size_t>(cfg.c);
    for (std::int64_t vi = 0; vi < cfg.videos; ++vi) {
        std::int64_t m = rng.uniform_int(cfg.segments_min, cfg.segments_max);

        // segment means: standard normal, pairwise distance >= 1 by rejection
        std::vector<std::vector<double>> means;
        means.reserve(static_cast<std::size_t>(m));
        for (std::int64_t s = 0; s < m; ++s) {
            for (int attempt = 0;; ++attempt) {
                if (attempt >= 1000)
                    throw ConfigError("gen: cannot place " + std::to_string(m) +
                                      " segment means 1 apart in " + std::to_string(cfg.c) +
                                      " channels");
                std::vector<double> mu(c);
                for (auto& x : mu) x = rng.normal();
                bool ok = true;
                for (const auto& prev : means) {
                    double d2 = 0;
                    for (std::size_t i = 0; i < c; ++i)
                        d2 += (mu[i] - prev[i]) * (mu[i] - prev[i]);
                    if (d2 < 1.0) {
                        ok = false;
                        break;
                    }
                }
                if (ok) {
                    means.push_back(std::move(mu));
                    break;
                }
            }
        }

        // lengths = 5 + a random composition of the surplus (sorted cuts)
        std::int64_t extra = cfg.t - 5 * m;
        std::vector<std::int64_t> cut(static_cast<std::size_t>(m) + 1);
        cut.front() = 0;
        cut.back() = extra;
        for (std::int64_t i = 1; i < m; ++i)
            cut[static_cast<std::size_t>(i)] = rng.uniform_int(0, extra);
        std::sort(cut.begin(), cut.end());

        SynthVideo v;
        char idbuf[64];
        std::snprintf(idbuf, sizeof(idbuf), "%s_%05lld", cfg.id_prefix.c_str(),
                      static_cast<long long>(vi));
        v.features.video_id = idbuf;
        v.features.t = cfg.t;
        v.features.c = cfg.c;
        v.features.values.resize(static_cast<std::size_t>(cfg.t * cfg.c));
        std::int64_t pos = 0;
        for (std::int64_t s = 0; s < m; ++s) {
            if (s > 0) v.true_boundaries.push_back(static_cast<double>(pos));
            std::int64_t len = 5 + cut[static_cast<std::size_t>(s + 1)] -
                               cut[static_cast<std::size_t>(s)];
            const auto& mu = means[static_cast<std::size_t>(s)];
            for (std::int64_t f = 0; f < len; ++f, ++pos)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double noise = cfg.noise_sigma > 0 ? rng.normal(0.0, cfg.noise_sigma) : 0.0;
                    v.features.values[static_cast<std::size_t>(pos) * c + ch] =
                        static_cast<float>(mu[ch] + noise);
                }
        }

        v.annotation.video_id = v.features.video_id;
        v.annotation.instance_length = static_cast<double>(cfg.t);
        for (std::int64_t r = 0; r < cfg.rater_count; ++r) {
            std::vector<double> rb;
            rb.reserve(v.true_boundaries.size());
            for (double b : v.true_boundaries) {
                double p = b;
                if (cfg.rater_jitter > 0) p += rng.uniform(-cfg.rater_jitter, cfg.rater_jitter);
                rb.push_back(std::clamp(p, 0.0, static_cast<double>(cfg.t - 1)));
            }
            std::sort(rb.begin(), rb.end());
            rb.erase(std::unique(rb.begin(), rb.end()), rb.end());
            v.annotation.raters.push_back(std::move(rb));
        }
        out.push_back(std::move(v));
    }
    return out;
}

FeatureSequence sample_uniform(const FeatureSequence& seq, std::int64_t target_t) {
    if (seq.t < 1) throw ContractError("sample_uniform: empty sequence");
    if (target_t < 1) throw ContractError("sample_uniform: target_t must be >= 1");
    if (static_cast<std::int64_t>(seq.values.size()) != seq.t * seq.c)
        throw ContractError("sample_uniform: payload size mismatch for '" + seq.video_id + "'");

    FeatureSequence out;
    out.video_id = seq.video_id;
    out.t = target_t;
    out.c = seq.c;
    out.values.resize(static_cast<std::size_t>(target_t * seq.c));
    std::size_t c = static_cast<std::size_t>(seq.c);
    for (std::int64_t i = 0; i < target_t; ++i) {
        std::int64_t idx = target_t == 1
                               ? 0
                               : std::llround(static_cast<double>(i) *
                                              static_cast<double>(seq.t - 1) /
                                              static_cast<double>(target_t - 1));
        std::memcpy(out.values.data() + static_cast<std::size_t>(i) * c,
                    seq.values.data() + static_cast<std::size_t>(idx) * c, c * sizeof(float));
    }
    return out;
}

std::pair<FeatureSequence, AnnotationSet> sample_uniform(const FeatureSequence& seq,
                                                         const AnnotationSet& annos,
                                                         std::int64_t target_t) {
    FeatureSequence out = sample_uniform(seq, target_t);

    AnnotationSet an;
    an.video_id = annos.video_id;
    an.instance_length = static_cast<double>(target_t);
    double ratio = static_cast<double>(target_t) / static_cast<double>(seq.t);
    for (const auto& rater : annos.raters) {
        std::vector<double> rb;
        rb.reserve(rater.size());
        for (double b : rater) {
            std::int64_t slot = std::llround(b * ratio);
            slot = std::clamp<std::int64_t>(slot, 0, target_t - 1);
            rb.push_back(static_cast<double>(slot));
        }
        std::sort(rb.begin(), rb.end());
        an.raters.push_back(std::move(rb));
    }
    return {std::move(out), std::move(an)};
}

}  // namespace spos
