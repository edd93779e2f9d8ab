#include "spos/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "json.hpp"

namespace spos {

Aggregate aggregate_from_name(const std::string& name) {
    if (name == "video-mean") return Aggregate::video_mean;
    if (name == "corpus-pool") return Aggregate::corpus_pool;
    throw ConfigError("unknown aggregate '" + name + "' (expected video-mean or corpus-pool)");
}

std::string aggregate_name(Aggregate a) {
    return a == Aggregate::video_mean ? "video-mean" : "corpus-pool";
}

std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int i = 1; i <= 10; ++i) t.push_back(0.05 * i);
    return t;
}

std::vector<std::int64_t> extract_boundaries(const std::vector<double>& scores, double tau,
                                             std::int64_t radius) {
    if (tau <= 0 || tau >= 1) throw ContractError("extract_boundaries: tau must be in (0,1)");
    if (radius < 1) throw ContractError("extract_boundaries: radius must be >= 1");
    std::int64_t n = static_cast<std::int64_t>(scores.size());
    auto peak = [&](std::int64_t t) {
        double s = scores[static_cast<std::size_t>(t)];
        if (s < tau) return false;
        std::int64_t lo = std::max<std::int64_t>(0, t - radius);
        std::int64_t hi = std::min<std::int64_t>(n - 1, t + radius);
        for (std::int64_t u = lo; u <= hi; ++u)
            if (scores[static_cast<std::size_t>(u)] > s) return false;
        return true;
    };
    std::vector<std::int64_t> out;
    bool prev_peak = false;
    for (std::int64_t t = 0; t < n; ++t) {
        bool p = peak(t);
        if (p && !(prev_peak && scores[static_cast<std::size_t>(t - 1)] ==
                                    scores[static_cast<std::size_t>(t)]))
            out.push_back(t);
        prev_peak = p;
    }
    return out;
}

MatchResult match_f1(std::vector<double> dets, std::vector<double> gts, double instance_length,
                     double threshold) {
    if (instance_length <= 0) throw ContractError("match_f1: instance_length must be positive");
    if (threshold <= 0) throw ContractError("match_f1: threshold must be positive");
    std::sort(dets.begin(), dets.end());
    std::sort(gts.begin(), gts.end());
    double w = threshold * instance_length;

    // Greedy over detections in temporal order, each taking the earliest
    // still-unmatched ground truth within reach. Ground truths skipped here
    // stay out of reach of every later (larger) detection.
    std::int64_t tp = 0;
    std::size_t gi = 0;
    for (double d : dets) {
        while (gi < gts.size() && gts[gi] < d - w) ++gi;
        if (gi < gts.size() && gts[gi] <= d + w) {
            ++tp;
            ++gi;
        }
    }

    MatchResult r;
    r.tp = tp;
    if (dets.empty() && gts.empty()) {
        r.precision = r.recall = r.f1 = 1.0;
        return r;
    }
    r.precision = dets.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(dets.size());
    r.recall = gts.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gts.size());
    double pr = r.precision + r.recall;
    r.f1 = pr > 0 ? 2.0 * r.precision * r.recall / pr : 0.0;
    return r;
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) s += ", ";
        s += ids[i];
    }
    return s;
}

}  // namespace

EvalReport evaluate(const std::vector<VideoPredictions>& preds,
                    const std::vector<AnnotationSet>& annos,
                    const std::vector<double>& thresholds, Aggregate aggregate) {
    if (thresholds.empty()) throw ContractError("evaluate: need at least one threshold");
    for (double th : thresholds)
        if (th <= 0) throw ContractError("evaluate: thresholds must be positive");

    std::map<std::string, const AnnotationSet*> by_id;
    for (const auto& a : annos)
        if (!by_id.emplace(a.video_id, &a).second)
            throw EvalError("duplicate annotation for video '" + a.video_id + "'");

    std::vector<const VideoPredictions*> vp;
    vp.reserve(preds.size());
    for (const auto& p : preds) vp.push_back(&p);
    std::sort(vp.begin(), vp.end(),
              [](const VideoPredictions* a, const VideoPredictions* b) {
                  return a->video_id < b->video_id;
              });
    for (std::size_t i = 1; i < vp.size(); ++i)
        if (vp[i]->video_id == vp[i - 1]->video_id)
            throw EvalError("duplicate predictions for video '" + vp[i]->video_id + "'");

    std::vector<std::string> without_anno, without_pred;
    std::set<std::string> pred_ids;
    for (const auto* p : vp) {
        pred_ids.insert(p->video_id);
        if (!by_id.count(p->video_id)) without_anno.push_back(p->video_id);
    }
    for (const auto& [id, a] : by_id)
        if (!pred_ids.count(id)) without_pred.push_back(id);
    if (!without_anno.empty())
        throw EvalError("no annotation for predicted videos: " + join_ids(without_anno));
    if (!without_pred.empty())
        throw EvalError("no predictions for annotated videos: " + join_ids(without_pred));
    if (vp.empty()) throw EvalError("evaluate: no videos");
    for (const auto* p : vp) by_id.at(p->video_id)->validate();

    EvalReport rep;
    rep.aggregate = aggregate;
    rep.videos = static_cast<std::int64_t>(vp.size());
    for (double th : thresholds) {
        EvalColumn col;
        col.threshold = th;
        double sum_p = 0, sum_r = 0, sum_f = 0;
        std::int64_t pool_tp = 0, pool_dets = 0, pool_gts = 0;
        for (const auto* p : vp) {
            const AnnotationSet& a = *by_id.at(p->video_id);
            double best_p = 0, best_r = 0, best_f = 0;
            MatchResult chosen;
            std::size_t chosen_rater = 0;
            for (std::size_t ri = 0; ri < a.raters.size(); ++ri) {
                MatchResult m = match_f1(p->boundaries, a.raters[ri], a.instance_length, th);
                best_p = std::max(best_p, m.precision);
                best_r = std::max(best_r, m.recall);
                if (ri == 0 || m.f1 > best_f) {
                    chosen = m;
                    chosen_rater = ri;
                }
                best_f = std::max(best_f, m.f1);
            }
            sum_p += best_p;
            sum_r += best_r;
            sum_f += best_f;
            pool_tp += chosen.tp;
            pool_dets += static_cast<std::int64_t>(p->boundaries.size());
            pool_gts += static_cast<std::int64_t>(a.raters[chosen_rater].size());
        }
        if (aggregate == Aggregate::video_mean) {
            col.precision = sum_p / static_cast<double>(rep.videos);
            col.recall = sum_r / static_cast<double>(rep.videos);
            col.f1 = sum_f / static_cast<double>(rep.videos);
        } else if (pool_dets == 0 && pool_gts == 0) {
            col.precision = col.recall = col.f1 = 1.0;
        } else {
            col.precision = pool_dets ? static_cast<double>(pool_tp) / static_cast<double>(pool_dets) : 0.0;
            col.recall = pool_gts ? static_cast<double>(pool_tp) / static_cast<double>(pool_gts) : 0.0;
            double pr = col.precision + col.recall;
            col.f1 = pr > 0 ? 2.0 * col.precision * col.recall / pr : 0.0;
        }
        rep.columns.push_back(col);
    }
    for (const auto& c : rep.columns) {
        rep.avg_precision += c.precision;
        rep.avg_recall += c.recall;
        rep.avg_f1 += c.f1;
    }
    rep.avg_precision /= static_cast<double>(rep.columns.size());
    rep.avg_recall /= static_cast<double>(rep.columns.size());
    rep.avg_f1 /= static_cast<double>(rep.columns.size());
    return rep;
}

std::string format_report(const EvalReport& rep) {
    char buf[64];
    std::string out = "Rel.Dis.  ";
    for (const auto& c : rep.columns) {
        std::snprintf(buf, sizeof(buf), "%7.2f", c.threshold);
        out += buf;
    }
    out += "     avg\n";
    auto row = [&](const char* name, auto value, double avg) {
        std::snprintf(buf, sizeof(buf), "%-10s", name);
        out += buf;
        for (const auto& c : rep.columns) {
            std::snprintf(buf, sizeof(buf), "%7.3f", value(c));
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "%8.3f\n", avg);
        out += buf;
    };
    row("precision", [](const EvalColumn& c) { return c.precision; }, rep.avg_precision);
    row("recall", [](const EvalColumn& c) { return c.recall; }, rep.avg_recall);
    row("F1", [](const EvalColumn& c) { return c.f1; }, rep.avg_f1);
    std::snprintf(buf, sizeof(buf), "videos %lld, aggregate %s\n",
                  static_cast<long long>(rep.videos), aggregate_name(rep.aggregate).c_str());
    out += buf;
    return out;
}

std::string report_json(const EvalReport& rep) {
    nlohmann::json j;
    j["aggregate"] = aggregate_name(rep.aggregate);
    j["videos"] = rep.videos;
    std::vector<double> th, pr, rc, f1;
    for (const auto& c : rep.columns) {
        th.push_back(c.threshold);
        pr.push_back(c.precision);
        rc.push_back(c.recall);
        f1.push_back(c.f1);
    }
    j["thresholds"] = th;
    j["precision"] = pr;
    j["recall"] = rc;
    j["f1"] = f1;
    j["avg"] = {{"precision", rep.avg_precision},
                {"recall", rep.avg_recall},
                {"f1", rep.avg_f1}};
    return j.dump(2);
}

}  // namespace spos
