#include <CLI11.hpp>

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spos/dataio.hpp"
#include "spos/eval.hpp"
#include "spos/model.hpp"
#include "spos/partition.hpp"
#include "spos/training.hpp"

namespace fs = std::filesystem;
using namespace spos;

namespace {

void ensure_parent_dir(const std::string& path) {
    fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out.good()) throw IoError("cannot write '" + path + "'");
}

std::vector<std::string> sorted_files(const std::string& dir, const std::string& suffix) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir + "'");
    std::vector<std::string> paths;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string p = e.path().string();
        if (e.is_regular_file() && p.size() >= suffix.size() &&
            p.compare(p.size() - suffix.size(), suffix.size(), suffix) == 0)
            paths.push_back(p);
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw IoError("no *" + suffix + " files in '" + dir + "'");
    return paths;
}

std::vector<FeatureSequence> load_feature_dir(const std::string& dir) {
    std::vector<FeatureSequence> out;
    for (const std::string& p : sorted_files(dir, ".feat")) out.push_back(read_features(p));
    return out;
}

// Pairs every feature sequence with its annotation and resamples both to
// target_t frames (0 keeps native lengths). Annotations without features are
// ignored so one file can cover several splits.
std::vector<VideoSample> join_samples(const std::vector<FeatureSequence>& feats,
                                      const std::vector<AnnotationSet>& annos,
                                      std::int64_t target_t) {
    std::map<std::string, const AnnotationSet*> by_id;
    for (const AnnotationSet& a : annos) {
        if (!by_id.emplace(a.video_id, &a).second)
            throw EvalError("duplicate annotation for video '" + a.video_id + "'");
    }
    std::vector<VideoSample> out;
    out.reserve(feats.size());
    for (const FeatureSequence& f : feats) {
        auto it = by_id.find(f.video_id);
        if (it == by_id.end()) throw EvalError("no annotation for video '" + f.video_id + "'");
        if (target_t > 0 && f.t != target_t) {
            auto [seq, an] = sample_uniform(f, *it->second, target_t);
            out.push_back({std::move(seq), std::move(an)});
        } else {
            out.push_back({f, *it->second});
        }
        if (f.c != feats[0].c)
            throw DimError("video '" + f.video_id + "' has " + std::to_string(f.c) +
                           " channels, '" + feats[0].video_id + "' has " +
                           std::to_string(feats[0].c));
    }
    return out;
}

struct GenOpts {
    std::string out;
    std::int64_t videos = 200;
    std::int64_t val_videos = 50;
    std::int64_t t = 100;
    std::int64_t c = 32;
    std::int64_t segments_min = 2;
    std::int64_t segments_max = 6;
    double noise = 0.1;
    std::int64_t raters = 5;
    double jitter = 1.0;
    std::uint64_t seed = 0;
};

void write_split(const std::string& dir, const SynthConfig& cfg) {
    fs::create_directories(dir + "/features");
    std::vector<AnnotationSet> annos;
    for (SynthVideo& v : generate(cfg)) {
        write_features(dir + "/features/" + v.features.video_id + ".feat", v.features);
        annos.push_back(std::move(v.annotation));
    }
    write_annotations(dir + "/annotations.json", annos);
}

int run_gen(const GenOpts& o) {
    SynthConfig cfg;
    cfg.videos = o.videos;
    cfg.t = o.t;
    cfg.c = o.c;
    cfg.segments_min = o.segments_min;
    cfg.segments_max = o.segments_max;
    cfg.noise_sigma = o.noise;
    cfg.rater_count = o.raters;
    cfg.rater_jitter = o.jitter;
    cfg.seed = o.seed;
    cfg.id_prefix = "train";
    write_split(o.out + "/train", cfg);

    if (o.val_videos > 0) {
        cfg.videos = o.val_videos;
        cfg.seed = o.seed + 1;
        cfg.id_prefix = "val";
        write_split(o.out + "/val", cfg);
    }
    std::printf("wrote %" PRId64 " train + %" PRId64 " val videos under %s\n", o.videos,
                o.val_videos, o.out.c_str());
    return 0;
}

struct TrainOpts {
    std::string features, annos, val_features, val_annos;
    std::string out_ckpt, report_path;
    std::int64_t k = 8;
    std::int64_t channels = 256;
    std::int64_t groups = 4;
    std::int64_t layers = 6;
    std::int64_t heads = 4;
    std::string temporal = "transformer";
    std::string similarity = "cosine";
    std::string loss = "bce";
    std::string smoothing = "on";
    double sigma = 1.0;
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::int64_t epochs = 30;
    std::vector<std::int64_t> lr_drops = {16, 24};
    std::int64_t batch_videos = 4;
    std::int64_t target_t = 100;
    std::uint64_t seed = 0;
};

int run_train(const TrainOpts& o) {
    std::vector<VideoSample> train =
        join_samples(load_feature_dir(o.features), read_annotations(o.annos), o.target_t);
    std::vector<VideoSample> val;
    if (!o.val_features.empty()) {
        if (o.val_annos.empty()) throw ConfigError("--val-annos is required with --val-features");
        val = join_samples(load_feature_dir(o.val_features), read_annotations(o.val_annos),
                           o.target_t);
    }

    ModelConfig mc;
    mc.in_dim = train[0].features.c;
    mc.model_dim = o.channels;
    mc.k = o.k;
    mc.groups = o.groups;
    mc.metric = metric_from_name(o.similarity);
    mc.encoder.kind = encoder_kind_from_name(o.temporal);
    mc.encoder.layers = o.layers;
    mc.encoder.heads = o.heads;

    TrainConfig tc;
    tc.loss = loss_from_name(o.loss);
    tc.smoothing = smoothing_from_name(o.smoothing);
    tc.sigma = o.sigma;
    tc.lr = o.lr;
    tc.momentum = o.momentum;
    tc.weight_decay = o.weight_decay;
    tc.epochs = o.epochs;
    tc.batch_videos = o.batch_videos;
    tc.seed = o.seed;
    tc.lr_drops.clear();
    for (std::int64_t d : o.lr_drops)  // a drop past the last epoch can never fire
        if (d < o.epochs) tc.lr_drops.push_back(d);

    Model model(mc, o.seed);
    std::printf("training on %zu videos (%zu val), %" PRId64 " parameters\n", train.size(),
                val.size(), model.params().count_scalars());
    std::fflush(stdout);

    auto stream_epoch = [](const EpochRecord& rec) {
        TrainReport one;
        one.epochs.push_back(rec);
        std::fputs(format_train_report(one).c_str(), stdout);
        std::fflush(stdout);
    };
    if (!o.out_ckpt.empty()) ensure_parent_dir(o.out_ckpt);
    TrainReport rep = train_loop(model, train, val, tc, o.out_ckpt, stream_epoch);

    if (!o.report_path.empty()) write_text(o.report_path, format_train_report(rep));
    if (!o.out_ckpt.empty() && o.epochs > 0)
        std::printf("saved checkpoint to %s\n", o.out_ckpt.c_str());
    return 0;
}

struct PredictOpts {
    std::string ckpt, features, out;
    std::int64_t target_t = 100;
};

int run_predict(const PredictOpts& o) {
    Model model = load_model<float>(o.ckpt);
    std::vector<FeatureSequence> feats = load_feature_dir(o.features);
    fs::create_directories(o.out);
    NoGrad ng;
    for (const FeatureSequence& f : feats) {
        const FeatureSequence& seq =
            (o.target_t > 0 && f.t != o.target_t) ? sample_uniform(f, o.target_t) : f;
        auto frames = TensorT<float>::from_values(Shape{seq.t, seq.c}, seq.values);
        ScoreSequenceT<float> s = model.forward(frames);
        std::string text;
        char buf[32];
        for (float v : s.scores.val()) {
            std::snprintf(buf, sizeof(buf), "%.9g\n", static_cast<double>(v));
            text += buf;
        }
        write_text(o.out + "/" + f.video_id + ".scores.txt", text);
    }
    std::printf("wrote %zu score files to %s\n", feats.size(), o.out.c_str());
    return 0;
}

struct EvalOpts {
    std::string preds, annos, json_out;
    double tau = 0.5;
    std::int64_t radius = 2;
    std::string aggregate = "video-mean";
};

std::vector<double> read_scores(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open '" + path + "'");
    std::vector<double> scores;
    double v = 0;
    while (in >> v) scores.push_back(v);
    if (!in.eof()) throw IoError("'" + path + "' is not one score per line");
    if (scores.empty()) throw IoError("'" + path + "' holds no scores");
    return scores;
}

int run_eval(const EvalOpts& o) {
    std::vector<AnnotationSet> annos = read_annotations(o.annos);
    std::map<std::string, double> length_by_id;
    for (const AnnotationSet& a : annos) length_by_id[a.video_id] = a.instance_length;

    std::vector<VideoPredictions> preds;
    for (const std::string& path : sorted_files(o.preds, ".scores.txt")) {
        std::vector<double> scores = read_scores(path);
        VideoPredictions vp;
        vp.video_id = fs::path(path).stem().stem().string();
        // detections live on the score timeline; stretch them onto the
        // annotated one so Rel.Dis. compares like with like
        double scale = 1.0;
        auto it = length_by_id.find(vp.video_id);
        if (it != length_by_id.end())
            scale = it->second / static_cast<double>(scores.size());
        for (std::int64_t b : extract_boundaries(scores, o.tau, o.radius))
            vp.boundaries.push_back(static_cast<double>(b) * scale);
        preds.push_back(std::move(vp));
    }

    EvalReport rep = evaluate(preds, annos, default_thresholds(), aggregate_from_name(o.aggregate));
    std::fputs(format_report(rep).c_str(), stdout);
    if (!o.json_out.empty()) write_text(o.json_out, report_json(rep));
    return 0;
}

struct BenchOpts {
    std::int64_t k = 8;
    std::int64_t channels = 256;
    std::vector<std::int64_t> t_grid = {50, 100, 200, 400};
    bool assert_local_cheaper = false;
};

int run_bench(const BenchOpts& o) {
    std::printf("K=%" PRId64 " C=%" PRId64 "\n", o.k, o.channels);
    std::printf("%8s %16s %16s %16s %14s\n", "T", "context-ops", "local-attn", "global-attn",
                "local/global");
    bool local_cheaper = true;
    for (std::int64_t t : o.t_grid) {
        std::uint64_t ops = count_context_ops(t, o.k, o.channels);
        std::uint64_t local = attention_cost_local(t, o.k, o.channels);
        std::uint64_t global = attention_cost_global(t, o.channels);
        std::printf("%8" PRId64 " %16" PRIu64 " %16" PRIu64 " %16" PRIu64 " %14.4f\n", t, ops,
                    local, global, static_cast<double>(local) / static_cast<double>(global));
        if (local >= global) {
            local_cheaper = false;
            if (o.assert_local_cheaper)
                std::fprintf(stderr,
                             "local attention is not cheaper at T=%" PRId64 ": %" PRIu64
                             " >= %" PRIu64 "\n",
                             t, local, global);
        }
    }
    return (o.assert_local_cheaper && !local_cheaper) ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"structured context windows for generic event boundary detection"};
    app.require_subcommand(1);

    GenOpts g;
    CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic change point corpus");
    gen->add_option("--out", g.out, "output root, gets train/ and val/ subtrees")->required();
    gen->add_option("--videos", g.videos, "training videos")->capture_default_str();
    gen->add_option("--val-videos", g.val_videos, "validation videos, 0 skips the split")
        ->capture_default_str();
    gen->add_option("--t", g.t, "frames per video")->capture_default_str();
    gen->add_option("--c", g.c, "feature channels")->capture_default_str();
    gen->add_option("--segments-min", g.segments_min, "fewest segments per video")
        ->capture_default_str();
    gen->add_option("--segments-max", g.segments_max, "most segments per video")
        ->capture_default_str();
    gen->add_option("--noise", g.noise, "frame noise sigma")->capture_default_str();
    gen->add_option("--raters", g.raters, "annotators per video")->capture_default_str();
    gen->add_option("--jitter", g.jitter, "rater jitter half width, frames")
        ->capture_default_str();
    gen->add_option("--seed", g.seed, "rng seed, val uses seed+1")->capture_default_str();

    TrainOpts t;
    CLI::App* train = app.add_subcommand("train", "fit a boundary detector");
    train->add_option("--features", t.features, "directory of .feat files")->required();
    train->add_option("--annos", t.annos, "annotations json")->required();
    train->add_option("--val-features", t.val_features, "validation feature directory");
    train->add_option("--val-annos", t.val_annos, "validation annotations json");
    train->add_option("--k", t.k, "half window K")->capture_default_str();
    train->add_option("--channels", t.channels, "model width C")->capture_default_str();
    train->add_option("--groups", t.groups, "similarity groups G")->capture_default_str();
    train->add_option("--temporal-model", t.temporal, "transformer | gru | lstm")
        ->check(CLI::IsMember({"transformer", "gru", "lstm"}))
        ->capture_default_str();
    train->add_option("--layers", t.layers, "encoder layers")->capture_default_str();
    train->add_option("--heads", t.heads, "attention heads")->capture_default_str();
    train->add_option("--similarity", t.similarity, "cosine | euclidean | manhattan | chebyshev")
        ->check(CLI::IsMember({"cosine", "euclidean", "manhattan", "chebyshev"}))
        ->capture_default_str();
    train->add_option("--loss", t.loss, "bce | mse")
        ->check(CLI::IsMember({"bce", "mse"}))
        ->capture_default_str();
    train->add_option("--smoothing", t.smoothing, "gaussian label smoothing, on | off")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    train->add_option("--sigma", t.sigma, "label kernel width")->capture_default_str();
    train->add_option("--lr", t.lr, "learning rate")->capture_default_str();
    train->add_option("--momentum", t.momentum, "sgd momentum")->capture_default_str();
    train->add_option("--weight-decay", t.weight_decay, "l2 coefficient")->capture_default_str();
    train->add_option("--epochs", t.epochs, "training epochs")->capture_default_str();
    train->add_option("--lr-drops", t.lr_drops, "epochs where lr divides by 10")
        ->delimiter(',')
        ->capture_default_str();
    train->add_option("--batch-videos", t.batch_videos, "videos per sgd step")
        ->capture_default_str();
    train->add_option("--target-t", t.target_t, "resample videos to this length, 0 keeps native")
        ->capture_default_str();
    train->add_option("--seed", t.seed, "init and shuffle seed")->capture_default_str();
    train->add_option("--out", t.out_ckpt, "checkpoint path")->required();
    train->add_option("--report", t.report_path, "write the per epoch report here");

    PredictOpts p;
    CLI::App* predict = app.add_subcommand("predict", "score sequences with a checkpoint");
    predict->add_option("--ckpt", p.ckpt, "checkpoint path")->required();
    predict->add_option("--features", p.features, "directory of .feat files")->required();
    predict->add_option("--out", p.out, "directory for <video_id>.scores.txt files")->required();
    predict->add_option("--target-t", p.target_t, "resample videos to this length, 0 keeps native")
        ->capture_default_str();

    EvalOpts e;
    CLI::App* eval = app.add_subcommand("eval", "score predictions against annotations");
    eval->add_option("--preds", e.preds, "directory of .scores.txt files")->required();
    eval->add_option("--annos", e.annos, "annotations json")->required();
    eval->add_option("--tau", e.tau, "score threshold for boundary extraction")
        ->capture_default_str();
    eval->add_option("--radius", e.radius, "peak window half width, frames")
        ->capture_default_str();
    eval->add_option("--aggregate", e.aggregate, "video-mean | corpus-pool")
        ->check(CLI::IsMember({"video-mean", "corpus-pool"}))
        ->capture_default_str();
    eval->add_option("--json", e.json_out, "also write the report as json here");

    BenchOpts b;
    CLI::App* bench = app.add_subcommand("bench", "op counts for local vs global attention");
    bench->add_option("--k", b.k, "half window K")->capture_default_str();
    bench->add_option("--channels", b.channels, "model width C")->capture_default_str();
    bench->add_option("--t-grid", b.t_grid, "sequence lengths to tabulate")
        ->delimiter(',')
        ->capture_default_str();
    bench->add_flag("--assert-local-cheaper", b.assert_local_cheaper,
                    "exit nonzero when local attention costs at least as much as global");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return run_gen(g);
        if (train->parsed()) return run_train(t);
        if (predict->parsed()) return run_predict(p);
        if (eval->parsed()) return run_eval(e);
        if (bench->parsed()) return run_bench(b);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    } catch (const Error& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 1;
    }
    return 0;
}
