#include "spos/model.hpp"

#include <cstring>

#include "json.hpp"

#include "bytes.hpp"

namespace spos {

namespace {

using nlohmann::json;

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[] = "SPOSCKPT";  // 8 bytes on disk, no terminator

bytes::Reader open_checkpoint(const std::string& path, std::uint32_t want_width) {
    bytes::Reader r = bytes::read_file(path);
    std::string magic = r.bytes(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0)
        throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    std::uint32_t version = r.u32();
    if (version != kVersion)
        throw IoError("checkpoint '" + path + "' has unsupported version " +
                      std::to_string(version));
    std::uint32_t width = r.u32();
    if (width != 4 && width != 8)
        throw IoError("checkpoint '" + path + "' has unsupported scalar width " +
                      std::to_string(width));
    if (want_width != 0 && width != want_width)
        throw IoError("checkpoint '" + path + "' stores " + std::to_string(width) +
                      "-byte scalars, expected " + std::to_string(want_width));
    return r;
}

}  // namespace

std::string model_config_json(const ModelConfig& cfg) {
    json j;
    j["in_dim"] = cfg.in_dim;
    j["model_dim"] = cfg.model_dim;
    j["k"] = cfg.k;
    j["groups"] = cfg.groups;
    j["metric"] = metric_name(cfg.metric);
    j["clamp_right_to_real"] = cfg.clamp_right_to_real;
    j["encoder"] = {{"kind", encoder_kind_name(cfg.encoder.kind)},
                    {"layers", cfg.encoder.layers},
                    {"heads", cfg.encoder.heads},
                    {"ffn_dim", cfg.encoder.ffn_dim},
                    {"positional", positional_name(cfg.encoder.positional)}};
    j["head"] = {{"fcn_channels", cfg.head.fcn_channels},
                 {"fcn_kernel", cfg.head.fcn_kernel},
                 {"scorer_channels", cfg.head.scorer_channels},
                 {"scorer_kernel", cfg.head.scorer_kernel}};
    return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
    try {
        json j = json::parse(text);
        ModelConfig cfg;
        cfg.in_dim = j.at("in_dim").get<std::int64_t>();
        cfg.model_dim = j.at("model_dim").get<std::int64_t>();
        cfg.k = j.at("k").get<std::int64_t>();
        cfg.groups = j.at("groups").get<std::int64_t>();
        cfg.metric = metric_from_name(j.at("metric").get<std::string>());
        cfg.clamp_right_to_real = j.at("clamp_right_to_real").get<bool>();
        const json& e = j.at("encoder");
        cfg.encoder.kind = encoder_kind_from_name(e.at("kind").get<std::string>());
        cfg.encoder.layers = e.at("layers").get<std::int64_t>();
        cfg.encoder.heads = e.at("heads").get<std::int64_t>();
        cfg.encoder.ffn_dim = e.at("ffn_dim").get<std::int64_t>();
        cfg.encoder.positional = positional_from_name(e.at("positional").get<std::string>());
        const json& h = j.at("head");
        cfg.head.fcn_channels = h.at("fcn_channels").get<std::vector<std::int64_t>>();
        cfg.head.fcn_kernel = h.at("fcn_kernel").get<std::int64_t>();
        cfg.head.scorer_channels = h.at("scorer_channels").get<std::vector<std::int64_t>>();
        cfg.head.scorer_kernel = h.at("scorer_kernel").get<std::int64_t>();
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
}

template <class S>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStoreT<S>& params) {
    std::string out;
    out.append(kMagic, 8);
    bytes::put_u32(out, kVersion);
    bytes::put_u32(out, static_cast<std::uint32_t>(sizeof(S)));
    std::string config = model_config_json(cfg);
    bytes::put_u32(out, static_cast<std::uint32_t>(config.size()));
    out += config;
    bytes::put_u32(out, static_cast<std::uint32_t>(params.list().size()));
    for (const auto& p : params.list()) {
        bytes::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        TensorT<S> t = p.tensor;
        bytes::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::int64_t a = 0; a < t.rank(); ++a)
            bytes::put_u64(out, static_cast<std::uint64_t>(t.extent(a)));
        for (S v : t.val()) bytes::put_scalar(out, v);
    }
    bytes::write_file(path, out);
}

ModelConfig checkpoint_config(const std::string& path) {
    bytes::Reader r = open_checkpoint(path, 0);
    std::uint32_t len = r.u32();
    return model_config_from_json(r.bytes(len));
}

template <class S>
void load_checkpoint(const std::string& path, ParamStoreT<S>& params) {
    bytes::Reader r = open_checkpoint(path, static_cast<std::uint32_t>(sizeof(S)));
    r.bytes(r.u32());  // config, handled by checkpoint_config
    std::uint32_t count = r.u32();
    if (count != params.list().size())
        throw IoError("checkpoint '" + path + "' holds " + std::to_string(count) +
                      " tensors, model has " + std::to_string(params.list().size()));
    for (const auto& p : params.list()) {
        std::string name = r.bytes(r.u32());
        if (name != p.name)
            throw IoError("checkpoint '" + path + "': expected tensor '" + p.name + "', found '" +
                          name + "'");
        std::uint32_t rank = r.u32();
        TensorT<S> t = p.tensor;
        if (rank != static_cast<std::uint32_t>(t.rank()))
            throw IoError("checkpoint '" + path + "': tensor '" + name + "' has rank " +
                          std::to_string(rank) + ", model expects " + std::to_string(t.rank()));
        for (std::int64_t a = 0; a < t.rank(); ++a) {
            std::uint64_t e = r.u64();
            if (e != static_cast<std::uint64_t>(t.extent(a)))
                throw IoError("checkpoint '" + path + "': tensor '" + name + "' extent " +
                              std::to_string(a) + " is " + std::to_string(e) +
                              ", model expects " + std::to_string(t.extent(a)));
        }
        for (S& v : t.val()) r.scalar(v);
    }
}

template void save_checkpoint<float>(const std::string&, const ModelConfig&,
                                     const ParamStoreT<float>&);
template void save_checkpoint<double>(const std::string&, const ModelConfig&,
                                      const ParamStoreT<double>&);
template void load_checkpoint<float>(const std::string&, ParamStoreT<float>&);
template void load_checkpoint<double>(const std::string&, ParamStoreT<double>&);

}  // namespace spos
