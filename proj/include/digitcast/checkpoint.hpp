#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "digitcast/config.hpp"
#include "digitcast/model.hpp"
#include "digitcast/tokenizer.hpp"

namespace digitcast {

// Checkpoint container: magic, format version, a JSON manifest (model and
// tokenizer config plus a tensor directory), then raw little-endian doubles
// in visit_tensors order. The manifest makes a checkpoint self-contained
// for sampling.
inline constexpr char kCheckpointMagic[4] = {'D', 'C', 'K', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Parameters params;
    TokenizerConfig tokenizer;
};

namespace detail {

inline void write_atomic(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out.is_open()) throw RuntimeFailure("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out.good()) throw RuntimeFailure("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Parameters& params,
                            const TokenizerConfig& tok_cfg) {
    json manifest;
    manifest["artifact_version"] = version();
    manifest["byte_order"] = "little";
    manifest["model"] = model_to_json(params.config);
    manifest["tokenizer"] = tokenizer_to_json(tok_cfg);
    json tensors = json::array();
    uint64_t offset = 0;
    visit_tensors(const_cast<Parameters&>(params),
                  [&](const std::string& name, std::vector<double>& t, TensorKind) {
                      tensors.push_back({{"name", name}, {"count", t.size()}, {"offset", offset}});
                      offset += t.size();
                  });
    manifest["tensors"] = tensors;
    std::string header = manifest.dump();

    std::string bytes;
    bytes.reserve(16 + header.size() + offset * sizeof(double));
    bytes.append(kCheckpointMagic, 4);
    uint32_t ver = kCheckpointVersion;
    bytes.append(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = header.size();
    bytes.append(reinterpret_cast<const char*>(&hlen), 8);
    bytes.append(header);
    visit_tensors(const_cast<Parameters&>(params),
                  [&](const std::string&, std::vector<double>& t, TensorKind) {
                      bytes.append(reinterpret_cast<const char*>(t.data()),
                                   t.size() * sizeof(double));
                  });
    detail::write_atomic(path, bytes);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw RuntimeFailure("cannot open checkpoint: " + path);
    char magic[4];
    uint32_t ver = 0;
    uint64_t hlen = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&ver), 4);
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in.good() || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw RuntimeFailure("not a checkpoint file: " + path);
    if (ver != kCheckpointVersion)
        throw RuntimeFailure("unsupported checkpoint version " + std::to_string(ver) + " in " +
                             path);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!in.good()) throw RuntimeFailure("truncated checkpoint header: " + path);

    json manifest;
    try {
        manifest = json::parse(header);
    } catch (const json::exception& e) {
        throw RuntimeFailure("corrupt checkpoint manifest in " + path + ": " + e.what());
    }

    Checkpoint ck;
    ModelConfig model_cfg = model_from_json(manifest.at("model"));
    ck.tokenizer = tokenizer_from_json(manifest.at("tokenizer"));
    ck.params = zero_params(model_cfg);

    size_t tensor_idx = 0;
    const auto& tensors = manifest.at("tensors");
    visit_tensors(ck.params, [&](const std::string& name, std::vector<double>& t, TensorKind) {
        if (tensor_idx >= tensors.size())
            throw RuntimeFailure("checkpoint tensor directory too short: " + path);
        const auto& entry = tensors[tensor_idx++];
        if (entry.at("name") != name || entry.at("count") != t.size())
            throw RuntimeFailure("checkpoint tensor mismatch at " + name + " in " + path);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in.good()) throw RuntimeFailure("truncated checkpoint tensor " + name + " in " + path);
    });
    return ck;
}

}  // namespace digitcast
