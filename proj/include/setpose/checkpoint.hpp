#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "setpose/data_io.hpp"
#include "setpose/errors.hpp"
#include "setpose/nn.hpp"
#include "setpose/optim.hpp"

namespace setpose {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

// Layout: a magic line, one line of JSON manifest, then raw little-endian
// float32 blobs. The manifest lists every blob with its shape and byte
// offset (relative to the first blob byte). Optimizer moments are stored as
// extra blobs named "adam.m/<param>" and "adam.v/<param>".
inline constexpr const char* kCheckpointMagic = "SETPOSE-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointState {
    std::string kind;           // "toy" or "rotest"
    nlohmann::json config;      // model configuration echo
    nlohmann::json train;       // training configuration echo
    std::uint64_t step = 0;     // optimizer steps taken
    int epoch = 0;              // completed epochs
    std::uint64_t seed = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointState& st,
                            const nn::ParamStore<float>& params, const optim::OptimizerState<float>* opt) {
    using nlohmann::json;
    std::string blob;
    json tensors = json::array();
    auto put = [&](const std::string& name, std::size_t rows, std::size_t cols, const std::vector<float>& v) {
        tensors.push_back({{"name", name}, {"rows", rows}, {"cols", cols}, {"offset", blob.size()}});
        blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    };
    for (const auto& [name, t] : params.entries()) put(name, t.rows(), t.cols(), t.value());
    json manifest = {{"format_version", kCheckpointVersion}, {"kind", st.kind}, {"config", st.config},
                     {"train", st.train}, {"step", st.step}, {"epoch", st.epoch}, {"seed", st.seed}};
    if (opt && opt->first_moment.size() == params.size()) {
        std::size_t k = 0;
        for (const auto& [name, t] : params.entries()) {
            put("adam.m/" + name, t.rows(), t.cols(), opt->first_moment[k]);
            put("adam.v/" + name, t.rows(), t.cols(), opt->second_moment[k]);
            ++k;
        }
        manifest["optimizer"] = {{"step", opt->step}, {"lr", opt->config.lr}, {"beta1", opt->config.beta1},
                                 {"beta2", opt->config.beta2}, {"eps", opt->config.eps},
                                 {"weight_decay", opt->config.weight_decay}, {"clip_norm", opt->config.clip_norm}};
    }
    manifest["tensors"] = tensors;
    std::string out = std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion) + "\n";
    out += manifest.dump() + "\n";
    out += blob;
    io::write_file_atomic(path, out);
}

/// Reads the manifest and the blob section of a checkpoint file.
struct CheckpointFile {
    nlohmann::json manifest;
    std::string blob;

    CheckpointState state() const {
        CheckpointState s;
        s.kind = manifest.at("kind").get<std::string>();
        s.config = manifest.at("config");
        s.train = manifest.value("train", nlohmann::json::object());
        s.step = manifest.at("step").get<std::uint64_t>();
        s.epoch = manifest.at("epoch").get<int>();
        s.seed = manifest.at("seed").get<std::uint64_t>();
        return s;
    }

    bool has(const std::string& name) const {
        for (const auto& t : manifest.at("tensors"))
            if (t.at("name") == name) return true;
        return false;
    }

    std::vector<float> tensor(const std::string& name, std::size_t rows, std::size_t cols) const {
        for (const auto& t : manifest.at("tensors")) {
            if (t.at("name") != name) continue;
            if (t.at("rows").get<std::size_t>() != rows || t.at("cols").get<std::size_t>() != cols)
                throw ShapeMismatch("checkpoint tensor " + name + " has a different shape");
            const auto off = t.at("offset").get<std::size_t>();
            const std::size_t n = rows * cols;
            if (off + n * sizeof(float) > blob.size()) throw ParseError("checkpoint tensor " + name + " is truncated");
            std::vector<float> v(n);
            std::memcpy(v.data(), blob.data() + off, n * sizeof(float));
            return v;
        }
        throw ValidationError("checkpoint has no tensor named " + name);
    }
};

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
    const std::string data = io::read_file(path);
    const auto nl1 = data.find('\n');
    const std::string magic = std::string(kCheckpointMagic) + " ";
    if (nl1 == std::string::npos || data.compare(0, magic.size(), magic) != 0)
        throw ParseError(path.string() + ": not a checkpoint file");
    const int version = std::atoi(data.c_str() + magic.size());
    if (version != kCheckpointVersion)
        throw UnsupportedFormat(path.string() + ": checkpoint version " + std::to_string(version));
    const auto nl2 = data.find('\n', nl1 + 1);
    if (nl2 == std::string::npos) throw ParseError(path.string() + ": truncated checkpoint manifest");
    CheckpointFile f;
    try {
        f.manifest = nlohmann::json::parse(data.substr(nl1 + 1, nl2 - nl1 - 1));
        (void)f.state();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ":2: " + e.what());
    }
    f.blob = data.substr(nl2 + 1);
    return f;
}

/// Copies every parameter (and, if requested and present, the optimizer
/// moments) from the checkpoint into existing storage. Names and shapes
/// must match exactly.
inline void restore_checkpoint(const CheckpointFile& f, nn::ParamStore<float>& params,
                               optim::OptimizerState<float>* opt) {
    std::size_t n = 0;
    for (const auto& t : f.manifest.at("tensors"))
        n += t.at("name").get<std::string>().rfind("adam.", 0) != 0;
    if (n != params.size())
        throw ValidationError("checkpoint holds " + std::to_string(n) + " parameters, model has " +
                              std::to_string(params.size()));
    for (const auto& [name, t] : params.entries()) {
        auto p = t;
        p.mutable_value() = f.tensor(name, t.rows(), t.cols());
    }
    if (!opt) return;
    opt->init(params);
    if (!f.manifest.contains("optimizer")) return;
    const auto& o = f.manifest.at("optimizer");
    opt->step = o.at("step").get<std::uint64_t>();
    std::size_t k = 0;
    for (const auto& [name, t] : params.entries()) {
        opt->first_moment[k] = f.tensor("adam.m/" + name, t.rows(), t.cols());
        opt->second_moment[k] = f.tensor("adam.v/" + name, t.rows(), t.cols());
        ++k;
    }
}

}  // namespace setpose
