#pragma once

// Checkpoint container: 8-byte magic, u64 header length, JSON header
// (format version, model config, vocabulary hash, training step, tensor
// index), then raw little-endian tensor payloads in index order.

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "retrospec/model.hpp"

namespace retrospec::model {

using json = nlohmann::json;

inline json config_to_json(const ModelConfig& c) {
    return json{{"layers_enc", c.layers_enc},   {"layers_dec", c.layers_dec},
                {"attn_heads", c.attn_heads},   {"d_model", c.d_model},
                {"d_ff", c.d_ff},               {"medusa_heads", c.medusa_heads},
                {"medusa_hidden", c.medusa_hidden}, {"vocab_size", c.vocab_size},
                {"max_len", c.max_len},         {"dropout", c.dropout},
                {"seed", c.seed}};
}

inline ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.layers_enc = j.at("layers_enc").get<int>();
    c.layers_dec = j.at("layers_dec").get<int>();
    c.attn_heads = j.at("attn_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.medusa_heads = j.at("medusa_heads").get<int>();
    c.medusa_hidden = j.at("medusa_hidden").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

namespace detail {

constexpr char checkpoint_magic[8] = {'R', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int checkpoint_version = 1;

template <typename S>
const char* dtype_name() {
    if constexpr (sizeof(S) == 4) return "f32";
    else return "f64";
}

}  // namespace detail

template <typename S>
void save(const ModelParameters<S>& p, const std::string& path) {
    json header;
    header["format_version"] = detail::checkpoint_version;
    header["dtype"] = detail::dtype_name<S>();
    header["config"] = config_to_json(p.config);
    header["vocab_hash"] = p.vocab_hash;
    header["train_step"] = p.train_step;
    json index = json::array();
    for (const auto& t : p.store.tensors())
        index.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
    header["tensors"] = index;

    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write checkpoint: " + path);
    out.write(detail::checkpoint_magic, 8);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& t : p.store.tensors())
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  std::streamsize(sizeof(S) * size_t(t.value.size())));
    if (!out) throw io_error("short write: " + path);
}

// expected_vocab_hash != 0 enforces that the checkpoint was trained
// under the same vocabulary.
template <typename S = float>
ModelParameters<S> load(const std::string& path, uint64_t expected_vocab_hash = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint: " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, detail::checkpoint_magic, 8) != 0)
        throw io_error("corrupt checkpoint (bad magic): " + path);
    uint64_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), 8) || hlen > (64u << 20))
        throw io_error("corrupt checkpoint (bad header length): " + path);
    std::string hs(hlen, '\0');
    if (!in.read(hs.data(), std::streamsize(hlen)))
        throw io_error("corrupt checkpoint (truncated header): " + path);
    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw io_error("corrupt checkpoint (header parse): " + std::string(e.what()));
    }
    if (header.at("format_version").get<int>() != detail::checkpoint_version)
        throw io_error("checkpoint format version mismatch");
    if (header.at("dtype").get<std::string>() != detail::dtype_name<S>())
        throw io_error("checkpoint dtype mismatch");

    ModelParameters<S> p;
    p.config = config_from_json(header.at("config"));
    p.vocab_hash = header.at("vocab_hash").get<uint64_t>();
    p.train_step = header.at("train_step").get<int64_t>();
    if (expected_vocab_hash != 0 && p.vocab_hash != expected_vocab_hash)
        throw io_error("checkpoint vocabulary mismatch");

    detail::build_layout(p.store, p.config);
    size_t idx = 0;
    for (const auto& entry : header.at("tensors")) {
        if (idx >= p.store.tensors().size()) throw io_error("corrupt checkpoint (extra tensors)");
        auto& t = p.store.tensors()[idx++];
        if (entry.at("name").get<std::string>() != t.name ||
            entry.at("rows").get<Eigen::Index>() != t.value.rows() ||
            entry.at("cols").get<Eigen::Index>() != t.value.cols())
            throw io_error("corrupt checkpoint (tensor index mismatch at " + t.name + ")");
    }
    if (idx != p.store.tensors().size()) throw io_error("corrupt checkpoint (missing tensors)");
    for (auto& t : p.store.tensors()) {
        if (!in.read(reinterpret_cast<char*>(t.value.data()),
                     std::streamsize(sizeof(S) * size_t(t.value.size()))))
            throw io_error("corrupt checkpoint (truncated payload at " + t.name + ")");
    }
    char extra;
    if (in.read(&extra, 1)) throw io_error("corrupt checkpoint (trailing bytes)");
    return p;
}

inline uint64_t file_hash(const std::string& path) {
    return fnv1a64(read_file(path));
}

}  // namespace retrospec::model
