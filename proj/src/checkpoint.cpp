#include "jointseg/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

#include "jointseg/image.hpp"

namespace jointseg {

namespace {

constexpr char kMagic[4] = {'J', 'N', 'T', '1'};

void append_u64_le(std::vector<unsigned char>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

uint64_t read_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

void append_f32_le(std::vector<unsigned char>& out, double v) {
    float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

double read_f32_le(const unsigned char* p) {
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(p[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return static_cast<double>(f);
}

}  // namespace

void save_checkpoint(const std::string& path, const JointModel& model, const CheckpointMeta& meta) {
    nlohmann::json j;
    j["version"] = 1;
    j["model"] = nlohmann::json::parse(model_config_to_json(model.config()));
    j["tasks"] = model.config().tasks;
    j["step"] = meta.step;
    j["seed"] = meta.seed;
    j["rng_state"] = meta.rng_state;
    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& p : model.parameters()) {
        int64_t count = 1;
        for (int64_t d : p.value.shape()) count *= d;
        table.push_back({{"name", p.name},
                         {"shape", p.value.shape()},
                         {"offset", offset},
                         {"count", count}});
        offset += static_cast<uint64_t>(count) * 4;
    }
    j["params"] = std::move(table);
    const std::string metadata = j.dump();

    std::vector<unsigned char> bytes;
    bytes.reserve(12 + metadata.size() + offset);
    bytes.insert(bytes.end(), kMagic, kMagic + 4);
    append_u64_le(bytes, metadata.size());
    bytes.insert(bytes.end(), metadata.begin(), metadata.end());
    for (const auto& p : model.parameters())
        for (double v : p.value.data()) append_f32_le(bytes, v);

    atomic_write_file(path, bytes.data(), bytes.size());
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::vector<unsigned char> bytes = read_file_bytes(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw IoError(path + " is not a checkpoint file (bad magic)");
    const uint64_t mlen = read_u64_le(bytes.data() + 4);
    if (12 + mlen > bytes.size()) throw IoError(path + " is truncated (metadata extends past EOF)");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + mlen);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": checkpoint metadata is not valid JSON: " + e.what());
    }

    CheckpointMeta meta;
    ModelConfig cfg;
    std::vector<nlohmann::json> table;
    try {
        if (j.at("version").get<int64_t>() != 1)
            throw ConfigError(path + ": unsupported checkpoint version " + j["version"].dump());
        cfg = model_config_from_json(j.at("model").dump());
        meta.step = j.at("step").get<int64_t>();
        meta.seed = j.at("seed").get<uint64_t>();
        meta.rng_state = j.at("rng_state").get<uint64_t>();
        table = j.at("params").get<std::vector<nlohmann::json>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": checkpoint metadata is malformed: " + e.what());
    }

    Rng init_rng(0);  // every value is overwritten below
    LoadedCheckpoint out{meta, JointModel(cfg, init_rng)};

    auto& params = out.model.parameters();
    if (table.size() != params.size())
        throw ConfigError(path + ": parameter table has " + std::to_string(table.size()) +
                          " entries, model needs " + std::to_string(params.size()));
    const unsigned char* data = bytes.data() + 12 + mlen;
    const uint64_t data_len = bytes.size() - 12 - mlen;
    for (size_t i = 0; i < params.size(); ++i) {
        std::string name;
        Shape shape;
        uint64_t off = 0, count = 0;
        try {
            name = table[i].at("name").get<std::string>();
            shape = table[i].at("shape").get<Shape>();
            off = table[i].at("offset").get<uint64_t>();
            count = table[i].at("count").get<uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path + ": parameter table entry " + std::to_string(i) +
                              " is malformed: " + e.what());
        }
        if (name != params[i].name)
            throw ConfigError(path + ": parameter " + std::to_string(i) + " is '" + name +
                              "', model expects '" + params[i].name + "'");
        if (shape != params[i].value.shape())
            throw ConfigError(path + ": parameter '" + name + "' has the wrong shape");
        auto& dst = params[i].value.mutable_data();
        if (count != dst.size() || off + count * 4 > data_len)
            throw IoError(path + ": parameter '" + name + "' data is out of bounds");
        for (size_t k = 0; k < dst.size(); ++k) dst[k] = read_f32_le(data + off + 4 * k);
    }
    return out;
}

}  // namespace jointseg
