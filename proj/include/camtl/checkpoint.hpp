#pragma once

// Binary checkpoint container:
//   "CAMT" | u32 version | u64 length + config JSON (UTF-8)
//   | u64 count | count x (u32 length + name | u32 rank | u64 dims[rank] | f64 values)
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "camtl/config.hpp"
#include "camtl/model.hpp"

namespace camtl {

inline constexpr char kCheckpointMagic[4] = {'C', 'A', 'M', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline CamtlModel build_model(const ExperimentConfig& config) {
    std::vector<TaskHeadSpec> heads;
    for (const auto& t : config.tasks) heads.push_back(t.head());
    return CamtlModel(config.model, heads);
}

namespace detail {

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str32(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }

    std::vector<unsigned char> bytes;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& b) : bytes_(b) {}

    void need(std::size_t n, const std::string& field) const {
        if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated while reading " + field);
    }
    std::uint32_t u32(const std::string& field) {
        need(4, field);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const std::string& field) {
        need(8, field);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    double f64(const std::string& field) { return std::bit_cast<double>(u64(field)); }
    std::string str(std::size_t n, const std::string& field) {
        need(n, field);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::vector<unsigned char>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const ExperimentConfig& config, const CamtlModel& model) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    const std::string cfg = json(config).dump();
    w.u64(cfg.size());
    w.raw(cfg.data(), cfg.size());
    const auto params = model.parameters();
    w.u64(params.size());
    for (const auto& p : params) {
        w.str32(p.name);
        w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::size_t d : p.tensor.shape()) w.u64(d);
        for (double v : p.tensor.data()) w.f64(v);
    }
    return w.bytes;
}

inline void save_checkpoint(const std::string& path, const ExperimentConfig& config, const CamtlModel& model) {
    const auto bytes = serialize_checkpoint(config, model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

struct LoadedCheckpoint {
    ExperimentConfig config;
    CamtlModel model;
};

inline LoadedCheckpoint parse_checkpoint(const std::vector<unsigned char>& bytes) {
    detail::ByteReader r(bytes);
    if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw CheckpointError("checkpoint magic is not CAMT");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint64_t cfg_len = r.u64("config length");
    ExperimentConfig config;
    try {
        config = json::parse(r.str(cfg_len, "config")).get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    CamtlModel model = build_model(config);
    std::map<std::string, Tensor> by_name;
    for (const auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);

    const std::uint64_t count = r.u64("parameter count");
    if (count != by_name.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " parameters, config builds " +
                              std::to_string(by_name.size()));
    }
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::string name = r.str(r.u32("parameter name length"), "parameter name");
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointError("checkpoint parameter " + name + " is unknown to the model");
        const std::uint32_t rank = r.u32(name + " rank");
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u64(name + " shape"));
        if (shape != it->second.shape()) {
            throw CheckpointError("checkpoint parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                                  shape_str(it->second.shape()));
        }
        r.need(8 * it->second.numel(), name + " values");
        auto values = it->second.mutable_data();
        for (auto& v : values) v = r.f64(name + " values");
        by_name.erase(it);
    }
    if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
    return {std::move(config), std::move(model)};
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

}  // namespace camtl
