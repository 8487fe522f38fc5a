#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/common.hpp"
#include "lcdforge/tensor.hpp"

namespace lcd {

// Checkpoint on disk: `<stem>.manifest` (plain text, one `name shape dtype
// offset` per line, `#`-prefixed metadata lines first) plus `<stem>.blob`
// holding all values as one little-endian raw float buffer.

struct CheckpointEntry {
    Shape shape;
    std::string dtype;  // "f32" | "f64"
    std::vector<double> values;
};

struct Checkpoint {
    // metadata is written/read in key order for byte-stable output
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, CheckpointEntry>> entries;

    void add(const std::string& name, Shape shape, std::vector<double> values, const std::string& dtype = "f32") {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw std::invalid_argument("checkpoint: entry '" + name + "' shape " + shape_str(shape) +
                                        " does not match value count " + std::to_string(values.size()));
        if (dtype != "f32" && dtype != "f64") throw std::invalid_argument("checkpoint: unknown dtype " + dtype);
        entries.emplace_back(name, CheckpointEntry{std::move(shape), dtype, std::move(values)});
    }

    template <typename T>
    void add_params(const std::string& prefix, const Params<T>& params, const std::string& dtype = "f32") {
        for (size_t i = 0; i < params.size(); ++i) {
            std::vector<double> vals(params.tensors[i].data().size());
            for (size_t j = 0; j < vals.size(); ++j) vals[j] = static_cast<double>(params.tensors[i].data()[j]);
            add(prefix + params.names[i], params.tensors[i].shape(), std::move(vals), dtype);
        }
    }

    const CheckpointEntry& at(const std::string& name) const {
        for (const auto& [n, e] : entries)
            if (n == name) return e;
        throw std::out_of_range("checkpoint: no entry named '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& [n, e] : entries)
            if (n == name) return true;
        return false;
    }

    template <typename T>
    Params<T> extract_params(const std::string& prefix) const {
        Params<T> out;
        for (const auto& [n, e] : entries) {
            if (n.rfind(prefix, 0) != 0) continue;
            std::vector<T> d(e.values.size());
            for (size_t j = 0; j < d.size(); ++j) d[j] = static_cast<T>(e.values[j]);
            out.add(n.substr(prefix.size()), Tensor<T>::from(e.shape, std::move(d)));
        }
        return out;
    }
};

namespace detail {

inline std::string shape_token(const Shape& s) {
    if (s.empty()) return "1";
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out;
}

inline Shape parse_shape_token(const std::string& tok) {
    Shape s;
    std::string cur;
    for (char c : tok + "x") {
        if (c == 'x') {
            if (cur.empty()) throw std::runtime_error("checkpoint: bad shape token '" + tok + "'");
            s.push_back(std::stoll(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& stem) {
    std::filesystem::create_directories(std::filesystem::path(stem).parent_path().empty()
                                            ? "."
                                            : std::filesystem::path(stem).parent_path().string());
    std::ostringstream manifest;
    for (const auto& [k, v] : ckpt.meta) manifest << "# " << k << " " << v << "\n";
    std::string blob;
    uint64_t offset = 0;
    for (const auto& [name, e] : ckpt.entries) {
        manifest << name << " " << detail::shape_token(e.shape) << " " << e.dtype << " " << offset << "\n";
        if (e.dtype == "f32") {
            for (double v : e.values) {
                const float f = static_cast<float>(v);
                blob.append(reinterpret_cast<const char*>(&f), sizeof(float));
            }
            offset += e.values.size() * sizeof(float);
        } else {
            for (double v : e.values) blob.append(reinterpret_cast<const char*>(&v), sizeof(double));
            offset += e.values.size() * sizeof(double);
        }
    }
    std::ofstream mf(stem + ".manifest", std::ios::binary);
    if (!mf) throw std::runtime_error("checkpoint: cannot write " + stem + ".manifest");
    mf << manifest.str();
    std::ofstream bf(stem + ".blob", std::ios::binary);
    if (!bf) throw std::runtime_error("checkpoint: cannot write " + stem + ".blob");
    bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline Checkpoint load_checkpoint(const std::string& stem) {
    std::ifstream mf(stem + ".manifest", std::ios::binary);
    if (!mf) throw std::runtime_error("checkpoint: missing manifest " + stem + ".manifest");
    std::ifstream bf(stem + ".blob", std::ios::binary | std::ios::ate);
    if (!bf) throw std::runtime_error("checkpoint: missing blob " + stem + ".blob");
    const uint64_t blob_size = static_cast<uint64_t>(bf.tellg());
    bf.seekg(0);
    std::vector<char> blob(blob_size);
    bf.read(blob.data(), static_cast<std::streamsize>(blob_size));

    Checkpoint ckpt;
    std::string line;
    uint64_t expected = 0;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ls(line.substr(1));
            std::string key;
            ls >> key;
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest[0] == ' ') rest.erase(0, 1);
            ckpt.meta[key] = rest;
            continue;
        }
        std::istringstream ls(line);
        std::string name, shape_tok, dtype;
        uint64_t offset = 0;
        if (!(ls >> name >> shape_tok >> dtype >> offset))
            throw std::runtime_error("checkpoint: malformed manifest line '" + line + "'");
        const Shape shape = detail::parse_shape_token(shape_tok);
        const uint64_t count = static_cast<uint64_t>(shape_numel(shape));
        const uint64_t width = dtype == "f64" ? sizeof(double) : sizeof(float);
        if (dtype != "f32" && dtype != "f64")
            throw std::runtime_error("checkpoint: unknown dtype '" + dtype + "' for entry '" + name + "'");
        if (offset != expected)
            throw std::runtime_error("checkpoint: entry '" + name + "' offset " + std::to_string(offset) +
                                     " does not match expected " + std::to_string(expected));
        expected = offset + count * width;
        if (expected > blob_size)
            throw std::runtime_error("checkpoint: blob too short for entry '" + name + "'");
        std::vector<double> values(count);
        if (dtype == "f32") {
            for (uint64_t i = 0; i < count; ++i) {
                float f;
                std::memcpy(&f, blob.data() + offset + i * sizeof(float), sizeof(float));
                values[i] = static_cast<double>(f);
            }
        } else {
            for (uint64_t i = 0; i < count; ++i)
                std::memcpy(&values[i], blob.data() + offset + i * sizeof(double), sizeof(double));
        }
        ckpt.entries.emplace_back(name, CheckpointEntry{shape, dtype, std::move(values)});
    }
    if (expected != blob_size)
        throw std::runtime_error("checkpoint: blob length " + std::to_string(blob_size) +
                                 " does not match manifest total " + std::to_string(expected));
    return ckpt;
}

/// Provenance hash over every stored value and name; used to pin the frozen
/// encoder a latent cache was produced with.
inline uint64_t checkpoint_hash(const Checkpoint& ckpt) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, e] : ckpt.entries) {
        h = fnv1a64(name, h);
        h = fnv1a64(e.dtype, h);
        for (double v : e.values) {
            const float f = static_cast<float>(v);
            h = fnv1a64(&f, sizeof(float), h);
        }
    }
    return h;
}

}  // namespace lcd
