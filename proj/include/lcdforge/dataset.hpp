#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcdforge/env.hpp"
#include "lcdforge/language.hpp"

namespace lcd {

struct Trajectory {
    std::string task_id;
    uint64_t seed = 0;
    std::string instruction;
    std::string split = "train";
    bool success = false;
    std::vector<std::vector<double>> states;       // (len+1) x state_dim
    std::vector<std::array<double, 3>> actions;    // len x action_dim
};

/// Trajectory corpus on disk: manifest.json index plus flat little-endian
/// float32 blobs for states and actions.
struct TrajectoryDataset {
    int state_dim = EnvConfig::state_dim;
    int action_dim = EnvConfig::action_dim;
    std::string config_hash;
    std::string pipeline_hash;
    std::string provenance;
    std::vector<Trajectory> episodes;

    size_t total_states() const {
        size_t n = 0;
        for (const auto& e : episodes) n += e.states.size();
        return n;
    }
};

namespace detail {

inline void write_f32_blob(const std::string& path, const std::vector<float>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot write " + path);
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

inline std::vector<float> read_f32_blob(const std::string& path, size_t expected) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("dataset: missing blob " + path);
    const size_t bytes = static_cast<size_t>(f.tellg());
    if (bytes != expected * sizeof(float))
        throw std::runtime_error("dataset: blob " + path + " holds " + std::to_string(bytes / sizeof(float)) +
                                 " floats, manifest expects " + std::to_string(expected));
    f.seekg(0);
    std::vector<float> out(expected);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    return out;
}

}  // namespace detail

inline void save_dataset(const TrajectoryDataset& ds, const std::string& dir) {
    // split hygiene: a trajectory tagged train must never carry a held-out
    // template instantiation
    for (const auto& e : ds.episodes)
        if (e.split == "train" && heldout_instruction_texts().count(e.instruction))
            throw std::runtime_error("dataset: train-tagged episode carries held-out instruction '" + e.instruction + "'");

    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "lcdforge-trajectories-v1";
    manifest["state_dim"] = ds.state_dim;
    manifest["action_dim"] = ds.action_dim;
    manifest["config_hash"] = ds.config_hash;
    manifest["pipeline_hash"] = ds.pipeline_hash;
    manifest["provenance"] = ds.provenance;
    nlohmann::json eps = nlohmann::json::array();
    std::vector<float> states, actions;
    for (const auto& e : ds.episodes) {
        nlohmann::json je;
        je["task"] = e.task_id;
        je["seed"] = e.seed;
        je["len"] = e.actions.size();
        je["instruction"] = e.instruction;
        je["split"] = e.split;
        je["success"] = e.success;
        eps.push_back(je);
        if (e.states.size() != e.actions.size() + 1)
            throw std::runtime_error("dataset: episode with " + std::to_string(e.states.size()) + " states and " +
                                     std::to_string(e.actions.size()) + " actions");
        for (const auto& s : e.states) {
            if (static_cast<int>(s.size()) != ds.state_dim) throw std::runtime_error("dataset: bad state width");
            for (double v : s) states.push_back(static_cast<float>(v));
        }
        for (const auto& a : e.actions)
            for (double v : a) actions.push_back(static_cast<float>(v));
    }
    manifest["episodes"] = eps;
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("dataset: cannot write " + dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    detail::write_f32_blob(dir + "/states.f32", states);
    detail::write_f32_blob(dir + "/actions.f32", actions);
}

inline TrajectoryDataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("dataset: missing manifest " + dir + "/manifest.json");
    nlohmann::json manifest;
    mf >> manifest;
    TrajectoryDataset ds;
    ds.state_dim = manifest.at("state_dim").get<int>();
    ds.action_dim = manifest.at("action_dim").get<int>();
    ds.config_hash = manifest.value("config_hash", "");
    ds.pipeline_hash = manifest.value("pipeline_hash", "");
    ds.provenance = manifest.value("provenance", "");
    size_t n_states = 0, n_actions = 0;
    for (const auto& je : manifest.at("episodes")) {
        n_states += je.at("len").get<size_t>() + 1;
        n_actions += je.at("len").get<size_t>();
    }
    const auto states = detail::read_f32_blob(dir + "/states.f32", n_states * static_cast<size_t>(ds.state_dim));
    const auto actions = detail::read_f32_blob(dir + "/actions.f32", n_actions * static_cast<size_t>(ds.action_dim));
    size_t so = 0, ao = 0;
    for (const auto& je : manifest.at("episodes")) {
        Trajectory e;
        e.task_id = je.at("task").get<std::string>();
        e.seed = je.at("seed").get<uint64_t>();
        e.instruction = je.at("instruction").get<std::string>();
        e.split = je.at("split").get<std::string>();
        e.success = je.at("success").get<bool>();
        const size_t len = je.at("len").get<size_t>();
        e.states.resize(len + 1);
        for (auto& s : e.states) {
            s.resize(static_cast<size_t>(ds.state_dim));
            for (int i = 0; i < ds.state_dim; ++i) s[static_cast<size_t>(i)] = states[so++];
        }
        e.actions.resize(len);
        for (auto& a : e.actions)
            for (int i = 0; i < ds.action_dim; ++i) a[static_cast<size_t>(i)] = actions[ao++];
        ds.episodes.push_back(std::move(e));
    }
    return ds;
}

}  // namespace lcd
