#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lcdforge/common.hpp"
#include "lcdforge/tasks.hpp"

namespace lcd {

enum class TemplateSplit { Train, HeldOut };

inline std::string split_name(TemplateSplit s) { return s == TemplateSplit::Train ? "train" : "held_out"; }

struct Instruction {
    std::string task_id;
    std::string text;
    TemplateSplit split = TemplateSplit::Train;
    std::vector<double> embedding;
};

namespace detail {

inline const std::vector<std::string>& push_templates(TemplateSplit split) {
    static const std::vector<std::string> train = {
        "push the {color} block {dir}",
        "slide the {color} block to the {dir}",
        "move the {color} block {dir}",
        "shift the {color} block towards the {dir}",
        "push the {color} one {dir}",
    };
    static const std::vector<std::string> held = {
        "nudge the {color} block {dir}",
        "shove the {color} block over to the {dir}",
        "give the {color} block a push {dir}",
    };
    return split == TemplateSplit::Train ? train : held;
}

inline const std::vector<std::string>& move_templates(TemplateSplit split) {
    static const std::vector<std::string> train = {
        "move the gripper to the {region}",
        "go to the {region}",
        "bring the gripper to the {region} of the table",
        "move to the {region} corner",
        "take the gripper to the {region}",
    };
    static const std::vector<std::string> held = {
        "travel to the {region} area",
        "head over to the {region}",
    };
    return split == TemplateSplit::Train ? train : held;
}

inline std::string substitute(std::string tpl, const TaskSpec& task) {
    auto replace_all = [](std::string s, const std::string& from, const std::string& to) {
        size_t pos = 0;
        while ((pos = s.find(from, pos)) != std::string::npos) {
            s.replace(pos, from.size(), to);
            pos += to.size();
        }
        return s;
    };
    if (task.kind == TaskKind::PushBlock) {
        tpl = replace_all(tpl, "{color}", color_names()[static_cast<size_t>(task.color)]);
        tpl = replace_all(tpl, "{dir}", direction_names()[static_cast<size_t>(task.direction)]);
    } else {
        tpl = replace_all(tpl, "{region}", region_names()[static_cast<size_t>(task.region)]);
    }
    return tpl;
}

}  // namespace detail

inline std::vector<std::string> instruction_templates(const TaskSpec& task, TemplateSplit split) {
    const auto& tpls = task.kind == TaskKind::PushBlock ? detail::push_templates(split) : detail::move_templates(split);
    std::vector<std::string> out;
    out.reserve(tpls.size());
    for (const auto& t : tpls) out.push_back(detail::substitute(t, task));
    return out;
}

/// Every instantiated held-out instruction string across the task family;
/// dataset writers assert train-collected texts never land in this set.
inline const std::unordered_set<std::string>& heldout_instruction_texts() {
    static const std::unordered_set<std::string> set = [] {
        std::unordered_set<std::string> s;
        for (const auto& t : all_tasks())
            for (const auto& text : instruction_templates(t, TemplateSplit::HeldOut)) s.insert(text);
        return s;
    }();
    return set;
}

inline std::vector<std::string> tokenize_lower(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

/// Frozen deterministic embedding: hashed bag of tokens averaged through a
/// fixed random-projection table, then L2-normalized. Stands in for the
/// upstream language model; optionally overridden by a file-loaded table of
/// precomputed embeddings.
class EmbeddingProvider {
public:
    static constexpr uint64_t kTableSeed = 0x1c0ffee0da7a5eedull;
    static constexpr size_t kTableRows = 4096;

    explicit EmbeddingProvider(int width = 64, bool fallback_to_hash = true)
        : width_(width), fallback_(fallback_to_hash) {
        if (width < 1) throw std::invalid_argument("embedding width must be positive");
        Rng rng(splitmix64(kTableSeed ^ static_cast<uint64_t>(width)));
        table_.resize(kTableRows * static_cast<size_t>(width));
        for (auto& v : table_) v = rng.normal();
    }

    int width() const { return width_; }

    std::vector<double> embed(const std::string& text) const {
        if (!external_.empty()) {
            auto it = external_.find(text);
            if (it != external_.end()) return it->second;
            if (!fallback_) throw std::out_of_range("embedding table has no entry for '" + text + "'");
        }
        const auto tokens = tokenize_lower(text);
        if (tokens.empty()) throw std::invalid_argument("cannot embed text with no tokens: '" + text + "'");
        std::vector<double> acc(static_cast<size_t>(width_), 0.0);
        for (const auto& tok : tokens) {
            const size_t row = static_cast<size_t>(fnv1a64(tok) % kTableRows);
            const double* p = table_.data() + row * static_cast<size_t>(width_);
            for (int i = 0; i < width_; ++i) acc[static_cast<size_t>(i)] += p[i];
        }
        double norm = 0.0;
        for (double v : acc) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            // pathological token set hashing to a zero sum; fall back to a unit basis vector
            acc.assign(static_cast<size_t>(width_), 0.0);
            acc[0] = 1.0;
            return acc;
        }
        for (double& v : acc) v /= norm;
        return acc;
    }

    void load_external(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("embedding table: cannot open " + path);
        std::string header;
        std::getline(f, header);
        std::istringstream hs(header);
        std::string kw;
        int w = 0;
        if (!(hs >> kw >> w) || kw != "width")
            throw std::runtime_error("embedding table: bad header '" + header + "' (expected 'width N')");
        if (w != width_)
            throw std::runtime_error("embedding table: width " + std::to_string(w) + " does not match configured " +
                                     std::to_string(width_));
        std::string text;
        while (std::getline(f, text)) {
            if (text.empty()) continue;
            std::string values;
            if (!std::getline(f, values))
                throw std::runtime_error("embedding table: entry '" + text + "' has no value line");
            std::istringstream vs(values);
            std::vector<double> vec(static_cast<size_t>(w));
            for (int i = 0; i < w; ++i)
                if (!(vs >> vec[static_cast<size_t>(i)]))
                    throw std::runtime_error("embedding table: entry '" + text + "' has fewer than " +
                                             std::to_string(w) + " values");
            external_[text] = std::move(vec);
        }
    }

    void set_fallback(bool enabled) { fallback_ = enabled; }
    size_t external_size() const { return external_.size(); }

    static void save_external(const std::string& path, int width,
                              const std::vector<std::pair<std::string, std::vector<double>>>& entries) {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("embedding table: cannot write " + path);
        f << "width " << width << "\n";
        f.precision(17);
        for (const auto& [text, vec] : entries) {
            if (static_cast<int>(vec.size()) != width)
                throw std::invalid_argument("embedding table: entry '" + text + "' has wrong width");
            f << text << "\n";
            for (int i = 0; i < width; ++i) f << (i ? " " : "") << vec[static_cast<size_t>(i)];
            f << "\n";
        }
    }

private:
    int width_;
    bool fallback_;
    std::vector<double> table_;
    std::unordered_map<std::string, std::vector<double>> external_;
};

inline Instruction sample_instruction(const TaskSpec& task, TemplateSplit split, const EmbeddingProvider& provider,
                                      Rng& rng) {
    const auto texts = instruction_templates(task, split);
    if (texts.empty()) throw std::invalid_argument("no templates for task '" + task.id + "'");
    Instruction ins;
    ins.task_id = task.id;
    ins.split = split;
    ins.text = texts[static_cast<size_t>(rng.uniform_int(texts.size()))];
    ins.embedding = provider.embed(ins.text);
    return ins;
}

}  // namespace lcd
