#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcd {

enum class TaskKind { PushBlock, MoveGripper };

inline const std::array<std::string, 3>& color_names() {
    static const std::array<std::string, 3> n = {"red", "green", "blue"};
    return n;
}

inline const std::array<std::string, 4>& direction_names() {
    static const std::array<std::string, 4> n = {"left", "right", "up", "down"};
    return n;
}

inline const std::array<std::string, 4>& region_names() {
    static const std::array<std::string, 4> n = {"top left", "top right", "bottom left", "bottom right"};
    return n;
}

/// A toy task identity plus its success-predicate parameters. Push tasks
/// displace one colored block by push_dist in a cardinal direction (the
/// target anchors to the block position when the task starts); move tasks
/// bring the gripper to a region center.
struct TaskSpec {
    std::string id;
    TaskKind kind = TaskKind::PushBlock;
    int color = -1;      // block index for push tasks
    int direction = -1;  // 0 left, 1 right, 2 up, 3 down
    int region = -1;     // 0 tl, 1 tr, 2 bl, 3 br
    double success_radius = 0.05;
    double push_dist = 0.25;
    int max_steps = 360;
    bool held_out = false;
};

inline std::array<double, 2> direction_vec(int direction) {
    switch (direction) {
        case 0: return {-1.0, 0.0};
        case 1: return {1.0, 0.0};
        case 2: return {0.0, 1.0};
        case 3: return {0.0, -1.0};
        default: throw std::invalid_argument("direction index " + std::to_string(direction) + " out of range");
    }
}

inline std::array<double, 2> region_center(int region) {
    switch (region) {
        case 0: return {0.25, 0.75};
        case 1: return {0.75, 0.75};
        case 2: return {0.25, 0.25};
        case 3: return {0.75, 0.25};
        default: throw std::invalid_argument("region index " + std::to_string(region) + " out of range");
    }
}

/// 12 push + 4 move tasks; 4 held out so that every color, direction and
/// region token still appears somewhere in the training set.
inline const std::vector<TaskSpec>& all_tasks() {
    static const std::vector<TaskSpec> tasks = [] {
        std::vector<TaskSpec> out;
        auto is_held_push = [](int color, int dir) {
            return (color == 0 && dir == 2) ||  // push red up
                   (color == 1 && dir == 1) ||  // push green right
                   (color == 2 && dir == 0);    // push blue left
        };
        for (int color = 0; color < 3; ++color)
            for (int dir = 0; dir < 4; ++dir) {
                TaskSpec t;
                t.id = "push_" + color_names()[static_cast<size_t>(color)] + "_" +
                       direction_names()[static_cast<size_t>(dir)];
                t.kind = TaskKind::PushBlock;
                t.color = color;
                t.direction = dir;
                t.held_out = is_held_push(color, dir);
                out.push_back(t);
            }
        for (int region = 0; region < 4; ++region) {
            TaskSpec t;
            std::string rn = region_names()[static_cast<size_t>(region)];
            for (auto& c : rn)
                if (c == ' ') c = '_';
            t.id = "move_" + rn;
            t.kind = TaskKind::MoveGripper;
            t.region = region;
            t.held_out = region == 1;  // move to top right
            out.push_back(t);
        }
        return out;
    }();
    return tasks;
}

inline const std::vector<TaskSpec>& train_tasks() {
    static const std::vector<TaskSpec> tasks = [] {
        std::vector<TaskSpec> out;
        for (const auto& t : all_tasks())
            if (!t.held_out) out.push_back(t);
        return out;
    }();
    return tasks;
}

inline const std::vector<TaskSpec>& heldout_tasks() {
    static const std::vector<TaskSpec> tasks = [] {
        std::vector<TaskSpec> out;
        for (const auto& t : all_tasks())
            if (t.held_out) out.push_back(t);
        return out;
    }();
    return tasks;
}

inline const TaskSpec& task_by_id(const std::vector<TaskSpec>& tasks, const std::string& id) {
    for (const auto& t : tasks)
        if (t.id == id) return t;
    throw std::out_of_range("no task with id '" + id + "'");
}

}  // namespace lcd
