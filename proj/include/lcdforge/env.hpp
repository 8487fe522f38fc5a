#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "lcdforge/common.hpp"
#include "lcdforge/tasks.hpp"

namespace lcd {

struct Vec2 {
    double x = 0.0, y = 0.0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline Vec2 unit(Vec2 v, double floor = 1e-9) {
    const double n = std::max(v.norm(), floor);
    return {v.x / n, v.y / n};
}

/// Deterministic 2D tabletop: a point gripper and three colored blocks on
/// the unit square. Contact is a kinematic conveyor: a block shares the
/// gripper's displacement with a weight that ramps smoothly in gripper-block
/// distance, which keeps the dynamics globally Lipschitz (see
/// docs/dynamics.md for the constant).
struct EnvConfig {
    double dt = 0.05;
    double a_max = 1.0;
    double grasp_radius = 0.05;
    double success_radius = 0.05;
    double push_dist = 0.22;
    double margin = 0.12;  // targets are clamped inside [margin, 1-margin]
    double expert_speed = 0.13;  // scripted-expert cruise speed as a fraction of a_max
    int timeout = 360;
    // contact model
    double contact_full = 0.05;  // full conveyance inside this distance
    double contact_ramp = 0.15;  // weight reaches zero at contact_full + contact_ramp
    double toggle_lo = 0.3;      // grasp command ramp
    double toggle_hi = 0.7;
    // reset: per-block home cells jittered uniformly
    double jitter = 0.07;

    static constexpr int n_blocks = 3;
    static constexpr int state_dim = 2 + 2 * n_blocks + n_blocks;  // gripper, blocks, grasp flags
    static constexpr int action_dim = 3;

    std::array<Vec2, 3> block_homes() const { return {Vec2{0.35, 0.65}, Vec2{0.65, 0.65}, Vec2{0.50, 0.35}}; }

    /// Analytic Lipschitz bound of step() in the L-inf norm over the
    /// continuous (state, action) coordinates; derivation in docs/dynamics.md.
    double lipschitz_bound() const {
        const double ramp_slope = 2.0 * std::sqrt(2.0) / contact_ramp;
        const double toggle_slope = 1.0 / (toggle_hi - toggle_lo);
        return 1.0 + (2.0 + dt) + dt * a_max * (ramp_slope + toggle_slope);
    }
};

struct State {
    Vec2 gripper;
    std::array<Vec2, 3> blocks;
    std::array<bool, 3> grasped = {false, false, false};
    int step = 0;
};

struct Action {
    double dx = 0.0, dy = 0.0;
    double grasp = 0.0;
};

struct EpisodeResult {
    bool success = false;
    int steps = 0;
    State final_state;
    std::vector<int> chain_completed;  // per-chain-position completion flags
};

inline std::vector<double> state_vec(const State& s) {
    std::vector<double> v;
    v.reserve(EnvConfig::state_dim);
    v.push_back(s.gripper.x);
    v.push_back(s.gripper.y);
    for (const auto& b : s.blocks) {
        v.push_back(b.x);
        v.push_back(b.y);
    }
    for (bool g : s.grasped) v.push_back(g ? 1.0 : 0.0);
    return v;
}

namespace detail {

inline double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }
inline double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }
inline double ramp01(double v) { return clamp01(v); }

}  // namespace detail

inline State reset_env(const EnvConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    State s;
    s.gripper = {0.5, 0.5};
    const auto homes = cfg.block_homes();
    for (int i = 0; i < EnvConfig::n_blocks; ++i) {
        s.blocks[static_cast<size_t>(i)] = {homes[static_cast<size_t>(i)].x + rng.uniform(-cfg.jitter, cfg.jitter),
                                            homes[static_cast<size_t>(i)].y + rng.uniform(-cfg.jitter, cfg.jitter)};
    }
    return s;
}

inline State step_env(const EnvConfig& cfg, const State& s, const Action& a) {
    const double vx = detail::clamp(a.dx, -cfg.a_max, cfg.a_max);
    const double vy = detail::clamp(a.dy, -cfg.a_max, cfg.a_max);
    const double u = detail::clamp01(a.grasp);

    State next = s;
    next.gripper.x = detail::clamp01(s.gripper.x + cfg.dt * vx);
    next.gripper.y = detail::clamp01(s.gripper.y + cfg.dt * vy);
    const Vec2 disp = next.gripper - s.gripper;

    const double toggle = detail::ramp01((u - cfg.toggle_lo) / (cfg.toggle_hi - cfg.toggle_lo));
    int held = -1;
    double held_d = 1e9;
    for (int i = 0; i < EnvConfig::n_blocks; ++i) {
        const double d = (s.blocks[static_cast<size_t>(i)] - s.gripper).norm();
        const double w_push = detail::ramp01((cfg.contact_full + cfg.contact_ramp - d) / cfg.contact_ramp);
        const double w_grasp = toggle * detail::ramp01((cfg.grasp_radius + cfg.contact_ramp - d) / cfg.contact_ramp);
        const double w = std::max(w_push, w_grasp);
        next.blocks[static_cast<size_t>(i)].x = detail::clamp01(s.blocks[static_cast<size_t>(i)].x + w * disp.x);
        next.blocks[static_cast<size_t>(i)].y = detail::clamp01(s.blocks[static_cast<size_t>(i)].y + w * disp.y);
        next.grasped[static_cast<size_t>(i)] = false;
        if (w_grasp > 0.5 && d < held_d) {
            held = i;
            held_d = d;
        }
    }
    if (held >= 0) next.grasped[static_cast<size_t>(held)] = true;  // at most one block flagged
    next.step = s.step + 1;
    return next;
}

/// Target point of a task relative to the state it started from; push
/// targets are clamped inside the margin box so they stay reachable.
inline Vec2 task_target(const EnvConfig& cfg, const TaskSpec& task, const State& anchor) {
    if (task.kind == TaskKind::MoveGripper) {
        const auto c = region_center(task.region);
        return {c[0], c[1]};
    }
    const auto d = direction_vec(task.direction);
    const Vec2 b = anchor.blocks[static_cast<size_t>(task.color)];
    return {detail::clamp(b.x + cfg.push_dist * d[0], cfg.margin, 1.0 - cfg.margin),
            detail::clamp(b.y + cfg.push_dist * d[1], cfg.margin, 1.0 - cfg.margin)};
}

/// True iff the task predicate held at any step of the trajectory; the
/// target anchors to the first state.
inline bool task_success(const EnvConfig& cfg, const std::vector<State>& trajectory, const TaskSpec& task) {
    if (trajectory.empty()) throw std::invalid_argument("task_success: empty trajectory");
    const Vec2 target = task_target(cfg, task, trajectory.front());
    for (const auto& s : trajectory) {
        const Vec2 e = task.kind == TaskKind::PushBlock ? s.blocks[static_cast<size_t>(task.color)] : s.gripper;
        if ((e - target).norm() <= task.success_radius) return true;
    }
    return false;
}

namespace detail {

// linear smoothstep: 0 below lo, 1 above hi
inline double smooth01(double x, double lo, double hi) { return clamp01((x - lo) / (hi - lo)); }

}  // namespace detail

/// Proportional controller with smoothly blended phases: circle behind the
/// target block, settle into the pushing lane, push along the block-to-target
/// line. The blend keeps the policy continuous in the state, which matters
/// for cloning it.
inline Action scripted_expert(const EnvConfig& cfg, const State& s, const TaskSpec& task, const Vec2& target) {
    const double speed = cfg.expert_speed * cfg.a_max;
    Action a;
    if (task.kind == TaskKind::MoveGripper) {
        const Vec2 v = (target - s.gripper) * 6.0;
        a.dx = detail::clamp(v.x, -speed, speed);
        a.dy = detail::clamp(v.y, -speed, speed);
        return a;
    }
    const Vec2 b = s.blocks[static_cast<size_t>(task.color)];
    const double dist_to_target = (b - target).norm();
    // fade the whole command out as the block settles on the target
    const double active = detail::smooth01(dist_to_target, 0.55 * task.success_radius, 0.9 * task.success_radius);
    if (active <= 0.0) return a;

    const Vec2 u = unit(target - b);
    const Vec2 rel = s.gripper - b;
    const double d = std::max(rel.norm(), 1e-9);
    const double along = dot(rel, u);  // negative when the gripper trails the block
    const Vec2 lat = rel - u * along;
    const double latd = lat.norm();
    const Vec2 rhat = rel * (1.0 / d);

    // pushing component: drive along the block-to-target line. The lateral
    // steer fades with the conveyor weight: at full contact the block moves
    // with the gripper, so steering against the line would only drag the
    // line along; pure pursuit of u lets the block's own course correct.
    const double reach_w =
        detail::ramp01((cfg.contact_full + cfg.contact_ramp - d) / cfg.contact_ramp);
    const Vec2 lat_dir = latd > 0.01 ? lat * (1.0 / latd) : Vec2{-u.y, u.x};
    const Vec2 v_push = unit(u - lat_dir * (0.7 * std::min(latd / 0.05, 1.0) * (1.0 - reach_w))) * speed;

    // orbit component: circulate around the block toward its rear at a
    // radius just outside the conveyor zone, so repositioning never drags
    const double reach = cfg.contact_full + cfg.contact_ramp;
    const double orbit_radius = reach + 0.06;
    const double side = rel.x * (-u.y) - rel.y * (-u.x);  // cross(rel, -u)
    const Vec2 tangent = Vec2{-rhat.y, rhat.x} * (side >= 0.0 ? 1.0 : -1.0);
    const double radial_gain = detail::clamp((d - orbit_radius) * 6.0, -1.5, 1.5);
    const Vec2 v_orbit = unit(tangent + rhat * (-radial_gain)) * speed;

    // lane weight: 1 when nicely behind the block and laterally aligned;
    // deep contact counts as aligned because the pursuit handles the course
    const double aligned =
        detail::clamp01(detail::smooth01(0.06 - latd, 0.0, 0.03) + detail::smooth01(reach_w, 0.75, 0.95));
    const double lane = detail::smooth01(-along, 0.02, 0.05) * aligned;
    Vec2 v = (v_push * lane + v_orbit * (1.0 - lane)) * active;
    a.dx = detail::clamp(v.x, -speed, speed);
    a.dy = detail::clamp(v.y, -speed, speed);
    return a;
}

struct LipschitzEstimate {
    double k_hat = 0.0;
    std::vector<double> worst_a;
    std::vector<double> worst_b;
};

/// Max over probe pairs of ||f(x) - f(x')||_inf / ||x - x'||_inf with small
/// perturbations; reports the pair attaining the max. At each sampled base
/// point the finite-difference Jacobian picks the steepest perturbation
/// direction (the sign pattern of the largest row), so the estimate is the
/// local sup ratio rather than a random-direction draw.
inline LipschitzEstimate estimate_lipschitz(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                            const std::function<std::vector<double>(Rng&)>& sample, int n_probes,
                                            Rng& rng, double perturb = 1e-4) {
    if (n_probes < 1) throw std::invalid_argument("estimate_lipschitz: n_probes must be >= 1");
    LipschitzEstimate best;
    for (int p = 0; p < n_probes; ++p) {
        const auto x = sample(rng);
        const auto y0 = f(x);
        const size_t nin = x.size(), nout = y0.size();
        // one-sided finite-difference Jacobian columns
        std::vector<double> jac(nin * nout);
        auto xp = x;
        for (size_t i = 0; i < nin; ++i) {
            xp[i] = x[i] + perturb;
            const auto yp = f(xp);
            xp[i] = x[i];
            for (size_t o = 0; o < nout; ++o) jac[o * nin + i] = (yp[o] - y0[o]) / perturb;
        }
        size_t worst_row = 0;
        double worst_sum = -1.0;
        for (size_t o = 0; o < nout; ++o) {
            double s = 0.0;
            for (size_t i = 0; i < nin; ++i) s += std::abs(jac[o * nin + i]);
            if (s > worst_sum) {
                worst_sum = s;
                worst_row = o;
            }
        }
        // realize the pair along the sign-aligned direction of that row
        auto x2 = x;
        for (size_t i = 0; i < nin; ++i) x2[i] += jac[worst_row * nin + i] >= 0.0 ? perturb : -perturb;
        const auto y2 = f(x2);
        double dx = 0.0, dy = 0.0;
        for (size_t i = 0; i < nin; ++i) dx = std::max(dx, std::abs(x[i] - x2[i]));
        for (size_t o = 0; o < nout; ++o) dy = std::max(dy, std::abs(y0[o] - y2[o]));
        if (dx <= 0.0) continue;
        const double ratio = dy / dx;
        if (ratio > best.k_hat) {
            best.k_hat = ratio;
            best.worst_a = x;
            best.worst_b = x2;
        }
    }
    return best;
}

/// Probe coordinates for the env dynamics: the 8 continuous state
/// coordinates plus the 3 action components (grasp flags carry no dynamics).
inline std::vector<double> env_probe_coords(const State& s, const Action& a) {
    return {s.gripper.x, s.gripper.y, s.blocks[0].x, s.blocks[0].y, s.blocks[1].x, s.blocks[1].y,
            s.blocks[2].x, s.blocks[2].y, a.dx, a.dy, a.grasp};
}

inline LipschitzEstimate estimate_env_lipschitz(const EnvConfig& cfg, int n_probes, Rng& rng) {
    auto f = [&cfg](const std::vector<double>& x) {
        State s;
        s.gripper = {x[0], x[1]};
        for (int i = 0; i < 3; ++i) s.blocks[static_cast<size_t>(i)] = {x[static_cast<size_t>(2 + 2 * i)], x[static_cast<size_t>(3 + 2 * i)]};
        Action a{x[8], x[9], x[10]};
        const State n = step_env(cfg, s, a);
        return std::vector<double>{n.gripper.x, n.gripper.y, n.blocks[0].x, n.blocks[0].y,
                                   n.blocks[1].x, n.blocks[1].y, n.blocks[2].x, n.blocks[2].y};
    };
    // half the probes stress the contact ramp, where the steepest
    // configurations live; the rest sample the box uniformly
    auto sample = [&cfg](Rng& r) {
        std::vector<double> x(11);
        const bool stress = r.uniform() < 0.5;
        x[0] = r.uniform();
        x[1] = r.uniform();
        for (int i = 0; i < 3; ++i) {
            if (stress) {
                const double d = r.uniform(0.0, cfg.contact_full + cfg.contact_ramp + 0.02);
                const double ang = r.uniform(0.0, 6.283185307179586);
                x[static_cast<size_t>(2 + 2 * i)] = detail::clamp01(x[0] + d * std::cos(ang));
                x[static_cast<size_t>(3 + 2 * i)] = detail::clamp01(x[1] + d * std::sin(ang));
            } else {
                x[static_cast<size_t>(2 + 2 * i)] = r.uniform();
                x[static_cast<size_t>(3 + 2 * i)] = r.uniform();
            }
        }
        if (stress) {
            x[8] = r.uniform() < 0.5 ? -cfg.a_max : cfg.a_max;
            x[9] = r.uniform() < 0.5 ? -cfg.a_max : cfg.a_max;
            x[10] = r.uniform(cfg.toggle_lo, cfg.toggle_hi);
        } else {
            x[8] = r.uniform(-cfg.a_max, cfg.a_max);
            x[9] = r.uniform(-cfg.a_max, cfg.a_max);
            x[10] = r.uniform();
        }
        return x;
    };
    return estimate_lipschitz(f, sample, n_probes, rng);
}

/// Roll the scripted expert on a fresh reset; returns the trajectory, the
/// emitted actions and the success flag.
struct ExpertRollout {
    std::vector<State> states;
    std::vector<Action> actions;
    bool success = false;
};

inline ExpertRollout run_expert(const EnvConfig& cfg, const TaskSpec& task, uint64_t seed) {
    ExpertRollout out;
    State s = reset_env(cfg, seed);
    const Vec2 target = task_target(cfg, task, s);
    out.states.push_back(s);
    for (int t = 0; t < task.max_steps; ++t) {
        const Action a = scripted_expert(cfg, s, task, target);
        s = step_env(cfg, s, a);
        out.actions.push_back(a);
        out.states.push_back(s);
        const Vec2 e = task.kind == TaskKind::PushBlock ? s.blocks[static_cast<size_t>(task.color)] : s.gripper;
        if ((e - target).norm() <= task.success_radius) {
            out.success = true;
            break;
        }
    }
    return out;
}

}  // namespace lcd
