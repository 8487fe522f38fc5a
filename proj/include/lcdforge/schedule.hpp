#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcd {

enum class ScheduleKind { Linear, Cosine };

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("schedule: unknown kind '" + s + "'");
}

/// Per-step variance tables for the forward/reverse processes. All entries
/// are computed and stored in 64-bit; alpha_bar is the exact running product
/// of alpha.
struct VarianceSchedule {
    int steps = 0;
    std::vector<double> beta;       // beta[t-1] for t in 1..steps
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha_s

    double beta_at(int t) const {
        check_t(t);
        return beta[static_cast<size_t>(t - 1)];
    }
    double alpha_at(int t) const {
        check_t(t);
        return alpha[static_cast<size_t>(t - 1)];
    }
    // alpha_bar_at(0) == 1 by convention (terminal DDIM step).
    double alpha_bar_at(int t) const {
        if (t == 0) return 1.0;
        check_t(t);
        return alpha_bar[static_cast<size_t>(t - 1)];
    }

    void check_t(int t) const {
        if (t < 1 || t > steps)
            throw std::invalid_argument("schedule: step " + std::to_string(t) + " outside [1," + std::to_string(steps) + "]");
    }
};

inline VarianceSchedule make_schedule(ScheduleKind kind, int steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1, got " + std::to_string(steps));
    VarianceSchedule s;
    s.steps = steps;
    s.beta.resize(static_cast<size_t>(steps));
    if (kind == ScheduleKind::Linear) {
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw std::invalid_argument("schedule: linear requires 0 < beta_start <= beta_end < 1");
        for (int t = 1; t <= steps; ++t)
            s.beta[static_cast<size_t>(t - 1)] =
                steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / double(steps - 1);
    } else {
        const double offs = 0.008;
        auto f = [&](double t) {
            const double v = std::cos((t / steps + offs) / (1.0 + offs) * 1.5707963267948966);
            return v * v;
        };
        double prev = 1.0;
        for (int t = 1; t <= steps; ++t) {
            const double ab = f(static_cast<double>(t)) / f(0.0);
            double b = 1.0 - ab / prev;
            b = std::min(std::max(b, 1e-8), 0.999);
            s.beta[static_cast<size_t>(t - 1)] = b;
            prev *= 1.0 - b;
        }
    }
    s.alpha.resize(static_cast<size_t>(steps));
    s.alpha_bar.resize(static_cast<size_t>(steps));
    double running = 1.0;
    for (int t = 1; t <= steps; ++t) {
        s.alpha[static_cast<size_t>(t - 1)] = 1.0 - s.beta[static_cast<size_t>(t - 1)];
        running *= s.alpha[static_cast<size_t>(t - 1)];
        s.alpha_bar[static_cast<size_t>(t - 1)] = running;
        if (!(s.beta[static_cast<size_t>(t - 1)] > 0.0 && s.beta[static_cast<size_t>(t - 1)] < 1.0))
            throw std::invalid_argument("schedule: beta out of (0,1) at step " + std::to_string(t));
    }
    for (int t = 2; t <= steps; ++t)
        if (!(s.alpha_bar[static_cast<size_t>(t - 1)] < s.alpha_bar[static_cast<size_t>(t - 2)]))
            throw std::invalid_argument("schedule: alpha_bar not strictly decreasing at step " + std::to_string(t));
    return s;
}

/// Evenly strided descending subsequence of {T..1}; endpoints always
/// included. Used by the DDIM sampler.
inline std::vector<int> ddim_timesteps(int total_steps, int n_steps) {
    if (n_steps < 1 || n_steps > total_steps)
        throw std::invalid_argument("ddim: n_steps " + std::to_string(n_steps) + " outside [1," +
                                    std::to_string(total_steps) + "]");
    std::vector<int> ts;
    if (n_steps == 1) {
        ts.push_back(total_steps);
        return ts;
    }
    for (int j = 0; j < n_steps; ++j) {
        const int t = 1 + static_cast<int>((static_cast<int64_t>(total_steps - 1) * (n_steps - 1 - j)) / (n_steps - 1));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }
    return ts;
}

}  // namespace lcd
