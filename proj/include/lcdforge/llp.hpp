#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/dataset.hpp"
#include "lcdforge/env.hpp"
#include "lcdforge/optim.hpp"
#include "lcdforge/tensor.hpp"

namespace lcd {

/// Goal-conditioned low-level policy: a state encoder to a 32-wide latent
/// and an action head over (latent, goal latent). The only path from state
/// to action runs through the encoder bottleneck.
struct LLPConfig {
    int state_dim = EnvConfig::state_dim;
    int latent_dim = 32;
    int hidden = 128;
    int action_dim = EnvConfig::action_dim;
    double a_max = 1.0;
};

template <typename T>
Params<T> init_llp_params(const LLPConfig& cfg, Rng& rng) {
    Params<T> p;
    auto lin = [&](const std::string& name, int64_t in, int64_t out) {
        const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
        p.add(name + ".w", Tensor<T>::randn({in, out}, rng, s));
        p.add(name + ".b", Tensor<T>::zeros({out}));
    };
    lin("enc.l1", cfg.state_dim, cfg.hidden);
    lin("enc.l2", cfg.hidden, cfg.hidden);
    lin("enc.out", cfg.hidden, cfg.latent_dim);
    lin("head.l1", 2 * cfg.latent_dim, cfg.hidden);
    lin("head.l2", cfg.hidden, cfg.hidden);
    lin("head.out", cfg.hidden, cfg.action_dim);
    return p;
}

/// states: [B, state_dim] -> latents [B, latent_dim].
template <typename T>
Tensor<T> llp_encode(const LLPConfig& cfg, Params<T>& p, const Tensor<T>& states) {
    if (states.ndim() != 2 || states.dim(1) != cfg.state_dim)
        throw std::invalid_argument("llp_encode: expected [B," + std::to_string(cfg.state_dim) + "], got " +
                                    shape_str(states.shape()));
    auto h = mish(add(matmul(states, p.at("enc.l1.w")), p.at("enc.l1.b")));
    h = mish(add(matmul(h, p.at("enc.l2.w")), p.at("enc.l2.b")));
    return add(matmul(h, p.at("enc.out.w")), p.at("enc.out.b"));
}

/// (latents, goal latents) -> squashed actions [B, action_dim]; velocity
/// components in [-a_max, a_max], grasp in [0, 1].
template <typename T>
Tensor<T> llp_head(const LLPConfig& cfg, Params<T>& p, const Tensor<T>& z, const Tensor<T>& g) {
    if (g.ndim() != 2 || g.dim(1) != cfg.latent_dim)
        throw std::invalid_argument("llp_head: goal width " + shape_str(g.shape()) + " does not match latent_dim " +
                                    std::to_string(cfg.latent_dim));
    auto h = concat<T>({z, g}, 1);
    h = mish(add(matmul(h, p.at("head.l1.w")), p.at("head.l1.b")));
    h = mish(add(matmul(h, p.at("head.l2.w")), p.at("head.l2.b")));
    auto raw = tanh_act(add(matmul(h, p.at("head.out.w")), p.at("head.out.b")));  // [-1,1]
    // scale velocity components to [-a_max, a_max]; map grasp to [0,1]
    std::vector<T> lo(static_cast<size_t>(cfg.action_dim)), sc(static_cast<size_t>(cfg.action_dim));
    for (int i = 0; i < cfg.action_dim; ++i) {
        const bool is_grasp = i == cfg.action_dim - 1;
        sc[static_cast<size_t>(i)] = is_grasp ? T(0.5) : static_cast<T>(cfg.a_max);
        lo[static_cast<size_t>(i)] = is_grasp ? T(0.5) : T(0);
    }
    auto scale_t = Tensor<T>::from({cfg.action_dim}, sc);
    auto off_t = Tensor<T>::from({cfg.action_dim}, lo);
    return add(mul(raw, scale_t), off_t);
}

template <typename T>
Tensor<T> llp_forward(const LLPConfig& cfg, Params<T>& p, const Tensor<T>& states, const Tensor<T>& goal_states) {
    auto z = llp_encode(cfg, p, states);
    auto g = llp_encode(cfg, p, goal_states);
    return llp_head(cfg, p, z, g);
}

/// Inference: encode one state (no graph).
template <typename T>
std::vector<double> encode_state(const LLPConfig& cfg, Params<T>& p, const std::vector<double>& state) {
    NoGradGuard guard;
    std::vector<T> d(state.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(state[i]);
    auto z = llp_encode(cfg, p, Tensor<T>::from({1, cfg.state_dim}, std::move(d)));
    std::vector<double> out(z.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(z.data()[i]);
    return out;
}

/// Inference: act from a raw state and a goal latent (no graph).
template <typename T>
Action llp_act(const LLPConfig& cfg, Params<T>& p, const std::vector<double>& state,
               const std::vector<double>& goal_latent) {
    if (static_cast<int>(goal_latent.size()) != cfg.latent_dim)
        throw std::invalid_argument("llp_act: goal width " + std::to_string(goal_latent.size()) +
                                    " does not match latent_dim " + std::to_string(cfg.latent_dim));
    NoGradGuard guard;
    std::vector<T> sd(state.size());
    for (size_t i = 0; i < sd.size(); ++i) sd[i] = static_cast<T>(state[i]);
    std::vector<T> gd(goal_latent.size());
    for (size_t i = 0; i < gd.size(); ++i) gd[i] = static_cast<T>(goal_latent[i]);
    auto z = llp_encode(cfg, p, Tensor<T>::from({1, cfg.state_dim}, std::move(sd)));
    auto out = llp_head(cfg, p, z, Tensor<T>::from({1, cfg.latent_dim}, std::move(gd)));
    Action a;
    a.dx = static_cast<double>(out.data()[0]);
    a.dy = static_cast<double>(out.data()[1]);
    a.grasp = static_cast<double>(out.data()[2]);
    return a;
}

/// Hindsight-relabeled supervision: (s_t, s_{t+c+d}, a_t) with
/// d ~ Unif{-o..o} clipped into the episode.
struct RelabeledPairs {
    int state_dim = 0;
    int action_dim = 0;
    std::vector<double> states;       // N x state_dim
    std::vector<double> goal_states;  // N x state_dim
    std::vector<double> actions;      // N x action_dim
    std::vector<int> episode_ids;
    std::vector<int> offsets;  // the drawn d per pair

    size_t size() const { return episode_ids.size(); }
};

inline RelabeledPairs build_relabeled(const TrajectoryDataset& ds, int c, int o, Rng& rng) {
    if (c < 1 || o < 0) throw std::invalid_argument("build_relabeled: require c >= 1 and o >= 0");
    size_t too_short = 0;
    size_t min_len = SIZE_MAX;
    for (const auto& e : ds.episodes) {
        min_len = std::min(min_len, e.states.size());
        if (e.states.size() <= static_cast<size_t>(c + o)) ++too_short;
    }
    if (ds.episodes.empty() || too_short > 0)
        throw std::invalid_argument("build_relabeled: c+o=" + std::to_string(c + o) +
                                    " >= min episode length; " + std::to_string(too_short) + " of " +
                                    std::to_string(ds.episodes.size()) + " episodes too short (min " +
                                    std::to_string(min_len == SIZE_MAX ? 0 : min_len) + " states)");
    RelabeledPairs out;
    out.state_dim = ds.state_dim;
    out.action_dim = ds.action_dim;
    for (size_t ei = 0; ei < ds.episodes.size(); ++ei) {
        const auto& e = ds.episodes[ei];
        const int n_states = static_cast<int>(e.states.size());
        for (int t = 0; t < n_states - c - o; ++t) {
            const int d = o == 0 ? 0 : static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * o + 1))) - o;
            const int gi = std::clamp(t + c + d, 0, n_states - 1);
            out.states.insert(out.states.end(), e.states[static_cast<size_t>(t)].begin(), e.states[static_cast<size_t>(t)].end());
            out.goal_states.insert(out.goal_states.end(), e.states[static_cast<size_t>(gi)].begin(),
                                   e.states[static_cast<size_t>(gi)].end());
            out.actions.insert(out.actions.end(), e.actions[static_cast<size_t>(t)].begin(), e.actions[static_cast<size_t>(t)].end());
            out.episode_ids.push_back(static_cast<int>(ei));
            out.offsets.push_back(d);
        }
    }
    return out;
}

struct LLPTrainOptions {
    int epochs = 8;
    int batch = 128;
    double lr = 2e-4;
    double val_fraction = 0.1;
    uint64_t seed = 0;
};

template <typename T>
struct TrainedLLP {
    Params<T> params;
    double eps_sup = 0.0;   // validation max action error (L2 per action)
    double eps_mean = 0.0;  // validation mean action error
    std::vector<double> loss_curve;
    bool aborted_non_finite = false;
};

/// Behavior cloning on relabeled pairs; reports the validation sup/mean
/// action reconstruction error. The sup error feeds the suboptimality bound.
template <typename T>
TrainedLLP<T> train_llp(const LLPConfig& cfg, const RelabeledPairs& pairs, const LLPTrainOptions& opt) {
    if (pairs.size() == 0) throw std::invalid_argument("train_llp: empty pair set");
    Rng rng(stream_seed(opt.seed, "llp.train"));
    TrainedLLP<T> out{init_llp_params<T>(cfg, rng)};

    // deterministic validation split
    const size_t n = pairs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(i))]);
    const size_t n_val = std::max<size_t>(1, static_cast<size_t>(static_cast<double>(n) * opt.val_fraction));
    const std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    if (train_idx.empty()) train_idx = val_idx;

    auto gather = [&](const std::vector<size_t>& idx, size_t from, size_t count) {
        const size_t sd = static_cast<size_t>(pairs.state_dim), ad = static_cast<size_t>(pairs.action_dim);
        std::vector<T> s(count * sd), g(count * sd), a(count * ad);
        for (size_t i = 0; i < count; ++i) {
            const size_t pi = idx[from + i];
            for (size_t j = 0; j < sd; ++j) {
                s[i * sd + j] = static_cast<T>(pairs.states[pi * sd + j]);
                g[i * sd + j] = static_cast<T>(pairs.goal_states[pi * sd + j]);
            }
            for (size_t j = 0; j < ad; ++j) a[i * ad + j] = static_cast<T>(pairs.actions[pi * ad + j]);
        }
        const int64_t b = static_cast<int64_t>(count);
        return std::make_tuple(Tensor<T>::from({b, pairs.state_dim}, std::move(s)),
                               Tensor<T>::from({b, pairs.state_dim}, std::move(g)),
                               Tensor<T>::from({b, pairs.action_dim}, std::move(a)));
    };

    AdamState<T> adam(static_cast<T>(opt.lr));
    Params<T> last_finite = clone_params(out.params);
    for (int ep = 0; ep < opt.epochs; ++ep) {
        for (size_t i = train_idx.size(); i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[static_cast<size_t>(rng.uniform_int(i))]);
        for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(opt.batch)) {
            const size_t count = std::min(static_cast<size_t>(opt.batch), train_idx.size() - start);
            auto [s, g, a] = gather(train_idx, start, count);
            out.params.zero_grad();
            auto pred = llp_forward(cfg, out.params, s, g);
            auto diff = sub(pred, a);
            auto loss = mean_all(mul(diff, diff));
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                out.params = std::move(last_finite);
                out.aborted_non_finite = true;
                break;
            }
            out.loss_curve.push_back(lv);
            backward(loss);
            adam_step(out.params, adam);
        }
        if (out.aborted_non_finite) break;
        last_finite = clone_params(out.params);
    }

    // validation sup and mean action error
    NoGradGuard guard;
    double sup = 0.0, mean = 0.0;
    for (size_t start = 0; start < val_idx.size(); start += 512) {
        const size_t count = std::min<size_t>(512, val_idx.size() - start);
        auto [s, g, a] = gather(val_idx, start, count);
        auto pred = llp_forward(cfg, out.params, s, g);
        for (size_t i = 0; i < count; ++i) {
            double err2 = 0.0;
            for (int j = 0; j < pairs.action_dim; ++j) {
                const double d = static_cast<double>(pred.data()[i * static_cast<size_t>(pairs.action_dim) + static_cast<size_t>(j)]) -
                                 static_cast<double>(a.data()[i * static_cast<size_t>(pairs.action_dim) + static_cast<size_t>(j)]);
                err2 += d * d;
            }
            const double err = std::sqrt(err2);
            sup = std::max(sup, err);
            mean += err;
        }
    }
    out.eps_sup = sup;
    out.eps_mean = val_idx.empty() ? 0.0 : mean / static_cast<double>(val_idx.size());
    return out;
}

}  // namespace lcd
