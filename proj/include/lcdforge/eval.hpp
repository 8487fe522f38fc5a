#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcdforge/denoiser.hpp"
#include "lcdforge/diffusion.hpp"
#include "lcdforge/env.hpp"
#include "lcdforge/hlp.hpp"
#include "lcdforge/language.hpp"
#include "lcdforge/llp.hpp"

namespace lcd {

// ---------------------------------------------------------------------------
// policy interface: every evaluated controller (hierarchical, flat BC,
// random, oracles) runs through the same loop
// ---------------------------------------------------------------------------

class TaskPolicy {
public:
    virtual ~TaskPolicy() = default;
    virtual void begin_task(const Instruction& ins, const State& start) = 0;
    virtual Action act(const State& s, Rng& rng) = 0;
};

using PolicyFactory = std::function<std::unique_ptr<TaskPolicy>()>;

struct RolloutOptions {
    int stride = 4;       // replan every c steps
    int timeout = 360;    // per-task step budget
    int ddim_steps = 10;  // strided sampler steps
    double eta = 0.0;
};

/// The hierarchical controller: sample a latent plan by DDIM conditioned on
/// the instruction embedding, hand its first goal slot to the LLP for c
/// steps, then replan.
template <typename T>
class HierarchicalPolicy : public TaskPolicy {
public:
    HierarchicalPolicy(const DenoiserConfig& cfg, Params<T>& eps_params, const VarianceSchedule& sched,
                       const Normalizer& normalizer, const LLPConfig& llp_cfg, Params<T>& llp_params,
                       const RolloutOptions& opt)
        : cfg_(cfg), eps_params_(eps_params), sched_(sched), normalizer_(normalizer), llp_cfg_(llp_cfg),
          llp_params_(llp_params), opt_(opt) {
        if (cfg_.latent_dim != llp_cfg_.latent_dim)
            throw std::invalid_argument("hierarchical policy: denoiser latent_dim " + std::to_string(cfg_.latent_dim) +
                                        " does not match LLP latent_dim " + std::to_string(llp_cfg_.latent_dim));
    }

    void begin_task(const Instruction& ins, const State&) override {
        if (static_cast<int64_t>(ins.embedding.size()) != cfg_.cond_dim)
            throw std::invalid_argument("hierarchical policy: embedding width " + std::to_string(ins.embedding.size()) +
                                        " does not match denoiser cond_dim " + std::to_string(cfg_.cond_dim));
        embedding_ = ins.embedding;
        steps_in_task_ = 0;
    }

    Action act(const State& s, Rng& rng) override {
        if (steps_in_task_ % opt_.stride == 0) replan(rng);
        ++steps_in_task_;
        return llp_act(llp_cfg_, llp_params_, state_vec(s), goal_);
    }

private:
    void replan(Rng& rng) {
        std::vector<T> emb(embedding_.size());
        for (size_t i = 0; i < emb.size(); ++i) emb[i] = static_cast<T>(embedding_[i]);
        auto cond = Tensor<T>::from({cfg_.cond_dim}, std::move(emb));
        DdimOptions dopt;
        dopt.n_steps = opt_.ddim_steps;
        dopt.eta = opt_.eta;
        dopt.normalizer = &normalizer_;
        auto model = make_eps_model(cfg_, eps_params_);
        auto plan = ddim_sample(model, cond, sched_, cfg_.horizon, cfg_.latent_dim, rng, dopt);
        // first goal slot: index 1 (slot 0 is the plan's anchor state)
        goal_.assign(static_cast<size_t>(cfg_.latent_dim), 0.0);
        for (int64_t d = 0; d < cfg_.latent_dim; ++d)
            goal_[static_cast<size_t>(d)] = static_cast<double>(plan.data()[static_cast<size_t>(cfg_.latent_dim + d)]);
    }

    const DenoiserConfig& cfg_;
    Params<T>& eps_params_;
    const VarianceSchedule& sched_;
    const Normalizer& normalizer_;
    const LLPConfig& llp_cfg_;
    Params<T>& llp_params_;
    RolloutOptions opt_;
    std::vector<double> embedding_;
    std::vector<double> goal_;
    int steps_in_task_ = 0;
};

/// One language-specified task from a given start state; terminates on the
/// task predicate or the timeout.
inline EpisodeResult run_task_episode(const EnvConfig& env_cfg, TaskPolicy& policy, const TaskSpec& task,
                                      const Instruction& ins, const State& start, int timeout, Rng& rng,
                                      State* final_state = nullptr) {
    policy.begin_task(ins, start);
    std::vector<State> traj = {start};
    State s = start;
    EpisodeResult res;
    for (int t = 0; t < timeout; ++t) {
        const Action a = policy.act(s, rng);
        s = step_env(env_cfg, s, a);
        traj.push_back(s);
        res.steps = t + 1;
        if (task_success(env_cfg, traj, task)) {
            res.success = true;
            break;
        }
    }
    res.final_state = s;
    if (final_state) *final_state = s;
    return res;
}

// ---------------------------------------------------------------------------
// multi-task long-horizon chains
// ---------------------------------------------------------------------------

struct ChainSpec {
    std::vector<TaskSpec> tasks;          // 1..5 positions
    std::vector<Instruction> instructions;
    uint64_t seed = 0;                    // reset seed of the chain start
};

/// Chains drawn from a task pool without replacement within a chain.
inline std::vector<ChainSpec> make_chains(const std::vector<TaskSpec>& pool, int n_chains, int chain_len,
                                          TemplateSplit split, const EmbeddingProvider& provider, uint64_t seed) {
    if (chain_len < 1 || chain_len > 5) throw std::invalid_argument("make_chains: chain length must be in [1,5]");
    if (static_cast<size_t>(chain_len) > pool.size())
        throw std::invalid_argument("make_chains: pool smaller than chain length");
    std::vector<ChainSpec> chains;
    for (int ci = 0; ci < n_chains; ++ci) {
        Rng rng(stream_seed(seed, "eval.chain", static_cast<uint64_t>(ci)));
        ChainSpec chain;
        chain.seed = stream_seed(seed, "eval.chain.reset", static_cast<uint64_t>(ci));
        std::vector<size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (int k = 0; k < chain_len; ++k) {
            const size_t pick = static_cast<size_t>(rng.uniform_int(idx.size() - static_cast<size_t>(k))) + static_cast<size_t>(k);
            std::swap(idx[static_cast<size_t>(k)], idx[pick]);
            const TaskSpec& task = pool[idx[static_cast<size_t>(k)]];
            chain.tasks.push_back(task);
            chain.instructions.push_back(sample_instruction(task, split, provider, rng));
        }
        chains.push_back(std::move(chain));
    }
    return chains;
}

struct ChainOutcome {
    uint64_t seed = 0;
    int completed = 0;
    std::vector<int> per_position_steps;
};

struct MtlhcResult {
    int n_chains = 0;
    int chain_len = 0;
    std::vector<double> success_rates;  // rate[k-1] = fraction completing >= k
    double avg_horizon_len = 0.0;
    std::vector<ChainOutcome> chains;
};

/// Position k starts from the state where position k-1 succeeded; the chain
/// stops at the first failure. avg_horizon_len is computed both as the sum
/// of the per-horizon rates and as the mean completed count; the two integer
/// aggregates must agree exactly.
inline MtlhcResult eval_mtlhc(const EnvConfig& env_cfg, const PolicyFactory& factory,
                              const std::vector<ChainSpec>& chains, int timeout, uint64_t seed, int jobs = 1) {
    if (chains.empty()) throw std::invalid_argument("eval_mtlhc: empty chain list");
    MtlhcResult res;
    res.n_chains = static_cast<int>(chains.size());
    res.chain_len = static_cast<int>(chains.front().tasks.size());
    res.chains.resize(chains.size());

    parallel_for(chains.size(), jobs, [&](size_t ci) {
        const ChainSpec& chain = chains[ci];
        auto policy = factory();
        Rng rng(stream_seed(seed, "eval.rollout", ci));
        State s = reset_env(env_cfg, chain.seed);
        ChainOutcome out;
        out.seed = chain.seed;
        for (size_t k = 0; k < chain.tasks.size(); ++k) {
            State next;
            const EpisodeResult er =
                run_task_episode(env_cfg, *policy, chain.tasks[k], chain.instructions[k], s, timeout, rng, &next);
            out.per_position_steps.push_back(er.steps);
            if (!er.success) break;
            out.completed += 1;
            s = next;
        }
        res.chains[ci] = std::move(out);
    });

    // integer aggregation first: sum_k count_k == sum_i completed_i exactly
    std::vector<int64_t> counts(static_cast<size_t>(res.chain_len), 0);
    int64_t total_completed = 0;
    for (const auto& c : res.chains) {
        total_completed += c.completed;
        for (int k = 1; k <= c.completed; ++k) counts[static_cast<size_t>(k - 1)] += 1;
    }
    int64_t counts_sum = 0;
    for (int64_t v : counts) counts_sum += v;
    if (counts_sum != total_completed)
        throw std::logic_error("eval_mtlhc: horizon counts disagree with completed totals");
    res.success_rates.resize(static_cast<size_t>(res.chain_len));
    for (int k = 0; k < res.chain_len; ++k)
        res.success_rates[static_cast<size_t>(k)] = static_cast<double>(counts[static_cast<size_t>(k)]) /
                                                    static_cast<double>(res.n_chains);
    res.avg_horizon_len = static_cast<double>(total_completed) / static_cast<double>(res.n_chains);
    return res;
}

inline void write_results_json(const MtlhcResult& res, const std::string& path, const std::string& policy_name,
                               uint64_t seed, const std::string& config_hash) {
    nlohmann::json j;
    j["policy"] = policy_name;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["n_chains"] = res.n_chains;
    j["chain_len"] = res.chain_len;
    j["horizon_success_rates"] = res.success_rates;
    j["avg_horizon_len"] = res.avg_horizon_len;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("results: cannot write " + path);
    f << j.dump(2) << "\n";
}

inline void write_results_csv(const MtlhcResult& res, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("results: cannot write " + path);
    f << "chain,seed,completed";
    for (int k = 1; k <= res.chain_len; ++k) f << ",steps_pos" << k;
    f << "\n";
    for (size_t i = 0; i < res.chains.size(); ++i) {
        f << i << "," << res.chains[i].seed << "," << res.chains[i].completed;
        for (int k = 0; k < res.chain_len; ++k) {
            f << ",";
            if (k < static_cast<int>(res.chains[i].per_position_steps.size()))
                f << res.chains[i].per_position_steps[static_cast<size_t>(k)];
        }
        f << "\n";
    }
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

struct FlatBCConfig {
    int state_dim = EnvConfig::state_dim;
    int embed_width = 64;
    int hidden = 256;
    int action_dim = EnvConfig::action_dim;
    double a_max = 1.0;
};

template <typename T>
Params<T> init_flat_bc_params(const FlatBCConfig& cfg, Rng& rng) {
    Params<T> p;
    auto lin = [&](const std::string& name, int64_t in, int64_t out) {
        const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
        p.add(name + ".w", Tensor<T>::randn({in, out}, rng, s));
        p.add(name + ".b", Tensor<T>::zeros({out}));
    };
    lin("l1", cfg.state_dim + cfg.embed_width, cfg.hidden);
    lin("l2", cfg.hidden, cfg.hidden);
    lin("out", cfg.hidden, cfg.action_dim);
    return p;
}

template <typename T>
Tensor<T> flat_bc_forward(const FlatBCConfig& cfg, Params<T>& p, const Tensor<T>& input) {
    auto h = mish(add(matmul(input, p.at("l1.w")), p.at("l1.b")));
    h = mish(add(matmul(h, p.at("l2.w")), p.at("l2.b")));
    auto raw = tanh_act(add(matmul(h, p.at("out.w")), p.at("out.b")));
    std::vector<T> sc(static_cast<size_t>(cfg.action_dim)), off(static_cast<size_t>(cfg.action_dim));
    for (int i = 0; i < cfg.action_dim; ++i) {
        const bool is_grasp = i == cfg.action_dim - 1;
        sc[static_cast<size_t>(i)] = is_grasp ? T(0.5) : static_cast<T>(cfg.a_max);
        off[static_cast<size_t>(i)] = is_grasp ? T(0.5) : T(0);
    }
    return add(mul(raw, Tensor<T>::from({cfg.action_dim}, sc)), Tensor<T>::from({cfg.action_dim}, off));
}

struct FlatBCTrainOptions {
    int epochs = 10;
    int batch = 128;
    double lr = 1e-3;
    uint64_t seed = 0;
};

/// Language-conditioned behavior cloning straight from (state, embedding) to
/// action; the flat high-level-free baseline.
template <typename T>
Params<T> train_flat_bc(const FlatBCConfig& cfg, const TrajectoryDataset& ds, const EmbeddingProvider& provider,
                        const FlatBCTrainOptions& opt) {
    if (ds.episodes.empty()) throw std::invalid_argument("flat_bc: empty dataset");
    if (provider.width() != cfg.embed_width)
        throw std::invalid_argument("flat_bc: provider width " + std::to_string(provider.width()) +
                                    " does not match config embed_width " + std::to_string(cfg.embed_width));
    std::vector<double> inputs;
    std::vector<double> targets;
    size_t n = 0;
    for (const auto& e : ds.episodes) {
        const auto emb = provider.embed(e.instruction);
        for (size_t t = 0; t < e.actions.size(); ++t) {
            inputs.insert(inputs.end(), e.states[t].begin(), e.states[t].end());
            inputs.insert(inputs.end(), emb.begin(), emb.end());
            targets.insert(targets.end(), e.actions[t].begin(), e.actions[t].end());
            ++n;
        }
    }
    Rng rng(stream_seed(opt.seed, "flatbc.train"));
    auto params = init_flat_bc_params<T>(cfg, rng);
    AdamState<T> adam(static_cast<T>(opt.lr));
    Params<T> last_finite = clone_params(params);
    const size_t in_dim = static_cast<size_t>(cfg.state_dim + cfg.embed_width);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int ep = 0; ep < opt.epochs; ++ep) {
        for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(i))]);
        for (size_t start = 0; start < n; start += static_cast<size_t>(opt.batch)) {
            const size_t count = std::min(static_cast<size_t>(opt.batch), n - start);
            std::vector<T> bi(count * in_dim), bt(count * 3);
            for (size_t i = 0; i < count; ++i) {
                const size_t pi = order[start + i];
                for (size_t j = 0; j < in_dim; ++j) bi[i * in_dim + j] = static_cast<T>(inputs[pi * in_dim + j]);
                for (size_t j = 0; j < 3; ++j) bt[i * 3 + j] = static_cast<T>(targets[pi * 3 + j]);
            }
            auto in_t = Tensor<T>::from({static_cast<int64_t>(count), static_cast<int64_t>(in_dim)}, std::move(bi));
            auto tg_t = Tensor<T>::from({static_cast<int64_t>(count), 3}, std::move(bt));
            params.zero_grad();
            auto pred = flat_bc_forward(cfg, params, in_t);
            auto diff = sub(pred, tg_t);
            auto loss = mean_all(mul(diff, diff));
            if (!std::isfinite(static_cast<double>(loss.item()))) return last_finite;
            backward(loss);
            adam_step(params, adam);
        }
        last_finite = clone_params(params);
    }
    return params;
}

template <typename T>
class FlatBCPolicy : public TaskPolicy {
public:
    FlatBCPolicy(const FlatBCConfig& cfg, Params<T>& params) : cfg_(cfg), params_(params) {}

    void begin_task(const Instruction& ins, const State&) override {
        if (static_cast<int>(ins.embedding.size()) != cfg_.embed_width)
            throw std::invalid_argument("flat_bc: embedding width " + std::to_string(ins.embedding.size()) +
                                        " does not match config " + std::to_string(cfg_.embed_width));
        embedding_ = ins.embedding;
    }

    Action act(const State& s, Rng&) override {
        NoGradGuard guard;
        const auto sv = state_vec(s);
        std::vector<T> in(sv.size() + embedding_.size());
        for (size_t i = 0; i < sv.size(); ++i) in[i] = static_cast<T>(sv[i]);
        for (size_t i = 0; i < embedding_.size(); ++i) in[sv.size() + i] = static_cast<T>(embedding_[i]);
        const auto in_dim = static_cast<int64_t>(in.size());
        auto out = flat_bc_forward(cfg_, params_, Tensor<T>::from({1, in_dim}, std::move(in)));
        return Action{static_cast<double>(out.data()[0]), static_cast<double>(out.data()[1]),
                      static_cast<double>(out.data()[2])};
    }

private:
    const FlatBCConfig& cfg_;
    Params<T>& params_;
    std::vector<double> embedding_;
};

class RandomPolicy : public TaskPolicy {
public:
    explicit RandomPolicy(double a_max) : a_max_(a_max) {}
    void begin_task(const Instruction&, const State&) override {}
    Action act(const State&, Rng& rng) override {
        return Action{rng.uniform(-a_max_, a_max_), rng.uniform(-a_max_, a_max_), rng.uniform()};
    }

private:
    double a_max_;
};

// ---------------------------------------------------------------------------
// suboptimality bound
// ---------------------------------------------------------------------------

struct SuboptReport {
    double eps_hat = 0.0;      // LLP validation sup action error
    double k_hat = 0.0;        // empirical Lipschitz constant
    double k_design = 0.0;     // documented analytic bound
    double gamma = 0.9;
    double r_max = 1.0;
    double domain = 0.0;       // diameter of the clamped state-action box
    double bound = 0.0;
    double expert_return = 0.0;
    double policy_return = 0.0;
    double realized_gap = 0.0;
    bool holds = false;
};

/// bound = 2 gamma / (1-gamma)^2 * R_max * K * dom * eps.
inline double suboptimality_bound(double gamma, double r_max, double k, double dom, double eps) {
    return 2.0 * gamma / ((1.0 - gamma) * (1.0 - gamma)) * r_max * k * dom * eps;
}

/// L2 diameter of the clamped (state, action) box: unit ranges for the 11
/// state coordinates and the grasp command, 2*a_max for each velocity axis.
inline double state_action_domain(const EnvConfig& cfg) {
    const double v_range = 2.0 * cfg.a_max;
    return std::sqrt(static_cast<double>(EnvConfig::state_dim) + 2.0 * v_range * v_range + 1.0);
}

/// Episodic reward is the undiscounted success indicator (R_max = 1);
/// the realized gap is the paired difference of expert and hierarchical
/// returns over matched (task, seed) episodes.
inline SuboptReport check_suboptimality(const EnvConfig& env_cfg, double eps_hat, const PolicyFactory& factory,
                                        const std::vector<TaskSpec>& tasks, const EmbeddingProvider& provider,
                                        double gamma, double r_max, int episodes_per_task, uint64_t seed,
                                        int lipschitz_probes = 20000, int jobs = 1) {
    if (eps_hat < 0.0) throw std::invalid_argument("check_suboptimality: missing eps_hat");
    SuboptReport rep;
    rep.eps_hat = eps_hat;
    rep.gamma = gamma;
    rep.r_max = r_max;
    Rng lrng(stream_seed(seed, "subopt.lipschitz"));
    rep.k_hat = estimate_env_lipschitz(env_cfg, lipschitz_probes, lrng).k_hat;
    rep.k_design = env_cfg.lipschitz_bound();
    rep.domain = state_action_domain(env_cfg);
    rep.bound = suboptimality_bound(gamma, r_max, rep.k_hat, rep.domain, eps_hat);

    struct Row {
        double expert = 0.0;
        double policy = 0.0;
    };
    std::vector<Row> rows(tasks.size() * static_cast<size_t>(episodes_per_task));
    parallel_for(rows.size(), jobs, [&](size_t i) {
        const TaskSpec& task = tasks[i / static_cast<size_t>(episodes_per_task)];
        const uint64_t ep_seed = stream_seed(seed, "subopt.episode", i);
        rows[i].expert = run_expert(env_cfg, task, ep_seed).success ? 1.0 : 0.0;
        auto policy = factory();
        Rng rng(stream_seed(seed, "subopt.rollout", i));
        Rng irng(stream_seed(seed, "subopt.instr", i));
        const Instruction ins = sample_instruction(task, TemplateSplit::Train, provider, irng);
        const State start = reset_env(env_cfg, ep_seed);
        const EpisodeResult er = run_task_episode(env_cfg, *policy, task, ins, start, task.max_steps, rng);
        rows[i].policy = er.success ? 1.0 : 0.0;
    });
    double se = 0.0, sp = 0.0;
    for (const auto& r : rows) {
        se += r.expert;
        sp += r.policy;
    }
    rep.expert_return = se / static_cast<double>(rows.size());
    rep.policy_return = sp / static_cast<double>(rows.size());
    rep.realized_gap = rep.expert_return - rep.policy_return;
    const double tolerance = rep.bound > 0.0 ? 0.0 : 1e-9;
    rep.holds = rep.realized_gap <= rep.bound + tolerance;
    return rep;
}

inline void write_subopt_json(const SuboptReport& rep, const std::string& path, const std::string& config_hash) {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["eps_hat"] = rep.eps_hat;
    j["k_hat"] = rep.k_hat;
    j["k_design"] = rep.k_design;
    j["gamma"] = rep.gamma;
    j["r_max"] = rep.r_max;
    j["domain"] = rep.domain;
    j["bound"] = rep.bound;
    j["expert_return"] = rep.expert_return;
    j["policy_return"] = rep.policy_return;
    j["realized_gap"] = rep.realized_gap;
    j["holds"] = rep.holds;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("subopt: cannot write " + path);
    f << j.dump(2) << "\n";
}

}  // namespace lcd
