#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/checkpoint.hpp"
#include "lcdforge/dataset.hpp"
#include "lcdforge/denoiser.hpp"
#include "lcdforge/diffusion.hpp"
#include "lcdforge/language.hpp"
#include "lcdforge/llp.hpp"
#include "lcdforge/optim.hpp"

namespace lcd {

// ---------------------------------------------------------------------------
// expert dataset generation and on-policy collection
// ---------------------------------------------------------------------------

/// gen-expert stage: scripted-expert rollouts with sampled train-split
/// instructions, reset seeds recorded for later replay.
inline TrajectoryDataset generate_expert_dataset(const EnvConfig& env_cfg, const std::vector<TaskSpec>& tasks,
                                                 int episodes_per_task, const EmbeddingProvider& provider,
                                                 uint64_t seed, int jobs = 1) {
    struct Job {
        const TaskSpec* task;
        uint64_t reset_seed;
        uint64_t instr_seed;
    };
    std::vector<Job> jobs_list;
    for (size_t ti = 0; ti < tasks.size(); ++ti)
        for (int k = 0; k < episodes_per_task; ++k) {
            const uint64_t idx = ti * static_cast<size_t>(episodes_per_task) + static_cast<size_t>(k);
            jobs_list.push_back({&tasks[ti], stream_seed(seed, "env.reset", idx), stream_seed(seed, "instr", idx)});
        }
    std::vector<Trajectory> results(jobs_list.size());
    parallel_for(jobs_list.size(), jobs, [&](size_t ji) {
        const Job& job = jobs_list[ji];
        Rng irng(job.instr_seed);
        const Instruction ins = sample_instruction(*job.task, TemplateSplit::Train, provider, irng);
        const ExpertRollout roll = run_expert(env_cfg, *job.task, job.reset_seed);
        Trajectory t;
        t.task_id = job.task->id;
        t.seed = job.reset_seed;
        t.instruction = ins.text;
        t.split = "train";
        t.success = roll.success;
        for (const auto& s : roll.states) t.states.push_back(state_vec(s));
        for (const auto& a : roll.actions) t.actions.push_back({a.dx, a.dy, a.grasp});
        results[ji] = std::move(t);
    });
    TrajectoryDataset ds;
    ds.state_dim = EnvConfig::state_dim;
    ds.action_dim = EnvConfig::action_dim;
    ds.provenance = "gen_expert";
    for (auto& r : results) ds.episodes.push_back(std::move(r));
    return ds;
}

struct CollectReport {
    std::map<std::string, int> successes;
    std::map<std::string, int> attempts;
    std::vector<std::string> flagged;  // tasks that produced zero successes
};

struct CollectOptions {
    int episodes_per_task = 40;
    int stride = 4;  // goals come from the expert episode c steps ahead
    uint64_t seed = 0;
    int jobs = 1;
};

/// Policy hook for collection: (task, anchor state, current state, goal
/// latent) -> action. The production policy wraps the trained LLP; tests may
/// substitute the scripted expert.
using CollectPolicy =
    std::function<Action(const TaskSpec&, const State&, const State&, const std::vector<double>&)>;
using StateEncoder = std::function<std::vector<double>(const std::vector<double>&)>;

/// Roll out a goal-conditioned policy on fresh resets, steering it with goal
/// latents taken from the matching expert episode every `stride` steps, and
/// label each rollout with a sampled train-split instruction.
inline TrajectoryDataset collect_onpolicy(const EnvConfig& env_cfg, const CollectPolicy& policy,
                                          const StateEncoder& encoder, const TrajectoryDataset& expert,
                                          const std::vector<TaskSpec>& tasks, const EmbeddingProvider& provider,
                                          const CollectOptions& opt, CollectReport* report = nullptr) {
    if (expert.episodes.empty()) throw std::invalid_argument("collect: expert dataset is empty");
    std::map<std::string, std::vector<const Trajectory*>> by_task;
    for (const auto& e : expert.episodes) by_task[e.task_id].push_back(&e);

    struct Job {
        const TaskSpec* task;
        const Trajectory* guide;
        uint64_t instr_seed;
    };
    std::vector<Job> jobs_list;
    for (const auto& task : tasks) {
        auto it = by_task.find(task.id);
        if (it == by_task.end() || it->second.empty())
            throw std::invalid_argument("collect: expert dataset has no episodes for task '" + task.id + "'");
        for (int k = 0; k < opt.episodes_per_task; ++k) {
            const Trajectory* guide = it->second[static_cast<size_t>(k) % it->second.size()];
            jobs_list.push_back({&task, guide, stream_seed(opt.seed, "collect.instr", jobs_list.size())});
        }
    }

    std::vector<Trajectory> results(jobs_list.size());
    parallel_for(jobs_list.size(), opt.jobs, [&](size_t ji) {
        const Job& job = jobs_list[ji];
        const auto& guide = *job.guide;
        Rng irng(job.instr_seed);
        const Instruction ins = sample_instruction(*job.task, TemplateSplit::Train, provider, irng);

        State s = reset_env(env_cfg, guide.seed);
        const State anchor = s;
        Trajectory out;
        out.task_id = job.task->id;
        out.seed = guide.seed;
        out.instruction = ins.text;
        out.split = "train";
        out.states.push_back(state_vec(s));
        std::vector<State> traj = {s};
        std::vector<double> goal;
        const int guide_last = static_cast<int>(guide.states.size()) - 1;
        for (int t = 0; t < job.task->max_steps; ++t) {
            if (t % opt.stride == 0) {
                const int gi = std::min(t + opt.stride, guide_last);
                goal = encoder(guide.states[static_cast<size_t>(gi)]);
            }
            const Action a = policy(*job.task, anchor, s, goal);
            s = step_env(env_cfg, s, a);
            out.actions.push_back({a.dx, a.dy, a.grasp});
            out.states.push_back(state_vec(s));
            traj.push_back(s);
            if (task_success(env_cfg, traj, *job.task)) break;
        }
        out.success = task_success(env_cfg, traj, *job.task);
        results[ji] = std::move(out);
    });

    TrajectoryDataset ds;
    ds.state_dim = EnvConfig::state_dim;
    ds.action_dim = EnvConfig::action_dim;
    ds.provenance = "collect_onpolicy";
    CollectReport rep;
    for (auto& r : results) {
        rep.attempts[r.task_id] += 1;
        rep.successes[r.task_id] += r.success ? 1 : 0;
        ds.episodes.push_back(std::move(r));
    }
    for (const auto& [task, n] : rep.attempts)
        if (rep.successes[task] == 0) rep.flagged.push_back(task);
    if (report) *report = rep;
    return ds;
}

/// The production collect policy: the trained LLP conditioned on the
/// supplied goal latent.
template <typename T>
CollectPolicy llp_collect_policy(const LLPConfig& cfg, Params<T>& params) {
    return [&cfg, &params](const TaskSpec&, const State&, const State& s, const std::vector<double>& goal) {
        return llp_act(cfg, params, state_vec(s), goal);
    };
}

template <typename T>
StateEncoder llp_state_encoder(const LLPConfig& cfg, Params<T>& params) {
    return [&cfg, &params](const std::vector<double>& state) { return encode_state(cfg, params, state); };
}

// ---------------------------------------------------------------------------
// latent caching and plan subsampling
// ---------------------------------------------------------------------------

struct LatentEpisode {
    std::string task_id;
    std::string instruction;
    bool success = false;
    std::vector<float> latents;  // n_states x latent_dim
    size_t n_states = 0;
};

struct LatentCache {
    int latent_dim = 0;
    std::string encoder_hash;
    std::vector<LatentEpisode> episodes;
    size_t raw_floats = 0;     // source dataset size in floats
    size_t cached_floats = 0;  // latent cache size in floats
};

/// Encode every stored state with the frozen encoder. Failed episodes are
/// dropped unless include_failures is set.
template <typename T>
LatentCache cache_latents(const TrajectoryDataset& ds, const LLPConfig& llp_cfg, Params<T>& llp_params,
                          const std::string& encoder_hash, bool include_failures = false, int jobs = 1) {
    LatentCache cache;
    cache.latent_dim = llp_cfg.latent_dim;
    cache.encoder_hash = encoder_hash;
    std::vector<const Trajectory*> selected;
    for (const auto& e : ds.episodes) {
        cache.raw_floats += e.states.size() * static_cast<size_t>(ds.state_dim);
        if (e.success || include_failures) selected.push_back(&e);
    }
    cache.episodes.resize(selected.size());
    parallel_for(selected.size(), jobs, [&](size_t i) {
        const auto& e = *selected[i];
        LatentEpisode le;
        le.task_id = e.task_id;
        le.instruction = e.instruction;
        le.success = e.success;
        le.n_states = e.states.size();
        le.latents.reserve(e.states.size() * static_cast<size_t>(llp_cfg.latent_dim));
        for (const auto& s : e.states) {
            const auto z = encode_state(llp_cfg, llp_params, s);
            for (double v : z) le.latents.push_back(static_cast<float>(v));
        }
        cache.episodes[i] = std::move(le);
    });
    for (const auto& e : cache.episodes) cache.cached_floats += e.latents.size();
    return cache;
}

struct SubsampleReport {
    size_t plans = 0;
    size_t skipped_episodes = 0;  // shorter than the window span
};

/// Latent plans and their conditioning embeddings, the diffusion model's
/// training corpus.
struct PlanDataset {
    int horizon = 0;
    int latent_dim = 0;
    int embed_width = 0;
    std::string encoder_hash;
    std::string config_hash;
    std::string pipeline_hash;
    std::vector<float> plans;   // N x horizon x latent_dim
    std::vector<float> embeds;  // N x embed_width
    std::vector<std::string> task_ids;

    size_t size() const { return task_ids.size(); }
};

/// Sliding stride-c windows over each cached latent episode:
/// plan(t0) = (z_t0, z_{t0+c}, ..., z_{t0+(H-1)c}) for every valid start.
inline PlanDataset subsample_plans(const LatentCache& cache, int c, int horizon, const EmbeddingProvider& provider,
                                   SubsampleReport* report = nullptr) {
    if (c < 1 || horizon < 2) throw std::invalid_argument("subsample_plans: require c >= 1 and horizon >= 2");
    PlanDataset ds;
    ds.horizon = horizon;
    ds.latent_dim = cache.latent_dim;
    ds.embed_width = provider.width();
    ds.encoder_hash = cache.encoder_hash;
    SubsampleReport rep;
    const int span = (horizon - 1) * c;
    for (const auto& e : cache.episodes) {
        const int n = static_cast<int>(e.n_states);
        if (n < span + 1) {
            ++rep.skipped_episodes;
            continue;
        }
        const auto emb = provider.embed(e.instruction);
        for (int t0 = 0; t0 + span < n; ++t0) {
            for (int k = 0; k < horizon; ++k) {
                const size_t zi = static_cast<size_t>(t0 + k * c) * static_cast<size_t>(cache.latent_dim);
                for (int d = 0; d < cache.latent_dim; ++d) ds.plans.push_back(e.latents[zi + static_cast<size_t>(d)]);
            }
            for (double v : emb) ds.embeds.push_back(static_cast<float>(v));
            ds.task_ids.push_back(e.task_id);
            ++rep.plans;
        }
    }
    if (report) *report = rep;
    return ds;
}

inline void save_plan_dataset(const PlanDataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json index;
    index["format"] = "lcdforge-plans-v1";
    index["plan_count"] = ds.size();
    index["horizon"] = ds.horizon;
    index["latent_dim"] = ds.latent_dim;
    index["embed_width"] = ds.embed_width;
    index["encoder_hash"] = ds.encoder_hash;
    index["config_hash"] = ds.config_hash;
    index["pipeline_hash"] = ds.pipeline_hash;
    index["task_ids"] = ds.task_ids;
    std::ofstream f(dir + "/index.json");
    if (!f) throw std::runtime_error("plan dataset: cannot write " + dir + "/index.json");
    f << index.dump(2) << "\n";
    detail::write_f32_blob(dir + "/plans.f32", ds.plans);
    detail::write_f32_blob(dir + "/embeds.f32", ds.embeds);
}

inline PlanDataset load_plan_dataset(const std::string& dir) {
    std::ifstream f(dir + "/index.json");
    if (!f) throw std::runtime_error("plan dataset: missing index " + dir + "/index.json");
    nlohmann::json index;
    f >> index;
    PlanDataset ds;
    ds.horizon = index.at("horizon").get<int>();
    ds.latent_dim = index.at("latent_dim").get<int>();
    ds.embed_width = index.at("embed_width").get<int>();
    ds.encoder_hash = index.at("encoder_hash").get<std::string>();
    ds.config_hash = index.value("config_hash", "");
    ds.pipeline_hash = index.value("pipeline_hash", "");
    ds.task_ids = index.at("task_ids").get<std::vector<std::string>>();
    const size_t n = ds.task_ids.size();
    ds.plans = detail::read_f32_blob(dir + "/plans.f32",
                                     n * static_cast<size_t>(ds.horizon) * static_cast<size_t>(ds.latent_dim));
    ds.embeds = detail::read_f32_blob(dir + "/embeds.f32", n * static_cast<size_t>(ds.embed_width));
    return ds;
}

// ---------------------------------------------------------------------------
// diffusion training
// ---------------------------------------------------------------------------

struct HlpTrainOptions {
    int steps = 20000;
    int batch = 256;
    double lr = 2e-4;
    double ema_decay = 0.995;
    double first_slot_weight = 10.0;
    int loss_p = 2;
    uint64_t seed = 0;
    std::function<void(int step, double loss)> on_step;  // logging / checkpoint cadence hook
};

template <typename T>
struct TrainedHLP {
    Params<T> params;
    Params<T> ema;
    Normalizer normalizer;
    std::vector<double> loss_curve;
    bool aborted_non_finite = false;
};

/// The end-to-end high-level policy update loop: sample minibatch, sample a
/// diffusion step and noise per element, regress the injected noise, EMA the
/// weights each step.
template <typename T>
TrainedHLP<T> train_hlp(const PlanDataset& ds, const DenoiserConfig& cfg, const VarianceSchedule& sched,
                        const HlpTrainOptions& opt) {
    if (ds.size() == 0) throw std::invalid_argument("train_hlp: empty plan dataset");
    if (cfg.horizon != ds.horizon || cfg.latent_dim != ds.latent_dim)
        throw std::invalid_argument("train_hlp: denoiser expects H=" + std::to_string(cfg.horizon) + ", D=" +
                                    std::to_string(cfg.latent_dim) + " but dataset has H=" + std::to_string(ds.horizon) +
                                    ", D=" + std::to_string(ds.latent_dim));
    if (cfg.cond_dim != ds.embed_width)
        throw std::invalid_argument("train_hlp: condition width mismatch, denoiser " + std::to_string(cfg.cond_dim) +
                                    " vs dataset " + std::to_string(ds.embed_width));

    Rng rng(stream_seed(opt.seed, "hlp.train"));
    TrainedHLP<T> out{init_denoiser_params<T>(cfg, rng), Params<T>{}, Normalizer{}, {}, false};
    out.ema = clone_params(out.params);

    // per-latent-dimension stats over every plan slot
    const size_t n = ds.size();
    const size_t hd = static_cast<size_t>(ds.horizon) * static_cast<size_t>(ds.latent_dim);
    {
        std::vector<double> corpus(ds.plans.begin(), ds.plans.end());
        out.normalizer.fit(corpus, static_cast<int64_t>(n * static_cast<size_t>(ds.horizon)), ds.latent_dim);
    }
    std::vector<T> normalized(ds.plans.size());
    for (size_t i = 0; i < normalized.size(); ++i) normalized[i] = static_cast<T>(ds.plans[i]);
    out.normalizer.normalize_rows(normalized);

    AdamState<T> adam(static_cast<T>(opt.lr));
    Params<T> last_finite = clone_params(out.params);
    DdpmLossOptions loss_opt;
    loss_opt.first_slot_weight = opt.first_slot_weight;
    loss_opt.loss_p = opt.loss_p;

    // indices are drawn with replacement, so the batch may exceed the corpus
    const int64_t B = opt.batch;
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<T> plans(static_cast<size_t>(B) * hd);
        std::vector<T> conds(static_cast<size_t>(B) * static_cast<size_t>(ds.embed_width));
        std::vector<int> ts(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) {
            const size_t pi = static_cast<size_t>(rng.uniform_int(n));
            std::copy(normalized.begin() + static_cast<std::ptrdiff_t>(pi * hd),
                      normalized.begin() + static_cast<std::ptrdiff_t>((pi + 1) * hd),
                      plans.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(b) * hd));
            for (int e = 0; e < ds.embed_width; ++e)
                conds[static_cast<size_t>(b) * static_cast<size_t>(ds.embed_width) + static_cast<size_t>(e)] =
                    static_cast<T>(ds.embeds[pi * static_cast<size_t>(ds.embed_width) + static_cast<size_t>(e)]);
            ts[static_cast<size_t>(b)] = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.steps)));
        }
        auto plans_t = Tensor<T>::from({B, cfg.horizon, cfg.latent_dim}, std::move(plans));
        auto conds_t = Tensor<T>::from({B, cfg.cond_dim}, std::move(conds));
        auto eps = Tensor<T>::randn(plans_t.shape(), rng);

        out.params.zero_grad();
        auto model = make_eps_model(cfg, out.params);
        auto loss = ddpm_loss_with(model, plans_t, conds_t, ts, eps, sched, loss_opt);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) {
            out.params = std::move(last_finite);
            out.aborted_non_finite = true;
            break;
        }
        out.loss_curve.push_back(lv);
        backward(loss);
        adam_step(out.params, adam);
        ema_update(out.params, out.ema, static_cast<T>(opt.ema_decay));
        if (step % 500 == 499) last_finite = clone_params(out.params);
        if (opt.on_step) opt.on_step(step, lv);
    }
    return out;
}

// ---------------------------------------------------------------------------
// HLP checkpoint: denoiser weights, EMA shadow, normalizer and config
// ---------------------------------------------------------------------------

template <typename T>
void save_hlp_checkpoint(const std::string& stem, const DenoiserConfig& cfg, const VarianceSchedule& sched,
                         const TrainedHLP<T>& trained, const std::map<std::string, std::string>& extra_meta = {}) {
    Checkpoint ck;
    ck.meta["kind"] = "hlp";
    ck.meta["horizon"] = std::to_string(cfg.horizon);
    ck.meta["latent_dim"] = std::to_string(cfg.latent_dim);
    ck.meta["model_dim"] = std::to_string(cfg.model_dim);
    ck.meta["groups"] = std::to_string(cfg.groups);
    ck.meta["cond_dim"] = std::to_string(cfg.cond_dim);
    ck.meta["time_dim"] = std::to_string(cfg.time_dim);
    {
        std::string mults;
        for (size_t i = 0; i < cfg.channel_mults.size(); ++i)
            mults += (i ? "," : "") + std::to_string(cfg.channel_mults[i]);
        ck.meta["channel_mults"] = mults;
    }
    ck.meta["diffusion_steps"] = std::to_string(sched.steps);
    for (const auto& [k, v] : extra_meta) ck.meta[k] = v;
    ck.add_params("net.", trained.params);
    ck.add_params("ema.", trained.ema);
    ck.add("normalizer.mean", {static_cast<int64_t>(trained.normalizer.mean.size())}, trained.normalizer.mean, "f64");
    ck.add("normalizer.std", {static_cast<int64_t>(trained.normalizer.std.size())}, trained.normalizer.std, "f64");
    ck.add("schedule.beta", {static_cast<int64_t>(sched.beta.size())}, sched.beta, "f64");
    save_checkpoint(ck, stem);
}

template <typename T>
struct LoadedHLP {
    DenoiserConfig cfg;
    VarianceSchedule sched;
    Params<T> params;
    Params<T> ema;
    Normalizer normalizer;
    std::map<std::string, std::string> meta;
};

template <typename T>
LoadedHLP<T> load_hlp_checkpoint(const std::string& stem) {
    const Checkpoint ck = load_checkpoint(stem);
    LoadedHLP<T> out;
    out.meta = ck.meta;
    out.cfg.horizon = std::stoll(ck.meta.at("horizon"));
    out.cfg.latent_dim = std::stoll(ck.meta.at("latent_dim"));
    out.cfg.model_dim = std::stoll(ck.meta.at("model_dim"));
    out.cfg.groups = std::stoll(ck.meta.at("groups"));
    out.cfg.cond_dim = std::stoll(ck.meta.at("cond_dim"));
    out.cfg.time_dim = std::stoll(ck.meta.at("time_dim"));
    out.cfg.channel_mults.clear();
    {
        std::string tok;
        for (char c : ck.meta.at("channel_mults") + ",") {
            if (c == ',') {
                if (!tok.empty()) out.cfg.channel_mults.push_back(std::stoll(tok));
                tok.clear();
            } else {
                tok += c;
            }
        }
    }
    out.cfg.validate();
    out.params = ck.extract_params<T>("net.");
    out.ema = ck.extract_params<T>("ema.");
    const auto& mean = ck.at("normalizer.mean").values;
    const auto& std_ = ck.at("normalizer.std").values;
    out.normalizer.mean = mean;
    out.normalizer.std = std_;
    out.normalizer.fitted = true;
    const auto& beta = ck.at("schedule.beta").values;
    out.sched.steps = static_cast<int>(beta.size());
    out.sched.beta = beta;
    out.sched.alpha.resize(beta.size());
    out.sched.alpha_bar.resize(beta.size());
    double running = 1.0;
    for (size_t i = 0; i < beta.size(); ++i) {
        out.sched.alpha[i] = 1.0 - beta[i];
        running *= out.sched.alpha[i];
        out.sched.alpha_bar[i] = running;
    }
    return out;
}

template <typename T>
void save_llp_checkpoint(const std::string& stem, const LLPConfig& cfg, const TrainedLLP<T>& trained,
                         const std::map<std::string, std::string>& extra_meta = {}) {
    Checkpoint ck;
    ck.meta["kind"] = "llp";
    ck.meta["state_dim"] = std::to_string(cfg.state_dim);
    ck.meta["latent_dim"] = std::to_string(cfg.latent_dim);
    ck.meta["hidden"] = std::to_string(cfg.hidden);
    ck.meta["action_dim"] = std::to_string(cfg.action_dim);
    for (const auto& [k, v] : extra_meta) ck.meta[k] = v;
    ck.add_params("llp.", trained.params);
    ck.add("val.eps_sup", {1}, {trained.eps_sup}, "f64");
    ck.add("val.eps_mean", {1}, {trained.eps_mean}, "f64");
    save_checkpoint(ck, stem);
}

template <typename T>
struct LoadedLLP {
    LLPConfig cfg;
    Params<T> params;
    double eps_sup = 0.0;
    double eps_mean = 0.0;
    std::map<std::string, std::string> meta;
    uint64_t content_hash = 0;
};

template <typename T>
LoadedLLP<T> load_llp_checkpoint(const std::string& stem) {
    const Checkpoint ck = load_checkpoint(stem);
    LoadedLLP<T> out;
    out.meta = ck.meta;
    out.cfg.state_dim = std::stoi(ck.meta.at("state_dim"));
    out.cfg.latent_dim = std::stoi(ck.meta.at("latent_dim"));
    out.cfg.hidden = std::stoi(ck.meta.at("hidden"));
    out.cfg.action_dim = std::stoi(ck.meta.at("action_dim"));
    out.params = ck.extract_params<T>("llp.");
    out.eps_sup = ck.at("val.eps_sup").values[0];
    out.eps_mean = ck.at("val.eps_mean").values[0];
    out.content_hash = checkpoint_hash(ck);
    return out;
}

}  // namespace lcd
