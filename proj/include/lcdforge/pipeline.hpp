#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>

#include "lcdforge/config.hpp"
#include "lcdforge/dataset.hpp"
#include "lcdforge/eval.hpp"
#include "lcdforge/hlp.hpp"
#include "lcdforge/language.hpp"
#include "lcdforge/llp.hpp"

namespace lcd {

// Stage functions shared by the CLI and the acceptance suite. Every artifact
// embeds the producing config hash plus the structural pipeline hash;
// consumers verify the latter so stages cannot be mixed across incompatible
// configurations.

struct Paths {
    std::string root;
    explicit Paths(const RunConfig& cfg) : root(cfg.resolved_out_dir()) {}
    std::string expert_dir() const { return root + "/expert"; }
    std::string onpolicy_dir() const { return root + "/onpolicy"; }
    std::string plans_dir() const { return root + "/plans"; }
    std::string llp_stem() const { return root + "/llp"; }
    std::string hlp_stem() const { return root + "/hlp"; }
    std::string eval_dir() const { return root + "/eval"; }
    std::string report_md() const { return root + "/report.md"; }
};

inline EmbeddingProvider make_provider(const RunConfig& cfg) {
    EmbeddingProvider prov(cfg.embed_width, cfg.embed_fallback);
    if (!cfg.embed_table.empty()) prov.load_external(cfg.embed_table);
    return prov;
}

inline void check_pipeline_hash(const RunConfig& cfg, const std::string& artifact, const std::string& found) {
    if (found != cfg.pipeline_hash())
        throw std::runtime_error("pipeline hash mismatch: artifact '" + artifact + "' was produced with " + found +
                                 " but the current config is " + cfg.pipeline_hash());
}

// ---------------------------------------------------------------------------

inline void run_gen_expert(const RunConfig& cfg) {
    cfg.validate();
    const Paths paths(cfg);
    const auto provider = make_provider(cfg);
    auto ds = generate_expert_dataset(cfg.env, train_tasks(), cfg.episodes_per_task, provider,
                                      stream_seed(cfg.seed, "expert"), cfg.jobs);
    ds.config_hash = cfg.config_hash();
    ds.pipeline_hash = cfg.pipeline_hash();
    save_dataset(ds, paths.expert_dir());
    int succ = 0;
    for (const auto& e : ds.episodes) succ += e.success ? 1 : 0;
    std::cout << "gen-expert: " << ds.episodes.size() << " episodes, " << succ << " successful -> "
              << paths.expert_dir() << "\n";
}

template <typename T>
void run_train_llp_impl(const RunConfig& cfg) {
    const Paths paths(cfg);
    auto expert = load_dataset(paths.expert_dir());
    check_pipeline_hash(cfg, paths.expert_dir(), expert.pipeline_hash);
    Rng rng(stream_seed(cfg.seed, "relabel"));
    auto pairs = build_relabeled(expert, cfg.stride, cfg.frame_offset, rng);
    LLPTrainOptions opt;
    opt.epochs = cfg.llp_epochs;
    opt.batch = cfg.llp_batch;
    opt.lr = cfg.llp_lr;
    opt.seed = cfg.seed;
    auto trained = train_llp<T>(cfg.llp_config(), pairs, opt);
    if (trained.aborted_non_finite)
        std::cout << "train-llp: WARNING loss went non-finite, kept last finite checkpoint\n";
    save_llp_checkpoint(paths.llp_stem(), cfg.llp_config(), trained,
                        {{"config_hash", cfg.config_hash()}, {"pipeline_hash", cfg.pipeline_hash()}});
    std::cout << "train-llp: " << pairs.size() << " pairs, val eps_mean " << trained.eps_mean << ", eps_sup "
              << trained.eps_sup << " -> " << paths.llp_stem() << ".manifest\n";
}

inline void run_train_llp(const RunConfig& cfg) {
    cfg.validate();
    cfg.float64 ? run_train_llp_impl<double>(cfg) : run_train_llp_impl<float>(cfg);
}

template <typename T>
void run_collect_impl(const RunConfig& cfg) {
    const Paths paths(cfg);
    auto expert = load_dataset(paths.expert_dir());
    check_pipeline_hash(cfg, paths.expert_dir(), expert.pipeline_hash);
    auto llp = load_llp_checkpoint<T>(paths.llp_stem());
    check_pipeline_hash(cfg, paths.llp_stem(), llp.meta.at("pipeline_hash"));
    const auto provider = make_provider(cfg);
    CollectOptions opt;
    opt.episodes_per_task = cfg.episodes_per_task;
    opt.stride = cfg.stride;
    opt.seed = stream_seed(cfg.seed, "collect");
    opt.jobs = cfg.jobs;
    CollectReport report;
    const LLPConfig llp_cfg = cfg.llp_config();
    auto ds = collect_onpolicy(cfg.env, llp_collect_policy(llp_cfg, llp.params), llp_state_encoder(llp_cfg, llp.params),
                               expert, train_tasks(), provider, opt, &report);
    ds.config_hash = cfg.config_hash();
    ds.pipeline_hash = cfg.pipeline_hash();
    ds.provenance = "collect_onpolicy llp=" + hex64(llp.content_hash) + " seed=" + std::to_string(opt.seed);
    save_dataset(ds, paths.onpolicy_dir());
    int succ = 0;
    for (const auto& e : ds.episodes) succ += e.success ? 1 : 0;
    std::cout << "collect: " << ds.episodes.size() << " episodes, " << succ << " successful -> "
              << paths.onpolicy_dir() << "\n";
    for (const auto& task : report.flagged) std::cout << "collect: WARNING task '" << task << "' had zero successes\n";
}

inline void run_collect(const RunConfig& cfg) {
    cfg.validate();
    cfg.float64 ? run_collect_impl<double>(cfg) : run_collect_impl<float>(cfg);
}

template <typename T>
void run_cache_impl(const RunConfig& cfg) {
    const Paths paths(cfg);
    auto onpolicy = load_dataset(paths.onpolicy_dir());
    check_pipeline_hash(cfg, paths.onpolicy_dir(), onpolicy.pipeline_hash);
    auto llp = load_llp_checkpoint<T>(paths.llp_stem());
    check_pipeline_hash(cfg, paths.llp_stem(), llp.meta.at("pipeline_hash"));
    const auto provider = make_provider(cfg);
    const LLPConfig llp_cfg = cfg.llp_config();
    auto cache =
        cache_latents(onpolicy, llp_cfg, llp.params, hex64(llp.content_hash), cfg.include_failures, cfg.jobs);
    SubsampleReport report;
    auto plans = subsample_plans(cache, cfg.stride, cfg.horizon, provider, &report);
    plans.config_hash = cfg.config_hash();
    plans.pipeline_hash = cfg.pipeline_hash();
    save_plan_dataset(plans, paths.plans_dir());
    std::cout << "cache: " << cache.episodes.size() << " episodes, " << cache.cached_floats << " latent floats vs "
              << cache.raw_floats << " raw (ratio " << static_cast<double>(cache.raw_floats) /
                  static_cast<double>(std::max<size_t>(cache.cached_floats, 1)) << ")\n";
    std::cout << "cache: " << plans.size() << " plans (skipped " << report.skipped_episodes
              << " short episodes) -> " << paths.plans_dir() << "\n";
}

inline void run_cache(const RunConfig& cfg) {
    cfg.validate();
    cfg.float64 ? run_cache_impl<double>(cfg) : run_cache_impl<float>(cfg);
}

template <typename T>
void run_train_hlp_impl(const RunConfig& cfg) {
    const Paths paths(cfg);
    auto plans = load_plan_dataset(paths.plans_dir());
    check_pipeline_hash(cfg, paths.plans_dir(), plans.pipeline_hash);
    const auto sched = cfg.make_var_schedule();
    HlpTrainOptions opt;
    opt.steps = cfg.hlp_steps;
    opt.batch = cfg.hlp_batch;
    opt.lr = cfg.hlp_lr;
    opt.ema_decay = cfg.ema_decay;
    opt.first_slot_weight = cfg.first_slot_weight;
    opt.loss_p = cfg.loss_p;
    opt.seed = cfg.seed;
    std::ofstream loss_log(paths.root + "/hlp_loss.csv");
    loss_log << "step,loss\n";
    opt.on_step = [&](int step, double loss) {
        if (step % 50 == 0) loss_log << step << "," << loss << "\n";
        if (step % 500 == 499) std::cout << "train-hlp: step " << step + 1 << " loss " << loss << "\n" << std::flush;
    };
    auto trained = train_hlp<T>(plans, cfg.denoiser_config(), sched, opt);
    if (trained.aborted_non_finite)
        std::cout << "train-hlp: WARNING loss went non-finite, kept last finite checkpoint\n";
    save_hlp_checkpoint(paths.hlp_stem(), cfg.denoiser_config(), sched, trained,
                        {{"config_hash", cfg.config_hash()},
                         {"pipeline_hash", cfg.pipeline_hash()},
                         {"encoder_hash", plans.encoder_hash}});
    double tail = 0;
    const size_t n_tail = std::min<size_t>(100, trained.loss_curve.size());
    for (size_t i = trained.loss_curve.size() - n_tail; i < trained.loss_curve.size(); ++i)
        tail += trained.loss_curve[i];
    std::cout << "train-hlp: " << plans.size() << " plans, final loss (tail mean) " << tail / static_cast<double>(n_tail)
              << " -> " << paths.hlp_stem() << ".manifest\n";
}

inline void run_train_hlp(const RunConfig& cfg) {
    cfg.validate();
    cfg.float64 ? run_train_hlp_impl<double>(cfg) : run_train_hlp_impl<float>(cfg);
}

// ---------------------------------------------------------------------------

template <typename T>
struct LoadedPipeline {
    LoadedLLP<T> llp;
    LoadedHLP<T> hlp;
    LLPConfig llp_cfg;
};

template <typename T>
LoadedPipeline<T> load_pipeline(const RunConfig& cfg) {
    const Paths paths(cfg);
    LoadedPipeline<T> out{load_llp_checkpoint<T>(paths.llp_stem()), load_hlp_checkpoint<T>(paths.hlp_stem()),
                          cfg.llp_config()};
    check_pipeline_hash(cfg, paths.llp_stem(), out.llp.meta.at("pipeline_hash"));
    check_pipeline_hash(cfg, paths.hlp_stem(), out.hlp.meta.at("pipeline_hash"));
    return out;
}

struct SingleTaskRates {
    double seen_train_templates = 0.0;
    double seen_heldout_templates = 0.0;
    double heldout_tasks = 0.0;
    double random_heldout_tasks = 0.0;
};

template <typename T>
PolicyFactory hierarchical_factory(const RunConfig& cfg, LoadedPipeline<T>& pipe) {
    RolloutOptions ropt;
    ropt.stride = cfg.stride;
    ropt.timeout = cfg.timeout;
    ropt.ddim_steps = cfg.ddim_steps;
    ropt.eta = cfg.eta;
    return [&pipe, ropt] {
        return std::make_unique<HierarchicalPolicy<T>>(pipe.hlp.cfg, pipe.hlp.ema, pipe.hlp.sched, pipe.hlp.normalizer,
                                                       pipe.llp_cfg, pipe.llp.params, ropt);
    };
}

/// Single-task success rate over `episodes` fresh rollouts per task.
inline double single_task_rate(const EnvConfig& env_cfg, const PolicyFactory& factory,
                               const std::vector<TaskSpec>& tasks, TemplateSplit split,
                               const EmbeddingProvider& provider, int episodes, int timeout, uint64_t seed,
                               int jobs) {
    std::vector<int> results(tasks.size() * static_cast<size_t>(episodes), 0);
    parallel_for(results.size(), jobs, [&](size_t i) {
        const TaskSpec& task = tasks[i / static_cast<size_t>(episodes)];
        Rng irng(stream_seed(seed, "single.instr", i));
        const Instruction ins = sample_instruction(task, split, provider, irng);
        auto policy = factory();
        Rng rng(stream_seed(seed, "single.rollout", i));
        const State start = reset_env(env_cfg, stream_seed(seed, "single.reset", i));
        results[i] = run_task_episode(env_cfg, *policy, task, ins, start, timeout, rng).success ? 1 : 0;
    });
    int succ = 0;
    for (int r : results) succ += r;
    return static_cast<double>(succ) / static_cast<double>(results.size());
}

template <typename T>
void run_eval_impl(const RunConfig& cfg) {
    const Paths paths(cfg);
    std::filesystem::create_directories(paths.eval_dir());
    auto pipe = load_pipeline<T>(cfg);
    const auto provider = make_provider(cfg);
    auto lcd_factory = hierarchical_factory(cfg, pipe);

    // MT-LHC chains over the seen tasks with train-split instructions
    auto chains = make_chains(train_tasks(), cfg.n_chains, cfg.chain_len, TemplateSplit::Train, provider,
                              stream_seed(cfg.seed, "chains"));
    auto res = eval_mtlhc(cfg.env, lcd_factory, chains, cfg.timeout, stream_seed(cfg.seed, "eval"), cfg.jobs);
    write_results_json(res, paths.eval_dir() + "/results.json", "hierarchical-diffusion", cfg.seed, cfg.config_hash());
    write_results_csv(res, paths.eval_dir() + "/results.csv");
    std::cout << "eval: horizon rates";
    for (double r : res.success_rates) std::cout << " " << r;
    std::cout << " | avg_horizon_len " << res.avg_horizon_len << "\n";

    // single-task rates backing the language/task generalization claims
    SingleTaskRates rates;
    rates.seen_train_templates = single_task_rate(cfg.env, lcd_factory, train_tasks(), TemplateSplit::Train, provider,
                                                  cfg.eval_episodes, cfg.timeout, stream_seed(cfg.seed, "st.train"),
                                                  cfg.jobs);
    rates.seen_heldout_templates =
        single_task_rate(cfg.env, lcd_factory, train_tasks(), TemplateSplit::HeldOut, provider, cfg.eval_episodes,
                         cfg.timeout, stream_seed(cfg.seed, "st.heldtpl"), cfg.jobs);
    rates.heldout_tasks = single_task_rate(cfg.env, lcd_factory, heldout_tasks(), TemplateSplit::Train, provider,
                                           cfg.eval_episodes, cfg.timeout, stream_seed(cfg.seed, "st.heldtask"),
                                           cfg.jobs);
    PolicyFactory random_factory = [&cfg] { return std::make_unique<RandomPolicy>(cfg.env.a_max); };
    rates.random_heldout_tasks = single_task_rate(cfg.env, random_factory, heldout_tasks(), TemplateSplit::Train,
                                                  provider, cfg.eval_episodes, cfg.timeout,
                                                  stream_seed(cfg.seed, "st.random"), cfg.jobs);
    nlohmann::json js;
    js["config_hash"] = cfg.config_hash();
    js["seed"] = cfg.seed;
    js["episodes_per_task"] = cfg.eval_episodes;
    js["seen_tasks_train_templates"] = rates.seen_train_templates;
    js["seen_tasks_heldout_templates"] = rates.seen_heldout_templates;
    js["heldout_tasks"] = rates.heldout_tasks;
    js["random_policy_heldout_tasks"] = rates.random_heldout_tasks;
    {
        std::ofstream f(paths.eval_dir() + "/singles.json");
        f << js.dump(2) << "\n";
    }
    std::cout << "eval: singles train " << rates.seen_train_templates << " heldout-templates "
              << rates.seen_heldout_templates << " heldout-tasks " << rates.heldout_tasks << " random "
              << rates.random_heldout_tasks << "\n";

    // flat behavior-cloning baseline, trained on the expert corpus and
    // evaluated on the same chains
    auto expert = load_dataset(paths.expert_dir());
    check_pipeline_hash(cfg, paths.expert_dir(), expert.pipeline_hash);
    FlatBCConfig bc_cfg;
    bc_cfg.embed_width = cfg.embed_width;
    bc_cfg.hidden = cfg.baseline_hidden;
    bc_cfg.a_max = cfg.env.a_max;
    FlatBCTrainOptions bopt;
    bopt.epochs = cfg.baseline_epochs;
    bopt.lr = cfg.baseline_lr;
    bopt.seed = cfg.seed;
    auto bc_params = train_flat_bc<T>(bc_cfg, expert, provider, bopt);
    PolicyFactory bc_factory = [&bc_cfg, &bc_params] { return std::make_unique<FlatBCPolicy<T>>(bc_cfg, bc_params); };
    auto bc_res = eval_mtlhc(cfg.env, bc_factory, chains, cfg.timeout, stream_seed(cfg.seed, "eval.bc"), cfg.jobs);
    write_results_json(bc_res, paths.eval_dir() + "/baseline_results.json", "flat-bc", cfg.seed, cfg.config_hash());
    write_results_csv(bc_res, paths.eval_dir() + "/baseline_results.csv");
    std::cout << "eval: baseline avg_horizon_len " << bc_res.avg_horizon_len << " (hierarchical "
              << res.avg_horizon_len << ")\n";
    if (res.avg_horizon_len < bc_res.avg_horizon_len)
        std::cout << "eval: WARNING flat BC outperformed the hierarchical policy on these seeds\n";
}

inline void run_eval(const RunConfig& cfg) {
    cfg.validate();
    cfg.float64 ? run_eval_impl<double>(cfg) : run_eval_impl<float>(cfg);
}

template <typename T>
void run_check_subopt_impl(const RunConfig& cfg) {
    const Paths paths(cfg);
    std::filesystem::create_directories(paths.eval_dir());
    auto pipe = load_pipeline<T>(cfg);
    const auto provider = make_provider(cfg);
    auto factory = hierarchical_factory(cfg, pipe);
    auto rep = check_suboptimality(cfg.env, pipe.llp.eps_sup, factory, train_tasks(), provider, cfg.gamma, cfg.r_max,
                                   cfg.eval_episodes, cfg.seed, cfg.lipschitz_probes, cfg.jobs);
    write_subopt_json(rep, paths.eval_dir() + "/subopt.json", cfg.config_hash());
    std::cout << "check-subopt: eps_hat " << rep.eps_hat << " K_hat " << rep.k_hat << " (K_design " << rep.k_design
              << ") bound " << rep.bound << " realized gap " << rep.realized_gap
              << (rep.holds ? " [holds]" : " [VIOLATED]") << "\n";
    if (!rep.holds) throw std::runtime_error("check-subopt: realized gap exceeds the bound");
}

inline void run_check_subopt(const RunConfig& cfg) {
    cfg.validate();
    cfg.float64 ? run_check_subopt_impl<double>(cfg) : run_check_subopt_impl<float>(cfg);
}

/// Autodiff soundness gate: per-op checks and the assembled denoiser loss
/// against central differences, 64-bit.
struct GradcheckSummary {
    double max_op_error = 0.0;
    double max_net_error = 0.0;
    bool pass = false;
};

inline GradcheckSummary run_gradcheck(const RunConfig& cfg) {
    cfg.validate();
    GradcheckSummary summary;
    Rng rng(stream_seed(cfg.seed, "gradcheck"));
    using Fn = std::function<Tensor<double>(const Tensor<double>&)>;
    auto other = Tensor<double>::randn({2, 3, 4}, rng);
    auto other6 = Tensor<double>::randn({2, 6, 4}, rng);
    auto w = Tensor<double>::randn({5, 3, 3}, rng, 0.5);
    auto wbias = Tensor<double>::randn({5}, rng, 0.5);
    auto gamma = Tensor<double>::randn({6}, rng, 0.3);
    auto beta = Tensor<double>::randn({6}, rng, 0.3);
    for (auto& g : gamma.data()) g += 1.0;
    auto mat = Tensor<double>::randn({4, 3}, rng);
    auto bmat = Tensor<double>::randn({2, 4, 3}, rng);

    const std::vector<std::pair<const char*, std::pair<Fn, Shape>>> cases = {
        {"add", {[&](const Tensor<double>& t) { return sum_all(add(t, other)); }, {2, 3, 4}}},
        {"add_broadcast", {[&](const Tensor<double>& t) { return sum_all(add(other, t)); }, {3, 4}}},
        {"sub", {[&](const Tensor<double>& t) { return sum_all(sub(t, other)); }, {2, 3, 4}}},
        {"mul", {[&](const Tensor<double>& t) { return sum_all(mul(t, other)); }, {2, 3, 4}}},
        {"scale", {[&](const Tensor<double>& t) { return sum_all(scale(t, 2.5)); }, {2, 3}}},
        {"silu", {[&](const Tensor<double>& t) { return sum_all(silu(t)); }, {2, 5}}},
        {"mish", {[&](const Tensor<double>& t) { return sum_all(mish(t)); }, {2, 5}}},
        {"tanh", {[&](const Tensor<double>& t) { return sum_all(tanh_act(t)); }, {7}}},
        {"sin", {[&](const Tensor<double>& t) { return sum_all(sin_act(t)); }, {7}}},
        {"abs", {[&](const Tensor<double>& t) { return sum_all(mul(abs_act(t), abs_act(t))); }, {7}}},
        {"matmul", {[&](const Tensor<double>& t) { return sum_all(mul(matmul(t, mat), matmul(t, mat))); }, {2, 4}}},
        {"bmm", {[&](const Tensor<double>& t) { return sum_all(mul(bmm(t, bmat), bmm(t, bmat))); }, {2, 2, 4}}},
        {"conv1d",
         {[&](const Tensor<double>& t) { return sum_all(mul(conv1d(t, w, wbias, 1, 1), conv1d(t, w, wbias, 1, 1))); },
          {2, 3, 4}}},
        {"conv1d_stride",
         {[&](const Tensor<double>& t) { return sum_all(mul(conv1d(t, w, 2, 1), conv1d(t, w, 2, 1))); }, {2, 3, 4}}},
        {"upsample",
         {[&](const Tensor<double>& t) {
              return sum_all(mul(upsample_nearest1d(t, 2), upsample_nearest1d(t, 2)));
          },
          {2, 3, 4}}},
        {"group_norm",
         {[&](const Tensor<double>& t) {
              auto y = group_norm(t, 2, gamma, beta, 1e-5);
              return sum_all(mul(y, y));
          },
          {2, 6, 4}}},
        {"group_norm_gamma",
         {[&](const Tensor<double>& t) {
              auto y = group_norm(other6, 2, t, beta, 1e-5);
              return sum_all(mul(y, y));
          },
          {6}}},
        {"softmax",
         {[&](const Tensor<double>& t) { return sum_all(mul(softmax(t, 1), other)); }, {2, 3, 4}}},
        {"concat",
         {[&](const Tensor<double>& t) {
              auto y = concat<double>({t, other}, 1);
              return sum_all(mul(y, y));
          },
          {2, 3, 4}}},
        {"reshape",
         {[&](const Tensor<double>& t) { return sum_all(mul(reshape(t, {6, 4}), reshape(t, {6, 4}))); }, {2, 3, 4}}},
        {"transpose12",
         {[&](const Tensor<double>& t) { return sum_all(mul(transpose12(t), transpose12(t))); }, {2, 3, 4}}},
        {"expand0", {[&](const Tensor<double>& t) { return sum_all(mul(expand0(t, 3), expand0(t, 3))); }, {2, 4}}},
        {"mean", {[&](const Tensor<double>& t) { return mean_all(mul(t, t)); }, {3, 4}}},
        {"sdp_attention",
         {[&](const Tensor<double>& t) {
              auto y = sdp_attention(t, bmat, bmat);
              return sum_all(mul(y, y));
          },
          {2, 5, 3}}},
    };
    for (const auto& [name, c] : cases) {
        auto x = Tensor<double>::randn(c.second, rng, 0.8);
        const double err = grad_check<double>(c.first, x, 1e-5);
        summary.max_op_error = std::max(summary.max_op_error, err);
        std::cout << "gradcheck: op " << name << " max rel err " << err << "\n";
    }

    // assembled temporal U-Net loss at a small configuration
    DenoiserConfig dcfg;
    dcfg.horizon = 4;
    dcfg.latent_dim = 3;
    dcfg.model_dim = 8;
    dcfg.groups = 4;
    dcfg.cond_dim = 6;
    dcfg.time_dim = 8;
    auto params = init_denoiser_params<double>(dcfg, rng);
    auto sched = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    auto plans = Tensor<double>::randn({2, dcfg.horizon, dcfg.latent_dim}, rng);
    auto cond = Tensor<double>::randn({2, dcfg.cond_dim}, rng);
    auto eps = Tensor<double>::randn(plans.shape(), rng);
    const std::vector<int> ts = {4, 17};
    auto loss_fn = [&]() {
        auto model = make_eps_model(dcfg, params);
        return ddpm_loss_with(model, plans, cond, ts, eps, sched);
    };
    params.zero_grad();
    backward(loss_fn());
    Rng pick(stream_seed(cfg.seed, "gradcheck.pick"));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& t = params.tensors[pi];
        const int n_probe = std::max<int>(1, static_cast<int>(t.numel() / 100));
        for (int k = 0; k < n_probe; ++k) {
            const size_t ci = static_cast<size_t>(pick.uniform_int(static_cast<uint64_t>(t.numel())));
            const double orig = t.data()[ci], h = 1e-5;
            t.data()[ci] = orig + h;
            const double fp = loss_fn().item();
            t.data()[ci] = orig - h;
            const double fm = loss_fn().item();
            t.data()[ci] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double rel = std::abs(t.grad()[ci] - numeric) / std::max(1.0, std::abs(numeric));
            summary.max_net_error = std::max(summary.max_net_error, rel);
        }
    }
    std::cout << "gradcheck: assembled denoiser loss max rel err " << summary.max_net_error << "\n";
    summary.pass = summary.max_op_error < 1e-4 && summary.max_net_error < 1e-3;
    std::cout << "gradcheck: " << (summary.pass ? "PASS" : "FAIL") << " (ops " << summary.max_op_error << " < 1e-4, net "
              << summary.max_net_error << " < 1e-3)\n";
    return summary;
}

inline void run_report(const RunConfig& cfg) {
    cfg.validate();
    const Paths paths(cfg);
    auto read_json = [](const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("report: missing " + path);
        nlohmann::json j;
        f >> j;
        return j;
    };
    const auto res = read_json(paths.eval_dir() + "/results.json");
    std::ostringstream md;
    md << "# Evaluation summary\n\n";
    md << "Config hash: `" << res.at("config_hash").get<std::string>() << "`\n\n";
    md << "| Horizon |";
    const auto rates = res.at("horizon_success_rates").get<std::vector<double>>();
    nlohmann::json bc;
    bool have_bc = std::ifstream(paths.eval_dir() + "/baseline_results.json").good();
    if (have_bc) bc = read_json(paths.eval_dir() + "/baseline_results.json");
    md << " Hierarchical diffusion |";
    if (have_bc) md << " Flat BC |";
    md << "\n|---|---|";
    if (have_bc) md << "---|";
    md << "\n";
    static const char* names[] = {"One", "Two", "Three", "Four", "Five"};
    for (size_t k = 0; k < rates.size(); ++k) {
        md << "| " << (k < 5 ? names[k] : std::to_string(k + 1).c_str()) << " | " << rates[k] << " |";
        if (have_bc) md << " " << bc.at("horizon_success_rates").get<std::vector<double>>()[k] << " |";
        md << "\n";
    }
    md << "| Avg horizon len | " << res.at("avg_horizon_len").get<double>() << " |";
    if (have_bc) md << " " << bc.at("avg_horizon_len").get<double>() << " |";
    md << "\n";
    if (std::ifstream(paths.eval_dir() + "/singles.json").good()) {
        const auto singles = read_json(paths.eval_dir() + "/singles.json");
        md << "\n## Single-task success\n\n";
        md << "| Setting | Success |\n|---|---|\n";
        md << "| Seen tasks, train templates | " << singles.at("seen_tasks_train_templates").get<double>() << " |\n";
        md << "| Seen tasks, held-out templates | " << singles.at("seen_tasks_heldout_templates").get<double>()
           << " |\n";
        md << "| Held-out tasks | " << singles.at("heldout_tasks").get<double>() << " |\n";
        md << "| Random policy, held-out tasks | " << singles.at("random_policy_heldout_tasks").get<double>()
           << " |\n";
    }
    if (std::ifstream(paths.eval_dir() + "/subopt.json").good()) {
        const auto so = read_json(paths.eval_dir() + "/subopt.json");
        md << "\n## Suboptimality bound\n\n";
        md << "| eps_hat | K_hat | bound | realized gap | holds |\n|---|---|---|---|---|\n";
        md << "| " << so.at("eps_hat").get<double>() << " | " << so.at("k_hat").get<double>() << " | "
           << so.at("bound").get<double>() << " | " << so.at("realized_gap").get<double>() << " | "
           << (so.at("holds").get<bool>() ? "yes" : "NO") << " |\n";
    }
    std::ofstream f(paths.report_md());
    if (!f) throw std::runtime_error("report: cannot write " + paths.report_md());
    f << md.str();
    std::cout << "report -> " << paths.report_md() << "\n";
}

}  // namespace lcd
