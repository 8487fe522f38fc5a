#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/common.hpp"
#include "lcdforge/denoiser.hpp"
#include "lcdforge/env.hpp"
#include "lcdforge/llp.hpp"
#include "lcdforge/schedule.hpp"

namespace lcd {

/// Full run configuration. Serialized as sorted key=value lines; the hash of
/// that canonical form is embedded in every artifact. The pipeline hash
/// covers only the structural fields that must agree between stages, so
/// eval-time knobs (ddim steps, chain counts) can vary without invalidating
/// upstream artifacts.
struct RunConfig {
    uint64_t seed = 0;
    bool float64 = false;
    int jobs = 2;
    std::string out_dir = "out";

    // env
    EnvConfig env;

    // language
    int embed_width = 64;
    std::string embed_table;  // optional external embedding table path
    bool embed_fallback = true;

    // llp
    int stride = 4;        // temporal stride c
    int frame_offset = 0;  // goal-index augmentation radius o
    int latent_dim = 32;
    int llp_hidden = 128;
    int llp_epochs = 25;
    int llp_batch = 128;
    double llp_lr = 2e-3;
    int episodes_per_task = 25;

    // hlp
    int diffusion_steps = 20;
    std::string schedule = "linear";
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int horizon = 8;
    int model_dim = 64;
    int groups = 8;
    int time_dim = 64;
    std::string channel_mults = "1,2";
    int hlp_steps = 20000;
    int hlp_batch = 256;
    double hlp_lr = 2e-4;
    double ema_decay = 0.995;
    double first_slot_weight = 10.0;
    int loss_p = 2;
    bool include_failures = false;

    // eval
    int ddim_steps = 10;
    double eta = 0.0;
    int timeout = 360;
    int n_chains = 25;
    int chain_len = 5;
    int eval_episodes = 20;  // single-task episodes per task

    // suboptimality
    double gamma = 0.9;
    double r_max = 1.0;
    int lipschitz_probes = 20000;

    // flat-BC baseline
    int baseline_hidden = 256;
    int baseline_epochs = 12;
    double baseline_lr = 1e-3;

    std::map<std::string, std::string> to_map() const {
        std::map<std::string, std::string> m;
        auto put = [&](const std::string& k, auto v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            m[k] = os.str();
        };
        put("seed", seed);
        put("float64", float64 ? 1 : 0);
        put("jobs", jobs);
        m["out_dir"] = out_dir;
        put("env.dt", env.dt);
        put("env.a_max", env.a_max);
        put("env.grasp_radius", env.grasp_radius);
        put("env.success_radius", env.success_radius);
        put("env.push_dist", env.push_dist);
        put("env.margin", env.margin);
        put("env.expert_speed", env.expert_speed);
        put("env.contact_full", env.contact_full);
        put("env.contact_ramp", env.contact_ramp);
        put("env.jitter", env.jitter);
        put("embed_width", embed_width);
        m["embed_table"] = embed_table;
        put("embed_fallback", embed_fallback ? 1 : 0);
        put("stride", stride);
        put("frame_offset", frame_offset);
        put("latent_dim", latent_dim);
        put("llp_hidden", llp_hidden);
        put("llp_epochs", llp_epochs);
        put("llp_batch", llp_batch);
        put("llp_lr", llp_lr);
        put("episodes_per_task", episodes_per_task);
        put("diffusion_steps", diffusion_steps);
        m["schedule"] = schedule;
        put("beta_start", beta_start);
        put("beta_end", beta_end);
        put("horizon", horizon);
        put("model_dim", model_dim);
        put("groups", groups);
        put("time_dim", time_dim);
        m["channel_mults"] = channel_mults;
        put("hlp_steps", hlp_steps);
        put("hlp_batch", hlp_batch);
        put("hlp_lr", hlp_lr);
        put("ema_decay", ema_decay);
        put("first_slot_weight", first_slot_weight);
        put("loss_p", loss_p);
        put("include_failures", include_failures ? 1 : 0);
        put("ddim_steps", ddim_steps);
        put("eta", eta);
        put("timeout", timeout);
        put("n_chains", n_chains);
        put("chain_len", chain_len);
        put("eval_episodes", eval_episodes);
        put("gamma", gamma);
        put("r_max", r_max);
        put("lipschitz_probes", lipschitz_probes);
        put("baseline_hidden", baseline_hidden);
        put("baseline_epochs", baseline_epochs);
        put("baseline_lr", baseline_lr);
        return m;
    }

    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : to_map()) out += k + "=" + v + "\n";
        return out;
    }

    std::string config_hash() const { return hex64(fnv1a64(canonical())); }

    /// Structural fields that must agree across the pipeline stages.
    std::string pipeline_hash() const {
        const auto m = to_map();
        static const char* keys[] = {"env.dt",       "env.a_max",      "env.grasp_radius", "env.success_radius",
                                     "env.push_dist", "env.margin",     "env.expert_speed", "env.contact_full",
                                     "env.contact_ramp", "env.jitter",  "embed_width",      "stride",
                                     "frame_offset", "latent_dim",     "llp_hidden",       "diffusion_steps",
                                     "schedule",     "beta_start",     "beta_end",         "horizon",
                                     "model_dim",    "groups",         "time_dim",         "channel_mults"};
        std::string cat;
        for (const char* k : keys) cat += std::string(k) + "=" + m.at(k) + "\n";
        return hex64(fnv1a64(cat));
    }

    void set(const std::string& key, const std::string& value) {
        auto as_i = [&] { return std::stoll(value); };
        auto as_d = [&] { return std::stod(value); };
        auto as_b = [&] { return value == "1" || value == "true"; };
        if (key == "seed") seed = static_cast<uint64_t>(std::stoull(value));
        else if (key == "float64") float64 = as_b();
        else if (key == "jobs") jobs = static_cast<int>(as_i());
        else if (key == "out_dir") out_dir = value;
        else if (key == "env.dt") env.dt = as_d();
        else if (key == "env.a_max") env.a_max = as_d();
        else if (key == "env.grasp_radius") env.grasp_radius = as_d();
        else if (key == "env.success_radius") env.success_radius = as_d();
        else if (key == "env.push_dist") env.push_dist = as_d();
        else if (key == "env.margin") env.margin = as_d();
        else if (key == "env.expert_speed") env.expert_speed = as_d();
        else if (key == "env.contact_full") env.contact_full = as_d();
        else if (key == "env.contact_ramp") env.contact_ramp = as_d();
        else if (key == "env.jitter") env.jitter = as_d();
        else if (key == "embed_width") embed_width = static_cast<int>(as_i());
        else if (key == "embed_table") embed_table = value;
        else if (key == "embed_fallback") embed_fallback = as_b();
        else if (key == "stride") stride = static_cast<int>(as_i());
        else if (key == "frame_offset") frame_offset = static_cast<int>(as_i());
        else if (key == "latent_dim") latent_dim = static_cast<int>(as_i());
        else if (key == "llp_hidden") llp_hidden = static_cast<int>(as_i());
        else if (key == "llp_epochs") llp_epochs = static_cast<int>(as_i());
        else if (key == "llp_batch") llp_batch = static_cast<int>(as_i());
        else if (key == "llp_lr") llp_lr = as_d();
        else if (key == "episodes_per_task") episodes_per_task = static_cast<int>(as_i());
        else if (key == "diffusion_steps") diffusion_steps = static_cast<int>(as_i());
        else if (key == "schedule") schedule = value;
        else if (key == "beta_start") beta_start = as_d();
        else if (key == "beta_end") beta_end = as_d();
        else if (key == "horizon") horizon = static_cast<int>(as_i());
        else if (key == "model_dim") model_dim = static_cast<int>(as_i());
        else if (key == "groups") groups = static_cast<int>(as_i());
        else if (key == "time_dim") time_dim = static_cast<int>(as_i());
        else if (key == "channel_mults") channel_mults = value;
        else if (key == "hlp_steps") hlp_steps = static_cast<int>(as_i());
        else if (key == "hlp_batch") hlp_batch = static_cast<int>(as_i());
        else if (key == "hlp_lr") hlp_lr = as_d();
        else if (key == "ema_decay") ema_decay = as_d();
        else if (key == "first_slot_weight") first_slot_weight = as_d();
        else if (key == "loss_p") loss_p = static_cast<int>(as_i());
        else if (key == "include_failures") include_failures = as_b();
        else if (key == "ddim_steps") ddim_steps = static_cast<int>(as_i());
        else if (key == "eta") eta = as_d();
        else if (key == "timeout") timeout = static_cast<int>(as_i());
        else if (key == "n_chains") n_chains = static_cast<int>(as_i());
        else if (key == "chain_len") chain_len = static_cast<int>(as_i());
        else if (key == "eval_episodes") eval_episodes = static_cast<int>(as_i());
        else if (key == "gamma") gamma = as_d();
        else if (key == "r_max") r_max = as_d();
        else if (key == "lipschitz_probes") lipschitz_probes = static_cast<int>(as_i());
        else if (key == "baseline_hidden") baseline_hidden = static_cast<int>(as_i());
        else if (key == "baseline_epochs") baseline_epochs = static_cast<int>(as_i());
        else if (key == "baseline_lr") baseline_lr = as_d();
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }

    void validate() const {
        auto require = [](bool ok, const std::string& msg) {
            if (!ok) throw std::invalid_argument("config: " + msg);
        };
        require(env.dt > 0 && env.a_max > 0, "env.dt and env.a_max must be positive");
        require(env.jitter >= 0 && env.margin > 0 && env.margin < 0.5, "bad env margins");
        require(embed_width >= 1, "embed_width must be positive");
        require(stride >= 1, "stride must be >= 1");
        require(frame_offset >= 0, "frame_offset must be >= 0");
        require(latent_dim >= 1 && llp_hidden >= 1, "bad llp widths");
        require(llp_epochs >= 1 && llp_batch >= 1 && llp_lr > 0, "bad llp training params");
        require(episodes_per_task >= 1, "episodes_per_task must be >= 1");
        require(diffusion_steps >= 1, "diffusion_steps must be >= 1");
        require(schedule == "linear" || schedule == "cosine", "schedule must be linear or cosine");
        require(beta_start > 0 && beta_start <= beta_end && beta_end < 1, "bad beta range");
        require(horizon >= 2, "horizon must be >= 2");
        require(model_dim >= 1 && groups >= 1 && time_dim >= 2 && time_dim % 2 == 0, "bad denoiser dims");
        require(hlp_steps >= 1 && hlp_batch >= 1 && hlp_lr > 0, "bad hlp training params");
        require(ema_decay >= 0 && ema_decay < 1, "ema_decay must be in [0,1)");
        require(first_slot_weight > 0, "first_slot_weight must be positive");
        require(loss_p == 1 || loss_p == 2, "loss_p must be 1 or 2");
        require(ddim_steps >= 1 && ddim_steps <= diffusion_steps, "ddim_steps must be in [1, diffusion_steps]");
        require(eta >= 0 && eta <= 1, "eta must be in [0,1]");
        require(timeout >= 1, "timeout must be >= 1");
        require(n_chains >= 1 && chain_len >= 1 && chain_len <= 5, "bad chain params");
        require(eval_episodes >= 1, "eval_episodes must be >= 1");
        require(gamma > 0 && gamma < 1, "gamma must be in (0,1)");
        require(r_max > 0, "r_max must be positive");
        require(lipschitz_probes >= 1, "lipschitz_probes must be >= 1");
        require(jobs >= 1, "jobs must be >= 1");
        denoiser_config().validate();
    }

    std::vector<int64_t> parsed_mults() const {
        std::vector<int64_t> out;
        std::string tok;
        for (char c : channel_mults + ",") {
            if (c == ',') {
                if (!tok.empty()) out.push_back(std::stoll(tok));
                tok.clear();
            } else {
                tok += c;
            }
        }
        if (out.empty()) throw std::invalid_argument("config: empty channel_mults");
        return out;
    }

    DenoiserConfig denoiser_config() const {
        DenoiserConfig d;
        d.horizon = horizon;
        d.latent_dim = latent_dim;
        d.model_dim = model_dim;
        d.channel_mults = parsed_mults();
        d.groups = groups;
        d.cond_dim = embed_width;
        d.time_dim = time_dim;
        return d;
    }

    LLPConfig llp_config() const {
        LLPConfig c;
        c.state_dim = EnvConfig::state_dim;
        c.latent_dim = latent_dim;
        c.hidden = llp_hidden;
        c.action_dim = EnvConfig::action_dim;
        c.a_max = env.a_max;
        return c;
    }

    VarianceSchedule make_var_schedule() const {
        return make_schedule(schedule_kind_from(schedule), diffusion_steps, beta_start, beta_end);
    }

    /// Output root; the LCD_FORGE_OUT environment variable overrides the
    /// configured default.
    std::string resolved_out_dir() const {
        const char* env_out = std::getenv("LCD_FORGE_OUT");
        if (env_out && *env_out) return std::string(env_out);
        return out_dir;
    }
};

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) + " is not key=value");
        cfg.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

inline void save_config_file(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("config: cannot write " + path);
    f << cfg.canonical();
}

}  // namespace lcd
