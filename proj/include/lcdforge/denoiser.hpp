#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/diffusion.hpp"
#include "lcdforge/tensor.hpp"

namespace lcd {

/// Temporal U-Net over the plan's time axis: 1D convolutional residual
/// blocks with group norm and Mish, stride-2 down/nearest-up resampling with
/// skip connections, sinusoidal step embedding, and single-head cross
/// attention to the language embedding at the bottleneck.
struct DenoiserConfig {
    int64_t horizon = 8;
    int64_t latent_dim = 32;
    int64_t model_dim = 64;
    std::vector<int64_t> channel_mults = {1, 2};
    int64_t groups = 8;
    int64_t cond_dim = 64;
    int64_t time_dim = 64;

    int64_t levels() const { return static_cast<int64_t>(channel_mults.size()); }
    int64_t channels(int64_t level) const { return model_dim * channel_mults[static_cast<size_t>(level)]; }

    void validate() const {
        if (horizon < 2) throw std::invalid_argument("denoiser: horizon must be >= 2");
        if (time_dim % 2 != 0) throw std::invalid_argument("denoiser: time_dim must be even");
        if (channel_mults.empty()) throw std::invalid_argument("denoiser: channel_mults empty");
        const int64_t div = int64_t(1) << (levels() - 1);
        if (horizon % div != 0)
            throw std::invalid_argument("denoiser: horizon " + std::to_string(horizon) + " not divisible by " +
                                        std::to_string(div) + " required by " + std::to_string(levels()) + " levels");
        for (int64_t l = 0; l < levels(); ++l)
            if (channels(l) % groups != 0)
                throw std::invalid_argument("denoiser: level " + std::to_string(l) + " channels " +
                                            std::to_string(channels(l)) + " not divisible by groups " +
                                            std::to_string(groups));
    }
};

/// Interleaved sin/cos features of the diffusion step over geometrically
/// spaced frequencies; entries stay in [-1, 1].
inline std::vector<double> timestep_embedding(int t, int dim) {
    if (t < 0) throw std::invalid_argument("timestep_embedding: t must be >= 0");
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even and positive");
    const int half = dim / 2;
    std::vector<double> out(static_cast<size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const double denom = half > 1 ? static_cast<double>(half - 1) : 1.0;
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / denom);
        out[static_cast<size_t>(2 * i)] = std::sin(t * freq);
        out[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    return out;
}

namespace detail {

template <typename T>
void add_conv(Params<T>& p, const std::string& name, int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng,
              double scale = 1.0) {
    const T s = static_cast<T>(scale / std::sqrt(static_cast<double>(in_ch * k)));
    p.add(name + ".w", Tensor<T>::randn({out_ch, in_ch, k}, rng, s));
    p.add(name + ".b", Tensor<T>::zeros({out_ch}));
}

template <typename T>
void add_linear(Params<T>& p, const std::string& name, int64_t in_dim, int64_t out_dim, Rng& rng) {
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in_dim)));
    p.add(name + ".w", Tensor<T>::randn({in_dim, out_dim}, rng, s));
    p.add(name + ".b", Tensor<T>::zeros({out_dim}));
}

template <typename T>
void add_groupnorm(Params<T>& p, const std::string& name, int64_t ch) {
    p.add(name + ".g", Tensor<T>::ones({ch}));
    p.add(name + ".b", Tensor<T>::zeros({ch}));
}

template <typename T>
void add_resblock(Params<T>& p, const std::string& name, int64_t in_ch, int64_t out_ch, int64_t time_dim, Rng& rng) {
    add_conv(p, name + ".c1", out_ch, in_ch, 3, rng);
    add_groupnorm(p, name + ".gn1", out_ch);
    add_linear(p, name + ".temb", time_dim, out_ch, rng);
    add_conv(p, name + ".c2", out_ch, out_ch, 3, rng);
    add_groupnorm(p, name + ".gn2", out_ch);
    if (in_ch != out_ch) add_conv(p, name + ".skip", out_ch, in_ch, 1, rng);
}

}  // namespace detail

template <typename T>
Params<T> init_denoiser_params(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    Params<T> p;
    detail::add_linear(p, "tmlp1", cfg.time_dim, cfg.time_dim * 2, rng);
    detail::add_linear(p, "tmlp2", cfg.time_dim * 2, cfg.time_dim, rng);
    detail::add_conv(p, "in", cfg.channels(0), cfg.latent_dim, 3, rng);
    for (int64_t l = 0; l + 1 < cfg.levels(); ++l) {
        detail::add_resblock(p, "down" + std::to_string(l) + ".res", cfg.channels(l), cfg.channels(l), cfg.time_dim, rng);
        detail::add_conv(p, "down" + std::to_string(l) + ".ds", cfg.channels(l + 1), cfg.channels(l), 3, rng);
    }
    const int64_t mid_ch = cfg.channels(cfg.levels() - 1);
    detail::add_resblock(p, "mid.res1", mid_ch, mid_ch, cfg.time_dim, rng);
    detail::add_groupnorm(p, "mid.attn.gn", mid_ch);
    detail::add_linear(p, "mid.attn.ctx", cfg.cond_dim, mid_ch, rng);
    p.add("mid.attn.null", Tensor<T>::randn({1, mid_ch}, rng, static_cast<T>(0.2)));
    detail::add_conv(p, "mid.attn.q", mid_ch, mid_ch, 1, rng);
    detail::add_linear(p, "mid.attn.k", mid_ch, mid_ch, rng);
    detail::add_linear(p, "mid.attn.v", mid_ch, mid_ch, rng);
    detail::add_conv(p, "mid.attn.out", mid_ch, mid_ch, 1, rng);
    detail::add_resblock(p, "mid.res2", mid_ch, mid_ch, cfg.time_dim, rng);
    for (int64_t l = cfg.levels() - 2; l >= 0; --l) {
        detail::add_conv(p, "up" + std::to_string(l) + ".us", cfg.channels(l), cfg.channels(l + 1), 3, rng);
        detail::add_resblock(p, "up" + std::to_string(l) + ".res", cfg.channels(l) * 2, cfg.channels(l), cfg.time_dim, rng);
    }
    detail::add_groupnorm(p, "out.gn", cfg.channels(0));
    // near-zero output projection: the net starts close to eps_hat = 0,
    // which stabilizes the first phase of eps-regression
    detail::add_conv(p, "out", cfg.latent_dim, cfg.channels(0), 3, rng, 0.05);
    return p;
}

namespace detail {

// block(x) = Mish(GroupNorm(Conv(x))); resblock adds the projected step
// embedding between the two blocks.
template <typename T>
Tensor<T> resblock(Params<T>& p, const std::string& name, const Tensor<T>& x, const Tensor<T>& temb, int64_t groups) {
    const int64_t L = x.dim(2);
    auto h = conv1d(x, p.at(name + ".c1.w"), p.at(name + ".c1.b"), 1, 1);
    h = mish(group_norm(h, groups, p.at(name + ".gn1.g"), p.at(name + ".gn1.b")));
    auto tproj = add(matmul(mish(temb), p.at(name + ".temb.w")), p.at(name + ".temb.b"));  // [B, C]
    auto tmap = upsample_nearest1d(reshape(tproj, {tproj.dim(0), tproj.dim(1), 1}), L);
    h = add(h, tmap);
    h = conv1d(h, p.at(name + ".c2.w"), p.at(name + ".c2.b"), 1, 1);
    h = mish(group_norm(h, groups, p.at(name + ".gn2.g"), p.at(name + ".gn2.b")));
    if (x.dim(1) != h.dim(1)) return add(h, conv1d(x, p.at(name + ".skip.w"), p.at(name + ".skip.b"), 1, 0));
    return add(h, x);
}

template <typename T>
Tensor<T> cross_attention(Params<T>& p, const Tensor<T>& x, const Tensor<T>& cond, int64_t groups) {
    const int64_t B = x.dim(0), C = x.dim(1);
    auto xg = group_norm(x, groups, p.at("mid.attn.gn.g"), p.at("mid.attn.gn.b"));
    auto q = transpose12(conv1d(xg, p.at("mid.attn.q.w"), p.at("mid.attn.q.b"), 1, 0));  // [B,L,C]
    auto lang_tok = add(matmul(cond, p.at("mid.attn.ctx.w")), p.at("mid.attn.ctx.b"));   // [B,C]
    auto tokens = concat<T>({reshape(lang_tok, {B, 1, C}), expand0(p.at("mid.attn.null"), B)}, 1);  // [B,2,C]
    auto flat = reshape(tokens, {B * 2, C});
    auto k = reshape(add(matmul(flat, p.at("mid.attn.k.w")), p.at("mid.attn.k.b")), {B, 2, C});
    auto v = reshape(add(matmul(flat, p.at("mid.attn.v.w")), p.at("mid.attn.v.b")), {B, 2, C});
    auto attn = transpose12(sdp_attention(q, k, v));  // [B,C,L]
    return add(x, conv1d(attn, p.at("mid.attn.out.w"), p.at("mid.attn.out.b"), 1, 0));
}

}  // namespace detail

/// eps_theta forward pass. plans: [B,H,D], ts: one diffusion step per batch
/// item, cond: [B,E]. Output matches the plan shape.
template <typename T>
Tensor<T> denoise_forward(const DenoiserConfig& cfg, Params<T>& p, const Tensor<T>& plans, const std::vector<int>& ts,
                          const Tensor<T>& cond) {
    if (plans.ndim() != 3 || plans.dim(1) != cfg.horizon || plans.dim(2) != cfg.latent_dim)
        throw std::invalid_argument("denoiser: expected plans [B," + std::to_string(cfg.horizon) + "," +
                                    std::to_string(cfg.latent_dim) + "], got " + shape_str(plans.shape()));
    if (cond.ndim() != 2 || cond.dim(1) != cfg.cond_dim || cond.dim(0) != plans.dim(0))
        throw std::invalid_argument("denoiser: expected cond [" + std::to_string(plans.dim(0)) + "," +
                                    std::to_string(cfg.cond_dim) + "], got " + shape_str(cond.shape()));
    const int64_t B = plans.dim(0);
    if (static_cast<int64_t>(ts.size()) != B)
        throw std::invalid_argument("denoiser: need one diffusion step per batch item");

    std::vector<T> temb_raw(static_cast<size_t>(B * cfg.time_dim));
    for (int64_t b = 0; b < B; ++b) {
        const auto e = timestep_embedding(ts[static_cast<size_t>(b)], static_cast<int>(cfg.time_dim));
        for (int64_t i = 0; i < cfg.time_dim; ++i)
            temb_raw[static_cast<size_t>(b * cfg.time_dim + i)] = static_cast<T>(e[static_cast<size_t>(i)]);
    }
    auto temb0 = Tensor<T>::from({B, cfg.time_dim}, std::move(temb_raw));
    auto temb = add(matmul(mish(add(matmul(temb0, p.at("tmlp1.w")), p.at("tmlp1.b"))), p.at("tmlp2.w")), p.at("tmlp2.b"));

    auto x = conv1d(transpose12(plans), p.at("in.w"), p.at("in.b"), 1, 1);  // [B,C0,H]
    std::vector<Tensor<T>> skips;
    for (int64_t l = 0; l + 1 < cfg.levels(); ++l) {
        x = detail::resblock(p, "down" + std::to_string(l) + ".res", x, temb, cfg.groups);
        skips.push_back(x);
        x = conv1d(x, p.at("down" + std::to_string(l) + ".ds.w"), p.at("down" + std::to_string(l) + ".ds.b"), 2, 1);
    }
    x = detail::resblock(p, "mid.res1", x, temb, cfg.groups);
    x = detail::cross_attention(p, x, cond, cfg.groups);
    x = detail::resblock(p, "mid.res2", x, temb, cfg.groups);
    for (int64_t l = cfg.levels() - 2; l >= 0; --l) {
        x = conv1d(upsample_nearest1d(x, 2), p.at("up" + std::to_string(l) + ".us.w"),
                   p.at("up" + std::to_string(l) + ".us.b"), 1, 1);
        x = concat<T>({x, skips[static_cast<size_t>(l)]}, 1);
        x = detail::resblock(p, "up" + std::to_string(l) + ".res", x, temb, cfg.groups);
    }
    x = mish(group_norm(x, cfg.groups, p.at("out.gn.g"), p.at("out.gn.b")));
    x = conv1d(x, p.at("out.w"), p.at("out.b"), 1, 1);
    return transpose12(x);  // [B,H,D]
}

template <typename T>
EpsModel<T> make_eps_model(const DenoiserConfig& cfg, Params<T>& params) {
    return [&cfg, &params](const Tensor<T>& noisy, const std::vector<int>& ts, const Tensor<T>& cond) {
        return denoise_forward(cfg, params, noisy, ts, cond);
    };
}

}  // namespace lcd
