#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcdforge/common.hpp"
#include "lcdforge/schedule.hpp"
#include "lcdforge/tensor.hpp"

namespace lcd {

/// Per-dimension gaussian normalization stats fitted over the latent corpus.
/// Dimensions whose std collapses below 1e-6 are clamped and flagged.
struct Normalizer {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<int> clamped_dims;
    bool fitted = false;

    // rows x dim, row-major
    void fit(const std::vector<double>& data, int64_t rows, int64_t dim) {
        if (rows < 1 || dim < 1 || data.size() != static_cast<size_t>(rows * dim))
            throw std::invalid_argument("normalizer: bad corpus of " + std::to_string(rows) + "x" + std::to_string(dim));
        mean.assign(static_cast<size_t>(dim), 0.0);
        std.assign(static_cast<size_t>(dim), 0.0);
        clamped_dims.clear();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t d = 0; d < dim; ++d) mean[static_cast<size_t>(d)] += data[static_cast<size_t>(r * dim + d)];
        for (auto& m : mean) m /= static_cast<double>(rows);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t d = 0; d < dim; ++d) {
                const double dv = data[static_cast<size_t>(r * dim + d)] - mean[static_cast<size_t>(d)];
                std[static_cast<size_t>(d)] += dv * dv;
            }
        for (int64_t d = 0; d < dim; ++d) {
            std[static_cast<size_t>(d)] = std::sqrt(std[static_cast<size_t>(d)] / static_cast<double>(rows));
            if (std[static_cast<size_t>(d)] < 1e-6) {
                std[static_cast<size_t>(d)] = 1e-6;
                clamped_dims.push_back(static_cast<int>(d));
            }
        }
        fitted = true;
    }

    size_t dim() const { return mean.size(); }

    void require_fitted() const {
        if (!fitted) throw std::runtime_error("normalizer: stats not fitted");
    }

    template <typename T>
    void normalize_rows(std::vector<T>& values) const {
        require_fitted();
        const size_t d = dim();
        if (values.size() % d != 0) throw std::invalid_argument("normalizer: value count not a multiple of dim");
        for (size_t i = 0; i < values.size(); ++i)
            values[i] = static_cast<T>((static_cast<double>(values[i]) - mean[i % d]) / std[i % d]);
    }

    template <typename T>
    void denormalize_rows(std::vector<T>& values) const {
        require_fitted();
        const size_t d = dim();
        if (values.size() % d != 0) throw std::invalid_argument("normalizer: value count not a multiple of dim");
        for (size_t i = 0; i < values.size(); ++i)
            values[i] = static_cast<T>(static_cast<double>(values[i]) * std[i % d] + mean[i % d]);
    }
};

template <typename T>
Tensor<T> normalize(const Tensor<T>& plan, const Normalizer& n) {
    std::vector<T> v = plan.data();
    n.normalize_rows(v);
    return Tensor<T>::from(plan.shape(), std::move(v));
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& plan, const Normalizer& n) {
    std::vector<T> v = plan.data();
    n.denormalize_rows(v);
    return Tensor<T>::from(plan.shape(), std::move(v));
}

/// Denoiser interface: (noisy plans [B,H,D], per-sample step, conditioning
/// [B,E]) -> predicted noise [B,H,D].
template <typename T>
using EpsModel = std::function<Tensor<T>(const Tensor<T>&, const std::vector<int>&, const Tensor<T>&)>;

/// Closed-form forward noising: plan_t = sqrt(ab_t) plan0 + sqrt(1-ab_t) noise.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& plan0, int t, const Tensor<T>& noise, const VarianceSchedule& sched) {
    sched.check_t(t);
    if (noise.shape() != plan0.shape())
        throw std::invalid_argument("q_sample: noise shape " + shape_str(noise.shape()) + " does not match plan " +
                                    shape_str(plan0.shape()));
    const double ab = sched.alpha_bar_at(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    std::vector<T> out(plan0.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * plan0.data()[i] + b * noise.data()[i];
    return Tensor<T>::from(plan0.shape(), std::move(out));
}

struct DdpmLossOptions {
    double first_slot_weight = 1.0;  // extra weight on the first plan slot
    int loss_p = 2;                  // 2 for squared error, 1 for absolute
};

/// Batched eps-regression loss for fixed diffusion steps and noise draws.
/// plans0: [B,H,D] (already normalized), cond: [B,E].
template <typename T>
Tensor<T> ddpm_loss_with(const EpsModel<T>& model, const Tensor<T>& plans0, const Tensor<T>& cond,
                         const std::vector<int>& ts, const Tensor<T>& eps, const VarianceSchedule& sched,
                         const DdpmLossOptions& opt = {}) {
    if (plans0.ndim() != 3)
        throw std::invalid_argument("ddpm_loss: plans must be [B,H,D], got " + shape_str(plans0.shape()));
    const int64_t B = plans0.dim(0), H = plans0.dim(1), D = plans0.dim(2);
    if (static_cast<int64_t>(ts.size()) != B) throw std::invalid_argument("ddpm_loss: one step per batch item required");
    if (eps.shape() != plans0.shape()) throw std::invalid_argument("ddpm_loss: noise shape mismatch");

    std::vector<T> noisy(plans0.data().size());
    for (int64_t b = 0; b < B; ++b) {
        sched.check_t(ts[static_cast<size_t>(b)]);
        const double ab = sched.alpha_bar_at(ts[static_cast<size_t>(b)]);
        const T sa = static_cast<T>(std::sqrt(ab));
        const T sb = static_cast<T>(std::sqrt(1.0 - ab));
        for (int64_t i = 0; i < H * D; ++i) {
            const size_t idx = static_cast<size_t>(b * H * D + i);
            noisy[idx] = sa * plans0.data()[idx] + sb * eps.data()[idx];
        }
    }
    auto noisy_t = Tensor<T>::from(plans0.shape(), std::move(noisy));
    auto eps_hat = model(noisy_t, ts, cond);
    if (eps_hat.shape() != plans0.shape())
        throw std::invalid_argument("ddpm_loss: model output " + shape_str(eps_hat.shape()) + " does not match plans " +
                                    shape_str(plans0.shape()));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < H * D; ++i)
            if (!std::isfinite(static_cast<double>(eps_hat.data()[static_cast<size_t>(b * H * D + i)])))
                throw std::runtime_error("ddpm_loss: non-finite model output at diffusion step t=" +
                                         std::to_string(ts[static_cast<size_t>(b)]));

    // normalized per-slot weighting: a perfect model still scores 0, a
    // zero model scores the plain mean of eps^2
    std::vector<T> w(plans0.data().size());
    double wsum = 0.0;
    for (int64_t h = 0; h < H; ++h) wsum += h == 0 ? opt.first_slot_weight : 1.0;
    const double norm = 1.0 / (static_cast<double>(B * D) * wsum);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t d = 0; d < D; ++d)
                w[static_cast<size_t>((b * H + h) * D + d)] =
                    static_cast<T>((h == 0 ? opt.first_slot_weight : 1.0) * norm);
    auto wt = Tensor<T>::from(plans0.shape(), std::move(w));

    auto diff = sub(eps_hat, eps);
    auto per_elem = opt.loss_p == 1 ? abs_act(diff) : mul(diff, diff);
    return sum_all(mul(per_elem, wt));
}

/// Samples t ~ U{1..T} and eps ~ N(0,I) per batch item, then delegates.
template <typename T>
Tensor<T> ddpm_loss(const EpsModel<T>& model, const Tensor<T>& plans0, const Tensor<T>& cond, Rng& rng,
                    const VarianceSchedule& sched, const DdpmLossOptions& opt = {}) {
    Tensor<T> batched = plans0;
    Tensor<T> cond_b = cond;
    if (plans0.ndim() == 2) {
        batched = Tensor<T>::from({1, plans0.dim(0), plans0.dim(1)}, plans0.data());
        cond_b = Tensor<T>::from({1, cond.dim(0)}, cond.data());
    }
    const int64_t B = batched.dim(0);
    std::vector<int> ts(static_cast<size_t>(B));
    for (auto& t : ts) t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.steps)));
    auto eps = Tensor<T>::randn(batched.shape(), rng);
    return ddpm_loss_with(model, batched, cond_b, ts, eps, sched, opt);
}

/// One reverse (ancestral) step with fixed sigma_t^2 = beta_t. z must be a
/// standard gaussian draw; it is forced to zero at t=1.
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& plan_t, int t, const Tensor<T>& eps_hat, const VarianceSchedule& sched,
                    const Tensor<T>& z) {
    if (t < 1) throw std::invalid_argument("ddpm_step: t must be >= 1, got " + std::to_string(t));
    sched.check_t(t);
    if (eps_hat.shape() != plan_t.shape() || (z.defined() && z.shape() != plan_t.shape()))
        throw std::invalid_argument("ddpm_step: shape mismatch");
    const double beta = sched.beta_at(t);
    const double ab = sched.alpha_bar_at(t);
    const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(1.0 - beta));
    const T coef = static_cast<T>(beta / std::sqrt(1.0 - ab));
    const T sigma = static_cast<T>(t == 1 ? 0.0 : std::sqrt(beta));
    std::vector<T> out(plan_t.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const T zi = (t == 1 || !z.defined()) ? T(0) : z.data()[i];
        out[i] = inv_sqrt_alpha * (plan_t.data()[i] - coef * eps_hat.data()[i]) + sigma * zi;
    }
    return Tensor<T>::from(plan_t.shape(), std::move(out));
}

struct DdimOptions {
    int n_steps = 20;
    double eta = 0.0;
    const Normalizer* normalizer = nullptr;  // denormalize output when set
    // clamp the denoised estimate in normalized units; schedules with a tiny
    // terminal alpha_bar otherwise amplify model error by 1/sqrt(alpha_bar)
    double clip_x0 = 5.0;  // <= 0 disables
};

/// Deterministic-by-default strided sampler. cond: [E]; returns one plan
/// [H,D] (denormalized when a normalizer is attached).
template <typename T>
Tensor<T> ddim_sample(const EpsModel<T>& model, const Tensor<T>& cond, const VarianceSchedule& sched, int64_t horizon,
                      int64_t latent_dim, Rng& rng, const DdimOptions& opt = {}) {
    if (opt.eta < 0.0 || opt.eta > 1.0) throw std::invalid_argument("ddim: eta must be in [0,1]");
    const auto ts = ddim_timesteps(sched.steps, opt.n_steps);
    NoGradGuard nograd;
    auto x = Tensor<T>::randn({1, horizon, latent_dim}, rng);
    auto cond_b = Tensor<T>::from({1, cond.dim(0)}, cond.data());
    for (size_t j = 0; j < ts.size(); ++j) {
        const int t = ts[j];
        const int t_prev = j + 1 < ts.size() ? ts[j + 1] : 0;
        auto eps_hat = model(x, {t}, cond_b);
        const double ab = sched.alpha_bar_at(t);
        const double abp = sched.alpha_bar_at(t_prev);
        const double sigma =
            opt.eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / abp));
        const double dir_coef = std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma));
        std::vector<T> next(x.data().size());
        for (size_t i = 0; i < next.size(); ++i) {
            double e = static_cast<double>(eps_hat.data()[i]);
            double x0 = (static_cast<double>(x.data()[i]) - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
            if (opt.clip_x0 > 0.0 && std::abs(x0) > opt.clip_x0) {
                x0 = std::min(std::max(x0, -opt.clip_x0), opt.clip_x0);
                e = (static_cast<double>(x.data()[i]) - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
            }
            double v = std::sqrt(abp) * x0 + dir_coef * e;
            if (sigma > 0.0 && t_prev > 0) v += sigma * rng.normal();
            next[i] = static_cast<T>(v);
        }
        x = Tensor<T>::from(x.shape(), std::move(next));
    }
    auto plan = Tensor<T>::from({horizon, latent_dim}, x.data());
    if (opt.normalizer) plan = denormalize(plan, *opt.normalizer);
    return plan;
}

}  // namespace lcd
