#include "lcdforge/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "lcdforge/denoiser.hpp"
#include "lcdforge/optim.hpp"
#include "lcdforge/schedule.hpp"

using namespace lcd;

TEST(Schedule, TwoStepProduct) {
    VarianceSchedule s;
    s.steps = 2;
    s.beta = {0.1, 0.2};
    s.alpha = {0.9, 0.8};
    s.alpha_bar = {0.9, 0.72};
    auto made = make_schedule(ScheduleKind::Linear, 2, 0.1, 0.2);
    EXPECT_NEAR(made.alpha_bar_at(1), 0.9, 1e-15);
    EXPECT_NEAR(made.alpha_bar_at(2), 0.72, 1e-15);
}

TEST(Schedule, SingleStep) {
    auto s = make_schedule(ScheduleKind::Linear, 1, 0.05, 0.05);
    EXPECT_NEAR(s.alpha_bar_at(1), 0.95, 1e-15);
}

TEST(Schedule, AlphaBarMatchesIndependentProduct) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    double prod = 1.0;
    for (int t = 1; t <= 20; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 19.0;
        prod *= 1.0 - beta;
        EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
        if (t > 1) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    }
}

TEST(Schedule, CosineMonotoneAlphaBar) {
    auto s = make_schedule(ScheduleKind::Cosine, 20);
    for (int t = 2; t <= 20; ++t) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
}

TEST(Schedule, InvalidRangesRejected) {
    EXPECT_THROW(make_schedule(ScheduleKind::Linear, 0, 0.1, 0.2), std::invalid_argument);
    EXPECT_THROW(make_schedule(ScheduleKind::Linear, 5, 0.0, 0.2), std::invalid_argument);
    EXPECT_THROW(make_schedule(ScheduleKind::Linear, 5, 0.3, 0.2), std::invalid_argument);
    EXPECT_THROW(make_schedule(ScheduleKind::Linear, 5, 0.3, 1.0), std::invalid_argument);
}

TEST(Schedule, DdimStride) {
    auto ts = ddim_timesteps(20, 7);
    EXPECT_EQ(ts.front(), 20);
    EXPECT_EQ(ts.back(), 1);
    for (size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
    EXPECT_EQ(ddim_timesteps(20, 20).size(), 20u);
    EXPECT_THROW(ddim_timesteps(20, 21), std::invalid_argument);
}

TEST(QSample, ZeroNoiseScalesPlan) {
    // alpha_bar[t] = 0.9 -> plan_t = sqrt(0.9) * plan0 = 0.94868... * plan0
    auto s = make_schedule(ScheduleKind::Linear, 2, 0.1, 0.2);
    auto plan = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto noise = Tensor<double>::zeros({2, 2});
    auto out = q_sample(plan, 1, noise, s);
    for (size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.data()[i], std::sqrt(0.9) * plan.data()[i], 1e-12);
    EXPECT_NEAR(out.data()[0], 0.9486832980505138, 1e-12);
}

TEST(QSample, ZeroPlanIsScaledNoise) {
    auto s = make_schedule(ScheduleKind::Linear, 4, 0.1, 0.3);
    Rng rng(3);
    auto plan = Tensor<double>::zeros({3, 2});
    auto noise = Tensor<double>::randn({3, 2}, rng);
    auto out = q_sample(plan, 3, noise, s);
    const double sb = std::sqrt(1.0 - s.alpha_bar_at(3));
    for (size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.data()[i], sb * noise.data()[i], 1e-12);
}

TEST(QSample, OutOfRangeRejected) {
    auto s = make_schedule(ScheduleKind::Linear, 4, 0.1, 0.3);
    auto plan = Tensor<double>::zeros({2, 2});
    EXPECT_THROW(q_sample(plan, 0, plan, s), std::invalid_argument);
    EXPECT_THROW(q_sample(plan, 5, plan, s), std::invalid_argument);
}

TEST(QSample, MonteCarloMarginals) {
    // empirical mean ~= sqrt(ab)*plan0 within 3 sampling stds, var ~= 1-ab within 5%
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    const int t = 12;
    const double ab = s.alpha_bar_at(t);
    const int n = 100000;
    Rng rng(77);
    const double plan_val = 1.7;
    auto plan = Tensor<double>::from({1, 1}, {plan_val});
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        auto noise = Tensor<double>::randn({1, 1}, rng);
        const double v = q_sample(plan, t, noise, s).data()[0];
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    const double expect_mean = std::sqrt(ab) * plan_val;
    const double expect_var = 1.0 - ab;
    const double mean_tol = 3.0 * std::sqrt(expect_var / n);
    EXPECT_NEAR(mean, expect_mean, mean_tol);
    EXPECT_NEAR(var, expect_var, 0.05 * expect_var);
}

TEST(DdpmLoss, PerfectModelZeroLoss) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    Rng rng(5);
    auto plans = Tensor<double>::randn({2, 4, 3}, rng);
    auto cond = Tensor<double>::zeros({2, 8});
    auto eps = Tensor<double>::randn(plans.shape(), rng);
    // oracle-cheat stub: model returns exactly the drawn noise
    EpsModel<double> cheat = [&](const Tensor<double>&, const std::vector<int>&, const Tensor<double>&) { return eps; };
    auto loss = ddpm_loss_with(cheat, plans, cond, {3, 17}, eps, s);
    EXPECT_NEAR(loss.item(), 0.0, 1e-15);
}

TEST(DdpmLoss, ZeroModelIsMeanNoiseSquared) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    Rng rng(6);
    EpsModel<double> zero_model = [](const Tensor<double>& x, const std::vector<int>&, const Tensor<double>&) {
        return Tensor<double>::zeros(x.shape());
    };
    // average over many draws: expectation of mean(eps^2) is 1 (chi2 mean)
    double acc = 0;
    const int reps = 400;
    auto cond = Tensor<double>::zeros({8, 4});
    for (int r = 0; r < reps; ++r) {
        auto plans = Tensor<double>::zeros({8, 4, 4});
        acc += ddpm_loss(zero_model, plans, cond, rng, s).item();
    }
    EXPECT_NEAR(acc / reps, 1.0, 0.05);
}

TEST(DdpmLoss, FirstSlotWeightNormalized) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    Rng rng(9);
    auto plans = Tensor<double>::zeros({1, 4, 2});
    auto cond = Tensor<double>::zeros({1, 4});
    auto eps = Tensor<double>::ones(plans.shape());
    EpsModel<double> zero_model = [](const Tensor<double>& x, const std::vector<int>&, const Tensor<double>&) {
        return Tensor<double>::zeros(x.shape());
    };
    DdpmLossOptions opt;
    opt.first_slot_weight = 10.0;
    // all residuals are 1, so any normalized weighting still yields 1
    EXPECT_NEAR(ddpm_loss_with(zero_model, plans, cond, {4}, eps, s, opt).item(), 1.0, 1e-12);
    // put the whole residual in slot 0: weighted 10/13 vs unweighted 1/4
    auto eps0 = Tensor<double>::zeros(plans.shape());
    for (int d = 0; d < 2; ++d) eps0.data()[static_cast<size_t>(d)] = 1.0;
    EXPECT_NEAR(ddpm_loss_with(zero_model, plans, cond, {4}, eps0, s, opt).item(), 10.0 / 13.0, 1e-12);
    DdpmLossOptions l1;
    l1.loss_p = 1;
    EXPECT_NEAR(ddpm_loss_with(zero_model, plans, cond, {4}, eps, s, l1).item(), 1.0, 1e-12);
}

TEST(DdpmLoss, DeterministicGivenSeed) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    EpsModel<double> zero_model = [](const Tensor<double>& x, const std::vector<int>&, const Tensor<double>&) {
        return Tensor<double>::zeros(x.shape());
    };
    auto plans = Tensor<double>::ones({2, 4, 3});
    auto cond = Tensor<double>::zeros({2, 4});
    Rng a(42), b(42);
    EXPECT_EQ(ddpm_loss(zero_model, plans, cond, a, s).item(), ddpm_loss(zero_model, plans, cond, b, s).item());
}

TEST(DdpmLoss, NonFiniteModelOutputNamesStep) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    EpsModel<double> nan_model = [](const Tensor<double>& x, const std::vector<int>&, const Tensor<double>&) {
        auto out = Tensor<double>::zeros(x.shape());
        out.data()[0] = std::numeric_limits<double>::quiet_NaN();
        return out;
    };
    auto plans = Tensor<double>::ones({1, 4, 3});
    auto cond = Tensor<double>::zeros({1, 4});
    try {
        ddpm_loss_with(nan_model, plans, cond, {7}, Tensor<double>::zeros(plans.shape()), s);
        FAIL() << "expected non-finite error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("t=7"), std::string::npos) << e.what();
    }
}

TEST(DdpmStep, ZeroFixedPoint) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    auto x = Tensor<double>::zeros({2, 3});
    auto out = ddpm_step(x, 5, x, s, Tensor<double>::zeros({2, 3}));
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(DdpmStep, HandEvaluatedUpdate) {
    // t=1, beta=0.1, alpha_bar_1=0.9: (1/sqrt(0.9)) * (1 - 0.1/sqrt(0.1)) = 0.7207592916...
    VarianceSchedule s;
    s.steps = 1;
    s.beta = {0.1};
    s.alpha = {0.9};
    s.alpha_bar = {0.9};
    auto x = Tensor<double>::ones({1, 1});
    auto eps = Tensor<double>::ones({1, 1});
    auto z = Tensor<double>::ones({1, 1});  // forced to zero at t=1
    auto out = ddpm_step(x, 1, eps, s, z);
    const double expect = (1.0 / std::sqrt(0.9)) * (1.0 - 0.1 / std::sqrt(0.1));
    EXPECT_NEAR(out.data()[0], expect, 1e-12);
    EXPECT_NEAR(out.data()[0], 0.7207592201, 1e-9);
}

TEST(DdpmStep, ComposesWithQSampleAffinely) {
    // q_sample then ddpm_step with the true eps and z=0 is an affine map of
    // plan0; verified against a scalar symbolic expansion.
    auto s = make_schedule(ScheduleKind::Linear, 6, 0.05, 0.2);
    const int t = 4;
    const double ab = s.alpha_bar_at(t);
    const double beta = s.beta_at(t);
    Rng rng(8);
    for (int rep = 0; rep < 5; ++rep) {
        const double p0 = rng.normal();
        const double e = rng.normal();
        auto plan = Tensor<double>::from({1, 1}, {p0});
        auto eps = Tensor<double>::from({1, 1}, {e});
        auto xt = q_sample(plan, t, eps, s);
        auto prev = ddpm_step(xt, t, eps, s, Tensor<double>());
        // symbolic: (1/sqrt(1-beta)) * (sqrt(ab) p0 + (sqrt(1-ab) - beta/sqrt(1-ab)) e)
        const double expect = (std::sqrt(ab) * p0 + (std::sqrt(1 - ab) - beta / std::sqrt(1 - ab)) * e) / std::sqrt(1 - beta);
        EXPECT_NEAR(prev.data()[0], expect, 1e-12);
    }
}

TEST(DdpmStep, TZeroRejected) {
    auto s = make_schedule(ScheduleKind::Linear, 4, 0.1, 0.2);
    auto x = Tensor<double>::zeros({1, 1});
    EXPECT_THROW(ddpm_step(x, 0, x, s, x), std::invalid_argument);
}

TEST(Ddim, DeterministicAtEtaZero) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    EpsModel<double> model = [](const Tensor<double>& x, const std::vector<int>&, const Tensor<double>&) {
        return scale(x, 0.3);
    };
    auto cond = Tensor<double>::zeros({4});
    DdimOptions opt;
    opt.n_steps = 10;
    Rng a(123), b(123);
    auto s1 = ddim_sample(model, cond, s, 4, 3, a, opt);
    auto s2 = ddim_sample(model, cond, s, 4, 3, b, opt);
    EXPECT_EQ(s1.data(), s2.data());
    EXPECT_EQ(s1.shape(), (Shape{4, 3}));
}

TEST(Ddim, NStepsAboveTRejected) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    EpsModel<double> model = [](const Tensor<double>& x, const std::vector<int>&, const Tensor<double>&) { return x; };
    DdimOptions opt;
    opt.n_steps = 25;
    Rng rng(1);
    EXPECT_THROW(ddim_sample(model, Tensor<double>::zeros({2}), s, 2, 2, rng, opt), std::invalid_argument);
}

namespace {

// For 1-D gaussian data the optimal eps model is affine in x; composing the
// DDIM updates symbolically gives the exact output mean/variance given
// x_T ~ N(0,1). Returns {mean, var}.
std::pair<double, double> ddim_gaussian_pushforward(const VarianceSchedule& s, int n_steps, double mu, double sig2) {
    auto seq = ddim_timesteps(s.steps, n_steps);
    double A = 1.0, Bc = 0.0;
    for (size_t j = 0; j < seq.size(); ++j) {
        const int t = seq[j];
        const int tp = j + 1 < seq.size() ? seq[j + 1] : 0;
        const double ab = s.alpha_bar_at(t), abp = s.alpha_bar_at(tp);
        const double denom = ab * sig2 + 1.0 - ab;
        const double a_eps = std::sqrt(1.0 - ab) / denom;
        const double b_eps = -std::sqrt(1.0 - ab) * std::sqrt(ab) * mu / denom;
        const double ca = (1.0 - std::sqrt(1.0 - ab) * a_eps) / std::sqrt(ab) * std::sqrt(abp) + std::sqrt(1.0 - abp) * a_eps;
        const double cb = (-std::sqrt(1.0 - ab) * b_eps) / std::sqrt(ab) * std::sqrt(abp) + std::sqrt(1.0 - abp) * b_eps;
        A = ca * A;
        Bc = ca * Bc + cb;
    }
    return {Bc, A * A};
}

EpsModel<double> gaussian_eps_oracle(const VarianceSchedule& s, double mu, double sig2) {
    return [&s, mu, sig2](const Tensor<double>& x, const std::vector<int>& ts, const Tensor<double>&) {
        const double ab = s.alpha_bar_at(ts[0]);
        std::vector<double> out(x.data().size());
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = std::sqrt(1.0 - ab) * (x.data()[i] - std::sqrt(ab) * mu) / (ab * sig2 + 1.0 - ab);
        return Tensor<double>::from(x.shape(), std::move(out));
    };
}

}  // namespace

TEST(Ddim, GaussianOracleMatchesAffineComposition) {
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    const double mu = 0.8, sig2 = 0.25;
    auto oracle = gaussian_eps_oracle(s, mu, sig2);
    DdimOptions opt;
    opt.n_steps = 20;
    const auto [expect_mean, expect_var] = ddim_gaussian_pushforward(s, 20, mu, sig2);

    Rng rng(2024);
    const int n = 20000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        const double v = ddim_sample(oracle, Tensor<double>::zeros({2}), s, 2, 1, rng, opt).data()[0];
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    EXPECT_NEAR(mean, expect_mean, 4.0 * std::sqrt(expect_var / n));
    EXPECT_NEAR(var, expect_var, 0.06 * expect_var);
}

TEST(Ddim, CosineScheduleRecoversGaussianData) {
    // the cosine schedule drives alpha_bar(T) ~ 0, so pure-noise sampling
    // with the oracle model reproduces the data distribution closely; the
    // truncated linear-20 schedule leaves a visible prior-mismatch bias
    const double mu = 0.8, sig2 = 0.25;
    auto cosine = make_schedule(ScheduleKind::Cosine, 20);
    const auto [cmean, cvar] = ddim_gaussian_pushforward(cosine, 20, mu, sig2);
    EXPECT_NEAR(cmean, mu, 0.02);
    // eta=0 DDIM contracts variance somewhat at coarse step counts
    EXPECT_NEAR(cvar, sig2, 0.2 * sig2);

    auto linear = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    const auto [lmean, lvar] = ddim_gaussian_pushforward(linear, 20, mu, sig2);
    EXPECT_GT(std::abs(lmean - mu), 0.1);

    // Monte-Carlo agreement for the cosine path through the real sampler
    auto oracle = gaussian_eps_oracle(cosine, mu, sig2);
    DdimOptions opt;
    opt.n_steps = 20;
    Rng rng(7);
    const int n = 20000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        const double v = ddim_sample(oracle, Tensor<double>::zeros({2}), cosine, 2, 1, rng, opt).data()[0];
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    EXPECT_NEAR(mean, cmean, 4.0 * std::sqrt(cvar / n));
    EXPECT_NEAR(var, cvar, 0.06 * cvar);
}

TEST(Normalizer, RoundTripAndStats) {
    Rng rng(13);
    const int64_t rows = 500, dim = 4;
    std::vector<double> corpus(static_cast<size_t>(rows * dim));
    for (auto& v : corpus) v = rng.normal(2.0, 3.0);
    Normalizer n;
    n.fit(corpus, rows, dim);

    auto x = Tensor<double>::randn({2, dim}, rng);
    auto back = denormalize(normalize(x, n), n);
    for (size_t i = 0; i < x.data().size(); ++i) EXPECT_NEAR(back.data()[i], x.data()[i], 1e-6);

    auto m = Tensor<double>::from({1, dim}, std::vector<double>(n.mean.begin(), n.mean.end()));
    auto zn = normalize(m, n);
    for (double v : zn.data()) EXPECT_NEAR(v, 0.0, 1e-9);

    // normalized corpus has per-dim mean ~0 and std ~1
    std::vector<double> normed = corpus;
    n.normalize_rows(normed);
    for (int64_t d = 0; d < dim; ++d) {
        double mean = 0, var = 0;
        for (int64_t r = 0; r < rows; ++r) mean += normed[static_cast<size_t>(r * dim + d)];
        mean /= rows;
        for (int64_t r = 0; r < rows; ++r) {
            const double dv = normed[static_cast<size_t>(r * dim + d)] - mean;
            var += dv * dv;
        }
        var /= rows;
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_NEAR(std::sqrt(var), 1.0, 1e-6);
    }
}

TEST(Normalizer, UnfittedRejectedAndClampFlagged) {
    Normalizer n;
    auto x = Tensor<double>::ones({1, 2});
    EXPECT_THROW(normalize(x, n), std::runtime_error);
    std::vector<double> corpus = {1.0, 5.0, 1.0, 6.0, 1.0, 7.0};  // dim 0 constant
    n.fit(corpus, 3, 2);
    ASSERT_EQ(n.clamped_dims.size(), 1u);
    EXPECT_EQ(n.clamped_dims[0], 0);
}

TEST(DdpmLoss, GradientMatchesFiniteDifferences) {
    // gradient w.r.t. denoiser params at fixed t and eps, 64-bit
    auto s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02);
    DenoiserConfig cfg;
    cfg.horizon = 4;
    cfg.latent_dim = 3;
    cfg.model_dim = 8;
    cfg.groups = 4;
    cfg.cond_dim = 5;
    cfg.time_dim = 8;
    Rng rng(31);
    auto params = init_denoiser_params<double>(cfg, rng);
    auto plans = Tensor<double>::randn({2, 4, 3}, rng);
    auto cond = Tensor<double>::randn({2, 5}, rng);
    auto eps = Tensor<double>::randn(plans.shape(), rng);
    const std::vector<int> ts = {3, 14};

    auto loss_fn = [&]() {
        auto model = make_eps_model(cfg, params);
        return ddpm_loss_with(model, plans, cond, ts, eps, s);
    };
    params.zero_grad();
    auto loss = loss_fn();
    backward(loss);

    Rng pick(4);
    double max_rel = 0;
    for (int probe = 0; probe < 25; ++probe) {
        const size_t pi = static_cast<size_t>(pick.uniform_int(params.size()));
        auto& t = params.tensors[pi];
        const size_t ci = static_cast<size_t>(pick.uniform_int(static_cast<uint64_t>(t.numel())));
        const double orig = t.data()[ci];
        const double eps_fd = 1e-5;
        t.data()[ci] = orig + eps_fd;
        const double fp = loss_fn().item();
        t.data()[ci] = orig - eps_fd;
        const double fm = loss_fn().item();
        t.data()[ci] = orig;
        const double numeric = (fp - fm) / (2 * eps_fd);
        const double rel = std::abs(t.grad()[ci] - numeric) / std::max(1.0, std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    EXPECT_LT(max_rel, 1e-3);
}
