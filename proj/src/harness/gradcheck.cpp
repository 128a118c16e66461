#include <cmath>
#include <cstdio>
#include <functional>

#include "uforge/harness.hpp"

namespace uforge::harness {

using namespace uforge::numgrad;

namespace {

// Central-difference check of an analytic parameter gradient. Returns the
// worst violation of |analytic - fd| <= rel*max(|analytic|,|fd|) + floor;
// any value <= 0 passes.
double fd_violation(ParamSet& params, const std::function<double()>& f,
                    const FlatGrad& analytic, double h = 1e-4, double rel = 1e-3,
                    double floor = 1e-8) {
    std::vector<double> base = params.flat_values();
    double worst = -1.0;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> v = base;
        v[i] = base[i] + h;
        params.set_flat_values(v);
        double fp = f();
        v[i] = base[i] - h;
        params.set_flat_values(v);
        double fm = f();
        double fd = (fp - fm) / (2.0 * h);
        double err = std::abs(analytic.values[i] - fd);
        double bound = rel * std::max(std::abs(analytic.values[i]), std::abs(fd)) + floor;
        worst = std::max(worst, err - bound);
    }
    params.set_flat_values(base);
    return worst;
}

GradCheckItem check_mlp_gradients(uint64_t seed) {
    Rng meta(seed);
    double worst = -1.0;
    for (int trial = 0; trial < 8; ++trial) {
        int layers = 1 + static_cast<int>(meta.next_u64() % 3);
        std::vector<int> widths{1 + static_cast<int>(meta.next_u64() % 6)};
        for (int l = 0; l < layers; ++l)
            widths.push_back(1 + static_cast<int>(meta.next_u64() % 32));
        Activation acts[] = {Activation::tanh_fn, Activation::silu,
                             Activation::leaky_relu};
        MlpArch arch{widths, acts[meta.next_u64() % 3]};
        ParamSet p;
        Rng rng(meta.next_u64());
        init_mlp_params(p, arch, rng);
        int batch = 1 + static_cast<int>(meta.next_u64() % 4);
        std::vector<double> xv(static_cast<size_t>(batch) * widths.front());
        std::vector<double> tv(static_cast<size_t>(batch) * widths.back());
        for (auto& v : xv) v = rng.normal();
        for (auto& v : tv) v = rng.normal();
        auto loss = [&]() {
            Tensor y = forward_mlp(p, Tensor::constant({batch, widths.front()}, xv), arch);
            Tensor d = sub(y, Tensor::constant({batch, widths.back()}, tv));
            return mean_all(mul(d, d));
        };
        p.zero_grads();
        backward(loss());
        FlatGrad g = flatten_grads(p);
        auto value = [&]() {
            NoGradGuard ng;
            return loss().scalar();
        };
        worst = std::max(worst, fd_violation(p, value, g));
    }
    return {"mlp_gradients_vs_finite_differences", worst <= 0.0, worst};
}

GradCheckItem check_diffusion_loss_grad(uint64_t seed) {
    auto table = concepts::default_table(7);
    auto sched = diffusion::build_schedule(16);
    diffusion::DenoiserNet net = diffusion::DenoiserNet::make({6}, seed);
    Rng rng(Rng::derive(seed, 1));
    std::vector<std::array<double, 2>> x0 = {{2.1, 1.8}, {1.9, 2.2}, {2.0, 2.0}};
    std::vector<const std::vector<double>*> embeds(x0.size(),
                                                   &table.by_id("star").embedding);
    diffusion::DenoiseBatch batch =
        diffusion::make_denoise_batch(x0, embeds, sched, net.t_embed_dim, rng);
    net.params.zero_grads();
    backward(diffusion::noise_prediction_loss(net, batch));
    FlatGrad g = flatten_grads(net.params);
    auto value = [&]() {
        NoGradGuard ng;
        return diffusion::noise_prediction_loss(net, batch).scalar();
    };
    double worst = fd_violation(net.params, value, g);
    return {"diffusion_loss_vs_finite_differences", worst <= 0.0, worst};
}

GradCheckItem check_denoise_step_grad(uint64_t seed) {
    auto sched = diffusion::build_schedule(16);
    diffusion::DenoiserNet net = diffusion::DenoiserNet::make({5}, Rng::derive(seed, 2));
    Rng rng(Rng::derive(seed, 3));
    std::vector<double> cemb(8);
    for (auto& v : cemb) v = rng.normal() * 0.3;
    Tensor x_t = Tensor::constant({3, 2}, {0.4, -0.1, 1.2, 0.3, -0.7, 0.2});
    auto loss = [&]() {
        Tensor x_prev = diffusion::denoise_step(net, x_t, 9, cemb, sched);
        return mean_all(mul(x_prev, x_prev));
    };
    net.params.zero_grads();
    backward(loss());
    FlatGrad g = flatten_grads(net.params);
    auto value = [&]() {
        NoGradGuard ng;
        return loss().scalar();
    };
    double worst = fd_violation(net.params, value, g);
    return {"denoise_step_vs_finite_differences", worst <= 0.0, worst};
}

GradCheckItem check_unlearn_loss_grad(uint64_t seed) {
    auto table = concepts::default_table(7);
    auto sched = diffusion::build_schedule(12);
    diffusion::DenoiserNet gen = diffusion::DenoiserNet::make({5}, Rng::derive(seed, 4));
    doco::DiscriminatorNet disc =
        doco::DiscriminatorNet::make({4}, Rng::derive(seed, 5));
    std::vector<std::array<double, 2>> pool = {{-2.0, -2.1}, {-1.9, -1.8}, {-2.2, -2.0}};
    Rng rng(Rng::derive(seed, 6));
    doco::AdvBatch batch = doco::make_adv_batch(pool, sched, 4, rng);
    auto loss = [&]() {
        Tensor x_prev = diffusion::denoise_step(gen, batch.x_t, batch.t,
                                                table.target().embedding, sched);
        Tensor p = clamp(sigmoid(disc.forward(x_prev, batch.t)), doco::kProbClamp,
                         1.0 - doco::kProbClamp);
        return scale(mean_all(log_elem(p)), -1.0);
    };
    gen.params.zero_grads();
    backward(loss());
    FlatGrad g = flatten_grads(gen.params);
    auto value = [&]() {
        NoGradGuard ng;
        return loss().scalar();
    };
    double worst = fd_violation(gen.params, value, g);
    return {"unlearn_loss_vs_finite_differences", worst <= 0.0, worst};
}

GradCheckItem check_retain_loss_grad(uint64_t seed) {
    auto table = concepts::default_table(7);
    auto sched = diffusion::build_schedule(12);
    diffusion::DenoiserNet gen = diffusion::DenoiserNet::make({5}, Rng::derive(seed, 7));
    Rng rng(Rng::derive(seed, 8));
    doco::RetainBatch rb =
        doco::make_retain_batch(table, doco::default_retain_set(table), 4, rng);
    diffusion::DenoiseBatch batch =
        diffusion::make_denoise_batch(rb.x0, rb.embeds, sched, gen.t_embed_dim, rng);
    gen.params.zero_grads();
    backward(diffusion::noise_prediction_loss(gen, batch));
    FlatGrad g = flatten_grads(gen.params);
    auto value = [&]() {
        NoGradGuard ng;
        return diffusion::noise_prediction_loss(gen, batch).scalar();
    };
    double worst = fd_violation(gen.params, value, g);
    return {"retain_loss_vs_finite_differences", worst <= 0.0, worst};
}

GradCheckItem check_flatten_roundtrip(uint64_t seed) {
    Rng rng(Rng::derive(seed, 9));
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
        ParamSet p;
        int params = 1 + static_cast<int>(rng.next_u64() % 5);
        for (int i = 0; i < params; ++i) {
            std::vector<int> shape;
            int ndim = 1 + static_cast<int>(rng.next_u64() % 2);
            for (int d = 0; d < ndim; ++d)
                shape.push_back(1 + static_cast<int>(rng.next_u64() % 4));
            size_t n = 1;
            for (int d : shape) n *= static_cast<size_t>(d);
            std::vector<double> vals(n);
            for (auto& v : vals) v = rng.normal();
            p.add("p" + std::to_string(i), shape, vals);
        }
        FlatGrad g;
        g.layout_hash = p.layout_hash();
        g.values.resize(p.total_size());
        for (auto& v : g.values) v = rng.normal();
        unflatten_apply(p, g);
        ok = flatten_grads(p).values == g.values;
        std::vector<double> flat = p.flat_values();
        p.set_flat_values(flat);
        ok = ok && p.flat_values() == flat;
    }
    return {"flatten_unflatten_roundtrip_bit_exact", ok, ok ? 0.0 : 1.0};
}

GradCheckItem check_adam_rule(uint64_t) {
    ParamSet p;
    p.add("w", {2}, {0.5, -0.25});
    AdamConfig cfg;
    cfg.lr = 0.01;
    {
        AdamOptimizer opt(p, cfg);
        FlatGrad zero{{0.0, 0.0}, p.layout_hash()};
        opt.step(p, zero);
    }
    bool ok = p.at("w").values() == std::vector<double>{0.5, -0.25};
    AdamOptimizer opt(p, cfg);  // fresh state: bias-corrected first step
    FlatGrad g{{2.0, -0.5}, p.layout_hash()};
    opt.step(p, g);
    double d0 = std::abs(p.at("w").values()[0] - (0.5 - cfg.lr * 2.0 / (2.0 + cfg.eps)));
    double d1 =
        std::abs(p.at("w").values()[1] - (-0.25 - cfg.lr * (-0.5) / (0.5 + cfg.eps)));
    ok = ok && d0 < 1e-12 && d1 < 1e-12;
    return {"adam_zero_and_sign_rule", ok, std::max(d0, d1)};
}

GradCheckItem check_surgery_cases(uint64_t) {
    auto fg = [](std::vector<double> v) { return FlatGrad{std::move(v), 1}; };
    bool ok = doco::surgery(fg({1, 0}), fg({0, 1}), 1.0).values ==
              std::vector<double>{1.0, 0.0};
    ok = ok && doco::surgery(fg({1, -1}), fg({0, 1}), 1.0).values ==
                   std::vector<double>{1.0, 0.0};
    ok = ok && doco::surgery(fg({1, -1}), fg({0, 1}), 0.5).values ==
                   std::vector<double>{1.0, -0.5};
    return {"surgery_hand_cases", ok, ok ? 0.0 : 1.0};
}

GradCheckItem check_surgery_properties(uint64_t seed) {
    Rng rng(Rng::derive(seed, 10));
    double worst = -1.0;
    bool ok = true;
    for (int trial = 0; trial < 2000; ++trial) {
        int dim = 2 + static_cast<int>(rng.next_u64() % 16);
        FlatGrad u{std::vector<double>(dim), 1}, r{std::vector<double>(dim), 1};
        for (auto& x : u.values) x = rng.normal();
        for (auto& x : r.values) x = rng.normal();
        FlatGrad g = doco::surgery(u, r, 1.0);
        if (u.dot(r) >= 0.0) {
            ok = ok && g.values == u.values;
        } else {
            double align = g.dot(r) + 1e-9 * g.norm() * r.norm();
            worst = std::max(worst, -align);
            ok = ok && align >= 0.0;
            FlatGrad gg = doco::surgery(g, r, 1.0);
            for (int i = 0; i < dim; ++i)
                ok = ok && std::abs(gg.values[i] - g.values[i]) < 1e-12;
        }
    }
    return {"surgery_projection_properties", ok, worst};
}

GradCheckItem check_training_determinism(uint64_t seed) {
    auto run = [&]() {
        auto table = concepts::default_table(3);
        auto sched = diffusion::build_schedule(12);
        diffusion::TrainConfig cfg;
        cfg.steps = 40;
        cfg.batch = 8;
        cfg.hidden = {8};
        cfg.seed = Rng::derive(seed, 11);
        return diffusion::train_base(table, sched, cfg).params_hash();
    };
    bool ok = run() == run();
    return {"training_determinism_bit_exact", ok, ok ? 0.0 : 1.0};
}

}  // namespace

bool GradCheckReport::all_ok() const {
    for (const auto& item : items)
        if (!item.ok) return false;
    return true;
}

std::string GradCheckReport::to_text() const {
    std::string out;
    char buf[160];
    for (const auto& item : items) {
        std::snprintf(buf, sizeof(buf), "[%s] %-42s (worst violation %.3e)\n",
                      item.ok ? "PASS" : "FAIL", item.name.c_str(), item.detail);
        out += buf;
    }
    out += all_ok() ? "gradcheck: all checks passed\n" : "gradcheck: FAILURES present\n";
    return out;
}

GradCheckReport run_gradcheck(uint64_t seed) {
    GradCheckReport rep;
    rep.items.push_back(check_mlp_gradients(seed));
    rep.items.push_back(check_diffusion_loss_grad(seed));
    rep.items.push_back(check_denoise_step_grad(seed));
    rep.items.push_back(check_unlearn_loss_grad(seed));
    rep.items.push_back(check_retain_loss_grad(seed));
    rep.items.push_back(check_flatten_roundtrip(seed));
    rep.items.push_back(check_adam_rule(seed));
    rep.items.push_back(check_surgery_cases(seed));
    rep.items.push_back(check_surgery_properties(seed));
    rep.items.push_back(check_training_determinism(seed));
    return rep;
}

}  // namespace uforge::harness
