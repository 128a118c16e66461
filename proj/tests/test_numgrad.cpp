#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "uforge/numgrad.hpp"

using namespace uforge;
using namespace uforge::numgrad;

namespace {

// ---------------------------------------------------------------------------
// Test-side oracles, independent of the library's graph machinery.
// ---------------------------------------------------------------------------

// Straight-line MLP evaluation with plain loops.
std::vector<double> oracle_mlp_forward(const ParamSet& params, const MlpArch& arch,
                                       const std::vector<double>& input) {
    std::vector<double> h = input;
    for (int l = 0; l < arch.layer_count(); ++l) {
        const auto& w = params.at("w" + std::to_string(l)).values();
        const auto& b = params.at("b" + std::to_string(l)).values();
        int in = arch.widths[l], out = arch.widths[l + 1];
        std::vector<double> next(out, 0.0);
        for (int j = 0; j < out; ++j) {
            double acc = b[j];
            for (int i = 0; i < in; ++i) acc += h[i] * w[i * out + j];
            next[j] = acc;
        }
        if (l + 1 < arch.layer_count()) {
            for (auto& x : next) {
                switch (arch.act) {
                    case Activation::tanh_fn: x = std::tanh(x); break;
                    case Activation::silu: x = x / (1.0 + std::exp(-x)); break;
                    case Activation::leaky_relu: x = x >= 0 ? x : 0.2 * x; break;
                    case Activation::identity: break;
                }
            }
        }
        h = next;
    }
    return h;
}

// Central finite differences of a scalar function of the parameters.
// Returns the largest violation of |analytic - fd| <= rel*max(|a|,|fd|) + floor.
double max_fd_violation(ParamSet& params, const std::function<double()>& f,
                        const FlatGrad& analytic, double h = 1e-4,
                        double rel = 1e-3, double floor = 1e-8) {
    std::vector<double> base = params.flat_values();
    double worst = 0.0;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> v = base;
        v[i] = base[i] + h;
        params.set_flat_values(v);
        double fp = f();
        v[i] = base[i] - h;
        params.set_flat_values(v);
        double fm = f();
        double fd = (fp - fm) / (2.0 * h);
        double a = analytic.values[i];
        double err = std::abs(a - fd);
        double bound = rel * std::max(std::abs(a), std::abs(fd)) + floor;
        worst = std::max(worst, err - bound);
    }
    params.set_flat_values(base);
    return worst;
}

}  // namespace

TEST_CASE("forward_mlp zero weights gives zero output") {
    ParamSet p;
    MlpArch arch{{3, 2}, Activation::identity};
    p.add("w0", {3, 2}, std::vector<double>(6, 0.0));
    p.add("b0", {2}, std::vector<double>(2, 0.0));
    Tensor x = Tensor::constant({1, 3}, {1.5, -2.0, 7.0});
    Tensor y = forward_mlp(p, x, arch);
    CHECK(y.values() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("forward_mlp identity weights reproduce input") {
    ParamSet p;
    MlpArch arch{{2, 2}, Activation::identity};
    p.add("w0", {2, 2}, {1.0, 0.0, 0.0, 1.0});
    p.add("b0", {2}, {0.0, 0.0});
    Tensor x = Tensor::constant({1, 2}, {0.3, -1.7});
    Tensor y = forward_mlp(p, x, arch);
    CHECK(y.values()[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(y.values()[1] == doctest::Approx(-1.7).epsilon(1e-15));
}

TEST_CASE("forward_mlp matches straight-line oracle on a seeded tanh net") {
    MlpArch arch{{2, 2, 1}, Activation::tanh_fn};
    ParamSet p;
    Rng rng(42);
    init_mlp_params(p, arch, rng);
    std::vector<double> input = {0.7, -0.4};
    Tensor y = forward_mlp(p, Tensor::constant({1, 2}, input), arch);
    auto expect = oracle_mlp_forward(p, arch, input);
    REQUIRE(expect.size() == 1);
    CHECK(y.values()[0] == doctest::Approx(expect[0]).epsilon(1e-14));
}

TEST_CASE("backward of x^2 at x=3 gives 6") {
    Tensor x = Tensor::leaf({1}, {3.0});
    Tensor loss = mul(x, x);
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward of tanh at 0 gives 1") {
    Tensor x = Tensor::leaf({1, 1}, {0.0});
    Tensor loss = sum_all(activate(x, Activation::tanh_fn));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("double backward without reset raises") {
    Tensor x = Tensor::leaf({1}, {2.0});
    Tensor loss = mul(x, x);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), AutogradError);
}

TEST_CASE("unreachable parameters keep zero gradient") {
    ParamSet p;
    p.add("used", {1}, {2.0});
    p.add("unused", {2}, {1.0, 1.0});
    Tensor loss = mul(p.at("used"), p.at("used"));
    backward(loss);
    CHECK(p.at("used").grad()[0] == doctest::Approx(4.0));
    CHECK(p.at("unused").grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("mlp gradients match central finite differences") {
    MlpArch arch{{3, 8, 2}, Activation::tanh_fn};
    ParamSet p;
    Rng rng(7);
    init_mlp_params(p, arch, rng);
    std::vector<double> xv(2 * 3), tv(2 * 2);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : tv) v = rng.normal();

    auto loss_value = [&]() {
        NoGradGuard ng;
        Tensor y = forward_mlp(p, Tensor::constant({2, 3}, xv), arch);
        Tensor d = sub(y, Tensor::constant({2, 2}, tv));
        return mean_all(mul(d, d)).scalar();
    };
    p.zero_grads();
    Tensor y = forward_mlp(p, Tensor::constant({2, 3}, xv), arch);
    Tensor d = sub(y, Tensor::constant({2, 2}, tv));
    backward(mean_all(mul(d, d)));
    FlatGrad g = flatten_grads(p);
    CHECK(max_fd_violation(p, loss_value, g) <= 0.0);
}

TEST_CASE("gradient fidelity holds across random small nets") {
    Rng meta(123);
    for (int trial = 0; trial < 6; ++trial) {
        int layers = 1 + static_cast<int>(meta.next_u64() % 3);
        std::vector<int> widths{1 + static_cast<int>(meta.next_u64() % 5)};
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

        auto loss_value = [&]() {
            NoGradGuard ng;
            Tensor y = forward_mlp(p, Tensor::constant({batch, widths.front()}, xv), arch);
            Tensor d = sub(y, Tensor::constant({batch, widths.back()}, tv));
            return mean_all(mul(d, d)).scalar();
        };
        p.zero_grads();
        Tensor y = forward_mlp(p, Tensor::constant({batch, widths.front()}, xv), arch);
        Tensor d = sub(y, Tensor::constant({batch, widths.back()}, tv));
        backward(mean_all(mul(d, d)));
        FlatGrad g = flatten_grads(p);
        CAPTURE(trial);
        CHECK(max_fd_violation(p, loss_value, g) <= 0.0);
    }
}

TEST_CASE("flat layout offsets and round trip") {
    ParamSet p;
    p.add("a", {2}, {1.0, 2.0});
    p.add("b", {2, 2}, {3.0, 4.0, 5.0, 6.0});
    CHECK(p.total_size() == 6);
    CHECK(p.layout()[0].offset == 0);
    CHECK(p.layout()[1].offset == 2);

    // grads round trip bit-exactly
    Tensor loss = sum_all(mul(p.at("b"), p.at("b")));
    backward(loss);
    FlatGrad g = flatten_grads(p);
    CHECK(g.values.size() == 6);
    ParamSet q = p.clone();
    unflatten_apply(q, g);
    CHECK(flatten_grads(q).values == g.values);
}

TEST_CASE("layout permutation changes offsets but round trip still holds") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::pair<std::string, std::vector<int>>> decls = {
            {"p0", {static_cast<int>(1 + rng.next_u64() % 4)}},
            {"p1", {static_cast<int>(1 + rng.next_u64() % 3),
                    static_cast<int>(1 + rng.next_u64() % 3)}},
            {"p2", {static_cast<int>(1 + rng.next_u64() % 5)}},
        };
        // two declaration orders
        ParamSet a, b;
        for (auto& [name, shape] : decls) {
            size_t n = 1;
            for (int d : shape) n *= static_cast<size_t>(d);
            std::vector<double> vals(n);
            for (auto& v : vals) v = rng.normal();
            a.add(name, shape, vals);
        }
        for (auto it = decls.rbegin(); it != decls.rend(); ++it)
            b.add(it->first, it->second, a.at(it->first).values());

        CHECK(a.layout_hash() != b.layout_hash());
        std::vector<double> fa = a.flat_values();
        ParamSet a2 = a.clone();
        a2.set_flat_values(fa);
        CHECK(a2.flat_values() == fa);
    }
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    ParamSet p;
    p.add("w", {3}, {1.0, -2.0, 0.5});
    AdamOptimizer opt(p, {});
    FlatGrad g{{0.0, 0.0, 0.0}, p.layout_hash()};
    opt.step(p, g);
    CHECK(p.at("w").values() == std::vector<double>{1.0, -2.0, 0.5});
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam first step moves by -lr * sign up to the stabilizer") {
    ParamSet p;
    p.add("w", {2}, {0.0, 0.0});
    AdamConfig cfg;
    cfg.lr = 0.01;
    AdamOptimizer opt(p, cfg);
    FlatGrad g{{1.0, -2.5}, p.layout_hash()};
    opt.step(p, g);
    // bias-corrected first step: delta = -lr * g / (|g| + eps)
    CHECK(p.at("w").values()[0] ==
          doctest::Approx(-cfg.lr * 1.0 / (1.0 + cfg.eps)).epsilon(1e-12));
    CHECK(p.at("w").values()[1] ==
          doctest::Approx(-cfg.lr * (-2.5) / (2.5 + cfg.eps)).epsilon(1e-12));
}

TEST_CASE("adam two identical steps match a scalar re-implementation") {
    ParamSet p;
    p.add("w", {1}, {0.7});
    AdamConfig cfg;
    cfg.lr = 0.05;
    AdamOptimizer opt(p, cfg);
    double gval = 0.3;
    FlatGrad g{{gval}, p.layout_hash()};
    opt.step(p, g);
    opt.step(p, g);

    // independent scalar oracle
    double m = 0, v = 0, x = 0.7;
    for (int t = 1; t <= 2; ++t) {
        m = cfg.beta1 * m + (1 - cfg.beta1) * gval;
        v = cfg.beta2 * v + (1 - cfg.beta2) * gval * gval;
        double mhat = m / (1 - std::pow(cfg.beta1, t));
        double vhat = v / (1 - std::pow(cfg.beta2, t));
        x -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    CHECK(p.at("w").values()[0] == doctest::Approx(x).epsilon(1e-15));
}

TEST_CASE("adam rejects non-finite gradients without touching state") {
    ParamSet p;
    p.add("w", {1}, {1.0});
    AdamOptimizer opt(p, {});
    FlatGrad g{{std::nan("")}, p.layout_hash()};
    CHECK_THROWS_AS(opt.step(p, g), NumericError);
    CHECK(p.at("w").values()[0] == 1.0);
    CHECK(opt.step_count() == 0);
}

TEST_CASE("training determinism: same seed gives bit-identical parameters") {
    auto run = [](uint64_t seed) {
        MlpArch arch{{2, 6, 1}, Activation::silu};
        ParamSet p;
        Rng rng(seed);
        init_mlp_params(p, arch, rng);
        AdamConfig cfg;
        cfg.lr = 1e-2;
        AdamOptimizer opt(p, cfg);
        for (int step = 0; step < 20; ++step) {
            std::vector<double> xv(4), tv(2);
            for (auto& v : xv) v = rng.normal();
            for (auto& v : tv) v = rng.normal();
            p.zero_grads();
            Tensor y = forward_mlp(p, Tensor::constant({2, 2}, xv), arch);
            Tensor d = sub(y, Tensor::constant({2, 1}, tv));
            backward(mean_all(mul(d, d)));
            opt.step(p, flatten_grads(p));
        }
        return p.flat_values();
    };
    CHECK(run(5) == run(5));
    CHECK(run(5) != run(6));
}

TEST_CASE("non-finite op outputs raise NumericError naming the op") {
    Tensor x = Tensor::leaf({1}, {-1.0});
    try {
        Tensor y = log_elem(x);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("log") != std::string::npos);
    }
    CHECK_THROWS_AS(scale(Tensor::constant({1}, {1e308}), 1e308), NumericError);
}

TEST_CASE("clamp passes gradient only inside the interval") {
    Tensor x = Tensor::leaf({1, 3}, {-2.0, 0.5, 2.0});
    Tensor loss = sum_all(clamp(x, -1.0, 1.0));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("checkpoint round trip is bit-exact") {
    MlpArch arch{{4, 7, 3}, Activation::silu};
    ParamSet p;
    Rng rng(2024);
    init_mlp_params(p, arch, rng);
    auto path = std::filesystem::temp_directory_path() / "uforge_ckpt_test.ckpt";
    save_checkpoint(path.string(), p);
    ParamSet q = load_checkpoint(path.string());
    CHECK(q.layout_hash() == p.layout_hash());
    CHECK(q.flat_values() == p.flat_values());
    CHECK(q.values_hash() == p.values_hash());

    // a second save of the loaded set produces identical bytes
    auto path2 = std::filesystem::temp_directory_path() / "uforge_ckpt_test2.ckpt";
    save_checkpoint(path2.string(), q);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("no-grad mode skips graph recording") {
    ParamSet p;
    p.add("w", {1}, {2.0});
    NoGradGuard ng;
    Tensor y = mul(p.at("w"), p.at("w"));
    CHECK_FALSE(y.requires_grad());
}
