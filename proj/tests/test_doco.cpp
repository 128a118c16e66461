#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include "uforge/doco.hpp"

using namespace uforge;
using namespace uforge::numgrad;
using namespace uforge::doco;

namespace {

// Discriminator with every parameter zeroed: constant 0 logit.
DiscriminatorNet zero_disc() {
    DiscriminatorNet d = DiscriminatorNet::make({4}, 1);
    d.params.set_flat_values(std::vector<double>(d.params.total_size(), 0.0));
    return d;
}

// Single-linear-layer discriminator: logit = w . [x | temb] + b.
DiscriminatorNet linear_disc(double wx, double b) {
    DiscriminatorNet d;
    d.arch.widths = {18, 1};
    d.arch.act = Activation::leaky_relu;
    std::vector<double> w(18, 0.0);
    w[0] = wx;
    d.params.add("w0", {18, 1}, std::move(w));
    d.params.add("b0", {1}, {b});
    return d;
}

FlatGrad fg(std::vector<double> v, uint64_t hash = 42) {
    return FlatGrad{std::move(v), hash};
}

// Shared small trained base model for the integration-scale cases.
struct Fixture {
    concepts::ConceptTable table = concepts::default_table(7);
    diffusion::NoiseSchedule sched = diffusion::build_schedule(40);
    diffusion::ModelSnapshot m_init;

    Fixture() {
        diffusion::TrainConfig cfg;
        cfg.steps = 600;
        cfg.batch = 48;
        cfg.lr = 2e-3;
        cfg.seed = 12;
        cfg.hidden = {32, 32};
        m_init = diffusion::train_base(table, sched, cfg);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

double fd_max_violation(ParamSet& params, const std::function<double()>& f,
                        const FlatGrad& analytic) {
    std::vector<double> base = params.flat_values();
    double worst = -1.0;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> v = base;
        v[i] = base[i] + 1e-4;
        params.set_flat_values(v);
        double fp = f();
        v[i] = base[i] - 1e-4;
        params.set_flat_values(v);
        double fm = f();
        double fd = (fp - fm) / 2e-4;
        double err = std::abs(analytic.values[i] - fd);
        double bound = 1e-3 * std::max(std::abs(analytic.values[i]), std::abs(fd)) + 1e-8;
        worst = std::max(worst, err - bound);
    }
    params.set_flat_values(base);
    return worst;
}

}  // namespace

TEST_CASE("adversarial value at maximal confusion") {
    DiscriminatorNet d = zero_disc();
    Tensor xa = Tensor::constant({4, 2}, {0.1, 0.2, -0.3, 0.4, 0.0, 0.0, 1.0, -1.0});
    Tensor xb = Tensor::constant({4, 2}, {0.5, -0.2, 0.3, 0.1, -1.0, 1.0, 0.2, 0.2});
    double v = adversarial_value(d, xa, xb, 3).scalar();
    CHECK(v == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-10));
    CHECK(v == doctest::Approx(-1.3862944).epsilon(1e-6));
}

TEST_CASE("adversarial value clamps saturated probabilities") {
    DiscriminatorNet d = linear_disc(1e4, 0.0);
    Tensor xa = Tensor::constant({2, 2}, {1.0, 0.0, 1.0, 0.0});   // logit +1e4
    Tensor xb = Tensor::constant({2, 2}, {-1.0, 0.0, -1.0, 0.0});  // logit -1e4
    double v = adversarial_value(d, xa, xb, 1).scalar();
    CHECK(v == doctest::Approx(2.0 * std::log(1.0 - 1e-7)).epsilon(1e-12));
    CHECK(v < 0.0);
}

TEST_CASE("adversarial value matches a scalar recomputation from logits") {
    DiscriminatorNet d = DiscriminatorNet::make({6, 6}, 77);
    Rng rng(5);
    std::vector<double> va(8 * 2), vb(8 * 2);
    for (auto& x : va) x = rng.normal();
    for (auto& x : vb) x = rng.normal();
    Tensor xa = Tensor::constant({8, 2}, va);
    Tensor xb = Tensor::constant({8, 2}, vb);
    int t = 9;
    double v = adversarial_value(d, xa, xb, t).scalar();

    NoGradGuard ng;
    Tensor la_t = d.forward(xa, t);
    Tensor lb_t = d.forward(xb, t);
    const auto& la = la_t.values();
    const auto& lb = lb_t.values();
    double expect = 0.0;
    for (double l : la) {
        double p = std::min(std::max(1.0 / (1.0 + std::exp(-l)), 1e-7), 1.0 - 1e-7);
        expect += std::log(p) / 8.0;
    }
    for (double l : lb) {
        double p = std::min(std::max(1.0 / (1.0 + std::exp(-l)), 1e-7), 1.0 - 1e-7);
        expect += std::log(1.0 - p) / 8.0;
    }
    CHECK(v == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("eq-8 symmetry: swapping branches and negating logits preserves V") {
    DiscriminatorNet d = DiscriminatorNet::make({6}, 3);
    DiscriminatorNet neg = d.clone();
    {
        // negate the output layer => logits flip sign
        auto& w = neg.params.at("w1").values_mut();
        for (auto& x : w) x = -x;
        auto& b = neg.params.at("b1").values_mut();
        for (auto& x : b) x = -x;
    }
    Rng rng(8);
    std::vector<double> va(6 * 2), vb(6 * 2);
    for (auto& x : va) x = rng.normal();
    for (auto& x : vb) x = rng.normal();
    Tensor xa = Tensor::constant({6, 2}, va);
    Tensor xb = Tensor::constant({6, 2}, vb);
    double v1 = adversarial_value(d, xa, xb, 4).scalar();
    double v2 = adversarial_value(neg, xb, xa, 4).scalar();
    CHECK(v1 == doctest::Approx(v2).epsilon(1e-12));
}

TEST_CASE("constant discriminator gives the null unlearning gradient") {
    auto& f = fixture();
    DiscriminatorNet d = zero_disc();
    std::vector<std::array<double, 2>> pool(32, {-2.0, -2.0});
    Rng rng(4);
    GradResult u = generator_unlearn_grad(f.m_init.net, d, f.table.target().embedding,
                                          pool, f.sched, 8, rng);
    CHECK(u.loss == doctest::Approx(-std::log(0.5)).epsilon(1e-10));
    CHECK(u.loss == doctest::Approx(0.6931472).epsilon(1e-6));
    for (double g : u.grad.values) CHECK(g == 0.0);
}

TEST_CASE("unlearning gradient matches finite differences on tiny nets") {
    auto table = concepts::default_table(7);
    auto sched = diffusion::build_schedule(12);
    diffusion::DenoiserNet gen = diffusion::DenoiserNet::make({5}, 21);
    DiscriminatorNet disc = DiscriminatorNet::make({4}, 22);
    std::vector<std::array<double, 2>> pool = {{-2.1, -1.9}, {-1.8, -2.0}, {-2.0, -2.3}};

    Rng draw_rng(9);
    AdvBatch batch = make_adv_batch(pool, sched, 4, draw_rng);
    auto loss_tensor = [&]() {
        Tensor x_prev = diffusion::denoise_step(gen, batch.x_t, batch.t,
                                                table.target().embedding, sched);
        Tensor p = clamp(sigmoid(disc.forward(x_prev, batch.t)), kProbClamp,
                         1.0 - kProbClamp);
        return scale(mean_all(log_elem(p)), -1.0);
    };
    gen.params.zero_grads();
    backward(loss_tensor());
    FlatGrad g = flatten_grads(gen.params);
    auto loss_value = [&]() {
        NoGradGuard ng;
        return loss_tensor().scalar();
    };
    CHECK(fd_max_violation(gen.params, loss_value, g) <= 0.0);
}

TEST_CASE("retain gradient matches finite differences on tiny nets") {
    auto table = concepts::default_table(7);
    auto sched = diffusion::build_schedule(12);
    diffusion::DenoiserNet gen = diffusion::DenoiserNet::make({5}, 31);
    Rng draw_rng(11);
    RetainBatch rb = make_retain_batch(table, default_retain_set(table), 4, draw_rng);
    diffusion::DenoiseBatch b =
        diffusion::make_denoise_batch(rb.x0, rb.embeds, sched, gen.t_embed_dim, draw_rng);

    gen.params.zero_grads();
    backward(diffusion::noise_prediction_loss(gen, b));
    FlatGrad g = flatten_grads(gen.params);
    auto loss_value = [&]() {
        NoGradGuard ng;
        return diffusion::noise_prediction_loss(gen, b).scalar();
    };
    CHECK(fd_max_violation(gen.params, loss_value, g) <= 0.0);
}

TEST_CASE("zero-loss retain batch yields a zero gradient") {
    // constant-output net paired with targets equal to that constant
    diffusion::DenoiserNet gen = diffusion::DenoiserNet::make({4}, 2);
    gen.params.set_flat_values(std::vector<double>(gen.params.total_size(), 0.0));
    gen.params.at("b1").values_mut() = {0.25, -0.5};
    int b = 3, width = gen.input_dim();
    diffusion::DenoiseBatch batch;
    batch.input = Tensor::constant({b, width}, std::vector<double>(b * width, 0.3));
    batch.target = Tensor::constant({b, 2}, {0.25, -0.5, 0.25, -0.5, 0.25, -0.5});
    batch.batch = b;
    gen.params.zero_grads();
    Tensor loss = diffusion::noise_prediction_loss(gen, batch);
    CHECK(loss.scalar() == 0.0);
    backward(loss);
    for (double g : flatten_grads(gen.params).values) CHECK(g == 0.0);
}

TEST_CASE("retain batches draw only from the retain set") {
    auto table = concepts::default_table(7);
    std::vector<std::string> retain = default_retain_set(table);
    Rng rng(55);
    int seen_anchor = 0;
    for (int trial = 0; trial < 10; ++trial) {
        RetainBatch rb = make_retain_batch(table, retain, 100, rng);
        for (const auto& id : rb.ids) {
            CHECK(id != "star");
            CHECK(id != "starry");
            seen_anchor += id == "blob";
        }
    }
    CHECK(seen_anchor > 0);
}

TEST_CASE("surgery hand cases") {
    // orthogonal: dot = 0 -> returned unchanged (bit-equal)
    FlatGrad a = surgery(fg({1.0, 0.0}), fg({0.0, 1.0}), 1.0);
    CHECK(a.values == std::vector<double>{1.0, 0.0});

    // conflict, full projection
    FlatGrad b = surgery(fg({1.0, -1.0}), fg({0.0, 1.0}), 1.0);
    CHECK(b.values == std::vector<double>{1.0, 0.0});

    // conflict, half projection
    FlatGrad c = surgery(fg({1.0, -1.0}), fg({0.0, 1.0}), 0.5);
    CHECK(c.values == std::vector<double>{1.0, -0.5});

    // degenerate retain gradient passes the unlearning gradient through
    FlatGrad d = surgery(fg({3.0, 4.0}), fg({0.0, 0.0}), 1.0);
    CHECK(d.values == std::vector<double>{3.0, 4.0});

    CHECK_THROWS_AS(surgery(fg({1.0}, 1), fg({1.0}, 2), 1.0), LayoutError);
}

TEST_CASE("surgery properties over random gradients") {
    Rng rng(2718);
    for (int trial = 0; trial < 500; ++trial) {
        int dim = 2 + static_cast<int>(rng.next_u64() % 24);
        std::vector<double> u(dim), r(dim);
        for (auto& x : u) x = rng.normal();
        for (auto& x : r) x = rng.normal();
        FlatGrad gu = fg(u), gr = fg(r);
        double dot_ur = gu.dot(gr);

        for (double lambda : {0.0, 0.5, 1.0}) {
            FlatGrad g = surgery(gu, gr, lambda);
            if (dot_ur >= 0.0) {
                CHECK(g.values == gu.values);  // bit-equal non-conflict branch
            } else {
                // never increases the component opposing the retain direction
                double after = g.dot(gr);
                CHECK(after >= dot_ur - 1e-12);
                if (lambda == 0.0) CHECK(g.values == gu.values);
                if (lambda == 1.0) {
                    CHECK(after >= -1e-9 * g.norm() * gr.norm());
                    // idempotence
                    FlatGrad gg = surgery(g, gr, 1.0);
                    for (int i = 0; i < dim; ++i)
                        CHECK(std::abs(gg.values[i] - g.values[i]) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("per-tensor surgery applies the rule segment-wise") {
    ParamSet p;
    p.add("a", {2}, {0.0, 0.0});
    p.add("b", {2}, {0.0, 0.0});
    // segment a: conflict; segment b: aligned
    FlatGrad u = fg({1.0, -1.0, 1.0, 1.0}, p.layout_hash());
    FlatGrad r = fg({0.0, 1.0, 1.0, 1.0}, p.layout_hash());
    FlatGrad g = surgery_per_tensor(u, r, 1.0, p.layout());
    CHECK(g.values == std::vector<double>{1.0, 0.0, 1.0, 1.0});
    // whole-vector rule would treat the combined dot (= 1) as non-conflict
    CHECK(surgery(u, r, 1.0).values == u.values);
}

TEST_CASE("discriminator training leaves the generator untouched") {
    auto& f = fixture();
    diffusion::DenoiserNet gen = f.m_init.net.clone();
    uint64_t before = gen.params.values_hash();
    DiscriminatorNet disc = DiscriminatorNet::make({16, 16}, 5);
    AdamConfig cfg;
    cfg.lr = 1e-3;
    AdamOptimizer opt(disc.params, cfg);
    std::vector<std::array<double, 2>> pool(64);
    Rng pool_rng(3);
    for (auto& p : pool) p = {-2.0 + 0.3 * pool_rng.normal(), -2.0 + 0.3 * pool_rng.normal()};
    Rng rng(6);
    std::vector<double> values;
    for (int i = 0; i < 200; ++i) {
        DiscStepDiag diag =
            discriminator_step(disc, opt, gen, f.table.anchor().embedding,
                               f.table.target().embedding, pool, f.sched, 8, rng);
        values.push_back(diag.value_v);
    }
    CHECK(gen.params.values_hash() == before);

    // the critic improves over warmup: late V above early V
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 50; ++i) {
        early += values[i];
        late += values[150 + i];
    }
    CHECK(late / 50.0 > early / 50.0);
}

TEST_CASE("identical branch distributions keep the held-out critic confused") {
    auto& f = fixture();
    diffusion::DenoiserNet gen = f.m_init.net.clone();
    DiscriminatorNet disc = DiscriminatorNet::make({16, 16}, 15);
    AdamConfig cfg;
    cfg.lr = 1e-3;
    AdamOptimizer opt(disc.params, cfg);
    std::vector<std::array<double, 2>> pool(128);
    Rng pool_rng(13);
    for (auto& p : pool) p = {-2.0 + 0.3 * pool_rng.normal(), -2.0 + 0.3 * pool_rng.normal()};
    const auto& emb = f.table.anchor().embedding;
    Rng rng(16);
    for (int i = 0; i < 300; ++i)
        discriminator_step(disc, opt, gen, emb, emb, pool, f.sched, 8, rng);
    double acc = held_out_disc_accuracy(disc, gen, emb, emb, pool, f.sched, 2000, 99);
    CHECK(acc >= 0.4);
    CHECK(acc <= 0.6);
}

TEST_CASE("zero-iteration unlearning is the identity") {
    auto& f = fixture();
    UnlearnConfig cfg;
    cfg.iterations = 0;
    cfg.warmup = 0;
    cfg.pool_size = 16;
    cfg.held_out_n = 8;
    cfg.seed = 1;
    UnlearnResult res = unlearn(f.m_init, f.table, cfg);
    CHECK(res.snapshot.params_hash() == f.m_init.params_hash());
    CHECK(res.snapshot.net.params.flat_values() == f.m_init.net.params.flat_values());
    CHECK(res.log.empty());
}

TEST_CASE("unlearning runs are deterministic") {
    auto& f = fixture();
    UnlearnConfig cfg;
    cfg.iterations = 40;
    cfg.warmup = 20;
    cfg.batch = 4;
    cfg.pool_size = 64;
    cfg.held_out_n = 64;
    cfg.seed = 2;
    UnlearnResult a = unlearn(f.m_init, f.table, cfg);
    UnlearnResult b = unlearn(f.m_init, f.table, cfg);
    CHECK(a.snapshot.params_hash() == b.snapshot.params_hash());
    CHECK(a.held_out_disc_acc == b.held_out_disc_acc);
    REQUIRE(a.log.size() == b.log.size());
    auto same = [](double x, double y) {
        return (std::isnan(x) && std::isnan(y)) || x == y;
    };
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(same(a.log[i].value_v, b.log[i].value_v));
        CHECK(same(a.log[i].grad_norm, b.log[i].grad_norm));
    }

    // warmup rows carry no generator fields
    CHECK(a.log[0].phase == "warmup");
    CHECK(std::isnan(a.log[0].loss_unlearn));
    CHECK(a.log[0].conflict == -1);
    CHECK(a.log[39].phase == "adversarial");
    CHECK(std::isfinite(a.log[39].loss_unlearn));
}

TEST_CASE("every method produces an update and logs its losses") {
    auto& f = fixture();
    for (Method m : all_methods()) {
        UnlearnConfig cfg;
        cfg.method = m;
        cfg.iterations = 12;
        cfg.warmup = 6;
        cfg.batch = 4;
        cfg.pool_size = 32;
        cfg.held_out_n = 16;
        cfg.seed = 4;
        UnlearnResult res = unlearn(f.m_init, f.table, cfg);
        CAPTURE(to_string(m));
        CHECK(res.log.size() == 12);
        CHECK(std::isfinite(res.log.back().grad_norm));
        CHECK(std::isfinite(res.log.back().loss_unlearn));
        if (m == Method::doco_noretain) {
            CHECK(std::isnan(res.log.back().loss_retain));
            CHECK(std::isnan(res.conflict_fraction));
        } else {
            CHECK(std::isfinite(res.log.back().loss_retain));
            CHECK(res.conflict_fraction >= 0.0);
        }
        CHECK(res.snapshot.params_hash() != f.m_init.params_hash());
        CHECK(res.snapshot.meta.kind == to_string(m));
    }
}

TEST_CASE("numeric blowup aborts with the last good snapshot") {
    auto& f = fixture();
    UnlearnConfig cfg;
    cfg.iterations = 30;
    cfg.warmup = 0;
    cfg.batch = 4;
    cfg.pool_size = 32;
    cfg.held_out_n = 8;
    cfg.gen_lr = 1e250;  // guaranteed overflow within a few steps
    cfg.seed = 3;
    UnlearnResult res = unlearn(f.m_init, f.table, cfg);
    CHECK(res.aborted);
    CHECK(res.abort_iter >= 0);
    CHECK(res.log.size() <= 30);
    for (double v : res.snapshot.net.params.flat_values()) CHECK(std::isfinite(v));
}

TEST_CASE("run log csv layout") {
    std::vector<RunLogRow> log(2);
    log[0].iter = 0;
    log[0].phase = "warmup";
    log[0].value_v = -1.25;
    log[0].disc_acc = 0.5;
    log[1].iter = 1;
    log[1].phase = "adversarial";
    log[1].loss_unlearn = 0.75;
    log[1].loss_retain = 1.5;
    log[1].value_v = -1.0;
    log[1].disc_acc = 0.75;
    log[1].conflict = 1;
    log[1].grad_norm = 0.125;
    auto path = std::filesystem::temp_directory_path() / "uforge_runlog_test.csv";
    write_run_log_csv(path.string(), log);
    std::ifstream fin(path);
    std::string line;
    std::getline(fin, line);
    CHECK(line == "iter,phase,L_u,L_r,V,disc_acc,conflict,grad_norm");
    std::getline(fin, line);
    CHECK(line == "0,warmup,,,-1.25,0.5,,");
    std::getline(fin, line);
    CHECK(line == "1,adversarial,0.75,1.5,-1,0.75,1,0.125");
    std::filesystem::remove(path);
}

TEST_CASE("unlearn validates configuration") {
    auto& f = fixture();
    UnlearnConfig cfg;
    cfg.warmup = 50;
    cfg.iterations = 20;
    CHECK_THROWS_AS(unlearn(f.m_init, f.table, cfg), ConfigError);
    cfg = UnlearnConfig{};
    cfg.retain_ids = {"star"};
    cfg.iterations = 2;
    cfg.warmup = 0;
    cfg.pool_size = 8;
    CHECK_THROWS_AS(unlearn(f.m_init, f.table, cfg), ConfigError);
}
