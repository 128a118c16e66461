#include "doctest.h"

#include <cmath>

#include "uforge/metrics.hpp"

using namespace uforge;
using namespace uforge::eval;

namespace {

using Mat2 = std::array<std::array<double, 2>, 2>;

// Test-side eigendecomposition oracle for the Frechet trace term.
Mat2 sym_sqrt(const Mat2& m) {
    double a = m[0][0], b = m[0][1], c = m[1][1];
    if (std::abs(b) < 1e-300) {
        return {{{std::sqrt(std::max(0.0, a)), 0.0},
                 {0.0, std::sqrt(std::max(0.0, c))}}};
    }
    double tr = a + c, det = a * c - b * b;
    double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    double l1 = tr / 2.0 - disc, l2 = tr / 2.0 + disc;
    Mat2 out{{{0.0, 0.0}, {0.0, 0.0}}};
    for (double l : {l1, l2}) {
        double vx = b, vy = l - a;
        double norm = std::sqrt(vx * vx + vy * vy);
        vx /= norm;
        vy /= norm;
        double s = std::sqrt(std::max(0.0, l));
        out[0][0] += s * vx * vx;
        out[0][1] += s * vx * vy;
        out[1][0] += s * vy * vx;
        out[1][1] += s * vy * vy;
    }
    return out;
}

Mat2 matmul2(const Mat2& x, const Mat2& y) {
    Mat2 out{{{0.0, 0.0}, {0.0, 0.0}}};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) out[i][j] += x[i][k] * y[k][j];
    return out;
}

double oracle_frechet(const GaussianFit& a, const GaussianFit& b) {
    double dx = a.mean[0] - b.mean[0], dy = a.mean[1] - b.mean[1];
    Mat2 s = sym_sqrt(a.cov);
    Mat2 inner = matmul2(matmul2(s, b.cov), s);
    double tr = inner[0][0] + inner[1][1];
    double det = inner[0][0] * inner[1][1] - inner[0][1] * inner[1][0];
    double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    double tr_sqrt = std::sqrt(std::max(0.0, tr / 2.0 - disc)) +
                     std::sqrt(std::max(0.0, tr / 2.0 + disc));
    double d2 = dx * dx + dy * dy + (a.cov[0][0] + a.cov[1][1]) +
                (b.cov[0][0] + b.cov[1][1]) - 2.0 * tr_sqrt;
    return std::sqrt(std::max(0.0, d2));
}

concepts::SampleSet set_of(std::vector<std::array<double, 2>> pts) {
    concepts::SampleSet s;
    s.points = std::move(pts);
    s.labels.assign(s.points.size(), "x");
    s.provenance = "test";
    return s;
}

}  // namespace

TEST_CASE("fit_gaussian degenerate and sampled cases") {
    auto s = set_of({{1.5, -2.0}, {1.5, -2.0}, {1.5, -2.0}, {1.5, -2.0}});
    GaussianFit f = fit_gaussian(s);
    CHECK(f.mean[0] == 1.5);
    CHECK(f.mean[1] == -2.0);
    CHECK(f.cov[0][0] == 0.0);
    CHECK(f.cov[1][1] == 0.0);
    CHECK(f.cov[0][1] == f.cov[1][0]);

    CHECK_THROWS_AS(fit_gaussian(set_of({{0, 0}, {1, 1}})), DataError);

    auto table = concepts::default_table(7);
    const int n = 100000;
    auto draws = concepts::sample_ground_truth(table.by_id("star"), n, 42);
    GaussianFit g = fit_gaussian(draws);
    double se = 0.3 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(g.mean[0] - 2.0) < 3 * se);
    CHECK(std::abs(g.mean[1] - 2.0) < 3 * se);
    CHECK(g.cov[0][0] == doctest::Approx(0.09).epsilon(0.05));
    CHECK(g.cov[1][1] == doctest::Approx(0.09).epsilon(0.05));
    CHECK(g.cov[0][1] == g.cov[1][0]);
}

TEST_CASE("frechet closed forms") {
    GaussianFit a, b;
    a.cov = {{{1.0, 0.0}, {0.0, 1.0}}};
    b = a;
    CHECK(frechet_distance(a, a) == 0.0);

    b.mean = {1.0, 0.0};
    CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-12));

    b.mean = {0.0, 0.0};
    b.cov = {{{4.0, 0.0}, {0.0, 4.0}}};
    CHECK(frechet_distance(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("frechet matches the eigendecomposition oracle on random PSD pairs") {
    Rng rng(314);
    for (int trial = 0; trial < 200; ++trial) {
        auto rand_fit = [&]() {
            GaussianFit f;
            f.mean = {rng.normal(), rng.normal()};
            double r00 = rng.normal(), r01 = rng.normal();
            double r10 = rng.normal(), r11 = rng.normal();
            // R^T R + delta I
            f.cov[0][0] = r00 * r00 + r10 * r10 + 1e-6;
            f.cov[0][1] = r00 * r01 + r10 * r11;
            f.cov[1][0] = f.cov[0][1];
            f.cov[1][1] = r01 * r01 + r11 * r11 + 1e-6;
            return f;
        };
        GaussianFit a = rand_fit(), b = rand_fit();
        double d = frechet_distance(a, b);
        CHECK(d == doctest::Approx(oracle_frechet(a, b)).epsilon(1e-9));
        CHECK(frechet_distance(b, a) == doctest::Approx(d).epsilon(1e-12));
        CHECK(d >= 0.0);
    }
}

TEST_CASE("concept rates: peaks, partitions, ground truth accuracy") {
    auto table = concepts::default_table(7);
    auto at_star = set_of(std::vector<std::array<double, 2>>(32, {2.0, 2.0}));
    RateTable r1 = concept_rates(at_star, table);
    CHECK(r1.of("star") == 1.0);
    CHECK(r1.of("blob") == 0.0);

    auto anchor_draws = concepts::sample_ground_truth(table.by_id("blob"), 10000, 88);
    CHECK(concept_rates(anchor_draws, table).of("blob") >= 0.99);

    // uniform box partition; power-of-two count keeps the fraction sum exact
    Rng rng(5);
    std::vector<std::array<double, 2>> pts(4096);
    for (auto& p : pts) p = {rng.uniform(-6, 6), rng.uniform(-6, 6)};
    RateTable r2 = concept_rates(set_of(std::move(pts)), table);
    double sum = 0.0;
    for (auto& [id, rate] : r2.rates) {
        CHECK(rate > 0.1);  // four symmetric cells
        sum += rate;
    }
    CHECK(sum == 1.0);
    // synonyms are not part of the class set
    CHECK_THROWS_AS(r2.of("starry"), DataError);
}

TEST_CASE("mmd identities and hand-computed value") {
    auto a = set_of({{0.0, 0.0}, {1.0, 1.0}, {2.0, -1.0}});
    CHECK(mmd(a, a) <= 1e-12);

    auto p = set_of({{0.0, 0.0}});
    auto q = set_of({{1.0, 0.0}});
    double m = mmd(p, q, 1.0);
    CHECK(m * m == doctest::Approx(2.0 - 2.0 * std::exp(-0.5)).epsilon(1e-12));

    auto table = concepts::default_table(7);
    auto s1 = concepts::sample_ground_truth(table.by_id("star"), 400, 1);
    auto s2 = concepts::sample_ground_truth(table.by_id("blob"), 400, 2);
    CHECK(mmd(s1, s2) == mmd(s2, s1));
    CHECK(mmd(s1, s2) >= 0.0);

    // translation invariance
    auto shift = [](concepts::SampleSet s, double dx, double dy) {
        for (auto& pt : s.points) {
            pt[0] += dx;
            pt[1] += dy;
        }
        return s;
    };
    double base = mmd(s1, s2, 1.3);
    double moved = mmd(shift(s1, 10.5, -3.25), shift(s2, 10.5, -3.25), 1.3);
    CHECK(std::abs(base - moved) < 1e-12);
}

TEST_CASE("evaluate: identical snapshots drift only by sampling noise") {
    auto table = concepts::default_table(7);
    auto sched = diffusion::build_schedule(40);
    diffusion::TrainConfig cfg;
    cfg.steps = 500;
    cfg.batch = 64;
    cfg.hidden = {24, 24};
    cfg.seed = 9;
    auto snap = diffusion::train_base(table, sched, cfg);

    EvaluateOptions opt;
    opt.n = 600;
    opt.seed = 77;
    MetricsRecord rec = evaluate(snap, snap, table, opt);
    REQUIRE(rec.per_concept.size() == table.concepts.size());
    for (const auto& m : rec.per_concept) {
        CHECK(m.frechet_drift_vs_init >= 0.0);
        CHECK(m.frechet_drift_vs_init < 0.2);  // small-n noise floor
    }
    CHECK(rec.snapshot_id == rec.baseline_id);

    MetricsRecord again = evaluate(snap, snap, table, opt);
    CHECK(again.to_json_string() == rec.to_json_string());
}

TEST_CASE("evaluate rejects mismatched tables") {
    auto table = concepts::default_table(7);
    auto other = concepts::default_table(8);
    auto sched = diffusion::build_schedule(20);
    diffusion::TrainConfig cfg;
    cfg.steps = 10;
    cfg.batch = 8;
    cfg.hidden = {6};
    auto snap = diffusion::train_base(table, sched, cfg);
    EvaluateOptions opt;
    opt.n = 50;
    CHECK_THROWS_AS(evaluate(snap, snap, other, opt), ConfigError);
}

TEST_CASE("metrics record round trips through json") {
    MetricsRecord rec;
    rec.snapshot_id = "abc";
    rec.baseline_id = "def";
    rec.n = 123;
    rec.seed = 9;
    rec.disc_confusion_acc = 0.512345678901234567;
    ConceptMetrics m;
    m.concept_id = "star";
    m.role = "target";
    m.self_rate = 0.123456789012345678;
    m.target_rate = 0.9;
    m.anchor_rate = 1.0 / 3.0;
    m.frechet_to_gt = 0.05;
    m.frechet_to_anchor_gt = 5.0;
    m.frechet_drift_vs_init = 1e-17;
    m.mmd_to_anchor = 0.25;
    rec.per_concept.push_back(m);

    MetricsRecord back = MetricsRecord::from_json_string(rec.to_json_string());
    CHECK(back.of("star").anchor_rate == m.anchor_rate);
    CHECK(back.of("star").frechet_drift_vs_init == m.frechet_drift_vs_init);
    CHECK(back.disc_confusion_acc == rec.disc_confusion_acc);
    CHECK(back.to_json_string() == rec.to_json_string());
}
