#include "uforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace uforge::eval {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Gaussian fit
// ---------------------------------------------------------------------------

namespace {

// Eigenvalues of a symmetric 2x2 matrix.
std::array<double, 2> sym_eigenvalues(const std::array<std::array<double, 2>, 2>& m) {
    double tr = m[0][0] + m[1][1];
    double det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    return {tr / 2.0 - disc, tr / 2.0 + disc};
}

}  // namespace

GaussianFit fit_gaussian(const concepts::SampleSet& s) {
    size_t n = s.points.size();
    if (n < 3) throw DataError("fit_gaussian: need at least 3 points");
    GaussianFit fit;
    for (const auto& p : s.points) {
        fit.mean[0] += p[0];
        fit.mean[1] += p[1];
    }
    fit.mean[0] /= static_cast<double>(n);
    fit.mean[1] /= static_cast<double>(n);
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& p : s.points) {
        double dx = p[0] - fit.mean[0];
        double dy = p[1] - fit.mean[1];
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    double denom = static_cast<double>(n - 1);
    fit.cov = {{{sxx / denom, sxy / denom}, {sxy / denom, syy / denom}}};

    auto eig = sym_eigenvalues(fit.cov);
    if (eig[0] < -1e-10)
        throw NumericError("fit_gaussian: covariance not PSD");
    if (eig[0] < 0.0) {  // clip tiny negative eigenvalue up to zero
        fit.cov[0][0] -= eig[0];
        fit.cov[1][1] -= eig[0];
    }
    return fit;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
    for (const auto& f : {a, b}) {
        if (std::abs(f.cov[0][1] - f.cov[1][0]) > 1e-12)
            throw NumericError("frechet_distance: covariance not symmetric");
        if (sym_eigenvalues(f.cov)[0] < -1e-10)
            throw NumericError("frechet_distance: covariance not PSD");
    }
    double dx = a.mean[0] - b.mean[0];
    double dy = a.mean[1] - b.mean[1];
    double mean_term = dx * dx + dy * dy;

    double tr_a = a.cov[0][0] + a.cov[1][1];
    double tr_b = b.cov[0][0] + b.cov[1][1];
    // M = Sa * Sb
    double m00 = a.cov[0][0] * b.cov[0][0] + a.cov[0][1] * b.cov[1][0];
    double m11 = a.cov[1][0] * b.cov[0][1] + a.cov[1][1] * b.cov[1][1];
    double tr_m = m00 + m11;
    double det_a = a.cov[0][0] * a.cov[1][1] - a.cov[0][1] * a.cov[1][0];
    double det_b = b.cov[0][0] * b.cov[1][1] - b.cov[0][1] * b.cov[1][0];
    double det_prod = std::max(0.0, det_a) * std::max(0.0, det_b);
    double tr_sqrt = std::sqrt(std::max(0.0, tr_m + 2.0 * std::sqrt(det_prod)));

    double d2 = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    return std::sqrt(std::max(0.0, d2));
}

// ---------------------------------------------------------------------------
// Rates
// ---------------------------------------------------------------------------

double RateTable::of(const std::string& id) const {
    for (const auto& [name, rate] : rates)
        if (name == id) return rate;
    throw DataError("rate table: no concept named " + id);
}

RateTable concept_rates(const concepts::SampleSet& s, const concepts::ConceptTable& table) {
    if (s.points.empty()) throw DataError("concept_rates: empty sample set");
    RateTable out;
    std::vector<int> class_index;  // table index per class slot
    for (size_t i = 0; i < table.concepts.size(); ++i) {
        if (table.concepts[i].role == concepts::Role::ood_synonym) continue;
        class_index.push_back(static_cast<int>(i));
        out.rates.emplace_back(table.concepts[i].id, 0.0);
    }
    std::vector<long> counts(class_index.size(), 0);
    for (const auto& p : s.points) {
        std::string id = concepts::bayes_classify(table, p[0], p[1]);
        for (size_t k = 0; k < class_index.size(); ++k) {
            if (table.concepts[class_index[k]].id == id) {
                ++counts[k];
                break;
            }
        }
    }
    double n = static_cast<double>(s.points.size());
    for (size_t k = 0; k < counts.size(); ++k)
        out.rates[k].second = static_cast<double>(counts[k]) / n;
    return out;
}

// ---------------------------------------------------------------------------
// MMD
// ---------------------------------------------------------------------------

namespace {

double sq_dist(const std::array<double, 2>& p, const std::array<double, 2>& q) {
    double dx = p[0] - q[0];
    double dy = p[1] - q[1];
    return dx * dx + dy * dy;
}

// Mean kernel value over all pairs a x b. Row sums go into fixed slots so
// the reduction order is independent of threading.
double mean_kernel(const std::vector<std::array<double, 2>>& a,
                   const std::vector<std::array<double, 2>>& b, double gamma) {
    std::vector<double> row_sums(a.size(), 0.0);
    int tasks = std::min<int>(worker_count() * 4, static_cast<int>(a.size()));
    parallel_tasks(tasks, [&](int task) {
        size_t lo = a.size() * task / tasks;
        size_t hi = a.size() * (task + 1) / tasks;
        for (size_t i = lo; i < hi; ++i) {
            double acc = 0.0;
            for (const auto& q : b) acc += std::exp(-gamma * sq_dist(a[i], q));
            row_sums[i] = acc;
        }
    });
    double total = 0.0;
    for (double v : row_sums) total += v;
    return total / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

}  // namespace

double median_bandwidth(const concepts::SampleSet& a, const concepts::SampleSet& b) {
    // strided pooled subsample, at most ~2048 points
    std::vector<std::array<double, 2>> pool;
    for (const auto* s : {&a, &b}) {
        size_t stride = std::max<size_t>(1, s->points.size() / 1024);
        for (size_t i = 0; i < s->points.size(); i += stride) pool.push_back(s->points[i]);
    }
    std::vector<double> dists;
    dists.reserve(pool.size() * (pool.size() - 1) / 2);
    for (size_t i = 0; i < pool.size(); ++i)
        for (size_t j = i + 1; j < pool.size(); ++j)
            dists.push_back(std::sqrt(sq_dist(pool[i], pool[j])));
    if (dists.empty()) return 1.0;
    size_t mid = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
    double med = dists[mid];
    return med > 0.0 ? med : 1.0;  // degenerate all-equal fallback
}

double mmd(const concepts::SampleSet& a, const concepts::SampleSet& b, double bandwidth) {
    if (a.points.empty() || b.points.empty())
        throw DataError("mmd: empty sample set");
    // canonical orientation makes mmd(a,b) and mmd(b,a) bitwise equal
    const concepts::SampleSet* pa = &a;
    const concepts::SampleSet* pb = &b;
    if (pb->points < pa->points) std::swap(pa, pb);
    double bw = bandwidth > 0.0 ? bandwidth : median_bandwidth(*pa, *pb);
    double gamma = 1.0 / (2.0 * bw * bw);
    double kaa = mean_kernel(pa->points, pa->points, gamma);
    double kbb = mean_kernel(pb->points, pb->points, gamma);
    double kab = mean_kernel(pa->points, pb->points, gamma);
    double m2 = kaa + kbb - 2.0 * kab;
    return std::sqrt(std::max(0.0, m2));
}

// ---------------------------------------------------------------------------
// Snapshot evaluation
// ---------------------------------------------------------------------------

const ConceptMetrics& MetricsRecord::of(const std::string& id) const {
    for (const auto& m : per_concept)
        if (m.concept_id == id) return m;
    throw DataError("metrics record: no concept named " + id);
}

MetricsRecord evaluate(const diffusion::ModelSnapshot& current,
                       const diffusion::ModelSnapshot& baseline,
                       const concepts::ConceptTable& table,
                       const EvaluateOptions& opt) {
    if (opt.n < 3) throw ConfigError("evaluate: n must be >= 3");
    if (current.table_hash != baseline.table_hash ||
        current.table_hash != table.content_hash())
        throw ConfigError("evaluate: snapshots reference different concept tables");
    if (current.schedule.content_hash() != baseline.schedule.content_hash())
        throw ConfigError("evaluate: snapshots reference different schedules");

    const auto& target = table.target();
    const auto& anchor = table.anchor();
    MetricsRecord rec;
    rec.snapshot_id = current.id();
    rec.baseline_id = baseline.id();
    rec.n = opt.n;
    rec.seed = opt.seed;
    rec.disc_confusion_acc = opt.disc_confusion;

    // ground-truth reference sets, one per concept
    std::vector<concepts::SampleSet> gt;
    for (size_t i = 0; i < table.concepts.size(); ++i)
        gt.push_back(concepts::sample_ground_truth(
            table.concepts[i], opt.n, Rng::derive(opt.seed, 2000 + i)));
    const concepts::SampleSet& anchor_gt = gt[table.index_of(anchor.id)];

    for (size_t i = 0; i < table.concepts.size(); ++i) {
        const auto& c = table.concepts[i];
        concepts::SampleSet cur = diffusion::sample(
            current.net, c.embedding, opt.n, current.schedule,
            Rng::derive(opt.seed, 10 + i), c.id, current.id());
        concepts::SampleSet base = diffusion::sample(
            baseline.net, c.embedding, opt.n, baseline.schedule,
            Rng::derive(opt.seed, 1000 + i), c.id, baseline.id());

        RateTable rates = concept_rates(cur, table);
        ConceptMetrics m;
        m.concept_id = c.id;
        m.role = concepts::to_string(c.role);
        m.target_rate = rates.of(target.id);
        m.anchor_rate = rates.of(anchor.id);
        m.self_rate = c.role == concepts::Role::ood_synonym ? m.target_rate
                                                            : rates.of(c.id);
        GaussianFit fit_cur = fit_gaussian(cur);
        m.frechet_to_gt = frechet_distance(fit_cur, fit_gaussian(gt[i]));
        m.frechet_to_anchor_gt = frechet_distance(fit_cur, fit_gaussian(anchor_gt));
        m.frechet_drift_vs_init = frechet_distance(fit_cur, fit_gaussian(base));
        m.mmd_to_anchor = mmd(cur, anchor_gt);
        rec.per_concept.push_back(std::move(m));
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string MetricsRecord::to_json_string() const {
    json doc;
    doc["snapshot_id"] = snapshot_id;
    doc["baseline_id"] = baseline_id;
    doc["n"] = n;
    doc["seed"] = seed;
    if (std::isfinite(disc_confusion_acc)) doc["disc_confusion_acc"] = disc_confusion_acc;
    doc["per_concept"] = json::array();
    for (const auto& m : per_concept) {
        doc["per_concept"].push_back({{"concept", m.concept_id},
                                      {"role", m.role},
                                      {"self_rate", m.self_rate},
                                      {"target_rate", m.target_rate},
                                      {"anchor_rate", m.anchor_rate},
                                      {"frechet_to_gt", m.frechet_to_gt},
                                      {"frechet_to_anchor_gt", m.frechet_to_anchor_gt},
                                      {"frechet_drift_vs_init", m.frechet_drift_vs_init},
                                      {"mmd_to_anchor", m.mmd_to_anchor}});
    }
    return doc.dump(2) + "\n";
}

MetricsRecord MetricsRecord::from_json_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("metrics record: ") + e.what());
    }
    MetricsRecord rec;
    rec.snapshot_id = doc.at("snapshot_id").get<std::string>();
    rec.baseline_id = doc.at("baseline_id").get<std::string>();
    rec.n = doc.at("n").get<int>();
    rec.seed = doc.at("seed").get<uint64_t>();
    if (doc.contains("disc_confusion_acc"))
        rec.disc_confusion_acc = doc.at("disc_confusion_acc").get<double>();
    for (const auto& jm : doc.at("per_concept")) {
        ConceptMetrics m;
        m.concept_id = jm.at("concept").get<std::string>();
        m.role = jm.at("role").get<std::string>();
        m.self_rate = jm.at("self_rate").get<double>();
        m.target_rate = jm.at("target_rate").get<double>();
        m.anchor_rate = jm.at("anchor_rate").get<double>();
        m.frechet_to_gt = jm.at("frechet_to_gt").get<double>();
        m.frechet_to_anchor_gt = jm.at("frechet_to_anchor_gt").get<double>();
        m.frechet_drift_vs_init = jm.at("frechet_drift_vs_init").get<double>();
        m.mmd_to_anchor = jm.at("mmd_to_anchor").get<double>();
        rec.per_concept.push_back(std::move(m));
    }
    return rec;
}

void MetricsRecord::write_csv(const std::string& path) const {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("metrics record: cannot open " + tmp);
        f << "concept,role,self_rate,target_rate,anchor_rate,frechet_to_gt,"
             "frechet_to_anchor_gt,frechet_drift_vs_init,mmd_to_anchor\n";
        char buf[64];
        auto cell = [&](double v) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            f << "," << buf;
        };
        for (const auto& m : per_concept) {
            f << m.concept_id << "," << m.role;
            cell(m.self_rate);
            cell(m.target_rate);
            cell(m.anchor_rate);
            cell(m.frechet_to_gt);
            cell(m.frechet_to_anchor_gt);
            cell(m.frechet_drift_vs_init);
            cell(m.mmd_to_anchor);
            f << "\n";
        }
        if (!f) throw IoError("metrics record: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace uforge::eval
