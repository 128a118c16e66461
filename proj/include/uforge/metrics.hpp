#pragma once

// Distribution-level evaluation: Gaussian moment fits, the closed-form 2-D
// Frechet distance, ground-truth-classifier rates, a Gaussian-kernel MMD,
// and the before/after metrics record for a pair of model snapshots.

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "uforge/concepts.hpp"
#include "uforge/diffusion.hpp"

namespace uforge::eval {

struct GaussianFit {
    std::array<double, 2> mean{0.0, 0.0};
    std::array<std::array<double, 2>, 2> cov{{{0.0, 0.0}, {0.0, 0.0}}};
};

// Sample mean and unbiased covariance, symmetrized; eigenvalues in
// [-1e-10, 0) are clipped up to 0, anything lower is an error.
GaussianFit fit_gaussian(const concepts::SampleSet& s);

// d^2 = ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the 2x2 PSD
// closed form Tr((Sa Sb)^(1/2)) = sqrt(Tr(Sa Sb) + 2 sqrt(det Sa det Sb)).
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

// Per-concept classification fractions over the table's class set (synonyms
// excluded), in table order. Fractions partition the sample set.
struct RateTable {
    std::vector<std::pair<std::string, double>> rates;
    double of(const std::string& id) const;
};

RateTable concept_rates(const concepts::SampleSet& s, const concepts::ConceptTable& table);

// Biased (V-statistic) squared MMD with Gaussian kernel, returned as its
// square root. bandwidth <= 0 selects the median pairwise distance over a
// strided pooled subsample of at most 2048 points.
double mmd(const concepts::SampleSet& a, const concepts::SampleSet& b,
           double bandwidth = 0.0);
double median_bandwidth(const concepts::SampleSet& a, const concepts::SampleSet& b);

// ---------------------------------------------------------------------------
// Snapshot evaluation
// ---------------------------------------------------------------------------

struct ConceptMetrics {
    std::string concept_id;
    std::string role;
    // For the ood-synonym, self_rate reports the target's rate: its
    // generative identity is the target distribution.
    double self_rate = 0.0;
    double target_rate = 0.0;
    double anchor_rate = 0.0;
    double frechet_to_gt = 0.0;
    double frechet_to_anchor_gt = 0.0;
    double frechet_drift_vs_init = 0.0;
    double mmd_to_anchor = 0.0;
};

struct MetricsRecord {
    std::vector<ConceptMetrics> per_concept;  // table order
    double disc_confusion_acc = std::numeric_limits<double>::quiet_NaN();
    std::string snapshot_id;
    std::string baseline_id;
    int n = 0;
    uint64_t seed = 0;

    const ConceptMetrics& of(const std::string& id) const;

    std::string to_json_string() const;
    static MetricsRecord from_json_string(const std::string& text);
    void write_csv(const std::string& path) const;
};

struct EvaluateOptions {
    int n = 4000;
    uint64_t seed = 101;
    // Final held-out discriminator accuracy from the producing run, when known.
    double disc_confusion = std::numeric_limits<double>::quiet_NaN();
};

// Samples every concept condition from `current` (and from `baseline` for
// drift), then scores rates, Frechet distances and MMD against ground truth.
MetricsRecord evaluate(const diffusion::ModelSnapshot& current,
                       const diffusion::ModelSnapshot& baseline,
                       const concepts::ConceptTable& table,
                       const EvaluateOptions& opt);

}  // namespace uforge::eval
