#pragma once

// The unlearning engine. A timestep-conditioned MLP critic plays a
// membership-inference attacker over one-step-denoised points; adversarial
// updates align the target concept's denoising domain with the anchor's,
// while gradient surgery keeps the retaining objective out of harm's way.
// The pairwise noise-matching baseline used for ablations lives here too.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "uforge/common.hpp"
#include "uforge/concepts.hpp"
#include "uforge/diffusion.hpp"
#include "uforge/numgrad.hpp"

namespace uforge::doco {

// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before any log.
inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// Discriminator: input row = [x_{t-1} (2) | t-embedding (16)], output = one
// raw logit. Squashing happens at the loss site.
// ---------------------------------------------------------------------------

struct DiscriminatorNet {
    numgrad::ParamSet params;
    numgrad::MlpArch arch;
    int t_embed_dim = 16;

    static DiscriminatorNet make(const std::vector<int>& hidden, uint64_t seed);
    DiscriminatorNet clone() const;

    numgrad::Tensor forward(const numgrad::Tensor& x_prev, int t) const;
};

// ---------------------------------------------------------------------------
// Methods & configuration
// ---------------------------------------------------------------------------

enum class Method { doco_cp, doco_l2retain, doco_noretain, pairwise_l2 };

Method method_from_string(const std::string& s);
std::string to_string(Method m);
const std::vector<Method>& all_methods();  // canonical report order

struct UnlearnConfig {
    Method method = Method::doco_cp;
    int iterations = 2000;
    int warmup = 1000;
    int batch = 8;
    double gen_lr = 1e-4;
    double disc_lr = 1e-4;
    double lambda = 1.0;
    uint64_t seed = 1;
    std::vector<std::string> retain_ids;  // empty -> default_retain_set
    int pool_size = 4096;
    int snapshot_every = 0;  // 0 disables periodic snapshots
    std::vector<int> disc_hidden = {64, 64};
    bool per_tensor_surgery = false;  // escape hatch; whole-vector by default
    int held_out_n = 2000;

    void validate() const;
};

// Anchor plus every retain-role concept; never the target or a synonym.
std::vector<std::string> default_retain_set(const concepts::ConceptTable& table);

// ---------------------------------------------------------------------------
// Adversarial objective
// ---------------------------------------------------------------------------

// V = mean log sigma(D(x_prev_anchor)) + mean log(1 - sigma(D(x_prev_target))).
numgrad::Tensor adversarial_value(const DiscriminatorNet& disc,
                                  const numgrad::Tensor& x_prev_anchor,
                                  const numgrad::Tensor& x_prev_target, int t);

// One adversarial draw: pool points noised to a shared timestep. Both
// denoising branches start from this same x_t.
struct AdvBatch {
    numgrad::Tensor x_t;  // (B, 2) constant
    int t = 1;
};

// Consumes, in order: B pool indices, one t, 2B normals.
AdvBatch make_adv_batch(const std::vector<std::array<double, 2>>& pool,
                        const diffusion::NoiseSchedule& sched, int batch, Rng& rng);

struct DiscStepDiag {
    double value_v = 0.0;
    double batch_acc = 0.0;
};

// Ascends V in the discriminator parameters; the generator stays frozen
// (its branches are evaluated without gradient tracking).
DiscStepDiag discriminator_step(DiscriminatorNet& disc, numgrad::AdamOptimizer& opt,
                                const diffusion::DenoiserNet& gen,
                                const std::vector<double>& anchor_embed,
                                const std::vector<double>& target_embed,
                                const std::vector<std::array<double, 2>>& pool,
                                const diffusion::NoiseSchedule& sched, int batch,
                                Rng& rng);

struct GradResult {
    numgrad::FlatGrad grad;
    double loss = 0.0;
};

// Non-saturating generator objective: L_u = -mean log sigma(D(x_{t-1}(c*))).
// The discriminator is frozen; gradients reach the denoiser through the
// target-condition denoise step only.
GradResult generator_unlearn_grad(const diffusion::DenoiserNet& gen,
                                  const DiscriminatorNet& disc,
                                  const std::vector<double>& target_embed,
                                  const std::vector<std::array<double, 2>>& pool,
                                  const diffusion::NoiseSchedule& sched, int batch,
                                  Rng& rng);

// Ground-truth draws restricted to the retain set; per item one concept
// pick plus one mixture draw.
struct RetainBatch {
    std::vector<std::array<double, 2>> x0;
    std::vector<std::string> ids;
    std::vector<const std::vector<double>*> embeds;
};

RetainBatch make_retain_batch(const concepts::ConceptTable& table,
                              const std::vector<std::string>& retain_ids, int batch,
                              Rng& rng);

// Standard noise-prediction loss on ground-truth draws from the retain set.
GradResult generator_retain_grad(const diffusion::DenoiserNet& gen,
                                 const concepts::ConceptTable& table,
                                 const std::vector<std::string>& retain_ids,
                                 const diffusion::NoiseSchedule& sched, int batch,
                                 Rng& rng);

// Noise-matching baseline: mean ||eps(x_t, c*) - stopgrad(eps(x_t, c))||^2.
GradResult generator_pairwise_grad(const diffusion::DenoiserNet& gen,
                                   const std::vector<double>& anchor_embed,
                                   const std::vector<double>& target_embed,
                                   const std::vector<std::array<double, 2>>& pool,
                                   const diffusion::NoiseSchedule& sched, int batch,
                                   Rng& rng);

// ---------------------------------------------------------------------------
// Gradient surgery: keep the unlearning gradient when it does not oppose the
// retaining gradient, otherwise project the conflicting component off.
// ---------------------------------------------------------------------------

numgrad::FlatGrad surgery(const numgrad::FlatGrad& g_unlearn,
                          const numgrad::FlatGrad& g_retain, double lambda);

// Same rule applied independently within each parameter's layout segment.
numgrad::FlatGrad surgery_per_tensor(
    const numgrad::FlatGrad& g_unlearn, const numgrad::FlatGrad& g_retain,
    double lambda, const std::vector<numgrad::ParamSet::LayoutEntry>& layout);

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

struct RunLogRow {
    long iter = 0;
    std::string phase;  // "warmup" | "adversarial"
    double loss_unlearn = std::numeric_limits<double>::quiet_NaN();
    double loss_retain = std::numeric_limits<double>::quiet_NaN();
    double value_v = std::numeric_limits<double>::quiet_NaN();
    double disc_acc = std::numeric_limits<double>::quiet_NaN();
    int conflict = -1;  // -1 n/a
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
};

struct UnlearnResult {
    diffusion::ModelSnapshot snapshot;
    std::vector<RunLogRow> log;
    double held_out_disc_acc = std::numeric_limits<double>::quiet_NaN();
    double conflict_fraction = std::numeric_limits<double>::quiet_NaN();
    bool aborted = false;
    long abort_iter = -1;
};

using SnapshotCallback =
    std::function<void(long iter, const diffusion::ModelSnapshot&)>;

// Copies m_init, pre-generates the anchor sample pool from it, then runs
// cfg.iterations steps: warmup trains the discriminator only; afterwards
// each iteration takes one discriminator step and one generator step whose
// gradient is the configured method's. A numeric abort returns the partial
// log plus the last good snapshot.
UnlearnResult unlearn(const diffusion::ModelSnapshot& m_init,
                      const concepts::ConceptTable& table, const UnlearnConfig& cfg,
                      const SnapshotCallback& on_snapshot = nullptr);

// Branch-classification accuracy of the discriminator on fresh draws.
double held_out_disc_accuracy(const DiscriminatorNet& disc,
                              const diffusion::DenoiserNet& gen,
                              const std::vector<double>& anchor_embed,
                              const std::vector<double>& target_embed,
                              const std::vector<std::array<double, 2>>& pool,
                              const diffusion::NoiseSchedule& sched, int n,
                              uint64_t seed);

// Columns: iter,phase,L_u,L_r,V,disc_acc,conflict,grad_norm. Undefined
// entries are empty cells.
void write_run_log_csv(const std::string& path, const std::vector<RunLogRow>& log);

}  // namespace uforge::doco
