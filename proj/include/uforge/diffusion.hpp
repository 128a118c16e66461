#pragma once

// Conditional point-space DDPM machinery: cosine noise schedule, forward
// noising, an MLP noise predictor conditioned on (t, concept embedding),
// the noise-prediction training loss, a deterministic one-step denoise and
// full ancestral sampling with it.

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "uforge/common.hpp"
#include "uforge/concepts.hpp"
#include "uforge/numgrad.hpp"

namespace uforge::diffusion {

// ---------------------------------------------------------------------------
// Noise schedule: cumulative signal coefficients alpha_bar[0..T] with
// alpha_bar[0] = 1, strictly decreasing, alpha_bar[T] < 0.01.
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar;

    uint64_t content_hash() const;
};

// Cosine cumulative schedule with offset s = 0.008, renormalized so that
// alpha_bar[0] is exactly 1.
NoiseSchedule build_schedule(int T);

// Bound for the predicted clean point inside denoise_step. alpha_bar[T] is
// ~1e-33, so an unclipped inversion at t = T multiplies the predictor's
// error by ~1e16; legitimate predictions live well inside this box.
inline constexpr double kX0Clip = 10.0;

// Sinusoidal embedding, dim must be even; frequencies span 1 .. 1e-4.
std::vector<double> timestep_embedding(int t, int dim);

// ---------------------------------------------------------------------------
// Denoiser network: input row = [x (2) | t-embedding (16) | concept (8)].
// ---------------------------------------------------------------------------

struct DenoiserNet {
    numgrad::ParamSet params;
    numgrad::MlpArch arch;
    int t_embed_dim = 16;
    int c_embed_dim = concepts::kEmbeddingDim;

    static DenoiserNet make(const std::vector<int>& hidden, uint64_t seed);
    DenoiserNet clone() const;

    int input_dim() const { return 2 + t_embed_dim + c_embed_dim; }

    // Forward on a prebuilt input matrix (B, input_dim).
    numgrad::Tensor forward_rows(const numgrad::Tensor& input) const;
    // Forward for a batch sharing one timestep and one concept embedding.
    numgrad::Tensor forward(const numgrad::Tensor& x, int t,
                            const std::vector<double>& c_embed) const;
};

// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.
// t ranges over [0, T]; t = 0 is the identity endpoint kept for tests.
numgrad::Tensor add_noise(const numgrad::Tensor& x0, int t,
                          const numgrad::Tensor& eps, const NoiseSchedule& sched);

// Deterministic one-step denoise to x_{t-1}; differentiable w.r.t. the net
// parameters. The estimated clean point is clipped to +-kX0Clip.
numgrad::Tensor denoise_step(const DenoiserNet& net, const numgrad::Tensor& x_t,
                             int t, const std::vector<double>& c_embed,
                             const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Noise-prediction loss. The random draws (per-item t, eps) are frozen into
// a batch plan first, so the loss is a pure function of the parameters;
// finite-difference checks and determinism both lean on this.
// ---------------------------------------------------------------------------

struct DenoiseBatch {
    numgrad::Tensor input;   // (B, input_dim) constant
    numgrad::Tensor target;  // (B, 2) constant: the drawn noise
    int batch = 0;
};

// Per item: one uniform draw for t in [1, T], two normals for eps.
DenoiseBatch make_denoise_batch(const std::vector<std::array<double, 2>>& x0,
                                const std::vector<const std::vector<double>*>& c_embeds,
                                const NoiseSchedule& sched, int t_embed_dim, Rng& rng);

// Mean over the batch of the squared noise-prediction error.
numgrad::Tensor prediction_loss_from(const numgrad::Tensor& eps_hat,
                                     const numgrad::Tensor& eps_target);
numgrad::Tensor noise_prediction_loss(const DenoiserNet& net, const DenoiseBatch& b);

// Single-concept convenience wrapper over the two pieces above.
numgrad::Tensor diffusion_loss(const DenoiserNet& net,
                               const std::vector<std::array<double, 2>>& x0,
                               const std::vector<double>& c_embed,
                               const NoiseSchedule& sched, Rng& rng);

// ---------------------------------------------------------------------------
// Ancestral sampling: x_T ~ N(0, I), then denoise_step for t = T..1.
// Sharded deterministically by (seed, shard); label/tag mark the condition
// and producing snapshot.
// ---------------------------------------------------------------------------

concepts::SampleSet sample(const DenoiserNet& net, const std::vector<double>& c_embed,
                           int n, const NoiseSchedule& sched, uint64_t seed,
                           const std::string& label, const std::string& tag);

// ---------------------------------------------------------------------------
// Base-model training and snapshot persistence.
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 5000;
    int batch = 128;
    double lr = 1e-3;
    uint64_t seed = 11;
    std::vector<int> hidden = {64, 128, 128, 64};
};

struct SnapshotMeta {
    std::string kind = "base";  // "base" or the unlearning method name
    uint64_t seed = 0;
    long train_steps = 0;
    double loss_first_mean = 0.0;
    double loss_last_mean = 0.0;
    uint64_t loss_hash = 0;
    // set on unlearned snapshots
    double disc_accuracy = std::numeric_limits<double>::quiet_NaN();
    double conflict_fraction = std::numeric_limits<double>::quiet_NaN();
};

struct ModelSnapshot {
    DenoiserNet net;
    NoiseSchedule schedule;
    uint64_t table_hash = 0;
    SnapshotMeta meta;

    ModelSnapshot clone() const;
    uint64_t params_hash() const { return net.params.values_hash(); }
    std::string id() const { return Fnv1a::hex(params_hash()); }
};

// Trains the noise predictor on ground-truth draws from every concept,
// including the ood-synonym embedding paired with the target distribution.
ModelSnapshot train_base(const concepts::ConceptTable& table,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         std::vector<double>* loss_history = nullptr);

// Checkpoint container + JSON sidecar; loading verifies the schedule and
// table content hashes and the parameter payload hash.
void save_snapshot(const std::string& ckpt_path, const std::string& meta_path,
                   const ModelSnapshot& snap);
ModelSnapshot load_snapshot(const std::string& ckpt_path, const std::string& meta_path,
                            const concepts::ConceptTable& table);

}  // namespace uforge::diffusion
