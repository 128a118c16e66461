#include "uforge/diffusion.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace uforge::diffusion {

using namespace uforge::numgrad;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

uint64_t NoiseSchedule::content_hash() const {
    Fnv1a h;
    h.add_u64(static_cast<uint64_t>(T));
    h.add_doubles(alpha_bar);
    return h.digest();
}

NoiseSchedule build_schedule(int T) {
    if (T < 2) throw ConfigError("build_schedule: T must be >= 2");
    const double s = 0.008;
    const double half_pi = 1.5707963267948966;
    auto f = [&](int t) {
        double arg = ((static_cast<double>(t) / T + s) / (1.0 + s)) * half_pi;
        double c = std::cos(arg);
        return c * c;
    };
    NoiseSchedule sched;
    sched.T = T;
    sched.alpha_bar.resize(T + 1);
    double f0 = f(0);
    for (int t = 0; t <= T; ++t) sched.alpha_bar[t] = f(t) / f0;

    if (sched.alpha_bar[0] != 1.0)
        throw NumericError("build_schedule: renormalization failed");
    for (int t = 1; t <= T; ++t) {
        double a = sched.alpha_bar[t];
        if (!(a > 0.0 && a <= 1.0 && a < sched.alpha_bar[t - 1]))
            throw NumericError("build_schedule: alpha_bar not strictly decreasing in (0,1]");
    }
    if (!(sched.alpha_bar[T] < 0.01))
        throw NumericError("build_schedule: alpha_bar[T] must be < 0.01");
    return sched;
}

std::vector<double> timestep_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("timestep_embedding: dim must be even and >= 2");
    int half = dim / 2;
    std::vector<double> emb(dim);
    for (int k = 0; k < half; ++k) {
        double freq = std::exp(-std::log(10000.0) * k / (half - 1));
        emb[k] = std::sin(t * freq);
        emb[half + k] = std::cos(t * freq);
    }
    return emb;
}

// ---------------------------------------------------------------------------
// DenoiserNet
// ---------------------------------------------------------------------------

DenoiserNet DenoiserNet::make(const std::vector<int>& hidden, uint64_t seed) {
    DenoiserNet net;
    net.arch.widths.push_back(net.input_dim());
    net.arch.widths.insert(net.arch.widths.end(), hidden.begin(), hidden.end());
    net.arch.widths.push_back(2);
    net.arch.act = Activation::silu;
    Rng rng(seed);
    init_mlp_params(net.params, net.arch, rng);
    return net;
}

DenoiserNet DenoiserNet::clone() const {
    DenoiserNet out;
    out.params = params.clone();
    out.arch = arch;
    out.t_embed_dim = t_embed_dim;
    out.c_embed_dim = c_embed_dim;
    return out;
}

numgrad::Tensor DenoiserNet::forward_rows(const Tensor& input) const {
    return forward_mlp(params, input, arch);
}

numgrad::Tensor DenoiserNet::forward(const Tensor& x, int t,
                                     const std::vector<double>& c_embed) const {
    if (static_cast<int>(c_embed.size()) != c_embed_dim)
        throw DimensionError("denoiser: concept embedding dim mismatch");
    int b = x.rows();
    std::vector<double> temb = timestep_embedding(t, t_embed_dim);
    std::vector<double> temb_rows(static_cast<size_t>(b) * t_embed_dim);
    std::vector<double> cemb_rows(static_cast<size_t>(b) * c_embed_dim);
    for (int i = 0; i < b; ++i) {
        std::copy(temb.begin(), temb.end(), temb_rows.begin() + static_cast<size_t>(i) * t_embed_dim);
        std::copy(c_embed.begin(), c_embed.end(), cemb_rows.begin() + static_cast<size_t>(i) * c_embed_dim);
    }
    Tensor input = concat_cols({x, Tensor::constant({b, t_embed_dim}, std::move(temb_rows)),
                                Tensor::constant({b, c_embed_dim}, std::move(cemb_rows))});
    return forward_rows(input);
}

// ---------------------------------------------------------------------------
// Forward noising and one-step denoising
// ---------------------------------------------------------------------------

numgrad::Tensor add_noise(const Tensor& x0, int t, const Tensor& eps,
                          const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw DimensionError("add_noise: t out of range [0, T]");
    if (x0.shape() != eps.shape())
        throw DimensionError("add_noise: x0/eps shape mismatch");
    double a = std::sqrt(sched.alpha_bar[t]);
    double b = std::sqrt(1.0 - sched.alpha_bar[t]);
    return add(scale(x0, a), scale(eps, b));
}

numgrad::Tensor denoise_step(const DenoiserNet& net, const Tensor& x_t, int t,
                             const std::vector<double>& c_embed,
                             const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw DimensionError("denoise_step: t out of range [1, T]");
    Tensor eps_hat = net.forward(x_t, t, c_embed);
    double sa = std::sqrt(sched.alpha_bar[t]);
    double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    double sa_prev = std::sqrt(sched.alpha_bar[t - 1]);
    double sb_prev = std::sqrt(1.0 - sched.alpha_bar[t - 1]);
    Tensor x0_hat = scale(sub(x_t, scale(eps_hat, sb)), 1.0 / sa);
    x0_hat = clamp(x0_hat, -kX0Clip, kX0Clip);
    return add(scale(x0_hat, sa_prev), scale(eps_hat, sb_prev));
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

DenoiseBatch make_denoise_batch(const std::vector<std::array<double, 2>>& x0,
                                const std::vector<const std::vector<double>*>& c_embeds,
                                const NoiseSchedule& sched, int t_embed_dim, Rng& rng) {
    if (x0.empty()) throw DataError("denoise batch: empty batch");
    if (x0.size() != c_embeds.size())
        throw DimensionError("denoise batch: x0/embedding count mismatch");
    int b = static_cast<int>(x0.size());
    int c_dim = static_cast<int>(c_embeds[0]->size());
    int width = 2 + t_embed_dim + c_dim;
    std::vector<double> input(static_cast<size_t>(b) * width);
    std::vector<double> target(static_cast<size_t>(b) * 2);
    for (int i = 0; i < b; ++i) {
        int t = rng.uniform_int(1, sched.T);
        double e0 = rng.normal();
        double e1 = rng.normal();
        double sa = std::sqrt(sched.alpha_bar[t]);
        double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
        double* row = input.data() + static_cast<size_t>(i) * width;
        row[0] = sa * x0[i][0] + sb * e0;
        row[1] = sa * x0[i][1] + sb * e1;
        std::vector<double> temb = timestep_embedding(t, t_embed_dim);
        std::copy(temb.begin(), temb.end(), row + 2);
        std::copy(c_embeds[i]->begin(), c_embeds[i]->end(), row + 2 + t_embed_dim);
        target[static_cast<size_t>(i) * 2] = e0;
        target[static_cast<size_t>(i) * 2 + 1] = e1;
    }
    DenoiseBatch out;
    out.input = Tensor::constant({b, width}, std::move(input));
    out.target = Tensor::constant({b, 2}, std::move(target));
    out.batch = b;
    return out;
}

numgrad::Tensor prediction_loss_from(const Tensor& eps_hat, const Tensor& eps_target) {
    if (eps_hat.shape() != eps_target.shape())
        throw DimensionError("prediction loss: shape mismatch");
    Tensor d = sub(eps_hat, eps_target);
    return scale(sum_all(mul(d, d)), 1.0 / eps_hat.rows());
}

numgrad::Tensor noise_prediction_loss(const DenoiserNet& net, const DenoiseBatch& b) {
    return prediction_loss_from(net.forward_rows(b.input), b.target);
}

numgrad::Tensor diffusion_loss(const DenoiserNet& net,
                               const std::vector<std::array<double, 2>>& x0,
                               const std::vector<double>& c_embed,
                               const NoiseSchedule& sched, Rng& rng) {
    std::vector<const std::vector<double>*> embeds(x0.size(), &c_embed);
    DenoiseBatch b = make_denoise_batch(x0, embeds, sched, net.t_embed_dim, rng);
    return noise_prediction_loss(net, b);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace {
constexpr int kSampleShard = 512;
}

concepts::SampleSet sample(const DenoiserNet& net, const std::vector<double>& c_embed,
                           int n, const NoiseSchedule& sched, uint64_t seed,
                           const std::string& label, const std::string& tag) {
    if (n <= 0) throw DataError("sample: n must be > 0");
    concepts::SampleSet out;
    out.points.resize(n);
    out.labels.assign(n, label);
    out.provenance = tag;
    out.seed = seed;

    int shards = (n + kSampleShard - 1) / kSampleShard;
    parallel_tasks(shards, [&](int shard) {
        int lo = shard * kSampleShard;
        int hi = std::min(n, lo + kSampleShard);
        int b = hi - lo;
        Rng rng(Rng::derive(seed, static_cast<uint64_t>(shard)));
        std::vector<double> xv(static_cast<size_t>(b) * 2);
        for (auto& v : xv) v = rng.normal();
        NoGradGuard ng;
        Tensor x = Tensor::constant({b, 2}, std::move(xv));
        for (int t = sched.T; t >= 1; --t) {
            try {
                x = denoise_step(net, x, t, c_embed, sched);
            } catch (const NumericError& e) {
                throw NumericError("sample: non-finite state at t=" + std::to_string(t) +
                                   ": " + e.what());
            }
        }
        const auto& v = x.values();
        for (int i = 0; i < b; ++i)
            out.points[lo + i] = {v[static_cast<size_t>(i) * 2],
                                  v[static_cast<size_t>(i) * 2 + 1]};
    });
    return out;
}

// ---------------------------------------------------------------------------
// Base training
// ---------------------------------------------------------------------------

ModelSnapshot ModelSnapshot::clone() const {
    ModelSnapshot out;
    out.net = net.clone();
    out.schedule = schedule;
    out.table_hash = table_hash;
    out.meta = meta;
    return out;
}

ModelSnapshot train_base(const concepts::ConceptTable& table,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         std::vector<double>* loss_history) {
    table.validate();
    if (cfg.steps < 1 || cfg.batch < 1)
        throw ConfigError("train_base: steps and batch must be >= 1");

    ModelSnapshot snap;
    snap.net = DenoiserNet::make(cfg.hidden, Rng::derive(cfg.seed, 1));
    snap.schedule = sched;
    snap.table_hash = table.content_hash();

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamOptimizer opt(snap.net.params, acfg);
    Rng rng(Rng::derive(cfg.seed, 2));

    std::vector<double> losses;
    losses.reserve(cfg.steps);
    int n_concepts = static_cast<int>(table.concepts.size());
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::array<double, 2>> x0(cfg.batch);
        std::vector<const std::vector<double>*> embeds(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            const auto& c = table.concepts[rng.uniform_int(0, n_concepts - 1)];
            x0[i] = concepts::draw_point(c, rng);
            embeds[i] = &c.embedding;
        }
        try {
            DenoiseBatch batch =
                make_denoise_batch(x0, embeds, sched, snap.net.t_embed_dim, rng);
            snap.net.params.zero_grads();
            Tensor loss = noise_prediction_loss(snap.net, batch);
            losses.push_back(loss.scalar());
            backward(loss);
            opt.step(snap.net.params, flatten_grads(snap.net.params));
        } catch (const NumericError& e) {
            throw NumericError("train_base: diverged at step " + std::to_string(step) +
                               ": " + e.what());
        }
    }

    int digest_window = std::min<int>(100, static_cast<int>(losses.size()));
    double first = 0.0, last = 0.0;
    for (int i = 0; i < digest_window; ++i) {
        first += losses[i];
        last += losses[losses.size() - 1 - i];
    }
    Fnv1a lh;
    lh.add_doubles(losses);
    snap.meta.kind = "base";
    snap.meta.seed = cfg.seed;
    snap.meta.train_steps = cfg.steps;
    snap.meta.loss_first_mean = first / digest_window;
    snap.meta.loss_last_mean = last / digest_window;
    snap.meta.loss_hash = lh.digest();
    if (loss_history) *loss_history = std::move(losses);
    return snap;
}

// ---------------------------------------------------------------------------
// Snapshot persistence
// ---------------------------------------------------------------------------

namespace {

void write_text_atomic(const std::string& path, const std::string& text) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("snapshot: cannot open " + tmp);
        f << text;
        if (!f) throw IoError("snapshot: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

void save_snapshot(const std::string& ckpt_path, const std::string& meta_path,
                   const ModelSnapshot& snap) {
    save_checkpoint(ckpt_path, snap.net.params);
    json doc;
    doc["version"] = 1;
    doc["kind"] = snap.meta.kind;
    json arch;
    arch["widths"] = snap.net.arch.widths;
    arch["activation"] = to_string(snap.net.arch.act);
    arch["t_embed_dim"] = snap.net.t_embed_dim;
    arch["c_embed_dim"] = snap.net.c_embed_dim;
    doc["arch"] = arch;
    doc["schedule"] = {{"type", "cosine"},
                       {"T", snap.schedule.T},
                       {"hash", Fnv1a::hex(snap.schedule.content_hash())}};
    doc["table_hash"] = Fnv1a::hex(snap.table_hash);
    doc["params_hash"] = Fnv1a::hex(snap.params_hash());
    doc["seed"] = snap.meta.seed;
    doc["train_steps"] = snap.meta.train_steps;
    doc["loss_first_mean"] = snap.meta.loss_first_mean;
    doc["loss_last_mean"] = snap.meta.loss_last_mean;
    doc["loss_hash"] = Fnv1a::hex(snap.meta.loss_hash);
    if (std::isfinite(snap.meta.disc_accuracy))
        doc["disc_accuracy"] = snap.meta.disc_accuracy;
    if (std::isfinite(snap.meta.conflict_fraction))
        doc["conflict_fraction"] = snap.meta.conflict_fraction;
    write_text_atomic(meta_path, doc.dump(2) + "\n");
}

ModelSnapshot load_snapshot(const std::string& ckpt_path, const std::string& meta_path,
                            const concepts::ConceptTable& table) {
    std::ifstream f(meta_path);
    if (!f) throw MissingArtifactError("snapshot: cannot open " + meta_path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("snapshot meta " + meta_path + ": " + e.what());
    }

    ModelSnapshot snap;
    const auto& arch = doc.at("arch");
    snap.net.arch.widths = arch.at("widths").get<std::vector<int>>();
    snap.net.arch.act = activation_from_string(arch.at("activation").get<std::string>());
    snap.net.t_embed_dim = arch.at("t_embed_dim").get<int>();
    snap.net.c_embed_dim = arch.at("c_embed_dim").get<int>();

    snap.schedule = build_schedule(doc.at("schedule").at("T").get<int>());
    if (Fnv1a::hex(snap.schedule.content_hash()) !=
        doc.at("schedule").at("hash").get<std::string>())
        throw ConfigError("snapshot: schedule hash mismatch in " + meta_path);

    snap.table_hash = table.content_hash();
    if (Fnv1a::hex(snap.table_hash) != doc.at("table_hash").get<std::string>())
        throw ConfigError("snapshot: concept table hash mismatch in " + meta_path);

    snap.net.params = load_checkpoint(ckpt_path);
    if (Fnv1a::hex(snap.params_hash()) != doc.at("params_hash").get<std::string>())
        throw ConfigError("snapshot: parameter hash mismatch between " + ckpt_path +
                          " and " + meta_path);

    snap.meta.kind = doc.at("kind").get<std::string>();
    snap.meta.seed = doc.at("seed").get<uint64_t>();
    snap.meta.train_steps = doc.at("train_steps").get<long>();
    snap.meta.loss_first_mean = doc.at("loss_first_mean").get<double>();
    snap.meta.loss_last_mean = doc.at("loss_last_mean").get<double>();
    if (doc.contains("disc_accuracy"))
        snap.meta.disc_accuracy = doc.at("disc_accuracy").get<double>();
    if (doc.contains("conflict_fraction"))
        snap.meta.conflict_fraction = doc.at("conflict_fraction").get<double>();
    return snap;
}

}  // namespace uforge::diffusion
