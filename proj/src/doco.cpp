#include "uforge/doco.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace uforge::doco {

using namespace uforge::numgrad;
using diffusion::DenoiserNet;
using diffusion::NoiseSchedule;

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

DiscriminatorNet DiscriminatorNet::make(const std::vector<int>& hidden, uint64_t seed) {
    DiscriminatorNet net;
    net.arch.widths.push_back(2 + net.t_embed_dim);
    net.arch.widths.insert(net.arch.widths.end(), hidden.begin(), hidden.end());
    net.arch.widths.push_back(1);
    net.arch.act = Activation::leaky_relu;
    Rng rng(seed);
    init_mlp_params(net.params, net.arch, rng);
    return net;
}

DiscriminatorNet DiscriminatorNet::clone() const {
    DiscriminatorNet out;
    out.params = params.clone();
    out.arch = arch;
    out.t_embed_dim = t_embed_dim;
    return out;
}

numgrad::Tensor DiscriminatorNet::forward(const Tensor& x_prev, int t) const {
    int b = x_prev.rows();
    std::vector<double> temb = diffusion::timestep_embedding(t, t_embed_dim);
    std::vector<double> temb_rows(static_cast<size_t>(b) * t_embed_dim);
    for (int i = 0; i < b; ++i)
        std::copy(temb.begin(), temb.end(),
                  temb_rows.begin() + static_cast<size_t>(i) * t_embed_dim);
    Tensor input =
        concat_cols({x_prev, Tensor::constant({b, t_embed_dim}, std::move(temb_rows))});
    return forward_mlp(params, input, arch);
}

// ---------------------------------------------------------------------------
// Methods & config
// ---------------------------------------------------------------------------

Method method_from_string(const std::string& s) {
    if (s == "doco-cp") return Method::doco_cp;
    if (s == "doco-l2retain") return Method::doco_l2retain;
    if (s == "doco-noretain") return Method::doco_noretain;
    if (s == "pairwise-l2") return Method::pairwise_l2;
    throw ConfigError("unknown unlearning method: " + s);
}

std::string to_string(Method m) {
    switch (m) {
        case Method::doco_cp: return "doco-cp";
        case Method::doco_l2retain: return "doco-l2retain";
        case Method::doco_noretain: return "doco-noretain";
        case Method::pairwise_l2: return "pairwise-l2";
    }
    return "?";
}

const std::vector<Method>& all_methods() {
    static const std::vector<Method> methods = {
        Method::doco_cp, Method::doco_l2retain, Method::doco_noretain,
        Method::pairwise_l2};
    return methods;
}

void UnlearnConfig::validate() const {
    if (iterations < 0) throw ConfigError("unlearn: iterations must be >= 0");
    if (warmup < 0 || warmup > iterations)
        throw ConfigError("unlearn: warmup must lie in [0, iterations]");
    if (batch < 1) throw ConfigError("unlearn: batch must be >= 1");
    if (lambda < 0.0) throw ConfigError("unlearn: lambda must be >= 0");
    if (gen_lr <= 0.0 || disc_lr <= 0.0)
        throw ConfigError("unlearn: learning rates must be > 0");
    if (pool_size < batch) throw ConfigError("unlearn: pool smaller than batch");
    if (held_out_n < 1) throw ConfigError("unlearn: held_out_n must be >= 1");
}

std::vector<std::string> default_retain_set(const concepts::ConceptTable& table) {
    std::vector<std::string> out;
    out.push_back(table.anchor().id);
    for (const auto& c : table.concepts)
        if (c.role == concepts::Role::retain) out.push_back(c.id);
    return out;
}

// ---------------------------------------------------------------------------
// Adversarial objective
// ---------------------------------------------------------------------------

numgrad::Tensor adversarial_value(const DiscriminatorNet& disc,
                                  const Tensor& x_prev_anchor,
                                  const Tensor& x_prev_target, int t) {
    if (x_prev_anchor.rows() != x_prev_target.rows())
        throw DimensionError("adversarial_value: branch batch sizes differ");
    Tensor p_anchor =
        clamp(sigmoid(disc.forward(x_prev_anchor, t)), kProbClamp, 1.0 - kProbClamp);
    Tensor p_target =
        clamp(sigmoid(disc.forward(x_prev_target, t)), kProbClamp, 1.0 - kProbClamp);
    Tensor term_a = mean_all(log_elem(p_anchor));
    Tensor term_b = mean_all(log_elem(add_scalar(scale(p_target, -1.0), 1.0)));
    return add(term_a, term_b);
}

AdvBatch make_adv_batch(const std::vector<std::array<double, 2>>& pool,
                        const NoiseSchedule& sched, int batch, Rng& rng) {
    if (pool.empty()) throw DataError("adv batch: empty pool");
    std::vector<std::array<double, 2>> x0(batch);
    for (int i = 0; i < batch; ++i)
        x0[i] = pool[rng.next_u64() % pool.size()];
    int t = rng.uniform_int(1, sched.T);
    double sa = std::sqrt(sched.alpha_bar[t]);
    double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    std::vector<double> xt(static_cast<size_t>(batch) * 2);
    for (int i = 0; i < batch; ++i) {
        xt[static_cast<size_t>(i) * 2] = sa * x0[i][0] + sb * rng.normal();
        xt[static_cast<size_t>(i) * 2 + 1] = sa * x0[i][1] + sb * rng.normal();
    }
    AdvBatch out;
    out.x_t = Tensor::constant({batch, 2}, std::move(xt));
    out.t = t;
    return out;
}

DiscStepDiag discriminator_step(DiscriminatorNet& disc, AdamOptimizer& opt,
                                const DenoiserNet& gen,
                                const std::vector<double>& anchor_embed,
                                const std::vector<double>& target_embed,
                                const std::vector<std::array<double, 2>>& pool,
                                const NoiseSchedule& sched, int batch, Rng& rng) {
    AdvBatch b = make_adv_batch(pool, sched, batch, rng);
    Tensor x_prev_anchor, x_prev_target;
    {
        NoGradGuard ng;  // generator frozen: branches enter the critic as constants
        x_prev_anchor = diffusion::denoise_step(gen, b.x_t, b.t, anchor_embed, sched);
        x_prev_target = diffusion::denoise_step(gen, b.x_t, b.t, target_embed, sched);
    }
    disc.params.zero_grads();
    Tensor v = adversarial_value(disc, x_prev_anchor, x_prev_target, b.t);
    backward(scale(v, -1.0));  // ascend V
    opt.step(disc.params, flatten_grads(disc.params));

    DiscStepDiag diag;
    diag.value_v = v.scalar();
    int correct = 0;
    {
        NoGradGuard ng;
        Tensor la = disc.forward(x_prev_anchor, b.t);
        Tensor lt = disc.forward(x_prev_target, b.t);
        for (double l : la.values()) correct += l > 0.0;
        for (double l : lt.values()) correct += l < 0.0;
    }
    diag.batch_acc = static_cast<double>(correct) / (2.0 * batch);
    return diag;
}

GradResult generator_unlearn_grad(const DenoiserNet& gen, const DiscriminatorNet& disc,
                                  const std::vector<double>& target_embed,
                                  const std::vector<std::array<double, 2>>& pool,
                                  const NoiseSchedule& sched, int batch, Rng& rng) {
    AdvBatch b = make_adv_batch(pool, sched, batch, rng);
    gen.params.zero_grads();
    disc.params.zero_grads();
    Tensor x_prev = diffusion::denoise_step(gen, b.x_t, b.t, target_embed, sched);
    Tensor p = clamp(sigmoid(disc.forward(x_prev, b.t)), kProbClamp, 1.0 - kProbClamp);
    Tensor loss = scale(mean_all(log_elem(p)), -1.0);
    backward(loss);
    GradResult out;
    out.grad = flatten_grads(gen.params);
    out.loss = loss.scalar();
    return out;
}

RetainBatch make_retain_batch(const concepts::ConceptTable& table,
                              const std::vector<std::string>& retain_ids, int batch,
                              Rng& rng) {
    if (retain_ids.empty()) throw ConfigError("retain gradient: empty retain set");
    RetainBatch out;
    out.x0.resize(batch);
    out.ids.resize(batch);
    out.embeds.resize(batch);
    for (int i = 0; i < batch; ++i) {
        const auto& c = table.by_id(
            retain_ids[rng.uniform_int(0, static_cast<int>(retain_ids.size()) - 1)]);
        out.x0[i] = concepts::draw_point(c, rng);
        out.ids[i] = c.id;
        out.embeds[i] = &c.embedding;
    }
    return out;
}

GradResult generator_retain_grad(const DenoiserNet& gen,
                                 const concepts::ConceptTable& table,
                                 const std::vector<std::string>& retain_ids,
                                 const NoiseSchedule& sched, int batch, Rng& rng) {
    RetainBatch rb = make_retain_batch(table, retain_ids, batch, rng);
    diffusion::DenoiseBatch b =
        diffusion::make_denoise_batch(rb.x0, rb.embeds, sched, gen.t_embed_dim, rng);
    gen.params.zero_grads();
    Tensor loss = diffusion::noise_prediction_loss(gen, b);
    backward(loss);
    GradResult out;
    out.grad = flatten_grads(gen.params);
    out.loss = loss.scalar();
    return out;
}

GradResult generator_pairwise_grad(const DenoiserNet& gen,
                                   const std::vector<double>& anchor_embed,
                                   const std::vector<double>& target_embed,
                                   const std::vector<std::array<double, 2>>& pool,
                                   const NoiseSchedule& sched, int batch, Rng& rng) {
    AdvBatch b = make_adv_batch(pool, sched, batch, rng);
    Tensor anchor_pred;
    {
        NoGradGuard ng;  // stopgrad branch
        anchor_pred = gen.forward(b.x_t, b.t, anchor_embed);
    }
    gen.params.zero_grads();
    Tensor target_pred = gen.forward(b.x_t, b.t, target_embed);
    Tensor loss = diffusion::prediction_loss_from(target_pred, anchor_pred);
    backward(loss);
    GradResult out;
    out.grad = flatten_grads(gen.params);
    out.loss = loss.scalar();
    return out;
}

// ---------------------------------------------------------------------------
// Surgery
// ---------------------------------------------------------------------------

namespace {

void surgery_segment(const std::vector<double>& u, const std::vector<double>& r,
                     double lambda, size_t lo, size_t hi, std::vector<double>& out) {
    double dot = 0.0, nr2 = 0.0;
    for (size_t i = lo; i < hi; ++i) {
        dot += u[i] * r[i];
        nr2 += r[i] * r[i];
    }
    if (dot >= 0.0 || nr2 < 1e-24) {
        std::copy(u.begin() + lo, u.begin() + hi, out.begin() + lo);
        return;
    }
    double coef = lambda * dot / nr2;
    for (size_t i = lo; i < hi; ++i) out[i] = u[i] - coef * r[i];
}

}  // namespace

numgrad::FlatGrad surgery(const FlatGrad& g_unlearn, const FlatGrad& g_retain,
                          double lambda) {
    if (g_unlearn.layout_hash != g_retain.layout_hash ||
        g_unlearn.values.size() != g_retain.values.size())
        throw LayoutError("surgery: gradient layouts differ");
    FlatGrad out;
    out.layout_hash = g_unlearn.layout_hash;
    out.values.resize(g_unlearn.values.size());
    surgery_segment(g_unlearn.values, g_retain.values, lambda, 0,
                    g_unlearn.values.size(), out.values);
    return out;
}

numgrad::FlatGrad surgery_per_tensor(
    const FlatGrad& g_unlearn, const FlatGrad& g_retain, double lambda,
    const std::vector<ParamSet::LayoutEntry>& layout) {
    if (g_unlearn.layout_hash != g_retain.layout_hash ||
        g_unlearn.values.size() != g_retain.values.size())
        throw LayoutError("surgery: gradient layouts differ");
    FlatGrad out;
    out.layout_hash = g_unlearn.layout_hash;
    out.values.resize(g_unlearn.values.size());
    for (const auto& e : layout)
        surgery_segment(g_unlearn.values, g_retain.values, lambda, e.offset,
                        e.offset + e.count, out.values);
    return out;
}

// ---------------------------------------------------------------------------
// Held-out discriminator accuracy
// ---------------------------------------------------------------------------

double held_out_disc_accuracy(const DiscriminatorNet& disc, const DenoiserNet& gen,
                              const std::vector<double>& anchor_embed,
                              const std::vector<double>& target_embed,
                              const std::vector<std::array<double, 2>>& pool,
                              const NoiseSchedule& sched, int n, uint64_t seed) {
    Rng rng(seed);
    NoGradGuard ng;
    int correct = 0;
    const int chunk = 64;
    for (int done = 0; done < n; done += chunk) {
        int b = std::min(chunk, n - done);
        AdvBatch batch = make_adv_batch(pool, sched, b, rng);
        Tensor xa = diffusion::denoise_step(gen, batch.x_t, batch.t, anchor_embed, sched);
        Tensor xt = diffusion::denoise_step(gen, batch.x_t, batch.t, target_embed, sched);
        Tensor la = disc.forward(xa, batch.t);
        Tensor lt = disc.forward(xt, batch.t);
        for (double l : la.values()) correct += l > 0.0;
        for (double l : lt.values()) correct += l < 0.0;
    }
    return static_cast<double>(correct) / (2.0 * n);
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

UnlearnResult unlearn(const diffusion::ModelSnapshot& m_init,
                      const concepts::ConceptTable& table, const UnlearnConfig& cfg,
                      const SnapshotCallback& on_snapshot) {
    cfg.validate();
    if (m_init.table_hash != table.content_hash())
        throw ConfigError("unlearn: snapshot does not reference this concept table");
    const auto& sched = m_init.schedule;
    const auto& anchor = table.anchor();
    const auto& target = table.target();
    std::vector<std::string> retain_ids =
        cfg.retain_ids.empty() ? default_retain_set(table) : cfg.retain_ids;
    for (const auto& id : retain_ids) {
        const auto& c = table.by_id(id);
        if (c.role == concepts::Role::target || c.role == concepts::Role::ood_synonym)
            throw ConfigError("unlearn: retain set may not contain " + id);
    }
    bool needs_retain = cfg.method != Method::doco_noretain;
    if (needs_retain && retain_ids.empty())
        throw ConfigError("unlearn: retain set is empty");

    UnlearnResult result;
    result.snapshot = m_init.clone();
    result.snapshot.meta.kind = to_string(cfg.method);
    result.snapshot.meta.seed = cfg.seed;
    result.snapshot.meta.train_steps = cfg.iterations;
    DenoiserNet& gen = result.snapshot.net;

    // Anchor-condition pools generated once from the frozen initial model.
    std::vector<std::array<double, 2>> pool =
        diffusion::sample(m_init.net, anchor.embedding, cfg.pool_size, sched,
                          Rng::derive(cfg.seed, 101), anchor.id, m_init.id())
            .points;
    std::vector<std::array<double, 2>> held_pool =
        diffusion::sample(m_init.net, anchor.embedding, cfg.held_out_n, sched,
                          Rng::derive(cfg.seed, 102), anchor.id, m_init.id())
            .points;

    DiscriminatorNet disc =
        DiscriminatorNet::make(cfg.disc_hidden, Rng::derive(cfg.seed, 103));
    AdamConfig dcfg;
    dcfg.lr = cfg.disc_lr;
    AdamOptimizer opt_disc(disc.params, dcfg);
    AdamConfig gcfg;
    gcfg.lr = cfg.gen_lr;
    AdamOptimizer opt_gen(gen.params, gcfg);
    Rng rng(Rng::derive(cfg.seed, 104));

    long conflicts = 0, conflict_evals = 0;
    std::vector<double> last_good = gen.params.flat_values();
    for (long iter = 0; iter < cfg.iterations; ++iter) {
        RunLogRow row;
        row.iter = iter;
        bool in_warmup = iter < cfg.warmup;
        row.phase = in_warmup ? "warmup" : "adversarial";
        try {
            DiscStepDiag diag = discriminator_step(disc, opt_disc, gen, anchor.embedding,
                                                   target.embedding, pool, sched,
                                                   cfg.batch, rng);
            row.value_v = diag.value_v;
            row.disc_acc = diag.batch_acc;

            if (!in_warmup) {
                FlatGrad update;
                switch (cfg.method) {
                    case Method::doco_cp: {
                        GradResult u = generator_unlearn_grad(gen, disc, target.embedding,
                                                              pool, sched, cfg.batch, rng);
                        GradResult r = generator_retain_grad(gen, table, retain_ids,
                                                             sched, cfg.batch, rng);
                        row.loss_unlearn = u.loss;
                        row.loss_retain = r.loss;
                        row.conflict = u.grad.dot(r.grad) < 0.0 ? 1 : 0;
                        conflicts += row.conflict;
                        ++conflict_evals;
                        update = cfg.per_tensor_surgery
                                     ? surgery_per_tensor(u.grad, r.grad, cfg.lambda,
                                                          gen.params.layout())
                                     : surgery(u.grad, r.grad, cfg.lambda);
                        break;
                    }
                    case Method::doco_l2retain: {
                        GradResult u = generator_unlearn_grad(gen, disc, target.embedding,
                                                              pool, sched, cfg.batch, rng);
                        GradResult r = generator_retain_grad(gen, table, retain_ids,
                                                             sched, cfg.batch, rng);
                        row.loss_unlearn = u.loss;
                        row.loss_retain = r.loss;
                        row.conflict = u.grad.dot(r.grad) < 0.0 ? 1 : 0;
                        conflicts += row.conflict;
                        ++conflict_evals;
                        update = u.grad;
                        for (size_t i = 0; i < update.values.size(); ++i)
                            update.values[i] += r.grad.values[i];
                        break;
                    }
                    case Method::doco_noretain: {
                        GradResult u = generator_unlearn_grad(gen, disc, target.embedding,
                                                              pool, sched, cfg.batch, rng);
                        row.loss_unlearn = u.loss;
                        update = u.grad;
                        break;
                    }
                    case Method::pairwise_l2: {
                        GradResult u = generator_pairwise_grad(gen, anchor.embedding,
                                                               target.embedding, pool,
                                                               sched, cfg.batch, rng);
                        GradResult r = generator_retain_grad(gen, table, retain_ids,
                                                             sched, cfg.batch, rng);
                        row.loss_unlearn = u.loss;
                        row.loss_retain = r.loss;
                        row.conflict = u.grad.dot(r.grad) < 0.0 ? 1 : 0;
                        conflicts += row.conflict;
                        ++conflict_evals;
                        update = u.grad;
                        for (size_t i = 0; i < update.values.size(); ++i)
                            update.values[i] += r.grad.values[i];
                        break;
                    }
                }
                row.grad_norm = update.norm();
                opt_gen.step(gen.params, update);
            }
        } catch (const NumericError&) {
            gen.params.set_flat_values(last_good);
            result.aborted = true;
            result.abort_iter = iter;
            result.log.push_back(row);
            break;
        }
        result.log.push_back(row);
        last_good = gen.params.flat_values();
        if (cfg.snapshot_every > 0 && (iter + 1) % cfg.snapshot_every == 0 && on_snapshot)
            on_snapshot(iter + 1, result.snapshot);
    }

    try {
        result.held_out_disc_acc =
            held_out_disc_accuracy(disc, gen, anchor.embedding, target.embedding,
                                   held_pool, sched, cfg.held_out_n,
                                   Rng::derive(cfg.seed, 105));
    } catch (const NumericError&) {
        if (!result.aborted) throw;  // aborted runs may hold a degenerate state
    }
    if (conflict_evals > 0)
        result.conflict_fraction =
            static_cast<double>(conflicts) / static_cast<double>(conflict_evals);
    result.snapshot.meta.disc_accuracy = result.held_out_disc_acc;
    result.snapshot.meta.conflict_fraction = result.conflict_fraction;
    return result;
}

// ---------------------------------------------------------------------------
// Run log CSV
// ---------------------------------------------------------------------------

void write_run_log_csv(const std::string& path, const std::vector<RunLogRow>& log) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("run log: cannot open " + tmp);
        f << "iter,phase,L_u,L_r,V,disc_acc,conflict,grad_norm\n";
        char buf[64];
        auto cell = [&](double v) {
            f << ",";
            if (std::isfinite(v)) {
                std::snprintf(buf, sizeof(buf), "%.17g", v);
                f << buf;
            }
        };
        for (const auto& r : log) {
            f << r.iter << "," << r.phase;
            cell(r.loss_unlearn);
            cell(r.loss_retain);
            cell(r.value_v);
            cell(r.disc_acc);
            f << ",";
            if (r.conflict >= 0) f << r.conflict;
            cell(r.grad_norm);
            f << "\n";
        }
        if (!f) throw IoError("run log: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace uforge::doco
