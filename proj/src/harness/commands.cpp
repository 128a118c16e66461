#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "uforge/harness.hpp"

namespace uforge::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Timer {
  public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

void require_file(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw MissingArtifactError("missing artifact " + path +
                                   "; produce it with 'unlearn-forge " + producer + "'");
}

std::string method_suffix(const RunConfig& cfg) {
    return doco::to_string(cfg.unlearn.method);
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("loss log: cannot open " + tmp);
        f << "step,loss\n";
        char buf[64];
        for (size_t i = 0; i < losses.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", losses[i]);
            f << i << "," << buf << "\n";
        }
        if (!f) throw IoError("loss log: write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

}  // namespace

concepts::ConceptTable load_table(const RunConfig& cfg) {
    std::string path = (fs::path(cfg.out_dir) / "concepts.json").string();
    require_file(path, "gen-data");
    std::ifstream f(path);
    std::string text((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
    return concepts::ConceptTable::from_json_string(text);
}

diffusion::ModelSnapshot load_named_snapshot(const RunConfig& cfg,
                                             const std::string& name,
                                             const concepts::ConceptTable& table) {
    std::string producer = name == "m_init" ? "train-base" : "unlearn";
    std::string ckpt = (fs::path(cfg.out_dir) / (name + ".ckpt")).string();
    std::string meta = (fs::path(cfg.out_dir) / (name + ".json")).string();
    require_file(ckpt, producer);
    require_file(meta, producer);
    return diffusion::load_snapshot(ckpt, meta, table);
}

void cmd_gen_data(const RunConfig& cfg) {
    Timer timer;
    ArtifactStore store(cfg);
    concepts::ConceptTable table = concepts::default_table(cfg.table_seed);
    write_text_atomic(store.path("concepts.json"), table.to_json_string());
    store.record("concepts.json");
    for (size_t i = 0; i < table.concepts.size(); ++i) {
        const auto& c = table.concepts[i];
        concepts::SampleSet s = concepts::sample_ground_truth(
            c, cfg.gen_samples_n, Rng::derive(cfg.table_seed, 500 + i));
        std::string rel = "data_" + c.id + ".csv";
        s.write_csv(store.path(rel));
        store.record(rel);
    }
    store.commit("gen-data", timer.seconds());
}

void cmd_train_base(const RunConfig& cfg) {
    Timer timer;
    ArtifactStore store(cfg);
    concepts::ConceptTable table = load_table(cfg);
    diffusion::NoiseSchedule sched = diffusion::build_schedule(cfg.T);
    std::vector<double> losses;
    diffusion::ModelSnapshot snap = diffusion::train_base(table, sched, cfg.base, &losses);
    diffusion::save_snapshot(store.path("m_init.ckpt"), store.path("m_init.json"), snap);
    store.record("m_init.ckpt");
    store.record("m_init.json");
    write_loss_csv(store.path("base_loss.csv"), losses);
    store.record("base_loss.csv");
    store.commit("train-base", timer.seconds());
}

void cmd_unlearn(const RunConfig& cfg) {
    Timer timer;
    ArtifactStore store(cfg);
    concepts::ConceptTable table = load_table(cfg);
    diffusion::ModelSnapshot m_init = load_named_snapshot(cfg, "m_init", table);

    std::string suffix = method_suffix(cfg);
    doco::SnapshotCallback on_snapshot;
    if (cfg.unlearn.snapshot_every > 0) {
        on_snapshot = [&](long iter, const diffusion::ModelSnapshot& snap) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "_iter%06ld", iter);
            std::string rel = "m_hat_" + suffix + buf;
            diffusion::save_snapshot(store.path(rel + ".ckpt"), store.path(rel + ".json"),
                                     snap);
            store.record(rel + ".ckpt");
            store.record(rel + ".json");
        };
    }
    doco::UnlearnResult res = doco::unlearn(m_init, table, cfg.unlearn, on_snapshot);

    std::string rel = "m_hat_" + suffix;
    diffusion::save_snapshot(store.path(rel + ".ckpt"), store.path(rel + ".json"),
                             res.snapshot);
    store.record(rel + ".ckpt");
    store.record(rel + ".json");
    doco::write_run_log_csv(store.path("runlog_" + suffix + ".csv"), res.log);
    store.record("runlog_" + suffix + ".csv");
    store.commit("unlearn:" + suffix, timer.seconds());
    if (res.aborted)
        throw NumericError("unlearn aborted at iteration " +
                           std::to_string(res.abort_iter) +
                           "; partial log and last good snapshot were written");
}

void cmd_eval(const RunConfig& cfg, std::string snapshot_name,
              std::string baseline_name) {
    Timer timer;
    ArtifactStore store(cfg);
    if (snapshot_name.empty()) snapshot_name = "m_hat_" + method_suffix(cfg);
    if (baseline_name.empty()) baseline_name = "m_init";
    concepts::ConceptTable table = load_table(cfg);
    diffusion::ModelSnapshot current = load_named_snapshot(cfg, snapshot_name, table);
    diffusion::ModelSnapshot baseline = load_named_snapshot(cfg, baseline_name, table);

    eval::EvaluateOptions opt;
    opt.n = cfg.eval_n;
    opt.seed = cfg.eval_seed;
    opt.disc_confusion = current.meta.disc_accuracy;
    eval::MetricsRecord rec = eval::evaluate(current, baseline, table, opt);

    std::string rel = "metrics_" + snapshot_name;
    rec.write_csv(store.path(rel + ".csv"));
    store.record(rel + ".csv");
    write_text_atomic(store.path(rel + ".json"), rec.to_json_string());
    store.record(rel + ".json");
    store.commit("eval:" + snapshot_name, timer.seconds());
}

void cmd_report(const RunConfig& cfg) {
    Timer timer;
    ArtifactStore store(cfg);
    concepts::ConceptTable table = load_table(cfg);

    struct Row {
        std::string method;
        eval::MetricsRecord rec;
    };
    std::vector<Row> rows;
    for (doco::Method m : doco::all_methods()) {
        std::string name = "m_hat_" + doco::to_string(m);
        std::string path = store.path("metrics_" + name + ".json");
        if (!fs::exists(path)) continue;
        std::ifstream f(path);
        std::string text((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
        rows.push_back({doco::to_string(m), eval::MetricsRecord::from_json_string(text)});
    }
    if (rows.empty())
        throw MissingArtifactError(
            "no metrics found in " + cfg.out_dir +
            "; produce them with 'unlearn-forge unlearn' and 'unlearn-forge eval'");

    // comparison table, one row per evaluated method in enumeration order
    {
        std::string path = store.path("report.csv");
        std::string tmp = path + ".tmp";
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("report: cannot open " + tmp);
        f << "method,target_target_rate,target_anchor_rate,synonym_target_rate,"
             "retained_self_rate_min,retained_drift_mean,target_frechet_to_anchor,"
             "disc_confusion\n";
        char buf[64];
        auto cell = [&](double v) {
            f << ",";
            if (std::isfinite(v)) {
                std::snprintf(buf, sizeof(buf), "%.17g", v);
                f << buf;
            }
        };
        std::string synonym_id;
        for (const auto& c : table.concepts)
            if (c.role == concepts::Role::ood_synonym) synonym_id = c.id;
        for (const auto& row : rows) {
            const auto& target_row = row.rec.of(table.target().id);
            double min_self = 1.0, drift_sum = 0.0;
            int retained = 0;
            for (const auto& c : table.concepts) {
                if (c.role != concepts::Role::anchor && c.role != concepts::Role::retain)
                    continue;
                const auto& m = row.rec.of(c.id);
                min_self = std::min(min_self, m.self_rate);
                drift_sum += m.frechet_drift_vs_init;
                ++retained;
            }
            f << row.method;
            cell(target_row.target_rate);
            cell(target_row.anchor_rate);
            cell(synonym_id.empty()
                     ? std::numeric_limits<double>::quiet_NaN()
                     : row.rec.of(synonym_id).target_rate);
            cell(min_self);
            cell(retained > 0 ? drift_sum / retained : 0.0);
            cell(target_row.frechet_to_anchor_gt);
            cell(row.rec.disc_confusion_acc);
            f << "\n";
        }
        if (!f) throw IoError("report: write failed for " + tmp);
        f.close();
        fs::rename(tmp, path);
        store.record("report.csv");
    }

    // before/after scatter panels per evaluated method
    const int plot_n = 500;
    diffusion::ModelSnapshot m_init = load_named_snapshot(cfg, "m_init", table);
    for (const auto& row : rows) {
        diffusion::ModelSnapshot m_hat =
            load_named_snapshot(cfg, "m_hat_" + row.method, table);
        std::vector<concepts::SampleSet> sets;
        sets.reserve(table.concepts.size() * 2);
        std::vector<ScatterPanel> panels;
        for (size_t i = 0; i < table.concepts.size(); ++i) {
            const auto& c = table.concepts[i];
            sets.push_back(diffusion::sample(m_init.net, c.embedding, plot_n,
                                             m_init.schedule,
                                             Rng::derive(cfg.eval_seed, 9000 + i), c.id,
                                             m_init.id()));
            sets.push_back(diffusion::sample(m_hat.net, c.embedding, plot_n,
                                             m_hat.schedule,
                                             Rng::derive(cfg.eval_seed, 9500 + i), c.id,
                                             m_hat.id()));
        }
        for (size_t i = 0; i < table.concepts.size(); ++i) {
            panels.push_back({table.concepts[i].id + " | before", &sets[2 * i]});
            panels.push_back({table.concepts[i].id + " | after", &sets[2 * i + 1]});
        }
        std::string svg = render_scatter_svg("conditions before/after: " + row.method,
                                             panels, 2, table);
        std::string rel = "report_" + row.method + ".svg";
        write_text_atomic(store.path(rel), svg);
        store.record(rel);
    }
    store.commit("report", timer.seconds());
}

int cmd_gradcheck(const RunConfig& cfg) {
    Timer timer;
    ArtifactStore store(cfg);
    GradCheckReport rep = run_gradcheck(Rng::derive(cfg.eval_seed, 777));
    std::string text = rep.to_text();
    std::fputs(text.c_str(), stdout);
    write_text_atomic(store.path("gradcheck.txt"), text);
    store.record("gradcheck.txt");
    store.commit("gradcheck", timer.seconds());
    return rep.all_ok() ? 0 : 4;
}

}  // namespace uforge::harness
