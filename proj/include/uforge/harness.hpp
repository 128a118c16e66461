#pragma once

// Experiment driver: JSON configuration with full defaults, content-hashed
// artifact manifests, the five pipeline commands plus gradcheck, and SVG
// scatter reports. One config file = one experiment = one manifest.

#include <map>
#include <string>
#include <vector>

#include "uforge/concepts.hpp"
#include "uforge/diffusion.hpp"
#include "uforge/doco.hpp"
#include "uforge/metrics.hpp"

namespace uforge::harness {

// ---------------------------------------------------------------------------
// Configuration. Every field has a default; an empty config document runs
// the canonical experiment.
// ---------------------------------------------------------------------------

struct RunConfig {
    uint64_t table_seed = 7;
    int gen_samples_n = 2000;  // per-concept ground-truth export size

    int T = 100;
    diffusion::TrainConfig base;  // steps 5000, batch 128, lr 1e-3, seed 11

    doco::UnlearnConfig unlearn;

    int eval_n = 4000;
    uint64_t eval_seed = 101;

    std::string out_dir = "runs/default";

    // Strict parse: unknown fields are errors naming the offending path;
    // syntax errors cite the line. Empty/whitespace text yields defaults.
    static RunConfig from_json_string(const std::string& text,
                                      const std::string& origin = "<config>");
    static RunConfig load(const std::string& path);
    // Canonical form with every default materialized; hashed into manifests.
    std::string to_json_string() const;
};

// ---------------------------------------------------------------------------
// Manifest: config snapshot + content hashes of every produced artifact.
// Wall-clock timings are recorded but excluded from the manifest hash, so
// identical same-seed runs hash identically.
// ---------------------------------------------------------------------------

struct Manifest {
    std::string config_json;                       // canonical config
    std::map<std::string, std::string> artifacts;  // rel path -> hex hash
    std::map<std::string, double> timings;         // command -> seconds
    std::string tool_version;

    std::string hash() const;  // over config + sorted artifacts + version
};

std::string hash_file(const std::string& path);
void write_text_atomic(const std::string& path, const std::string& text);

// Records artifacts for one command and folds them into out_dir/manifest.json.
// A manifest written for a different config is discarded, not merged.
class ArtifactStore {
  public:
    ArtifactStore(const RunConfig& cfg);

    std::string path(const std::string& rel) const;
    void record(const std::string& rel);
    void commit(const std::string& command, double seconds);

  private:
    std::string out_dir_;
    std::string config_json_;
    std::vector<std::string> recorded_;
};

// ---------------------------------------------------------------------------
// Commands. Each is idempotent for a fixed config+seed: re-running overwrites
// with bit-identical outputs and leaves the manifest hash unchanged.
// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg);
void cmd_train_base(const RunConfig& cfg);
void cmd_unlearn(const RunConfig& cfg);
// snapshot/baseline name artifacts: "m_init" or "m_hat_<method>"; empty
// snapshot defaults to the configured method's output, baseline to m_init.
void cmd_eval(const RunConfig& cfg, std::string snapshot_name = "",
              std::string baseline_name = "");
void cmd_report(const RunConfig& cfg);
int cmd_gradcheck(const RunConfig& cfg);  // 0 all pass, 4 otherwise

// Helpers shared by commands and the acceptance suite.
concepts::ConceptTable load_table(const RunConfig& cfg);
diffusion::ModelSnapshot load_named_snapshot(const RunConfig& cfg,
                                             const std::string& name,
                                             const concepts::ConceptTable& table);

// ---------------------------------------------------------------------------
// Gradient/property check suite behind cmd_gradcheck.
// ---------------------------------------------------------------------------

struct GradCheckItem {
    std::string name;
    bool ok = false;
    double detail = 0.0;  // worst violation / residual for the item
};

struct GradCheckReport {
    std::vector<GradCheckItem> items;
    bool all_ok() const;
    std::string to_text() const;
};

GradCheckReport run_gradcheck(uint64_t seed);

// ---------------------------------------------------------------------------
// SVG scatter panels, points colored by ground-truth classification.
// ---------------------------------------------------------------------------

struct ScatterPanel {
    std::string title;
    const concepts::SampleSet* samples = nullptr;
};

std::string render_scatter_svg(const std::string& title,
                               const std::vector<ScatterPanel>& panels, int columns,
                               const concepts::ConceptTable& table);

}  // namespace uforge::harness
