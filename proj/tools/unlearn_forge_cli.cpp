// unlearn-forge: reproducible driver for the concept-unlearning laboratory.
// Pipeline: gen-data -> train-base -> unlearn -> eval -> report, plus a
// gradcheck command that runs every gradient/property check.

#include <cstdio>

#include "CLI11.hpp"
#include "uforge/harness.hpp"

using namespace uforge;

namespace {

struct CliOptions {
    std::string config_path;
    std::string method;
    std::string out_dir;
    std::string snapshot;
    std::string baseline;
    long long seed = -1;
    bool seed_set = false;
};

harness::RunConfig make_config(const CliOptions& opt, const std::string& command) {
    harness::RunConfig cfg;
    if (!opt.config_path.empty()) cfg = harness::RunConfig::load(opt.config_path);
    if (!opt.method.empty())
        cfg.unlearn.method = doco::method_from_string(opt.method);
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    if (opt.seed_set) {
        uint64_t seed = static_cast<uint64_t>(opt.seed);
        // --seed overrides the seed the command actually consumes
        if (command == "gen-data") cfg.table_seed = seed;
        else if (command == "train-base") cfg.base.seed = seed;
        else if (command == "unlearn") cfg.unlearn.seed = seed;
        else cfg.eval_seed = seed;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unlearn-forge: concept unlearning laboratory for a 2-D "
                 "conditional denoising diffusion model"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string command;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path,
                        "experiment config (JSON); empty or absent fields use the "
                        "canonical defaults");
        sub->add_option("--out", opt.out_dir, "output directory override");
        sub->add_option("--seed", opt.seed,
                        "override the seed this command consumes (gen-data: table "
                        "seed, train-base: training seed, unlearn: run seed, "
                        "eval/report/gradcheck: eval seed)")
            ->check(CLI::NonNegativeNumber);
        sub->callback([&, sub] {
            command = sub->get_name();
            opt.seed_set = sub->count("--seed") > 0;
        });
        return sub;
    };

    add_common(app.add_subcommand("gen-data",
                                  "write the concept table and ground-truth samples"));
    add_common(app.add_subcommand("train-base", "train the base diffusion model"));
    auto* sub_unlearn =
        add_common(app.add_subcommand("unlearn", "run an unlearning method"));
    sub_unlearn->add_option("--method", opt.method,
                            "doco-cp | doco-l2retain | doco-noretain | pairwise-l2");
    auto* sub_eval = add_common(
        app.add_subcommand("eval", "score a snapshot against the base model"));
    sub_eval->add_option("--method", opt.method, "method whose snapshot to score");
    sub_eval->add_option("--snapshot", opt.snapshot,
                         "snapshot name (m_init or m_hat_<method>)");
    sub_eval->add_option("--baseline", opt.baseline, "baseline snapshot name");
    add_common(app.add_subcommand("report",
                                  "comparison table and before/after scatter plots"));
    add_common(app.add_subcommand("gradcheck",
                                  "finite-difference and projection property checks"));

    CLI11_PARSE(app, argc, argv);

    try {
        harness::RunConfig cfg = make_config(opt, command);
        if (command == "gen-data") {
            harness::cmd_gen_data(cfg);
        } else if (command == "train-base") {
            harness::cmd_train_base(cfg);
        } else if (command == "unlearn") {
            harness::cmd_unlearn(cfg);
        } else if (command == "eval") {
            harness::cmd_eval(cfg, opt.snapshot, opt.baseline);
        } else if (command == "report") {
            harness::cmd_report(cfg);
        } else if (command == "gradcheck") {
            return harness::cmd_gradcheck(cfg);
        }
        std::printf("%s: done (out: %s)\n", command.c_str(), cfg.out_dir.c_str());
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const MissingArtifactError& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
