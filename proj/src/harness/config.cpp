#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "uforge/harness.hpp"

namespace uforge::harness {

using nlohmann::json;

namespace {

bool blank(const std::string& text) {
    return std::all_of(text.begin(), text.end(),
                       [](unsigned char c) { return std::isspace(c); });
}

int line_of_byte(const std::string& text, size_t byte) {
    int line = 1;
    for (size_t i = 0; i < byte && i < text.size(); ++i)
        if (text[i] == '\n') ++line;
    return line;
}

void check_fields(const json& section, const std::string& prefix,
                  std::initializer_list<const char*> allowed,
                  const std::string& origin) {
    for (const auto& [key, value] : section.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
                return key == a;
            }) == allowed.end())
            throw ConfigError(origin + ": unknown config field '" + prefix + key + "'");
    }
}

template <typename T>
void read_field(const json& section, const char* key, T& out,
                const std::string& prefix, const std::string& origin) {
    if (!section.contains(key)) return;
    try {
        out = section.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(origin + ": bad value for field '" + prefix + key +
                          "': " + e.what());
    }
}

}  // namespace

RunConfig RunConfig::from_json_string(const std::string& text,
                                      const std::string& origin) {
    RunConfig cfg;
    if (blank(text)) return cfg;

    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ":" + std::to_string(line_of_byte(text, e.byte)) +
                          ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError(origin + ": config root must be an object");
    check_fields(doc, "", {"concepts", "diffusion", "unlearn", "eval", "out_dir"},
                 origin);

    if (doc.contains("concepts")) {
        const json& c = doc["concepts"];
        check_fields(c, "concepts.", {"seed", "samples_n"}, origin);
        read_field(c, "seed", cfg.table_seed, "concepts.", origin);
        read_field(c, "samples_n", cfg.gen_samples_n, "concepts.", origin);
    }
    if (doc.contains("diffusion")) {
        const json& d = doc["diffusion"];
        check_fields(d, "diffusion.", {"T", "hidden", "steps", "batch", "lr", "seed"},
                     origin);
        read_field(d, "T", cfg.T, "diffusion.", origin);
        read_field(d, "hidden", cfg.base.hidden, "diffusion.", origin);
        read_field(d, "steps", cfg.base.steps, "diffusion.", origin);
        read_field(d, "batch", cfg.base.batch, "diffusion.", origin);
        read_field(d, "lr", cfg.base.lr, "diffusion.", origin);
        read_field(d, "seed", cfg.base.seed, "diffusion.", origin);
    }
    if (doc.contains("unlearn")) {
        const json& u = doc["unlearn"];
        check_fields(u, "unlearn.",
                     {"method", "iterations", "warmup", "batch", "gen_lr", "disc_lr",
                      "lambda", "seed", "retain", "pool_size", "snapshot_every",
                      "disc_hidden", "per_tensor_surgery", "held_out_n"},
                     origin);
        std::string method = doco::to_string(cfg.unlearn.method);
        read_field(u, "method", method, "unlearn.", origin);
        try {
            cfg.unlearn.method = doco::method_from_string(method);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ": field 'unlearn.method': " + e.what());
        }
        read_field(u, "iterations", cfg.unlearn.iterations, "unlearn.", origin);
        read_field(u, "warmup", cfg.unlearn.warmup, "unlearn.", origin);
        read_field(u, "batch", cfg.unlearn.batch, "unlearn.", origin);
        read_field(u, "gen_lr", cfg.unlearn.gen_lr, "unlearn.", origin);
        read_field(u, "disc_lr", cfg.unlearn.disc_lr, "unlearn.", origin);
        read_field(u, "lambda", cfg.unlearn.lambda, "unlearn.", origin);
        read_field(u, "seed", cfg.unlearn.seed, "unlearn.", origin);
        read_field(u, "retain", cfg.unlearn.retain_ids, "unlearn.", origin);
        read_field(u, "pool_size", cfg.unlearn.pool_size, "unlearn.", origin);
        read_field(u, "snapshot_every", cfg.unlearn.snapshot_every, "unlearn.", origin);
        read_field(u, "disc_hidden", cfg.unlearn.disc_hidden, "unlearn.", origin);
        read_field(u, "per_tensor_surgery", cfg.unlearn.per_tensor_surgery, "unlearn.",
                   origin);
        read_field(u, "held_out_n", cfg.unlearn.held_out_n, "unlearn.", origin);
    }
    if (doc.contains("eval")) {
        const json& e = doc["eval"];
        check_fields(e, "eval.", {"n", "seed"}, origin);
        read_field(e, "n", cfg.eval_n, "eval.", origin);
        read_field(e, "seed", cfg.eval_seed, "eval.", origin);
    }
    read_field(doc, "out_dir", cfg.out_dir, "", origin);

    if (cfg.T < 2) throw ConfigError(origin + ": field 'diffusion.T' must be >= 2");
    if (cfg.eval_n < 3) throw ConfigError(origin + ": field 'eval.n' must be >= 3");
    if (cfg.gen_samples_n < 1)
        throw ConfigError(origin + ": field 'concepts.samples_n' must be >= 1");
    if (cfg.out_dir.empty()) throw ConfigError(origin + ": field 'out_dir' is empty");
    try {
        cfg.unlearn.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
    return from_json_string(text, path);
}

std::string RunConfig::to_json_string() const {
    json doc;
    doc["concepts"] = {{"seed", table_seed}, {"samples_n", gen_samples_n}};
    doc["diffusion"] = {{"T", T},
                        {"hidden", base.hidden},
                        {"steps", base.steps},
                        {"batch", base.batch},
                        {"lr", base.lr},
                        {"seed", base.seed}};
    doc["unlearn"] = {{"method", doco::to_string(unlearn.method)},
                      {"iterations", unlearn.iterations},
                      {"warmup", unlearn.warmup},
                      {"batch", unlearn.batch},
                      {"gen_lr", unlearn.gen_lr},
                      {"disc_lr", unlearn.disc_lr},
                      {"lambda", unlearn.lambda},
                      {"seed", unlearn.seed},
                      {"retain", unlearn.retain_ids},
                      {"pool_size", unlearn.pool_size},
                      {"snapshot_every", unlearn.snapshot_every},
                      {"disc_hidden", unlearn.disc_hidden},
                      {"per_tensor_surgery", unlearn.per_tensor_surgery},
                      {"held_out_n", unlearn.held_out_n}};
    doc["eval"] = {{"n", eval_n}, {"seed", eval_seed}};
    doc["out_dir"] = out_dir;
    return doc.dump(2) + "\n";
}

}  // namespace uforge::harness
