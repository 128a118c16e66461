#include "uforge/concepts.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace uforge::concepts {

using nlohmann::json;

Role role_from_string(const std::string& s) {
    if (s == "target") return Role::target;
    if (s == "anchor") return Role::anchor;
    if (s == "retain") return Role::retain;
    if (s == "ood-synonym") return Role::ood_synonym;
    throw ConfigError("unknown concept role: " + s);
}

std::string to_string(Role r) {
    switch (r) {
        case Role::target: return "target";
        case Role::anchor: return "anchor";
        case Role::retain: return "retain";
        case Role::ood_synonym: return "ood-synonym";
    }
    return "?";
}

const Concept& ConceptTable::target() const {
    for (const auto& c : concepts)
        if (c.role == Role::target) return c;
    throw DataError("concept table: no target concept");
}

const Concept& ConceptTable::anchor() const {
    for (const auto& c : concepts)
        if (c.role == Role::anchor) return c;
    throw DataError("concept table: no anchor concept");
}

const Concept& ConceptTable::by_id(const std::string& id) const {
    for (const auto& c : concepts)
        if (c.id == id) return c;
    throw DataError("concept table: no concept named " + id);
}

int ConceptTable::index_of(const std::string& id) const {
    for (size_t i = 0; i < concepts.size(); ++i)
        if (concepts[i].id == id) return static_cast<int>(i);
    return -1;
}

namespace {

double embedding_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

bool gen_bit_equal(const std::vector<GaussianComponent>& a,
                   const std::vector<GaussianComponent>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].mean != b[i].mean || a[i].sigma != b[i].sigma ||
            a[i].weight != b[i].weight)
            return false;
    }
    return true;
}

}  // namespace

void ConceptTable::validate() const {
    std::set<std::string> ids;
    int n_target = 0, n_anchor = 0;
    for (const auto& c : concepts) {
        if (!ids.insert(c.id).second)
            throw DataError("concept table: duplicate id " + c.id);
        if (c.embedding.size() != kEmbeddingDim)
            throw DataError("concept " + c.id + ": embedding dim != " +
                            std::to_string(kEmbeddingDim));
        double norm = 0.0;
        for (double v : c.embedding) norm += v * v;
        norm = std::sqrt(norm);
        if (std::abs(norm - 1.0) > 1e-9)
            throw DataError("concept " + c.id + ": embedding not unit norm");
        if (c.gen.empty())
            throw DataError("concept " + c.id + ": empty mixture");
        double wsum = 0.0;
        for (const auto& comp : c.gen) {
            if (!(comp.sigma > 0.0))
                throw DataError("concept " + c.id + ": sigma must be > 0");
            wsum += comp.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-12)
            throw DataError("concept " + c.id + ": mixture weights must sum to 1");
        if (c.role == Role::target) ++n_target;
        if (c.role == Role::anchor) ++n_anchor;
    }
    if (n_target != 1) throw DataError("concept table: need exactly one target");
    if (n_anchor != 1) throw DataError("concept table: need exactly one anchor");
    const Concept& tgt = target();
    for (const auto& c : concepts) {
        if (c.role == Role::ood_synonym) {
            if (!gen_bit_equal(c.gen, tgt.gen))
                throw DataError("synonym " + c.id + ": gen differs from target");
            if (c.embedding == tgt.embedding)
                throw DataError("synonym " + c.id + ": embedding equals target");
        }
    }
    for (size_t i = 0; i < concepts.size(); ++i)
        for (size_t j = i + 1; j < concepts.size(); ++j)
            if (embedding_distance(concepts[i].embedding, concepts[j].embedding) <= 0.1)
                throw DataError("concept table: embeddings of " + concepts[i].id +
                                " and " + concepts[j].id + " are too close");
}

uint64_t ConceptTable::content_hash() const {
    Fnv1a h;
    h.add_u64(seed);
    h.add_u64(concepts.size());
    for (const auto& c : concepts) {
        h.add_string(c.id);
        h.add_string(to_string(c.role));
        h.add_doubles(c.embedding);
        h.add_u64(c.gen.size());
        for (const auto& comp : c.gen) {
            h.add_double(comp.mean[0]);
            h.add_double(comp.mean[1]);
            h.add_double(comp.sigma);
            h.add_double(comp.weight);
        }
    }
    return h.digest();
}

std::string ConceptTable::to_json_string() const {
    json doc;
    doc["seed"] = seed;
    doc["concepts"] = json::array();
    for (const auto& c : concepts) {
        json jc;
        jc["id"] = c.id;
        jc["role"] = to_string(c.role);
        jc["embedding"] = c.embedding;
        jc["gen"] = json::array();
        for (const auto& comp : c.gen) {
            jc["gen"].push_back({{"mean", {comp.mean[0], comp.mean[1]}},
                                 {"sigma", comp.sigma},
                                 {"weight", comp.weight}});
        }
        doc["concepts"].push_back(std::move(jc));
    }
    return doc.dump(2) + "\n";
}

ConceptTable ConceptTable::from_json_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("concept table: ") + e.what());
    }
    ConceptTable table;
    table.seed = doc.at("seed").get<uint64_t>();
    for (const auto& jc : doc.at("concepts")) {
        Concept c;
        c.id = jc.at("id").get<std::string>();
        c.role = role_from_string(jc.at("role").get<std::string>());
        c.embedding = jc.at("embedding").get<std::vector<double>>();
        for (const auto& jcomp : jc.at("gen")) {
            GaussianComponent comp;
            comp.mean[0] = jcomp.at("mean")[0].get<double>();
            comp.mean[1] = jcomp.at("mean")[1].get<double>();
            comp.sigma = jcomp.at("sigma").get<double>();
            comp.weight = jcomp.at("weight").get<double>();
            c.gen.push_back(comp);
        }
        table.concepts.push_back(std::move(c));
    }
    table.validate();
    return table;
}

ConceptTable default_table(uint64_t seed) {
    ConceptTable table;
    table.seed = seed;
    auto gaussian = [](double mx, double my) {
        return std::vector<GaussianComponent>{{{mx, my}, 0.3, 1.0}};
    };
    table.concepts = {
        {"star", {}, Role::target, gaussian(2.0, 2.0)},
        {"blob", {}, Role::anchor, gaussian(-2.0, -2.0)},
        {"east", {}, Role::retain, gaussian(2.0, -2.0)},
        {"west", {}, Role::retain, gaussian(-2.0, 2.0)},
        {"starry", {}, Role::ood_synonym, gaussian(2.0, 2.0)},
    };

    Rng rng(Rng::derive(seed, 0x7AB1E));
    for (int attempt = 0; attempt < 1000; ++attempt) {
        for (auto& c : table.concepts) {
            std::vector<double> e(kEmbeddingDim);
            double norm = 0.0;
            for (auto& v : e) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (auto& v : e) v /= norm;
            c.embedding = std::move(e);
        }
        bool ok = true;
        for (size_t i = 0; i < table.concepts.size() && ok; ++i)
            for (size_t j = i + 1; j < table.concepts.size() && ok; ++j)
                ok = embedding_distance(table.concepts[i].embedding,
                                        table.concepts[j].embedding) > 0.1;
        if (ok) break;
    }
    table.validate();
    return table;
}

std::array<double, 2> draw_point(const Concept& c, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    const GaussianComponent* chosen = &c.gen.back();
    for (const auto& comp : c.gen) {
        acc += comp.weight;
        if (u < acc) {
            chosen = &comp;
            break;
        }
    }
    double z0 = rng.normal();
    double z1 = rng.normal();
    return {chosen->mean[0] + chosen->sigma * z0,
            chosen->mean[1] + chosen->sigma * z1};
}

SampleSet sample_ground_truth(const Concept& c, int n, uint64_t seed) {
    if (n <= 0) throw DataError("sample_ground_truth: n must be > 0");
    SampleSet out;
    out.provenance = "ground-truth";
    out.seed = seed;
    out.points.reserve(n);
    out.labels.assign(n, c.id);
    Rng rng(seed);
    for (int i = 0; i < n; ++i) out.points.push_back(draw_point(c, rng));
    return out;
}

double mixture_density(const Concept& c, double x, double y) {
    double acc = 0.0;
    for (const auto& comp : c.gen) {
        double dx = x - comp.mean[0];
        double dy = y - comp.mean[1];
        double s2 = comp.sigma * comp.sigma;
        acc += comp.weight / (6.283185307179586 * s2) *
               std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
    }
    return acc;
}

std::string bayes_classify(const ConceptTable& table, double x, double y) {
    int best = -1;
    double best_density = -1.0;
    for (size_t i = 0; i < table.concepts.size(); ++i) {
        const auto& c = table.concepts[i];
        if (c.role == Role::ood_synonym) continue;
        if (c.gen.empty()) continue;
        double d = mixture_density(c, x, y);
        if (d > best_density) {  // strict: ties keep the lowest index
            best_density = d;
            best = static_cast<int>(i);
        }
    }
    if (best < 0) throw DataError("bayes_classify: no classifiable concepts");
    return table.concepts[best].id;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void SampleSet::write_csv(const std::string& path) const {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("sample set: cannot open " + tmp);
        f << "x,y,label,provenance\n";
        char buf[64];
        for (size_t i = 0; i < points.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", points[i][0]);
            f << buf << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", points[i][1]);
            f << buf << "," << labels[i] << "," << provenance << "\n";
        }
        if (!f) throw IoError("sample set: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

SampleSet SampleSet::read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError("sample set: cannot open " + path);
    SampleSet out;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        size_t p1 = line.find(',');
        size_t p2 = line.find(',', p1 + 1);
        size_t p3 = line.find(',', p2 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos)
            throw IoError("sample set: malformed row in " + path);
        out.points.push_back({std::stod(line.substr(0, p1)),
                              std::stod(line.substr(p1 + 1, p2 - p1 - 1))});
        out.labels.push_back(line.substr(p2 + 1, p3 - p2 - 1));
        out.provenance = line.substr(p3 + 1);
    }
    return out;
}

}  // namespace uforge::concepts
