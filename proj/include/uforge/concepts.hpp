#pragma once

// The synthetic concept universe: embeddings standing in for frozen text
// encodings, plus ground-truth 2-D mixture distributions per concept. The
// ood-synonym concept shares the target's distribution under a different
// embedding, so the base model learns two routes to one distribution.

#include <array>
#include <string>
#include <vector>

#include "uforge/common.hpp"

namespace uforge::concepts {

inline constexpr int kEmbeddingDim = 8;

enum class Role { target, anchor, retain, ood_synonym };

Role role_from_string(const std::string& s);
std::string to_string(Role r);

struct GaussianComponent {
    std::array<double, 2> mean{0.0, 0.0};
    double sigma = 1.0;
    double weight = 1.0;
};

struct Concept {
    std::string id;
    std::vector<double> embedding;  // unit norm
    Role role = Role::retain;
    std::vector<GaussianComponent> gen;
};

struct ConceptTable {
    std::vector<Concept> concepts;
    uint64_t seed = 0;

    const Concept& target() const;
    const Concept& anchor() const;
    const Concept& by_id(const std::string& id) const;
    int index_of(const std::string& id) const;  // -1 when absent

    // Enforces the table invariants; throws DataError on violation.
    void validate() const;
    uint64_t content_hash() const;

    std::string to_json_string() const;
    static ConceptTable from_json_string(const std::string& text);
};

// The canonical five-concept fixture: target "star", anchor "blob", retains
// "east"/"west", and ood-synonym "starry" whose gen equals the target's.
ConceptTable default_table(uint64_t seed);

struct SampleSet {
    std::vector<std::array<double, 2>> points;
    std::vector<std::string> labels;  // per-point concept id
    std::string provenance;           // "ground-truth" or a model tag
    uint64_t seed = 0;

    void write_csv(const std::string& path) const;
    static SampleSet read_csv(const std::string& path);
};

SampleSet sample_ground_truth(const Concept& c, int n, uint64_t seed);

// One mixture draw; component choice consumes one uniform, the point two
// normals. sample_ground_truth is a loop over this.
std::array<double, 2> draw_point(const Concept& c, Rng& rng);

// Mixture density at a point (full normalization, so different sigmas
// compare correctly).
double mixture_density(const Concept& c, double x, double y);

// Ground-truth density classifier over the table's class set. Synonyms are
// excluded (they share the target's density); ties break to the lowest
// table index.
std::string bayes_classify(const ConceptTable& table, double x, double y);

}  // namespace uforge::concepts
