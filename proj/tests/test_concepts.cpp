#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <map>

#include "uforge/concepts.hpp"

using namespace uforge;
using namespace uforge::concepts;

TEST_CASE("default table construction postconditions") {
    ConceptTable t = default_table(7);
    int targets = 0, anchors = 0, synonyms = 0;
    for (const auto& c : t.concepts) {
        targets += c.role == Role::target;
        anchors += c.role == Role::anchor;
        synonyms += c.role == Role::ood_synonym;
    }
    CHECK(targets == 1);
    CHECK(anchors == 1);
    CHECK(synonyms == 1);

    const Concept& star = t.by_id("star");
    const Concept& starry = t.by_id("starry");
    REQUIRE(star.gen.size() == starry.gen.size());
    CHECK(star.gen[0].mean == starry.gen[0].mean);
    CHECK(star.gen[0].sigma == starry.gen[0].sigma);
    CHECK(star.gen[0].weight == starry.gen[0].weight);
    CHECK(star.embedding != starry.embedding);
}

TEST_CASE("default table is deterministic per seed") {
    ConceptTable a = default_table(7);
    ConceptTable b = default_table(7);
    ConceptTable c = default_table(8);
    CHECK(a.content_hash() == b.content_hash());
    for (size_t i = 0; i < a.concepts.size(); ++i)
        CHECK(a.concepts[i].embedding == b.concepts[i].embedding);
    CHECK(a.content_hash() != c.content_hash());
    CHECK(a.by_id("star").embedding != c.by_id("star").embedding);
}

TEST_CASE("ground truth sampling hits the mixture mean") {
    ConceptTable t = default_table(3);
    const int n = 100000;
    SampleSet s = sample_ground_truth(t.by_id("blob"), n, 550);
    double mx = 0, my = 0;
    for (const auto& p : s.points) {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    double bound = 3.0 * 0.3 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mx + 2.0) < bound);
    CHECK(std::abs(my + 2.0) < bound);
}

TEST_CASE("zero-variance mixture collapses to the mean") {
    Concept c;
    c.id = "point";
    c.gen = {{{1.25, -0.5}, 0.0, 1.0}};  // test-only degenerate component
    SampleSet s = sample_ground_truth(c, 64, 9);
    for (const auto& p : s.points) {
        CHECK(p[0] == 1.25);
        CHECK(p[1] == -0.5);
    }
}

TEST_CASE("two equal-weight components split occupancy evenly") {
    Concept c;
    c.id = "pair";
    c.gen = {{{-10.0, 0.0}, 0.1, 0.5}, {{10.0, 0.0}, 0.1, 0.5}};
    const int n = 10000;
    SampleSet s = sample_ground_truth(c, n, 77);
    int left = 0;
    for (const auto& p : s.points) left += p[0] < 0.0;
    double sd = std::sqrt(n * 0.25);
    CHECK(std::abs(left - n / 2) < 3.0 * sd);
}

TEST_CASE("sampling is reproducible bit-for-bit") {
    ConceptTable t = default_table(1);
    SampleSet a = sample_ground_truth(t.by_id("east"), 500, 31);
    SampleSet b = sample_ground_truth(t.by_id("east"), 500, 31);
    CHECK(a.points == b.points);
    SampleSet c = sample_ground_truth(t.by_id("east"), 500, 32);
    CHECK(a.points != c.points);
}

TEST_CASE("bayes classifier picks the density peak") {
    ConceptTable t = default_table(7);
    CHECK(bayes_classify(t, 2.0, 2.0) == "star");
    CHECK(bayes_classify(t, -2.0, -2.0) == "blob");
    CHECK(bayes_classify(t, 2.0, -2.0) == "east");
}

TEST_CASE("bayes tie breaks to the lowest table index") {
    ConceptTable t = default_table(7);
    // equidistant from all four means with equal sigma
    CHECK(bayes_classify(t, 0.0, 0.0) == t.concepts[0].id);
}

TEST_CASE("bayes self-classification accuracy on the default geometry") {
    ConceptTable t = default_table(7);
    const int n = 10000;
    for (const auto& c : t.concepts) {
        if (c.role == Role::ood_synonym) continue;
        SampleSet s = sample_ground_truth(c, n, Rng::derive(400, t.index_of(c.id)));
        int hits = 0;
        for (const auto& p : s.points)
            hits += bayes_classify(t, p[0], p[1]) == c.id;
        CHECK(static_cast<double>(hits) / n >= 0.99);
    }
}

TEST_CASE("bayes classification is invariant under uniform weight rescaling") {
    ConceptTable t = default_table(7);
    ConceptTable scaled = t;
    for (auto& c : scaled.concepts)
        for (auto& comp : c.gen) comp.weight *= 7.25;
    Rng rng(88);
    for (int i = 0; i < 200; ++i) {
        double x = rng.uniform(-4.0, 4.0);
        double y = rng.uniform(-4.0, 4.0);
        CHECK(bayes_classify(t, x, y) == bayes_classify(scaled, x, y));
    }
}

TEST_CASE("table json round trip preserves content") {
    ConceptTable t = default_table(19);
    std::string text = t.to_json_string();
    ConceptTable u = ConceptTable::from_json_string(text);
    CHECK(u.content_hash() == t.content_hash());
    CHECK(u.by_id("west").embedding == t.by_id("west").embedding);
}

TEST_CASE("sample set csv round trip") {
    ConceptTable t = default_table(2);
    SampleSet s = sample_ground_truth(t.by_id("star"), 50, 5);
    auto path = std::filesystem::temp_directory_path() / "uforge_samples_test.csv";
    s.write_csv(path.string());
    SampleSet r = SampleSet::read_csv(path.string());
    CHECK(r.points == s.points);
    CHECK(r.labels == s.labels);
    CHECK(r.provenance == s.provenance);
    std::filesystem::remove(path);
}

TEST_CASE("table validation rejects broken invariants") {
    ConceptTable t = default_table(7);
    ConceptTable bad = t;
    bad.concepts[0].gen[0].weight = 0.5;
    CHECK_THROWS_AS(bad.validate(), DataError);
    bad = t;
    bad.concepts[1].role = Role::retain;  // drops the anchor
    CHECK_THROWS_AS(bad.validate(), DataError);
    bad = t;
    bad.concepts[4].gen[0].sigma = 0.4;  // synonym gen no longer bit-equal
    CHECK_THROWS_AS(bad.validate(), DataError);
}
