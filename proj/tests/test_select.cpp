#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "asfda/select.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace asfda;
using testutil::TempDir;

namespace {

SliceUncertainty score(const std::string& id, double u, double mean_entropy = 0.0,
                       double mean_max_prob = 1.0) {
    SliceUncertainty s;
    s.slice_id = id;
    s.u = u;
    s.mean_entropy = mean_entropy;
    s.mean_max_prob = mean_max_prob;
    return s;
}

FeatureVector fv(std::vector<float> v) { return FeatureVector{std::move(v)}; }

// Well-separated blobs: cluster c sits at (100c, 100c) with jitter well under
// the inter-blob gap.
std::vector<std::pair<std::string, FeatureVector>> blob_features(int blobs, int per_blob,
                                                                 std::uint64_t seed,
                                                                 std::vector<int>* truth) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> jitter(-1.0f, 1.0f);
    std::vector<std::pair<std::string, FeatureVector>> out;
    for (int b = 0; b < blobs; ++b)
        for (int i = 0; i < per_blob; ++i) {
            const float cx = 100.0f * b;
            out.emplace_back("b" + std::to_string(b) + "_" + std::to_string(i),
                             fv({cx + jitter(gen), cx + jitter(gen)}));
            if (truth) truth->push_back(b);
        }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Budget and capacity
// ---------------------------------------------------------------------------

TEST_CASE("budget rounds and never drops below one") {
    SelectionConfig cfg;
    cfg.budget_fraction = 0.05;
    CHECK(cfg.budget(64) == 3);   // round(3.2)
    CHECK(cfg.budget(100) == 5);
    CHECK(cfg.budget(4) == 1);    // round(0.2) clamped up
    cfg.budget_fraction = 0.5;
    CHECK(cfg.budget(5) == 3);    // round half away from zero
}

TEST_CASE("capacity is multiplier times budget, capped at the dataset") {
    SelectionConfig cfg;
    cfg.budget_fraction = 0.05;
    cfg.capacity_multiplier = 4;
    CHECK(cfg.capacity(64) == 12);
    cfg.capacity_multiplier = 100;
    CHECK(cfg.capacity(64) == 64);
}

TEST_CASE("selection config validation") {
    SelectionConfig cfg;
    cfg.budget_fraction = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.budget_fraction = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.capacity_multiplier = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("strategy names parse both ways") {
    for (const char* name :
         {"ugtst", "random", "least_confidence", "mean_entropy", "centroid"})
        CHECK(strategy_name(parse_strategy(name)) == std::string(name));
    CHECK_THROWS_AS(parse_strategy("entropy"), ConfigError);
}

// ---------------------------------------------------------------------------
// Uncertainty partition
// ---------------------------------------------------------------------------

TEST_CASE("partition: top capacity slices by descending score") {
    const std::vector<SliceUncertainty> scores = {score("a", 0.9), score("b", 0.5),
                                                  score("c", 0.1), score("d", 0.7)};
    SelectionConfig cfg;
    cfg.budget_fraction = 0.25;  // M = 1
    cfg.capacity_multiplier = 2; // N_tu = 2
    const auto [tu, ts] = partition_by_uncertainty(scores, cfg);
    CHECK(tu == std::vector<std::string>{"a", "d"});
    CHECK(ts == std::vector<std::string>{"b", "c"});
}

TEST_CASE("partition: capacity covering everything empties the stable set") {
    const std::vector<SliceUncertainty> scores = {score("a", 0.9), score("b", 0.5),
                                                  score("c", 0.1), score("d", 0.7)};
    SelectionConfig cfg;
    cfg.budget_fraction = 0.25;
    cfg.capacity_multiplier = 8;
    const auto [tu, ts] = partition_by_uncertainty(scores, cfg);
    CHECK(tu.size() == 4);
    CHECK(ts.empty());
}

TEST_CASE("partition: equal scores break ties by ascending id") {
    const std::vector<SliceUncertainty> scores = {score("z", 0.5), score("a", 0.5),
                                                  score("m", 0.5), score("b", 0.5)};
    SelectionConfig cfg;
    cfg.budget_fraction = 0.25;
    cfg.capacity_multiplier = 2;
    const auto [tu, ts] = partition_by_uncertainty(scores, cfg);
    CHECK(tu == std::vector<std::string>{"a", "b"});
    CHECK(ts == std::vector<std::string>{"m", "z"});
}

// ---------------------------------------------------------------------------
// k-means++ selection
// ---------------------------------------------------------------------------

TEST_CASE("one cluster: the pick is the point nearest the mean") {
    const std::vector<std::pair<std::string, FeatureVector>> pts = {
        {"p0", fv({0.0f})}, {"p1", fv({1.0f})}, {"p2", fv({2.0f})}, {"p3", fv({7.0f})}};
    const ClusterResult res = kmeanspp_select(pts, 1, 3);
    REQUIRE(res.picked.size() == 1);

    // Brute force: Lloyd with one cluster converges to the global mean 2.5,
    // and p2 is nearest.
    CHECK(res.picked[0] == "p2");
    CHECK(res.assignment == std::vector<int>(4, 0));
}

TEST_CASE("m equal to n picks every point") {
    const std::vector<std::pair<std::string, FeatureVector>> pts = {
        {"a", fv({0.0f})}, {"b", fv({5.0f})}, {"c", fv({9.0f})}};
    const ClusterResult res = kmeanspp_select(pts, 3, 1);
    CHECK(res.picked == std::vector<std::string>{"a", "b", "c"});
    for (double d : res.picked_distance) CHECK(d == 0.0);
}

TEST_CASE("well-separated blobs: exactly one pick per blob") {
    for (int m : {2, 3, 5}) {
        std::vector<int> truth;
        const auto pts = blob_features(m, 6, 900 + m, &truth);
        for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
            const ClusterResult res = kmeanspp_select(pts, m, seed);
            REQUIRE(static_cast<int>(res.picked.size()) == m);

            std::set<int> blobs_hit;
            for (const auto& id : res.picked) {
                const auto it = std::find_if(pts.begin(), pts.end(),
                                             [&](const auto& p) { return p.first == id; });
                REQUIRE(it != pts.end());
                blobs_hit.insert(truth[it - pts.begin()]);
            }
            CHECK(static_cast<int>(blobs_hit.size()) == m);

            // Cluster assignment must agree with blob membership.
            for (std::size_t i = 0; i < pts.size(); ++i)
                for (std::size_t j = 0; j < pts.size(); ++j)
                    if (truth[i] == truth[j])
                        CHECK(res.assignment[i] == res.assignment[j]);
        }
    }
}

TEST_CASE("clustering is deterministic in its seed") {
    const auto pts = blob_features(3, 5, 17, nullptr);
    const ClusterResult a = kmeanspp_select(pts, 3, 42);
    const ClusterResult b = kmeanspp_select(pts, 3, 42);
    CHECK(a.picked == b.picked);
    CHECK(a.assignment == b.assignment);
}

TEST_CASE("coincident points still yield m distinct picks") {
    const std::vector<std::pair<std::string, FeatureVector>> pts = {
        {"a", fv({1.0f, 1.0f})}, {"b", fv({1.0f, 1.0f})}, {"c", fv({1.0f, 1.0f})}};
    const ClusterResult res = kmeanspp_select(pts, 2, 7);
    REQUIRE(res.picked.size() == 2);
    CHECK(res.picked[0] != res.picked[1]);
}

TEST_CASE("clustering input validation") {
    const std::vector<std::pair<std::string, FeatureVector>> pts = {{"a", fv({1.0f})},
                                                                    {"b", fv({2.0f})}};
    CHECK_THROWS_AS(kmeanspp_select(pts, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(kmeanspp_select(pts, 3, 1), std::invalid_argument);
    const std::vector<std::pair<std::string, FeatureVector>> ragged = {{"a", fv({1.0f})},
                                                                       {"b", fv({2.0f, 3.0f})}};
    CHECK_THROWS_AS(kmeanspp_select(ragged, 1, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Full strategy dispatch
// ---------------------------------------------------------------------------

namespace {

std::vector<SliceUncertainty> mixed_scores(int n, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(0.0, 0.693);
    std::vector<SliceUncertainty> out;
    for (int i = 0; i < n; ++i) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "s%02d", i);
        out.push_back(score(buf, u(gen), u(gen), 0.5 + 0.5 * u(gen)));
    }
    return out;
}

std::map<std::string, FeatureVector> features_for(const std::vector<SliceUncertainty>& scores,
                                                  std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> f(0.0f, 4.0f);
    std::map<std::string, FeatureVector> out;
    for (const auto& s : scores) out[s.slice_id] = fv({f(gen), f(gen), f(gen)});
    return out;
}

} // namespace

TEST_CASE("partition laws hold for every strategy") {
    const auto scores = mixed_scores(20, 5);
    const auto features = features_for(scores, 6);

    for (Strategy st : {Strategy::ugtst, Strategy::random, Strategy::least_confidence,
                        Strategy::mean_entropy, Strategy::centroid}) {
        for (std::uint64_t seed : {11ull, 12ull}) {
            SelectionConfig cfg;
            cfg.budget_fraction = 0.15;   // M = 3
            cfg.capacity_multiplier = 3;  // N_tu = 9 (all 20 for centroid)
            cfg.seed = seed;
            cfg.strategy = st;
            const SelectionPartition p = select_samples(scores, features, cfg);

            CHECK(p.d_ta.size() == 3);
            CHECK(p.d_tu.size() + p.d_ts.size() == scores.size());
            CHECK(p.records.size() == scores.size());

            const std::set<std::string> ta(p.d_ta.begin(), p.d_ta.end());
            const std::set<std::string> tu(p.d_tu.begin(), p.d_tu.end());
            const std::set<std::string> ts(p.d_ts.begin(), p.d_ts.end());
            CHECK(ta.size() == 3);  // picks are distinct
            for (const auto& id : ta) CHECK(tu.count(id));
            for (const auto& id : ts) CHECK_FALSE(tu.count(id));

            // Records are score-descending with ids breaking ties, and the
            // set labels agree with the id lists.
            int ta_rows = 0;
            for (std::size_t i = 0; i < p.records.size(); ++i) {
                const auto& r = p.records[i];
                if (i > 0) {
                    const auto& q = p.records[i - 1];
                    CHECK((q.u > r.u || (q.u == r.u && q.slice_id < r.slice_id)));
                }
                if (r.set == SelectionRecord::Set::ta) {
                    ++ta_rows;
                    CHECK(ta.count(r.slice_id));
                    if (st == Strategy::ugtst || st == Strategy::centroid) {
                        CHECK(r.cluster_id.has_value());
                        CHECK(r.distance_to_centroid.has_value());
                    }
                } else if (r.set == SelectionRecord::Set::ts) {
                    CHECK(ts.count(r.slice_id));
                    CHECK_FALSE(r.cluster_id.has_value());
                }
            }
            CHECK(ta_rows == 3);
        }
    }
}

TEST_CASE("centroid strategy clusters the whole dataset") {
    const auto scores = mixed_scores(12, 8);
    const auto features = features_for(scores, 9);
    SelectionConfig cfg;
    cfg.budget_fraction = 0.25;
    cfg.capacity_multiplier = 1;  // would cap the pool at 3 for other strategies
    cfg.strategy = Strategy::centroid;
    const SelectionPartition p = select_samples(scores, features, cfg);
    CHECK(p.d_tu.size() == 12);
    CHECK(p.d_ts.empty());
    CHECK(p.d_ta.size() == 3);
}

TEST_CASE("least confidence ranks by one minus the max posterior") {
    std::vector<SliceUncertainty> scores = {score("a", 0.1, 0.1, 0.99),
                                            score("b", 0.2, 0.2, 0.60),
                                            score("c", 0.3, 0.3, 0.80)};
    SelectionConfig cfg;
    cfg.budget_fraction = 1.0 / 3.0;  // M = 1
    cfg.capacity_multiplier = 2;
    cfg.strategy = Strategy::least_confidence;
    const SelectionPartition p = select_samples(scores, {}, cfg);
    CHECK(p.d_ta == std::vector<std::string>{"b"});
    CHECK(p.d_tu == std::vector<std::string>{"b", "c"});
    CHECK(p.records[0].u == doctest::Approx(0.4));
}

TEST_CASE("mean entropy ranks by the whole-image mean") {
    std::vector<SliceUncertainty> scores = {score("a", 0.9, 0.10), score("b", 0.1, 0.60),
                                            score("c", 0.5, 0.30)};
    SelectionConfig cfg;
    cfg.budget_fraction = 1.0 / 3.0;
    cfg.capacity_multiplier = 1;
    cfg.strategy = Strategy::mean_entropy;
    const SelectionPartition p = select_samples(scores, {}, cfg);
    CHECK(p.d_ta == std::vector<std::string>{"b"});
}

TEST_CASE("random strategy: seeded, deterministic, spans the dataset over seeds") {
    const auto scores = mixed_scores(10, 3);
    SelectionConfig cfg;
    cfg.budget_fraction = 0.2;  // M = 2
    cfg.capacity_multiplier = 1;
    cfg.strategy = Strategy::random;

    cfg.seed = 1;
    const auto a = select_samples(scores, {}, cfg);
    const auto b = select_samples(scores, {}, cfg);
    CHECK(a.d_ta == b.d_ta);

    std::set<std::string> seen;
    for (std::uint64_t s = 0; s < 40; ++s) {
        cfg.seed = s;
        for (const auto& id : select_samples(scores, {}, cfg).d_ta) seen.insert(id);
    }
    CHECK(seen.size() == 10);  // every slice is reachable
}

TEST_CASE("ugtst picks spread across feature blobs inside the pool") {
    // 9 high-uncertainty slices in 3 blobs + 11 low-uncertainty ones. The
    // pool is the 9, and the picks must cover all 3 blobs.
    std::vector<SliceUncertainty> scores;
    std::map<std::string, FeatureVector> features;
    std::mt19937_64 gen(15);
    std::uniform_real_distribution<float> jitter(-0.5f, 0.5f);
    for (int i = 0; i < 9; ++i) {
        const std::string id = "hot" + std::to_string(i);
        scores.push_back(score(id, 0.6 + 0.001 * i));
        const float c = 50.0f * (i % 3);
        features[id] = fv({c + jitter(gen), c + jitter(gen)});
    }
    for (int i = 0; i < 11; ++i) {
        const std::string id = "cold" + std::to_string(i);
        scores.push_back(score(id, 0.01 * i));
        features[id] = fv({jitter(gen), jitter(gen)});
    }

    SelectionConfig cfg;
    cfg.budget_fraction = 0.15;   // M = 3
    cfg.capacity_multiplier = 3;  // N_tu = 9
    cfg.strategy = Strategy::ugtst;
    cfg.seed = 2;
    const SelectionPartition p = select_samples(scores, features, cfg);

    REQUIRE(p.d_ta.size() == 3);
    std::set<int> blobs;
    for (const auto& id : p.d_ta) {
        REQUIRE(id.rfind("hot", 0) == 0);
        blobs.insert((id[3] - '0') % 3);
    }
    CHECK(blobs.size() == 3);
}

TEST_CASE("select_samples demands features only for clustered slices") {
    const auto scores = mixed_scores(8, 21);
    SelectionConfig cfg;
    cfg.budget_fraction = 0.25;
    cfg.capacity_multiplier = 2;
    cfg.strategy = Strategy::ugtst;
    CHECK_THROWS_AS(select_samples(scores, {}, cfg), std::invalid_argument);
    cfg.strategy = Strategy::random;
    CHECK_NOTHROW(select_samples(scores, {}, cfg));
}

TEST_CASE("selection CSV layout") {
    TempDir dir("sel");
    SelectionPartition p;
    p.strategy = Strategy::ugtst;
    p.seed = 9;
    SelectionRecord r;
    r.slice_id = "s1";
    r.u = 0.625;
    r.set = SelectionRecord::Set::ta;
    r.cluster_id = 2;
    r.distance_to_centroid = 0.5;
    p.records.push_back(r);
    r = {};
    r.slice_id = "s2";
    r.u = 0.25;
    r.set = SelectionRecord::Set::ts;
    p.records.push_back(r);

    write_selection_csv(dir / "sel.csv", p);
    CHECK(testutil::read_text(dir / "sel.csv") ==
          "slice_id,u,set,cluster_id,distance_to_centroid,strategy,seed\n"
          "s1,0.625,ta,2,0.5,ugtst,9\n"
          "s2,0.25,ts,,,ugtst,9\n");
}
