#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "asfda/synthdata.hpp"
#include "asfda/uncertainty.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

using namespace asfda;
using testutil::TempDir;

namespace {

EntropyMap map_of(std::vector<double> values, double max_entropy = std::log(2.0)) {
    EntropyMap e;
    e.height = 1;
    e.width = static_cast<std::uint32_t>(values.size());
    e.values = std::move(values);
    e.max_entropy = max_entropy;
    return e;
}

// The reference for the peak rule: scan every interior bin against the raw
// conditions, first hit wins, densest bin otherwise.
PeakThreshold reference_peak(const EntropyHistogram& h, double epsilon) {
    const auto& d = h.densities;
    const int N = h.bin_count;
    double max_diff = 0.0;
    for (int n = 0; n + 1 < N; ++n) max_diff = std::max(max_diff, std::abs(d[n + 1] - d[n]));
    const double delta = epsilon * max_diff;

    PeakThreshold t;
    t.delta_used = delta;
    for (int n = 1; n + 1 < N; ++n) {
        const bool flat = std::abs(d[n + 1] - d[n]) < delta;
        const bool concave = d[n + 1] - 2.0 * d[n] + d[n - 1] < 0.0;
        if (flat && concave) {
            t.peak_bin = n;
            t.threshold_entropy = h.center(n);
            return t;
        }
    }
    t.fallback = true;
    t.peak_bin = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
    t.threshold_entropy = h.center(t.peak_bin);
    return t;
}

} // namespace

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

TEST_CASE("entropy: uniform binary pixel is ln 2 within 1e-9") {
    const EnsembleProb p = Tensor::from_f32({2, 1, 1}, {0.5f, 0.5f});
    const EntropyMap e = entropy_map(p);
    REQUIRE(e.size() == 1);
    CHECK(std::abs(e.values[0] - std::log(2.0)) < 1e-9);
    CHECK(e.max_entropy == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("entropy: one-hot pixel is exactly zero") {
    const EnsembleProb p = Tensor::from_f32({2, 1, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    const EntropyMap e = entropy_map(p);
    CHECK(e.values[0] == 0.0);
    CHECK(e.values[1] == 0.0);
}

TEST_CASE("entropy: (0.9, 0.1) pixel") {
    const EnsembleProb p = Tensor::from_f32({2, 1, 1}, {0.9f, 0.1f});
    const double want = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
    CHECK(entropy_map(p).values[0] == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("entropy: three classes peak at ln 3") {
    const float third = 1.0f / 3.0f;
    const EnsembleProb p = Tensor::from_f32({3, 1, 1}, {third, third, third});
    const EntropyMap e = entropy_map(p);
    CHECK(e.max_entropy == doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(e.values[0] == doctest::Approx(std::log(3.0)).epsilon(1e-6));
}

TEST_CASE("entropy_map rejects non-probability shapes") {
    CHECK_THROWS_AS(entropy_map(Tensor::zeros_f32({4, 4})), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Histogram
// ---------------------------------------------------------------------------

TEST_CASE("histogram: extremes land in the first and last bin, counts conserved") {
    const EntropyMap e = map_of({0.0, std::log(2.0), 0.3, 0.3, 0.69});
    const EntropyHistogram h = histogram(e, 100);
    REQUIRE(h.counts.size() == 100);
    CHECK(h.counts[0] == 1);
    CHECK(h.counts[99] == 2);  // ln 2 itself plus 0.69
    std::uint64_t total = 0;
    for (auto c : h.counts) total += c;
    CHECK(total == e.size());
    double density_sum = 0.0;
    for (double d : h.densities) density_sum += d;
    CHECK(density_sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("histogram: a value on an interior edge goes to the higher bin") {
    // max_entropy 100 over 100 bins puts edges at the integers.
    EntropyMap e = map_of({1.0, 0.999, 57.0}, 100.0);
    const EntropyHistogram h = histogram(e, 100);
    CHECK(h.edges[1] == 1.0);
    CHECK(h.counts[0] == 1);
    CHECK(h.counts[1] == 1);
    CHECK(h.counts[57] == 1);
    CHECK(h.center(57) == doctest::Approx(57.5));
}

TEST_CASE("histogram rejects degenerate input") {
    CHECK_THROWS_AS(histogram(map_of({0.1}), 1), std::invalid_argument);
    CHECK_THROWS_AS(histogram(map_of({}), 100), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Primary peak threshold
// ---------------------------------------------------------------------------

TEST_CASE("peak: flat concave shoulder beats the global maximum") {
    EntropyHistogram h;
    h.bin_count = 10;
    h.densities = {0.0, 0.05, 0.15, 0.30, 0.299, 0.15, 0.05, 0.001, 0.0, 0.0};
    h.edges.resize(11);
    for (int n = 0; n <= 10; ++n) h.edges[n] = 0.1 * n;

    const PeakThreshold t = primary_peak_threshold(h, 0.05);
    CHECK_FALSE(t.fallback);
    CHECK(t.peak_bin == 3);  // |d[4]-d[3]| = 0.001 < 0.05*0.15, curvature negative
    CHECK(t.threshold_entropy == doctest::Approx(0.35));
    CHECK(t.delta_used == doctest::Approx(0.05 * 0.15));
}

TEST_CASE("peak: monotone histogram falls back to the densest bin") {
    EntropyHistogram h;
    h.bin_count = 6;
    h.densities = {0.5, 0.3, 0.2, 0.0, 0.0, 0.0};
    h.edges = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    const PeakThreshold t = primary_peak_threshold(h, 0.05);
    CHECK(t.fallback);
    CHECK(t.peak_bin == 0);
    CHECK(t.threshold_entropy == doctest::Approx(0.05));
}

TEST_CASE("peak: matches the exhaustive reference on random histograms") {
    std::mt19937_64 gen(31);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int iter = 0; iter < 1000; ++iter) {
        const int bins = 4 + static_cast<int>(gen() % 60);
        EntropyHistogram h;
        h.bin_count = bins;
        h.densities.resize(bins);
        double sum = 0.0;
        for (auto& d : h.densities) {
            // Sprinkle exact zeros and repeats so flat runs and ties occur.
            const double r = u(gen);
            d = r < 0.3 ? 0.0 : (r < 0.5 ? 0.25 : r);
            sum += d;
        }
        if (sum > 0.0)
            for (auto& d : h.densities) d /= sum;
        h.edges.resize(bins + 1);
        for (int n = 0; n <= bins; ++n) h.edges[n] = static_cast<double>(n) / bins;

        const double eps = iter % 3 == 0 ? 0.05 : u(gen) * 0.5 + 1e-3;
        const PeakThreshold got = primary_peak_threshold(h, eps);
        const PeakThreshold want = reference_peak(h, eps);
        CHECK(got.peak_bin == want.peak_bin);
        CHECK(got.fallback == want.fallback);
        CHECK(got.threshold_entropy == want.threshold_entropy);
        CHECK(got.delta_used == want.delta_used);
    }
}

// ---------------------------------------------------------------------------
// GAUA
// ---------------------------------------------------------------------------

TEST_CASE("gaua: mean over pixels strictly above the threshold") {
    const EntropyMap e = map_of({0.1, 0.2, 0.6, 0.7});
    PeakThreshold t;
    t.threshold_entropy = 0.5;
    const SliceUncertainty s = gaua(e, t, "s0");
    CHECK(s.slice_id == "s0");
    CHECK(s.u == doctest::Approx(0.65));
    CHECK(s.pixels_above == 2);
    CHECK(s.mean_entropy == doctest::Approx(0.4));
}

TEST_CASE("gaua: empty above-set falls back to the whole-image mean") {
    const EntropyMap e = map_of({0.1, 0.2, 0.3, 0.4});
    PeakThreshold t;
    t.threshold_entropy = 0.9;
    const SliceUncertainty s = gaua(e, t);
    CHECK(s.pixels_above == 0);
    CHECK(s.u == doctest::Approx(0.25));
}

TEST_CASE("gaua: a pixel exactly on the threshold does not count") {
    const EntropyMap e = map_of({0.5, 0.7});
    PeakThreshold t;
    t.threshold_entropy = 0.5;
    const SliceUncertainty s = gaua(e, t);
    CHECK(s.pixels_above == 1);
    CHECK(s.u == doctest::Approx(0.7));
}

TEST_CASE("gaua: diluting with confident background leaves the score alone") {
    // Half the pixels carry entropy 0.65, half are confident. The threshold
    // machinery parks the cut right above the confident mass.
    std::vector<double> values(1000, 0.0);
    for (std::size_t i = 0; i < 500; ++i) values[i] = 0.65;
    const EntropyMap e = map_of(values);
    const PeakThreshold t = primary_peak_threshold(histogram(e, 100), 0.05);
    const SliceUncertainty base = gaua(e, t);
    CHECK(base.u == doctest::Approx(0.65).epsilon(1e-9));

    // Appending 1000 more zero-entropy pixels: whole-image mean halves, the
    // aggregated score moves by less than 1e-6.
    std::vector<double> diluted = values;
    diluted.insert(diluted.end(), 1000, 0.0);
    const EntropyMap e2 = map_of(diluted);
    const PeakThreshold t2 = primary_peak_threshold(histogram(e2, 100), 0.05);
    const SliceUncertainty more = gaua(e2, t2);
    CHECK(std::abs(more.u - base.u) < 1e-6);
    CHECK(more.mean_entropy < 0.6 * base.mean_entropy);
}

TEST_CASE("histogram, threshold and gaua are permutation invariant") {
    std::mt19937_64 gen(41);
    std::vector<double> values(256);
    std::uniform_real_distribution<double> u(0.0, std::log(2.0));
    for (auto& v : values) v = u(gen);
    std::vector<double> shuffled = values;
    std::shuffle(shuffled.begin(), shuffled.end(), gen);

    const EntropyMap a = map_of(values), b = map_of(shuffled);
    const EntropyHistogram ha = histogram(a, 100), hb = histogram(b, 100);
    CHECK(ha.counts == hb.counts);
    const PeakThreshold ta = primary_peak_threshold(ha, 0.05);
    const PeakThreshold tb = primary_peak_threshold(hb, 0.05);
    CHECK(ta.peak_bin == tb.peak_bin);
    // Same multiset, different accumulation order: equal up to rounding.
    CHECK(gaua(a, ta).u == doctest::Approx(gaua(b, tb).u).epsilon(1e-12));
    CHECK(gaua(a, ta).pixels_above == gaua(b, tb).pixels_above);
}

// ---------------------------------------------------------------------------
// Dataset scoring
// ---------------------------------------------------------------------------

TEST_CASE("score_dataset walks the manifest in order and persists the maps") {
    TempDir dir("unc");
    DomainSpec spec;
    spec.num_cases = 2;
    spec.slices_per_case = 2;
    spec.height = spec.width = 16;
    spec.center_jitter = 1.0;
    spec.radius_y_range = spec.radius_x_range = {2.0, 4.0};
    spec.seed = 77;
    const DatasetManifest manifest = generate(spec, dir / "data", "toy");

    const Segmenter model = Segmenter::random_init(2, 5);
    UncertaintyConfig cfg;
    cfg.aug.k = 2;
    cfg.aug.seed = 11;

    const std::filesystem::path probs_dir = dir / "probs";
    std::vector<std::pair<std::string, Tensor>> probs;
    const auto scores = score_dataset(model, manifest, cfg, &probs_dir, &probs);

    REQUIRE(scores.size() == manifest.slices.size());
    REQUIRE(probs.size() == manifest.slices.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        CHECK(scores[i].slice_id == manifest.slices[i].id);
        CHECK(probs[i].first == manifest.slices[i].id);
        CHECK(scores[i].u >= 0.0);
        CHECK(scores[i].u <= std::log(2.0) + 1e-12);
        CHECK(scores[i].mean_max_prob > 0.5 - 1e-6);
        CHECK(scores[i].mean_max_prob <= 1.0);

        const Tensor on_disk = read_tensor(probs_dir / (scores[i].slice_id + ".prob.ugts"));
        CHECK(std::memcmp(on_disk.floats().data(), probs[i].second.floats().data(),
                          4 * on_disk.size()) == 0);
    }

    // Same model and config again: identical scores.
    const auto again = score_dataset(model, manifest, cfg);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        CHECK(again[i].u == scores[i].u);
        CHECK(again[i].threshold.peak_bin == scores[i].threshold.peak_bin);
    }
}

TEST_CASE("uncertainty CSV layout") {
    TempDir dir("unc");
    SliceUncertainty s;
    s.slice_id = "c00_s01";
    s.u = 0.5;
    s.threshold.threshold_entropy = 0.25;
    s.threshold.peak_bin = 36;
    s.threshold.fallback = false;
    s.pixels_above = 12;
    write_uncertainty_csv(dir / "u.csv", {s});
    CHECK(testutil::read_text(dir / "u.csv") ==
          "slice_id,u,threshold_entropy,peak_bin,fallback,pixels_above\n"
          "c00_s01,0.5,0.25,36,0,12\n");
}
