#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "asfda/augment.hpp"
#include "asfda/tensorio.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// Slice-level uncertainty scoring: per-pixel entropy of the ensemble
// probability map, a 100-bin density histogram, an adaptive threshold at the
// primary (lowest-entropy) density peak, and the mean entropy of the pixels
// above that threshold. The threshold excludes the confident-background mass
// so the score is not diluted by easy pixels.
//
// Entropy is kept in double: the downstream comparisons are at 1e-9 scale,
// below float32 resolution near ln 2.
// ---------------------------------------------------------------------------

struct EntropyMap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<double> values;  // row-major H×W, nats
    double max_entropy = 0.0;    // ln C

    std::size_t size() const { return values.size(); }
};

struct EntropyHistogram {
    int bin_count = 100;
    std::vector<std::uint64_t> counts;  // bin_count entries, sum = pixel count
    std::vector<double> edges;          // bin_count + 1 ascending, spans [0, ln C]
    std::vector<double> densities;      // counts / pixel count, sums to 1

    double center(int bin) const { return 0.5 * (edges[bin] + edges[bin + 1]); }
};

struct PeakThreshold {
    double threshold_entropy = 0.0;
    int peak_bin = 0;
    double delta_used = 0.0;  // the flatness bias actually applied
    bool fallback = false;    // no interior peak found; argmax bin used
};

struct SliceUncertainty {
    std::string slice_id;
    double u = 0.0;  // aggregated score, nats
    PeakThreshold threshold;
    std::uint64_t pixels_above = 0;

    // Whole-image statistics kept for the baseline selectors.
    double mean_entropy = 0.0;
    double mean_max_prob = 0.0;
};

/// Per-pixel H = -sum_c p(c) ln p(c), with 0 ln 0 := 0. p: C×H×W.
EntropyMap entropy_map(const EnsembleProb& p);

/// Uniform-width bins over [0, ln C]. A value exactly on an interior edge
/// goes to the higher bin; ln C itself lands in the last bin.
EntropyHistogram histogram(const EntropyMap& e, int bins = 100);

/// Candidate bins are interior n with |d[n+1]-d[n]| < delta and a negative
/// central second difference; delta = epsilon * max |first difference|. The
/// smallest candidate index wins; with no candidate the densest bin is used
/// and `fallback` is set. Threshold = the chosen bin's center.
PeakThreshold primary_peak_threshold(const EntropyHistogram& h, double epsilon = 0.05);

/// u = mean entropy over pixels strictly above the threshold; if none
/// qualify, the whole-image mean (pixels_above stays 0).
SliceUncertainty gaua(const EntropyMap& e, const PeakThreshold& t,
                      const std::string& slice_id = {});

struct UncertaintyConfig {
    AugmentConfig aug;
    double epsilon = 0.05;  // peak flatness bias factor
    int bins = 100;

    void validate() const;
};

/// Scores every slice in manifest order: ensemble prediction, entropy,
/// threshold, aggregate. When prob_dir is given, each slice's ensemble map is
/// persisted there as <slice_id>.prob.ugts (reused later as pseudo-labels);
/// with probs_out, the maps are also returned in manifest order.
std::vector<SliceUncertainty> score_dataset(
    const Segmenter& model, const DatasetManifest& manifest, const UncertaintyConfig& cfg,
    const std::filesystem::path* prob_dir = nullptr,
    std::vector<std::pair<std::string, Tensor>>* probs_out = nullptr);

void write_uncertainty_csv(const std::filesystem::path& path,
                           const std::vector<SliceUncertainty>& scores);

} // namespace asfda
