#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "asfda/segmenter.hpp"
#include "asfda/tensorio.hpp"
#include "asfda/uncertainty.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// Annotation-set selection. Slices are ranked by a strategy-specific score,
// the top N_tu form the candidate pool D_tu (the rest, D_ts, are assumed
// stable), and the budget M is spent inside the pool: by k-means++ diversity
// clustering of encoder features for the main strategy, by the ranking order
// for the cheap baselines.
// ---------------------------------------------------------------------------

enum class Strategy { ugtst, random, least_confidence, mean_entropy, centroid };

Strategy parse_strategy(const std::string& name);  // ConfigError on unknown
const char* strategy_name(Strategy s);

struct SelectionConfig {
    double budget_fraction = 0.05;
    int capacity_multiplier = 4;
    std::uint64_t seed = 0;
    Strategy strategy = Strategy::ugtst;

    void validate() const;
    int budget(std::size_t n_total) const;    // M = max(1, round(fraction * N))
    int capacity(std::size_t n_total) const;  // N_tu = min(N, multiplier * M)
};

struct SelectionRecord {
    std::string slice_id;
    double u = 0.0;  // the ranking score this strategy ordered slices by
    enum class Set { ta, tu, ts } set = Set::ts;
    std::optional<int> cluster_id;
    std::optional<double> distance_to_centroid;
};

struct SelectionPartition {
    std::vector<std::string> d_ta;  // |d_ta| = M, pick order
    std::vector<std::string> d_tu;  // score-descending, includes d_ta
    std::vector<std::string> d_ts;  // complement of d_tu, score-descending
    std::vector<SelectionRecord> records;  // one per slice, score-descending
    Strategy strategy = Strategy::ugtst;
    std::uint64_t seed = 0;
};

/// Top n_tu slices by descending u, ties by ascending id; rest to d_ts.
std::pair<std::vector<std::string>, std::vector<std::string>> partition_by_uncertainty(
    const std::vector<SliceUncertainty>& scores, const SelectionConfig& cfg);

/// Channel-wise global average of the encoder map, per slice.
std::map<std::string, FeatureVector> extract_features(const Segmenter& model,
                                                      const std::vector<TargetSlice>& slices);

struct ClusterResult {
    std::vector<std::string> picked;       // M distinct ids, centroid order
    std::vector<double> picked_distance;   // distance of each pick to its centroid
    std::vector<int> assignment;           // per input point, final cluster
    std::vector<double> point_distance;    // per input point, distance to its centroid
    std::vector<std::vector<double>> centroids;
    int iterations = 0;
};

/// k-means++ seeding then Lloyd iterations (assignment fixpoint or 100
/// rounds), empty clusters repaired by donating the farthest point. Each
/// centroid picks its nearest point, ties by ascending id; a point already
/// taken falls through to the next nearest.
ClusterResult kmeanspp_select(const std::vector<std::pair<std::string, FeatureVector>>& features,
                              int m, std::uint64_t seed);

/// Full strategy dispatch; features may omit ids a strategy never clusters.
SelectionPartition select_samples(const std::vector<SliceUncertainty>& scores,
                                  const std::map<std::string, FeatureVector>& features,
                                  const SelectionConfig& cfg);

void write_selection_csv(const std::filesystem::path& path, const SelectionPartition& p);

} // namespace asfda
