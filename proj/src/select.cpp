#include "asfda/select.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

namespace asfda {

namespace {

double dist2(const std::vector<double>& a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

struct Ranked {
    std::string id;
    double score;
};

void sort_ranked(std::vector<Ranked>& r) {
    std::sort(r.begin(), r.end(), [](const Ranked& a, const Ranked& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
}

} // namespace

Strategy parse_strategy(const std::string& name) {
    if (name == "ugtst") return Strategy::ugtst;
    if (name == "random") return Strategy::random;
    if (name == "least_confidence") return Strategy::least_confidence;
    if (name == "mean_entropy") return Strategy::mean_entropy;
    if (name == "centroid") return Strategy::centroid;
    throw ConfigError("unknown selection strategy '" + name + "'");
}

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::ugtst: return "ugtst";
        case Strategy::random: return "random";
        case Strategy::least_confidence: return "least_confidence";
        case Strategy::mean_entropy: return "mean_entropy";
        case Strategy::centroid: return "centroid";
    }
    return "?";
}

void SelectionConfig::validate() const {
    if (!(budget_fraction > 0.0 && budget_fraction <= 1.0))
        throw ConfigError("select.budget_fraction must be in (0, 1]");
    if (capacity_multiplier < 1) throw ConfigError("select.capacity_multiplier must be >= 1");
}

int SelectionConfig::budget(std::size_t n_total) const {
    const long m = std::llround(budget_fraction * static_cast<double>(n_total));
    return static_cast<int>(std::max(1l, m));
}

int SelectionConfig::capacity(std::size_t n_total) const {
    const long cap = static_cast<long>(capacity_multiplier) * budget(n_total);
    return static_cast<int>(std::min(static_cast<long>(n_total), cap));
}

std::pair<std::vector<std::string>, std::vector<std::string>> partition_by_uncertainty(
    const std::vector<SliceUncertainty>& scores, const SelectionConfig& cfg) {
    if (scores.empty()) throw std::invalid_argument("partition_by_uncertainty: no scores");
    cfg.validate();

    std::vector<Ranked> r;
    r.reserve(scores.size());
    for (const auto& s : scores) r.push_back({s.slice_id, s.u});
    sort_ranked(r);

    const std::size_t n_tu = static_cast<std::size_t>(cfg.capacity(scores.size()));
    std::pair<std::vector<std::string>, std::vector<std::string>> out;
    for (std::size_t i = 0; i < r.size(); ++i)
        (i < n_tu ? out.first : out.second).push_back(r[i].id);
    return out;
}

std::map<std::string, FeatureVector> extract_features(const Segmenter& model,
                                                      const std::vector<TargetSlice>& slices) {
    std::map<std::string, FeatureVector> out;
    for (const auto& s : slices) out[s.id] = global_average(model.forward(s.image).encoder);
    return out;
}

ClusterResult kmeanspp_select(const std::vector<std::pair<std::string, FeatureVector>>& features,
                              int m, std::uint64_t seed) {
    const std::size_t n = features.size();
    if (m < 1) throw std::invalid_argument("kmeanspp_select: m must be >= 1");
    if (n < static_cast<std::size_t>(m))
        throw std::invalid_argument("kmeanspp_select: fewer candidates than clusters");
    const std::size_t dim = features[0].second.values.size();
    for (const auto& [id, f] : features)
        if (f.values.size() != dim)
            throw std::invalid_argument("kmeanspp_select: feature width mismatch at '" + id + "'");

    ClusterResult res;
    if (static_cast<std::size_t>(m) == n) {
        // Every point its own cluster; nothing to iterate.
        res.assignment.resize(n);
        res.point_distance.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            res.assignment[i] = static_cast<int>(i);
            res.picked.push_back(features[i].first);
            res.picked_distance.push_back(0.0);
            res.centroids.emplace_back(features[i].second.values.begin(),
                                       features[i].second.values.end());
        }
        return res;
    }

    Rng rng(seed);

    auto sq = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = static_cast<double>(features[a].second.values[j]) -
                             static_cast<double>(features[b].second.values[j]);
            s += d * d;
        }
        return s;
    };

    // Seeding: first center uniform, the rest sampled with probability
    // proportional to squared distance from the nearest chosen center.
    std::vector<std::size_t> centers{rng.uniform_index(n)};
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq(i, centers[0]);
    while (centers.size() < static_cast<std::size_t>(m)) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t pick = n;
        if (total > 0.0) {
            const double r = rng.uniform() * total;
            double cum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (d2[i] <= 0.0) continue;
                cum += d2[i];
                if (cum > r) {
                    pick = i;
                    break;
                }
            }
            if (pick == n)  // r landed on accumulated rounding; take the last positive
                for (std::size_t i = n; i-- > 0;)
                    if (d2[i] > 0.0) {
                        pick = i;
                        break;
                    }
        }
        if (pick == n) {
            // All points coincide with chosen centers; fill with the first unchosen.
            for (std::size_t i = 0; i < n; ++i)
                if (std::find(centers.begin(), centers.end(), i) == centers.end()) {
                    pick = i;
                    break;
                }
        }
        centers.push_back(pick);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq(i, pick));
    }

    res.centroids.reserve(m);
    for (std::size_t c : centers)
        res.centroids.emplace_back(features[c].second.values.begin(),
                                   features[c].second.values.end());

    // Lloyd iterations to an assignment fixpoint, at most 100 rounds.
    std::vector<int> assign(n, -1);
    std::vector<double> pd(n, 0.0);
    for (res.iterations = 1; res.iterations <= 100; ++res.iterations) {
        std::vector<int> na(n);
        for (std::size_t i = 0; i < n; ++i) {
            int best_k = 0;
            double best = dist2(res.centroids[0], features[i].second.values);
            for (int k = 1; k < m; ++k) {
                const double d = dist2(res.centroids[k], features[i].second.values);
                if (d < best) {
                    best = d;
                    best_k = k;
                }
            }
            na[i] = best_k;
            pd[i] = best;
        }

        // Empty clusters adopt the point farthest from its current centroid.
        std::vector<int> sizes(m, 0);
        for (int a : na) ++sizes[a];
        for (int k = 0; k < m; ++k) {
            if (sizes[k] > 0) continue;
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (sizes[na[i]] < 2) continue;
                if (far == n || pd[i] > pd[far]) far = i;
            }
            if (far == n) continue;  // nothing to donate
            --sizes[na[far]];
            na[far] = k;
            ++sizes[k];
            pd[far] = 0.0;
        }

        const bool stable = (na == assign);
        assign = std::move(na);
        for (int k = 0; k < m; ++k) {
            std::vector<double> mean(dim, 0.0);
            int cnt = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (assign[i] != k) continue;
                ++cnt;
                for (std::size_t j = 0; j < dim; ++j) mean[j] += features[i].second.values[j];
            }
            if (cnt > 0) {
                for (double& v : mean) v /= static_cast<double>(cnt);
                res.centroids[k] = std::move(mean);
            }
        }
        if (stable) break;
    }

    res.assignment = assign;
    res.point_distance.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        res.point_distance[i] = std::sqrt(dist2(res.centroids[assign[i]], features[i].second.values));

    // Per-centroid nearest point, ties by ascending id; duplicates fall
    // through to the next nearest so exactly m distinct ids come back.
    std::set<std::size_t> taken;
    for (int k = 0; k < m; ++k) {
        std::size_t best = n;
        double best_d = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken.count(i)) continue;
            const double d = dist2(res.centroids[k], features[i].second.values);
            if (best == n || d < best_d ||
                (d == best_d && features[i].first < features[best].first)) {
                best = i;
                best_d = d;
            }
        }
        taken.insert(best);
        res.picked.push_back(features[best].first);
        res.picked_distance.push_back(std::sqrt(best_d));
    }
    return res;
}

SelectionPartition select_samples(const std::vector<SliceUncertainty>& scores,
                                  const std::map<std::string, FeatureVector>& features,
                                  const SelectionConfig& cfg) {
    if (scores.empty()) throw std::invalid_argument("select_samples: no scores");
    cfg.validate();

    const std::size_t n = scores.size();
    const int m = cfg.budget(n);
    const std::size_t n_tu =
        cfg.strategy == Strategy::centroid ? n : static_cast<std::size_t>(cfg.capacity(n));

    // Strategy-specific ranking score; the partition laws are stated over it.
    std::vector<Ranked> ranked;
    ranked.reserve(n);
    Rng rng(cfg.seed);
    for (const auto& s : scores) {
        double score = s.u;
        switch (cfg.strategy) {
            case Strategy::ugtst:
            case Strategy::centroid: break;
            case Strategy::random: score = rng.uniform(); break;
            case Strategy::least_confidence: score = 1.0 - s.mean_max_prob; break;
            case Strategy::mean_entropy: score = s.mean_entropy; break;
        }
        ranked.push_back({s.slice_id, score});
    }
    sort_ranked(ranked);

    SelectionPartition p;
    p.strategy = cfg.strategy;
    p.seed = cfg.seed;
    for (std::size_t i = 0; i < n; ++i)
        (i < n_tu ? p.d_tu : p.d_ts).push_back(ranked[i].id);

    auto features_for = [&](const std::vector<std::string>& ids) {
        std::vector<std::pair<std::string, FeatureVector>> out;
        out.reserve(ids.size());
        for (const auto& id : ids) {
            auto it = features.find(id);
            if (it == features.end())
                throw std::invalid_argument("select_samples: no feature for slice '" + id + "'");
            out.emplace_back(id, it->second);
        }
        return out;
    };

    ClusterResult cluster;
    const bool clustered =
        cfg.strategy == Strategy::ugtst || cfg.strategy == Strategy::centroid;
    if (clustered) {
        cluster = kmeanspp_select(features_for(p.d_tu), m, cfg.seed);
        p.d_ta = cluster.picked;
    } else {
        p.d_ta.assign(p.d_tu.begin(), p.d_tu.begin() + m);
    }

    std::set<std::string> ta_set(p.d_ta.begin(), p.d_ta.end());
    std::map<std::string, std::pair<int, double>> pick_info;  // ta id -> (centroid, dist)
    if (clustered)
        for (std::size_t k = 0; k < cluster.picked.size(); ++k)
            pick_info[cluster.picked[k]] = {static_cast<int>(k), cluster.picked_distance[k]};

    for (std::size_t i = 0; i < n; ++i) {
        SelectionRecord rec;
        rec.slice_id = ranked[i].id;
        rec.u = ranked[i].score;
        if (ta_set.count(rec.slice_id)) rec.set = SelectionRecord::Set::ta;
        else if (i < n_tu) rec.set = SelectionRecord::Set::tu;
        else rec.set = SelectionRecord::Set::ts;

        if (clustered && i < n_tu) {
            if (auto it = pick_info.find(rec.slice_id); it != pick_info.end()) {
                rec.cluster_id = it->second.first;
                rec.distance_to_centroid = it->second.second;
            } else {
                rec.cluster_id = cluster.assignment[i];
                rec.distance_to_centroid = cluster.point_distance[i];
            }
        }
        p.records.push_back(std::move(rec));
    }
    return p;
}

void write_selection_csv(const std::filesystem::path& path, const SelectionPartition& p) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "cannot open " + path.string());
    f << "slice_id,u,set,cluster_id,distance_to_centroid,strategy,seed\n";
    for (const auto& r : p.records) {
        const char* set = r.set == SelectionRecord::Set::ta   ? "ta"
                          : r.set == SelectionRecord::Set::tu ? "tu"
                                                              : "ts";
        f << r.slice_id << ',' << format_double(r.u) << ',' << set << ',';
        if (r.cluster_id) f << *r.cluster_id;
        f << ',';
        if (r.distance_to_centroid) f << format_double(*r.distance_to_centroid);
        f << ',' << strategy_name(p.strategy) << ',' << p.seed << '\n';
    }
    if (!f.flush()) throw TensorIoError(TensorIoError::Kind::io, "write failed: " + path.string());
}

} // namespace asfda
