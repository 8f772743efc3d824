#include "asfda/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace asfda {

EntropyMap entropy_map(const EnsembleProb& p) {
    if (p.rank() != 3 || p.dtype() != Dtype::f32)
        throw std::invalid_argument("entropy_map expects a C×H×W float32 probability map");
    const std::size_t C = p.dims()[0];
    const std::size_t H = p.dims()[1], W = p.dims()[2];
    const std::size_t plane = H * W;

    EntropyMap e;
    e.height = p.dims()[1];
    e.width = p.dims()[2];
    e.max_entropy = std::log(static_cast<double>(C));
    e.values.assign(plane, 0.0);

    const auto v = p.floats();
    for (std::size_t i = 0; i < plane; ++i) {
        double h = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double pc = v[c * plane + i];
            if (pc > 0.0) h -= pc * std::log(pc);
        }
        e.values[i] = h;
    }
    return e;
}

EntropyHistogram histogram(const EntropyMap& e, int bins) {
    if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
    if (e.values.empty()) throw std::invalid_argument("histogram: empty entropy map");

    EntropyHistogram h;
    h.bin_count = bins;
    h.edges.resize(bins + 1);
    for (int n = 0; n <= bins; ++n)
        h.edges[n] = e.max_entropy * static_cast<double>(n) / static_cast<double>(bins);
    h.counts.assign(bins, 0);

    for (double v : e.values) {
        // Last edge <= v picks the bin, so an exact interior edge goes high.
        auto it = std::upper_bound(h.edges.begin(), h.edges.end(), v);
        long idx = static_cast<long>(it - h.edges.begin()) - 1;
        idx = std::clamp(idx, 0l, static_cast<long>(bins) - 1);
        ++h.counts[static_cast<std::size_t>(idx)];
    }

    h.densities.resize(bins);
    const double total = static_cast<double>(e.values.size());
    for (int n = 0; n < bins; ++n) h.densities[n] = static_cast<double>(h.counts[n]) / total;
    return h;
}

PeakThreshold primary_peak_threshold(const EntropyHistogram& h, double epsilon) {
    const int N = h.bin_count;
    const auto& d = h.densities;

    double max_abs_diff = 0.0;
    for (int n = 0; n + 1 < N; ++n) max_abs_diff = std::max(max_abs_diff, std::abs(d[n + 1] - d[n]));
    const double delta = epsilon * max_abs_diff;

    PeakThreshold t;
    t.delta_used = delta;
    int peak = -1;
    for (int n = 1; n + 1 < N; ++n) {
        const double first = d[n + 1] - d[n];
        const double second = d[n + 1] - 2.0 * d[n] + d[n - 1];
        if (std::abs(first) < delta && second < 0.0) {
            peak = n;
            break;
        }
    }
    if (peak < 0) {
        peak = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
        t.fallback = true;
    }
    t.peak_bin = peak;
    t.threshold_entropy = h.center(peak);
    return t;
}

SliceUncertainty gaua(const EntropyMap& e, const PeakThreshold& t, const std::string& slice_id) {
    SliceUncertainty s;
    s.slice_id = slice_id;
    s.threshold = t;

    double sum_above = 0.0, sum_all = 0.0;
    std::uint64_t above = 0;
    for (double v : e.values) {
        sum_all += v;
        if (v > t.threshold_entropy) {
            sum_above += v;
            ++above;
        }
    }
    s.pixels_above = above;
    s.mean_entropy = sum_all / static_cast<double>(e.size());
    s.u = above > 0 ? sum_above / static_cast<double>(above) : s.mean_entropy;
    return s;
}

void UncertaintyConfig::validate() const {
    aug.validate();
    if (epsilon <= 0.0) throw ConfigError("unc.epsilon must be > 0");
    if (bins < 2) throw ConfigError("unc.bins must be >= 2");
}

std::vector<SliceUncertainty> score_dataset(const Segmenter& model,
                                            const DatasetManifest& manifest,
                                            const UncertaintyConfig& cfg,
                                            const std::filesystem::path* prob_dir,
                                            std::vector<std::pair<std::string, Tensor>>* probs_out) {
    cfg.validate();
    if (prob_dir) std::filesystem::create_directories(*prob_dir);

    std::vector<SliceUncertainty> out;
    out.reserve(manifest.slices.size());
    for (const SliceRef& ref : manifest.slices) {
        try {
            const TargetSlice slice = load_slice(ref, /*with_label=*/false);
            const AugmentationPlan plan = plan_for_slice(cfg.aug, slice.id);
            const EnsembleProb prob = ensemble_predict(model, slice.image, plan);
            const EntropyMap e = entropy_map(prob);
            const EntropyHistogram h = histogram(e, cfg.bins);
            SliceUncertainty s = gaua(e, primary_peak_threshold(h, cfg.epsilon), slice.id);

            // Mean max-class probability, for the least-confidence baseline.
            const std::size_t C = prob.dims()[0], plane = e.size();
            const auto pv = prob.floats();
            double sum_max = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                float best = pv[i];
                for (std::size_t c = 1; c < C; ++c) best = std::max(best, pv[c * plane + i]);
                sum_max += best;
            }
            s.mean_max_prob = sum_max / static_cast<double>(plane);

            if (prob_dir) write_tensor(*prob_dir / (slice.id + ".prob.ugts"), prob);
            if (probs_out) probs_out->emplace_back(slice.id, prob);
            out.push_back(std::move(s));
        } catch (const std::exception& ex) {
            throw std::runtime_error("scoring slice '" + ref.id + "': " + ex.what());
        }
    }
    return out;
}

void write_uncertainty_csv(const std::filesystem::path& path,
                           const std::vector<SliceUncertainty>& scores) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "cannot open " + path.string());
    f << "slice_id,u,threshold_entropy,peak_bin,fallback,pixels_above\n";
    for (const auto& s : scores)
        f << s.slice_id << ',' << format_double(s.u) << ','
          << format_double(s.threshold.threshold_entropy) << ',' << s.threshold.peak_bin << ','
          << (s.threshold.fallback ? 1 : 0) << ',' << s.pixels_above << '\n';
    if (!f.flush()) throw TensorIoError(TensorIoError::Kind::io, "write failed: " + path.string());
}

} // namespace asfda
