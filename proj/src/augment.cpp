#include "asfda/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace asfda {

namespace {

float clamp01(double v) {
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

// One H×W plane permuted into dst according to the transform kind.
void permute_plane(SpatialKind k, const float* src, int H, int W, float* dst) {
    switch (k) {
        case SpatialKind::identity:
            std::copy(src, src + static_cast<std::size_t>(H) * W, dst);
            break;
        case SpatialKind::hflip:
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) dst[r * W + c] = src[r * W + (W - 1 - c)];
            break;
        case SpatialKind::vflip:
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) dst[r * W + c] = src[(H - 1 - r) * W + c];
            break;
        case SpatialKind::rot90:
            // (r,c) -> (c, H-1-r); output is W×H.
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) dst[c * H + (H - 1 - r)] = src[r * W + c];
            break;
        case SpatialKind::rot180:
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c)
                    dst[(H - 1 - r) * W + (W - 1 - c)] = src[r * W + c];
            break;
        case SpatialKind::rot270:
            // (r,c) -> (W-1-c, r); output is W×H.
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) dst[(W - 1 - c) * H + r] = src[r * W + c];
            break;
    }
}

} // namespace

SpatialKind inverse(SpatialKind k) {
    switch (k) {
        case SpatialKind::rot90: return SpatialKind::rot270;
        case SpatialKind::rot270: return SpatialKind::rot90;
        default: return k;  // identity, flips and rot180 are involutions
    }
}

const char* spatial_name(SpatialKind k) {
    switch (k) {
        case SpatialKind::identity: return "identity";
        case SpatialKind::hflip: return "hflip";
        case SpatialKind::vflip: return "vflip";
        case SpatialKind::rot90: return "rot90";
        case SpatialKind::rot180: return "rot180";
        case SpatialKind::rot270: return "rot270";
    }
    return "?";
}

Tensor apply_spatial(SpatialKind k, const Tensor& x) {
    if (x.dtype() != Dtype::f32 || (x.rank() != 2 && x.rank() != 3))
        throw std::invalid_argument("apply_spatial expects a 2D or C×H×W float32 tensor");

    const bool swaps = (k == SpatialKind::rot90 || k == SpatialKind::rot270);
    if (x.rank() == 2) {
        const int H = static_cast<int>(x.dims()[0]), W = static_cast<int>(x.dims()[1]);
        Tensor out = Tensor::zeros_f32(swaps ? std::vector<std::uint32_t>{x.dims()[1], x.dims()[0]}
                                             : x.dims());
        permute_plane(k, x.floats().data(), H, W, out.floats().data());
        return out;
    }
    const int C = static_cast<int>(x.dims()[0]);
    const int H = static_cast<int>(x.dims()[1]), W = static_cast<int>(x.dims()[2]);
    Tensor out = Tensor::zeros_f32(
        swaps ? std::vector<std::uint32_t>{x.dims()[0], x.dims()[2], x.dims()[1]} : x.dims());
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c)
        permute_plane(k, x.floats().data() + c * plane, H, W, out.floats().data() + c * plane);
    return out;
}

Tensor apply_intensity(const IntensityTransform& t, const Tensor& x) {
    Tensor out = x;
    auto v = out.floats();

    switch (t.kind) {
        case IntensityTransform::Kind::identity:
            break;
        case IntensityTransform::Kind::gamma:
            if (t.param != 1.0)
                for (auto& e : v) e = clamp01(std::pow(static_cast<double>(e), t.param));
            break;
        case IntensityTransform::Kind::contrast: {
            double mean = 0.0;
            for (float e : v) mean += e;
            mean /= static_cast<double>(v.size());
            for (auto& e : v) e = clamp01(mean + t.param * (e - mean));
            break;
        }
        case IntensityTransform::Kind::gaussian_noise: {
            Rng rng(t.noise_seed);
            for (auto& e : v) e = clamp01(e + t.param * rng.normal());
            break;
        }
        case IntensityTransform::Kind::gaussian_blur: {
            const double s2 = 2.0 * t.param * t.param;
            double kern[3][3], sum = 0.0;
            for (int u = -1; u <= 1; ++u)
                for (int w = -1; w <= 1; ++w) sum += kern[u + 1][w + 1] = std::exp(-(u * u + w * w) / s2);
            for (auto& row : kern)
                for (auto& e : row) e /= sum;

            // Rank 2 or channel-major rank 3, edge replication.
            const bool chan = x.rank() == 3;
            const int C = chan ? static_cast<int>(x.dims()[0]) : 1;
            const int H = static_cast<int>(x.dims()[chan ? 1 : 0]);
            const int W = static_cast<int>(x.dims()[chan ? 2 : 1]);
            const std::size_t plane = static_cast<std::size_t>(H) * W;
            for (int c = 0; c < C; ++c) {
                const float* src = x.floats().data() + c * plane;
                float* dst = v.data() + c * plane;
                for (int y = 0; y < H; ++y) {
                    for (int xx = 0; xx < W; ++xx) {
                        double acc = 0.0;
                        for (int u = -1; u <= 1; ++u) {
                            const int yy = std::clamp(y + u, 0, H - 1);
                            for (int w = -1; w <= 1; ++w) {
                                const int xw = std::clamp(xx + w, 0, W - 1);
                                acc += kern[u + 1][w + 1] * src[yy * W + xw];
                            }
                        }
                        dst[y * W + xx] = clamp01(acc);
                    }
                }
            }
            break;
        }
    }
    return out;
}

void AugmentConfig::validate() const {
    if (k < 1) throw ConfigError("aug.k must be >= 1");
    if (gamma_range[0] <= 0.0 || gamma_range[0] > gamma_range[1])
        throw ConfigError("aug.gamma_range must satisfy 0 < lo <= hi");
    if (contrast_range[0] <= 0.0 || contrast_range[0] > contrast_range[1])
        throw ConfigError("aug.contrast_range must satisfy 0 < lo <= hi");
    if (noise_sigma_max < 0.0) throw ConfigError("aug.noise_sigma_max must be >= 0");
    if (blur_sigma_range[0] <= 0.0 || blur_sigma_range[0] > blur_sigma_range[1])
        throw ConfigError("aug.blur_sigma_range must satisfy 0 < lo <= hi");
}

AugmentationPlan make_plan(const AugmentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    AugmentationPlan plan;
    plan.k = cfg.k;
    plan.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < cfg.k; ++i) {
        const SpatialKind sp = kAllSpatialKinds[rng.uniform_index(kAllSpatialKinds.size())];
        IntensityTransform it;
        switch (rng.uniform_index(5)) {
            case 0: it.kind = IntensityTransform::Kind::identity; break;
            case 1:
                it.kind = IntensityTransform::Kind::gamma;
                it.param = rng.uniform_range(cfg.gamma_range[0], cfg.gamma_range[1]);
                break;
            case 2:
                it.kind = IntensityTransform::Kind::contrast;
                it.param = rng.uniform_range(cfg.contrast_range[0], cfg.contrast_range[1]);
                break;
            case 3:
                it.kind = IntensityTransform::Kind::gaussian_noise;
                it.param = rng.uniform_range(0.0, cfg.noise_sigma_max);
                it.noise_seed = rng.next_u64();
                break;
            case 4:
                it.kind = IntensityTransform::Kind::gaussian_blur;
                it.param = rng.uniform_range(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
                break;
        }
        plan.pairs.emplace_back(it, sp);
    }
    return plan;
}

AugmentationPlan plan_for_slice(const AugmentConfig& cfg, const std::string& slice_id) {
    return make_plan(cfg, cfg.seed ^ fnv1a64(slice_id));
}

EnsembleProb ensemble_predict(const Segmenter& model, const Tensor& image,
                              const AugmentationPlan& plan) {
    if (plan.k < 1 || plan.pairs.size() != static_cast<std::size_t>(plan.k))
        throw std::invalid_argument("augmentation plan is inconsistent");

    const std::uint32_t H = image.dims()[0], W = image.dims()[1];
    const std::uint32_t C = static_cast<std::uint32_t>(model.num_classes());
    std::vector<double> acc(static_cast<std::size_t>(C) * H * W, 0.0);

    for (const auto& [intensity, spatial] : plan.pairs) {
        const Tensor warped = apply_spatial(spatial, image);
        const Tensor perturbed = apply_intensity(intensity, warped);
        const Tensor prob = model.forward(perturbed).prob;
        const Tensor restored = apply_spatial(inverse(spatial), prob);
        if (restored.dims() != std::vector<std::uint32_t>{C, H, W})
            throw std::logic_error("ensemble_predict: inverse-mapped output dims mismatch");
        const auto p = restored.floats();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }

    Tensor out = Tensor::zeros_f32({C, H, W});
    const double inv_k = 1.0 / static_cast<double>(plan.k);
    for (std::size_t i = 0; i < acc.size(); ++i)
        out.floats()[i] = static_cast<float>(acc[i] * inv_k);
    return out;
}

} // namespace asfda
