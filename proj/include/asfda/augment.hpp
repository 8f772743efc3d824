#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "asfda/segmenter.hpp"
#include "asfda/tensorio.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// Spatial transforms are exact index permutations (flips, quarter turns), so
// every one has an exact inverse and probability maps survive the round trip
// bit-for-bit.
// ---------------------------------------------------------------------------

enum class SpatialKind { identity, hflip, vflip, rot90, rot180, rot270 };

constexpr std::array<SpatialKind, 6> kAllSpatialKinds = {
    SpatialKind::identity, SpatialKind::hflip,  SpatialKind::vflip,
    SpatialKind::rot90,    SpatialKind::rot180, SpatialKind::rot270};

SpatialKind inverse(SpatialKind k);
const char* spatial_name(SpatialKind k);

/// x: H×W or channel-major C×H×W float32. rot90/rot270 swap H and W.
Tensor apply_spatial(SpatialKind k, const Tensor& x);

// ---------------------------------------------------------------------------
// Intensity transforms; parameters are frozen into the transform when the
// plan is built, so application is pure (noise included).
// ---------------------------------------------------------------------------

struct IntensityTransform {
    enum class Kind { identity, gamma, contrast, gaussian_noise, gaussian_blur };
    Kind kind = Kind::identity;
    double param = 0.0;             // gamma exponent / contrast scale / sigma
    std::uint64_t noise_seed = 0;   // gaussian_noise only
};

/// x float32 in [0,1]; output clamped to [0,1] with identical dims.
Tensor apply_intensity(const IntensityTransform& t, const Tensor& x);

struct AugmentConfig {
    int k = 8;
    std::uint64_t seed = 0;
    std::array<double, 2> gamma_range = {0.7, 1.5};
    std::array<double, 2> contrast_range = {0.7, 1.3};
    double noise_sigma_max = 0.05;
    std::array<double, 2> blur_sigma_range = {0.5, 1.0};

    void validate() const;
};

struct AugmentationPlan {
    int k = 1;
    std::uint64_t seed = 0;
    std::vector<std::pair<IntensityTransform, SpatialKind>> pairs;
};

/// Pure function of (cfg.k, seed, parameter ranges).
AugmentationPlan make_plan(const AugmentConfig& cfg, std::uint64_t seed);

/// Per-slice plan: seed = cfg.seed ^ fnv1a64(slice_id), so scoring resamples
/// perturbations per slice but stays reproducible.
AugmentationPlan plan_for_slice(const AugmentConfig& cfg, const std::string& slice_id);

/// K-fold augmented ensemble: mean over k of inverse-T applied to the model
/// output on the (T, I)-perturbed input, accumulated in order k = 1..K.
EnsembleProb ensemble_predict(const Segmenter& model, const Tensor& image,
                              const AugmentationPlan& plan);

} // namespace asfda
