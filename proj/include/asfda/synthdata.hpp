#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "asfda/tensorio.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// Synthetic two-class phantoms: one bright ellipse per case against a darker
// background, sized by a per-case z-profile so mid-case slices carry a large
// confident foreground while the first and last slices are small and washed
// out. Domain shift is purely photometric (gamma, contrast gap, noise, bias
// field), so labels stay comparable across the pair.
// ---------------------------------------------------------------------------

struct DomainSpec {
    int num_cases = 8;
    int slices_per_case = 8;
    int height = 32;
    int width = 32;

    // Foreground geometry.
    double center_jitter = 2.0;  // px, uniform in both axes
    std::array<double, 2> radius_y_range = {6.0, 10.0};
    std::array<double, 2> radius_x_range = {6.0, 10.0};
    double radius_floor = 0.30;    // end-slice radius fraction of the case radius
    double contrast_floor = 0.45;  // end-slice fraction of the fg/bg gap

    // Photometry.
    double fg_mean = 0.75;
    double bg_mean = 0.30;
    double noise_sigma = 0.02;
    double gamma = 1.0;
    double bias_strength = 0.05;

    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const DomainSpec&) const = default;
};

/// Writes <id>.img.ugts / <id>.lbl.ugts per slice plus manifest.json and
/// spec.json into out_dir; returns the loaded (validated) manifest. The same
/// (spec, name) always regenerates byte-identical files.
DatasetManifest generate(const DomainSpec& spec, const std::filesystem::path& out_dir,
                         const std::string& name);

/// Source/target pair sharing seed and geometry; the target's photometry is
/// degraded by `magnitude` (0 = no shift, 1 = default shift: gamma 1 -> 0.6,
/// fg/bg gap halved, noise doubled, bias field tripled).
std::pair<DomainSpec, DomainSpec> default_shift_pair(std::uint64_t seed, double magnitude = 1.0);

} // namespace asfda
