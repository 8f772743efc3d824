#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "asfda/augment.hpp"
#include "asfda/segmenter.hpp"
#include "asfda/tensorio.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// Evaluation on binary foreground masks (nonzero = foreground). Slices are
// stacked into per-case volumes, the prediction keeps only its largest
// 3D-connected component, and DSC / HD95 are computed volumetrically with
// isotropic unit spacing.
// ---------------------------------------------------------------------------

/// 2|P∩G| / (|P|+|G|); both masks empty -> 1.0.
double dsc(const Tensor& pred, const Tensor& gt);

struct Hd95Result {
    double value = 0.0;
    bool is_sentinel = false;  // a mask was empty; value is the image diagonal
};

/// Pooled symmetric 95th-percentile boundary distance (linear interpolation
/// between order statistics). Boundary = foreground pixel with a background
/// 4-neighbor (6 in 3D); image edges count as background.
Hd95Result hd95(const Tensor& pred, const Tensor& gt);

/// Keeps only the largest connected component: 4-connectivity for rank-2
/// masks, 6-connectivity for rank-3. Ties go to the component whose first
/// pixel is lexicographically smallest in (z,y,x). Output values are 0/1.
Tensor largest_component(const Tensor& mask);

struct EvalResult {
    std::string case_id;
    double dsc = 0.0;
    double hd95 = 0.0;
    bool hd95_is_sentinel = false;
    int num_slices = 0;
};

/// Largest-component post-processing on pred, then volumetric DSC and HD95.
EvalResult evaluate_case_volume(const std::string& case_id, const Tensor& pred_vol,
                                const Tensor& gt_vol);

struct EvalConfig {
    AugmentConfig aug;    // drives the per-slice ensemble when use_tta
    bool use_tta = true;

    void validate() const { aug.validate(); }
};

/// Predicts every slice (ensemble or single pass), stacks per case, and
/// evaluates case volumes in case order. Every slice must carry a label.
std::vector<EvalResult> evaluate_cases(const Segmenter& model, const DatasetManifest& manifest,
                                       const EvalConfig& cfg);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EvalResult>& results);

} // namespace asfda
