#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "asfda/select.hpp"
#include "asfda/segmenter.hpp"
#include "asfda/tensorio.hpp"
#include "asfda/uncertainty.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// Tiered self-training. Stage 1 fine-tunes the source model on the annotated
// picks plus the stable set's source-model pseudo-labels, deliberately
// leaving out the uncertain-but-unselected slices. Stage 1's ensemble then
// relabels everything unannotated, and stage 2 trains on the whole target
// set from the stage-1 weights.
// ---------------------------------------------------------------------------

struct PseudoLabel {
    Tensor hard_label;  // H×W u8, per-pixel argmax of an ensemble map
    enum class Stage { source, stage1 } stage = Stage::source;
};

using PseudoLabelSet = std::map<std::string, PseudoLabel>;

PseudoLabelSet make_pseudo_labels(const std::vector<std::pair<std::string, Tensor>>& probs,
                                  PseudoLabel::Stage stage);

/// Reveals true labels one slice at a time and remembers which, so a run can
/// prove it spent exactly its annotation budget.
class AnnotationOracle {
public:
    explicit AnnotationOracle(const DatasetManifest& m) : manifest_(&m) {}

    Tensor annotate(const std::string& slice_id);
    int access_count() const { return static_cast<int>(accessed_.size()); }
    const std::set<std::string>& accessed() const { return accessed_; }

private:
    const DatasetManifest* manifest_;
    std::set<std::string> accessed_;
};

struct AdaptationPlan {
    SelectionPartition partition;
    std::map<std::string, Tensor> annotations;  // d_ta id -> true label
    TrainConfig stage1_cfg;
    TrainConfig stage2_cfg;
    double active_weight = 1.0;  // loss weight on annotated slices
};

/// Stage-1 training set: d_ta with true labels, d_ts with source pseudo-labels.
Segmenter stage1(const Segmenter& source, const AdaptationPlan& plan, const PseudoLabelSet& pseudo,
                 const DatasetManifest& manifest, std::vector<TraceRow>* trace = nullptr,
                 std::vector<std::string>* used_ids = nullptr);

/// Ensemble-relabels every slice outside `exclude` with m_t1; persists the
/// probability maps under prob_dir when given.
PseudoLabelSet regenerate(const Segmenter& m_t1, const DatasetManifest& manifest,
                          const AugmentConfig& aug, const std::set<std::string>& exclude,
                          const std::filesystem::path* prob_dir = nullptr);

/// Stage-2 training set: every slice; d_ta true labels, the rest regenerated.
Segmenter stage2(const Segmenter& m_t1, const AdaptationPlan& plan,
                 const PseudoLabelSet& regenerated, const DatasetManifest& manifest,
                 std::vector<TraceRow>* trace = nullptr,
                 std::vector<std::string>* used_ids = nullptr);

struct AdaptConfig {
    UncertaintyConfig unc;
    SelectionConfig sel;
    TrainConfig stage1_cfg;
    TrainConfig stage2_cfg;
    double active_weight = 1.0;
    std::uint64_t master_seed = 0;

    void validate() const;
};

/// Flat key echo of every resolved value, embedded in report.json.
nlohmann::ordered_json adapt_config_json(const AdaptConfig& cfg);

struct RunResult {
    SelectionPartition partition;
    Segmenter m_t1;
    Segmenter m_t2;
    int label_accesses = 0;
    std::vector<std::string> stage1_ids, stage2_ids;
    std::vector<TraceRow> stage1_trace, stage2_trace;
};

/// Full pipeline: score, select, annotate d_ta only, stage 1, regenerate,
/// stage 2. Artifacts land under out_dir: uncertainty.csv, selection.csv,
/// pseudo_source/, stage1.model, stage1_trace.csv, pseudo_stage1/,
/// stage2.model, stage2_trace.csv, report.json.
RunResult run_ugtst(const Segmenter& source, const DatasetManifest& manifest,
                    const AdaptConfig& cfg, const std::filesystem::path& out_dir);

} // namespace asfda
