#include "asfda/adapt.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace asfda {

namespace {

// d_ta first (pick order), then the remaining wanted ids in manifest order.
std::vector<TrainSample> build_samples(const DatasetManifest& manifest, const AdaptationPlan& plan,
                                       const PseudoLabelSet& pseudo, bool all_others,
                                       const char* stage_name, std::vector<std::string>* used_ids) {
    const std::set<std::string> ta(plan.partition.d_ta.begin(), plan.partition.d_ta.end());
    const std::set<std::string> ts(plan.partition.d_ts.begin(), plan.partition.d_ts.end());

    std::vector<TrainSample> samples;
    std::vector<std::string> ids;
    for (const std::string& id : plan.partition.d_ta) {
        auto it = plan.annotations.find(id);
        if (it == plan.annotations.end())
            throw std::invalid_argument(std::string(stage_name) + ": no annotation for '" + id +
                                        "'");
        TrainSample s;
        s.image = load_slice(manifest.find(id), false).image;
        s.target = it->second;
        s.weight = plan.active_weight;
        samples.push_back(std::move(s));
        ids.push_back(id);
    }
    for (const SliceRef& ref : manifest.slices) {
        if (ta.count(ref.id)) continue;
        if (!all_others && !ts.count(ref.id)) continue;
        auto it = pseudo.find(ref.id);
        if (it == pseudo.end())
            throw std::invalid_argument(std::string(stage_name) + ": no pseudo-label for '" +
                                        ref.id + "'");
        TrainSample s;
        s.image = load_slice(ref, false).image;
        s.target = it->second.hard_label;
        samples.push_back(std::move(s));
        ids.push_back(ref.id);
    }
    if (used_ids) *used_ids = std::move(ids);
    return samples;
}

} // namespace

PseudoLabelSet make_pseudo_labels(const std::vector<std::pair<std::string, Tensor>>& probs,
                                  PseudoLabel::Stage stage) {
    PseudoLabelSet out;
    for (const auto& [id, prob] : probs) out[id] = {argmax_classes(prob), stage};
    return out;
}

Tensor AnnotationOracle::annotate(const std::string& slice_id) {
    const SliceRef& ref = manifest_->find(slice_id);
    if (!ref.labeled())
        throw ManifestError("oracle: slice '" + slice_id + "' has no ground-truth label");
    accessed_.insert(slice_id);
    return *load_slice(ref).label;
}

Segmenter stage1(const Segmenter& source, const AdaptationPlan& plan, const PseudoLabelSet& pseudo,
                 const DatasetManifest& manifest, std::vector<TraceRow>* trace,
                 std::vector<std::string>* used_ids) {
    const auto samples = build_samples(manifest, plan, pseudo, false, "stage1", used_ids);
    return train(source, samples, plan.stage1_cfg, trace);
}

PseudoLabelSet regenerate(const Segmenter& m_t1, const DatasetManifest& manifest,
                          const AugmentConfig& aug, const std::set<std::string>& exclude,
                          const std::filesystem::path* prob_dir) {
    if (prob_dir) std::filesystem::create_directories(*prob_dir);
    std::vector<std::pair<std::string, Tensor>> probs;
    for (const SliceRef& ref : manifest.slices) {
        if (exclude.count(ref.id)) continue;
        const TargetSlice slice = load_slice(ref, false);
        const Tensor prob = ensemble_predict(m_t1, slice.image, plan_for_slice(aug, slice.id));
        if (prob_dir) write_tensor(*prob_dir / (slice.id + ".prob.ugts"), prob);
        probs.emplace_back(slice.id, prob);
    }
    return make_pseudo_labels(probs, PseudoLabel::Stage::stage1);
}

Segmenter stage2(const Segmenter& m_t1, const AdaptationPlan& plan,
                 const PseudoLabelSet& regenerated, const DatasetManifest& manifest,
                 std::vector<TraceRow>* trace, std::vector<std::string>* used_ids) {
    const auto samples = build_samples(manifest, plan, regenerated, true, "stage2", used_ids);
    return train(m_t1, samples, plan.stage2_cfg, trace);
}

void AdaptConfig::validate() const {
    unc.validate();
    sel.validate();
    stage1_cfg.validate();
    stage2_cfg.validate();
    if (active_weight < 0.0) throw ConfigError("adapt.active_weight must be >= 0");
}

nlohmann::ordered_json adapt_config_json(const AdaptConfig& cfg) {
    nlohmann::ordered_json j;
    j["master_seed"] = cfg.master_seed;
    j["aug.k"] = cfg.unc.aug.k;
    j["aug.seed"] = cfg.unc.aug.seed;
    j["aug.gamma_range"] = cfg.unc.aug.gamma_range;
    j["aug.contrast_range"] = cfg.unc.aug.contrast_range;
    j["aug.noise_sigma_max"] = cfg.unc.aug.noise_sigma_max;
    j["aug.blur_sigma_range"] = cfg.unc.aug.blur_sigma_range;
    j["unc.epsilon"] = cfg.unc.epsilon;
    j["unc.bins"] = cfg.unc.bins;
    j["select.budget_fraction"] = cfg.sel.budget_fraction;
    j["select.capacity_multiplier"] = cfg.sel.capacity_multiplier;
    j["select.strategy"] = strategy_name(cfg.sel.strategy);
    j["select.seed"] = cfg.sel.seed;
    j["train.stage1.lr0"] = cfg.stage1_cfg.lr0;
    j["train.stage1.epochs"] = cfg.stage1_cfg.epochs;
    j["train.stage1.batch_size"] = cfg.stage1_cfg.batch_size;
    j["train.stage1.seed"] = cfg.stage1_cfg.seed;
    j["train.stage2.lr0"] = cfg.stage2_cfg.lr0;
    j["train.stage2.epochs"] = cfg.stage2_cfg.epochs;
    j["train.stage2.batch_size"] = cfg.stage2_cfg.batch_size;
    j["train.stage2.seed"] = cfg.stage2_cfg.seed;
    j["train.momentum"] = cfg.stage1_cfg.momentum;
    j["adapt.active_weight"] = cfg.active_weight;
    return j;
}

namespace {

nlohmann::ordered_json trace_json(const std::vector<TraceRow>& trace) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : trace) rows.push_back({r.step, r.epoch, r.lr, r.loss});
    return rows;
}

} // namespace

RunResult run_ugtst(const Segmenter& source, const DatasetManifest& manifest,
                    const AdaptConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    if (manifest.slices.empty()) throw std::invalid_argument("run_ugtst: empty manifest");
    std::filesystem::create_directories(out_dir);

    const char* stage = "scoring";
    try {
        std::vector<std::pair<std::string, Tensor>> probs;
        const std::filesystem::path src_prob_dir = out_dir / "pseudo_source";
        const auto scores = score_dataset(source, manifest, cfg.unc, &src_prob_dir, &probs);
        write_uncertainty_csv(out_dir / "uncertainty.csv", scores);

        stage = "selection";
        std::vector<TargetSlice> slices;
        for (const SliceRef& ref : manifest.slices) slices.push_back(load_slice(ref, false));
        const auto features = extract_features(source, slices);
        SelectionPartition partition = select_samples(scores, features, cfg.sel);
        write_selection_csv(out_dir / "selection.csv", partition);

        stage = "annotation";
        AnnotationOracle oracle(manifest);
        AdaptationPlan plan;
        plan.partition = partition;
        plan.stage1_cfg = cfg.stage1_cfg;
        plan.stage2_cfg = cfg.stage2_cfg;
        plan.active_weight = cfg.active_weight;
        for (const std::string& id : partition.d_ta) plan.annotations[id] = oracle.annotate(id);

        stage = "stage1";
        const PseudoLabelSet source_pseudo = make_pseudo_labels(probs, PseudoLabel::Stage::source);
        RunResult res{std::move(partition), Segmenter(manifest.num_classes),
                      Segmenter(manifest.num_classes), 0,  {}, {}, {}, {}};
        res.m_t1 = stage1(source, plan, source_pseudo, manifest, &res.stage1_trace,
                          &res.stage1_ids);
        save_model(out_dir / "stage1.model", res.m_t1);
        write_trace_csv(out_dir / "stage1_trace.csv", res.stage1_trace);

        stage = "regeneration";
        AugmentConfig regen_aug = cfg.unc.aug;
        regen_aug.seed = derive_seed(cfg.master_seed, "regen");
        const std::set<std::string> ta(res.partition.d_ta.begin(), res.partition.d_ta.end());
        const std::filesystem::path regen_dir = out_dir / "pseudo_stage1";
        const PseudoLabelSet regenerated = regenerate(res.m_t1, manifest, regen_aug, ta,
                                                      &regen_dir);

        stage = "stage2";
        res.m_t2 = stage2(res.m_t1, plan, regenerated, manifest, &res.stage2_trace,
                          &res.stage2_ids);
        save_model(out_dir / "stage2.model", res.m_t2);
        write_trace_csv(out_dir / "stage2_trace.csv", res.stage2_trace);

        stage = "report";
        res.label_accesses = oracle.access_count();
        nlohmann::ordered_json report;
        report["config"] = adapt_config_json(cfg);
        report["dataset"] = {{"name", manifest.name},
                             {"domain_tag", manifest.domain_tag},
                             {"num_classes", manifest.num_classes},
                             {"n_slices", manifest.slices.size()}};
        report["selection"] = {{"m", res.partition.d_ta.size()},
                               {"n_tu", res.partition.d_tu.size()},
                               {"n_ts", res.partition.d_ts.size()},
                               {"strategy", strategy_name(cfg.sel.strategy)},
                               {"d_ta", res.partition.d_ta}};
        report["label_access_count"] = res.label_accesses;
        report["stage1"] = {{"train_size", res.stage1_ids.size()},
                            {"steps", res.stage1_trace.size()},
                            {"final_loss",
                             res.stage1_trace.empty() ? 0.0 : res.stage1_trace.back().loss},
                            {"trace", trace_json(res.stage1_trace)}};
        report["stage2"] = {{"train_size", res.stage2_ids.size()},
                            {"steps", res.stage2_trace.size()},
                            {"final_loss",
                             res.stage2_trace.empty() ? 0.0 : res.stage2_trace.back().loss},
                            {"trace", trace_json(res.stage2_trace)}};
        std::ofstream f(out_dir / "report.json", std::ios::binary);
        if (!f)
            throw TensorIoError(TensorIoError::Kind::io,
                                "cannot open " + (out_dir / "report.json").string());
        f << report.dump(2) << '\n';
        if (!f.flush())
            throw TensorIoError(TensorIoError::Kind::io,
                                "write failed: " + (out_dir / "report.json").string());
        return res;
    } catch (const std::exception& ex) {
        throw std::runtime_error("adaptation failed during " + std::string(stage) + ": " +
                                 ex.what());
    }
}

} // namespace asfda
