#include "asfda/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "asfda/adapt.hpp"
#include "asfda/metrics.hpp"
#include "asfda/select.hpp"
#include "asfda/synthdata.hpp"
#include "asfda/tensorio.hpp"
#include "asfda/uncertainty.hpp"

namespace asfda {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config file: one flat JSON object. Every knob has a default, unknown keys
// are hard errors, and sub-seeds are derived from master_seed so a run is a
// pure function of (config, master_seed).
// ---------------------------------------------------------------------------

struct ResolvedConfig {
    AdaptConfig adapt;
    TrainConfig pretrain;
    bool eval_use_tta = true;
    int synth_cases = 8;
    int synth_slices = 8;
    int synth_size = 32;
    double synth_shift_magnitude = 1.0;
};

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "master_seed",        "aug.k",
        "aug.seed",           "aug.gamma_range",
        "aug.contrast_range", "aug.noise_sigma_max",
        "aug.blur_sigma_range", "unc.epsilon",
        "unc.bins",           "select.budget_fraction",
        "select.capacity_multiplier", "select.strategy",
        "train.momentum",     "train.source.lr0",
        "train.source.epochs", "train.source.batch_size",
        "train.stage1.lr0",   "train.stage1.epochs",
        "train.stage1.batch_size", "train.stage2.lr0",
        "train.stage2.epochs", "train.stage2.batch_size",
        "adapt.active_weight", "eval.use_tta",
        "synth.cases",        "synth.slices_per_case",
        "synth.image_size",   "synth.shift_magnitude",
    };
    return keys;
}

ResolvedConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file " + path);
        try {
            doc = json::parse(f);
        } catch (const std::exception& ex) {
            throw ConfigError("config parse error in " + path + ": " + ex.what());
        }
        if (!doc.is_object()) throw ConfigError("config root must be a JSON object: " + path);
    }

    std::string unknown;
    for (const auto& [key, value] : doc.items())
        if (!known_keys().count(key)) unknown += unknown.empty() ? key : ", " + key;
    if (!unknown.empty()) throw ConfigError("unknown config key(s): " + unknown);

    ResolvedConfig rc;
    rc.pretrain.lr0 = 0.01;
    rc.pretrain.epochs = 40;
    rc.pretrain.batch_size = 8;
    rc.adapt.stage1_cfg.lr0 = 0.001;
    rc.adapt.stage1_cfg.epochs = 30;
    rc.adapt.stage1_cfg.batch_size = 8;
    rc.adapt.stage2_cfg = rc.adapt.stage1_cfg;

    bool aug_seed_explicit = false;
    try {
        auto get = [&](const char* key, auto& into) {
            if (doc.contains(key)) into = doc.at(key).template get<std::decay_t<decltype(into)>>();
        };
        get("master_seed", rc.adapt.master_seed);
        get("aug.k", rc.adapt.unc.aug.k);
        if (doc.contains("aug.seed")) {
            rc.adapt.unc.aug.seed = doc.at("aug.seed").get<std::uint64_t>();
            aug_seed_explicit = true;
        }
        get("aug.gamma_range", rc.adapt.unc.aug.gamma_range);
        get("aug.contrast_range", rc.adapt.unc.aug.contrast_range);
        get("aug.noise_sigma_max", rc.adapt.unc.aug.noise_sigma_max);
        get("aug.blur_sigma_range", rc.adapt.unc.aug.blur_sigma_range);
        get("unc.epsilon", rc.adapt.unc.epsilon);
        get("unc.bins", rc.adapt.unc.bins);
        get("select.budget_fraction", rc.adapt.sel.budget_fraction);
        get("select.capacity_multiplier", rc.adapt.sel.capacity_multiplier);
        if (doc.contains("select.strategy"))
            rc.adapt.sel.strategy = parse_strategy(doc.at("select.strategy").get<std::string>());
        double momentum = 0.9;
        get("train.momentum", momentum);
        rc.pretrain.momentum = rc.adapt.stage1_cfg.momentum = rc.adapt.stage2_cfg.momentum =
            momentum;
        get("train.source.lr0", rc.pretrain.lr0);
        get("train.source.epochs", rc.pretrain.epochs);
        get("train.source.batch_size", rc.pretrain.batch_size);
        get("train.stage1.lr0", rc.adapt.stage1_cfg.lr0);
        get("train.stage1.epochs", rc.adapt.stage1_cfg.epochs);
        get("train.stage1.batch_size", rc.adapt.stage1_cfg.batch_size);
        get("train.stage2.lr0", rc.adapt.stage2_cfg.lr0);
        get("train.stage2.epochs", rc.adapt.stage2_cfg.epochs);
        get("train.stage2.batch_size", rc.adapt.stage2_cfg.batch_size);
        get("adapt.active_weight", rc.adapt.active_weight);
        get("eval.use_tta", rc.eval_use_tta);
        get("synth.cases", rc.synth_cases);
        get("synth.slices_per_case", rc.synth_slices);
        get("synth.image_size", rc.synth_size);
        get("synth.shift_magnitude", rc.synth_shift_magnitude);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& ex) {
        throw ConfigError("bad config value in " + (path.empty() ? "defaults" : path) + ": " +
                          ex.what());
    }

    if (seed_override) rc.adapt.master_seed = *seed_override;
    const std::uint64_t master = rc.adapt.master_seed;
    if (!aug_seed_explicit) rc.adapt.unc.aug.seed = derive_seed(master, "aug");
    rc.adapt.sel.seed = derive_seed(master, "select");
    rc.pretrain.seed = derive_seed(master, "pretrain");
    rc.adapt.stage1_cfg.seed = derive_seed(master, "stage1");
    rc.adapt.stage2_cfg.seed = derive_seed(master, "stage2");
    return rc;
}

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;

    ResolvedConfig resolve() const {
        return load_config(config_path,
                           seed_given ? std::optional<std::uint64_t>(seed) : std::nullopt);
    }
};

void add_common(CLI::App* sub, CommonArgs& common) {
    sub->add_option("--config", common.config_path, "JSON config file (flat keys)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "master seed (overrides master_seed in config)")
        ->each([&common](const std::string&) { common.seed_given = true; });
}

std::vector<TargetSlice> load_all(const DatasetManifest& manifest, bool with_label) {
    std::vector<TargetSlice> slices;
    slices.reserve(manifest.slices.size());
    for (const SliceRef& ref : manifest.slices) slices.push_back(load_slice(ref, with_label));
    return slices;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

void cmd_gen_synth(const CommonArgs& common, const std::string& preset,
                   const std::string& out_dir) {
    if (preset != "shift-pair")
        throw ConfigError("unknown preset '" + preset + "' (supported: shift-pair)");
    const ResolvedConfig rc = common.resolve();
    auto [src, tgt] = default_shift_pair(rc.adapt.master_seed, rc.synth_shift_magnitude);
    for (DomainSpec* s : {&src, &tgt}) {
        s->num_cases = rc.synth_cases;
        s->slices_per_case = rc.synth_slices;
        s->height = s->width = rc.synth_size;
    }
    const auto sm = generate(src, std::filesystem::path(out_dir) / "source", "source");
    const auto tm = generate(tgt, std::filesystem::path(out_dir) / "target", "target");
    std::cout << "gen-synth: " << sm.slices.size() << " source + " << tm.slices.size()
              << " target slices under " << out_dir << "\n";
}

void cmd_pretrain(const CommonArgs& common, const std::string& manifest_path,
                  const std::string& out_dir) {
    const ResolvedConfig rc = common.resolve();
    const DatasetManifest manifest = load_manifest(manifest_path);

    std::vector<TrainSample> samples;
    for (const TargetSlice& s : load_all(manifest, true)) {
        if (!s.label)
            throw ManifestError("pretrain needs labels; slice '" + s.id + "' has none");
        samples.push_back({s.image, *s.label, 1.0});
    }

    const Segmenter init =
        Segmenter::random_init(manifest.num_classes, derive_seed(rc.adapt.master_seed, "init"));
    std::vector<TraceRow> trace;
    const Segmenter model = train(init, samples, rc.pretrain, &trace);

    std::filesystem::create_directories(out_dir);
    save_model(std::filesystem::path(out_dir) / "source.model", model);
    write_trace_csv(std::filesystem::path(out_dir) / "pretrain_trace.csv", trace);
    std::cout << "pretrain: " << samples.size() << " slices, " << trace.size()
              << " steps, loss " << format_double(trace.front().loss) << " -> "
              << format_double(trace.back().loss) << "\n";
}

void cmd_select(const CommonArgs& common, const std::string& manifest_path,
                const std::string& model_path, const std::string& out_dir,
                std::optional<double> budget, std::optional<int> capacity_mult,
                const std::string& strategy) {
    ResolvedConfig rc = common.resolve();
    if (budget) rc.adapt.sel.budget_fraction = *budget;
    if (capacity_mult) rc.adapt.sel.capacity_multiplier = *capacity_mult;
    if (!strategy.empty()) rc.adapt.sel.strategy = parse_strategy(strategy);
    rc.adapt.sel.validate();

    const DatasetManifest manifest = load_manifest(manifest_path);
    const Segmenter model = load_model(model_path, manifest.num_classes);

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path probs = std::filesystem::path(out_dir) / "probs";
    const auto scores = score_dataset(model, manifest, rc.adapt.unc, &probs);
    write_uncertainty_csv(std::filesystem::path(out_dir) / "uncertainty.csv", scores);

    const auto features = extract_features(model, load_all(manifest, false));
    const SelectionPartition partition = select_samples(scores, features, rc.adapt.sel);
    write_selection_csv(std::filesystem::path(out_dir) / "selection.csv", partition);
    std::cout << "select: strategy " << strategy_name(partition.strategy) << ", |d_ta| "
              << partition.d_ta.size() << ", |d_tu| " << partition.d_tu.size() << ", |d_ts| "
              << partition.d_ts.size() << "\n";
}

void cmd_adapt(const CommonArgs& common, const std::string& manifest_path,
               const std::string& model_path, const std::string& out_dir) {
    const ResolvedConfig rc = common.resolve();
    const DatasetManifest manifest = load_manifest(manifest_path);
    const Segmenter source = load_model(model_path, manifest.num_classes);
    const RunResult res = run_ugtst(source, manifest, rc.adapt, out_dir);
    std::cout << "adapt: " << strategy_name(res.partition.strategy) << " selected "
              << res.partition.d_ta.size() << " of " << manifest.slices.size()
              << " slices, label accesses " << res.label_accesses << ", stage1 "
              << res.stage1_ids.size() << " -> stage2 " << res.stage2_ids.size()
              << " samples\n";
}

void cmd_evaluate(const CommonArgs& common, const std::string& manifest_path,
                  const std::string& model_path, const std::string& out_file, bool no_tta) {
    const ResolvedConfig rc = common.resolve();
    const DatasetManifest manifest = load_manifest(manifest_path);
    const Segmenter model = load_model(model_path, manifest.num_classes);

    EvalConfig ec;
    ec.aug = rc.adapt.unc.aug;
    ec.aug.seed = derive_seed(rc.adapt.master_seed, "eval-aug");
    ec.use_tta = rc.eval_use_tta && !no_tta;
    const auto results = evaluate_cases(model, manifest, ec);

    const std::filesystem::path out(out_file);
    if (!out.parent_path().empty()) std::filesystem::create_directories(out.parent_path());
    write_metrics_csv(out, results);

    double mean = 0.0;
    for (const auto& r : results) mean += r.dsc;
    mean /= static_cast<double>(results.size());
    std::cout << "evaluate: " << results.size() << " cases, mean dsc " << format_double(mean)
              << (ec.use_tta ? "" : " (no tta)") << "\n";
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

void cmd_report(const std::string& out_file, const std::vector<std::string>& run_dirs) {
    struct RunRow {
        std::string dir, strategy;
        std::uint64_t seed;
        int capacity;
        double mean_dsc, mean_hd95;
    };
    std::vector<RunRow> rows;
    for (const std::string& dir : run_dirs) {
        const std::filesystem::path d(dir);
        std::ifstream rf(d / "report.json");
        if (!rf) throw std::runtime_error("no report.json under " + dir);
        json report;
        try {
            report = json::parse(rf);
        } catch (const std::exception& ex) {
            throw std::runtime_error("bad report.json under " + dir + ": " + ex.what());
        }

        const auto metrics = read_csv(d / "metrics.csv");
        if (metrics.size() < 2 || metrics[0].size() < 3 || metrics[0][1] != "dsc")
            throw std::runtime_error("bad or empty metrics.csv under " + dir);
        double dsc_sum = 0.0, hd_sum = 0.0;
        for (std::size_t i = 1; i < metrics.size(); ++i) {
            dsc_sum += std::stod(metrics[i][1]);
            hd_sum += std::stod(metrics[i][2]);
        }
        const double n_cases = static_cast<double>(metrics.size() - 1);

        RunRow r;
        r.dir = d.filename().empty() ? d.parent_path().filename().string()
                                     : d.filename().string();
        r.strategy = report.at("config").at("select.strategy").get<std::string>();
        r.seed = report.at("config").at("master_seed").get<std::uint64_t>();
        r.capacity = report.at("config").at("select.capacity_multiplier").get<int>();
        r.mean_dsc = dsc_sum / n_cases;
        r.mean_hd95 = hd_sum / n_cases;
        rows.push_back(std::move(r));
    }

    std::sort(rows.begin(), rows.end(), [](const RunRow& a, const RunRow& b) {
        return std::tie(a.strategy, a.capacity, a.seed, a.dir) <
               std::tie(b.strategy, b.capacity, b.seed, b.dir);
    });

    const std::filesystem::path out(out_file);
    if (!out.parent_path().empty()) std::filesystem::create_directories(out.parent_path());
    std::filesystem::path runs_path = out;
    runs_path.replace_extension(".runs.csv");

    std::ofstream runs(runs_path, std::ios::binary);
    runs << "run,strategy,seed,capacity_multiplier,mean_dsc,mean_hd95\n";
    for (const auto& r : rows)
        runs << r.dir << ',' << r.strategy << ',' << r.seed << ',' << r.capacity << ','
             << format_double(r.mean_dsc) << ',' << format_double(r.mean_hd95) << '\n';
    if (!runs.flush()) throw std::runtime_error("write failed: " + runs_path.string());

    std::ofstream cmp(out, std::ios::binary);
    cmp << "strategy,capacity_multiplier,n,mean_dsc,std_dsc,mean_hd95,std_hd95\n";
    std::size_t i = 0;
    int groups = 0;
    while (i < rows.size()) {
        std::size_t j = i;
        std::vector<double> ds, hs;
        while (j < rows.size() && rows[j].strategy == rows[i].strategy &&
               rows[j].capacity == rows[i].capacity) {
            ds.push_back(rows[j].mean_dsc);
            hs.push_back(rows[j].mean_hd95);
            ++j;
        }
        auto mean_std = [](const std::vector<double>& v) {
            double m = 0.0;
            for (double x : v) m += x;
            m /= static_cast<double>(v.size());
            double s = 0.0;
            if (v.size() > 1) {
                for (double x : v) s += (x - m) * (x - m);
                s = std::sqrt(s / static_cast<double>(v.size() - 1));
            }
            return std::pair<double, double>(m, s);
        };
        const auto [dm, dsd] = mean_std(ds);
        const auto [hm, hsd] = mean_std(hs);
        cmp << rows[i].strategy << ',' << rows[i].capacity << ',' << ds.size() << ','
            << format_double(dm) << ',' << format_double(dsd) << ',' << format_double(hm) << ','
            << format_double(hsd) << '\n';
        ++groups;
        i = j;
    }
    if (!cmp.flush()) throw std::runtime_error("write failed: " + out.string());
    std::cout << "report: " << rows.size() << " runs, " << groups << " comparison rows -> "
              << out_file << "\n";
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"active source-free domain adaptation pipeline"};
    app.require_subcommand(1);

    CommonArgs common;

    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic source/target pair");
    std::string gen_preset = "shift-pair", gen_out;
    gen->add_option("--preset", gen_preset, "dataset preset")->capture_default_str();
    gen->add_option("--out", gen_out, "output directory")->required();
    add_common(gen, common);
    gen->callback([&] { cmd_gen_synth(common, gen_preset, gen_out); });

    auto* pre = app.add_subcommand("pretrain", "train the source model on a labeled manifest");
    std::string pre_manifest, pre_out;
    pre->add_option("--manifest", pre_manifest, "dataset manifest")->required()
        ->check(CLI::ExistingFile);
    pre->add_option("--out", pre_out, "output directory")->required();
    add_common(pre, common);
    pre->callback([&] { cmd_pretrain(common, pre_manifest, pre_out); });

    auto* sel = app.add_subcommand("select", "score uncertainty and pick the annotation set");
    std::string sel_manifest, sel_model, sel_out, sel_strategy;
    double sel_budget = 0.0;
    int sel_capmult = 0;
    sel->add_option("--manifest", sel_manifest, "dataset manifest")->required()
        ->check(CLI::ExistingFile);
    sel->add_option("--model", sel_model, "model weights")->required()
        ->check(CLI::ExistingFile);
    sel->add_option("--out", sel_out, "output directory")->required();
    auto* opt_budget = sel->add_option("--budget", sel_budget, "annotation budget fraction");
    auto* opt_cap = sel->add_option("--capacity-mult", sel_capmult, "candidate pool multiplier");
    sel->add_option("--strategy", sel_strategy,
                    "ugtst | random | least_confidence | mean_entropy | centroid");
    add_common(sel, common);
    sel->callback([&] {
        cmd_select(common, sel_manifest, sel_model, sel_out,
                   opt_budget->count() ? std::optional<double>(sel_budget) : std::nullopt,
                   opt_cap->count() ? std::optional<int>(sel_capmult) : std::nullopt,
                   sel_strategy);
    });

    auto* ad = app.add_subcommand("adapt", "run the full selection + tiered self-training");
    std::string ad_manifest, ad_model, ad_out;
    ad->add_option("--manifest", ad_manifest, "target manifest")->required()
        ->check(CLI::ExistingFile);
    ad->add_option("--source-model", ad_model, "source model weights")->required()
        ->check(CLI::ExistingFile);
    ad->add_option("--out", ad_out, "run directory")->required();
    add_common(ad, common);
    ad->callback([&] { cmd_adapt(common, ad_manifest, ad_model, ad_out); });

    auto* ev = app.add_subcommand("evaluate", "volumetric DSC / HD95 on a labeled manifest");
    std::string ev_manifest, ev_model, ev_out;
    bool ev_no_tta = false;
    ev->add_option("--manifest", ev_manifest, "labeled manifest")->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--model", ev_model, "model weights")->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--out", ev_out, "metrics CSV path")->required();
    ev->add_flag("--no-tta", ev_no_tta, "single forward pass instead of the ensemble");
    add_common(ev, common);
    ev->callback([&] { cmd_evaluate(common, ev_manifest, ev_model, ev_out, ev_no_tta); });

    auto* rep = app.add_subcommand("report", "aggregate run directories into comparison CSVs");
    std::string rep_out;
    std::vector<std::string> rep_runs;
    rep->add_option("--out", rep_out, "comparison CSV path")->required();
    rep->add_option("runs", rep_runs, "run directories (need report.json and metrics.csv)")
        ->required();
    rep->callback([&] { cmd_report(rep_out, rep_runs); });

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

int run_cli(int argc, char** argv) {
    return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

} // namespace asfda
