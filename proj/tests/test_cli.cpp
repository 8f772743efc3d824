#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "asfda/cli.hpp"
#include "asfda/segmenter.hpp"
#include "asfda/tensorio.hpp"
#include "test_util.hpp"

#include <json.hpp>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

using namespace asfda;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

// One shared synthetic pair + pretrained source model; built on first use so
// the expensive steps run once for the whole binary.
struct CliFixture {
    TempDir dir{"cli"};
    fs::path cfg = dir / "cfg.json";
    fs::path src_manifest = dir / "data" / "source" / "manifest.json";
    fs::path tgt_manifest = dir / "data" / "target" / "manifest.json";
    fs::path model = dir / "model" / "source.model";

    CliFixture() {
        testutil::write_text(cfg, R"({
  "synth.cases": 2,
  "synth.slices_per_case": 3,
  "aug.k": 2,
  "select.budget_fraction": 0.34,
  "select.capacity_multiplier": 2,
  "train.source.epochs": 3,
  "train.source.batch_size": 4,
  "train.stage1.epochs": 1,
  "train.stage1.batch_size": 4,
  "train.stage2.epochs": 1,
  "train.stage2.batch_size": 4
})");
        run_or_die({"gen-synth", "--out", (dir / "data").string(), "--config", cfg.string(),
                    "--seed", "5"});
        run_or_die({"pretrain", "--manifest", src_manifest.string(),
                    "--out", (dir / "model").string(), "--config", cfg.string(), "--seed", "5"});
    }

    void run_or_die(const std::vector<std::string>& args) {
        if (run_cli(args) != 0) throw std::runtime_error("fixture command failed: " + args[0]);
    }
};

CliFixture& fix() {
    static CliFixture f;
    return f;
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::istringstream in(testutil::read_text(p));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

std::string cell(const std::string& line, int idx) {
    std::istringstream in(line);
    std::string c;
    for (int i = 0; i <= idx; ++i) std::getline(in, c, ',');
    return c;
}

} // namespace

TEST_CASE("gen-synth writes a loadable pair and reruns byte-identically") {
    CliFixture& f = fix();
    const DatasetManifest src = load_manifest(f.src_manifest);
    const DatasetManifest tgt = load_manifest(f.tgt_manifest);
    CHECK(src.slices.size() == 6);
    CHECK(tgt.slices.size() == 6);
    CHECK(src.domain_tag == "source");
    CHECK(tgt.domain_tag == "target");

    TempDir dir("cli2");
    CHECK(run_cli({"gen-synth", "--out", (dir / "data").string(), "--config", f.cfg.string(),
                   "--seed", "5"}) == 0);
    for (const auto rel : {"source/manifest.json", "target/manifest.json", "source/spec.json",
                           "target/spec.json", "source/c00_s00.img.ugts"})
        CHECK(testutil::read_file(dir / "data" / rel) ==
              testutil::read_file(f.dir / "data" / rel));
}

TEST_CASE("pretrain leaves a model and trace behind") {
    CliFixture& f = fix();
    CHECK(fs::exists(f.model));
    CHECK_NOTHROW(load_model(f.model, 2));
    const auto trace = lines_of(f.dir / "model" / "pretrain_trace.csv");
    CHECK(trace[0] == "step,epoch,lr,loss");
    CHECK(trace.size() == 1 + 3 * 2);  // 3 epochs, ceil(6/4) = 2 steps each
}

TEST_CASE("select emits exactly M annotation rows") {
    CliFixture& f = fix();
    TempDir out("cli_sel");
    CHECK(run_cli({"select", "--manifest", f.tgt_manifest.string(), "--model", f.model.string(),
                   "--out", (out / "sel").string(), "--config", f.cfg.string(),
                   "--seed", "5"}) == 0);

    const auto rows = lines_of(out / "sel" / "selection.csv");
    REQUIRE(rows.size() == 7);  // header + one row per slice
    CHECK(rows[0] == "slice_id,u,set,cluster_id,distance_to_centroid,strategy,seed");
    int n_ta = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) n_ta += cell(rows[i], 2) == "ta";
    CHECK(n_ta == 2);  // round(0.34 * 6)

    CHECK(fs::exists(out / "sel" / "uncertainty.csv"));
    std::size_t n_probs = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(out / "sel" / "probs"))
        ++n_probs;
    CHECK(n_probs == 6);
}

TEST_CASE("select honors flag overrides over the config file") {
    CliFixture& f = fix();
    TempDir out("cli_sel");
    CHECK(run_cli({"select", "--manifest", f.tgt_manifest.string(), "--model", f.model.string(),
                   "--out", (out / "sel").string(), "--config", f.cfg.string(),
                   "--strategy", "random", "--budget", "0.5", "--capacity-mult", "1"}) == 0);
    const auto rows = lines_of(out / "sel" / "selection.csv");
    int n_ta = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(cell(rows[i], 5) == "random");
        n_ta += cell(rows[i], 2) == "ta";
    }
    CHECK(n_ta == 3);  // round(0.5 * 6)
}

TEST_CASE("seed flag overrides the config and changes the selection") {
    CliFixture& f = fix();
    TempDir out("cli_seed");
    auto sel = [&](const char* name, std::vector<std::string> extra) {
        std::vector<std::string> args = {"select", "--manifest", f.tgt_manifest.string(),
                                         "--model", f.model.string(),
                                         "--out", (out / name).string(),
                                         "--strategy", "random"};
        args.insert(args.end(), extra.begin(), extra.end());
        REQUIRE(run_cli(args) == 0);
        return testutil::read_file(out / name / "selection.csv");
    };

    testutil::write_text(out / "seeded.json", R"({"master_seed": 41})");
    const auto a = sel("a", {"--config", (out / "seeded.json").string()});
    const auto b = sel("b", {"--seed", "41"});
    const auto c = sel("c", {"--seed", "42"});
    CHECK(a == b);  // --seed equals a config-file master_seed
    CHECK(a != c);
}

TEST_CASE("adapt then evaluate then report round-trips") {
    CliFixture& f = fix();
    TempDir out("cli_run");
    for (const auto& [run, seed] : {std::pair{"run1", "7"}, {"run2", "8"}}) {
        CHECK(run_cli({"adapt", "--manifest", f.tgt_manifest.string(),
                       "--source-model", f.model.string(), "--out", (out / run).string(),
                       "--config", f.cfg.string(), "--seed", seed}) == 0);
        CHECK(run_cli({"evaluate", "--manifest", f.tgt_manifest.string(),
                       "--model", (out / run / "stage2.model").string(),
                       "--out", (out / run / "metrics.csv").string(),
                       "--config", f.cfg.string(), "--no-tta"}) == 0);
    }

    const auto report = nlohmann::json::parse(testutil::read_text(out / "run1" / "report.json"));
    CHECK(report.at("label_access_count") == 2);
    CHECK(report.at("selection").at("m") == 2);
    CHECK(report.at("config").at("master_seed") == 7);

    const auto metrics = lines_of(out / "run1" / "metrics.csv");
    REQUIRE(metrics.size() == 3);  // header + two cases
    CHECK(cell(metrics[1], 0) == "c00");
    CHECK(cell(metrics[2], 0) == "c01");

    CHECK(run_cli({"report", "--out", (out / "cmp.csv").string(),
                   (out / "run1").string(), (out / "run2").string()}) == 0);
    const auto runs = lines_of(out / "cmp.runs.csv");
    REQUIRE(runs.size() == 3);
    CHECK(runs[0] == "run,strategy,seed,capacity_multiplier,mean_dsc,mean_hd95");
    CHECK(cell(runs[1], 0) == "run1");  // same strategy/capacity, sorted by seed
    CHECK(cell(runs[2], 0) == "run2");

    const auto cmp = lines_of(out / "cmp.csv");
    REQUIRE(cmp.size() == 2);  // both runs fold into one comparison group
    CHECK(cmp[0] == "strategy,capacity_multiplier,n,mean_dsc,std_dsc,mean_hd95,std_hd95");
    CHECK(cell(cmp[1], 0) == "ugtst");
    CHECK(cell(cmp[1], 2) == "2");

    // Aggregation is a pure function of the run directories.
    const auto first = testutil::read_file(out / "cmp.csv");
    CHECK(run_cli({"report", "--out", (out / "cmp.csv").string(),
                   (out / "run2").string(), (out / "run1").string()}) == 0);
    CHECK(testutil::read_file(out / "cmp.csv") == first);
}

TEST_CASE("usage and config errors exit 1") {
    CliFixture& f = fix();
    TempDir out("cli_err");
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"frobnicate"}) == 1);
    CHECK(run_cli({"pretrain", "--out", (out / "x").string()}) == 1);  // missing --manifest
    CHECK(run_cli({"pretrain", "--manifest", (out / "missing.json").string(),
                   "--out", (out / "x").string()}) == 1);
    CHECK(run_cli({"gen-synth", "--preset", "bogus", "--out", (out / "d").string()}) == 1);
    CHECK(run_cli({"select", "--manifest", f.tgt_manifest.string(), "--model", f.model.string(),
                   "--out", (out / "s").string(), "--strategy", "bogus"}) == 1);

    testutil::write_text(out / "bad.json", R"({"nope": 1})");
    CHECK(run_cli({"gen-synth", "--out", (out / "d").string(),
                   "--config", (out / "bad.json").string()}) == 1);
    testutil::write_text(out / "bad2.json", R"({"select.budget_fraction": -1})");
    CHECK(run_cli({"select", "--manifest", f.tgt_manifest.string(), "--model", f.model.string(),
                   "--out", (out / "s").string(),
                   "--config", (out / "bad2.json").string()}) == 1);
}

TEST_CASE("runtime failures exit 2") {
    CliFixture& f = fix();
    TempDir out("cli_err2");

    DatasetManifest unlabeled = load_manifest(f.tgt_manifest);
    for (auto& ref : unlabeled.slices) ref.label_path.reset();
    save_manifest(out / "unlabeled.json", unlabeled);
    CHECK(run_cli({"evaluate", "--manifest", (out / "unlabeled.json").string(),
                   "--model", f.model.string(), "--out", (out / "m.csv").string(),
                   "--no-tta"}) == 2);

    testutil::write_text(out / "broken.json", "not json at all");
    CHECK(run_cli({"pretrain", "--manifest", (out / "broken.json").string(),
                   "--out", (out / "x").string()}) == 2);

    CHECK(run_cli({"report", "--out", (out / "c.csv").string(), (out / "no_run").string()}) == 2);
}
