#include <doctest.h>

#include <fstream>
#include <sstream>

#include "diffdenoise/array_io.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/hash.hpp"
#include "diffdenoise/pipeline.hpp"
#include "diffdenoise/srds.hpp"
#include "test_support.hpp"

using namespace diffdenoise;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "seed": 3,
  "dataset": {"source": "phantom", "count": 11, "size": 32, "patch_size": 32, "stride": 32,
              "splits": {"train": 6, "test": 5}},
  "regimes": [
    {"name": "gauss", "noise": {"family": "gaussian", "sigma": 0.03}, "iterations": 2,
     "ablation": true, "stability": true},
    {"name": "corr", "noise": {"family": "gamma", "alpha": 60, "beta": 60, "corr_sigma": 0.5}}
  ],
  "bsn": {"channels": 8, "depth": 1, "train": {"epochs": 2, "batch_size": 3}},
  "diffusion": {"timesteps": 100, "base_channels": 8, "levels": 2, "train": {"epochs": 2, "crop": 16}},
  "srds": {"steps": 4},
  "distill": {"layers": 3, "channels": 8, "train": {"epochs": 2}},
  "eval": {"stability_seeds": 3, "stability_images": 2}
})";

ExperimentConfig tiny_config(const fs::path& dir) {
  auto c = parse_config(kTiny);
  c.output_dir = dir.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int csv_rows(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  int n = -1;
  while (std::getline(in, line)) {
    if (!line.empty()) ++n;
  }
  return n;
}

/// One complete run shared by the read-only cases.
const fs::path& shared_run() {
  static const fs::path dir = [] {
    auto d = test_support::scratch_dir("pipeline_shared");
    run_pipeline(tiny_config(d));
    return d;
  }();
  return dir;
}

std::vector<double> shifted(const std::vector<double>& base, double delta, double jitter = 0.0) {
  std::vector<double> out;
  for (std::size_t i = 0; i < base.size(); ++i) out.push_back(base[i] + delta + jitter * ((i * 7) % 5));
  return out;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("stage names round-trip") {
    for (int i = 0; i <= static_cast<int>(PipelineStage::report); ++i) {
      const auto s = static_cast<PipelineStage>(i);
      CHECK(parse_stage(to_string(s)) == s);
    }
    CHECK(to_string(PipelineStage::train_bsn) == "train-bsn");
    CHECK_THROWS(parse_stage("train"));
  }

  TEST_CASE("a full run records every stage with verifiable outputs") {
    const auto& dir = shared_run();
    const auto ledger = RunLedger::load(dir / kLedgerFile);
    CHECK(ledger.config_hash == tiny_config(dir).hash());
    const std::vector<std::string> expected = {
        "data",           "gauss/synth",    "gauss/train-bsn",         "gauss/iter1/train-diffusion",
        "gauss/iter1/sample", "gauss/iter1/distill", "gauss/iter1/eval", "gauss/iter2/train-diffusion",
        "gauss/iter2/sample", "gauss/iter2/distill", "gauss/iter2/eval", "gauss/ablation",
        "gauss/stability", "corr/synth",     "corr/train-bsn",          "corr/iter1/train-diffusion",
        "corr/iter1/sample", "corr/iter1/distill", "corr/iter1/eval", "report"};
    REQUIRE(ledger.records.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& r = ledger.records[i];
      CAPTURE(r.name);
      CHECK(r.name == expected[i]);
      CHECK(r.inputs_hash.size() == 64);
      CHECK_FALSE(r.outputs.empty());
      CHECK(r.wall_time >= 0.0);
      for (const auto& [rel, hash] : r.outputs) CHECK(sha256_file(dir / rel) == hash);
    }
    CHECK(ledger.at("gauss/train-bsn").metrics["blind_spot_size"] == 1);
    CHECK(ledger.at("corr/train-bsn").metrics["blind_spot_size"] == 5);
    CHECK(ledger.at("gauss/iter1/sample").stage == "sample");
  }

  TEST_CASE("two regimes keep separate chains") {
    const auto& dir = shared_run();
    CHECK(sha256_file(dir / "gauss/iter1/diffusion.ckpt") != sha256_file(dir / "corr/iter1/diffusion.ckpt"));
    CHECK(sha256_file(dir / "gauss/bsn.ckpt") != sha256_file(dir / "corr/bsn.ckpt"));
    CHECK(load_array(dir / "gauss/noisy/p00000.ddn") != load_array(dir / "corr/noisy/p00000.ddn"));
    CHECK(load_array(dir / "data/clean/p00000.ddn").height() == 32);
  }

  TEST_CASE("provenance links each distilled model to its inputs") {
    const auto& dir = shared_run();
    const auto p1 = nlohmann::json::parse(slurp(dir / "gauss/iter1/provenance.json"));
    const auto p2 = nlohmann::json::parse(slurp(dir / "gauss/iter2/provenance.json"));
    CHECK(p1["iteration"] == 1);
    CHECK(p1["previous"].is_null());
    CHECK(p1["condition_checkpoint"]["path"] == "gauss/bsn.ckpt");
    CHECK(p2["previous"] == "gauss/iter1/provenance.json");
    CHECK(p2["condition_checkpoint"]["path"] == "gauss/iter1/distilled.ckpt");
    CHECK(p2["condition_checkpoint"]["sha256"] == p1["distilled_checkpoint"]["sha256"]);
    CHECK(p1["diffusion_checkpoint"]["sha256"] == sha256_file(dir / "gauss/iter1/diffusion.ckpt"));
    CHECK(p1["srds"]["eps_seeds"].size() == 6);
    for (const auto& [id, seed] : p1["srds"]["eps_seeds"].items()) CHECK(seed.get<std::uint64_t>() == image_eps_seed(3, id));
  }

  TEST_CASE("metric tables have one row per eval image and the expected columns") {
    const auto& dir = shared_run();
    const auto eval = MetricReport::load_csv(dir / "gauss/iter1/metrics.csv");
    CHECK(eval.image_ids().size() == 5);
    CHECK(eval.methods() == std::vector<std::string>{"noisy", "condition", "srds", "distilled"});
    CHECK(csv_rows(dir / "gauss/iter2/metrics.csv") == 5);
    const auto ablation = MetricReport::load_csv(dir / "gauss/ablation/metrics.csv");
    CHECK(ablation.methods() == std::vector<std::string>{"srds_kd", "srds", "single", "single_kd"});
    CHECK(ablation.psnr_of("srds") == eval.psnr_of("srds"));
    CHECK(ablation.psnr_of("srds_kd") == eval.psnr_of("distilled"));
    CHECK(csv_rows(dir / "gauss/stability.csv") == 2 * 3);
    CHECK(csv_rows(dir / "report/gauss_results.csv") >= 1);
    CHECK(fs::exists(dir / "report/gauss_ablation.csv"));
    CHECK(fs::exists(dir / "report/gauss_stability.csv"));
    CHECK_FALSE(fs::exists(dir / "report/corr_ablation.csv"));
    const auto md = slurp(dir / "report/report.md");
    CHECK(md.find("gauss") != std::string::npos);
    CHECK(md.find("corr") != std::string::npos);
  }

  TEST_CASE("iteration two is conditioned on iteration one") {
    const auto& dir = shared_run();
    const auto it1 = MetricReport::load_csv(dir / "gauss/iter1/metrics.csv");
    const auto it2 = MetricReport::load_csv(dir / "gauss/iter2/metrics.csv");
    CHECK(it2.psnr_of("condition") == it1.psnr_of("distilled"));
    CHECK(it2.psnr_of("noisy") == it1.psnr_of("noisy"));
  }

  TEST_CASE("srds samples are the exact mean of the stored branches") {
    const auto& dir = shared_run();
    const auto out = load_array(dir / "gauss/iter1/samples/p00000.ddn");
    const auto pos = load_array(dir / "gauss/iter1/branches/p00000_pos.ddn");
    const auto neg = load_array(dir / "gauss/iter1/branches/p00000_neg.ddn");
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.values()[i] == (pos.values()[i] + neg.values()[i]) * 0.5F);
  }

  TEST_CASE("a rerun reuses every stage and leaves the ledger unchanged") {
    const auto dir = test_support::scratch_dir("pipeline_rerun");
    fs::copy(shared_run(), dir, fs::copy_options::recursive);
    const auto before = slurp(dir / kLedgerFile);
    const auto ledger = run_pipeline(tiny_config(dir));
    CHECK(slurp(dir / kLedgerFile) == before);
    CHECK(ledger.content_hash() == RunLedger::load(shared_run() / kLedgerFile).content_hash());
  }

  TEST_CASE("a tampered output raises a stage error naming the stage") {
    const auto dir = test_support::scratch_dir("pipeline_tamper");
    fs::copy(shared_run(), dir, fs::copy_options::recursive);
    auto img = load_array(dir / "gauss/iter1/samples/p00000.ddn");
    img(0, 0) += 0.5F;
    save_array(dir / "gauss/iter1/samples/p00000.ddn", img);
    try {
      run_pipeline(tiny_config(dir));
      FAIL("expected a stage error");
    } catch (const StageError& e) {
      CHECK(e.stage() == "sample");
      CHECK(std::string(e.what()).find("gauss/iter1/samples/p00000.ddn") != std::string::npos);
    }
  }

  TEST_CASE("a missing output reruns only that stage") {
    const auto dir = test_support::scratch_dir("pipeline_missing");
    fs::copy(shared_run(), dir, fs::copy_options::recursive);
    const auto before = RunLedger::load(dir / kLedgerFile);
    fs::remove(dir / "report/report.md");
    const auto after = run_pipeline(tiny_config(dir));
    CHECK(fs::exists(dir / "report/report.md"));
    CHECK(after.at("report").outputs == before.at("report").outputs);
    CHECK(after.at("gauss/iter1/sample").wall_time == before.at("gauss/iter1/sample").wall_time);
  }

  TEST_CASE("a changed setting invalidates downstream stages only") {
    const auto dir = test_support::scratch_dir("pipeline_change");
    fs::copy(shared_run(), dir, fs::copy_options::recursive);
    const auto before = RunLedger::load(dir / kLedgerFile);
    auto c = tiny_config(dir);
    c.srds.steps = 3;
    const auto after = run_pipeline(c, PipelineStage::sample);
    CHECK(after.at("gauss/iter1/train-diffusion").wall_time == before.at("gauss/iter1/train-diffusion").wall_time);
    CHECK(after.at("gauss/iter1/sample").inputs_hash != before.at("gauss/iter1/sample").inputs_hash);
    CHECK(after.at("gauss/iter1/sample").outputs_hash != before.at("gauss/iter1/sample").outputs_hash);
  }

  TEST_CASE("stopping early runs only the prefix of the pipeline") {
    const auto dir = test_support::scratch_dir("pipeline_prefix");
    const auto ledger = run_pipeline(tiny_config(dir), PipelineStage::train_bsn);
    CHECK(ledger.records.size() == 5);
    CHECK(ledger.find("gauss/train-bsn") != nullptr);
    CHECK(ledger.find("gauss/iter1/train-diffusion") == nullptr);
    CHECK(fs::exists(dir / "gauss/iter0/cond/p00000.ddn"));
    CHECK_THROWS_AS(make_report(tiny_config(dir), ledger, dir), StageError);
  }

  TEST_CASE("too few patches for the splits fail in the data stage") {
    const auto dir = test_support::scratch_dir("pipeline_short");
    auto c = tiny_config(dir);
    c.dataset.count = 8;
    try {
      run_pipeline(c);
      FAIL("expected a stage error");
    } catch (const StageError& e) {
      CHECK(e.stage() == "data");
    }
  }

  TEST_CASE("bold marks a method only when it beats every other one") {
    std::vector<double> base;
    for (int i = 0; i < 12; ++i) base.push_back(20.0 + 0.37 * i);
    const auto low = shifted(base, 0.0);
    const auto high = shifted(base, 1.0, 0.01);
    const auto higher = shifted(base, 2.0, 0.013);
    const auto near_high = shifted(base, 1.0, 0.011);

    CHECK(bold_best({low, high}) == std::vector<bool>{false, true});
    CHECK(bold_best({higher, low, high}) == std::vector<bool>{true, false, false});
    // Two leaders that are not separable from each other are bolded together.
    auto tied_a = shifted(base, 1.0), tied_b = shifted(base, 1.0);
    for (std::size_t i = 0; i < base.size(); ++i) (i % 2 ? tied_a : tied_b)[i] += 0.05 * (1 + i % 3);
    CHECK(bold_best({tied_a, low, tied_b}) == std::vector<bool>{true, false, true});
    // Nothing separates identical columns.
    CHECK(bold_best({low, low}) == std::vector<bool>{false, false});
    CHECK(bold_best({high}) == std::vector<bool>{false});
    // The bolded set is always a prefix of the mean ranking.
    const auto flags = bold_best({near_high, higher, low, high});
    CHECK(flags[1]);
    CHECK_FALSE(flags[2]);
  }
}
