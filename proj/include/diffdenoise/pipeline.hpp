#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffdenoise/config.hpp"
#include "diffdenoise/metrics.hpp"

namespace diffdenoise {

/// Pipeline stages in execution order; a run stops after the selected one.
enum class PipelineStage { data, synth, train_bsn, train_diffusion, sample, distill, iterate, eval, report };
std::string to_string(PipelineStage stage);
PipelineStage parse_stage(const std::string& name);

struct StageRecord {
  std::string name;   ///< unique key, e.g. "gauss/iter1/sample"
  std::string stage;  ///< stage kind, e.g. "sample"
  std::string inputs_hash;
  std::map<std::string, std::string> outputs;  ///< path relative to the run directory -> sha256
  std::string outputs_hash;
  double wall_time = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
};

/// Ordered stage records of one output directory, stored as ledger.json.
class RunLedger {
 public:
  std::string config_hash;
  std::vector<StageRecord> records;

  const StageRecord* find(const std::string& name) const;
  const StageRecord& at(const std::string& name) const;
  /// Replaces the record with the same name in place, or appends.
  void upsert(StageRecord record);

  nlohmann::json to_json() const;
  static RunLedger from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static RunLedger load(const std::filesystem::path& path);

  /// Hash over names, input hashes and output hashes; ignores wall time.
  std::string content_hash() const;
};

inline constexpr const char* kLedgerFile = "ledger.json";

/// Runs every stage up to `stop_after`, reusing stages whose inputs hash is
/// already in the ledger. A reused stage whose files no longer match their
/// recorded hashes raises StageError naming the stage.
RunLedger run_pipeline(const ExperimentConfig& config, PipelineStage stop_after = PipelineStage::report);

/// Smallest top-by-mean group whose every member beats every other method at
/// p < 0.05 (paired test). `scores` holds one per-image vector per method;
/// returns one flag per method.
std::vector<bool> bold_best(const std::vector<std::vector<double>>& scores, double alpha = 0.05);

/// Renders report/report.md and the per-regime CSVs from the eval outputs
/// under `run_dir`. Returns relative path -> file content. Throws StageError
/// when a required eval record is missing from the ledger.
std::map<std::string, std::string> make_report(const ExperimentConfig& config, const RunLedger& ledger,
                                               const std::filesystem::path& run_dir);

}  // namespace diffdenoise
