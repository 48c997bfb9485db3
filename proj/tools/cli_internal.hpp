#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "regcast/archive.hpp"
#include "regcast/run_config.hpp"
#include "log.hpp"

namespace regcast::cli {

namespace fs = std::filesystem;

/// One parsed command: its resolved configuration and the shared flags.
struct Invocation {
  std::string command;
  fs::path workdir = ".";
  RunConfig cfg;
  std::optional<fs::path> out;
  bool force = false;
  bool resume = false;
  json arguments = json::object();

  fs::path dataset_dir() const { return workdir / cfg.paths.dataset; }
  fs::path checkpoints_dir() const { return workdir / cfg.paths.checkpoints; }
  fs::path outputs_dir() const { return workdir / cfg.paths.outputs; }
  fs::path run_dir(const fs::path& fallback) const { return out ? *out : fallback; }
};

inline constexpr const char* kInProgressMarker = ".in_progress";
inline constexpr const char* kResolvedConfigFile = "resolved_config.json";
inline constexpr const char* kSeedManifestFile = "seeds.json";

/// Per-run output directory. Construction writes the in-progress marker, the
/// resolved config and the seed manifest and starts mirroring the log into
/// run.log; complete() removes the marker. A directory left with a marker by
/// an interrupted run is reused only with --resume or --force.
class RunDir {
 public:
  RunDir(fs::path dir, const Invocation& inv, const json& seeds);
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const fs::path& path() const { return dir_; }
  fs::path operator/(const std::string& name) const { return dir_ / name; }
  void complete();

 private:
  fs::path dir_;
  bool sink_attached_ = false;
};

/// True when `dir` holds a finished run (resolved config present, no marker).
bool is_complete_run(const fs::path& dir);

/// Removes a previous run directory for --force. Refuses directories that do
/// not look like run directories so a mistyped --out cannot wipe user data.
void clear_run_dir(const fs::path& dir);

/// Delimited-text loss curve. When resuming at `resume_step`, rows past that
/// step are dropped before appending.
class LossLog {
 public:
  LossLog(const fs::path& path, const std::vector<std::string>& columns, std::optional<std::int64_t> resume_step);
  void append(std::int64_t step, const std::vector<double>& values);

 private:
  std::ofstream os_;
};

struct PrepareArgs {
  std::optional<std::string> source;
  bool synthetic = false;
};
struct FinetuneArgs {
  int lead = 0;
  std::optional<std::string> base;
};
struct VaeArgs {
  std::string codec;
};
struct ForecastArgs {
  std::string init;
  int lead = 0;
  bool no_boundary = false;
};
struct DiagnoseArgs {
  std::string time;
  std::optional<std::string> forecast;
};
struct EvaluateArgs {
  std::vector<std::string> forecasts;
  std::vector<std::string> precip;
  bool truth_replay = false;
};
struct PlotArgs {
  std::optional<std::string> metrics;
  std::vector<std::string> variables;
  std::optional<std::string> forecast;
  std::vector<int> leads;
};

void cmd_prepare_data(const Invocation& inv, const PrepareArgs& args);
void cmd_train_forecaster(const Invocation& inv);
void cmd_finetune_leadtime(const Invocation& inv, const FinetuneArgs& args);
void cmd_train_vae(const Invocation& inv, const VaeArgs& args);
void cmd_train_dit(const Invocation& inv);
void cmd_forecast(const Invocation& inv, const ForecastArgs& args);
void cmd_diagnose_precip(const Invocation& inv, const DiagnoseArgs& args);
void cmd_evaluate(const Invocation& inv, const EvaluateArgs& args);
void cmd_plot(const Invocation& inv, const PlotArgs& args);

}  // namespace regcast::cli
