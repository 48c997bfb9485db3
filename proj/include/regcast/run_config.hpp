#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regcast/archive.hpp"
#include "regcast/codec.hpp"
#include "regcast/diffusion.hpp"
#include "regcast/forecaster.hpp"
#include "regcast/grid.hpp"
#include "regcast/metrics.hpp"

namespace regcast {

/// Run directories relative to the working directory.
struct PathsConfig {
  std::string dataset = "data";
  std::string checkpoints = "checkpoints";
  std::string outputs = "outputs";
};

struct DataConfig {
  GridSpec grid;
  VariableInventory inventory;
  /// "calendar": `hours` on the 15th of each month of the training year plus
  /// one run in each of the validation and test years; "contiguous": `hours`
  /// hours from 2019-07-01T00.
  std::string layout = "calendar";
  int hours = 48;
  int chunk_hours = 24;
  /// Southern edge of the precipitation-diagnosis domain.
  double crop_lat = 28.0;
  int hires_refine = 2;
  int raw_factor = 5;
};

struct ForecasterRunConfig {
  /// Architecture keys of ForecasterConfig; grid, inventory and lead come
  /// from elsewhere.
  json model = json::object();
  std::int64_t steps = 300;
  std::int64_t finetune_steps = 100;
  double lr = 3e-4;
  double weight_decay = 3e-6;
  int batch_size = 4;
  std::int64_t checkpoint_every = 100;
};

struct CodecRunConfig {
  std::vector<int> widths{16, 32};
  std::array<int, 3> state_latent{8, 4, 8};
  std::array<int, 3> precip_latent{4, 4, 8};
  std::array<int, 3> hires_latent{4, 4, 8};
  std::int64_t steps = 200;
  double lr = 1e-3;
  int batch_size = 4;
  std::int64_t disc_start = 100;
  double lambda = 0.1;
  double gamma = 1e-6;
  int disc_width = 16;
  std::int64_t checkpoint_every = 100;
};

struct DiffusionRunConfig {
  int patch = 2;
  int width = 64;
  int depth = 2;
  int heads = 4;
  double mlp_ratio = 4.0;
  int T = 1000;
  int sample_steps = 250;
  std::int64_t steps = 400;
  double lr = 3e-4;
  int batch_size = 16;
  std::int64_t checkpoint_every = 200;
};

struct DiagnoseConfig {
  int members = 3;
};

struct EvaluateConfig {
  std::string acc_mode = "anomaly";  // anomaly | field-mean
  std::vector<double> thresholds = kDefaultPrecipThresholds;
  std::vector<std::string> variables;  // empty: surface + 500 hPa channels
  bool normalize_weights = false;
};

/// Everything a command needs besides its own flags. Resolution order:
/// profile defaults, then the config file, then `--set key=value` overrides
/// and dedicated flags.
struct RunConfig {
  std::string profile = "toy";  // toy | full
  std::uint64_t seed = 0;
  PathsConfig paths;
  DataConfig data;
  ForecasterRunConfig forecaster;
  CodecRunConfig codec;
  DiffusionRunConfig dit;
  DiagnoseConfig diagnose;
  EvaluateConfig evaluate;

  static RunConfig defaults(const std::string& profile);

  /// Forecaster architecture on the data grid for lead `lead_hours`.
  ForecasterConfig forecaster_config(int lead_hours = 1) const;
  /// Codec spec for inputs of shape `input`.
  CodecSpec codec_spec(CodecId id, std::array<int, 3> input) const;
  DiTConfig dit_config() const;
  AccMode acc_mode() const;

  /// Throws InvalidArgument describing the first inconsistent setting.
  void validate() const;
};

void to_json(json& j, const RunConfig& c);
/// Strict: unknown keys raise InvalidArgument naming the dotted path.
void from_json(const json& j, RunConfig& c);

/// Applies defaults < file < overrides. Each override is "dotted.key=value";
/// the value is parsed as JSON and taken as a string when that fails. The
/// profile is the override "profile", else the file's, else "toy".
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides);

}  // namespace regcast
