#include "regcast/run_config.hpp"

#include <fstream>

#include "regcast/error.hpp"
#include "regcast/serialization.hpp"

namespace regcast {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(PathsConfig, dataset, checkpoints, outputs)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataConfig, grid, inventory, layout, hours, chunk_hours, crop_lat, hires_refine,
                                   raw_factor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ForecasterRunConfig, model, steps, finetune_steps, lr, weight_decay, batch_size,
                                   checkpoint_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CodecRunConfig, widths, state_latent, precip_latent, hires_latent, steps, lr,
                                   batch_size, disc_start, lambda, gamma, disc_width, checkpoint_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DiffusionRunConfig, patch, width, depth, heads, mlp_ratio, T, sample_steps, steps,
                                   lr, batch_size, checkpoint_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DiagnoseConfig, members)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvaluateConfig, acc_mode, thresholds, variables, normalize_weights)

namespace {

json architecture_only(const ForecasterConfig& c) {
  json j = c;
  j.erase("grid");
  j.erase("inventory");
  j.erase("lead_hours");
  return j;
}

void check_keys(const json& j, const json& ref, const std::string& prefix) {
  if (!j.is_object() || !ref.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (!ref.contains(key)) throw InvalidArgument("unknown config key '" + path + "'");
    check_keys(value, ref.at(key), path);
  }
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

}  // namespace

RunConfig RunConfig::defaults(const std::string& profile) {
  RunConfig c;
  c.profile = profile;
  if (profile == "toy") {
    c.data.grid = GridSpec::toy(24, 32);
    c.data.inventory = VariableInventory::toy();
    c.forecaster.model = architecture_only(ForecasterConfig::toy(c.data.grid, c.data.inventory));
  } else if (profile == "full") {
    c.data.grid = GridSpec::full_scale();
    c.data.inventory = VariableInventory::full_scale();
    c.data.layout = "contiguous";
    c.data.hours = 24 * 30;
    c.data.crop_lat = 15.0;
    c.data.hires_refine = 5;
    c.data.raw_factor = 1;
    c.forecaster.model = architecture_only(ForecasterConfig::full_scale());
    c.forecaster.steps = 200000;
    c.forecaster.finetune_steps = 20000;
    c.forecaster.batch_size = 1;
    c.forecaster.checkpoint_every = 1000;
    const auto st = CodecSpec::full_scale(CodecId::kState);
    c.codec.widths = st.widths;
    c.codec.state_latent = st.latent;
    c.codec.precip_latent = CodecSpec::full_scale(CodecId::kPrecip).latent;
    c.codec.hires_latent = CodecSpec::full_scale(CodecId::kHiresPrecip).latent;
    c.codec.steps = 100000;
    c.codec.lr = 3e-4;
    c.codec.batch_size = 1;
    c.codec.disc_start = 50000;
    c.codec.disc_width = 64;
    c.codec.checkpoint_every = 1000;
    const DiTConfig d;
    c.dit.width = d.width;
    c.dit.depth = d.depth;
    c.dit.heads = d.heads;
    c.dit.steps = 400000;
    c.dit.batch_size = 8;
    c.dit.checkpoint_every = 1000;
  } else {
    throw InvalidArgument("unknown profile '" + profile + "' (expected toy or full)");
  }
  return c;
}

ForecasterConfig RunConfig::forecaster_config(int lead_hours) const {
  auto c = ForecasterConfig::toy(data.grid, data.inventory);
  json j = forecaster.model;
  j["grid"] = data.grid;
  j["inventory"] = data.inventory;
  j["lead_hours"] = lead_hours;
  from_json(j, c);
  return c;
}

CodecSpec RunConfig::codec_spec(CodecId id, std::array<int, 3> input) const {
  CodecSpec s;
  s.id = id;
  s.input = input;
  s.widths = codec.widths;
  switch (id) {
    case CodecId::kState: s.latent = codec.state_latent; break;
    case CodecId::kPrecip: s.latent = codec.precip_latent; break;
    case CodecId::kHiresPrecip: s.latent = codec.hires_latent; break;
  }
  return s;
}

DiTConfig RunConfig::dit_config() const {
  DiTConfig d;
  d.latent_channels = codec.hires_latent[0];
  d.cond_channels = {codec.state_latent[0], codec.precip_latent[0], codec.hires_latent[0]};
  d.latent_h = codec.hires_latent[1];
  d.latent_w = codec.hires_latent[2];
  d.patch = dit.patch;
  d.width = dit.width;
  d.depth = dit.depth;
  d.heads = dit.heads;
  d.mlp_ratio = dit.mlp_ratio;
  return d;
}

AccMode RunConfig::acc_mode() const {
  if (evaluate.acc_mode == "anomaly") return AccMode::kAnomaly;
  if (evaluate.acc_mode == "field-mean") return AccMode::kFieldMean;
  throw InvalidArgument("evaluate.acc_mode must be anomaly or field-mean, got '" + evaluate.acc_mode + "'");
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("config: " + what);
  };
  require(profile == "toy" || profile == "full", "profile must be toy or full");
  require(data.layout == "calendar" || data.layout == "contiguous", "data.layout must be calendar or contiguous");
  require(data.hours >= 1, "data.hours must be >= 1");
  require(data.chunk_hours >= 1, "data.chunk_hours must be >= 1");
  require(data.hires_refine >= 1 && data.raw_factor >= 1, "data refinement factors must be >= 1");
  data.grid.validate();
  data.inventory.validate();
  require(data.crop_lat >= data.grid.lat_start && data.crop_lat <= data.grid.latitude(data.grid.n_lat - 1),
          "data.crop_lat lies outside the grid");
  forecaster_config(1).validate();
  require(forecaster.steps >= 0 && forecaster.finetune_steps >= 0, "forecaster steps must be >= 0");
  require(forecaster.lr > 0 && forecaster.weight_decay >= 0, "forecaster optimizer settings out of range");
  require(forecaster.batch_size >= 1 && forecaster.checkpoint_every >= 1, "forecaster batch/checkpoint must be >= 1");
  require(!codec.widths.empty(), "codec.widths must not be empty");
  require(codec.state_latent[1] == codec.hires_latent[1] && codec.state_latent[2] == codec.hires_latent[2] &&
              codec.precip_latent[1] == codec.hires_latent[1] && codec.precip_latent[2] == codec.hires_latent[2],
          "all codec latents must share one latent grid");
  require(codec.steps >= 0 && codec.lr > 0 && codec.batch_size >= 1 && codec.checkpoint_every >= 1,
          "codec training settings out of range");
  GenLossWeights{codec.lambda, codec.gamma, codec.disc_start}.validate();
  dit_config().validate();
  require(dit.T >= 2, "dit.T must be >= 2");
  require(dit.sample_steps >= 1 && dit.sample_steps <= dit.T, "dit.sample_steps must be in [1, T]");
  require(dit.steps >= 0 && dit.lr > 0 && dit.batch_size >= 1 && dit.checkpoint_every >= 1,
          "dit training settings out of range");
  require(diagnose.members >= 1, "diagnose.members must be >= 1");
  acc_mode();
  for (double t : evaluate.thresholds) require(t >= 0, "evaluate.thresholds must be >= 0");
  for (const auto& v : evaluate.variables) data.inventory.channel_index(v);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"profile", c.profile}, {"seed", c.seed},         {"paths", c.paths},
           {"data", c.data},       {"forecaster", c.forecaster}, {"codec", c.codec},
           {"dit", c.dit},         {"diagnose", c.diagnose}, {"evaluate", c.evaluate}};
}

void from_json(const json& j, RunConfig& c) {
  const json ref = RunConfig::defaults(j.value("profile", std::string("toy")));
  check_keys(j, ref, "");
  json merged = ref;
  merged.merge_patch(j);
  try {
    merged.at("profile").get_to(c.profile);
    merged.at("seed").get_to(c.seed);
    merged.at("paths").get_to(c.paths);
    merged.at("data").get_to(c.data);
    merged.at("forecaster").get_to(c.forecaster);
    merged.at("codec").get_to(c.codec);
    merged.at("dit").get_to(c.dit);
    merged.at("diagnose").get_to(c.diagnose);
    merged.at("evaluate").get_to(c.evaluate);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
}

RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides) {
  json layer = json::object();
  if (file) {
    std::ifstream is(*file);
    if (!is) throw NotFoundError("config file " + file->string() + " not found");
    try {
      layer = json::parse(is);
    } catch (const json::parse_error& e) {
      throw InvalidArgument("config file " + file->string() + ": " + e.what());
    }
    if (!layer.is_object()) throw InvalidArgument("config file " + file->string() + " must hold a JSON object");
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("override '" + o + "' is not key=value");
    json* node = &layer;
    std::string key = o.substr(0, eq);
    for (std::size_t dot; (dot = key.find('.')) != std::string::npos;) {
      auto head = key.substr(0, dot);
      if (!node->contains(head) || !(*node)[head].is_object()) (*node)[head] = json::object();
      node = &(*node)[head];
      key = key.substr(dot + 1);
    }
    (*node)[key] = parse_override_value(o.substr(eq + 1));
  }
  RunConfig c = layer.get<RunConfig>();
  c.validate();
  return c;
}

}  // namespace regcast
