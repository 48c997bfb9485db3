#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "cli_internal.hpp"
#include "regcast/codec.hpp"
#include "regcast/dataset.hpp"
#include "regcast/diffusion.hpp"
#include "regcast/error.hpp"
#include "regcast/forecaster_training.hpp"
#include "regcast/metrics.hpp"
#include "regcast/nn_common.hpp"
#include "regcast/plot.hpp"
#include "regcast/rollout.hpp"
#include "regcast/serialization.hpp"
#include "regcast/synthetic.hpp"

namespace regcast::cli {

namespace {

constexpr const char* kCheckpointFile = "checkpoint.ckpt";
constexpr const char* kStatsFile = "stats.json";
constexpr const char* kClimatologyFile = "climatology.rgca";
constexpr const char* kPrecipKind = "precip-diagnosis";

std::string join(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "]";
}

/// Dataset, statistics and climatology written by prepare-data.
struct Prepared {
  fs::path dir;
  std::optional<Dataset> ds;
  NormStats stats;
  std::optional<Climatology> clim;

  const DatasetManifest& manifest() const { return ds->manifest(); }
  /// First grid row of the precipitation-diagnosis domain.
  int crop_row(const RunConfig& cfg) const {
    const auto& m = manifest();
    return m.grid.first_row_at_or_above(m.attributes.value("crop_lat", cfg.data.crop_lat));
  }
};

Prepared load_prepared(const Invocation& inv) {
  return with_stage("load-data", [&] {
    Prepared p;
    p.dir = inv.dataset_dir();
    if (!is_complete_run(p.dir)) {
      throw NotFoundError("no prepared dataset at " + p.dir.string() + " (run prepare-data first)");
    }
    p.ds.emplace(Dataset::open(p.dir / "dataset"));
    p.stats = load_norm_stats(p.dir / kStatsFile);
    if (fs::exists(p.dir / kClimatologyFile)) p.clim = load_climatology(p.dir / kClimatologyFile);
    return p;
  });
}

void require_fresh(const fs::path& artifact, const Invocation& inv) {
  if (fs::exists(artifact) && !inv.force && !inv.resume) {
    throw InvalidArgument(artifact.string() + " already exists; pass --resume to continue or --force to retrain");
  }
}

json seed_manifest(const RunConfig& cfg, json extra = json::object()) {
  json j{{"seed", cfg.seed},
         {"torch_manual_seed", cfg.seed},
         {"batch_streams", "per step: splitmix64(seed, step)"}};
  j.update(extra);
  return j;
}

// ---------------------------------------------------------------------------
// prepare-data

DatasetManifest copy_dataset(const Dataset& src, const fs::path& dst, int chunk_hours) {
  auto m = src.manifest();
  m.root = dst;
  m.chunk_hours = chunk_hours;
  m.attributes["source"] = src.manifest().root.string();
  DatasetWriter w(m);
  if (m.has_topography) w.set_topography(src.topography());
  for (auto t : src.manifest().timestamps()) {
    std::optional<torch::Tensor> p, hp;
    if (m.has_precip) p = src.load(Group::kPrecip, t);
    if (m.has_hires_precip) hp = src.load(Group::kHiresPrecip, t);
    w.append(t, src.load(Group::kState, t), p, hp);
  }
  return w.finish();
}

}  // namespace

void cmd_prepare_data(const Invocation& inv, const PrepareArgs& args) {
  if (!args.source && !args.synthetic) throw InvalidArgument("prepare-data needs --source PATH or --synthetic");
  std::optional<Dataset> source;
  if (args.source) {
    if (!fs::exists(*args.source)) throw NotFoundError("source path " + *args.source + " does not exist");
    source.emplace(with_stage("open-source", [&] { return Dataset::open(*args.source); }));
  }
  const auto dir = inv.run_dir(inv.dataset_dir());
  if (is_complete_run(dir) && !inv.force) {
    std::ifstream is(dir / kResolvedConfigFile);
    const auto previous = json::parse(is);
    const json now{{"command", inv.command}, {"arguments", inv.arguments}, {"config", inv.cfg}};
    if (previous.at("config").at("data") == now.at("config").at("data") &&
        previous.at("config").at("seed") == now.at("config").at("seed") &&
        previous.at("arguments").value("source", json()) == now.at("arguments").value("source", json())) {
      logging::info("prepare-data: ", dir.string(), " is up to date for seed ", inv.cfg.seed);
      return;
    }
    throw InvalidArgument(dir.string() + " already holds a prepared dataset with different settings; pass --force");
  }

  RunDir run(dir, inv, seed_manifest(inv.cfg, {{"synthetic", inv.cfg.seed}}));
  DatasetManifest m;
  if (source) {
    logging::info("converting ", *args.source, " (", source->manifest().n_timestamps(), " timestamps)");
    m = with_stage("convert", [&] { return copy_dataset(*source, run / "dataset", inv.cfg.data.chunk_hours); });
  } else {
    SyntheticOptions opt;
    opt.grid = inv.cfg.data.grid;
    opt.inventory = inv.cfg.data.inventory;
    opt.seed = inv.cfg.seed;
    opt.chunk_hours = inv.cfg.data.chunk_hours;
    opt.crop_lat = inv.cfg.data.crop_lat;
    opt.hires_refine = inv.cfg.data.hires_refine;
    opt.raw_factor = inv.cfg.data.raw_factor;
    opt.runs = inv.cfg.data.layout == "calendar"
                   ? calendar_runs(inv.cfg.data.hours)
                   : synthetic_contiguous(opt.grid, opt.inventory, inv.cfg.data.hours, opt.seed).runs;
    logging::info("generating synthetic data: layout ", inv.cfg.data.layout, ", ", opt.runs.size(), " runs, seed ", opt.seed);
    m = with_stage("generate", [&] { return generate_synthetic(run / "dataset", opt); });
  }
  m.validate();
  auto ds = Dataset::open(run / "dataset");
  auto stats = with_stage("statistics", [&] { return compute_stats(ds); });
  save_norm_stats(stats, run / kStatsFile);

  std::set<int> years;
  for (auto t : m.timestamps(Split::kTrain)) years.insert(t.year());
  try {
    auto clim = build_climatology(ds, *years.begin(), *years.rbegin());
    save_climatology(clim, run / kClimatologyFile);
    logging::info("climatology over ", *years.begin(), "-", *years.rbegin(), " written");
  } catch (const InvalidArgument& e) {
    logging::warn("no climatology (", e.what(), "); evaluate will need evaluate.acc_mode=field-mean");
  }
  logging::info("prepared ", m.n_timestamps(), " timestamps in ", m.runs.size(), " runs");
  run.complete();
}

// ---------------------------------------------------------------------------
// Forecaster training

namespace {

void train_forecaster_loop(ForecasterTrainer& tr, const PairSampler& data, std::int64_t total, RunDir& run,
                           bool resumed, std::int64_t every) {
  LossLog losses(run / "loss.csv", {"loss"}, resumed ? std::optional<std::int64_t>(tr.step()) : std::nullopt);
  logging::info("training lead ", data.lead_hours(), " h on ", data.size(), " pairs: step ", tr.step(), " -> ", total);
  while (tr.step() < total) {
    const auto n = std::min(every, total - tr.step());
    const auto first = tr.step();
    auto values = tr.fit(data, n);
    for (std::size_t i = 0; i < values.size(); ++i) losses.append(first + std::int64_t(i) + 1, {values[i]});
    tr.save(run / kCheckpointFile);
    logging::info("step ", tr.step(), " loss ", values.back());
  }
  if (!fs::exists(run / kCheckpointFile)) tr.save(run / kCheckpointFile);
}

ForecasterTrainOptions forecaster_options(const RunConfig& cfg) {
  return {cfg.forecaster.lr, cfg.forecaster.weight_decay, cfg.forecaster.batch_size, cfg.seed};
}

}  // namespace

void cmd_train_forecaster(const Invocation& inv) {
  auto data = load_prepared(inv);
  const auto cfg = inv.cfg.forecaster_config(1);
  const auto dir = inv.run_dir(inv.checkpoints_dir() / "forecaster_1h");
  require_fresh(dir / kCheckpointFile, inv);
  PairSampler pairs(*data.ds, data.stats, Split::kTrain, 1, cfg.boundary_width);
  RunDir run(dir, inv, seed_manifest(inv.cfg));
  const bool resumed = inv.resume && fs::exists(run / kCheckpointFile);
  torch::manual_seed(inv.cfg.seed);
  auto tr = resumed ? ForecasterTrainer::resume(run / kCheckpointFile, forecaster_options(inv.cfg))
                    : ForecasterTrainer(Forecaster(cfg), forecaster_options(inv.cfg));
  if (resumed && tr.model()->cfg.fingerprint() != cfg.fingerprint()) {
    throw InvalidArgument("checkpoint architecture differs from the configured forecaster");
  }
  train_forecaster_loop(tr, pairs, inv.cfg.forecaster.steps, run, resumed, inv.cfg.forecaster.checkpoint_every);
  run.complete();
}

void cmd_finetune_leadtime(const Invocation& inv, const FinetuneArgs& args) {
  if (args.lead != 3 && args.lead != 6 && args.lead != 24) {
    throw InvalidArgument("--lead must be 3, 6 or 24 (got " + std::to_string(args.lead) + ")");
  }
  auto data = load_prepared(inv);
  const fs::path base_path =
      args.base ? fs::path(*args.base) : inv.checkpoints_dir() / "forecaster_1h" / kCheckpointFile;
  const auto dir = inv.run_dir(inv.checkpoints_dir() / ("forecaster_" + std::to_string(args.lead) + "h"));
  require_fresh(dir / kCheckpointFile, inv);
  auto base = with_stage("load-base", [&] { return load_forecaster(base_path); });
  if (base->cfg.lead_hours != 1) throw InvalidArgument(base_path.string() + " is not a 1 h model");
  PairSampler pairs(*data.ds, data.stats, Split::kTrain, args.lead, base->cfg.boundary_width);
  RunDir run(dir, inv, seed_manifest(inv.cfg, {{"base", base_path.string()}}));
  const bool resumed = inv.resume && fs::exists(run / kCheckpointFile);
  std::optional<ForecasterTrainer> tr;
  if (resumed) {
    tr.emplace(ForecasterTrainer::resume(run / kCheckpointFile, forecaster_options(inv.cfg)));
  } else {
    auto cfg = base->cfg;
    cfg.lead_hours = args.lead;
    Forecaster model(cfg);
    copy_state(*base, *model);
    tr.emplace(model, forecaster_options(inv.cfg));
  }
  train_forecaster_loop(*tr, pairs, inv.cfg.forecaster.finetune_steps, run, resumed,
                        inv.cfg.forecaster.checkpoint_every);
  run.complete();
}

// ---------------------------------------------------------------------------
// Codec training

namespace {

/// Normalized codec inputs [B, C, H, W] drawn from the training split.
class CodecSampler {
 public:
  CodecSampler(const Prepared& data, CodecId id, int crop_row) : data_(data), id_(id), crop_(crop_row) {
    const auto& m = data.manifest();
    if (id != CodecId::kState && !(m.has_precip && m.has_hires_precip)) {
      throw InvalidArgument("the prepared dataset has no precipitation groups");
    }
    times_ = m.timestamps(Split::kTrain);
    if (times_.empty()) throw InvalidArgument("the prepared dataset has no training timestamps");
    sel_ = data.stats.select(m.inventory.channel_names());
  }

  torch::Tensor example(Timestamp t) const {
    const auto& ds = *data_.ds;
    switch (id_) {
      case CodecId::kState: return crop_rows(normalize_channels(ds.load(Group::kState, t), sel_, 0), crop_);
      case CodecId::kPrecip:
        return crop_rows((precip_to_dbz(ds.load(Group::kPrecip, t)) - data_.stats.mean_of("tp_dbz")) /
                             data_.stats.std_of("tp_dbz"),
                         crop_);
      case CodecId::kHiresPrecip:
        return (precip_to_dbz(ds.load(Group::kHiresPrecip, t)) - data_.stats.mean_of("hires_dbz")) /
               data_.stats.std_of("hires_dbz");
    }
    return {};
  }

  torch::Tensor sample(std::int64_t step, int batch, std::uint64_t seed) const {
    std::mt19937_64 rng(step_seed(seed, step));
    std::uniform_int_distribution<std::size_t> pick(0, times_.size() - 1);
    std::vector<torch::Tensor> xs;
    for (int i = 0; i < batch; ++i) xs.push_back(example(times_[pick(rng)]));
    return torch::stack(xs);
  }

  std::array<int, 3> input_shape() const {
    auto x = example(times_.front());
    return {int(x.size(0)), int(x.size(1)), int(x.size(2))};
  }

 private:
  const Prepared& data_;
  CodecId id_;
  int crop_;
  std::vector<Timestamp> times_;
  NormStats sel_;
};

void train_one_codec(const Invocation& inv, const Prepared& data, CodecId id) {
  const auto dir = inv.run_dir(inv.checkpoints_dir() / ("codec_" + to_string(id)));
  require_fresh(dir / kCheckpointFile, inv);
  CodecSampler sampler(data, id, data.crop_row(inv.cfg));
  const auto spec = inv.cfg.codec_spec(id, sampler.input_shape());
  spec.validate();
  RunDir run(dir, inv, seed_manifest(inv.cfg));
  VaeTrainOptions opt;
  opt.lr = opt.disc_lr = inv.cfg.codec.lr;
  opt.batch_size = inv.cfg.codec.batch_size;
  opt.seed = inv.cfg.seed;
  opt.disc_width = inv.cfg.codec.disc_width;
  opt.weights = {inv.cfg.codec.lambda, inv.cfg.codec.gamma, inv.cfg.codec.disc_start};
  const bool resumed = inv.resume && fs::exists(run / kCheckpointFile);
  torch::manual_seed(inv.cfg.seed);
  auto tr = resumed ? VaeTrainer::resume(run / kCheckpointFile, opt) : VaeTrainer(Codec(spec), opt);
  if (tr.codec()->spec.fingerprint() != spec.fingerprint()) {
    throw InvalidArgument("checkpoint codec spec differs from the configured one");
  }
  LossLog losses(run / "loss.csv", {"total", "mae", "lpips", "kl", "adv", "psi", "disc"},
                 resumed ? std::optional<std::int64_t>(tr.step()) : std::nullopt);
  const auto total = inv.cfg.codec.steps;
  logging::info("training ", to_string(id), " codec ", spec.input[0], "x", spec.input[1], "x", spec.input[2], " -> ", spec.latent[0], "x", spec.latent[1], "x", spec.latent[2], ": step ", tr.step(), " -> ", total);
  while (tr.step() < total) {
    const auto step = tr.step();
    auto x = sampler.sample(step, opt.batch_size, opt.seed);
    auto t = tr.train_step(x);
    losses.append(step + 1, {t.total.item<double>(), t.mae.item<double>(), t.lpips.item<double>(),
                             t.kl.item<double>(), t.adv.item<double>(), t.psi, t.disc});
    if (tr.step() % inv.cfg.codec.checkpoint_every == 0 || tr.step() == total) {
      tr.save(run / kCheckpointFile);
      logging::info("step ", tr.step(), " total ", t.total.item<double>(), " mae ", t.mae.item<double>());
    }
  }
  if (!fs::exists(run / kCheckpointFile)) tr.save(run / kCheckpointFile);
  run.complete();
}

}  // namespace

void cmd_train_vae(const Invocation& inv, const VaeArgs& args) {
  std::vector<CodecId> ids;
  if (args.codec == "all") {
    if (inv.out) throw InvalidArgument("--codec all writes three run directories; drop --out");
    ids = {CodecId::kState, CodecId::kPrecip, CodecId::kHiresPrecip};
  } else {
    ids = {codec_id_from_string(args.codec)};
  }
  auto data = load_prepared(inv);
  for (auto id : ids) train_one_codec(inv, data, id);
}

// ---------------------------------------------------------------------------
// Denoiser training and diagnosis

namespace {

Diagnoser load_diagnoser_parts(const Invocation& inv, const Prepared& data) {
  Diagnoser d;
  with_stage("load-codecs", [&] {
    auto path = [&](CodecId id) { return inv.checkpoints_dir() / ("codec_" + to_string(id)) / kCheckpointFile; };
    for (auto id : {CodecId::kState, CodecId::kPrecip, CodecId::kHiresPrecip}) {
      if (!fs::exists(path(id))) {
        throw NotFoundError("codec checkpoint " + path(id).string() + " is missing (run train-vae --codec " +
                            to_string(id) + ")");
      }
    }
    d.state_codec = load_codec(path(CodecId::kState));
    d.precip_codec = load_codec(path(CodecId::kPrecip));
    d.hires_codec = load_codec(path(CodecId::kHiresPrecip));
  });
  d.state_stats = data.stats.select(data.manifest().inventory.channel_names());
  d.tp_dbz_mean = data.stats.mean_of("tp_dbz");
  d.tp_dbz_std = data.stats.std_of("tp_dbz");
  d.hires_dbz_mean = data.stats.mean_of("hires_dbz");
  d.hires_dbz_std = data.stats.std_of("hires_dbz");
  return d;
}

struct DiagnosisInputs {
  torch::Tensor state, precip, hires_prev;  // batched, physical units, cropped
};

DiagnosisInputs diagnosis_inputs(const Prepared& data, const RunConfig& cfg, const torch::Tensor& state,
                                 Timestamp t) {
  const int row = data.crop_row(cfg);
  const auto& ds = *data.ds;
  if (!data.manifest().contains(t - 1)) {
    throw MissingTimestampError("previous-hour precipitation at " + (t - 1).iso() + " is not in the dataset");
  }
  return {crop_rows(state, row).unsqueeze(0), crop_rows(ds.load(Group::kPrecip, t)[0], row).unsqueeze(0),
          ds.load(Group::kHiresPrecip, t - 1)[0].unsqueeze(0)};
}

double rms_scale(const torch::Tensor& z) {
  const double s = z.to(torch::kDouble).std(false).item<double>();
  if (!(s > 0)) throw NumericalError("latent has zero spread; cannot derive a scale");
  return 1.0 / s;
}

}  // namespace

void cmd_train_dit(const Invocation& inv) {
  auto data = load_prepared(inv);
  const auto dir = inv.run_dir(inv.checkpoints_dir() / "dit");
  require_fresh(dir / kCheckpointFile, inv);
  auto d = load_diagnoser_parts(inv, data);
  const auto cfg = inv.cfg.dit_config();

  // Encode every training hour whose previous hour is stored; codecs stay frozen.
  std::vector<Timestamp> times;
  for (auto t : data.manifest().timestamps(Split::kTrain)) {
    if (data.manifest().contains(t - 1)) times.push_back(t);
  }
  if (times.empty()) throw InvalidArgument("no training hour has a stored previous hour");
  d.scales = {1.0, 1.0, 1.0};
  std::vector<torch::Tensor> conds, targets;
  with_stage("encode", [&] {
    for (auto t : times) {
      auto in = diagnosis_inputs(data, inv.cfg, data.ds->load(Group::kState, t), t);
      conds.push_back(d.condition(in.state, in.precip, in.hires_prev));
      targets.push_back(d.target(data.ds->load(Group::kHiresPrecip, t)[0].unsqueeze(0)));
    }
  });
  auto cond = torch::cat(conds), z0 = torch::cat(targets);
  const int cs = d.state_codec->spec.latent[0], cp = d.precip_codec->spec.latent[0];
  LatentScales scales{rms_scale(cond.narrow(1, 0, cs)), rms_scale(cond.narrow(1, cs, cp)), rms_scale(z0)};
  cond = torch::cat({cond.narrow(1, 0, cs) * scales.state, cond.narrow(1, cs, cp) * scales.precip,
                     cond.narrow(1, cs + cp, cond.size(1) - cs - cp) * scales.hires},
                    1);
  z0 = z0 * scales.hires;
  logging::info("encoded ", times.size(), " training hours; latent scales state ", scales.state, " precip ", scales.precip, " hires ", scales.hires);

  RunDir run(dir, inv, seed_manifest(inv.cfg));
  DiffusionTrainOptions opt{inv.cfg.dit.lr, 0.0, inv.cfg.dit.batch_size, inv.cfg.seed};
  const bool resumed = inv.resume && fs::exists(run / kCheckpointFile);
  torch::manual_seed(inv.cfg.seed);
  std::optional<DiffusionTrainer> tr;
  if (resumed) {
    auto r = DiffusionTrainer::resume(run / kCheckpointFile, opt);
    tr.emplace(std::move(r.trainer));
  } else {
    tr.emplace(DiT(cfg), NoiseSchedule::linear(inv.cfg.dit.T), opt);
  }
  if (tr->model()->cfg.fingerprint() != cfg.fingerprint()) {
    throw InvalidArgument("checkpoint denoiser architecture differs from the configured one");
  }
  d.dit = tr->model();
  with_stage("validate", [&] { d.validate(); });
  LossLog losses(run / "loss.csv", {"total", "mse", "vb"},
                 resumed ? std::optional<std::int64_t>(tr->step()) : std::nullopt);
  const auto total = inv.cfg.dit.steps;
  logging::info("training denoiser (", cfg.tokens(), " tokens, width ", cfg.width, ", depth ", cfg.depth, "): step ", tr->step(), " -> ", total);
  while (tr->step() < total) {
    const auto step = tr->step();
    std::mt19937_64 rng(step_seed(opt.seed ^ 0xd17ull, step));
    std::uniform_int_distribution<std::int64_t> pick(0, cond.size(0) - 1);
    std::vector<std::int64_t> idx(opt.batch_size);
    for (auto& i : idx) i = pick(rng);
    auto index = torch::tensor(idx, torch::kLong);
    auto l = with_stage("train", [&] { return tr->train_step(cond.index_select(0, index), z0.index_select(0, index)); });
    losses.append(step + 1, {l.total.item<double>(), l.mse.item<double>(), l.vb.mean().item<double>()});
    if (tr->step() % inv.cfg.dit.checkpoint_every == 0 || tr->step() == total) {
      tr->save(run / kCheckpointFile, scales);
      logging::info("step ", tr->step(), " loss ", l.total.item<double>());
    }
  }
  if (!fs::exists(run / kCheckpointFile)) tr->save(run / kCheckpointFile, scales);
  run.complete();
}

void cmd_diagnose_precip(const Invocation& inv, const DiagnoseArgs& args) {
  const auto t = Timestamp::parse(args.time);
  auto data = load_prepared(inv);
  const auto& m = data.manifest();
  if (!m.has_precip || !m.has_hires_precip) throw InvalidArgument("the prepared dataset has no precipitation groups");
  auto d = load_diagnoser_parts(inv, data);
  const auto dit_path = inv.checkpoints_dir() / "dit" / kCheckpointFile;
  auto loaded = with_stage("load-denoiser", [&] { return load_dit(dit_path); });
  d.dit = loaded.model;
  d.scales = loaded.scales;
  d.T = loaded.T;
  with_stage("validate", [&] { d.validate(); });

  torch::Tensor state;
  int lead = 0;
  if (args.forecast) {
    auto fc = with_stage("load-forecast", [&] { return Dataset::open(*args.forecast); });
    state = with_stage("load-forecast", [&] { return fc.load(Group::kState, t); });
    lead = int(t - Timestamp::parse(fc.manifest().attributes.at("init").get<std::string>()));
  } else {
    state = with_stage("load-data", [&] { return data.ds->load(Group::kState, t); });
  }
  auto in = with_stage("load-data", [&] { return diagnosis_inputs(data, inv.cfg, state, t); });

  const int members = inv.cfg.diagnose.members;
  std::vector<std::uint64_t> member_seeds;
  for (int k = 0; k < members; ++k) member_seeds.push_back(member_seed(inv.cfg.seed, k));
  const auto dir = inv.run_dir(inv.outputs_dir() / ("precip_" + t.compact()));
  if (is_complete_run(dir) && !inv.force) throw InvalidArgument(dir.string() + " already exists; pass --force");
  RunDir run(dir, inv, seed_manifest(inv.cfg, {{"member_seeds", member_seeds}}));
  logging::info("diagnosing ", t.iso(), " with ", members, " members, ", inv.cfg.dit.sample_steps, " sampling steps, state from ", args.forecast ? *args.forecast : std::string("truth"));
  std::vector<torch::Tensor> member_fields;
  auto ens = d.diagnose(in.state, in.precip, in.hires_prev, members, inv.cfg.seed, inv.cfg.dit.sample_steps,
                        &member_fields);
  TensorArchive ar(kPrecipKind);
  ar.meta() = {{"time", t.iso()}, {"lead_hours", lead}, {"members", members}, {"seed", inv.cfg.seed},
               {"state_source", args.forecast ? *args.forecast : "truth"}, {"grid", *m.hires_grid}};
  ar.add("enmax", ens[0].contiguous());
  ar.add("members", torch::cat(member_fields).contiguous());
  ar.save(run / "precip.rgca");
  logging::info("EnMax field: max ", ens.max().item<double>(), " mm/h, wet fraction ", (ens >= 0.1).to(torch::kDouble).mean().item<double>());
  run.complete();
}

// ---------------------------------------------------------------------------
// Forecast

void cmd_forecast(const Invocation& inv, const ForecastArgs& args) {
  const auto init = Timestamp::parse(args.init);
  const auto plan = greedy_plan(args.lead);
  auto data = load_prepared(inv);
  ModelSet models;
  auto topo = (data.ds->topography() - data.stats.mean_of("topography")) / data.stats.std_of("topography");
  int width = 4;
  with_stage("load-models", [&] {
    for (int s : std::set<int>(plan.steps.begin(), plan.steps.end())) {
      const auto path = inv.checkpoints_dir() / ("forecaster_" + std::to_string(s) + "h") / kCheckpointFile;
      if (!fs::exists(path)) throw NotFoundError("no " + std::to_string(s) + " h model at " + path.string());
      auto model = load_forecaster(path);
      if (model->cfg.lead_hours != s) throw InvalidArgument(path.string() + " is not a " + std::to_string(s) + " h model");
      width = model->cfg.boundary_width;
      models[s] = std::make_shared<ForecasterStep>(model, topo);
    }
  });
  const auto sel = data.stats.select(data.manifest().inventory.channel_names());
  WeatherState x0{with_stage("load-data", [&] { return normalize_channels(data.ds->load(Group::kState, init), sel, 0); }),
                  init, true};
  BoundaryProvider provider;
  if (!args.no_boundary) provider = dataset_boundary_provider(*data.ds, data.stats, width);

  const auto dir = inv.run_dir(inv.outputs_dir() / ("forecast_" + init.compact() + "_" + std::to_string(args.lead) + "h"));
  if (is_complete_run(dir) && !inv.force) throw InvalidArgument(dir.string() + " already exists; pass --force");
  RunDir run(dir, inv, seed_manifest(inv.cfg));
  logging::info("forecast ", init.iso(), " + ", args.lead, " h: plan ", join(plan.steps));
  torch::NoGradGuard guard;
  auto result = with_stage("rollout", [&] { return rollout(models, x0, provider, args.lead); });
  for (std::size_t i = 0; i < result.leads.size(); ++i) {
    logging::info("step ", i + 1, " (", plan.steps[i], " h model) -> ", result.states[i].time.iso(), " (+", result.leads[i], " h)");
  }
  write_forecast(run / "forecast", result, data.stats, data.manifest().grid, data.manifest().inventory);
  std::ofstream(run / "plan.json") << json{{"init", init.iso()},
                                           {"lead_hours", args.lead},
                                           {"steps", plan.steps},
                                           {"cumulative", plan.cumulative()},
                                           {"boundary", args.no_boundary ? "none" : "truth"}}
                                          .dump(2)
                                   << "\n";
  run.complete();
}

// ---------------------------------------------------------------------------
// Evaluate

namespace {

std::vector<fs::path> glob_runs(const fs::path& root, const std::string& prefix, const std::string& leaf) {
  std::vector<fs::path> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::directory_iterator(root)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind(prefix, 0) == 0 && is_complete_run(e.path()) && fs::exists(e.path() / leaf)) {
      out.push_back(e.path() / leaf);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Copy of the truth at the valid times of `forecast`, with its attributes.
void write_truth_replay(const Dataset& forecast, const Dataset& truth, const fs::path& dir) {
  auto m = forecast.manifest();
  m.root = dir;
  m.attributes["replay"] = true;
  DatasetWriter w(m, true);
  for (auto t : forecast.manifest().timestamps()) w.append(t, truth.load(Group::kState, t));
  w.finish();
}

}  // namespace

void cmd_evaluate(const Invocation& inv, const EvaluateArgs& args) {
  auto data = load_prepared(inv);
  std::vector<fs::path> fc_paths(args.forecasts.begin(), args.forecasts.end());
  std::vector<fs::path> pr_paths(args.precip.begin(), args.precip.end());
  if (fc_paths.empty()) fc_paths = glob_runs(inv.outputs_dir(), "forecast_", "forecast");
  if (pr_paths.empty() && !args.truth_replay) pr_paths = glob_runs(inv.outputs_dir(), "precip_", "precip.rgca");
  if (fc_paths.empty() && pr_paths.empty()) throw NotFoundError("nothing to evaluate: no forecast or precipitation runs");
  const auto mode = inv.cfg.acc_mode();
  if (mode == AccMode::kAnomaly && !data.clim && !fc_paths.empty()) {
    throw InvalidArgument("anomaly ACC needs a climatology; the prepared dataset has none (set evaluate.acc_mode=field-mean)");
  }
  std::vector<Dataset> forecasts;
  for (const auto& p : fc_paths) {
    forecasts.push_back(with_stage("load-forecast", [&] { return Dataset::open(p); }));
  }

  const auto dir = inv.run_dir(inv.outputs_dir() / (args.truth_replay ? "evaluate_truth" : "evaluate"));
  if (is_complete_run(dir) && !inv.force) throw InvalidArgument(dir.string() + " already exists; pass --force");
  RunDir run(dir, inv, seed_manifest(inv.cfg));
  std::vector<Dataset> replays;
  if (args.truth_replay) {
    for (std::size_t i = 0; i < forecasts.size(); ++i) {
      const auto rdir = run / ("replay_" + std::to_string(i));
      write_truth_replay(forecasts[i], *data.ds, rdir);
      replays.push_back(Dataset::open(rdir));
    }
  }
  const auto& scored = args.truth_replay ? replays : forecasts;

  MetricTable table;
  json summary{{"forecasts", json::array()}, {"precip", json::array()}, {"truth_replay", args.truth_replay}};
  for (const auto& p : fc_paths) summary["forecasts"].push_back(p.string());
  if (!scored.empty()) {
    EvalOptions opt;
    opt.variables = inv.cfg.evaluate.variables;
    opt.acc_mode = mode;
    opt.normalize_weights = inv.cfg.evaluate.normalize_weights;
    std::vector<const Dataset*> ptrs;
    for (const auto& f : scored) ptrs.push_back(&f);
    auto res = with_stage("score", [&] { return evaluate_rollouts(ptrs, *data.ds, data.clim ? &*data.clim : nullptr, opt); });
    table = res.table;
    summary["coverage"] = res.coverage;
    summary["missing"] = json::array();
    for (auto t : res.missing) summary["missing"].push_back(t.iso());
    logging::info("scored ", scored.size(), " forecasts, coverage ", res.coverage);
    for (auto t : res.missing) logging::warn("valid time ", t.iso(), " missing from the truth");
  }

  std::map<int, std::pair<std::vector<torch::Tensor>, std::vector<torch::Tensor>>> by_lead;
  for (const auto& p : pr_paths) {
    auto ar = with_stage("load-precip", [&] { return TensorArchive::load(p, kPrecipKind); });
    const auto t = Timestamp::parse(ar.meta().at("time").get<std::string>());
    if (!data.manifest().contains(t) || !data.manifest().has_hires_precip) {
      logging::warn("no observed high-resolution precipitation at ", t.iso(), "; ", p.string(), " skipped");
      continue;
    }
    auto& slot = by_lead[ar.meta().value("lead_hours", 0)];
    slot.first.push_back(ar.get("enmax"));
    slot.second.push_back(data.ds->load(Group::kHiresPrecip, t)[0]);
    summary["precip"].push_back(p.string());
  }
  for (const auto& [lead, pairs] : by_lead) {
    auto t = score_precipitation(pairs.first, pairs.second, lead, inv.cfg.evaluate.thresholds);
    table.rows.insert(table.rows.end(), t.rows.begin(), t.rows.end());
  }
  if (table.rows.empty()) throw MissingTimestampError("no scores could be computed");
  table.write_csv(run / "metrics.csv");
  std::ofstream(run / "summary.json") << summary.dump(2) << "\n";
  for (const auto& r : table.rows) {
    if (r.metric == "rmse" || r.metric == "acc" || r.metric.rfind("ts@", 0) == 0) {
      logging::info(r.variable, " +", r.lead_hours, " h ", r.metric, " ", r.value ? logging::cat(*r.value) : std::string("undefined"));
    }
  }
  run.complete();
}

// ---------------------------------------------------------------------------
// Plot

void cmd_plot(const Invocation& inv, const PlotArgs& args) {
  const fs::path metrics = args.metrics ? fs::path(*args.metrics) : inv.outputs_dir() / "evaluate" / "metrics.csv";
  auto table = with_stage("load-metrics", [&] { return MetricTable::read_csv(metrics); });
  std::vector<std::string> vars = args.variables;
  if (vars.empty()) {
    for (const auto& v : table.variables()) {
      for (const auto& r : table.rows) {
        if (r.variable == v && (r.metric == "rmse" || r.metric == "acc")) {
          vars.push_back(v);
          break;
        }
      }
    }
  }
  if (vars.empty()) throw InvalidArgument("metric table " + metrics.string() + " has no RMSE/ACC rows to plot");
  for (const auto& v : vars) {
    if (std::none_of(table.rows.begin(), table.rows.end(), [&](const MetricRow& r) {
          return r.variable == v && (r.metric == "rmse" || r.metric == "acc") && r.value;
        })) {
      throw InvalidArgument("metric table " + metrics.string() + " has no scores for '" + v + "'");
    }
  }
  std::optional<Prepared> data;
  std::optional<Dataset> fc;
  std::vector<int> leads = args.leads;
  if (args.forecast) {
    data.emplace(load_prepared(inv));
    fc.emplace(with_stage("load-forecast", [&] { return Dataset::open(*args.forecast); }));
    if (leads.empty()) leads = fc->manifest().attributes.at("leads").get<std::vector<int>>();
  }

  const auto dir = inv.run_dir(inv.outputs_dir() / "plots");
  if (is_complete_run(dir) && !inv.force) throw InvalidArgument(dir.string() + " already exists; pass --force");
  RunDir run(dir, inv, seed_manifest(inv.cfg));
  int images = 0;
  for (const auto& v : vars) {
    plot_score_curves(run / (v + "_scores.svg"), table, v);
    ++images;
  }
  if (fc) {
    const auto init = Timestamp::parse(fc->manifest().attributes.at("init").get<std::string>());
    const auto& inv_m = data->manifest().inventory;
    for (const auto& v : vars) {
      const int c = inv_m.channel_index(v);
      for (int lead : leads) {
        const auto t = init + lead;
        auto f = with_stage("load-forecast", [&] { return fc->load(Group::kState, t)[c]; });
        auto o = with_stage("load-data", [&] { return data->ds->load(Group::kState, t)[c]; });
        plot_field_panels(run / (v + "_" + std::to_string(lead) + "h_map.svg"), f, o, data->manifest().grid,
                          v + " +" + std::to_string(lead) + " h, valid " + t.iso());
        ++images;
      }
    }
  }
  logging::info("wrote ", images, " images");
  run.complete();
}

}  // namespace regcast::cli
