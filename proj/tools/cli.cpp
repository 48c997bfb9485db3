#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <sstream>

#include "cli_internal.hpp"
#include "regcast/error.hpp"

namespace regcast::cli {

namespace {

/// Flags every subcommand accepts.
struct CommonFlags {
  std::string workdir = ".";
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::optional<std::string> out;
  bool force = false;
  bool resume = false;
  // Shortcuts for section keys of the command's stage.
  std::optional<std::int64_t> steps;
  std::optional<double> lr;
  std::optional<int> batch_size;
  std::optional<int> hours;
  std::optional<int> members;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--workdir", f.workdir, "Root for the default run directories")->capture_default_str();
  sub->add_option("--config", f.config, "JSON run configuration file");
  sub->add_option("--set", f.sets, "Override a config key: dotted.key=value (repeatable)");
  sub->add_option("--seed", f.seed, "Run seed");
  sub->add_option("--profile", f.profile, "Configuration profile (toy | full)");
  sub->add_option("--out", f.out, "Run output directory (default depends on the command)");
  sub->add_flag("--force", f.force, "Overwrite an existing run directory");
}

void add_training(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--steps", f.steps, "Total optimizer steps");
  sub->add_option("--lr", f.lr, "Learning rate");
  sub->add_option("--batch-size", f.batch_size, "Batch size");
  sub->add_flag("--resume", f.resume, "Continue from the run directory's checkpoint");
}

/// Section whose training shortcuts a command sets.
std::string stage_section(const std::string& command) {
  if (command == "train-forecaster") return "forecaster";
  if (command == "finetune-leadtime") return "forecaster";
  if (command == "train-vae") return "codec";
  if (command == "train-dit") return "dit";
  return "";
}

Invocation build_invocation(const std::string& command, const CommonFlags& f) {
  std::vector<std::string> overrides = f.sets;
  if (f.profile) overrides.insert(overrides.begin(), "profile=\"" + *f.profile + "\"");
  if (f.seed) overrides.push_back("seed=" + std::to_string(*f.seed));
  const auto section = stage_section(command);
  if (f.steps) {
    overrides.push_back(section + (command == "finetune-leadtime" ? ".finetune_steps=" : ".steps=") +
                        std::to_string(*f.steps));
  }
  if (f.lr) {
    std::ostringstream os;
    os.precision(17);
    os << *f.lr;
    overrides.push_back(section + ".lr=" + os.str());
  }
  if (f.batch_size) overrides.push_back(section + ".batch_size=" + std::to_string(*f.batch_size));
  if (f.hours) overrides.push_back("data.hours=" + std::to_string(*f.hours));
  if (f.members) overrides.push_back("diagnose.members=" + std::to_string(*f.members));

  Invocation inv;
  inv.command = command;
  inv.workdir = f.workdir;
  std::optional<fs::path> file;
  if (f.config) file = fs::path(*f.config);
  inv.cfg = resolve_run_config(file, overrides);
  if (f.out) inv.out = fs::path(*f.out);
  inv.force = f.force;
  inv.resume = f.resume;
  if (inv.force && inv.resume) throw InvalidArgument("--force and --resume are mutually exclusive");
  return inv;
}

int exit_code_for(ErrorKind k) { return k == ErrorKind::kUser ? 1 : 2; }

}  // namespace

// ---------------------------------------------------------------------------
// Run directories

bool is_complete_run(const fs::path& dir) {
  return fs::exists(dir / kResolvedConfigFile) && !fs::exists(dir / kInProgressMarker);
}

void clear_run_dir(const fs::path& dir) {
  if (!fs::exists(dir)) return;
  if (!fs::is_directory(dir)) throw InvalidArgument(dir.string() + " exists and is not a directory");
  const bool empty = fs::directory_iterator(dir) == fs::directory_iterator();
  if (!empty && !fs::exists(dir / kResolvedConfigFile) && !fs::exists(dir / kInProgressMarker)) {
    throw InvalidArgument("refusing to clear " + dir.string() + ": it is not a run directory");
  }
  fs::remove_all(dir);
}

RunDir::RunDir(fs::path dir, const Invocation& inv, const json& seeds) : dir_(std::move(dir)) {
  if (fs::exists(dir_ / kInProgressMarker) && !inv.resume && !inv.force) {
    throw InvalidArgument(dir_.string() + " holds partial outputs of an interrupted run; pass --resume or --force");
  }
  if (inv.force) clear_run_dir(dir_);
  fs::create_directories(dir_);
  std::ofstream(dir_ / kInProgressMarker) << inv.command << "\n";
  json resolved{{"command", inv.command}, {"arguments", inv.arguments}, {"config", inv.cfg}};
  std::ofstream(dir_ / kResolvedConfigFile) << resolved.dump(2) << "\n";
  std::ofstream(dir_ / kSeedManifestFile) << seeds.dump(2) << "\n";
  logging::attach_file((dir_ / "run.log").string());
  sink_attached_ = true;
  logging::info(inv.command, ": run directory ", dir_.string());
}

RunDir::~RunDir() {
  if (sink_attached_) logging::detach_files();
}

void RunDir::complete() {
  fs::remove(dir_ / kInProgressMarker);
  logging::info("done: ", dir_.string());
}

LossLog::LossLog(const fs::path& path, const std::vector<std::string>& columns,
                 std::optional<std::int64_t> resume_step) {
  std::vector<std::string> kept;
  if (resume_step && fs::exists(path)) {
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= *resume_step) kept.push_back(line);
    }
  }
  os_.open(path, std::ios::trunc);
  if (!os_) throw NotFoundError("cannot write " + path.string());
  os_ << "step";
  for (const auto& c : columns) os_ << "," << c;
  os_ << "\n";
  for (const auto& l : kept) os_ << l << "\n";
  os_.flush();
}

void LossLog::append(std::int64_t step, const std::vector<double>& values) {
  os_ << step;
  os_.precision(9);
  for (double v : values) os_ << "," << v;
  os_ << "\n";
  os_.flush();
}

// ---------------------------------------------------------------------------
// Parsing and dispatch

int run(const std::vector<std::string>& args) {
  logging::reset();

  CLI::App app{"Regional weather forecasting and precipitation diagnosis pipeline"};
  app.require_subcommand(1);
  CommonFlags f;
  PrepareArgs prep;
  FinetuneArgs fine;
  VaeArgs vae;
  ForecastArgs fc;
  DiagnoseArgs diag;
  EvaluateArgs ev;
  PlotArgs plot;

  auto* s_prep = app.add_subcommand("prepare-data", "Convert a local dataset or generate a synthetic one");
  add_common(s_prep, f);
  auto* src = s_prep->add_option("--source", prep.source, "Existing dataset directory to convert");
  auto* syn = s_prep->add_flag("--synthetic", prep.synthetic, "Generate seeded synthetic data");
  src->excludes(syn);
  s_prep->add_option("--hours", f.hours, "Hours per run of the synthetic layout");

  auto* s_tf = app.add_subcommand("train-forecaster", "Train the 1 h forecast model");
  add_common(s_tf, f);
  add_training(s_tf, f);

  auto* s_ft = app.add_subcommand("finetune-leadtime", "Fine-tune a 3, 6 or 24 h model from the 1 h model");
  add_common(s_ft, f);
  add_training(s_ft, f);
  s_ft->add_option("--lead", fine.lead, "Target lead time in hours (3, 6 or 24)")->required();
  s_ft->add_option("--base", fine.base, "1 h checkpoint (default: the train-forecaster run)");

  auto* s_vae = app.add_subcommand("train-vae", "Train one latent codec");
  add_common(s_vae, f);
  add_training(s_vae, f);
  s_vae->add_option("--codec", vae.codec, "state | precip | hires_precip | all")->required();

  auto* s_dit = app.add_subcommand("train-dit", "Train the latent diffusion denoiser");
  add_common(s_dit, f);
  add_training(s_dit, f);

  auto* s_fc = app.add_subcommand("forecast", "Roll the forecast models out from an initial time");
  add_common(s_fc, f);
  s_fc->add_option("--init", fc.init, "Initial time, YYYY-MM-DDTHH or YYYYMMDDHH")->required();
  s_fc->add_option("--lead", fc.lead, "Lead time in hours (1-120)")->required();
  s_fc->add_flag("--no-boundary", fc.no_boundary, "Run without lateral boundary strips");

  auto* s_dg = app.add_subcommand("diagnose-precip", "Diagnose high-resolution precipitation by ensemble sampling");
  add_common(s_dg, f);
  s_dg->add_option("--time", diag.time, "Valid time")->required();
  s_dg->add_option("--members", f.members, "Ensemble size");
  s_dg->add_option("--forecast", diag.forecast, "Forecast archive supplying the state (default: truth)");

  auto* s_ev = app.add_subcommand("evaluate", "Score forecasts and precipitation diagnoses against the truth");
  add_common(s_ev, f);
  s_ev->add_option("--forecast", ev.forecasts, "Forecast archives (default: every forecast run)");
  s_ev->add_option("--precip", ev.precip, "Precipitation diagnoses (default: every diagnose run)");
  s_ev->add_flag("--truth-replay", ev.truth_replay, "Score the truth at the forecast valid times against itself");

  auto* s_pl = app.add_subcommand("plot", "Render score curves and field maps as SVG");
  add_common(s_pl, f);
  s_pl->add_option("--metrics", plot.metrics, "Metric table (default: the evaluate run)");
  s_pl->add_option("--variables", plot.variables, "Variables to plot (default: all in the table)");
  s_pl->add_option("--forecast", plot.forecast, "Forecast archive for field maps");
  s_pl->add_option("--leads", plot.leads, "Leads for field maps (default: all forecast leads)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, err;
    const int code = app.exit(e, out, err);
    std::cout << out.str();
    std::cerr << err.str();
    return code == 0 ? 0 : 1;
  }

  auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    auto inv = build_invocation(command, f);
    for (const auto* opt : sub->get_options()) {
      if (opt->count() > 0 && opt->get_name() != "--help") {
        inv.arguments[opt->get_name(false, true)] = opt->results();
      }
    }
    if (command == "prepare-data") {
      cmd_prepare_data(inv, prep);
    } else if (command == "train-forecaster") {
      cmd_train_forecaster(inv);
    } else if (command == "finetune-leadtime") {
      cmd_finetune_leadtime(inv, fine);
    } else if (command == "train-vae") {
      cmd_train_vae(inv, vae);
    } else if (command == "train-dit") {
      cmd_train_dit(inv);
    } else if (command == "forecast") {
      cmd_forecast(inv, fc);
    } else if (command == "diagnose-precip") {
      cmd_diagnose_precip(inv, diag);
    } else if (command == "evaluate") {
      cmd_evaluate(inv, ev);
    } else if (command == "plot") {
      cmd_plot(inv, plot);
    }
    return 0;
  } catch (const Error& e) {
    logging::error(command, ": ", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    logging::error(command, ": internal error: ", e.what());
    return 2;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace regcast::cli
