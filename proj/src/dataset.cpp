#include "regcast/dataset.hpp"

#include <algorithm>
#include <fstream>

#include "regcast/error.hpp"
#include "regcast/serialization.hpp"

namespace regcast {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kNone: return "none";
  }
  return "none";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw InvalidArgument("unknown split '" + s + "'");
}

Split SplitRule::split_of(Timestamp t) const {
  int y = t.year();
  if (y <= train_end_year) return Split::kTrain;
  if (y == val_year) return Split::kVal;
  if (y == test_year) return Split::kTest;
  return Split::kNone;
}

std::string group_dir(Group g) {
  switch (g) {
    case Group::kState: return "state";
    case Group::kPrecip: return "precip";
    case Group::kHiresPrecip: return "hires_precip";
  }
  return "state";
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<Timestamp> DatasetManifest::timestamps() const {
  std::vector<Timestamp> out;
  for (const auto& r : runs) {
    for (int h = 0; h < r.n_hours; ++h) out.push_back(r.start + h);
  }
  return out;
}

std::vector<Timestamp> DatasetManifest::timestamps(Split s) const {
  std::vector<Timestamp> out;
  for (auto t : timestamps()) {
    if (split.split_of(t) == s) out.push_back(t);
  }
  return out;
}

bool DatasetManifest::contains(Timestamp t) const {
  return std::any_of(runs.begin(), runs.end(), [&](const TimeRun& r) { return r.contains(t); });
}

std::int64_t DatasetManifest::n_timestamps() const {
  std::int64_t n = 0;
  for (const auto& r : runs) n += r.n_hours;
  return n;
}

void DatasetManifest::validate() const {
  grid.validate();
  inventory.validate();
  if (hires_grid) hires_grid->validate();
  if (has_hires_precip && !hires_grid) throw InvalidArgument("hires precipitation without a hires grid");
  if (chunk_hours < 1) throw InvalidArgument("chunk_hours must be >= 1");
  for (size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].n_hours < 1) throw InvalidArgument("empty time run in manifest");
    if (i > 0 && runs[i].start <= runs[i - 1].end()) {
      throw InvalidArgument("time runs overlap, touch, or are out of order at " + runs[i].start.iso());
    }
  }
}

namespace {

json manifest_json(const DatasetManifest& m) {
  json j;
  j["format"] = "regcast-dataset";
  j["layout_version"] = kLayoutVersion;
  j["grid"] = m.grid;
  j["inventory"] = m.inventory;
  j["channels"] = m.inventory.channel_names();
  j["hires_grid"] = m.hires_grid ? json(*m.hires_grid) : json(nullptr);
  j["chunk_hours"] = m.chunk_hours;
  j["runs"] = json::array();
  for (const auto& r : m.runs) j["runs"].push_back({{"start", r.start.iso()}, {"n_hours", r.n_hours}});
  j["split"] = {{"train_end_year", m.split.train_end_year},
                {"val_year", m.split.val_year},
                {"test_year", m.split.test_year}};
  j["groups"] = {{"topography", m.has_topography},
                 {"precip", m.has_precip},
                 {"hires_precip", m.has_hires_precip}};
  j["attributes"] = m.attributes;
  return j;
}

}  // namespace

void DatasetManifest::save() const {
  validate();
  fs::create_directories(root);
  auto tmp = root / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw NotFoundError("cannot write manifest in " + root.string());
    os << manifest_json(*this).dump(2) << "\n";
  }
  fs::rename(tmp, root / "manifest.json");
}

DatasetManifest DatasetManifest::load(const fs::path& root) {
  auto path = root / "manifest.json";
  std::ifstream is(path);
  if (!is) throw NotFoundError("no dataset manifest at " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw CorruptDataError(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "regcast-dataset") throw CorruptDataError(path.string() + ": not a dataset manifest");
  if (!j.contains("layout_version")) throw CorruptDataError(path.string() + ": missing layout_version");
  if (j["layout_version"].get<int>() != kLayoutVersion) {
    throw CorruptDataError(path.string() + ": unsupported layout version");
  }
  DatasetManifest m;
  m.root = root;
  try {
    m.grid = j.at("grid").get<GridSpec>();
    m.inventory = j.at("inventory").get<VariableInventory>();
    if (j.contains("channels") && j["channels"].get<std::vector<std::string>>() != m.inventory.channel_names()) {
      throw CorruptDataError(path.string() + ": channel list disagrees with inventory");
    }
    if (!j.at("hires_grid").is_null()) m.hires_grid = j["hires_grid"].get<GridSpec>();
    m.chunk_hours = j.at("chunk_hours").get<int>();
    for (const auto& r : j.at("runs")) {
      m.runs.push_back({Timestamp::parse(r.at("start").get<std::string>()), r.at("n_hours").get<int>()});
    }
    m.split.train_end_year = j.at("split").at("train_end_year").get<int>();
    m.split.val_year = j.at("split").at("val_year").get<int>();
    m.split.test_year = j.at("split").at("test_year").get<int>();
    m.has_topography = j.at("groups").at("topography").get<bool>();
    m.has_precip = j.at("groups").at("precip").get<bool>();
    m.has_hires_precip = j.at("groups").at("hires_precip").get<bool>();
    m.attributes = j.value("attributes", json::object());
  } catch (const json::exception& e) {
    throw CorruptDataError(path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

bool DatasetManifest::operator==(const DatasetManifest& other) const {
  return manifest_json(*this) == manifest_json(other);
}

// ---------------------------------------------------------------------------
// Reader

namespace {

fs::path chunk_path(const fs::path& root, Group g, Timestamp start, int n) {
  return root / group_dir(g) / (start.compact() + "_" + std::to_string(n) + "h.rgca");
}

constexpr size_t kCacheChunks = 16;

}  // namespace

Dataset::Dataset(DatasetManifest m) : manifest_(std::move(m)), cache_(std::make_shared<Cache>()) {}

Dataset Dataset::open(const fs::path& root) { return Dataset(DatasetManifest::load(root)); }

std::pair<Timestamp, int> Dataset::chunk_of(Timestamp t) const {
  for (const auto& r : manifest_.runs) {
    if (r.contains(t)) {
      auto k = (t - r.start) / manifest_.chunk_hours;
      auto start = r.start + k * manifest_.chunk_hours;
      int n = int(std::min<std::int64_t>(manifest_.chunk_hours, r.end() - start));
      return {start, n};
    }
  }
  throw MissingTimestampError("timestamp " + t.iso() + " is not in dataset " + manifest_.root.string());
}

std::vector<int64_t> Dataset::group_shape(Group g) const {
  const auto& grid = manifest_.grid;
  switch (g) {
    case Group::kState: return {manifest_.inventory.channels(), grid.n_lat, grid.n_lon};
    case Group::kPrecip: return {1, grid.n_lat, grid.n_lon};
    case Group::kHiresPrecip: return {1, manifest_.hires_grid->n_lat, manifest_.hires_grid->n_lon};
  }
  return {};
}

torch::Tensor Dataset::load_chunk(Group g, Timestamp chunk_start, int n_hours) const {
  auto key = std::make_pair(int(g), chunk_start.hours());
  {
    std::lock_guard lock(cache_->mu);
    auto it = cache_->chunks.find(key);
    if (it != cache_->chunks.end()) return it->second;
  }
  auto path = chunk_path(manifest_.root, g, chunk_start, n_hours);
  auto ar = TensorArchive::load(path, "chunk");
  auto data = ar.get("data");
  auto expect = group_shape(g);
  expect.insert(expect.begin(), n_hours);
  if (data.sizes().vec() != expect) {
    throw ShapeError(path.string() + ": chunk shape disagrees with manifest");
  }
  if (ar.meta().value("start", "") != chunk_start.iso()) {
    throw CorruptDataError(path.string() + ": chunk start disagrees with its file name");
  }
  std::lock_guard lock(cache_->mu);
  cache_->chunks[key] = data;
  cache_->order.push_back(key);
  if (cache_->order.size() > kCacheChunks) {
    cache_->chunks.erase(cache_->order.front());
    cache_->order.erase(cache_->order.begin());
  }
  return data;
}

torch::Tensor Dataset::load(Group g, Timestamp t) const {
  if (g == Group::kPrecip && !manifest_.has_precip) throw NotFoundError("dataset has no precipitation group");
  if (g == Group::kHiresPrecip && !manifest_.has_hires_precip) {
    throw NotFoundError("dataset has no hires precipitation group");
  }
  auto [start, n] = chunk_of(t);
  return load_chunk(g, start, n)[t - start].clone();
}

torch::Tensor Dataset::load_range(Group g, Timestamp start, int n_hours) const {
  if (n_hours < 1) throw InvalidArgument("load_range needs n_hours >= 1");
  std::vector<torch::Tensor> parts;
  auto t = start;
  auto end = start + n_hours;
  while (t < end) {
    auto [cs, cn] = chunk_of(t);
    auto chunk = load_chunk(g, cs, cn);
    auto lo = t - cs;
    auto hi = std::min<std::int64_t>(cn, end - cs);
    parts.push_back(chunk.slice(0, lo, hi));
    t = cs + hi;
  }
  return torch::cat(parts, 0);
}

torch::Tensor Dataset::topography() const {
  if (!manifest_.has_topography) {
    return torch::zeros({manifest_.grid.n_lat, manifest_.grid.n_lon});
  }
  std::lock_guard lock(cache_->mu);
  if (!cache_->topography.defined()) {
    auto ar = TensorArchive::load(manifest_.root / "static" / "topography.rgca", "static");
    auto t = ar.get("topography");
    if (t.sizes().vec() != std::vector<int64_t>{manifest_.grid.n_lat, manifest_.grid.n_lon}) {
      throw ShapeError("topography shape disagrees with manifest grid");
    }
    cache_->topography = t;
  }
  return cache_->topography;
}

WeatherState Dataset::load_state(Timestamp t) const {
  WeatherState s{load(Group::kState, t), t, false};
  s.validate(manifest_.grid, manifest_.inventory);
  return s;
}

SampleRecord Dataset::load_sample(Timestamp t) const {
  SampleRecord r;
  r.state = load_state(t);
  r.topography = topography();
  if (manifest_.has_precip) r.precip = load(Group::kPrecip, t)[0];
  if (manifest_.has_hires_precip) {
    r.hires_precip = load(Group::kHiresPrecip, t)[0];
    if (manifest_.contains(t - 1)) r.hires_precip_prev = load(Group::kHiresPrecip, t - 1)[0];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Writer

DatasetWriter::DatasetWriter(DatasetManifest manifest, bool force) : manifest_(std::move(manifest)) {
  manifest_.runs.clear();
  if (fs::exists(manifest_.root / "manifest.json")) {
    if (!force) {
      throw InvalidArgument("dataset already exists at " + manifest_.root.string() +
                            " (use --force to overwrite)");
    }
    for (auto g : {Group::kState, Group::kPrecip, Group::kHiresPrecip}) {
      fs::remove_all(manifest_.root / group_dir(g));
    }
    fs::remove_all(manifest_.root / "static");
    fs::remove(manifest_.root / "manifest.json");
  }
  manifest_.validate();
  fs::create_directories(manifest_.root);
}

void DatasetWriter::set_topography(const torch::Tensor& topo) {
  if (topo.dim() != 2 || topo.size(0) != manifest_.grid.n_lat || topo.size(1) != manifest_.grid.n_lon) {
    throw ShapeError("topography must be [n_lat, n_lon]");
  }
  TensorArchive ar("static");
  ar.meta()["layout_version"] = kLayoutVersion;
  ar.add("topography", topo.to(torch::kFloat32));
  ar.save(manifest_.root / "static" / "topography.rgca");
  manifest_.has_topography = true;
}

void DatasetWriter::append(Timestamp t, const torch::Tensor& state,
                           const std::optional<torch::Tensor>& precip,
                           const std::optional<torch::Tensor>& hires_precip) {
  if (finished_) throw InvalidArgument("dataset writer already finished");
  if (last_ && t <= *last_) throw InvalidArgument("timestamps must be strictly increasing");
  const auto& g = manifest_.grid;
  if (state.dim() != 3 || state.size(0) != manifest_.inventory.channels() || state.size(1) != g.n_lat ||
      state.size(2) != g.n_lon) {
    throw ShapeError("appended state shape disagrees with manifest");
  }
  if (!torch::isfinite(state).all().item<bool>()) throw NumericalError("appended state has NaN/Inf");
  bool first = !last_.has_value();
  if (first) {
    manifest_.has_precip = precip.has_value();
    manifest_.has_hires_precip = hires_precip.has_value();
  }
  if (precip.has_value() != manifest_.has_precip || hires_precip.has_value() != manifest_.has_hires_precip) {
    throw InvalidArgument("every appended sample must carry the same groups");
  }
  if (hires_precip && !manifest_.hires_grid) throw InvalidArgument("hires precipitation without a hires grid");

  bool new_run = first || t != *last_ + 1;
  if (new_run || (chunk_start_ && t - *chunk_start_ >= manifest_.chunk_hours)) flush();
  if (new_run) manifest_.runs.push_back({t, 0});
  if (!chunk_start_) chunk_start_ = t;

  buf_state_.push_back(state.to(torch::kFloat32));
  if (precip) buf_precip_.push_back(precip->to(torch::kFloat32).reshape({1, g.n_lat, g.n_lon}));
  if (hires_precip) {
    buf_hires_.push_back(hires_precip->to(torch::kFloat32)
                             .reshape({1, manifest_.hires_grid->n_lat, manifest_.hires_grid->n_lon}));
  }
  manifest_.runs.back().n_hours += 1;
  last_ = t;
}

void DatasetWriter::flush() {
  if (!chunk_start_ || buf_state_.empty()) {
    chunk_start_.reset();
    return;
  }
  int n = int(buf_state_.size());
  auto write = [&](Group g, std::vector<torch::Tensor>& buf) {
    if (buf.empty()) return;
    TensorArchive ar("chunk");
    ar.meta()["group"] = group_dir(g);
    ar.meta()["start"] = chunk_start_->iso();
    ar.meta()["n_hours"] = n;
    ar.meta()["layout_version"] = kLayoutVersion;
    ar.add("data", torch::stack(buf));
    ar.save(chunk_path(manifest_.root, g, *chunk_start_, n));
    buf.clear();
  };
  write(Group::kState, buf_state_);
  write(Group::kPrecip, buf_precip_);
  write(Group::kHiresPrecip, buf_hires_);
  chunk_start_.reset();
}

DatasetManifest DatasetWriter::finish() {
  flush();
  finished_ = true;
  manifest_.save();
  return manifest_;
}

// ---------------------------------------------------------------------------
// Statistics

void RunningMoments::add(const torch::Tensor& values) {
  auto v = values.to(torch::kDouble).flatten();
  auto n = v.numel();
  if (n == 0) return;
  RunningMoments batch;
  batch.n_ = n;
  batch.mean_ = v.mean().item<double>();
  batch.m2_ = (v - batch.mean_).pow(2).sum().item<double>();
  merge(batch);
}

void RunningMoments::merge(const RunningMoments& o) {
  if (o.n_ == 0) return;
  if (n_ == 0) {
    *this = o;
    return;
  }
  auto n = n_ + o.n_;
  double delta = o.mean_ - mean_;
  mean_ += delta * double(o.n_) / double(n);
  m2_ += o.m2_ + delta * delta * double(n_) * double(o.n_) / double(n);
  n_ = n;
}

NormStats compute_stats(const Dataset& ds, Split split) {
  const auto& m = ds.manifest();
  auto ts = m.timestamps(split);
  if (ts.empty()) throw InvalidArgument("split '" + to_string(split) + "' has no samples");
  auto names = m.inventory.channel_names();
  const int c = int(names.size());
  std::vector<RunningMoments> moments(c);
  RunningMoments tp, hires;
  for (auto t : ts) {
    auto state = ds.load(Group::kState, t);
    for (int k = 0; k < c; ++k) moments[k].add(state[k]);
    if (m.has_precip) tp.add(precip_to_dbz(ds.load(Group::kPrecip, t)));
    if (m.has_hires_precip) hires.add(precip_to_dbz(ds.load(Group::kHiresPrecip, t)));
  }

  NormStats s;
  s.first_year = ts.front().year();
  s.last_year = ts.back().year();
  auto push = [&](const std::string& name, const RunningMoments& mo) {
    s.names.push_back(name);
    s.mean.push_back(mo.mean());
    s.std.push_back(std::sqrt(mo.variance()));
  };
  for (int k = 0; k < c; ++k) push(names[k], moments[k]);
  if (m.has_topography) {
    RunningMoments topo;
    topo.add(ds.topography());
    push("topography", topo);
  }
  if (m.has_precip) push("tp_dbz", tp);
  if (m.has_hires_precip) push("hires_dbz", hires);

  std::string degenerate;
  for (int i = 0; i < s.size(); ++i) {
    if (!(s.std[i] > 0.0)) degenerate += (degenerate.empty() ? "" : ", ") + s.names[i];
  }
  if (!degenerate.empty()) throw InvalidArgument("zero-variance channels: " + degenerate);
  return s;
}

Climatology build_climatology(const Dataset& ds, int first_year, int last_year,
                              const std::vector<std::string>& channels) {
  const auto& m = ds.manifest();
  auto names = channels.empty() ? m.inventory.channel_names() : channels;
  std::vector<int64_t> index;
  for (const auto& n : names) index.push_back(m.inventory.channel_index(n));
  auto sel = torch::tensor(index, torch::kLong);
  ClimatologyBuilder builder(names, m.grid.n_lat, m.grid.n_lon);
  for (auto t : m.timestamps()) {
    if (t.year() < first_year || t.year() > last_year) continue;
    builder.add(t, ds.load(Group::kState, t).index_select(0, sel));
  }
  return builder.finish(first_year, last_year);
}

}  // namespace regcast
