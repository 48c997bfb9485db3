#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "regcast/archive.hpp"
#include "regcast/grid.hpp"

namespace regcast {

enum class Split { kTrain, kVal, kTest, kNone };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Year-based split: train <= train_end_year, val == val_year, test == test_year.
struct SplitRule {
  int train_end_year = 2019;
  int val_year = 2020;
  int test_year = 2021;

  Split split_of(Timestamp t) const;
};

/// A contiguous run of hourly timestamps [start, start + n_hours).
struct TimeRun {
  Timestamp start;
  int n_hours = 0;

  Timestamp end() const { return start + n_hours; }
  bool contains(Timestamp t) const { return t >= start && t < end(); }
};

/// Variable groups stored in separate chunk files.
enum class Group { kState, kPrecip, kHiresPrecip };
std::string group_dir(Group g);

inline constexpr int kLayoutVersion = 1;

/// On-disk layout of a dataset rooted at `root`:
///
///   manifest.json                 this manifest (format "regcast-dataset")
///   static/topography.rgca        [n_lat, n_lon] f32, when present
///   state/<YYYYMMDDHH>_<n>h.rgca  [n, C, n_lat, n_lon] f32 chunks
///   precip/...                    [n, 1, n_lat, n_lon] coarse precipitation (mm/h)
///   hires_precip/...              [n, 1, hires.n_lat, hires.n_lon] (mm/h)
///
/// Chunk files are TensorArchives of kind "chunk" with one tensor "data" and
/// meta {"group", "start", "n_hours", "layout_version"}. Chunks tile each run
/// from its start in steps of chunk_hours; the last chunk of a run may be short.
struct DatasetManifest {
  std::filesystem::path root;
  GridSpec grid;
  VariableInventory inventory;
  std::optional<GridSpec> hires_grid;
  int chunk_hours = 24;
  std::vector<TimeRun> runs;
  SplitRule split;
  bool has_topography = false;
  bool has_precip = false;
  bool has_hires_precip = false;
  json attributes = json::object();

  std::vector<Timestamp> timestamps() const;
  std::vector<Timestamp> timestamps(Split s) const;
  bool contains(Timestamp t) const;
  std::int64_t n_timestamps() const;

  /// Checks run ordering/cadence and grid consistency.
  void validate() const;
  void save() const;
  static DatasetManifest load(const std::filesystem::path& root);

  bool operator==(const DatasetManifest& other) const;
};

/// One decoded time slice; all fields in physical units.
struct SampleRecord {
  WeatherState state;
  torch::Tensor topography;                        // [n_lat, n_lon]
  std::optional<torch::Tensor> precip;             // p_t, [n_lat, n_lon]
  std::optional<torch::Tensor> hires_precip;       // P_t, hires grid
  std::optional<torch::Tensor> hires_precip_prev;  // P_{t-1}, when t-1 is stored
};

/// Read access to a stored dataset. Loads are referentially transparent and
/// safe to issue from several threads; decoded chunks are kept in a small
/// shared cache.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root);

  const DatasetManifest& manifest() const { return manifest_; }

  SampleRecord load_sample(Timestamp t) const;
  WeatherState load_state(Timestamp t) const;
  /// One time slice of a group, [C, H, W].
  torch::Tensor load(Group g, Timestamp t) const;
  /// [n_hours, C, H, W] across chunk boundaries; the range must lie in one run.
  torch::Tensor load_range(Group g, Timestamp start, int n_hours) const;
  torch::Tensor topography() const;

 private:
  explicit Dataset(DatasetManifest m);
  torch::Tensor load_chunk(Group g, Timestamp chunk_start, int n_hours) const;
  std::pair<Timestamp, int> chunk_of(Timestamp t) const;
  std::vector<int64_t> group_shape(Group g) const;

  DatasetManifest manifest_;
  struct Cache {
    std::mutex mu;
    std::map<std::pair<int, std::int64_t>, torch::Tensor> chunks;
    std::vector<std::pair<int, std::int64_t>> order;
    torch::Tensor topography;
  };
  std::shared_ptr<Cache> cache_;
};

/// Single-writer builder for a dataset directory. Timestamps must be appended
/// in strictly increasing order; a gap starts a new run.
class DatasetWriter {
 public:
  /// `manifest.runs` is ignored and rebuilt from the appended timestamps.
  /// Refuses to write into an existing dataset unless `force`.
  DatasetWriter(DatasetManifest manifest, bool force = false);

  void set_topography(const torch::Tensor& topo);
  void append(Timestamp t, const torch::Tensor& state,
              const std::optional<torch::Tensor>& precip = std::nullopt,
              const std::optional<torch::Tensor>& hires_precip = std::nullopt);
  DatasetManifest finish();

 private:
  void flush();

  DatasetManifest manifest_;
  std::vector<torch::Tensor> buf_state_, buf_precip_, buf_hires_;
  std::optional<Timestamp> chunk_start_;
  std::optional<Timestamp> last_;
  bool finished_ = false;
};

/// Streaming per-channel mean/std over one split. Channels: the inventory
/// names, then "topography" (static field), then "tp_dbz" and "hires_dbz" for
/// precipitation computed in the dBZ domain. Throws InvalidArgument for an
/// empty split or zero-variance channels (all offending names listed).
NormStats compute_stats(const Dataset& ds, Split split = Split::kTrain);

/// Mean fields by (month, hour) over the timestamps of `years`, for the named
/// channels (all inventory channels when empty).
Climatology build_climatology(const Dataset& ds, int first_year, int last_year,
                              const std::vector<std::string>& channels = {});

/// Welford/Chan running moments in double precision.
class RunningMoments {
 public:
  void add(const torch::Tensor& values);
  void merge(const RunningMoments& other);
  std::int64_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 0 ? m2_ / double(n_) : 0.0; }

 private:
  std::int64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

}  // namespace regcast
