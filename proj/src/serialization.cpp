#include "regcast/serialization.hpp"

#include <fstream>

#include "regcast/error.hpp"

namespace regcast {

void to_json(json& j, const GridSpec& g) {
  j = json{{"lat_start", g.lat_start}, {"lat_end", g.lat_end},     {"lon_start", g.lon_start},
           {"lon_end", g.lon_end},     {"resolution", g.resolution}, {"n_lat", g.n_lat},
           {"n_lon", g.n_lon}};
}

void from_json(const json& j, GridSpec& g) {
  g = GridSpec::from_extent(j.at("lat_start").get<double>(), j.at("lat_end").get<double>(),
                            j.at("lon_start").get<double>(), j.at("lon_end").get<double>(),
                            j.at("resolution").get<double>());
  if (j.contains("n_lat") && (j["n_lat"].get<int>() != g.n_lat || j["n_lon"].get<int>() != g.n_lon)) {
    throw InvalidArgument("grid counts disagree with extent/resolution");
  }
}

void to_json(json& j, const VariableInventory& v) {
  j = json{{"surface_vars", v.surface_vars},
           {"pressure_vars", v.pressure_vars},
           {"pressure_levels", v.pressure_levels}};
}

void from_json(const json& j, VariableInventory& v) {
  v.surface_vars = j.at("surface_vars").get<std::vector<std::string>>();
  v.pressure_vars = j.at("pressure_vars").get<std::vector<std::string>>();
  v.pressure_levels = j.at("pressure_levels").get<std::vector<int>>();
  v.validate();
}

void save_norm_stats(const NormStats& stats, const std::filesystem::path& path) {
  stats.validate();
  json j;
  j["format"] = "regcast-normstats";
  j["version"] = kNormStatsVersion;
  j["years"] = {stats.first_year, stats.last_year};
  j["channels"] = json::array();
  for (int i = 0; i < stats.size(); ++i) {
    j["channels"].push_back({{"name", stats.names[i]}, {"mean", stats.mean[i]}, {"std", stats.std[i]}});
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw NotFoundError("cannot write " + path.string());
  // 17 significant digits round-trips doubles exactly.
  os << j.dump(2) << "\n";
}

NormStats load_norm_stats(const std::filesystem::path& path,
                          const std::optional<std::vector<std::string>>& expected) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open normalization stats " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw CorruptDataError(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "regcast-normstats") {
    throw CorruptDataError(path.string() + " is not a normalization-stats file");
  }
  if (j.value("version", 0) != kNormStatsVersion) {
    throw CorruptDataError(path.string() + ": unsupported normstats version");
  }
  NormStats s;
  s.first_year = j.at("years").at(0).get<int>();
  s.last_year = j.at("years").at(1).get<int>();
  for (const auto& c : j.at("channels")) {
    s.names.push_back(c.at("name").get<std::string>());
    s.mean.push_back(c.at("mean").get<double>());
    s.std.push_back(c.at("std").get<double>());
  }
  s.validate();
  if (expected) {
    for (const auto& name : *expected) {
      if (s.index_of(name) < 0) {
        throw InvalidArgument(path.string() + " lacks channel '" + name + "'");
      }
    }
  }
  return s;
}

void save_climatology(const Climatology& clim, const std::filesystem::path& path) {
  TensorArchive ar("climatology");
  ar.meta()["version"] = kClimatologyVersion;
  ar.meta()["channels"] = clim.names;
  ar.meta()["years"] = {clim.first_year, clim.last_year};
  ar.add("fields", clim.fields.to(torch::kFloat32));
  ar.save(path);
}

Climatology load_climatology(const std::filesystem::path& path,
                             const std::optional<std::vector<std::string>>& expected) {
  auto ar = TensorArchive::load(path, "climatology");
  if (ar.meta().value("version", 0) != kClimatologyVersion) {
    throw CorruptDataError(path.string() + ": unsupported climatology version");
  }
  Climatology c;
  c.names = ar.meta().at("channels").get<std::vector<std::string>>();
  c.first_year = ar.meta().at("years").at(0).get<int>();
  c.last_year = ar.meta().at("years").at(1).get<int>();
  c.fields = ar.get("fields");
  if (c.fields.dim() != 5 || c.fields.size(0) != 12 || c.fields.size(1) != 24 ||
      c.fields.size(2) != int64_t(c.names.size())) {
    throw CorruptDataError(path.string() + ": climatology shape disagrees with its channel list");
  }
  if (!torch::isfinite(c.fields).all().item<bool>()) {
    throw CorruptDataError(path.string() + ": climatology contains NaN/Inf");
  }
  if (expected) {
    for (const auto& name : *expected) {
      if (c.index_of(name) < 0) throw InvalidArgument(path.string() + " lacks channel '" + name + "'");
    }
  }
  return c;
}

}  // namespace regcast
