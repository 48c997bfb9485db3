#include "regcast/checkpoint.hpp"

#include <sstream>

#include "regcast/error.hpp"

namespace regcast {

namespace {

std::string optimizer_bytes(const torch::optim::Optimizer& opt) {
  std::ostringstream os;
  torch::serialize::OutputArchive oa;
  opt.save(oa);
  oa.save_to(os);
  return os.str();
}

void load_optimizer_bytes(torch::optim::Optimizer& opt, const std::string& bytes) {
  std::istringstream is(bytes);
  torch::serialize::InputArchive ia;
  ia.load_from(is);
  opt.load(ia);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const torch::nn::Module& module,
                     const CheckpointInfo& info, const torch::optim::Optimizer* optimizer,
                     const CheckpointExtras& extras) {
  TensorArchive ar(kind);
  ar.meta() = json{{"version", kCheckpointVersion}, {"fingerprint", info.fingerprint}, {"config", info.config},
                   {"step", info.step},           {"seed", info.seed},               {"extra", info.extra}};
  for (const auto& p : module.named_parameters()) ar.add("param/" + p.key(), p.value().detach());
  for (const auto& b : module.named_buffers()) ar.add("buffer/" + b.key(), b.value().detach());
  if (optimizer) ar.add_bytes("optimizer", optimizer_bytes(*optimizer));
  for (const auto& [name, m] : extras.modules) {
    for (const auto& p : m->named_parameters()) ar.add(name + "/param/" + p.key(), p.value().detach());
    for (const auto& b : m->named_buffers()) ar.add(name + "/buffer/" + b.key(), b.value().detach());
  }
  for (const auto& [name, o] : extras.optimizers) ar.add_bytes("optimizer/" + name, optimizer_bytes(*o));
  ar.save(path);
}

namespace {

CheckpointInfo info_from(const TensorArchive& ar, const std::filesystem::path& path) {
  const auto& m = ar.meta();
  if (m.value("version", 0) != kCheckpointVersion) {
    throw CorruptDataError("checkpoint " + path.string() + ": unsupported version");
  }
  CheckpointInfo info;
  info.fingerprint = m.at("fingerprint").get<std::string>();
  info.config = m.at("config");
  info.step = m.at("step").get<std::int64_t>();
  info.seed = m.at("seed").get<std::uint64_t>();
  info.extra = m.value("extra", json::object());
  return info;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path, const std::string& kind) {
  return info_from(TensorArchive::load(path, kind), path);
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, const std::string& kind, torch::nn::Module& module,
                               const std::string& expected_fingerprint, torch::optim::Optimizer* optimizer,
                               const CheckpointExtras& extras) {
  auto ar = TensorArchive::load(path, kind);
  auto info = info_from(ar, path);
  if (info.fingerprint != expected_fingerprint) {
    throw InvalidArgument("checkpoint " + path.string() + " was written for architecture " + info.fingerprint +
                          ", expected " + expected_fingerprint);
  }
  torch::NoGradGuard guard;
  auto copy_into = [&](const std::string& prefix, torch::OrderedDict<std::string, torch::Tensor> dict) {
    for (auto& item : dict) {
      const auto name = prefix + item.key();
      if (!ar.has(name)) throw InvalidArgument("checkpoint " + path.string() + " lacks " + name);
      const auto& src = ar.get(name);
      if (src.sizes() != item.value().sizes()) {
        throw InvalidArgument("checkpoint " + path.string() + ": shape mismatch for " + name);
      }
      item.value().copy_(src);
    }
  };
  copy_into("param/", module.named_parameters());
  copy_into("buffer/", module.named_buffers());
  if (optimizer && ar.has("optimizer")) load_optimizer_bytes(*optimizer, ar.get_bytes("optimizer"));
  for (const auto& [name, m] : extras.modules) {
    copy_into(name + "/param/", m->named_parameters());
    copy_into(name + "/buffer/", m->named_buffers());
  }
  for (const auto& [name, o] : extras.optimizers) {
    const auto key = "optimizer/" + name;
    if (!ar.has(key)) throw InvalidArgument("checkpoint " + path.string() + " lacks " + key);
    load_optimizer_bytes(*o, ar.get_bytes(key));
  }
  return info;
}

}  // namespace regcast
