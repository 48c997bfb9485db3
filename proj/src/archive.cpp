#include "regcast/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "regcast/error.hpp"

namespace regcast {

static_assert(std::endian::native == std::endian::little,
              "archive I/O writes native byte order and assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'E', 'G', 'C', 'A', 'S', 'T', '\0'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kUInt8: return "u8";
    default: throw InvalidArgument("archive: unsupported dtype");
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "u8") return torch::kUInt8;
  throw CorruptDataError("archive: unknown dtype '" + s + "'");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CorruptDataError("archive " + path.string() + ": truncated header");
  }
  return v;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  auto p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

void TensorArchive::add(const std::string& name, const torch::Tensor& tensor) {
  if (has(name)) throw InvalidArgument("archive: duplicate tensor '" + name + "'");
  tensors_.emplace_back(name, tensor.detach().to(torch::kCPU).contiguous());
}

void TensorArchive::add_bytes(const std::string& name, const std::string& bytes) {
  auto t = torch::empty({int64_t(bytes.size())}, torch::kUInt8);
  if (!bytes.empty()) std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
  add(name, t);
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_) {
    if (n == name) return true;
  }
  return false;
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_) {
    if (n == name) return t;
  }
  throw NotFoundError("archive has no tensor '" + name + "'");
}

std::string TensorArchive::get_bytes(const std::string& name) const {
  const auto& t = get(name);
  return std::string(static_cast<const char*>(t.data_ptr()), size_t(t.numel()));
}

void TensorArchive::save(const std::filesystem::path& path) const {
  json header;
  header["kind"] = kind_;
  header["meta"] = meta_;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    auto nbytes = std::uint64_t(t.numel() * t.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(t.scalar_type())},
                                 {"shape", t.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes},
                                 {"fnv1a", hex64(fnv1a64(t.data_ptr(), nbytes))}});
    offset += nbytes;
  }
  auto text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw NotFoundError("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kArchiveVersion);
    write_pod<std::uint32_t>(os, 0);
    write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, t] : tensors_) {
      os.write(static_cast<const char*>(t.data_ptr()), std::streamsize(t.numel() * t.element_size()));
    }
    if (!os) throw NotFoundError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path,
                                  const std::string& expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw CorruptDataError(path.string() + " is not a regcast archive");
  }
  auto version = read_pod<std::uint32_t>(is, path);
  if (version != kArchiveVersion) {
    throw CorruptDataError(path.string() + ": unsupported archive version " + std::to_string(version));
  }
  (void)read_pod<std::uint32_t>(is, path);
  auto header_len = read_pod<std::uint64_t>(is, path);
  if (header_len > (1ull << 31)) throw CorruptDataError(path.string() + ": implausible header length");
  std::string text(header_len, '\0');
  if (!is.read(text.data(), std::streamsize(header_len))) {
    throw CorruptDataError(path.string() + ": truncated header");
  }
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptDataError(path.string() + ": bad header: " + e.what());
  }

  TensorArchive ar(header.value("kind", std::string()));
  if (!expected_kind.empty() && ar.kind_ != expected_kind) {
    throw InvalidArgument(path.string() + " holds a '" + ar.kind_ + "' archive, expected '" +
                          expected_kind + "'");
  }
  ar.meta_ = header.value("meta", json::object());
  const auto payload_start = is.tellg();
  for (const auto& e : header.at("tensors")) {
    auto shape = e.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, dtype_from(e.at("dtype").get<std::string>()));
    auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != std::uint64_t(t.numel() * t.element_size())) {
      throw CorruptDataError(path.string() + ": size mismatch for " + e.at("name").get<std::string>());
    }
    is.seekg(payload_start + std::streamoff(e.at("offset").get<std::uint64_t>()));
    if (!is.read(static_cast<char*>(t.data_ptr()), std::streamsize(nbytes))) {
      throw CorruptDataError(path.string() + ": truncated payload for " +
                             e.at("name").get<std::string>());
    }
    if (hex64(fnv1a64(t.data_ptr(), nbytes)) != e.at("fnv1a").get<std::string>()) {
      throw CorruptDataError(path.string() + ": checksum mismatch for " +
                             e.at("name").get<std::string>());
    }
    ar.tensors_.emplace_back(e.at("name").get<std::string>(), t);
  }
  return ar;
}

}  // namespace regcast
