#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>

#include "rbnn/model.hpp"

namespace rbnn {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Training provenance written next to a checkpoint.
struct CheckpointInfo {
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  double val_accuracy = 0.0;
  std::string dataset;  // dataset directory the model was trained on, if any
};

inline constexpr char kCheckpointMagic[8] = {'R', 'B', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated checkpoint while reading " + what);
  return v;
}

inline std::string read_bytes(std::istream& is, std::uint64_t n, const std::string& what) {
  if (n > (1ULL << 32)) throw IoError("implausible length for " + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("truncated checkpoint while reading " + what);
  return s;
}

}  // namespace detail

/// Binary layout (little endian):
///   magic "RBNNCKPT" | u32 version | u32 mode (0 baseline, 1 bayesian)
///   u64 spec length | canonical spec text
///   u64 tensor count | per tensor: u32 name length, name, u32 rank, u64 extents..., f64 values...
inline void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointInfo& info = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(model.bayesian() ? 1 : 0));
  const std::string spec = model.spec().serialize();
  detail::write_pod(os, static_cast<std::uint64_t>(spec.size()));
  os.write(spec.data(), static_cast<std::streamsize>(spec.size()));
  const auto params = model.parameters();
  detail::write_pod(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params) {
    detail::write_pod(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& s = p.tensor->shape();
    detail::write_pod(os, static_cast<std::uint32_t>(s.size()));
    for (std::size_t e : s) detail::write_pod(os, static_cast<std::uint64_t>(e));
    os.write(reinterpret_cast<const char*>(p.tensor->data()), static_cast<std::streamsize>(p.tensor->size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());

  std::ofstream man(path.string() + ".manifest", std::ios::trunc);
  if (!man) throw IoError("cannot write checkpoint manifest for " + path.string());
  char acc[64];
  std::snprintf(acc, sizeof acc, "%.6f", info.val_accuracy);
  man << "format=rbnn-checkpoint\n"
      << "version=" << kCheckpointVersion << '\n'
      << "mode=" << mode_name(model.mode()) << '\n'
      << "spec_hash=" << hex64(fnv1a64(spec)) << '\n'
      << "param_count=" << model.parameter_count() << '\n'
      << "seed=" << info.seed << '\n'
      << "iteration=" << info.iteration << '\n'
      << "val_accuracy=" << acc << '\n';
  if (!info.dataset.empty()) man << "dataset=" << info.dataset << '\n';
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::string_view(magic, 8) != std::string_view(kCheckpointMagic, 8)) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto mode = detail::read_pod<std::uint32_t>(is, "mode");
  if (mode > 1) throw IoError("bad model mode in checkpoint");
  const auto spec_len = detail::read_pod<std::uint64_t>(is, "spec length");
  const ModelSpec spec = ModelSpec::parse(detail::read_bytes(is, spec_len, "spec"));
  Model model = build(spec, mode ? ModelMode::Bayesian : ModelMode::Baseline, 0);
  const auto count = detail::read_pod<std::uint64_t>(is, "tensor count");
  auto params = model.parameters();
  if (count != params.size()) {
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, spec implies " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name_len = detail::read_pod<std::uint32_t>(is, "name length");
    const std::string name = detail::read_bytes(is, name_len, "tensor name");
    if (name != p.name) throw IoError("checkpoint tensor '" + name + "' where '" + p.name + "' was expected");
    const auto rank = detail::read_pod<std::uint32_t>(is, "rank");
    Shape s(rank);
    for (auto& e : s) e = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, "extent"));
    if (s != p.tensor->shape()) {
      throw IoError("tensor '" + name + "' has shape " + shape_str(s) + ", expected " + shape_str(p.tensor->shape()));
    }
    if (!is.read(reinterpret_cast<char*>(p.tensor->data()), static_cast<std::streamsize>(p.tensor->size() * sizeof(double)))) {
      throw IoError("truncated data for tensor '" + name + "'");
    }
    if (!p.tensor->all_finite()) throw NumericError("non-finite values in checkpoint tensor '" + name + "'");
  }
  return model;
}

/// Reads the `key=value` sidecar manifest.
inline std::map<std::string, std::string> read_checkpoint_manifest(const std::filesystem::path& checkpoint) {
  std::ifstream is(checkpoint.string() + ".manifest");
  if (!is) throw IoError("missing checkpoint manifest for " + checkpoint.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

}  // namespace rbnn
