#pragma once

// Checkpoint file layout (little-endian throughout):
//   "LVCK" | u32 version | u32 n + n bytes canonical config text
//   | u64 training seed | u64 step counter
//   | u32 parameter count | per parameter: u32 n + n name bytes, `.ten` record
//   | u64 optimizer step | u32 moment count | per parameter: `.ten` first moment, `.ten` second moment

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lvfsr/adam.hpp"
#include "lvfsr/network.hpp"
#include "lvfsr/tensor_io.hpp"

namespace lvfsr {

inline constexpr char kCheckpointMagic[4] = {'L', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> parameters;
  AdamState<float> optimizer;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

inline Checkpoint capture_checkpoint(const Network<float>& net, const AdamState<float>& optimizer, std::uint64_t seed,
                                     std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.config = net.config();
  for (const auto& p : net.parameters()) ckpt.parameters.emplace_back(p.name(), p.detach());
  ckpt.optimizer = optimizer;
  ckpt.seed = seed;
  ckpt.step = step;
  return ckpt;
}

/// Loads parameter values (and optimizer state, if present) into `net`.
/// The network must have been built from the same configuration.
inline void restore_checkpoint(const Checkpoint& ckpt, Network<float>& net, AdamState<float>* optimizer = nullptr) {
  require(ckpt.config == net.config(), ErrorKind::config,
          "checkpoint configuration does not match the network:\n" + ckpt.config.canonical_text() + "vs\n" +
              net.config().canonical_text());
  auto& params = net.parameters();
  require(ckpt.parameters.size() == params.size(), ErrorKind::format,
          "checkpoint holds " + std::to_string(ckpt.parameters.size()) + " parameters, network has " +
              std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = ckpt.parameters[i];
    require(name == params[i].name(), ErrorKind::format,
            "checkpoint parameter '" + name + "' where '" + params[i].name() + "' was expected");
    require(value.shape() == params[i].shape(), ErrorKind::format,
            "checkpoint parameter '" + name + "' has shape " + shape_str(value.shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto src = ckpt.parameters[i].second.data();
    std::copy(src.begin(), src.end(), params[i].mutable_data().begin());
  }
  if (optimizer) {
    if (ckpt.optimizer.first_moment.empty()) {
      *optimizer = AdamState<float>::zeros_like(params);
      optimizer->step = ckpt.optimizer.step;
    } else {
      *optimizer = ckpt.optimizer;
    }
  }
}

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 4);
  io::put_u32(out, kCheckpointVersion);
  const std::string config = ckpt.config.canonical_text();
  io::put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  io::put_u64(out, ckpt.seed);
  io::put_u64(out, ckpt.step);
  io::put_u32(out, static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& [name, value] : ckpt.parameters) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    encode_tensor<float>(out, value.shape(), value.data());
  }
  io::put_u64(out, ckpt.optimizer.step);
  const auto& m = ckpt.optimizer.first_moment;
  const auto& v = ckpt.optimizer.second_moment;
  io::put_u32(out, static_cast<std::uint32_t>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Shape& shape = ckpt.parameters.at(i).second.shape();
    encode_tensor<float>(out, shape, m[i]);
    encode_tensor<float>(out, shape, v[i]);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  io::Reader in(bytes, source);
  const auto magic = in.bytes(4);
  require(std::memcmp(magic.data(), kCheckpointMagic, 4) == 0, ErrorKind::format, source + ": bad checkpoint magic");
  const std::uint32_t version = in.u32();
  require(version == kCheckpointVersion, ErrorKind::format,
          source + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
              std::to_string(kCheckpointVersion) + ")");
  Checkpoint ckpt;
  const std::uint32_t config_len = in.u32();
  ckpt.config = NetworkConfig::from_canonical_text(std::string(in.bytes(config_len)));
  ckpt.seed = in.u64();
  ckpt.step = in.u64();
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32();
    std::string name(in.bytes(name_len));
    for (const auto& existing : ckpt.parameters)
      require(existing.first != name, ErrorKind::format, source + ": duplicate parameter name " + name);
    ckpt.parameters.emplace_back(std::move(name), decode_tensor<float>(in));
  }
  ckpt.optimizer.step = in.u64();
  const std::uint32_t moments = in.u32();
  require(moments == 0 || moments == count, ErrorKind::format, source + ": optimizer state count mismatch");
  for (std::uint32_t i = 0; i < moments; ++i) {
    const Tensor<float> m = decode_tensor<float>(in);
    const Tensor<float> v = decode_tensor<float>(in);
    require(m.shape() == ckpt.parameters[i].second.shape() && v.shape() == m.shape(), ErrorKind::format,
            source + ": optimizer moment shape mismatch for " + ckpt.parameters[i].first);
    ckpt.optimizer.first_moment.push_back(m.values());
    ckpt.optimizer.second_moment.push_back(v.values());
  }
  require(in.done(), ErrorKind::format, source + ": trailing bytes after checkpoint");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_bytes_atomic(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace lvfsr
