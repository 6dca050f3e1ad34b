#pragma once

// Binary checkpoint container for PolicyNet.
//
// Layout, all integers little-endian u32 unless noted:
//   magic "SBRK" | version | d | hidden | blocks | agent_features |
//   task_features | variant | p_drop (f32) | observe_scalar |
//   logit_scale (f32) | record count
// then per record:
//   name length | name bytes | rank | extents... | f32 data, row-major

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "symbreak/attention.hpp"

namespace symbreak {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'B', 'R', 'K'};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF), static_cast<char>((v >> 16) & 0xFF),
                     static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) | (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const PolicyNet& net) {
  const auto& c = net.config();
  os.write(kCheckpointMagic.data(), 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(c.d));
  detail::put_u32(os, static_cast<std::uint32_t>(c.hidden));
  detail::put_u32(os, static_cast<std::uint32_t>(c.blocks));
  detail::put_u32(os, static_cast<std::uint32_t>(c.agent_features));
  detail::put_u32(os, static_cast<std::uint32_t>(c.task_features));
  detail::put_u32(os, static_cast<std::uint32_t>(c.variant));
  detail::put_f32(os, c.p_drop);
  detail::put_u32(os, c.observe_scalar ? 1 : 0);
  detail::put_f32(os, c.logit_scale);
  const auto params = net.parameters();
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : p.tensor.data()) detail::put_f32(os, v);
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

inline PolicyConfig read_checkpoint_header(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw CheckpointError("checkpoint truncated");
  if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  PolicyConfig c;
  c.d = detail::get_u32(is);
  c.hidden = detail::get_u32(is);
  c.blocks = detail::get_u32(is);
  c.agent_features = detail::get_u32(is);
  c.task_features = detail::get_u32(is);
  const auto variant = detail::get_u32(is);
  if (variant > static_cast<std::uint32_t>(MaskVariant::Dropout)) throw CheckpointError("unknown mask variant in checkpoint");
  c.variant = static_cast<MaskVariant>(variant);
  c.p_drop = detail::get_f32(is);
  c.observe_scalar = detail::get_u32(is) != 0;
  c.logit_scale = detail::get_f32(is);
  return c;
}

/// Reads the parameter records into `net`, validating names and shapes.
/// The header must already have been consumed.
inline void read_checkpoint_records(std::istream& is, PolicyNet& net) {
  auto params = net.parameters();
  const auto count = detail::get_u32(is);
  if (count != params.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " parameters, network has " + std::to_string(params.size()));
  for (auto& p : params) {
    const auto len = detail::get_u32(is);
    if (len > 4096) throw CheckpointError("corrupt parameter name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint truncated");
    if (name != p.name) throw CheckpointError("expected parameter " + p.name + ", found " + name);
    const auto rank = detail::get_u32(is);
    if (rank > 8) throw CheckpointError("corrupt rank for " + name);
    Shape shape(rank);
    for (auto& e : shape) e = detail::get_u32(is);
    if (shape != p.tensor.shape())
      throw ShapeError("parameter " + name + " is " + shape_str(shape) + " in checkpoint, " + shape_str(p.tensor.shape()) + " in network");
    for (float& v : p.tensor.data()) v = detail::get_f32(is);
  }
}

inline void save_checkpoint(const PolicyNet& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, net);
}

/// Builds a network from the header and fills it from the records.
inline PolicyNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  PolicyNet net(read_checkpoint_header(is), 0);
  read_checkpoint_records(is, net);
  return net;
}

/// Loads into an existing network; every header field and shape must match it.
inline void load_checkpoint_into(PolicyNet& net, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  const PolicyConfig stored = read_checkpoint_header(is);
  const PolicyConfig& want = net.config();
  if (stored.d != want.d || stored.hidden != want.hidden || stored.blocks != want.blocks ||
      stored.agent_features != want.agent_features || stored.task_features != want.task_features)
    throw ShapeError("checkpoint architecture (d=" + std::to_string(stored.d) + ", blocks=" + std::to_string(stored.blocks) +
                     ") does not match network (d=" + std::to_string(want.d) + ", blocks=" + std::to_string(want.blocks) + ")");
  if (stored.logit_scale != want.logit_scale) throw CheckpointError("checkpoint logit scale differs from the network's");
  PolicyNet staged(want, 0);
  read_checkpoint_records(is, staged);
  net.copy_parameters_from(staged);
}

}  // namespace symbreak
