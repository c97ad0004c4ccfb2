#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssllab/backbones.hpp"
#include "ssllab/data.hpp"
#include "ssllab/layers.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// Checkpoint container: 8-byte magic, little-endian u64 header length, a JSON
// header (tensor manifest with name/dtype/shape/offset, backbone config,
// normalization constants, free-form metadata), then the raw payload of all
// tensor scalars in manifest order. Round trips are bitwise.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[9] = "SSLCKPT1";  // 8 bytes on disk

inline nlohmann::json backbone_config_to_json(const BackboneConfig& c) {
  return nlohmann::json{{"family", c.family},
                        {"in_channels", c.in_channels},
                        {"in_h", c.in_h},
                        {"in_w", c.in_w},
                        {"embed_dim", c.embed_dim},
                        {"depth", c.depth},
                        {"heads", c.heads},
                        {"patch_size", c.patch_size},
                        {"width_multiplier", c.width_multiplier},
                        {"mean_pool", c.mean_pool}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.family = j.at("family").get<std::string>();
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.in_h = j.at("in_h").get<int64_t>();
  c.in_w = j.at("in_w").get<int64_t>();
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  c.depth = j.at("depth").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.patch_size = j.at("patch_size").get<int64_t>();
  c.width_multiplier = j.at("width_multiplier").get<double>();
  c.mean_pool = j.at("mean_pool").get<bool>();
  return c;
}

struct TensorRecord {
  std::string name;
  std::string dtype;
  Shape shape;
  uint64_t offset = 0;  // bytes from the start of the payload
};

struct CheckpointHeader {
  std::string dtype;
  BackboneConfig backbone;
  ChannelStats stats;
  nlohmann::json model;  // model-level config (kind, head widths, ...)
  nlohmann::json meta;   // provenance: run info, source hashes, ...
  std::vector<TensorRecord> tensors;
};

namespace detail {

inline void require_little_endian() {
  const uint16_t probe = 1;
  unsigned char first;
  std::memcpy(&first, &probe, 1);
  if (first != 1)
    throw Error("checkpoint: big-endian hosts are not supported");
}

inline void write_u64_le(std::ostream& out, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline uint64_t read_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
size_t dtype_bytes() {
  return sizeof(T);
}

}  // namespace detail

/// FNV-1a 64-bit hash of a file's bytes, as 16 hex digits. Used to name the
/// exact weights a run started from.
inline std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file for hashing: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(hex);
}

/// Serialize every named tensor of `model` (trainable weights and running
/// statistics alike) with the backbone config and the normalization constants
/// the weights were trained under. Written atomically via a temp file.
template <typename T, typename Model>
void save_checkpoint(Model& model, const std::string& path,
                     const BackboneConfig& backbone, const ChannelStats& stats,
                     const nlohmann::json& model_info = nlohmann::json::object(),
                     const nlohmann::json& meta = nlohmann::json::object()) {
  detail::require_little_endian();
  auto entries = named_tensors<T>(model, "");
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& e : entries) {
    nlohmann::json rec{{"name", e.name},
                       {"dtype", dtype_name<T>()},
                       {"shape", e.tensor.shape()},
                       {"offset", offset}};
    manifest.push_back(std::move(rec));
    offset += static_cast<uint64_t>(e.tensor.numel()) * sizeof(T);
  }
  nlohmann::json header{{"format", 1},
                        {"dtype", dtype_name<T>()},
                        {"backbone", backbone_config_to_json(backbone)},
                        {"normalization",
                         {{"mean", stats.mean}, {"std", stats.stddev}}},
                        {"model", model_info},
                        {"meta", meta},
                        {"tensors", std::move(manifest)}};
  const std::string header_bytes = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint: " + tmp);
    out.write(kCheckpointMagic, 8);
    detail::write_u64_le(out, header_bytes.size());
    out.write(header_bytes.data(),
              static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& e : entries) {
      const auto& data = e.tensor.data();
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(T)));
    }
    if (!out) throw FormatError("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
struct LoadedCheckpoint {
  CheckpointHeader header;
  // name -> (shape, scalars), in manifest order inside `header.tensors`.
  std::unordered_map<std::string, std::pair<Shape, std::vector<T>>> tensors;

  /// Copy every tensor of `model` from the checkpoint, by name, bitwise.
  /// The model must match the manifest exactly: a missing name, an unused
  /// name, or a shape mismatch is an incompatibility.
  template <typename Model>
  void load_into(Model& model) const {
    size_t used = 0;
    model.visit("", [&](const std::string& name, Tensor<T>& t, bool) {
      auto it = tensors.find(name);
      if (it == tensors.end())
        throw IncompatibilityError("checkpoint has no tensor named '" + name +
                                   "' required by the model");
      if (it->second.first != t.shape())
        throw IncompatibilityError(
            "checkpoint tensor '" + name + "' has shape " +
            shape_str(it->second.first) + " but the model expects " +
            shape_str(t.shape()));
      t.data() = it->second.second;
      ++used;
    });
    if (used != tensors.size())
      throw IncompatibilityError(
          "checkpoint holds " + std::to_string(tensors.size()) +
          " tensors but the model consumed only " + std::to_string(used));
  }

  /// Copy one visitable subtree (e.g. just the backbone of a siamese
  /// checkpoint, whose tensors live under "backbone."). Every tensor the
  /// subtree asks for must exist with a matching shape; checkpoint tensors
  /// outside the subtree are deliberately ignored.
  template <typename Module>
  void load_subtree(Module& module, const std::string& prefix) const {
    size_t used = 0;
    module.visit(prefix, [&](const std::string& name, Tensor<T>& t, bool) {
      auto it = tensors.find(name);
      if (it == tensors.end())
        throw IncompatibilityError("checkpoint has no tensor named '" + name +
                                   "' required under '" + prefix + "'");
      if (it->second.first != t.shape())
        throw IncompatibilityError(
            "checkpoint tensor '" + name + "' has shape " +
            shape_str(it->second.first) + " but the model expects " +
            shape_str(t.shape()));
      t.data() = it->second.second;
      ++used;
    });
    if (used == 0)
      throw IncompatibilityError("checkpoint has no tensors under '" + prefix +
                                 "'");
  }
};

namespace detail {

inline CheckpointHeader parse_checkpoint_header(const nlohmann::json& j) {
  CheckpointHeader h;
  if (!j.contains("format") || j.at("format").get<int64_t>() != 1)
    throw FormatError("checkpoint: unsupported format version");
  h.dtype = j.at("dtype").get<std::string>();
  h.backbone = backbone_config_from_json(j.at("backbone"));
  const auto& norm = j.at("normalization");
  h.stats.mean = norm.at("mean").get<std::vector<double>>();
  h.stats.stddev = norm.at("std").get<std::vector<double>>();
  h.model = j.value("model", nlohmann::json::object());
  h.meta = j.value("meta", nlohmann::json::object());
  for (const auto& rec : j.at("tensors")) {
    TensorRecord r;
    r.name = rec.at("name").get<std::string>();
    r.dtype = rec.at("dtype").get<std::string>();
    r.shape = rec.at("shape").get<Shape>();
    check_shape_valid(r.shape, "checkpoint tensor");
    r.offset = rec.at("offset").get<uint64_t>();
    h.tensors.push_back(std::move(r));
  }
  return h;
}

inline std::vector<unsigned char> read_checkpoint_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

inline nlohmann::json checkpoint_header_json(
    const std::vector<unsigned char>& bytes, const std::string& path,
    size_t* payload_start) {
  if (bytes.size() < 16)
    throw FormatError("checkpoint truncated before header: " + path);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError("bad checkpoint magic in " + path);
  const uint64_t header_len = read_u64_le(bytes.data() + 8);
  if (16 + header_len > bytes.size())
    throw FormatError("checkpoint truncated inside header: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin() + 16,
                              bytes.begin() + 16 + static_cast<long>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header is not valid JSON: " +
                      std::string(e.what()));
  }
  *payload_start = 16 + static_cast<size_t>(header_len);
  return j;
}

}  // namespace detail

/// Read only the header (cheap relative to the payload; still one file read).
inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  const auto bytes = detail::read_checkpoint_bytes(path);
  size_t payload_start = 0;
  return detail::parse_checkpoint_header(
      detail::checkpoint_header_json(bytes, path, &payload_start));
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  detail::require_little_endian();
  const auto bytes = detail::read_checkpoint_bytes(path);
  size_t payload_start = 0;
  const nlohmann::json j =
      detail::checkpoint_header_json(bytes, path, &payload_start);
  LoadedCheckpoint<T> out;
  out.header = detail::parse_checkpoint_header(j);

  // The manifest must tile the payload exactly: offsets contiguous from 0,
  // no gaps or overlaps, total equal to the bytes actually present.
  std::vector<const TensorRecord*> by_offset;
  by_offset.reserve(out.header.tensors.size());
  for (const auto& r : out.header.tensors) by_offset.push_back(&r);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const TensorRecord* a, const TensorRecord* b) {
              return a->offset < b->offset;
            });
  uint64_t expect = 0;
  for (const TensorRecord* r : by_offset) {
    if (r->dtype != dtype_name<T>())
      throw IncompatibilityError("checkpoint tensor '" + r->name + "' is " +
                                 r->dtype + " but the model uses " +
                                 dtype_name<T>());
    if (r->offset != expect)
      throw FormatError("checkpoint payload has gaps or overlaps at tensor '" +
                        r->name + "'");
    expect += static_cast<uint64_t>(shape_numel(r->shape)) * sizeof(T);
  }
  const uint64_t payload_size = bytes.size() - payload_start;
  if (payload_size != expect)
    throw FormatError("corrupt checkpoint: payload holds " +
                      std::to_string(payload_size) + " bytes, manifest needs " +
                      std::to_string(expect));

  for (const auto& r : out.header.tensors) {
    const size_t numel = static_cast<size_t>(shape_numel(r.shape));
    std::vector<T> data(numel);
    std::memcpy(data.data(), bytes.data() + payload_start + r.offset,
                numel * sizeof(T));
    if (!out.tensors.emplace(r.name, std::make_pair(r.shape, std::move(data)))
             .second)
      throw FormatError("checkpoint manifest repeats tensor '" + r.name + "'");
  }
  return out;
}

}  // namespace ssllab
