#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "rgbt/nn.hpp"

namespace rgbt {

struct CheckpointManifest {
  std::string fusion_mode = "single";
  std::string scale = "n";
  int num_classes = 1;
  int in_channels = 3;
  int ir_channels = 3;
  std::vector<std::string> freeze_flags;  // names of frozen parameters
  int format_version = 1;
};

// Named-array container: parameters and buffers of a model plus a manifest.
struct Checkpoint {
  CheckpointManifest manifest;
  std::map<std::string, Tensor> arrays;
};

inline nlohmann::json manifest_to_json(const CheckpointManifest& m) {
  return nlohmann::json{{"fusion_mode", m.fusion_mode}, {"scale", m.scale},
                        {"num_classes", m.num_classes}, {"in_channels", m.in_channels},
                        {"ir_channels", m.ir_channels}, {"freeze_flags", m.freeze_flags},
                        {"format_version", m.format_version}};
}

inline CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  CheckpointManifest m;
  m.fusion_mode = j.at("fusion_mode").get<std::string>();
  m.scale = j.at("scale").get<std::string>();
  m.num_classes = j.at("num_classes").get<int>();
  m.in_channels = j.at("in_channels").get<int>();
  m.ir_channels = j.value("ir_channels", 3);
  m.freeze_flags = j.value("freeze_flags", std::vector<std::string>{});
  m.format_version = j.at("format_version").get<int>();
  return m;
}

namespace detail {
constexpr char kCkptMagic[8] = {'R', 'G', 'B', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(detail::kCkptMagic, 8);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(ckpt.manifest.format_version));
  std::string mjson = manifest_to_json(ckpt.manifest).dump();
  detail::write_pod<uint64_t>(os, mjson.size());
  os.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  detail::write_pod<uint64_t>(os, ckpt.arrays.size());
  for (const auto& [name, t] : ckpt.arrays) {  // std::map iterates sorted: stable layout
    detail::write_pod<uint64_t>(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_pod<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != 1) throw std::runtime_error("unsupported checkpoint format version " + std::to_string(version));
  uint64_t mlen = detail::read_pod<uint64_t>(is);
  std::string mjson(mlen, '\0');
  is.read(mjson.data(), static_cast<std::streamsize>(mlen));
  Checkpoint ckpt;
  ckpt.manifest = manifest_from_json(nlohmann::json::parse(mjson));
  uint64_t n = detail::read_pod<uint64_t>(is);
  for (uint64_t i = 0; i < n; ++i) {
    uint64_t nl = detail::read_pod<uint64_t>(is);
    std::string name(nl, '\0');
    is.read(name.data(), static_cast<std::streamsize>(nl));
    uint32_t nd = detail::read_pod<uint32_t>(is);
    std::vector<int> shape(nd);
    for (uint32_t d = 0; d < nd; ++d) shape[d] = static_cast<int>(detail::read_pod<int64_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    ckpt.arrays.emplace(std::move(name), std::move(t));
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return ckpt;
}

inline Checkpoint checkpoint_from_model(Module& model, CheckpointManifest manifest) {
  Checkpoint ckpt;
  std::vector<std::pair<std::string, Var>> ps;
  model.named_params(ps);
  for (const auto& [name, v] : ps) {
    ckpt.arrays[name] = v->value;
    if (!v->requires_grad) manifest.freeze_flags.push_back(name);
  }
  std::vector<std::pair<std::string, Tensor*>> bs;
  model.named_buffers(bs);
  for (const auto& [name, t] : bs) ckpt.arrays[name] = *t;
  ckpt.manifest = std::move(manifest);
  return ckpt;
}

// Strict load: every model parameter and buffer must resolve to an array of
// identical shape. Errors name the first mismatched tensor.
inline void load_checkpoint_into(Module& model, const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, Var>> ps;
  model.named_params(ps);
  for (auto& [name, v] : ps) {
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end()) throw std::runtime_error("checkpoint missing tensor: " + name);
    if (it->second.shape != v->value.shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": model " +
                               v->value.shape_str() + " vs checkpoint " + it->second.shape_str());
    v->value = it->second;
  }
  std::vector<std::pair<std::string, Tensor*>> bs;
  model.named_buffers(bs);
  for (auto& [name, t] : bs) {
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end()) throw std::runtime_error("checkpoint missing tensor: " + name);
    if (it->second.shape != t->shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    *t = it->second;
  }
}

}  // namespace rgbt
