#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rgbt/checkpoint.hpp"
#include "rgbt/fusion.hpp"

namespace rgbt {

enum class ChannelAdapt { CopyScaled, Average };

inline const char* channel_adapt_name(ChannelAdapt s) {
  return s == ChannelAdapt::CopyScaled ? "copy_scaled" : "average";
}

inline ChannelAdapt channel_adapt_from_name(const std::string& s) {
  if (s == "copy_scaled") return ChannelAdapt::CopyScaled;
  if (s == "average") return ChannelAdapt::Average;
  throw std::invalid_argument("unknown channel adaptation strategy: " + s);
}

// Rebuild a conv weight [out, in, k, k] for a different input channel count.
// Both strategies scale by in/new_in so the output of the adapted layer matches
// the original layer when the new input replicates the old one across channels
// (copy_scaled, new_in a multiple of in) or when all old channels carried the
// same signal (average).
inline Tensor adapt_input_channels(const Tensor& w, int new_in, ChannelAdapt strategy) {
  if (w.ndim() != 4) throw std::invalid_argument("adapt_input_channels expects a 4D conv weight");
  if (new_in < 1) throw std::invalid_argument("adapt_input_channels: new_in must be >= 1");
  int out = w.shape[0], in = w.shape[1], kh = w.shape[2], kw = w.shape[3];
  double s = static_cast<double>(in) / static_cast<double>(new_in);
  Tensor r({out, new_in, kh, kw});
  for (int o = 0; o < out; ++o)
    for (int j = 0; j < new_in; ++j)
      for (int y = 0; y < kh; ++y)
        for (int x = 0; x < kw; ++x) {
          double v;
          if (strategy == ChannelAdapt::CopyScaled) {
            v = w.at4(o, j % in, y, x);
          } else {
            v = 0.0;
            for (int c = 0; c < in; ++c) v += w.at4(o, c, y, x);
            v /= static_cast<double>(in);
          }
          r.at4(o, j, y, x) = v * s;
        }
  return r;
}

struct TransferReport {
  std::vector<std::string> copied;           // exact-name, exact-shape
  std::vector<std::string> channel_adapted;  // first-conv weights rebuilt for new input depth
  std::vector<std::string> duplicated;       // filled from a differently named source stage
  std::vector<std::string> unmatched;        // left at their fresh initialization
};

namespace detail {

// Map a target tensor name onto the stage namespace of a single-modality
// checkpoint. Returns (source name, duplicated?) or nullopt for tensors with
// no counterpart (fusion junctions).
inline std::optional<std::pair<std::string, bool>> transfer_source_name(const std::string& name) {
  struct Rule {
    const char* prefix;
    const char* replacement;
    bool duplicated;
  };
  static const Rule rules[] = {
      {"backbone.", "backbone.", false},
      {"backbone_rgb.", "backbone.", true},
      {"backbone_ir.", "backbone.", true},
      {"stem_rgb.", "backbone.", true},
      {"stem_ir.", "backbone.", true},
      {"trunk.", "backbone.", true},
      {"neck.", "neck.", false},
      {"neck_rgb.", "neck.", true},
      {"neck_ir.", "neck.", true},
      {"head.", "head.", false},
      {"head_rgb.", "head.", true},
      {"head_ir.", "head.", true},
  };
  for (const Rule& r : rules) {
    std::string p(r.prefix);
    if (name.rfind(p, 0) == 0)
      return std::make_pair(r.replacement + name.substr(p.size()), r.duplicated);
  }
  return std::nullopt;
}

inline bool only_in_channels_differ(const std::vector<int>& a, const std::vector<int>& b) {
  return a.size() == 4 && b.size() == 4 && a[0] == b[0] && a[2] == b[2] && a[3] == b[3] &&
         a[1] != b[1];
}

}  // namespace detail

// Initialize a (possibly multi-stream) model from a single-modality
// checkpoint. Stage weights are copied by name, dual-stream stages are filled
// from the one source stage, and first convolutions whose input depth changed
// are rebuilt with the given strategy. Anything without a source counterpart
// keeps its fresh initialization and is reported as unmatched.
inline TransferReport load_with_transfer(Module& model, const Checkpoint& src,
                                         ChannelAdapt strategy) {
  TransferReport rep;
  auto pull = [&](const std::string& name, Tensor& dst, bool is_param) {
    auto mapped = detail::transfer_source_name(name);
    if (!mapped) {
      if (is_param) rep.unmatched.push_back(name);
      return;
    }
    auto it = src.arrays.find(mapped->first);
    if (it == src.arrays.end()) {
      if (is_param) rep.unmatched.push_back(name);
      return;
    }
    const Tensor& sv = it->second;
    if (sv.shape == dst.shape) {
      dst = sv;
      if (is_param) (mapped->second ? rep.duplicated : rep.copied).push_back(name);
    } else if (detail::only_in_channels_differ(dst.shape, sv.shape)) {
      dst = adapt_input_channels(sv, dst.shape[1], strategy);
      if (is_param) rep.channel_adapted.push_back(name);
    } else {
      throw std::runtime_error("transfer shape mismatch for " + name + ": model " + dst.shape_str() +
                               " vs source " + sv.shape_str());
    }
  };
  std::vector<std::pair<std::string, Var>> ps;
  model.named_params(ps);
  for (auto& [name, v] : ps) pull(name, v->value, true);
  std::vector<std::pair<std::string, Tensor*>> bs;
  model.named_buffers(bs);
  for (auto& [name, t] : bs) pull(name, *t, false);
  return rep;
}

// Build a fresh detector for target_spec and initialize it from a
// single-modality checkpoint, returning the surgered checkpoint and report.
inline std::pair<Checkpoint, TransferReport> transfer_checkpoint(const Checkpoint& src,
                                                                 const ModelSpec& target_spec,
                                                                 ChannelAdapt strategy,
                                                                 uint64_t seed = 0) {
  if (src.manifest.fusion_mode != "single")
    throw std::invalid_argument("transfer source must be a single-modality checkpoint, got '" +
                                src.manifest.fusion_mode + "'");
  FusedDetector model(target_spec, seed);
  TransferReport rep = load_with_transfer(model, src, strategy);
  CheckpointManifest m;
  m.fusion_mode = fusion_mode_name(target_spec.fusion);
  m.scale = std::string(1, target_spec.scale);
  m.num_classes = target_spec.num_classes;
  m.in_channels = target_spec.in_channels;
  m.ir_channels = target_spec.ir_channels;
  return {checkpoint_from_model(model, std::move(m)), std::move(rep)};
}

}  // namespace rgbt
