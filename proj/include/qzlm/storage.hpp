/* Copyright 2026 The qzlm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// The .qz checkpoint container: magic "QRNZ", one version byte, a
// length-prefixed JSON manifest, then concatenated little-endian tensor
// payload. Bytes are deterministic given identical inputs (fixed manifest
// key order, tightly packed offsets, no timestamps), so saving the same
// model twice produces identical files. See FORMAT.md for the exact layout.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qzlm/common.hpp"
#include "qzlm/detail/half.hpp"
#include "qzlm/gates.hpp"
#include "qzlm/model.hpp"
#include "qzlm/pruning.hpp"
#include "qzlm/sru.hpp"

namespace qzlm {

inline constexpr char kCheckpointMagic[4] = {'Q', 'R', 'N', 'Z'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct StoredGates {
  std::string tag;
  float lambda = 0;
  std::vector<std::vector<float>> log_alpha;
};

struct StoredSru {
  SruUpdate<float> update;  // tag, mask hash and fraction live on the update
  std::size_t element_width = 4;  // 4 (float32) or 2 (float16)
};

struct Checkpoint {
  QrnnModel<float> model;
  PruneMask mask;       // kept indices relative to the base model; full if unpruned
  std::string tag;      // operating-point label, empty for a base model
  double flops_fraction = 1.0;
  std::uint64_t base_flops_per_token = 0;
  std::optional<std::string> vocab_sha256;
  std::optional<ActivationStats> stats;
  std::vector<StoredGates> gates;
  std::vector<StoredSru> sru;

  const StoredGates* find_gates(std::string_view gate_tag) const {
    for (const auto& g : gates) {
      if (g.tag == gate_tag) return &g;
    }
    return nullptr;
  }

  const StoredSru* find_sru(std::string_view sru_tag) const {
    for (const auto& s : sru) {
      if (s.update.tag == sru_tag) return &s;
    }
    return nullptr;
  }
};

namespace detail {

using ordered_json = nlohmann::ordered_json;

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
  return v;
}

inline void append_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t{p[i]} << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline void append_f16_le(std::string& out, float f) {
  std::uint16_t bits = float_to_half(f);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
}

inline float read_f16_le(const unsigned char* p) {
  return half_to_float(static_cast<std::uint16_t>(p[0] | (std::uint16_t{p[1]} << 8)));
}

// Collects tensor bytes and manifest entries in one deterministic order.
class TensorWriter {
 public:
  void add(const std::string& name, const std::string& role,
           std::vector<std::uint64_t> shape, std::span<const float> values,
           std::size_t width = 4) {
    for (const auto& entry : index_) {
      if (entry["name"] == name) {
        throw config_error("checkpoint: tensor name collision on '" + name + "'");
      }
    }
    std::uint64_t count = 1;
    for (std::uint64_t s : shape) count *= s;
    if (count != values.size()) {
      throw config_error("checkpoint: tensor '" + name + "' shape does not cover its data");
    }
    ordered_json entry;
    entry["name"] = name;
    entry["role"] = role;
    entry["shape"] = shape;
    entry["width"] = width;
    entry["offset"] = payload_.size();
    index_.push_back(std::move(entry));
    if (width == 4) {
      for (float v : values) append_f32_le(payload_, v);
    } else if (width == 2) {
      for (float v : values) append_f16_le(payload_, v);
    } else {
      throw config_error("checkpoint: unsupported element width " + std::to_string(width));
    }
  }

  ordered_json index() const { return index_; }
  const std::string& payload() const { return payload_; }

 private:
  std::vector<ordered_json> index_;
  std::string payload_;
};

// Resolves names against the manifest and decodes payload slices.
class TensorReader {
 public:
  TensorReader(const ordered_json& index, std::string_view payload)
      : payload_(payload) {
    std::uint64_t cursor = 0;
    for (const auto& entry : index) {
      Entry e;
      e.name = entry.at("name").get<std::string>();
      e.role = entry.at("role").get<std::string>();
      e.shape = entry.at("shape").get<std::vector<std::uint64_t>>();
      e.width = entry.at("width").get<std::size_t>();
      e.offset = entry.at("offset").get<std::uint64_t>();
      if (e.width != 4 && e.width != 2) {
        throw layout_error("checkpoint: tensor '" + e.name + "' has unsupported width");
      }
      e.count = 1;
      for (std::uint64_t s : e.shape) e.count *= s;
      if (e.offset != cursor) {
        throw layout_error("checkpoint: tensor '" + e.name +
                           "' is not tightly packed (offset " + std::to_string(e.offset) +
                           ", expected " + std::to_string(cursor) + ")");
      }
      cursor = e.offset + e.count * e.width;
      if (cursor > payload_.size()) {
        throw truncation_error("checkpoint: tensor '" + e.name +
                               "' extends past the end of the payload");
      }
      if (!by_name_.emplace(e.name, entries_.size()).second) {
        throw layout_error("checkpoint: duplicate tensor '" + e.name + "'");
      }
      entries_.push_back(std::move(e));
    }
    if (cursor != payload_.size()) {
      throw layout_error("checkpoint: payload has " +
                         std::to_string(payload_.size() - cursor) + " unindexed bytes");
    }
  }

  std::vector<float> read(const std::string& name, std::vector<std::uint64_t> expect_shape) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) {
      throw layout_error("checkpoint: missing tensor '" + name + "'");
    }
    const Entry& e = entries_[it->second];
    if (e.shape != expect_shape) {
      throw layout_error("checkpoint: tensor '" + name + "' has unexpected shape");
    }
    return decode(e);
  }

  std::size_t width_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) {
      throw layout_error("checkpoint: missing tensor '" + name + "'");
    }
    return entries_[it->second].width;
  }

 private:
  struct Entry {
    std::string name, role;
    std::vector<std::uint64_t> shape;
    std::size_t width = 4;
    std::uint64_t offset = 0;
    std::uint64_t count = 0;
  };

  std::vector<float> decode(const Entry& e) const {
    std::vector<float> out(e.count);
    const auto* p = reinterpret_cast<const unsigned char*>(payload_.data()) + e.offset;
    for (std::uint64_t i = 0; i < e.count; ++i) {
      out[i] = e.width == 4 ? read_f32_le(p + 4 * i) : read_f16_le(p + 2 * i);
    }
    return out;
  }

  std::string_view payload_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  ckpt.model.validate();
  detail::TensorWriter tensors;
  const ModelConfig& config = ckpt.model.config;

  tensors.add("embedding", "embedding", {config.vocab_size, config.embed_dim},
              ckpt.model.embedding.flat());
  for (std::size_t l = 0; l < ckpt.model.layers.size(); ++l) {
    const auto& w = ckpt.model.layers[l];
    std::vector<std::uint64_t> shape{w.w_z.rows(), w.w_z.cols()};
    std::string base = "layer" + std::to_string(l) + ".";
    tensors.add(base + "w_z", "weight", shape, w.w_z.flat());
    tensors.add(base + "w_f", "weight", shape, w.w_f.flat());
    tensors.add(base + "w_o", "weight", shape, w.w_o.flat());
  }
  if (ckpt.stats.has_value()) {
    for (std::size_t l = 0; l < ckpt.stats->mean_abs.size(); ++l) {
      std::vector<float> values(ckpt.stats->mean_abs[l].begin(), ckpt.stats->mean_abs[l].end());
      tensors.add("stats.layer" + std::to_string(l), "stats", {values.size()},
                  std::span<const float>(values));
    }
  }
  for (const StoredGates& g : ckpt.gates) {
    for (std::size_t l = 0; l < g.log_alpha.size(); ++l) {
      tensors.add("gates." + g.tag + ".layer" + std::to_string(l), "gates",
                  {g.log_alpha[l].size()}, std::span<const float>(g.log_alpha[l]));
    }
  }
  for (const StoredSru& s : ckpt.sru) {
    for (std::size_t l = 0; l < s.update.layers.size(); ++l) {
      const auto& layer = s.update.layers[l];
      std::string base = "sru." + s.update.tag + ".layer" + std::to_string(l) + ".";
      const std::pair<const char*, const typename SruUpdate<float>::Factors*> gates_of[] = {
          {"z", &layer.z}, {"f", &layer.f}, {"o", &layer.o}};
      for (auto [gname, factors] : gates_of) {
        tensors.add(base + gname + ".u", "sru", {factors->u.size()},
                    std::span<const float>(factors->u), s.element_width);
        tensors.add(base + gname + ".v", "sru", {factors->v.size()},
                    std::span<const float>(factors->v), s.element_width);
      }
    }
  }

  detail::ordered_json manifest;
  manifest["config"] = {{"vocab_size", config.vocab_size},
                        {"embed_dim", config.embed_dim},
                        {"hidden_sizes", config.hidden_sizes},
                        {"window_sizes", config.window_sizes}};
  manifest["tag"] = ckpt.tag;
  manifest["flops_fraction"] = ckpt.flops_fraction;
  manifest["base_flops_per_token"] = ckpt.base_flops_per_token;
  manifest["vocab_sha256"] =
      ckpt.vocab_sha256.has_value() ? detail::ordered_json(*ckpt.vocab_sha256)
                                    : detail::ordered_json(nullptr);
  manifest["mask"] = {{"kept", ckpt.mask.kept}, {"sha256", ckpt.mask.sha256()}};
  manifest["stats"] = ckpt.stats.has_value()
                          ? detail::ordered_json{{"tokens", ckpt.stats->tokens}}
                          : detail::ordered_json(nullptr);
  manifest["gates"] = detail::ordered_json::array();
  for (const StoredGates& g : ckpt.gates) {
    manifest["gates"].push_back({{"tag", g.tag}, {"lambda", g.lambda}});
  }
  manifest["sru"] = detail::ordered_json::array();
  for (const StoredSru& s : ckpt.sru) {
    manifest["sru"].push_back({{"tag", s.update.tag},
                               {"mask_sha256", s.update.mask_sha256},
                               {"flops_fraction", s.update.flops_fraction},
                               {"element_width", s.element_width}});
  }
  manifest["tensors"] = tensors.index();

  std::string manifest_text = manifest.dump();
  std::string file;
  file.reserve(13 + manifest_text.size() + tensors.payload().size());
  file.append(kCheckpointMagic, 4);
  file.push_back(static_cast<char>(kCheckpointVersion));
  detail::append_u64_le(file, manifest_text.size());
  file += manifest_text;
  file += tensors.payload();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write checkpoint " + path.string());
  out.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!out) throw data_error("short write on checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read checkpoint " + path.string());
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (file.size() < 4 || std::memcmp(file.data(), kCheckpointMagic, 4) != 0) {
    throw format_error("checkpoint " + path.string() + ": bad magic (not a .qz file)");
  }
  if (file.size() < 13) {
    throw truncation_error("checkpoint " + path.string() + ": header cut short");
  }
  std::uint8_t version = static_cast<std::uint8_t>(file[4]);
  if (version != kCheckpointVersion) {
    throw format_error("checkpoint " + path.string() + ": unsupported format version " +
                       std::to_string(version));
  }
  std::uint64_t manifest_len =
      detail::read_u64_le(reinterpret_cast<const unsigned char*>(file.data()) + 5);
  if (13 + manifest_len > file.size()) {
    throw truncation_error("checkpoint " + path.string() + ": manifest cut short");
  }
  detail::ordered_json manifest;
  try {
    manifest = detail::ordered_json::parse(file.substr(13, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw format_error("checkpoint " + path.string() + ": manifest is not valid JSON (" +
                       e.what() + ")");
  }
  std::string_view payload(file.data() + 13 + manifest_len,
                           file.size() - 13 - manifest_len);

  Checkpoint ckpt;
  try {
    const auto& jc = manifest.at("config");
    ModelConfig config;
    config.vocab_size = jc.at("vocab_size").get<std::size_t>();
    config.embed_dim = jc.at("embed_dim").get<std::size_t>();
    config.hidden_sizes = jc.at("hidden_sizes").get<std::vector<std::size_t>>();
    config.window_sizes = jc.at("window_sizes").get<std::vector<std::size_t>>();
    try {
      config.validate();
    } catch (const config_error& e) {
      throw layout_error("checkpoint " + path.string() + ": invalid model config: " + e.what());
    }

    detail::TensorReader tensors(manifest.at("tensors"), payload);

    ckpt.model.config = config;
    {
      std::vector<float> emb = tensors.read("embedding", {config.vocab_size, config.embed_dim});
      ckpt.model.embedding = Matrix<float>(config.vocab_size, config.embed_dim);
      std::copy(emb.begin(), emb.end(), ckpt.model.embedding.data());
    }
    for (std::size_t l = 0; l < config.num_layers(); ++l) {
      std::size_t m = config.hidden_sizes[l];
      std::size_t s = config.layer_stacked_dim(l);
      std::string base = "layer" + std::to_string(l) + ".";
      QrnnLayerWeights<float> w{Matrix<float>(m, s), Matrix<float>(m, s), Matrix<float>(m, s)};
      const std::pair<const char*, Matrix<float>*> names[] = {
          {"w_z", &w.w_z}, {"w_f", &w.w_f}, {"w_o", &w.w_o}};
      for (auto [suffix, target] : names) {
        std::vector<float> vals = tensors.read(base + suffix, {m, s});
        std::copy(vals.begin(), vals.end(), target->data());
      }
      ckpt.model.layers.push_back(std::move(w));
    }
    ckpt.model.validate();

    ckpt.tag = manifest.at("tag").get<std::string>();
    ckpt.flops_fraction = manifest.at("flops_fraction").get<double>();
    ckpt.base_flops_per_token = manifest.at("base_flops_per_token").get<std::uint64_t>();
    if (!manifest.at("vocab_sha256").is_null()) {
      ckpt.vocab_sha256 = manifest.at("vocab_sha256").get<std::string>();
    }

    const auto& jm = manifest.at("mask");
    ckpt.mask.kept = jm.at("kept").get<std::vector<std::vector<std::uint32_t>>>();
    if (ckpt.mask.kept.size() != config.num_layers()) {
      throw layout_error("checkpoint: mask layer count mismatch");
    }
    for (std::size_t l = 0; l < ckpt.mask.kept.size(); ++l) {
      const auto& k = ckpt.mask.kept[l];
      if (k.size() != config.hidden_sizes[l] ||
          !std::is_sorted(k.begin(), k.end()) ||
          std::adjacent_find(k.begin(), k.end()) != k.end()) {
        throw layout_error("checkpoint: mask for layer " + std::to_string(l) +
                           " is inconsistent with the stored model");
      }
    }
    if (jm.at("sha256").get<std::string>() != ckpt.mask.sha256()) {
      throw layout_error("checkpoint: mask checksum mismatch");
    }

    if (!manifest.at("stats").is_null()) {
      ActivationStats stats;
      stats.tokens = manifest.at("stats").at("tokens").get<std::uint64_t>();
      for (std::size_t l = 0; l < config.num_layers(); ++l) {
        std::vector<float> vals = tensors.read("stats.layer" + std::to_string(l),
                                               {config.hidden_sizes[l]});
        stats.mean_abs.emplace_back(vals.begin(), vals.end());
      }
      ckpt.stats = std::move(stats);
    }

    for (const auto& jg : manifest.at("gates")) {
      StoredGates g;
      g.tag = jg.at("tag").get<std::string>();
      g.lambda = jg.at("lambda").get<float>();
      for (std::size_t l = 0; l + 1 < config.num_layers(); ++l) {
        g.log_alpha.push_back(tensors.read("gates." + g.tag + ".layer" + std::to_string(l),
                                           {config.hidden_sizes[l]}));
      }
      ckpt.gates.push_back(std::move(g));
    }

    for (const auto& js : manifest.at("sru")) {
      StoredSru s;
      s.update.tag = js.at("tag").get<std::string>();
      s.update.mask_sha256 = js.at("mask_sha256").get<std::string>();
      s.update.flops_fraction = js.at("flops_fraction").get<double>();
      s.element_width = js.at("element_width").get<std::size_t>();
      for (std::size_t l = 0; l < config.num_layers(); ++l) {
        std::size_t m = config.hidden_sizes[l];
        std::size_t w = config.layer_stacked_dim(l);
        std::string base = "sru." + s.update.tag + ".layer" + std::to_string(l) + ".";
        typename SruUpdate<float>::Layer layer;
        const std::pair<const char*, typename SruUpdate<float>::Factors*> gates_of[] = {
            {"z", &layer.z}, {"f", &layer.f}, {"o", &layer.o}};
        for (auto [gname, factors] : gates_of) {
          factors->u = tensors.read(base + gname + ".u", {m});
          factors->v = tensors.read(base + gname + ".v", {w});
        }
        s.update.layers.push_back(std::move(layer));
      }
      try {
        s.update.validate_shapes(config);
      } catch (const shape_error& e) {
        throw layout_error("checkpoint " + path.string() + ": " + e.what());
      }
      ckpt.sru.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error("checkpoint " + path.string() + ": manifest field error (" +
                       e.what() + ")");
  }
  return ckpt;
}

}  // namespace qzlm
