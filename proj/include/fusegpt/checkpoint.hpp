#pragma once

// Checkpoint format, bit-exact round trip:
//   magic "FGPT" | u32 version=1 | u64 metadata length | UTF-8 JSON metadata |
//   raw little-endian row-major parameter payloads in manifest order.
// Metadata carries the config, per-block slot annotations (fusion count,
// injection ranks, LoRA rank) and the ordered parameter manifest with byte
// offsets into the payload section.

#include <cstring>
#include <fstream>
#include <json.hpp>
#include <string>

#include "fusegpt/gpt.hpp"

namespace fusegpt {

using json = nlohmann::ordered_json;

constexpr char kCheckpointMagic[4] = {'F', 'G', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

inline json config_to_json(const GptConfig& cfg) {
  return json{{"n_blocks", cfg.n_blocks},     {"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},       {"d_ff", cfg.d_ff},
              {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len},
              {"norm_kind", cfg.norm_kind},   {"pos_kind", cfg.pos_kind},
              {"seed", cfg.seed},             {"coeff_init", "kaiming_uniform_fan_in"}};
}

inline GptConfig config_from_json(const json& j) {
  GptConfig cfg;
  cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
  cfg.d_model = j.at("d_model").get<std::size_t>();
  cfg.n_heads = j.at("n_heads").get<std::size_t>();
  cfg.d_ff = j.at("d_ff").get<std::size_t>();
  cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  cfg.norm_kind = j.at("norm_kind").get<std::string>();
  cfg.pos_kind = j.at("pos_kind").get<std::string>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

template <typename T>
void save_checkpoint(GptModel<T>& model, const std::string& path) {
  auto params = model.named_parameters();

  json meta;
  meta["config"] = config_to_json(model.config());
  meta["dtype"] = dtype_name<T>();

  json blocks = json::array();
  for (const auto& b : model.blocks()) {
    json slots;
    for (const auto& role : slot_roles()) {
      const auto& s = b.slot(role);
      json ranks = json::array();
      for (const auto& inj : s.injections) ranks.push_back(inj.rank);
      slots[role] = json{{"fusion_count", s.fusion_count()},
                         {"ranks", ranks},
                         {"lora_rank", s.lora ? s.lora->rank : 0}};
    }
    blocks.push_back(json{{"original_index", b.original_index}, {"slots", slots}});
  }
  meta["blocks"] = blocks;

  json manifest = json::array();
  std::uint64_t offset = 0;
  for (auto& [name, t] : params) {
    manifest.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += std::uint64_t(t.size()) * sizeof(T);
  }
  meta["params"] = manifest;

  const std::string meta_str = meta.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
  out.write(meta_str.data(), std::streamsize(meta_str.size()));
  for (auto& [name, t] : params)
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
  if (!out) throw IoError("write failure on checkpoint: " + path);
}

template <typename T>
GptModel<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint " + path + ": bad magic/version at offset 0 (expected FGPT)");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kCheckpointVersion)
    throw IoError("checkpoint " + path + ": unsupported version " + std::to_string(version) +
                  " at offset 4");
  std::uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
  if (!in) throw IoError("checkpoint " + path + ": truncated header at offset 8");
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), std::streamsize(meta_len));
  if (!in) throw IoError("checkpoint " + path + ": truncated metadata at offset 16");
  const std::uint64_t payload_base = 16 + meta_len;

  json meta;
  try {
    meta = json::parse(meta_str);
  } catch (const std::exception& e) {
    throw IoError("checkpoint " + path + ": metadata parse error: " + e.what());
  }
  if (meta.at("dtype").get<std::string>() != dtype_name<T>())
    throw IoError("checkpoint " + path + ": dtype " + meta.at("dtype").get<std::string>() +
                  " does not match this build (" + dtype_name<T>() + ")");

  // name -> (shape, offset)
  std::map<std::string, std::pair<Shape, std::uint64_t>> manifest;
  std::uint64_t expected_offset = 0;
  for (const auto& e : meta.at("params")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t off = e.at("offset").get<std::uint64_t>();
    if (off != expected_offset)
      throw IoError("checkpoint " + path + ": manifest offset mismatch for '" +
                    e.at("name").get<std::string>() + "' (offset " + std::to_string(off) + ")");
    manifest[e.at("name").get<std::string>()] = {shape, off};
    expected_offset += std::uint64_t(shape_numel(shape)) * sizeof(T);
  }

  auto read_tensor = [&](const std::string& name, const Shape& expect_shape) {
    auto it = manifest.find(name);
    if (it == manifest.end())
      throw IoError("checkpoint " + path + ": missing parameter '" + name + "'");
    const auto& [shape, off] = it->second;
    if (!expect_shape.empty() && shape != expect_shape)
      throw IoError("checkpoint " + path + ": parameter '" + name + "' has shape " +
                    shape_str(shape) + ", expected " + shape_str(expect_shape));
    Tensor<T> t{shape};
    in.seekg(std::streamoff(payload_base + off));
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
    if (!in)
      throw IoError("checkpoint " + path + ": truncated payload for '" + name + "' at offset " +
                    std::to_string(payload_base + off));
    return t;
  };

  GptConfig cfg = config_from_json(meta.at("config"));
  const auto& blocks_meta = meta.at("blocks");
  if (blocks_meta.size() != cfg.n_blocks)
    throw IoError("checkpoint " + path + ": block count " + std::to_string(blocks_meta.size()) +
                  " disagrees with config n_blocks " + std::to_string(cfg.n_blocks));

  GptModel<T> model;
  model.config() = cfg;
  model.tok_emb() = read_tensor("tok_emb", {cfg.vocab_size, cfg.d_model});
  model.pos_emb() = read_tensor("pos_emb", {cfg.max_seq_len, cfg.d_model});

  for (const auto& bm : blocks_meta) {
    TransformerBlock<T> b;
    b.original_index = bm.at("original_index").get<int>();
    const std::string prefix = "block" + std::to_string(b.original_index) + ".";
    b.norm1_gain = read_tensor(prefix + "norm1", {cfg.d_model});
    b.norm2_gain = read_tensor(prefix + "norm2", {cfg.d_model});
    for (const auto& role : slot_roles()) {
      const auto& sm = bm.at("slots").at(role);
      auto& slot = b.slot(role);
      slot.base = read_tensor(prefix + role + ".base", {});
      const std::size_t lora_rank = sm.at("lora_rank").get<std::size_t>();
      if (lora_rank > 0) {
        LoraAdapter<T> ad;
        ad.rank = lora_rank;
        ad.a = read_tensor(prefix + role + ".lora_a", {slot.in_dim(), lora_rank});
        ad.b = read_tensor(prefix + role + ".lora_b", {lora_rank, slot.out_dim()});
        slot.lora = std::move(ad);
      }
      const auto& ranks = sm.at("ranks");
      if (ranks.size() != sm.at("fusion_count").get<std::size_t>())
        throw IoError("checkpoint " + path + ": fusion_count/ranks mismatch for " + prefix + role);
      for (std::size_t f = 0; f < ranks.size(); ++f) {
        const std::string ip = prefix + role + ".inj" + std::to_string(f) + ".";
        Injection<T> inj;
        inj.rank = ranks[f].get<std::size_t>();
        inj.frozen = read_tensor(ip + "frozen", slot.base.shape());
        inj.left = read_tensor(ip + "left", {slot.in_dim(), inj.rank});
        inj.right = read_tensor(ip + "right", {inj.rank, slot.out_dim()});
        slot.injections.push_back(std::move(inj));
      }
    }
    model.append_block(std::move(b));
  }
  model.final_norm_gain() = read_tensor("final_norm", {cfg.d_model});
  model.head() = read_tensor("head", {cfg.d_model, cfg.vocab_size});
  model.config() = cfg;  // append_block touched n_blocks; restore the saved value
  return model;
}

}  // namespace fusegpt
