#include "kpal/model.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace kpal::model {

using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

std::string to_hex(const std::vector<float>& v) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(v.size() * 8);
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int byte = 0; byte < 4; ++byte) {  // little-endian byte order
      const std::uint8_t b = static_cast<std::uint8_t>(bits >> (8 * byte));
      out.push_back(digits[b >> 4]);
      out.push_back(digits[b & 0xF]);
    }
  }
  return out;
}

int hex_nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  throw CheckpointError("bad hex digit in checkpoint payload");
}

std::vector<float> from_hex(const std::string& s) {
  if (s.size() % 8 != 0)
    throw CheckpointError("hex payload length not a multiple of 8");
  std::vector<float> out(s.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int byte = 0; byte < 4; ++byte) {
      const std::size_t o = i * 8 + static_cast<std::size_t>(byte) * 2;
      const std::uint32_t b = static_cast<std::uint32_t>(
          (hex_nibble(s[o]) << 4) | hex_nibble(s[o + 1]));
      bits |= b << (8 * byte);
    }
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

json config_to_json(const ModelConfig& c) {
  return json{{"keypoints", c.keypoints},
              {"roi_channels", c.roi_channels},
              {"backbone_widths", c.backbone_widths},
              {"kp_tower_width", c.kp_tower_width},
              {"kp_fe_channels", c.kp_fe_channels},
              {"mask_width", c.mask_width},
              {"decoder_layers", c.decoder_layers},
              {"decoder_heads", c.decoder_heads},
              {"decoder_width", c.decoder_width},
              {"decoder_ffn", c.decoder_ffn},
              {"v3_value_channels", c.v3_value_channels}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.keypoints = j.at("keypoints");
  c.roi_channels = j.at("roi_channels");
  const auto widths = j.at("backbone_widths").get<std::vector<int>>();
  if (widths.size() != 4)
    throw CheckpointError("checkpoint backbone_widths must have 4 entries");
  std::copy(widths.begin(), widths.end(), c.backbone_widths.begin());
  c.kp_tower_width = j.at("kp_tower_width");
  c.kp_fe_channels = j.at("kp_fe_channels");
  c.mask_width = j.at("mask_width");
  c.decoder_layers = j.at("decoder_layers");
  c.decoder_heads = j.at("decoder_heads");
  c.decoder_width = j.at("decoder_width");
  c.decoder_ffn = j.at("decoder_ffn");
  c.v3_value_channels = j.at("v3_value_channels");
  return c;
}

json read_checkpoint_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw CheckpointError("unreadable checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("format_version") ||
      j.at("format_version").get<int>() != kCheckpointVersion)
    throw CheckpointError("checkpoint format version mismatch in " + path);
  return j;
}

void fill_params(ModelBundle<float>& m, const json& j,
                 const std::string& path) {
  std::size_t seen = 0;
  for (const auto& entry : j.at("params")) {
    const std::string name = entry.at("name");
    auto it = m.params.find(name);
    if (it == m.params.end())
      throw CheckpointError("unknown parameter '" + name + "' in " + path);
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != it->second.shape)
      throw CheckpointError("shape mismatch for '" + name + "' in " + path);
    const auto vals = from_hex(entry.at("data_hex").get<std::string>());
    if (vals.size() != it->second.numel())
      throw CheckpointError("payload size mismatch for '" + name + "' in " +
                            path);
    std::copy(vals.begin(), vals.end(), it->second.data->begin());
    ++seen;
  }
  if (seen != m.params.size())
    throw CheckpointError("checkpoint " + path + " holds " +
                          std::to_string(seen) + " params, bundle expects " +
                          std::to_string(m.params.size()));
}

}  // namespace

void save_checkpoint(const ModelBundle<float>& m, const std::string& path) {
  json params = json::array();
  for (const auto& [name, t] : m.params)
    params.push_back(
        {{"name", name}, {"shape", t.shape}, {"data_hex", to_hex(*t.data)}});
  json j{{"format_version", kCheckpointVersion},
         {"variant_id", variant_name(m.variant)},
         {"ttg_enabled", m.ttg_enabled},
         {"fe_boundary", m.fe_prefix},
         {"config", config_to_json(m.config)},
         {"params", std::move(params)}};
  std::ofstream os(path);
  if (!os) throw CheckpointError("cannot write checkpoint: " + path);
  os << j.dump() << "\n";
}

ModelBundle<float> load_checkpoint(const std::string& path) {
  const json j = read_checkpoint_json(path);
  Rng rng(0);  // values are overwritten below
  ModelBundle<float> m = make_model<float>(
      variant_from_name(j.at("variant_id")), j.at("ttg_enabled").get<bool>(),
      config_from_json(j.at("config")), rng);
  m.fe_prefix = j.at("fe_boundary");
  fill_params(m, j, path);
  return m;
}

void load_checkpoint(ModelBundle<float>& m, const std::string& path) {
  const json j = read_checkpoint_json(path);
  const Variant v = variant_from_name(j.at("variant_id"));
  if (v != m.variant)
    throw CheckpointError("checkpoint variant " + variant_name(v) +
                          " does not match bundle variant " +
                          variant_name(m.variant));
  if (j.at("ttg_enabled").get<bool>() != m.ttg_enabled)
    throw CheckpointError("checkpoint ttg flag does not match bundle");
  m.fe_prefix = j.at("fe_boundary");
  fill_params(m, j, path);
}

}  // namespace kpal::model
