#include "ims/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "ims/errors.hpp"

namespace ims {

namespace {

using nlohmann::json;

json spec_to_json(const ModelSpec& spec) {
  json convs = json::array();
  for (const auto& c : spec.convs) {
    convs.push_back({{"out_channels", c.out_channels},
                     {"kernel", c.kernel},
                     {"padding", c.padding == ops::Padding::same ? "same" : "valid"},
                     {"pool_after", c.pool_after}});
  }
  return {{"in_channels", spec.in_channels},
          {"height", spec.height},
          {"width", spec.width},
          {"convs", convs},
          {"hidden_width", spec.hidden_width},
          {"num_classes", spec.num_classes}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.in_channels = j.at("in_channels").get<std::int64_t>();
  spec.height = j.at("height").get<std::int64_t>();
  spec.width = j.at("width").get<std::int64_t>();
  spec.hidden_width = j.at("hidden_width").get<std::int64_t>();
  spec.num_classes = j.at("num_classes").get<std::int64_t>();
  spec.convs.clear();
  for (const auto& c : j.at("convs")) {
    ModelSpec::ConvLayer layer;
    layer.out_channels = c.at("out_channels").get<std::int64_t>();
    layer.kernel = c.at("kernel").get<std::int64_t>();
    const std::string pad = c.at("padding").get<std::string>();
    if (pad == "same") {
      layer.padding = ops::Padding::same;
    } else if (pad == "valid") {
      layer.padding = ops::Padding::valid;
    } else {
      throw LoadError(LoadError::Kind::manifest,
                      "unknown padding '" + pad + "' in checkpoint manifest");
    }
    layer.pool_after = c.at("pool_after").get<bool>();
    spec.convs.push_back(layer);
  }
  return spec;
}

void write_f32_le(std::ofstream& out, std::span<const float> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xff);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

std::vector<float> read_f32_le(const std::vector<unsigned char>& buf) {
  std::vector<float> values(buf.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i + 0]) |
                               (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    std::memcpy(&values[i], &bits, 4);
  }
  return values;
}

}  // namespace

void save_checkpoint(const MaskableModel<float>& model, const std::string& base,
                     const std::vector<std::vector<float>>* activation_scales) {
  const auto params = model.named_parameters();

  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["endianness"] = "little";
  manifest["model"] = spec_to_json(model.spec());
  json plist = json::array();
  for (const auto& [name, p] : params) {
    plist.push_back({{"name", name}, {"shape", p.shape()}});
  }
  manifest["parameters"] = plist;
  if (activation_scales != nullptr) {
    if (static_cast<std::int64_t>(activation_scales->size()) !=
        model.conv_layer_count()) {
      throw ArgumentError("save_checkpoint: scale vector count does not match "
                          "conv layer count");
    }
    manifest["activation_scales"] = *activation_scales;
  }

  {
    std::ofstream mf(base + ".manifest.json");
    if (!mf) {
      throw LoadError(LoadError::Kind::io, "cannot write " + base + ".manifest.json");
    }
    mf << manifest.dump(2) << '\n';
  }
  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) {
    throw LoadError(LoadError::Kind::io, "cannot write " + base + ".bin");
  }
  for (const auto& [name, p] : params) {
    write_f32_le(bf, p.values());
  }
}

LoadedCheckpoint load_checkpoint(const std::string& base) {
  std::ifstream mf(base + ".manifest.json");
  if (!mf) {
    throw LoadError(LoadError::Kind::io, "cannot open " + base + ".manifest.json");
  }
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw LoadError(LoadError::Kind::manifest,
                    "malformed checkpoint manifest: " + std::string(e.what()));
  }

  const std::string format = manifest.value("format", "");
  if (format != kCheckpointFormat) {
    throw LoadError(LoadError::Kind::version,
                    "unsupported checkpoint format '" + format + "', expected '" +
                        std::string(kCheckpointFormat) + "'");
  }
  const std::string endian = manifest.value("endianness", "");
  if (endian != "little") {
    throw LoadError(LoadError::Kind::version,
                    "unsupported endianness tag '" + endian + "'");
  }

  ModelSpec spec;
  try {
    spec = spec_from_json(manifest.at("model"));
  } catch (const json::exception& e) {
    throw LoadError(LoadError::Kind::manifest,
                    "bad model section in manifest: " + std::string(e.what()));
  }

  // Seed irrelevant: every parameter is overwritten below.
  LoadedCheckpoint out{MaskableModel<float>(spec, 0), {}};
  auto params = out.model.named_parameters();

  const json& plist = manifest.at("parameters");
  if (plist.size() != params.size()) {
    throw LoadError(LoadError::Kind::shape_mismatch,
                    "manifest lists " + std::to_string(plist.size()) +
                        " parameters, model spec derives " +
                        std::to_string(params.size()));
  }
  std::int64_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = plist[i].at("name").get<std::string>();
    const Shape shape = plist[i].at("shape").get<Shape>();
    if (name != params[i].first || shape != params[i].second.shape()) {
      throw LoadError(LoadError::Kind::shape_mismatch,
                      "manifest parameter '" + name + "' " + shape_str(shape) +
                          " disagrees with spec-derived '" + params[i].first +
                          "' " + shape_str(params[i].second.shape()));
    }
    total += shape_size(shape);
  }

  std::ifstream bf(base + ".bin", std::ios::binary);
  if (!bf) {
    throw LoadError(LoadError::Kind::io, "cannot open " + base + ".bin");
  }
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bf)),
                                     std::istreambuf_iterator<char>());
  if (static_cast<std::int64_t>(payload.size()) < total * 4) {
    throw LoadError(LoadError::Kind::truncated,
                    "payload holds " + std::to_string(payload.size() / 4) +
                        " values, manifest promises " + std::to_string(total));
  }
  if (static_cast<std::int64_t>(payload.size()) > total * 4) {
    throw LoadError(LoadError::Kind::shape_mismatch,
                    "payload holds " + std::to_string(payload.size() / 4) +
                        " values, manifest promises " + std::to_string(total));
  }
  const std::vector<float> values = read_f32_le(payload);

  std::size_t offset = 0;
  for (auto& [name, p] : params) {
    auto dst = p.values();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(offset),
              values.begin() + static_cast<std::ptrdiff_t>(offset + dst.size()),
              dst.begin());
    offset += dst.size();
  }

  if (manifest.contains("activation_scales")) {
    out.activation_scales =
        manifest.at("activation_scales").get<std::vector<std::vector<float>>>();
    if (static_cast<std::int64_t>(out.activation_scales.size()) !=
        out.model.conv_layer_count()) {
      throw LoadError(LoadError::Kind::shape_mismatch,
                      "activation scale count disagrees with conv layer count");
    }
    for (std::int64_t l = 0; l < out.model.conv_layer_count(); ++l) {
      if (static_cast<std::int64_t>(out.activation_scales[l].size()) !=
          out.model.out_channels(l)) {
        throw LoadError(LoadError::Kind::shape_mismatch,
                        "activation scale length disagrees with layer " +
                            std::to_string(l));
      }
    }
  }
  return out;
}

}  // namespace ims
