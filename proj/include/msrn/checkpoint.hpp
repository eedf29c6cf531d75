#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "msrn/data.hpp"
#include "msrn/error.hpp"
#include "msrn/model.hpp"

namespace msrn {

inline nlohmann::json model_spec_to_json(const ModelSpec& s) {
  return {{"patch_size", s.patch_size},
          {"bands", s.bands},
          {"classes", s.classes},
          {"kernels", s.kernels},
          {"dropout", s.dropout}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.patch_size = j.at("patch_size").get<std::size_t>();
  s.bands = j.at("bands").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  s.kernels = j.at("kernels").get<std::size_t>();
  s.dropout = j.at("dropout").get<double>();
  s.validate();
  return s;
}

/// A trained model with everything needed to apply it to new data.
struct Checkpoint {
  MsrnModel model;
  std::optional<BandStats> standardization;
  nlohmann::json training = nlohmann::json::object();

  const ModelSpec& spec() const { return model.spec(); }
};

// Layout: "MSRN" u8 version=1 u32 LE header length, UTF-8 JSON header, then
// every tensor of the manifest as contiguous little-endian float64 values.
inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  const ModelParams& params = ckpt.model.params();
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  params.visit([&](const std::string& name, const Tensor& t, bool trainable) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"trainable", trainable}});
    offset += t.size() * sizeof(double);
  });
  const BatchNormState& bn = params.stem.bn;
  nlohmann::json header = {
      {"model", model_spec_to_json(ckpt.spec())},
      {"init", {{"scheme", "he_normal"}, {"weight_std", "sqrt(2/fan_in)"}, {"bias", 0.0}, {"bn_gamma", 1.0}, {"bn_beta", 0.0}}},
      {"batchnorm", {{"momentum", bn.momentum}, {"epsilon", bn.epsilon}, {"running_var", "unbiased"}}},
      {"standardization", ckpt.standardization ? band_stats_to_json(*ckpt.standardization) : nlohmann::json(nullptr)},
      {"training", ckpt.training},
      {"payload_bytes", offset},
      {"parameters", manifest}};
  const std::string text = header.dump();

  io::ByteWriter w;
  w.bytes("MSRN");
  w.u8(io::kVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  params.visit([&](const std::string&, const Tensor& t, bool) {
    for (double v : t.data()) w.f64(v);
  });
  return w.str();
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& what = "checkpoint") {
  io::ByteReader r(std::move(bytes), what);
  r.expect_magic("MSRN");
  io::check_version(r.u8(), what);
  const std::uint32_t header_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.take(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": invalid header JSON: " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.model = MsrnModel::skeleton(model_spec_from_json(header.at("model")));
    const double momentum = header.at("batchnorm").at("momentum").get<double>();
    const double epsilon = header.at("batchnorm").at("epsilon").get<double>();
    if (!header.at("standardization").is_null()) {
      ckpt.standardization = band_stats_from_json(header.at("standardization"));
    }
    ckpt.training = header.value("training", nlohmann::json::object());

    const auto& manifest = header.at("parameters");
    std::size_t index = 0;
    std::size_t offset = 0;
    ckpt.model.params().visit([&](const std::string& name, Tensor& t, bool) {
      if (index >= manifest.size()) throw FormatError(what + ": manifest is missing " + name);
      const auto& entry = manifest[index++];
      if (entry.at("name").get<std::string>() != name) {
        throw FormatError(what + ": manifest entry " + std::to_string(index - 1) + " is " +
                          entry.at("name").get<std::string>() + ", expected " + name);
      }
      if (entry.at("shape").get<Shape>() != t.shape()) {
        throw FormatError(what + ": " + name + " has shape " + shape_str(entry.at("shape").get<Shape>()) +
                          ", architecture expects " + shape_str(t.shape()));
      }
      if (entry.at("offset").get<std::size_t>() != offset) throw FormatError(what + ": bad offset for " + name);
      offset += t.size() * sizeof(double);
    });
    if (index != manifest.size()) throw FormatError(what + ": manifest has extra entries");
    if (r.remaining() < offset) {
      throw TruncatedError(what + ": payload holds " + std::to_string(r.remaining()) + " of " +
                           std::to_string(offset) + " bytes");
    }
    ckpt.model.params().visit([&](const std::string&, Tensor& t, bool) {
      for (double& v : t.data()) v = r.f64();
    });
    auto set_bn = [&](ConvBn& layer) {
      layer.bn.momentum = momentum;
      layer.bn.epsilon = epsilon;
      layer.bn.validate();
    };
    ModelParams& p = ckpt.model.params();
    set_bn(p.stem);
    for (auto& b : p.spectral.branches) set_bn(b);
    set_bn(p.spectral.fusion);
    set_bn(p.bridge_a);
    set_bn(p.bridge_b);
    for (auto& b : p.spatial.branches) set_bn(b);
    set_bn(p.spatial.fusion);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  if (ckpt.standardization && ckpt.standardization->mean.size() != ckpt.spec().bands) {
    throw FormatError(what + ": standardization statistics do not match the band count");
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// Throws DimensionMismatchError when the checkpoint cannot be applied to cube.
inline void check_compatible(const Checkpoint& ckpt, const HsiCube& cube) {
  if (ckpt.spec().bands != cube.bands) {
    throw DimensionMismatchError("checkpoint expects " + std::to_string(ckpt.spec().bands) + " bands, cube has " +
                                 std::to_string(cube.bands));
  }
}

/// The cube as the model sees it: standardized with the stored statistics
/// when present.
inline HsiCube prepare_cube(const Checkpoint& ckpt, const HsiCube& cube) {
  check_compatible(ckpt, cube);
  return ckpt.standardization ? standardize(cube, *ckpt.standardization) : cube;
}

}  // namespace msrn
