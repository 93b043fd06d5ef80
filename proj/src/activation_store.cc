// Copyright 2026 The PSC Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "psc/activation_store.h"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "binary_io.h"
#include "json.hpp"

namespace psc {
namespace {

namespace fs = std::filesystem;

constexpr std::uint8_t kDtypeF32 = 0;

// magic + version + layer_id + kind + dtype + ndim
constexpr std::uint64_t kFixedHeaderBytes = 4 + 4 + 4 + 1 + 1 + 4;

std::uint64_t product(std::span<const std::uint64_t> dims) {
  std::uint64_t p = 1;
  for (auto d : dims) p *= d;
  return p;
}

}  // namespace

LayerRecordHeader LayerRecordHeader::conv(std::uint32_t layer_id,
                                          std::uint64_t n,
                                          std::uint64_t channels,
                                          std::uint64_t height,
                                          std::uint64_t width) {
  return {layer_id, LayerKind::kConv, {n, channels, height, width}};
}

LayerRecordHeader LayerRecordHeader::fc(std::uint32_t layer_id,
                                        std::uint64_t n, std::uint64_t width) {
  return {layer_id, LayerKind::kFc, {n, width}};
}

std::uint64_t LayerRecordHeader::feature_size() const {
  return product(std::span(dims).subspan(1));
}

std::uint64_t LayerRecordHeader::channels() const {
  return kind == LayerKind::kConv ? dims.at(1) : 1;
}

std::uint64_t LayerRecordHeader::spatial_size() const {
  return kind == LayerKind::kConv ? dims.at(2) * dims.at(3) : dims.at(1);
}

std::uint64_t LayerRecordHeader::payload_offset() const {
  return kFixedHeaderBytes + 8 * dims.size();
}

std::uint64_t LayerRecordHeader::label_offset() const {
  return payload_offset() + 4 * sample_count() * feature_size();
}

std::uint64_t LayerRecordHeader::file_size() const {
  return label_offset() + 2 * sample_count();
}

void LayerRecordHeader::validate() const {
  const std::size_t expected = kind == LayerKind::kConv ? 4 : 2;
  if (dims.size() != expected) {
    throw ValidationError("layer " + std::to_string(layer_id) + ": expected " +
                          std::to_string(expected) + " dims, got " +
                          std::to_string(dims.size()));
  }
  for (auto d : dims) {
    if (d == 0) {
      throw ValidationError("layer " + std::to_string(layer_id) +
                            ": zero-sized dimension");
    }
  }
}

std::uint64_t ActivationBatch::channels() const {
  return kind == LayerKind::kConv ? sample_shape.at(0) : 1;
}

std::uint64_t ActivationBatch::spatial_size() const {
  return kind == LayerKind::kConv ? sample_shape.at(1) * sample_shape.at(2)
                                  : sample_shape.at(0);
}

std::string write_layer_file(const fs::path& path,
                             const LayerRecordHeader& header,
                             std::span<const float> values,
                             std::span<const int> labels) {
  header.validate();
  const std::uint64_t n = header.sample_count();
  if (values.size() != n * header.feature_size()) {
    throw ValidationError("shape mismatch: header describes " +
                          std::to_string(n * header.feature_size()) +
                          " values, got " + std::to_string(values.size()));
  }
  if (labels.size() != n) {
    throw ValidationError("label count mismatch: expected " +
                          std::to_string(n) + ", got " +
                          std::to_string(labels.size()));
  }
  std::vector<std::uint16_t> packed(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 65535) {
      throw ValidationError("label out of range [0, 65535] at sample " +
                            std::to_string(i));
    }
    packed[i] = static_cast<std::uint16_t>(labels[i]);
  }

  io::Writer out(path);
  out.magic(kActivationMagic);
  out.put<std::uint32_t>(kActivationFormatVersion);
  out.put<std::uint32_t>(header.layer_id);
  out.put<std::uint8_t>(static_cast<std::uint8_t>(header.kind));
  out.put<std::uint8_t>(kDtypeF32);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(header.dims.size()));
  for (auto d : header.dims) out.put<std::uint64_t>(d);
  out.put_array(values.data(), values.size());
  out.put_array(packed.data(), packed.size());
  out.close();
  return sha256_file(path);
}

namespace {

LayerRecordHeader parse_header(io::Reader& in) {
  in.expect_magic(kActivationMagic);
  const auto version = in.get<std::uint32_t>();
  if (version != kActivationFormatVersion) {
    throw ValidationError(in.path().string() + ": unsupported version " +
                          std::to_string(version));
  }
  LayerRecordHeader header;
  header.layer_id = in.get<std::uint32_t>();
  const auto kind = in.get<std::uint8_t>();
  if (kind > 1) {
    throw ValidationError(in.path().string() + ": unknown layer kind " +
                          std::to_string(kind));
  }
  header.kind = static_cast<LayerKind>(kind);
  const auto dtype = in.get<std::uint8_t>();
  if (dtype != kDtypeF32) {
    throw ValidationError(in.path().string() + ": unsupported dtype " +
                          std::to_string(dtype));
  }
  const auto ndim = in.get<std::uint32_t>();
  if (ndim > 8) {
    throw ValidationError(in.path().string() + ": implausible ndim " +
                          std::to_string(ndim));
  }
  header.dims.resize(ndim);
  for (auto& d : header.dims) d = in.get<std::uint64_t>();
  header.validate();
  return header;
}

}  // namespace

LayerRecordHeader read_layer_header(const fs::path& path) {
  io::Reader in(path);
  LayerRecordHeader header = parse_header(in);
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec || size != header.file_size()) {
    throw ValidationError(path.string() + ": payload length does not match " +
                          "header (expected " +
                          std::to_string(header.file_size()) + " bytes)");
  }
  return header;
}

namespace {

std::vector<int> read_labels(io::Reader& in, const LayerRecordHeader& header,
                             std::uint64_t first, std::uint64_t count) {
  std::vector<std::uint16_t> packed(count);
  in.seek(header.label_offset() + 2 * first);
  in.get_array(packed.data(), count);
  return {packed.begin(), packed.end()};
}

}  // namespace

LayerData read_layer_file(const fs::path& path) {
  LayerData data;
  data.header = read_layer_header(path);
  io::Reader in(path);
  const std::uint64_t n = data.header.sample_count();
  data.values.resize(n * data.header.feature_size());
  in.seek(data.header.payload_offset());
  in.get_array(data.values.data(), data.values.size());
  data.labels = read_labels(in, data.header, 0, n);
  return data;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                              EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw ComputeError("sha256 initialisation failed");
  }
  std::vector<char> buffer(1 << 16);
  while (in) {
    in.read(buffer.data(), buffer.size());
    if (in.gcount() > 0) {
      EVP_DigestUpdate(ctx.get(), buffer.data(),
                       static_cast<std::size_t>(in.gcount()));
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &length);
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0')
        << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kOod: return "ood";
  }
  return "train";
}

Split split_from_string(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  if (text == "ood") return Split::kOod;
  throw ValidationError("unknown split \"" + text + "\"");
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest: " + path.string());
  DatasetManifest manifest;
  try {
    const nlohmann::json doc = nlohmann::json::parse(in);
    manifest.split = split_from_string(doc.at("split").get<std::string>());
    manifest.class_count = doc.at("class_count").get<int>();
    manifest.name = doc.value("name", "");
    for (const auto& entry : doc.at("layers")) {
      manifest.layers.push_back({entry.at("path").get<std::string>(),
                                 entry.at("layer_id").get<std::uint32_t>(),
                                 entry.value("sha256", "")});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed manifest: " + e.what());
  }
  manifest.base_dir = path.parent_path();
  return manifest;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  nlohmann::ordered_json doc;
  doc["split"] = to_string(manifest.split);
  doc["class_count"] = manifest.class_count;
  doc["name"] = manifest.name;
  doc["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : manifest.layers) {
    doc["layers"].push_back(
        {{"path", layer.path}, {"layer_id", layer.layer_id},
         {"sha256", layer.sha256}});
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest: " + path.string());
  out << doc.dump(2) << "\n";
}

ActivationDataset open_dataset(const DatasetManifest& manifest) {
  if (manifest.layers.empty()) throw ValidationError("no layers");
  if (manifest.class_count < 1) {
    throw ValidationError("class_count must be >= 1");
  }
  ActivationDataset dataset;
  dataset.class_count_ = manifest.class_count;
  dataset.split_ = manifest.split;
  dataset.name_ = manifest.name;

  for (std::size_t i = 0; i < manifest.layers.size(); ++i) {
    const ManifestLayer& entry = manifest.layers[i];
    if (i > 0 && entry.layer_id <= manifest.layers[i - 1].layer_id) {
      throw ValidationError("non-monotone layer ids");
    }
    fs::path path = entry.path;
    if (path.is_relative()) path = manifest.base_dir / path;
    if (!fs::exists(path)) {
      throw ValidationError("missing layer file: " + path.string());
    }
    if (!entry.sha256.empty() && sha256_file(path) != entry.sha256) {
      throw ValidationError("checksum mismatch: " + path.string());
    }
    LayerRecordHeader header = read_layer_header(path);
    if (header.layer_id != entry.layer_id) {
      throw ValidationError(path.string() + ": header layer_id " +
                            std::to_string(header.layer_id) +
                            " does not match manifest " +
                            std::to_string(entry.layer_id));
    }
    io::Reader in(path);
    std::vector<int> labels =
        read_labels(in, header, 0, header.sample_count());
    if (i == 0) {
      dataset.sample_count_ = header.sample_count();
      for (std::size_t s = 0; s < labels.size(); ++s) {
        if (labels[s] >= manifest.class_count) {
          throw ValidationError(path.string() + ": label " +
                                std::to_string(labels[s]) + " at sample " +
                                std::to_string(s) + " exceeds class_count");
        }
      }
      dataset.labels_ = std::move(labels);
    } else {
      if (header.sample_count() != dataset.sample_count_) {
        throw ValidationError("inconsistent sample count: " + path.string() +
                              " has " + std::to_string(header.sample_count()) +
                              ", expected " +
                              std::to_string(dataset.sample_count_));
      }
      if (labels != dataset.labels_) {
        throw ValidationError("inconsistent labels: " + path.string());
      }
    }
    dataset.layers_.push_back({entry.layer_id, path, std::move(header)});
  }
  return dataset;
}

ActivationDataset open_dataset(const fs::path& manifest_path) {
  return open_dataset(load_manifest(manifest_path));
}

std::vector<std::uint32_t> ActivationDataset::layer_ids() const {
  std::vector<std::uint32_t> ids;
  for (const auto& layer : layers_) ids.push_back(layer.layer_id);
  return ids;
}

bool ActivationDataset::has_layer(std::uint32_t layer_id) const {
  return std::any_of(layers_.begin(), layers_.end(),
                     [&](const Layer& l) { return l.layer_id == layer_id; });
}

const ActivationDataset::Layer& ActivationDataset::layer(
    std::uint32_t layer_id) const {
  for (const auto& layer : layers_) {
    if (layer.layer_id == layer_id) return layer;
  }
  throw ValidationError("unknown layer_id " + std::to_string(layer_id));
}

BatchStream ActivationDataset::read_batches(std::uint32_t layer_id,
                                            std::uint64_t batch_size) const {
  const std::uint32_t ids[] = {layer_id};
  return BatchStream(*this, ids, batch_size);
}

BatchStream ActivationDataset::read_batches(
    std::span<const std::uint32_t> layer_ids, std::uint64_t batch_size) const {
  return BatchStream(*this, layer_ids, batch_size);
}

ActivationBatch ActivationDataset::read_layer(std::uint32_t layer_id) const {
  auto stream = read_batches(layer_id, std::max<std::uint64_t>(1, sample_count_));
  auto batch = stream.next();
  return std::move(batch->front());
}

struct BatchStream::State {
  struct Source {
    const ActivationDataset::Layer* layer;
    io::Reader reader;
  };
  std::vector<Source> sources;
  const std::vector<int>* labels = nullptr;
  std::uint64_t batch_size = 0;
  std::uint64_t position = 0;
  std::uint64_t total = 0;
};

BatchStream::BatchStream(const ActivationDataset& dataset,
                         std::span<const std::uint32_t> layer_ids,
                         std::uint64_t batch_size)
    : state_(std::make_unique<State>()) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (layer_ids.empty()) throw ValidationError("no layers requested");
  state_->batch_size = batch_size;
  state_->total = dataset.sample_count();
  state_->labels = &dataset.labels();
  for (auto id : layer_ids) {
    const auto& layer = dataset.layer(id);
    state_->sources.push_back({&layer, io::Reader(layer.path)});
    state_->sources.back().reader.seek(layer.header.payload_offset());
  }
}

BatchStream::~BatchStream() = default;
BatchStream::BatchStream(BatchStream&&) noexcept = default;
BatchStream& BatchStream::operator=(BatchStream&&) noexcept = default;

std::optional<std::vector<ActivationBatch>> BatchStream::next() {
  State& s = *state_;
  if (s.position >= s.total) return std::nullopt;
  const std::uint64_t count = std::min(s.batch_size, s.total - s.position);
  std::vector<ActivationBatch> out;
  out.reserve(s.sources.size());
  for (auto& source : s.sources) {
    const LayerRecordHeader& header = source.layer->header;
    ActivationBatch batch;
    batch.layer_id = header.layer_id;
    batch.kind = header.kind;
    batch.sample_shape.assign(header.dims.begin() + 1, header.dims.end());
    batch.first_index = s.position;
    batch.values.resize(static_cast<Eigen::Index>(count),
                        static_cast<Eigen::Index>(header.feature_size()));
    source.reader.get_array(batch.values.data(),
                            static_cast<std::size_t>(batch.values.size()));
    batch.labels.assign(s.labels->begin() + s.position,
                        s.labels->begin() + s.position + count);
    out.push_back(std::move(batch));
  }
  s.position += count;
  return out;
}

}  // namespace psc
