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

// On-disk activation records and batched, streamed access to them.
//
// A layer file ("PSCA", version 1) holds the activations of one layer for N
// samples followed by their class labels:
//
//   "PSCA" | u32 version | u32 layer_id | u8 kind (0=conv, 1=fc)
//   | u8 dtype (0=f32) | u32 ndim | u64 dims[ndim] | f32 payload | u16 labels[N]
//
// All integers and floats are little-endian. Conv dims are (N, C, h, w), fc
// dims are (N, d). The payload is row-major, so channel c of a conv sample
// occupies h*w consecutive floats with element (i, j) at offset i*w + j.
//
// A dataset manifest is a JSON document
//   {"split", "class_count", "name", "layers": [{"path", "layer_id", "sha256"}]}
// listing one file per layer in depth order. Relative paths are resolved
// against the manifest's directory.

#ifndef PSC_ACTIVATION_STORE_H_
#define PSC_ACTIVATION_STORE_H_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psc/common.h"

namespace psc {

inline constexpr std::string_view kActivationMagic = "PSCA";
inline constexpr std::uint32_t kActivationFormatVersion = 1;

enum class LayerKind : std::uint8_t { kConv = 0, kFc = 1 };

struct LayerRecordHeader {
  std::uint32_t layer_id = 0;
  LayerKind kind = LayerKind::kFc;
  // conv: N, C, h, w. fc: N, d.
  std::vector<std::uint64_t> dims;

  static LayerRecordHeader conv(std::uint32_t layer_id, std::uint64_t n,
                                std::uint64_t channels, std::uint64_t height,
                                std::uint64_t width);
  static LayerRecordHeader fc(std::uint32_t layer_id, std::uint64_t n,
                              std::uint64_t width);

  std::uint64_t sample_count() const { return dims.at(0); }
  // Floats per sample.
  std::uint64_t feature_size() const;
  // conv: C. fc: 1 (a fully connected output is one channel).
  std::uint64_t channels() const;
  // conv: h*w. fc: d.
  std::uint64_t spatial_size() const;

  std::uint64_t payload_offset() const;
  std::uint64_t label_offset() const;
  std::uint64_t file_size() const;

  // Throws ValidationError if dims do not describe a valid record.
  void validate() const;
};

// One contiguous slice of a layer's samples.
struct ActivationBatch {
  std::uint32_t layer_id = 0;
  LayerKind kind = LayerKind::kFc;
  // Per-sample shape, i.e. header dims without N.
  std::vector<std::uint64_t> sample_shape;
  // Index of the first row within the dataset.
  std::uint64_t first_index = 0;
  RowMatrixXf values;  // B x feature_size
  std::vector<int> labels;

  std::int64_t size() const { return values.rows(); }
  std::uint64_t channels() const;
  std::uint64_t spatial_size() const;
};

// Writes values (N x feature_size, row-major) and labels. Returns the sha256
// of the written file as lowercase hex.
std::string write_layer_file(const std::filesystem::path& path,
                             const LayerRecordHeader& header,
                             std::span<const float> values,
                             std::span<const int> labels);

LayerRecordHeader read_layer_header(const std::filesystem::path& path);

struct LayerData {
  LayerRecordHeader header;
  std::vector<float> values;
  std::vector<int> labels;
};

LayerData read_layer_file(const std::filesystem::path& path);

std::string sha256_file(const std::filesystem::path& path);

enum class Split { kTrain, kVal, kTest, kOod };

std::string to_string(Split split);
Split split_from_string(const std::string& text);

struct ManifestLayer {
  std::string path;
  std::uint32_t layer_id = 0;
  std::string sha256;
};

struct DatasetManifest {
  Split split = Split::kTrain;
  int class_count = 0;
  std::string name;
  std::vector<ManifestLayer> layers;
  // Directory relative paths are resolved against; set by load_manifest.
  std::filesystem::path base_dir;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path,
                   const DatasetManifest& manifest);

class ActivationDataset;

// Sequential reader over one or more layers in lockstep. Every call to next()
// returns the same sample range for each requested layer.
class BatchStream {
 public:
  BatchStream(const ActivationDataset& dataset,
              std::span<const std::uint32_t> layer_ids,
              std::uint64_t batch_size);
  ~BatchStream();
  BatchStream(BatchStream&&) noexcept;
  BatchStream& operator=(BatchStream&&) noexcept;

  // Empty once all samples have been produced.
  std::optional<std::vector<ActivationBatch>> next();

 private:
  struct State;
  std::unique_ptr<State> state_;
};

class ActivationDataset {
 public:
  struct Layer {
    std::uint32_t layer_id;
    std::filesystem::path path;
    LayerRecordHeader header;
  };

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<std::uint32_t> layer_ids() const;
  const Layer& layer(std::uint32_t layer_id) const;
  bool has_layer(std::uint32_t layer_id) const;

  std::uint64_t sample_count() const { return sample_count_; }
  int class_count() const { return class_count_; }
  Split split() const { return split_; }
  const std::string& name() const { return name_; }
  const std::vector<int>& labels() const { return labels_; }

  BatchStream read_batches(std::uint32_t layer_id,
                           std::uint64_t batch_size) const;
  BatchStream read_batches(std::span<const std::uint32_t> layer_ids,
                           std::uint64_t batch_size) const;

  // Whole layer as a single batch.
  ActivationBatch read_layer(std::uint32_t layer_id) const;

 private:
  friend ActivationDataset open_dataset(const DatasetManifest& manifest);

  std::vector<Layer> layers_;
  std::uint64_t sample_count_ = 0;
  int class_count_ = 0;
  Split split_ = Split::kTrain;
  std::string name_;
  std::vector<int> labels_;
};

// Validates every referenced file (checksum, header, sample count, labels).
ActivationDataset open_dataset(const DatasetManifest& manifest);
ActivationDataset open_dataset(const std::filesystem::path& manifest_path);

}  // namespace psc

#endif  // PSC_ACTIVATION_STORE_H_
