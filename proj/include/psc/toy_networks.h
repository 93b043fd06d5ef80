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

// Desk-scale networks for exercising the pipeline end to end: the 2-D sign
// task, a small residual MLP trained with Adam and cosine annealing, optional
// spectral-norm capping, and activation dumps in the PSCA format.

#ifndef PSC_TOY_NETWORKS_H_
#define PSC_TOY_NETWORKS_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psc/activation_store.h"
#include "psc/common.h"

namespace psc {

struct SignDatasetConfig {
  double sigma = 0.3;
  double flip_probability = 0.001;
  std::int64_t n_train = 3000;
  std::int64_t n_val = 1000;
  std::int64_t n_test = 1000;
  std::uint64_t seed = 0;
};

struct LabeledPoints {
  RowMatrixXd x;  // N x 2
  std::vector<int> labels;
};

// x ~ N(0, sigma^2 I), y = [x_1 > 0] xor flip.
LabeledPoints sample_sign_points(std::int64_t count, double sigma,
                                 double flip_probability, std::uint64_t seed);

struct SignDataset {
  LabeledPoints train;
  LabeledPoints val;
  LabeledPoints test;
};

// Train, val and test come from independent streams derived from config.seed.
SignDataset generate_sign_dataset(const SignDatasetConfig& config);

struct MlpSpec {
  std::int64_t input_dim = 2;
  std::vector<std::int64_t> hidden = {4, 2, 2, 2, 2};
  std::int64_t output_dim = 2;
  double negative_slope = 0.01;
  std::optional<double> sn_bound;
};

struct TrainConfig {
  int epochs = 350;
  double lr_start = 3e-2;
  double lr_end = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 1e-5;
  std::int64_t batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
  bool activation = true;
  // Adds the layer input to its output; set when in and out widths agree.
  bool residual = false;
};

struct MlpGradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;
};

class Mlp {
 public:
  Mlp() = default;
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
  Mlp(const MlpSpec& spec, std::uint64_t seed);
  Mlp(std::vector<DenseLayer> layers, double negative_slope);

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  double negative_slope() const { return negative_slope_; }

  RowMatrixXd logits(const Eigen::Ref<const RowMatrixXd>& x) const;

  // The input, the output of every hidden layer (after the nonlinearity and
  // residual add), then the logits. Entry k has layer_id k.
  std::vector<RowMatrixXd> forward_collect(
      const Eigen::Ref<const RowMatrixXd>& x) const;

  // Mean cross-entropy and its gradient.
  double loss_and_gradient(const Eigen::Ref<const RowMatrixXd>& x,
                           std::span<const int> labels,
                           MlpGradients* gradients) const;

  double accuracy(const LabeledPoints& data) const;

 private:
  std::vector<DenseLayer> layers_;
  double negative_slope_ = 0.01;
};

// Largest singular value by power iteration from a fixed-seed start vector.
// Throws ComputeError if the relative change does not drop below tolerance.
double spectral_norm_of(const Eigen::Ref<const Eigen::MatrixXd>& weight,
                        double tolerance = 1e-6, int max_iterations = 10000,
                        std::uint64_t seed = 0x5eed);

struct TrainResult {
  Mlp network;
  double final_loss = 0.0;
  double val_accuracy = 0.0;
};

// Adam with coupled L2 weight decay and per-epoch cosine annealing. With an
// sn_bound every weight matrix is rescaled by min(1, bound / sigma_max) after
// each step. Throws ComputeError when the loss becomes non-finite.
TrainResult train_mlp(const MlpSpec& spec, const TrainConfig& config,
                      const LabeledPoints& train, const LabeledPoints& val);

// Writes one fc PSCA file per layer under dir/<split>/ and the manifest at
// dir/<split>.json. Returns the manifest.
DatasetManifest dump_activations(const Mlp& network, const LabeledPoints& data,
                                 const std::filesystem::path& dir, Split split,
                                 const std::string& name, int class_count = 2);

// Mean distance per layer between the representations of x and x + delta e_2.
std::vector<double> perturbation_distances(const Mlp& network,
                                           const Eigen::Ref<const RowMatrixXd>& x,
                                           double delta);

// For one reference point: its representation, the irrelevant perturbation
// (x + delta e_2) and the relevant one (x_1 -> -x_1), each projected onto the
// top two principal axes of the training representations of that layer.
struct SignExampleRow {
  std::uint32_t layer_id;
  std::string point;  // "original", "irrelevant", "relevant"
  double pc1;
  double pc2;
};
std::vector<SignExampleRow> sign_example_report(const Mlp& network,
                                                const LabeledPoints& train,
                                                double delta);

// Flat binary64 checkpoint with a shape header ("PSCN").
void save_checkpoint(const std::filesystem::path& path, const Mlp& network);
Mlp load_checkpoint(const std::filesystem::path& path);

}  // namespace psc

#endif  // PSC_TOY_NETWORKS_H_
