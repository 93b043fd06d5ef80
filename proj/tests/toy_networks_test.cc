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

#include "psc/toy_networks.h"

#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <fstream>

#include "test_util.h"

namespace psc {
namespace {

using psc::testing::TempDir;

TEST(SignData, LabelsFollowFirstCoordinate) {
  const LabeledPoints p = sample_sign_points(5000, 0.3, 0.0, 11);
  ASSERT_EQ(p.x.rows(), 5000);
  ASSERT_EQ(p.x.cols(), 2);
  for (Eigen::Index i = 0; i < p.x.rows(); ++i) {
    EXPECT_EQ(p.labels[i], p.x(i, 0) > 0 ? 1 : 0);
  }
  // Both coordinates are N(0, sigma^2).
  for (int c = 0; c < 2; ++c) {
    const double mean = p.x.col(c).mean();
    const double sd = std::sqrt((p.x.col(c).array() - mean).square().mean());
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sd, 0.3, 0.02);
  }
}

TEST(SignData, FlipRateAndDeterminism) {
  const LabeledPoints a = sample_sign_points(20000, 0.3, 0.1, 4);
  const LabeledPoints b = sample_sign_points(20000, 0.3, 0.1, 4);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.labels, b.labels);
  int flips = 0;
  for (Eigen::Index i = 0; i < a.x.rows(); ++i) {
    flips += a.labels[i] != (a.x(i, 0) > 0 ? 1 : 0);
  }
  EXPECT_NEAR(flips / 20000.0, 0.1, 0.01);
}

TEST(SignData, SplitsAreDistinct) {
  SignDatasetConfig config;
  config.n_train = 50;
  config.n_val = 40;
  config.n_test = 30;
  const SignDataset d = generate_sign_dataset(config);
  EXPECT_EQ(d.train.x.rows(), 50);
  EXPECT_EQ(d.val.x.rows(), 40);
  EXPECT_EQ(d.test.x.rows(), 30);
  EXPECT_NE(d.train.x(0, 0), d.val.x(0, 0));
  EXPECT_NE(d.val.x(0, 0), d.test.x(0, 0));
}

TEST(Mlp, StructureAndResiduals) {
  const Mlp net(MlpSpec{}, 1);
  ASSERT_EQ(net.layers().size(), 6u);
  const std::vector<bool> residual = {false, false, true, true, true, false};
  for (std::size_t l = 0; l < 6; ++l) {
    EXPECT_EQ(net.layers()[l].residual, residual[l]) << l;
    EXPECT_EQ(net.layers()[l].activation, l + 1 < 6) << l;
  }
  const RowMatrixXd x = RowMatrixXd::Random(5, 2);
  const auto outs = net.forward_collect(x);
  ASSERT_EQ(outs.size(), 7u);
  EXPECT_EQ(outs[0], x);
  EXPECT_EQ(outs[1].cols(), 4);
  EXPECT_EQ(outs[6].cols(), 2);
  EXPECT_EQ(outs[6], net.logits(x));
}

TEST(Mlp, ForwardMatchesHandComputation) {
  std::vector<DenseLayer> layers(2);
  layers[0].weight = Eigen::MatrixXd{{1.0, -1.0}, {2.0, 0.5}};
  layers[0].bias = Eigen::VectorXd{{0.0, -1.0}};
  layers[0].residual = true;
  layers[1].weight = Eigen::MatrixXd{{1.0, 1.0}};
  layers[1].bias = Eigen::VectorXd{{0.5}};
  layers[1].activation = false;
  const Mlp net(std::move(layers), 0.1);
  RowMatrixXd x(1, 2);
  x << 1.0, 2.0;
  // pre = (-1, 2); leaky = (-0.1, 2); + x = (0.9, 4); out = 4.9 + 0.5.
  const auto outs = net.forward_collect(x);
  EXPECT_NEAR(outs[1](0, 0), 0.9, 1e-15);
  EXPECT_NEAR(outs[1](0, 1), 4.0, 1e-15);
  EXPECT_NEAR(outs[2](0, 0), 5.4, 1e-15);
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
  Mlp net(MlpSpec{}, 7);
  const LabeledPoints data = sample_sign_points(16, 0.5, 0.2, 3);
  MlpGradients grads;
  net.loss_and_gradient(data.x, data.labels, &grads);
  const double h = 1e-6;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& w = net.layers()[l].weight;
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        const double keep = w(i, j);
        w(i, j) = keep + h;
        const double up = net.loss_and_gradient(data.x, data.labels, nullptr);
        w(i, j) = keep - h;
        const double down = net.loss_and_gradient(data.x, data.labels, nullptr);
        w(i, j) = keep;
        EXPECT_NEAR(grads.weight[l](i, j), (up - down) / (2 * h), 1e-6);
      }
    }
    auto& b = net.layers()[l].bias;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      const double keep = b(i);
      b(i) = keep + h;
      const double up = net.loss_and_gradient(data.x, data.labels, nullptr);
      b(i) = keep - h;
      const double down = net.loss_and_gradient(data.x, data.labels, nullptr);
      b(i) = keep;
      EXPECT_NEAR(grads.bias[l](i), (up - down) / (2 * h), 1e-6);
    }
  }
}

TEST(SpectralNorm, MatchesSingularValue) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd w = psc::testing::random_matrix(rng, 2 + trial % 4, 1 + trial % 5, 1.0);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    EXPECT_NEAR(spectral_norm_of(w), svd.singularValues()(0), 1e-5);
  }
}

TrainConfig short_training(std::uint64_t seed) {
  TrainConfig config;
  config.epochs = 60;
  config.seed = seed;
  return config;
}

TEST(Training, LearnsAndIsReproducible) {
  SignDatasetConfig dc;
  dc.n_train = 400;
  dc.n_val = 200;
  dc.seed = 3;
  const SignDataset d = generate_sign_dataset(dc);
  const TrainResult a = train_mlp(MlpSpec{}, short_training(3), d.train, d.val);
  const TrainResult b = train_mlp(MlpSpec{}, short_training(3), d.train, d.val);
  EXPECT_GT(a.val_accuracy, 0.9);
  EXPECT_EQ(a.final_loss, b.final_loss);
  for (std::size_t l = 0; l < a.network.layers().size(); ++l) {
    EXPECT_EQ(a.network.layers()[l].weight, b.network.layers()[l].weight);
    EXPECT_EQ(a.network.layers()[l].bias, b.network.layers()[l].bias);
  }
}

TEST(Training, SpectralNormCapHolds) {
  SignDatasetConfig dc;
  dc.n_train = 300;
  dc.n_val = 100;
  const SignDataset d = generate_sign_dataset(dc);
  MlpSpec spec;
  spec.sn_bound = 0.9;
  const TrainResult r = train_mlp(spec, short_training(0), d.train, d.val);
  for (const auto& layer : r.network.layers()) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(layer.weight);
    EXPECT_LE(svd.singularValues()(0), 0.9 + 1e-4);
  }
}

TEST(Checkpoint, RoundTripAndTrailingBytes) {
  TempDir dir;
  const Mlp net(MlpSpec{}, 9);
  save_checkpoint(dir / "net.pscn", net);
  const Mlp back = load_checkpoint(dir / "net.pscn");
  ASSERT_EQ(back.layers().size(), net.layers().size());
  EXPECT_EQ(back.negative_slope(), net.negative_slope());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    EXPECT_EQ(back.layers()[l].weight, net.layers()[l].weight);
    EXPECT_EQ(back.layers()[l].bias, net.layers()[l].bias);
    EXPECT_EQ(back.layers()[l].residual, net.layers()[l].residual);
    EXPECT_EQ(back.layers()[l].activation, net.layers()[l].activation);
  }
  {
    std::ofstream out(dir / "net.pscn", std::ios::binary | std::ios::app);
    out.put('x');
  }
  EXPECT_THROW(load_checkpoint(dir / "net.pscn"), ValidationError);
  EXPECT_THROW(load_checkpoint(dir / "missing.pscn"), ValidationError);
}

TEST(Dump, ActivationsReadBackThroughStore) {
  TempDir dir;
  const Mlp net(MlpSpec{}, 2);
  const LabeledPoints data = sample_sign_points(33, 0.3, 0.0, 8);
  dump_activations(net, data, dir.path(), Split::kVal, "toy");
  const ActivationDataset ds = open_dataset(load_manifest(dir / "val.json"));
  EXPECT_EQ(ds.split(), Split::kVal);
  EXPECT_EQ(ds.sample_count(), 33u);
  EXPECT_EQ(ds.labels(), data.labels);
  ASSERT_EQ(ds.layer_ids().size(), 7u);
  const auto outs = net.forward_collect(data.x);
  for (std::uint32_t l = 0; l < 7; ++l) {
    const ActivationBatch b = ds.read_layer(l);
    EXPECT_EQ(b.values, outs[l].cast<float>()) << l;
  }
}

TEST(SignReport, OneRowPerLayerAndProbe) {
  const Mlp net(MlpSpec{}, 4);
  const LabeledPoints data = sample_sign_points(200, 0.3, 0.0, 6);
  const auto rows = sign_example_report(net, data, 5 * 0.3);
  ASSERT_EQ(rows.size(), 21u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].layer_id, i / 3);
    EXPECT_TRUE(std::isfinite(rows[i].pc1) && std::isfinite(rows[i].pc2));
  }
  EXPECT_EQ(rows[0].point, "original");
  EXPECT_EQ(rows[1].point, "irrelevant");
  EXPECT_EQ(rows[2].point, "relevant");
}

TEST(Perturbation, ZeroShiftGivesZeroDistance) {
  const Mlp net(MlpSpec{}, 4);
  const LabeledPoints data = sample_sign_points(20, 0.3, 0.0, 6);
  for (double d : perturbation_distances(net, data.x, 0.0)) EXPECT_EQ(d, 0.0);
  for (double d : perturbation_distances(net, data.x, 1.0)) EXPECT_GE(d, 0.0);
}

}  // namespace
}  // namespace psc
