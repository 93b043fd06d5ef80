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

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "binary_io.h"

namespace psc {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double leaky(double v, double slope) { return v > 0.0 ? v : slope * v; }

}  // namespace

LabeledPoints sample_sign_points(std::int64_t count, double sigma,
                                 double flip_probability, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw ValidationError("sigma must be > 0");
  if (flip_probability < 0.0 || flip_probability >= 1.0) {
    throw ValidationError("flip probability must be in [0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  LabeledPoints out;
  out.x.resize(count, 2);
  out.labels.resize(count);
  for (std::int64_t i = 0; i < count; ++i) {
    out.x(i, 0) = normal(rng);
    out.x(i, 1) = normal(rng);
    const bool flip = uniform(rng) < flip_probability;
    out.labels[i] = ((out.x(i, 0) > 0.0) != flip) ? 1 : 0;
  }
  return out;
}

SignDataset generate_sign_dataset(const SignDatasetConfig& config) {
  return {sample_sign_points(config.n_train, config.sigma,
                             config.flip_probability, splitmix64(config.seed)),
          sample_sign_points(config.n_val, config.sigma,
                             config.flip_probability,
                             splitmix64(config.seed + 1)),
          sample_sign_points(config.n_test, config.sigma,
                             config.flip_probability,
                             splitmix64(config.seed + 2))};
}

Mlp::Mlp(const MlpSpec& spec, std::uint64_t seed)
    : negative_slope_(spec.negative_slope) {
  if (spec.sn_bound && !(*spec.sn_bound > 0.0)) {
    throw ValidationError("sn_bound must be > 0");
  }
  std::mt19937_64 rng(splitmix64(seed ^ 0xa11ce));
  std::vector<std::int64_t> widths = {spec.input_dim};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(spec.output_dim);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::int64_t in = widths[l];
    const std::int64_t out = widths[l + 1];
    if (in < 1 || out < 1) throw ValidationError("layer widths must be >= 1");
    const double bound = 1.0 / std::sqrt(double(in));
    std::uniform_real_distribution<double> init(-bound, bound);
    DenseLayer layer;
    layer.weight.resize(out, in);
    for (std::int64_t r = 0; r < out; ++r) {
      for (std::int64_t c = 0; c < in; ++c) layer.weight(r, c) = init(rng);
    }
    layer.bias.resize(out);
    for (std::int64_t r = 0; r < out; ++r) layer.bias(r) = init(rng);
    const bool is_output = l + 2 == widths.size();
    layer.activation = !is_output;
    layer.residual = !is_output && in == out;
    layers_.push_back(std::move(layer));
  }
}

Mlp::Mlp(std::vector<DenseLayer> layers, double negative_slope)
    : layers_(std::move(layers)), negative_slope_(negative_slope) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.bias.size() != layer.weight.rows()) {
      throw ValidationError("bias size does not match weight rows");
    }
    if (l > 0 && layer.weight.cols() != layers_[l - 1].weight.rows()) {
      throw ValidationError("layer " + std::to_string(l) +
                            " input width does not match previous output");
    }
    if (layer.residual && layer.weight.rows() != layer.weight.cols()) {
      throw ValidationError("residual link between unequal widths");
    }
  }
}

std::vector<RowMatrixXd> Mlp::forward_collect(
    const Eigen::Ref<const RowMatrixXd>& x) const {
  if (layers_.empty()) throw ValidationError("empty network");
  if (x.cols() != layers_.front().weight.cols()) {
    throw ValidationError("input has " + std::to_string(x.cols()) +
                          " columns, network expects " +
                          std::to_string(layers_.front().weight.cols()));
  }
  std::vector<RowMatrixXd> outputs = {x};
  RowMatrixXd h = x;
  for (const auto& layer : layers_) {
    RowMatrixXd next = h * layer.weight.transpose();
    next.rowwise() += layer.bias.transpose();
    if (layer.activation) {
      next = next.unaryExpr([&](double v) { return leaky(v, negative_slope_); });
    }
    if (layer.residual) next += h;
    outputs.push_back(next);
    h = std::move(next);
  }
  return outputs;
}

RowMatrixXd Mlp::logits(const Eigen::Ref<const RowMatrixXd>& x) const {
  return forward_collect(x).back();
}

double Mlp::loss_and_gradient(const Eigen::Ref<const RowMatrixXd>& x,
                              std::span<const int> labels,
                              MlpGradients* gradients) const {
  const std::size_t depth = layers_.size();
  std::vector<RowMatrixXd> inputs(depth);
  std::vector<RowMatrixXd> pre(depth);
  RowMatrixXd h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    const auto& layer = layers_[l];
    inputs[l] = h;
    pre[l] = h * layer.weight.transpose();
    pre[l].rowwise() += layer.bias.transpose();
    RowMatrixXd out = layer.activation
        ? RowMatrixXd(pre[l].unaryExpr(
              [&](double v) { return leaky(v, negative_slope_); }))
        : pre[l];
    if (layer.residual) out += h;
    h = std::move(out);
  }

  const double n = double(x.rows());
  double loss = 0.0;
  RowMatrixXd delta(h.rows(), h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const double top = h.row(i).maxCoeff();
    const double lse = top + std::log((h.row(i).array() - top).exp().sum());
    loss += lse - h(i, labels[i]);
    delta.row(i) = (h.row(i).array() - lse).exp();
    delta(i, labels[i]) -= 1.0;
  }
  loss /= n;
  if (!gradients) return loss;

  delta /= n;  // d loss / d output of the last layer
  gradients->weight.assign(depth, {});
  gradients->bias.assign(depth, {});
  for (std::size_t l = depth; l-- > 0;) {
    const auto& layer = layers_[l];
    RowMatrixXd d_pre = delta;
    if (layer.activation) {
      d_pre = delta.cwiseProduct(pre[l].unaryExpr(
          [&](double v) { return v > 0.0 ? 1.0 : negative_slope_; }));
    }
    gradients->weight[l] = d_pre.transpose() * inputs[l];
    gradients->bias[l] = d_pre.colwise().sum().transpose();
    RowMatrixXd d_in = d_pre * layer.weight;
    if (layer.residual) d_in += delta;
    delta = std::move(d_in);
  }
  return loss;
}

double Mlp::accuracy(const LabeledPoints& data) const {
  const RowMatrixXd out = logits(data.x);
  std::int64_t correct = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < out.cols(); ++c) {
      if (out(i, c) > out(i, best)) best = c;
    }
    if (best == data.labels[i]) ++correct;
  }
  return out.rows() ? double(correct) / double(out.rows()) : 0.0;
}

double spectral_norm_of(const Eigen::Ref<const Eigen::MatrixXd>& weight,
                        double tolerance, int max_iterations,
                        std::uint64_t seed) {
  if (weight.size() == 0) throw ValidationError("empty matrix");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(weight.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  v.normalize();
  double sigma = 0.0;
  for (int iter = 0; iter < max_iterations; ++iter) {
    const Eigen::VectorXd u = weight * v;
    const double next = u.norm();
    if (next == 0.0) {
      if (weight.isZero(0.0)) return 0.0;
      // Start vector in the null space; restart from a fresh draw.
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
      v.normalize();
      continue;
    }
    const Eigen::VectorXd w = weight.transpose() * u;
    v = w / w.norm();
    if (iter > 0 && std::abs(next - sigma) <= tolerance * next) return next;
    sigma = next;
  }
  throw ComputeError("power iteration did not converge in " +
                     std::to_string(max_iterations) + " iterations");
}

namespace {

void cap_spectral_norm(Mlp& network, double bound) {
  for (auto& layer : network.layers()) {
    const double sigma = spectral_norm_of(layer.weight);
    if (sigma > bound) layer.weight *= bound / sigma;
  }
}

}  // namespace

TrainResult train_mlp(const MlpSpec& spec, const TrainConfig& config,
                      const LabeledPoints& train, const LabeledPoints& val) {
  if (!(config.lr_start >= config.lr_end && config.lr_end > 0.0)) {
    throw ValidationError("need lr_start >= lr_end > 0");
  }
  if (config.epochs < 1) throw ValidationError("epochs must be >= 1");
  for (int y : train.labels) {
    if (y != 0 && y != 1) throw ValidationError("labels must be binary");
  }
  const std::int64_t n = train.x.rows();
  if (n == 0) throw ValidationError("empty training set");
  const std::int64_t batch =
      config.batch_size <= 0 ? n : std::min(config.batch_size, n);

  TrainResult result;
  result.network = Mlp(spec, config.seed);
  Mlp& net = result.network;
  if (spec.sn_bound) cap_spectral_norm(net, *spec.sn_bound);

  const std::size_t depth = net.layers().size();
  MlpGradients m1, m2;
  for (const auto& layer : net.layers()) {
    m1.weight.push_back(Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()));
    m1.bias.push_back(Eigen::VectorXd::Zero(layer.bias.size()));
  }
  m2 = m1;

  std::mt19937_64 rng(splitmix64(config.seed ^ 0xba7c4));
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  RowMatrixXd xb;
  std::vector<int> yb;
  MlpGradients grads;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr =
        config.lr_end + 0.5 * (config.lr_start - config.lr_end) *
                            (1.0 + std::cos(std::numbers::pi * epoch /
                                            config.epochs));
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t start = 0; start < n; start += batch) {
      const std::int64_t count = std::min(batch, n - start);
      xb.resize(count, train.x.cols());
      yb.resize(count);
      for (std::int64_t i = 0; i < count; ++i) {
        xb.row(i) = train.x.row(order[start + i]);
        yb[i] = train.labels[order[start + i]];
      }
      const double loss = net.loss_and_gradient(xb, yb, &grads);
      if (!std::isfinite(loss)) {
        throw ComputeError("training diverged at epoch " +
                           std::to_string(epoch));
      }
      ++step;
      const double c1 = 1.0 - std::pow(config.beta1, double(step));
      const double c2 = 1.0 - std::pow(config.beta2, double(step));
      auto adam = [&](auto& param, auto& grad, auto& first, auto& second) {
        grad += config.weight_decay * param;
        first = config.beta1 * first + (1.0 - config.beta1) * grad;
        second = config.beta2 * second +
                 (1.0 - config.beta2) * grad.cwiseAbs2();
        param.array() -= lr * (first.array() / c1) /
                         ((second.array() / c2).sqrt() + config.adam_epsilon);
      };
      for (std::size_t l = 0; l < depth; ++l) {
        auto& layer = net.layers()[l];
        adam(layer.weight, grads.weight[l], m1.weight[l], m2.weight[l]);
        adam(layer.bias, grads.bias[l], m1.bias[l], m2.bias[l]);
      }
      if (spec.sn_bound) cap_spectral_norm(net, *spec.sn_bound);
    }
  }
  result.final_loss = net.loss_and_gradient(train.x, train.labels, nullptr);
  if (!std::isfinite(result.final_loss)) {
    throw ComputeError("training diverged: final loss is not finite");
  }
  result.val_accuracy = val.x.rows() ? net.accuracy(val) : 0.0;
  return result;
}

DatasetManifest dump_activations(const Mlp& network, const LabeledPoints& data,
                                 const std::filesystem::path& dir, Split split,
                                 const std::string& name, int class_count) {
  const std::string split_name = to_string(split);
  std::filesystem::create_directories(dir / split_name);
  DatasetManifest manifest;
  manifest.split = split;
  manifest.class_count = class_count;
  manifest.name = name;
  manifest.base_dir = dir;
  const auto outputs = network.forward_collect(data.x);
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    const RowMatrixXf values = outputs[l].cast<float>();
    const std::string rel = split_name + "/layer_" + std::to_string(l) + ".psca";
    const auto header = LayerRecordHeader::fc(
        static_cast<std::uint32_t>(l), static_cast<std::uint64_t>(values.rows()),
        static_cast<std::uint64_t>(values.cols()));
    const std::string digest = write_layer_file(
        dir / rel, header, std::span(values.data(), values.size()),
        data.labels);
    manifest.layers.push_back({rel, static_cast<std::uint32_t>(l), digest});
  }
  save_manifest(dir / (split_name + ".json"), manifest);
  return manifest;
}

std::vector<double> perturbation_distances(
    const Mlp& network, const Eigen::Ref<const RowMatrixXd>& x, double delta) {
  RowMatrixXd shifted = x;
  shifted.col(1).array() += delta;
  const auto a = network.forward_collect(x);
  const auto b = network.forward_collect(shifted);
  std::vector<double> out;
  for (std::size_t l = 0; l < a.size(); ++l) {
    out.push_back((a[l] - b[l]).rowwise().norm().mean());
  }
  return out;
}

std::vector<SignExampleRow> sign_example_report(const Mlp& network,
                                                const LabeledPoints& train,
                                                double delta) {
  // First training point that sits clearly on one side of the boundary.
  Eigen::Index pick = 0;
  const double threshold = train.x.col(0).cwiseAbs().mean();
  for (Eigen::Index i = 0; i < train.x.rows(); ++i) {
    if (std::abs(train.x(i, 0)) >= threshold) {
      pick = i;
      break;
    }
  }
  RowMatrixXd probes(3, 2);
  probes.row(0) = train.x.row(pick);
  probes.row(1) = train.x.row(pick);
  probes(1, 1) += delta;
  probes.row(2) = train.x.row(pick);
  probes(2, 0) = -probes(2, 0);
  static const char* kNames[] = {"original", "irrelevant", "relevant"};

  const auto reps = network.forward_collect(train.x);
  const auto probe_reps = network.forward_collect(probes);
  std::vector<SignExampleRow> rows;
  for (std::size_t l = 0; l < reps.size(); ++l) {
    const Eigen::RowVectorXd mean = reps[l].colwise().mean();
    const RowMatrixXd centered = reps[l].rowwise() - mean;
    const Eigen::MatrixXd cov =
        centered.transpose() * centered / double(reps[l].rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const Eigen::Index width = cov.rows();
    Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(width, 2);
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, width); ++k) {
      axes.col(k) = solver.eigenvectors().col(width - 1 - k);
    }
    const RowMatrixXd coords = (probe_reps[l].rowwise() - mean) * axes;
    for (int p = 0; p < 3; ++p) {
      rows.push_back({static_cast<std::uint32_t>(l), kNames[p], coords(p, 0),
                      coords(p, 1)});
    }
  }
  return rows;
}

namespace {

constexpr std::string_view kCheckpointMagic = "PSCN";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Mlp& network) {
  io::Writer out(path);
  out.magic(kCheckpointMagic);
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(network.layers().size()));
  out.put<double>(network.negative_slope());
  for (const auto& layer : network.layers()) {
    out.put<std::uint64_t>(layer.weight.rows());
    out.put<std::uint64_t>(layer.weight.cols());
    out.put<std::uint8_t>(layer.activation ? 1 : 0);
    out.put<std::uint8_t>(layer.residual ? 1 : 0);
  }
  for (const auto& layer : network.layers()) {
    const RowMatrixXd w = layer.weight;
    out.put_array(w.data(), static_cast<std::size_t>(w.size()));
    out.put_array(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  out.close();
}

Mlp load_checkpoint(const std::filesystem::path& path) {
  io::Reader in(path);
  in.expect_magic(kCheckpointMagic);
  if (in.get<std::uint32_t>() != kCheckpointVersion) {
    throw ValidationError(path.string() + ": unsupported checkpoint version");
  }
  const auto depth = in.get<std::uint32_t>();
  const double slope = in.get<double>();
  std::vector<DenseLayer> layers(depth);
  for (auto& layer : layers) {
    const auto rows = static_cast<Eigen::Index>(in.get<std::uint64_t>());
    const auto cols = static_cast<Eigen::Index>(in.get<std::uint64_t>());
    layer.weight.resize(rows, cols);
    layer.bias.resize(rows);
    layer.activation = in.get<std::uint8_t>() != 0;
    layer.residual = in.get<std::uint8_t>() != 0;
  }
  for (auto& layer : layers) {
    RowMatrixXd w(layer.weight.rows(), layer.weight.cols());
    in.get_array(w.data(), static_cast<std::size_t>(w.size()));
    layer.weight = w;
    in.get_array(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  if (!in.at_end()) throw ValidationError(path.string() + ": trailing bytes");
  return Mlp(std::move(layers), slope);
}

}  // namespace psc
