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

#include "psc/projection.h"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "binary_io.h"

namespace psc {

StackedBatch reshape_concat(std::span<const ActivationBatch> layers) {
  if (layers.empty()) throw ValidationError("no layers to combine");
  const ActivationBatch& first = layers.front();
  const bool conv = first.kind == LayerKind::kConv;
  StackedBatch out;
  out.channels = static_cast<std::int64_t>(first.channels());
  out.first_index = first.first_index;
  out.labels = first.labels;
  for (const auto& layer : layers) {
    if ((layer.kind == LayerKind::kConv) != conv) {
      throw ValidationError("mixed conv/fc candidate set");
    }
    if (static_cast<std::int64_t>(layer.channels()) != out.channels) {
      throw ValidationError("conv channel mismatch: " +
                            std::to_string(layer.channels()) + " vs " +
                            std::to_string(out.channels));
    }
    if (layer.size() != first.size() || layer.first_index != first.first_index) {
      throw ValidationError("candidate layer batches are not aligned");
    }
    out.features += static_cast<std::int64_t>(layer.spatial_size());
  }
  const std::int64_t rows = first.size();
  out.values.resize(rows, out.channels * out.features);
  for (std::int64_t i = 0; i < rows; ++i) {
    double* dst = out.values.row(i).data();
    for (std::int64_t c = 0; c < out.channels; ++c) {
      std::int64_t offset = c * out.features;
      for (const auto& layer : layers) {
        const auto width = static_cast<std::int64_t>(layer.spatial_size());
        const float* src = layer.values.row(i).data() + c * width;
        for (std::int64_t k = 0; k < width; ++k) dst[offset + k] = src[k];
        offset += width;
      }
    }
  }
  return out;
}

void ChannelMomentAccumulator::check(const StackedBatch& batch) const {
  if (batch.values.cols() != batch.channels * batch.features) {
    throw ValidationError("stacked batch shape mismatch");
  }
  if (moments_.mean.size() != 0 &&
      (batch.channels != moments_.channels() ||
       batch.features != moments_.features())) {
    throw ValidationError("stacked batch shape changed between batches");
  }
  if (!batch.values.allFinite()) {
    for (std::int64_t i = 0; i < batch.size(); ++i) {
      if (!batch.values.row(i).allFinite()) {
        throw ValidationError("non-finite activation at sample " +
                           std::to_string(batch.first_index + i));
      }
    }
  }
}

void ChannelMomentAccumulator::add_mean_pass(const StackedBatch& batch) {
  if (mean_done_) throw std::logic_error("mean pass already finished");
  if (moments_.mean.size() == 0) {
    moments_.mean = RowMatrixXd::Zero(batch.channels, batch.features);
    sum_ = RowMatrixXd::Zero(batch.channels, batch.features);
  }
  check(batch);
  for (std::int64_t i = 0; i < batch.size(); ++i) sum_ += batch.sample(i);
  moments_.sample_count += batch.size();
}

void ChannelMomentAccumulator::finish_mean_pass() {
  if (moments_.sample_count < 2) {
    throw ValidationError("channel moments need N >= 2, got " +
                          std::to_string(moments_.sample_count));
  }
  moments_.mean = sum_ / double(moments_.sample_count);
  moments_.covariance.assign(
      moments_.channels(),
      Eigen::MatrixXd::Zero(moments_.features(), moments_.features()));
  mean_done_ = true;
}

void ChannelMomentAccumulator::add_covariance_pass(const StackedBatch& batch) {
  if (!mean_done_ || finished_) throw std::logic_error("mean pass not finished");
  check(batch);
  const std::int64_t d = moments_.features();
  Eigen::MatrixXd centered(batch.size(), d);
  for (std::int64_t c = 0; c < moments_.channels(); ++c) {
    for (std::int64_t i = 0; i < batch.size(); ++i) {
      centered.row(i) = batch.sample(i).row(c) - moments_.mean.row(c);
    }
    moments_.covariance[c].selfadjointView<Eigen::Lower>().rankUpdate(
        centered.transpose());
  }
  second_pass_count_ += batch.size();
}

ChannelMoments ChannelMomentAccumulator::finish() {
  if (!mean_done_ || finished_) throw std::logic_error("mean pass not finished");
  if (second_pass_count_ != moments_.sample_count) {
    throw ValidationError("covariance pass saw " +
                          std::to_string(second_pass_count_) +
                          " samples, mean pass saw " +
                          std::to_string(moments_.sample_count));
  }
  for (auto& slice : moments_.covariance) {
    slice = slice.selfadjointView<Eigen::Lower>();
    slice /= double(moments_.sample_count);
  }
  finished_ = true;
  return std::move(moments_);
}

ChannelMoments compute_channel_moments(const StackedSource& source) {
  ChannelMomentAccumulator acc;
  source([&](const StackedBatch& b) { acc.add_mean_pass(b); });
  acc.finish_mean_pass();
  source([&](const StackedBatch& b) { acc.add_covariance_pass(b); });
  return acc.finish();
}

RowMatrixXd channel_stddev(const ChannelMoments& moments) {
  RowMatrixXd stddev(moments.channels(), moments.features());
  for (std::int64_t c = 0; c < moments.channels(); ++c) {
    stddev.row(c) =
        moments.covariance[c].diagonal().cwiseMax(0.0).cwiseSqrt().transpose();
  }
  return stddev;
}

namespace {

double scale_of(double stddev) {
  return stddev * stddev < kVarianceFloor ? 1.0 : stddev;
}

}  // namespace

RowMatrixXd standardize(const Eigen::Ref<const RowMatrixXd>& x,
                        const Eigen::Ref<const RowMatrixXd>& mean,
                        const Eigen::Ref<const RowMatrixXd>& stddev) {
  if (x.rows() != mean.rows() || x.cols() != mean.cols() ||
      stddev.rows() != mean.rows() || stddev.cols() != mean.cols()) {
    throw ValidationError("standardize: shape mismatch (" +
                          std::to_string(x.rows()) + "x" +
                          std::to_string(x.cols()) + " vs " +
                          std::to_string(mean.rows()) + "x" +
                          std::to_string(mean.cols()) + ")");
  }
  return (x - mean).cwiseQuotient(stddev.unaryExpr(&scale_of));
}

RowMatrixXd standardize(const Eigen::Ref<const RowMatrixXd>& x,
                        const ChannelMoments& moments) {
  return standardize(x, moments.mean, channel_stddev(moments));
}

std::vector<Eigen::MatrixXd> covariance_to_correlation(
    const ChannelMoments& moments) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(moments.covariance.size());
  const RowMatrixXd stddev = channel_stddev(moments);
  for (std::int64_t c = 0; c < moments.channels(); ++c) {
    const Eigen::VectorXd inv =
        stddev.row(c).unaryExpr(&scale_of).cwiseInverse().transpose();
    out.push_back(inv.asDiagonal() * moments.covariance[c] * inv.asDiagonal());
  }
  return out;
}

namespace {

// Leading eigenvectors of a symmetric Gram matrix, descending, as left
// singular vectors of the unfolding it was built from.
void leading_vectors(const Eigen::MatrixXd& gram, std::int64_t keep,
                     const char* mode, Eigen::MatrixXd& vectors,
                     Eigen::VectorXd& singular_values) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  if (solver.info() != Eigen::Success) {
    throw ComputeError(std::string("eigendecomposition failed for ") + mode);
  }
  const std::int64_t n = gram.rows();
  singular_values.resize(n);
  Eigen::MatrixXd sorted(n, n);
  for (std::int64_t k = 0; k < n; ++k) {
    singular_values(k) = std::sqrt(std::max(0.0, solver.eigenvalues()(n - 1 - k)));
    sorted.col(k) = solver.eigenvectors().col(n - 1 - k);
  }
  const double top = singular_values.size() ? singular_values(0) : 0.0;
  if (singular_values(keep - 1) <= 1e-12 * std::max(top, 1e-300)) {
    warn(std::string(mode) + ": rank below requested dimension " +
         std::to_string(keep) + "; padding with an orthonormal completion");
  }
  vectors = sorted.leftCols(keep);
  for (std::int64_t k = 0; k < keep; ++k) {
    for (std::int64_t r = 0; r < n; ++r) {
      if (std::abs(vectors(r, k)) > 1e-12) {
        if (vectors(r, k) < 0) vectors.col(k) = -vectors.col(k);
        break;
      }
    }
  }
}

}  // namespace

TuckerFactors fit_tucker(std::span<const Eigen::MatrixXd> tensor,
                         std::int64_t c_proj, std::int64_t d_proj) {
  const auto channels = static_cast<std::int64_t>(tensor.size());
  if (channels == 0) throw ValidationError("empty tensor");
  const std::int64_t d = tensor.front().rows();
  for (const auto& slice : tensor) {
    if (slice.rows() != d || slice.cols() != d) {
      throw ValidationError("tensor slices must all be D x D");
    }
  }
  if (c_proj < 1 || c_proj > channels) {
    throw ValidationError("c_proj must be in [1, " + std::to_string(channels) +
                          "], got " + std::to_string(c_proj));
  }
  if (d_proj < 1 || d_proj > d) {
    throw ValidationError("d_proj must be in [1, " + std::to_string(d) +
                          "], got " + std::to_string(d_proj));
  }

  // Mode-1 unfolding M1 (C x D^2): M1 M1^T holds Frobenius inner products.
  Eigen::MatrixXd gram1(channels, channels);
  for (std::int64_t a = 0; a < channels; ++a) {
    for (std::int64_t b = a; b < channels; ++b) {
      gram1(a, b) = gram1(b, a) = tensor[a].cwiseProduct(tensor[b]).sum();
    }
  }
  // Mode-2 unfolding M2 = [R_1 ... R_C] (D x CD): M2 M2^T = sum_c R_c R_c^T.
  Eigen::MatrixXd gram2 = Eigen::MatrixXd::Zero(d, d);
  for (const auto& slice : tensor) gram2.noalias() += slice * slice.transpose();

  TuckerFactors factors;
  leading_vectors(gram1, c_proj, "channel mode", factors.channel_factor,
                  factors.channel_singular_values);
  leading_vectors(gram2, d_proj, "feature mode", factors.feature_factor,
                  factors.feature_singular_values);
  return factors;
}

std::vector<Eigen::MatrixXd> tucker_reconstruct(
    std::span<const Eigen::MatrixXd> tensor, const TuckerFactors& factors) {
  const Eigen::MatrixXd pa =
      factors.channel_factor * factors.channel_factor.transpose();
  const Eigen::MatrixXd pb =
      factors.feature_factor * factors.feature_factor.transpose();
  std::vector<Eigen::MatrixXd> compressed;
  for (const auto& slice : tensor) compressed.push_back(pb * slice * pb);
  std::vector<Eigen::MatrixXd> out;
  for (std::size_t c = 0; c < tensor.size(); ++c) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(tensor[c].rows(), tensor[c].cols());
    for (std::size_t k = 0; k < tensor.size(); ++k) {
      acc += pa(c, k) * compressed[k];
    }
    out.push_back(std::move(acc));
  }
  return out;
}

TuckerProjection make_projection(const ChannelMoments& moments,
                                 TuckerFactors factors) {
  if (factors.channel_factor.rows() != moments.channels() ||
      factors.feature_factor.rows() != moments.features()) {
    throw ValidationError("factor shapes do not match channel moments");
  }
  TuckerProjection projection;
  projection.channel_mean = moments.mean;
  projection.channel_stddev = channel_stddev(moments);
  projection.factors = std::move(factors);
  return projection;
}

Eigen::VectorXd project(const Eigen::Ref<const RowMatrixXd>& x,
                        const TuckerProjection& projection) {
  if (x.rows() != projection.channels() || x.cols() != projection.features()) {
    throw ValidationError("project: input is " + std::to_string(x.rows()) +
                          "x" + std::to_string(x.cols()) +
                          ", projection expects " +
                          std::to_string(projection.channels()) + "x" +
                          std::to_string(projection.features()));
  }
  const RowMatrixXd reduced = projection.factors.channel_factor.transpose() *
                              x * projection.factors.feature_factor;
  return Eigen::Map<const Eigen::VectorXd>(reduced.data(), reduced.size());
}

OutputScaling fit_output_scaling(const Eigen::Ref<const RowMatrixXd>& z) {
  if (z.rows() < 2) throw ValidationError("output scaling needs N >= 2");
  OutputScaling scaling;
  scaling.mean = z.colwise().mean().transpose();
  scaling.stddev =
      ((z.rowwise() - scaling.mean.transpose()).colwise().squaredNorm() /
       double(z.rows()))
          .cwiseSqrt()
          .transpose();
  return scaling;
}

void apply_output_scaling(const OutputScaling& scaling,
                          Eigen::Ref<RowMatrixXd> z) {
  if (z.cols() != scaling.mean.size()) {
    throw ValidationError("output scaling dimension mismatch");
  }
  const Eigen::RowVectorXd scale =
      scaling.stddev.unaryExpr(&scale_of).transpose();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z.row(i) = (z.row(i) - scaling.mean.transpose()).cwiseQuotient(scale);
  }
}

RowMatrixXd process_stacked(const StackedBatch& batch,
                            const TuckerProjection& projection,
                            bool apply_output_scale) {
  if (batch.channels != projection.channels() ||
      batch.features != projection.features()) {
    throw ValidationError(
        "dimension mismatch: activations are " +
        std::to_string(batch.channels) + "x" + std::to_string(batch.features) +
        ", projection expects " + std::to_string(projection.channels()) + "x" +
        std::to_string(projection.features()));
  }
  RowMatrixXd out(batch.size(), projection.output_size());
  for (std::int64_t i = 0; i < batch.size(); ++i) {
    const auto x = batch.sample(i);
    if (!x.allFinite()) {
      throw ValidationError("non-finite activation at sample " +
                         std::to_string(batch.first_index + i));
    }
    out.row(i) = project(standardize(x, projection.channel_mean,
                                     projection.channel_stddev),
                         projection)
                     .transpose();
  }
  if (apply_output_scale) {
    if (!projection.output_scaling) {
      throw ValidationError("projection has no output scaling");
    }
    apply_output_scaling(*projection.output_scaling, out);
  }
  return out;
}

RowMatrixXd process_pipeline(std::span<const ActivationBatch> layers,
                             const TuckerProjection& projection,
                             bool apply_output_scale) {
  return process_stacked(reshape_concat(layers), projection,
                         apply_output_scale);
}

std::vector<std::int64_t> dim_grid(std::int64_t extent) {
  if (extent < 1) throw ValidationError("dimension must be >= 1");
  if (extent == 1) return {1};
  std::vector<std::int64_t> grid;
  for (std::int64_t v = 2; v < extent; v *= 2) grid.push_back(v);
  grid.push_back(extent);
  return grid;
}

namespace {

constexpr std::string_view kProjectionMagic = "PSCP";
constexpr std::uint32_t kProjectionVersion = 1;

template <typename Matrix>
void put_matrix(io::Writer& out, const Matrix& m) {
  const RowMatrixXd row_major = m;
  out.put_array(row_major.data(), static_cast<std::size_t>(row_major.size()));
}

RowMatrixXd get_matrix(io::Reader& in, std::int64_t rows, std::int64_t cols) {
  RowMatrixXd m(rows, cols);
  in.get_array(m.data(), static_cast<std::size_t>(m.size()));
  return m;
}

Eigen::VectorXd get_vector(io::Reader& in, std::int64_t n) {
  Eigen::VectorXd v(n);
  in.get_array(v.data(), static_cast<std::size_t>(n));
  return v;
}

}  // namespace

void save_projection(const std::filesystem::path& path,
                     const TuckerProjection& p) {
  io::Writer out(path);
  out.magic(kProjectionMagic);
  out.put<std::uint32_t>(kProjectionVersion);
  out.put<std::uint64_t>(p.channels());
  out.put<std::uint64_t>(p.features());
  out.put<std::uint64_t>(p.c_proj());
  out.put<std::uint64_t>(p.d_proj());
  put_matrix(out, p.channel_mean);
  put_matrix(out, p.channel_stddev);
  put_matrix(out, p.factors.channel_factor);
  put_matrix(out, p.factors.feature_factor);
  out.put<std::uint8_t>(p.output_scaling ? 1 : 0);
  if (p.output_scaling) {
    out.put_array(p.output_scaling->mean.data(), p.output_scaling->mean.size());
    out.put_array(p.output_scaling->stddev.data(),
                  p.output_scaling->stddev.size());
  }
  out.put<std::uint64_t>(p.factors.channel_singular_values.size());
  out.put_array(p.factors.channel_singular_values.data(),
                p.factors.channel_singular_values.size());
  out.put<std::uint64_t>(p.factors.feature_singular_values.size());
  out.put_array(p.factors.feature_singular_values.data(),
                p.factors.feature_singular_values.size());
  out.close();
}

TuckerProjection load_projection(const std::filesystem::path& path) {
  io::Reader in(path);
  in.expect_magic(kProjectionMagic);
  if (in.get<std::uint32_t>() != kProjectionVersion) {
    throw ValidationError(path.string() + ": unsupported projection version");
  }
  const auto c = static_cast<std::int64_t>(in.get<std::uint64_t>());
  const auto d = static_cast<std::int64_t>(in.get<std::uint64_t>());
  const auto cp = static_cast<std::int64_t>(in.get<std::uint64_t>());
  const auto dp = static_cast<std::int64_t>(in.get<std::uint64_t>());
  if (c < 1 || d < 1 || cp < 1 || cp > c || dp < 1 || dp > d) {
    throw ValidationError(path.string() + ": invalid projection dims");
  }
  TuckerProjection p;
  p.channel_mean = get_matrix(in, c, d);
  p.channel_stddev = get_matrix(in, c, d);
  p.factors.channel_factor = get_matrix(in, c, cp);
  p.factors.feature_factor = get_matrix(in, d, dp);
  if (in.get<std::uint8_t>() != 0) {
    OutputScaling scaling;
    scaling.mean = get_vector(in, cp * dp);
    scaling.stddev = get_vector(in, cp * dp);
    p.output_scaling = std::move(scaling);
  }
  const auto n1 = static_cast<std::int64_t>(in.get<std::uint64_t>());
  if (n1 != c) throw ValidationError(path.string() + ": bad singular values");
  p.factors.channel_singular_values = get_vector(in, n1);
  const auto n2 = static_cast<std::int64_t>(in.get<std::uint64_t>());
  if (n2 != d) throw ValidationError(path.string() + ": bad singular values");
  p.factors.feature_singular_values = get_vector(in, n2);
  if (!in.at_end()) {
    throw ValidationError(path.string() + ": trailing bytes");
  }
  return p;
}

}  // namespace psc
