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

// Reduction of candidate-layer activations to a short feature vector.
//
// Candidate layers are reshaped to C x D (channels by flattened positions) and
// concatenated along D. Each channel is then centered and scaled by its
// per-position standard deviation, and projected onto two Tucker factors fit to
// the channelwise correlation tensor:
//
//   X~ = A^T X B,   A: C x c_proj,  B: D x d_proj,
//
// giving Z = vec_rowmajor(X~) of length c_proj * d_proj. Channels never share
// a covariance; the tensor holds one D x D slice per channel.

#ifndef PSC_PROJECTION_H_
#define PSC_PROJECTION_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "psc/activation_store.h"
#include "psc/common.h"

namespace psc {

// Coordinates whose variance falls below this are centered but not scaled.
inline constexpr double kVarianceFloor = 1e-12;

// A batch of samples in channel-by-feature layout. Row i of values is the
// row-major flattening of sample i's C x D matrix.
struct StackedBatch {
  std::int64_t channels = 0;
  std::int64_t features = 0;
  std::uint64_t first_index = 0;
  RowMatrixXd values;
  std::vector<int> labels;

  std::int64_t size() const { return values.rows(); }
  // C x D view of one sample.
  Eigen::Map<const RowMatrixXd> sample(std::int64_t i) const {
    return {values.row(i).data(), channels, features};
  }
};

// All conv layers must share C; fc layers become 1 x d rows. Mixing conv and
// fc layers is rejected.
StackedBatch reshape_concat(std::span<const ActivationBatch> layers);

struct ChannelMoments {
  RowMatrixXd mean;                        // C x D
  std::vector<Eigen::MatrixXd> covariance;  // C slices, each D x D, 1/N
  std::int64_t sample_count = 0;

  std::int64_t channels() const { return mean.rows(); }
  std::int64_t features() const { return mean.cols(); }
};

// Exact two-pass estimate: the mean over all N is finished before any
// covariance term is accumulated.
class ChannelMomentAccumulator {
 public:
  void add_mean_pass(const StackedBatch& batch);
  void finish_mean_pass();
  void add_covariance_pass(const StackedBatch& batch);
  ChannelMoments finish();

 private:
  void check(const StackedBatch& batch) const;

  bool mean_done_ = false;
  bool finished_ = false;
  ChannelMoments moments_;
  RowMatrixXd sum_;
  std::int64_t second_pass_count_ = 0;
};

// A replayable sequence of batches: each call visits every batch in order.
using StackedSource =
    std::function<void(const std::function<void(const StackedBatch&)>&)>;

ChannelMoments compute_channel_moments(const StackedSource& source);

// (x - mean) / stddev elementwise, with stddev taken as 1 where the variance
// is below kVarianceFloor.
RowMatrixXd standardize(const Eigen::Ref<const RowMatrixXd>& x,
                        const Eigen::Ref<const RowMatrixXd>& mean,
                        const Eigen::Ref<const RowMatrixXd>& stddev);
RowMatrixXd standardize(const Eigen::Ref<const RowMatrixXd>& x,
                        const ChannelMoments& moments);

// Per-channel standard deviations, C x D.
RowMatrixXd channel_stddev(const ChannelMoments& moments);

// D^{-1/2} Sigma_c D^{-1/2} per channel, D = diag(Sigma_c) (floored).
std::vector<Eigen::MatrixXd> covariance_to_correlation(
    const ChannelMoments& moments);

struct TuckerFactors {
  Eigen::MatrixXd channel_factor;  // A, C x c_proj, orthonormal columns
  Eigen::MatrixXd feature_factor;  // B, D x d_proj, orthonormal columns
  Eigen::VectorXd channel_singular_values;  // all C, descending
  Eigen::VectorXd feature_singular_values;  // all D, descending
};

// Truncated HOSVD of the C x D x D tensor. A holds the leading left singular
// vectors of the mode-1 unfolding, B those of the mode-2 unfolding (modes 2
// and 3 coincide because every slice is symmetric). Each column is signed so
// its first nonzero entry is positive.
TuckerFactors fit_tucker(std::span<const Eigen::MatrixXd> tensor,
                         std::int64_t c_proj, std::int64_t d_proj);

// Slice-wise projection of the tensor onto the factor subspaces:
// R_c -> sum_k (A A^T)_{ck} B B^T R_k B B^T. Equals the Tucker reconstruction
// from the core G = R x1 A^T x2 B^T x3 B^T.
std::vector<Eigen::MatrixXd> tucker_reconstruct(
    std::span<const Eigen::MatrixXd> tensor, const TuckerFactors& factors);

struct OutputScaling {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
};

struct TuckerProjection {
  RowMatrixXd channel_mean;    // C x D
  RowMatrixXd channel_stddev;  // C x D
  TuckerFactors factors;
  std::optional<OutputScaling> output_scaling;

  std::int64_t channels() const { return channel_mean.rows(); }
  std::int64_t features() const { return channel_mean.cols(); }
  std::int64_t c_proj() const { return factors.channel_factor.cols(); }
  std::int64_t d_proj() const { return factors.feature_factor.cols(); }
  std::int64_t output_size() const { return c_proj() * d_proj(); }
};

TuckerProjection make_projection(const ChannelMoments& moments,
                                 TuckerFactors factors);

// A^T X B flattened row-major. X must already be standardized.
Eigen::VectorXd project(const Eigen::Ref<const RowMatrixXd>& x,
                        const TuckerProjection& projection);

// Fits the optional final (mean, stddev) scaling on projected features.
OutputScaling fit_output_scaling(const Eigen::Ref<const RowMatrixXd>& z);
void apply_output_scaling(const OutputScaling& scaling,
                          Eigen::Ref<RowMatrixXd> z);

// reshape_concat -> standardize -> project -> optional output scaling.
// Returns B x (c_proj * d_proj). A non-finite activation throws ComputeError
// naming the sample index.
RowMatrixXd process_pipeline(std::span<const ActivationBatch> layers,
                             const TuckerProjection& projection,
                             bool apply_output_scale);
RowMatrixXd process_stacked(const StackedBatch& batch,
                            const TuckerProjection& projection,
                            bool apply_output_scale);

// {1} if extent == 1, otherwise powers of two below extent followed by extent.
std::vector<std::int64_t> dim_grid(std::int64_t extent);

// "PSCP" binary file, all values binary64 little-endian.
void save_projection(const std::filesystem::path& path,
                     const TuckerProjection& projection);
TuckerProjection load_projection(const std::filesystem::path& path);

}  // namespace psc

#endif  // PSC_PROJECTION_H_
