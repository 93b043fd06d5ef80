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

// Output heads fit on projected features.
//
// GdaModel is a class-conditional Gaussian mixture: per-class mean, unbiased
// covariance and empirical prior. Its log-density is the OOD score (low means
// far from the training data).
//
// LaplaceLinearModel is a multinomial logistic regression with a
// Kronecker-factored Laplace posterior over its weights. Weights are K x (p+1)
// with the bias in the last column; vectorisation is column-major, so the
// curvature of one sample is (z z^T) kron (diag(p) - p p^T).

#ifndef PSC_UNCERTAINTY_HEADS_H_
#define PSC_UNCERTAINTY_HEADS_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "psc/common.h"

namespace psc {

double log_sum_exp(std::span<const double> values);
Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits);
// -sum p ln p with 0 ln 0 = 0.
double predictive_entropy(std::span<const double> probabilities);

// Optional PCA applied to features before GDA. Off unless requested.
struct PcaReducer {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // p x k, orthonormal, leading first

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& z) const;
  RowMatrixXd apply_rows(const Eigen::Ref<const RowMatrixXd>& z) const;
};
PcaReducer fit_pca(const Eigen::Ref<const RowMatrixXd>& z, std::int64_t dims);

std::vector<double> default_jitter_grid();  // 1e-9, 1e-8, ..., 1e-1

struct GdaOptions {
  std::vector<double> jitter_grid = default_jitter_grid();
  // Every k-th sample of each class (k = round(1 / holdout_fraction)) scores
  // the jitter candidates.
  double holdout_fraction = 0.2;
};

struct GdaModel {
  Eigen::VectorXd priors;                  // K
  RowMatrixXd means;                       // K x p
  std::vector<Eigen::MatrixXd> covariances;  // unbiased, without jitter
  std::vector<Eigen::MatrixXd> cholesky;     // lower factor of cov + jitter*I
  std::vector<double> log_determinants;
  double jitter = 0.0;
  std::optional<PcaReducer> pca;

  int class_count() const { return static_cast<int>(priors.size()); }
  std::int64_t dim() const { return means.cols(); }
};

// Requires >= 2 samples per class. The jitter is chosen from the grid by
// held-out log-density, then the model is refit on all samples.
GdaModel fit_gda(const Eigen::Ref<const RowMatrixXd>& z,
                 std::span<const int> labels, int class_count,
                 const GdaOptions& options = {});

// log pi_c + log N(z; mu_c, Sigma_c + jitter I), one entry per class.
Eigen::VectorXd gda_class_log_terms(const GdaModel& model,
                                    const Eigen::Ref<const Eigen::VectorXd>& z);
double gda_log_density(const GdaModel& model,
                       const Eigen::Ref<const Eigen::VectorXd>& z);
// p(y = c | z) under the mixture.
Eigen::VectorXd gda_class_posterior(const GdaModel& model,
                                    const Eigen::Ref<const Eigen::VectorXd>& z);

// Appends the bias feature.
Eigen::VectorXd with_bias(const Eigen::Ref<const Eigen::VectorXd>& z);

// sum_i CE(softmax(W z~_i), y_i) + tau/2 |W|_F^2, and its gradient (K x p+1).
double logistic_objective(const Eigen::Ref<const RowMatrixXd>& weights,
                          const Eigen::Ref<const RowMatrixXd>& z,
                          std::span<const int> labels, double tau,
                          RowMatrixXd* gradient = nullptr);

struct LinearFitOptions {
  // Bound on the infinity norm of the objective's gradient divided by N.
  double gradient_tolerance = 1e-6;
  int max_iterations = 500;
};

struct LinearFitResult {
  RowMatrixXd weights;  // K x (p+1)
  double gradient_norm = 0.0;
  int iterations = 0;
};

// Damped Newton on the convex objective above. Throws ComputeError if the
// tolerance is not met within max_iterations.
LinearFitResult train_linear_map(const Eigen::Ref<const RowMatrixXd>& z,
                                 std::span<const int> labels, int class_count,
                                 double tau, const LinearFitOptions& options = {});

inline constexpr int kDefaultPosteriorSamples = 100;

struct LaplaceLinearModel {
  RowMatrixXd weights;           // MAP, K x (p+1)
  Eigen::MatrixXd input_factor;  // (1/N) sum z~ z~^T
  Eigen::MatrixXd output_factor; // (1/N) sum diag(p) - p p^T
  double prior_precision = 1.0;
  std::int64_t sample_count = 0;

  // Eigendecompositions of sqrt(N) F + sqrt(tau) I for each factor.
  Eigen::MatrixXd input_basis;
  Eigen::VectorXd input_eigenvalues;
  Eigen::MatrixXd output_basis;
  Eigen::VectorXd output_eigenvalues;

  int class_count() const { return static_cast<int>(weights.rows()); }
  std::int64_t dim() const { return weights.cols() - 1; }

  // Dense (sqrt(N) A + sqrt(tau) I) kron (sqrt(N) G + sqrt(tau) I). Only
  // sensible for small models.
  Eigen::MatrixXd posterior_precision() const;
};

LaplaceLinearModel fit_laplace(const Eigen::Ref<const RowMatrixXd>& z,
                               std::span<const int> labels,
                               const Eigen::Ref<const RowMatrixXd>& weights,
                               double tau);

Eigen::VectorXd map_probabilities(const LaplaceLinearModel& model,
                                  const Eigen::Ref<const Eigen::VectorXd>& z);

// Mean softmax over `samples` weight draws from the matrix-normal posterior.
Eigen::VectorXd predict_probabilities(const LaplaceLinearModel& model,
                                      const Eigen::Ref<const Eigen::VectorXd>& z,
                                      int samples, std::uint64_t seed);

// Row i uses seed base_seed ^ (first_index + i), so results do not depend on
// batching or thread count.
RowMatrixXd predict_probabilities_batch(const LaplaceLinearModel& model,
                                        const Eigen::Ref<const RowMatrixXd>& z,
                                        int samples, std::uint64_t base_seed,
                                        std::uint64_t first_index);

// Picks tau from the grid by validation NLL of the MAP predictions.
double select_prior_precision(const Eigen::Ref<const RowMatrixXd>& train_z,
                              std::span<const int> train_labels,
                              const Eigen::Ref<const RowMatrixXd>& val_z,
                              std::span<const int> val_labels,
                              int class_count, std::span<const double> grid);

struct UncertaintyOutput {
  Eigen::VectorXd probabilities;
  double entropy = 0.0;
  double log_density = 0.0;
  bool ood = false;
};

// "PSCG" and "PSCL" binary files, values binary64 little-endian.
void save_gda(const std::filesystem::path& path, const GdaModel& model);
GdaModel load_gda(const std::filesystem::path& path);
void save_laplace(const std::filesystem::path& path,
                  const LaplaceLinearModel& model);
LaplaceLinearModel load_laplace(const std::filesystem::path& path);

}  // namespace psc

#endif  // PSC_UNCERTAINTY_HEADS_H_
