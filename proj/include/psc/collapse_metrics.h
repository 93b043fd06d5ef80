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

// Layerwise neural-collapse metrics and candidate-layer selection.
//
// NC1 is Tr(Sigma_W) / Tr(Sigma_T), where Sigma_W collects deviations of each
// sample from its class mean and Sigma_T deviations from the grand mean. The
// grand mean is the unweighted average of the non-empty class means. Both
// covariances share the 1/(N*C) normaliser, so it cancels in the ratio. Only
// traces are formed; no p x p matrix is ever built.
//
// NC4 is the accuracy of a nearest-class-centroid classifier whose centroids
// come from the training split.

#ifndef PSC_COLLAPSE_METRICS_H_
#define PSC_COLLAPSE_METRICS_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "psc/activation_store.h"
#include "psc/common.h"

namespace psc {

inline constexpr double kDefaultCollapseCutoff = 0.2;
inline constexpr double kDefaultNearBand = 0.05;

struct ClassStatistics {
  RowMatrixXd class_means;  // class_count x p; rows of empty classes are 0
  Eigen::VectorXd grand_mean;
  std::vector<std::int64_t> counts;
  double within_trace = 0.0;  // sum_i |h_i - mu_{y_i}|^2 / (N * C)
  double total_trace = 0.0;   // sum_i |h_i - mu_G|^2 / (N * C)
  int nonempty_classes = 0;
};

// Two-pass accumulator. Feed every batch to add_mean_pass(), call
// finish_mean_pass(), feed the same batches again to add_trace_pass(), then
// call finish(). Batch boundaries do not affect the result beyond rounding.
class CollapseAccumulator {
 public:
  CollapseAccumulator(std::int64_t feature_size, int class_count);

  void add_mean_pass(const Eigen::Ref<const RowMatrixXd>& features,
                     std::span<const int> labels);
  void finish_mean_pass();
  void add_trace_pass(const Eigen::Ref<const RowMatrixXd>& features,
                      std::span<const int> labels);
  ClassStatistics finish();

  // Valid after finish_mean_pass().
  const RowMatrixXd& class_means() const { return stats_.class_means; }
  const std::vector<std::int64_t>& counts() const { return stats_.counts; }

 private:
  enum class Phase { kMean, kTrace, kDone };
  void check(const Eigen::Ref<const RowMatrixXd>& features,
             std::span<const int> labels) const;

  Phase phase_ = Phase::kMean;
  int class_count_;
  std::int64_t sample_count_ = 0;
  RowMatrixXd sums_;
  double within_sum_ = 0.0;
  double total_sum_ = 0.0;
  ClassStatistics stats_;
};

ClassStatistics class_statistics(const Eigen::Ref<const RowMatrixXd>& features,
                                 std::span<const int> labels, int class_count);

// Ratio of within-class to total covariance trace. Throws ComputeError
// ("degenerate activations") when the total trace is zero.
double nc1(const Eigen::Ref<const RowMatrixXd>& features,
           std::span<const int> labels, int class_count);
double nc1_from(const ClassStatistics& stats);

// Nearest-centroid classifier. Ties go to the lowest class index.
class NearestCentroid {
 public:
  // Throws ValidationError if some class in [0, class_count) has no sample.
  NearestCentroid(RowMatrixXd centroids, std::span<const std::int64_t> counts);

  int predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  std::int64_t count_correct(const Eigen::Ref<const RowMatrixXd>& features,
                             std::span<const int> labels) const;

 private:
  RowMatrixXd centroids_;
};

double nc4(const Eigen::Ref<const RowMatrixXd>& train_features,
           std::span<const int> train_labels,
           const Eigen::Ref<const RowMatrixXd>& eval_features,
           std::span<const int> eval_labels, int class_count);

struct LayerCollapse {
  std::uint32_t layer_id = 0;
  double nc1 = 0.0;
  double nc4 = 0.0;
};

struct CandidateSelection {
  std::vector<std::uint32_t> layers;  // one or two ids, shallow first
  bool all_collapsed = false;
};

struct CollapseReport {
  std::vector<LayerCollapse> layers;  // depth order
  double epsilon = kDefaultCollapseCutoff;
  double near_band = kDefaultNearBand;
  CandidateSelection selection;
};

// Among layers with nc1 > epsilon picks the highest nc4 (ties: deeper layer).
// If that layer's nc1 lies within near_band of epsilon the next deeper layer
// is added. With no layer above the cutoff, falls back to the layer with the
// largest nc1 and sets all_collapsed.
CandidateSelection select_candidate(std::span<const LayerCollapse> layers,
                                    double epsilon = kDefaultCollapseCutoff,
                                    double near_band = kDefaultNearBand);

struct ScanOptions {
  double epsilon = kDefaultCollapseCutoff;
  double near_band = kDefaultNearBand;
  std::uint64_t batch_size = 1024;
};

// NC1 on train, NC4 fit on train and scored on val, one layer at a time.
CollapseReport scan_layers(const ActivationDataset& train,
                           const ActivationDataset& val,
                           const ScanOptions& options = {});

// "layer_id,nc1,nc4,candidate" with one row per layer.
std::string collapse_csv(const CollapseReport& report);
std::string collapse_json(const CollapseReport& report);
CollapseReport collapse_from_json(const std::string& text);

}  // namespace psc

#endif  // PSC_COLLAPSE_METRICS_H_
