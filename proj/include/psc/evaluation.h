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

#ifndef PSC_EVALUATION_H_
#define PSC_EVALUATION_H_

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "psc/common.h"

namespace psc {

inline constexpr int kDefaultEceBins = 15;
inline constexpr int kDefaultHistogramBins = 50;
inline constexpr double kProbabilityFloor = 1e-12;

// Probability that a positive score outranks a negative one, ties counting
// one half. Computed from average ranks.
double auroc(std::span<const double> positive, std::span<const double> negative);

// Equal-width, right-closed confidence bins over the max probability; a
// confidence of exactly 0 falls into the first bin. probabilities is N x K.
double ece(const Eigen::Ref<const RowMatrixXd>& probabilities,
           std::span<const int> labels, int bin_count = kDefaultEceBins);

// Index of the right-closed bin holding `confidence`.
int confidence_bin(double confidence, int bin_count);

struct NllAccuracy {
  double nll = 0.0;
  double accuracy = 0.0;
};

// Argmax ties go to the lowest class index.
NllAccuracy nll_accuracy(const Eigen::Ref<const RowMatrixXd>& probabilities,
                         std::span<const int> labels);

struct Histogram {
  std::vector<double> edges;  // bin_count + 1, shared by all groups
  std::map<std::string, std::vector<std::int64_t>> counts;
};

// Bins are [e_b, e_{b+1}) except the last, which is closed. When every score
// is equal the single value lands in the first bin.
Histogram entropy_histogram(
    const std::map<std::string, std::vector<double>>& scores_by_group,
    int bin_count = kDefaultHistogramBins);

// "group,bin_left,bin_right,count"
std::string histogram_csv(const Histogram& histogram);

// Flat key -> value JSON object with sorted keys.
std::string metrics_json(const std::map<std::string, double>& metrics);

}  // namespace psc

#endif  // PSC_EVALUATION_H_
