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

#include "psc/evaluation.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace psc {

double auroc(std::span<const double> positive,
             std::span<const double> negative) {
  if (positive.empty() || negative.empty()) {
    throw ValidationError("auroc needs non-empty positive and negative groups");
  }
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(positive.size() + negative.size());
  for (double s : positive) items.push_back({s, true});
  for (double s : negative) items.push_back({s, false});
  for (const auto& item : items) {
    if (!std::isfinite(item.score)) {
      throw ValidationError("auroc: non-finite score");
    }
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score < b.score; });

  // Sum of average ranks (1-based) over the positive group.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    const double average_rank = 0.5 * double(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (items[t].positive) rank_sum += average_rank;
    }
    i = j;
  }
  const double np = double(positive.size());
  const double nn = double(negative.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

int confidence_bin(double confidence, int bin_count) {
  if (bin_count < 1) throw ValidationError("bin_count must be >= 1");
  int bin = static_cast<int>(std::ceil(confidence * bin_count)) - 1;
  bin = std::clamp(bin, 0, bin_count - 1);
  // Repair rounding so that edges land in the bin they close.
  while (bin > 0 && confidence <= double(bin) / bin_count) --bin;
  while (bin < bin_count - 1 && confidence > double(bin + 1) / bin_count) ++bin;
  return bin;
}

namespace {

Eigen::Index argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < row.size(); ++c) {
    if (row(c) > row(best)) best = c;
  }
  return best;
}

void check_probabilities(const Eigen::Ref<const RowMatrixXd>& probabilities,
                         std::span<const int> labels) {
  if (probabilities.rows() == 0) throw ValidationError("empty input");
  if (static_cast<std::size_t>(probabilities.rows()) != labels.size()) {
    throw ValidationError("label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= probabilities.cols()) {
      throw ValidationError("label " + std::to_string(y) + " out of range");
    }
  }
}

}  // namespace

double ece(const Eigen::Ref<const RowMatrixXd>& probabilities,
           std::span<const int> labels, int bin_count) {
  check_probabilities(probabilities, labels);
  std::vector<double> confidence_sum(bin_count, 0.0);
  std::vector<double> correct(bin_count, 0.0);
  std::vector<std::int64_t> count(bin_count, 0);
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    const Eigen::Index pred = argmax_lowest(probabilities.row(i));
    const double conf = probabilities(i, pred);
    const int b = confidence_bin(conf, bin_count);
    confidence_sum[b] += conf;
    correct[b] += (pred == labels[i]) ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = double(probabilities.rows());
  double total = 0.0;
  for (int b = 0; b < bin_count; ++b) {
    if (count[b] == 0) continue;
    total += std::abs(correct[b] - confidence_sum[b]) / n;
  }
  return total;
}

NllAccuracy nll_accuracy(const Eigen::Ref<const RowMatrixXd>& probabilities,
                         std::span<const int> labels) {
  check_probabilities(probabilities, labels);
  NllAccuracy out;
  double correct = 0.0;
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    out.nll -= std::log(std::max(probabilities(i, labels[i]), kProbabilityFloor));
    if (argmax_lowest(probabilities.row(i)) == labels[i]) correct += 1.0;
  }
  const double n = double(probabilities.rows());
  out.nll /= n;
  out.accuracy = correct / n;
  return out;
}

Histogram entropy_histogram(
    const std::map<std::string, std::vector<double>>& scores_by_group,
    int bin_count) {
  if (bin_count < 1) throw ValidationError("bin_count must be >= 1");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& [group, scores] : scores_by_group) {
    if (scores.empty()) warn("histogram group \"" + group + "\" is empty");
    for (double s : scores) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  Histogram h;
  if (lo > hi) {
    lo = 0.0;
    hi = 1.0;
  }
  h.edges.resize(bin_count + 1);
  for (int b = 0; b <= bin_count; ++b) {
    h.edges[b] = lo + (hi - lo) * double(b) / bin_count;
  }
  h.edges[bin_count] = hi;
  for (const auto& [group, scores] : scores_by_group) {
    std::vector<std::int64_t> counts(bin_count, 0);
    for (double s : scores) {
      // Largest b with edges[b] <= s, capped to the closed last bin.
      auto it = std::upper_bound(h.edges.begin(), h.edges.end(), s);
      int b = static_cast<int>(it - h.edges.begin()) - 1;
      b = lo == hi ? 0 : std::clamp(b, 0, bin_count - 1);
      ++counts[b];
    }
    h.counts[group] = std::move(counts);
  }
  return h;
}

std::string histogram_csv(const Histogram& histogram) {
  std::ostringstream out;
  out << "group,bin_left,bin_right,count\n";
  for (const auto& [group, counts] : histogram.counts) {
    for (std::size_t b = 0; b < counts.size(); ++b) {
      out << group << ',' << format_double(histogram.edges[b]) << ','
          << format_double(histogram.edges[b + 1]) << ',' << counts[b] << '\n';
    }
  }
  return out.str();
}

std::string metrics_json(const std::map<std::string, double>& metrics) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [key, value] : metrics) doc[key] = value;
  return doc.dump(2) + "\n";
}

}  // namespace psc
