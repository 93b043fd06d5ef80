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

#include "psc/collapse_metrics.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "json.hpp"

namespace psc {

CollapseAccumulator::CollapseAccumulator(std::int64_t feature_size,
                                         int class_count)
    : class_count_(class_count),
      sums_(RowMatrixXd::Zero(class_count, feature_size)) {
  if (class_count < 1) throw ValidationError("class_count must be >= 1");
  if (feature_size < 1) throw ValidationError("feature_size must be >= 1");
  stats_.counts.assign(class_count, 0);
}

void CollapseAccumulator::check(const Eigen::Ref<const RowMatrixXd>& features,
                                std::span<const int> labels) const {
  if (features.cols() != sums_.cols()) {
    throw ValidationError("feature size mismatch: expected " +
                          std::to_string(sums_.cols()) + ", got " +
                          std::to_string(features.cols()));
  }
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw ValidationError("label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count_) {
      throw ValidationError("label " + std::to_string(y) + " out of range");
    }
  }
}

void CollapseAccumulator::add_mean_pass(
    const Eigen::Ref<const RowMatrixXd>& features,
    std::span<const int> labels) {
  if (phase_ != Phase::kMean) throw std::logic_error("mean pass already done");
  check(features, labels);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    sums_.row(labels[i]) += features.row(i);
    ++stats_.counts[labels[i]];
  }
  sample_count_ += features.rows();
}

void CollapseAccumulator::finish_mean_pass() {
  if (phase_ != Phase::kMean) throw std::logic_error("mean pass already done");
  stats_.class_means = RowMatrixXd::Zero(class_count_, sums_.cols());
  stats_.grand_mean = Eigen::VectorXd::Zero(sums_.cols());
  stats_.nonempty_classes = 0;
  for (int c = 0; c < class_count_; ++c) {
    if (stats_.counts[c] == 0) {
      warn("class " + std::to_string(c) +
           " has no samples; excluded from the grand mean");
      continue;
    }
    stats_.class_means.row(c) = sums_.row(c) / double(stats_.counts[c]);
    stats_.grand_mean += stats_.class_means.row(c).transpose();
    ++stats_.nonempty_classes;
  }
  if (stats_.nonempty_classes == 0) {
    throw ValidationError("no samples");
  }
  stats_.grand_mean /= double(stats_.nonempty_classes);
  phase_ = Phase::kTrace;
}

void CollapseAccumulator::add_trace_pass(
    const Eigen::Ref<const RowMatrixXd>& features,
    std::span<const int> labels) {
  if (phase_ != Phase::kTrace) throw std::logic_error("mean pass not finished");
  check(features, labels);
  const Eigen::RowVectorXd grand = stats_.grand_mean.transpose();
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    within_sum_ += (features.row(i) - stats_.class_means.row(labels[i]))
                       .squaredNorm();
    total_sum_ += (features.row(i) - grand).squaredNorm();
  }
}

ClassStatistics CollapseAccumulator::finish() {
  if (phase_ != Phase::kTrace) throw std::logic_error("mean pass not finished");
  const double norm = double(sample_count_) * stats_.nonempty_classes;
  stats_.within_trace = within_sum_ / norm;
  stats_.total_trace = total_sum_ / norm;
  phase_ = Phase::kDone;
  return stats_;
}

ClassStatistics class_statistics(const Eigen::Ref<const RowMatrixXd>& features,
                                 std::span<const int> labels,
                                 int class_count) {
  CollapseAccumulator acc(features.cols(), class_count);
  acc.add_mean_pass(features, labels);
  acc.finish_mean_pass();
  acc.add_trace_pass(features, labels);
  return acc.finish();
}

double nc1_from(const ClassStatistics& stats) {
  if (!(stats.total_trace > 0.0)) {
    throw ComputeError("degenerate activations: total covariance trace is 0");
  }
  return stats.within_trace / stats.total_trace;
}

double nc1(const Eigen::Ref<const RowMatrixXd>& features,
           std::span<const int> labels, int class_count) {
  if (features.rows() < 2) throw ValidationError("nc1 needs N >= 2");
  return nc1_from(class_statistics(features, labels, class_count));
}

NearestCentroid::NearestCentroid(RowMatrixXd centroids,
                                 std::span<const std::int64_t> counts)
    : centroids_(std::move(centroids)) {
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw ValidationError("class " + std::to_string(c) +
                            " missing from train");
    }
  }
}

int NearestCentroid::predict(
    const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  int best = 0;
  double best_distance = (x - centroids_.row(0)).squaredNorm();
  for (Eigen::Index c = 1; c < centroids_.rows(); ++c) {
    const double d = (x - centroids_.row(c)).squaredNorm();
    if (d < best_distance) {
      best_distance = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::int64_t NearestCentroid::count_correct(
    const Eigen::Ref<const RowMatrixXd>& features,
    std::span<const int> labels) const {
  if (features.cols() != centroids_.cols()) {
    throw ValidationError("feature size mismatch between train and eval");
  }
  std::int64_t correct = 0;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    if (predict(features.row(i)) == labels[i]) ++correct;
  }
  return correct;
}

double nc4(const Eigen::Ref<const RowMatrixXd>& train_features,
           std::span<const int> train_labels,
           const Eigen::Ref<const RowMatrixXd>& eval_features,
           std::span<const int> eval_labels, int class_count) {
  if (eval_features.rows() == 0) throw ValidationError("empty eval set");
  if (static_cast<std::size_t>(eval_features.rows()) != eval_labels.size()) {
    throw ValidationError("label count mismatch");
  }
  CollapseAccumulator acc(train_features.cols(), class_count);
  acc.add_mean_pass(train_features, train_labels);
  // Missing classes are an error for NC4, so check before the mean pass warns.
  for (int c = 0; c < class_count; ++c) {
    if (acc.counts()[c] == 0) {
      throw ValidationError("class " + std::to_string(c) +
                            " missing from train");
    }
  }
  acc.finish_mean_pass();
  NearestCentroid ncc(acc.class_means(), acc.counts());
  return double(ncc.count_correct(eval_features, eval_labels)) /
         double(eval_features.rows());
}

CandidateSelection select_candidate(std::span<const LayerCollapse> layers,
                                    double epsilon, double near_band) {
  if (layers.empty()) throw ValidationError("empty collapse report");
  std::vector<LayerCollapse> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.layer_id < b.layer_id; });

  CandidateSelection selection;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!(sorted[i].nc1 > epsilon)) continue;
    if (!best || sorted[i].nc4 >= sorted[*best].nc4) best = i;
  }
  if (!best) {
    std::size_t widest = 0;
    for (std::size_t i = 1; i < sorted.size(); ++i) {
      if (sorted[i].nc1 > sorted[widest].nc1) widest = i;
    }
    selection.layers = {sorted[widest].layer_id};
    selection.all_collapsed = true;
    return selection;
  }
  selection.layers = {sorted[*best].layer_id};
  if (std::abs(sorted[*best].nc1 - epsilon) <= near_band &&
      *best + 1 < sorted.size()) {
    selection.layers.push_back(sorted[*best + 1].layer_id);
  }
  return selection;
}

namespace {

RowMatrixXd to_double(const RowMatrixXf& values) {
  return values.cast<double>();
}

}  // namespace

CollapseReport scan_layers(const ActivationDataset& train,
                           const ActivationDataset& val,
                           const ScanOptions& options) {
  if (train.layers().empty()) throw ValidationError("no layers");
  if (train.layer_ids() != val.layer_ids()) {
    throw ValidationError("train and val datasets list different layers");
  }
  if (train.class_count() != val.class_count()) {
    throw ValidationError("train and val datasets disagree on class_count");
  }
  CollapseReport report;
  report.epsilon = options.epsilon;
  report.near_band = options.near_band;
  const int classes = train.class_count();

  for (const auto& layer : train.layers()) {
    const std::uint32_t id = layer.layer_id;
    try {
      CollapseAccumulator acc(
          static_cast<std::int64_t>(layer.header.feature_size()), classes);
      {
        auto stream = train.read_batches(id, options.batch_size);
        while (auto batch = stream.next()) {
          const auto& b = batch->front();
          acc.add_mean_pass(to_double(b.values), b.labels);
        }
      }
      for (int c = 0; c < classes; ++c) {
        if (acc.counts()[c] == 0) {
          throw ValidationError("class " + std::to_string(c) +
                                " missing from train");
        }
      }
      acc.finish_mean_pass();
      {
        auto stream = train.read_batches(id, options.batch_size);
        while (auto batch = stream.next()) {
          const auto& b = batch->front();
          acc.add_trace_pass(to_double(b.values), b.labels);
        }
      }
      const NearestCentroid ncc(acc.class_means(), acc.counts());
      const ClassStatistics stats = acc.finish();
      if (train.sample_count() < 2) throw ValidationError("nc1 needs N >= 2");

      LayerCollapse entry;
      entry.layer_id = id;
      entry.nc1 = nc1_from(stats);
      std::int64_t correct = 0;
      auto stream = val.read_batches(id, options.batch_size);
      while (auto batch = stream.next()) {
        const auto& b = batch->front();
        correct += ncc.count_correct(to_double(b.values), b.labels);
      }
      entry.nc4 = double(correct) / double(val.sample_count());
      report.layers.push_back(entry);
    } catch (const ValidationError& e) {
      throw ValidationError("layer " + std::to_string(id) + ": " + e.what());
    } catch (const ComputeError& e) {
      throw ComputeError("layer " + std::to_string(id) + ": " + e.what());
    }
  }
  report.selection =
      select_candidate(report.layers, options.epsilon, options.near_band);
  return report;
}

std::string collapse_csv(const CollapseReport& report) {
  std::ostringstream out;
  out << "layer_id,nc1,nc4,candidate\n";
  for (const auto& layer : report.layers) {
    const bool candidate =
        std::find(report.selection.layers.begin(),
                  report.selection.layers.end(),
                  layer.layer_id) != report.selection.layers.end();
    out << layer.layer_id << ',' << format_double(layer.nc1) << ','
        << format_double(layer.nc4) << ',' << (candidate ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string collapse_json(const CollapseReport& report) {
  nlohmann::ordered_json doc;
  doc["epsilon"] = report.epsilon;
  doc["near_band"] = report.near_band;
  doc["candidate_layers"] = report.selection.layers;
  doc["all_collapsed"] = report.selection.all_collapsed;
  doc["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : report.layers) {
    doc["layers"].push_back(
        {{"layer_id", layer.layer_id}, {"nc1", layer.nc1}, {"nc4", layer.nc4}});
  }
  return doc.dump(2) + "\n";
}

CollapseReport collapse_from_json(const std::string& text) {
  CollapseReport report;
  try {
    const auto doc = nlohmann::json::parse(text);
    report.epsilon = doc.at("epsilon").get<double>();
    report.near_band = doc.at("near_band").get<double>();
    report.selection.layers =
        doc.at("candidate_layers").get<std::vector<std::uint32_t>>();
    report.selection.all_collapsed = doc.at("all_collapsed").get<bool>();
    for (const auto& entry : doc.at("layers")) {
      report.layers.push_back({entry.at("layer_id").get<std::uint32_t>(),
                               entry.at("nc1").get<double>(),
                               entry.at("nc4").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed collapse report: ") +
                          e.what());
  }
  if (report.selection.layers.empty()) {
    throw ValidationError("collapse report lists no candidate layers");
  }
  return report;
}

}  // namespace psc
