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

// File-mediated pipeline behind the `psc` command. Every stage reads and
// writes fixed file names under RunConfig::out.

#ifndef PSC_WORKFLOW_H_
#define PSC_WORKFLOW_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psc/collapse_metrics.h"
#include "psc/toy_networks.h"

namespace psc {

inline constexpr char kCollapseCsv[] = "collapse.csv";
inline constexpr char kCandidatesJson[] = "candidates.json";
inline constexpr char kProjectionFile[] = "projection.pscp";
inline constexpr char kGdaFile[] = "gda.pscg";
inline constexpr char kLaplaceFile[] = "laplace.pscl";
inline constexpr char kFitReport[] = "fit_report.json";
inline constexpr char kPredictionsCsv[] = "predictions.csv";
inline constexpr char kPredictionsOodCsv[] = "predictions_ood.csv";
inline constexpr char kPredictionsAmbiguousCsv[] = "predictions_ambiguous.csv";
inline constexpr char kMetricsJson[] = "metrics.json";
inline constexpr char kHistogramCsv[] = "histogram.csv";

// Drift allowed on either collapse metric when choosing dims automatically.
inline constexpr double kDimSweepTolerance = 0.05;

enum class HeadSelection { kGda, kLaplace, kBoth };

std::string to_string(HeadSelection head);
HeadSelection head_from_string(const std::string& text);

struct ToyConfig {
  SignDatasetConfig dataset;
  MlpSpec mlp;
  TrainConfig training;
  // OOD points are test points moved by this many sigma along x_2.
  double ood_shift = 6.0;
  // Perturbation used for the sign_example.csv report, in sigma.
  double report_shift = 5.0;
};

struct RunConfig {
  std::optional<std::filesystem::path> train;
  std::optional<std::filesystem::path> val;
  std::optional<std::filesystem::path> test;
  std::optional<std::filesystem::path> ood;
  std::optional<std::filesystem::path> ambiguous;

  double epsilon = kDefaultCollapseCutoff;
  double near_band = kDefaultNearBand;
  std::optional<std::uint32_t> layer;  // forces the candidate
  // Empty means "auto".
  std::optional<std::pair<std::int64_t, std::int64_t>> dims;
  HeadSelection head = HeadSelection::kBoth;
  std::vector<double> lambda_grid;  // empty: default jitter grid
  std::optional<double> tau = 1.0;  // empty: select on val NLL
  std::vector<double> tau_grid = {0.01, 0.1, 1.0, 10.0, 100.0};
  int samples = 100;
  std::uint64_t seed = 0;
  std::uint64_t batch_size = 1024;
  std::int64_t gda_pca_dims = 0;  // 0 = off
  std::filesystem::path out = "psc_out";

  std::optional<ToyConfig> toy;
};

// Parses "CxD" or "auto".
std::optional<std::pair<std::int64_t, std::int64_t>> parse_dims(
    const std::string& text);

// Reads a JSON run config. Relative paths resolve against the file's
// directory. Unknown keys are rejected.
RunConfig load_run_config(const std::filesystem::path& path);

// Exclusive marker file in the output directory, removed on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Trains the sign-task MLP and writes dumps/{train,val,test,ood}.json with
// their layer files, toy.pscn, sign_example.csv and toy_report.json. Returns
// the config with the four manifest paths filled in.
RunConfig cmd_train_toy(const RunConfig& config);
void cmd_measure_collapse(const RunConfig& config);
void cmd_fit(const RunConfig& config);
void cmd_predict(const RunConfig& config);
void cmd_evaluate(const RunConfig& config);
// measure-collapse, fit, predict, evaluate. Runs train-toy first when the
// config has a toy section and no train manifest.
void cmd_all(const RunConfig& config);

}  // namespace psc

#endif  // PSC_WORKFLOW_H_
