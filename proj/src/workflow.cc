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

#include "psc/workflow.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "psc/activation_store.h"
#include "psc/evaluation.h"
#include "psc/projection.h"
#include "psc/uncertainty_heads.h"

namespace psc {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw ComputeError("write failed: " + path.string());
}

json parse_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

const fs::path& require(const std::optional<fs::path>& path,
                        const char* flag) {
  if (!path) {
    throw ValidationError(std::string("missing ") + flag + " manifest");
  }
  return *path;
}

// ---------------------------------------------------------------- config

void check_keys(const json& object, std::initializer_list<const char*> known,
                const std::string& where) {
  if (!object.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [key, value] : object.items()) {
    (void)value;
    if (std::find_if(known.begin(), known.end(), [&](const char* k) {
          return key == k;
        }) == known.end()) {
      throw ValidationError("unknown key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
void read_field(const json& object, const char* key, T& target) {
  if (!object.contains(key)) return;
  try {
    target = object.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad value for \"") + key + "\": " +
                          e.what());
  }
}

ToyConfig toy_from_json(const json& doc) {
  check_keys(doc, {"dataset", "mlp", "training", "ood_shift", "report_shift"},
             "toy");
  ToyConfig toy;
  if (doc.contains("dataset")) {
    const json& d = doc["dataset"];
    check_keys(d, {"sigma", "flip_probability", "n_train", "n_val", "n_test",
                   "seed"},
               "toy.dataset");
    read_field(d, "sigma", toy.dataset.sigma);
    read_field(d, "flip_probability", toy.dataset.flip_probability);
    read_field(d, "n_train", toy.dataset.n_train);
    read_field(d, "n_val", toy.dataset.n_val);
    read_field(d, "n_test", toy.dataset.n_test);
    read_field(d, "seed", toy.dataset.seed);
  }
  if (doc.contains("mlp")) {
    const json& m = doc["mlp"];
    check_keys(m, {"hidden", "negative_slope", "sn_bound"}, "toy.mlp");
    read_field(m, "hidden", toy.mlp.hidden);
    read_field(m, "negative_slope", toy.mlp.negative_slope);
    if (m.contains("sn_bound") && !m["sn_bound"].is_null()) {
      double bound = 0.0;
      read_field(m, "sn_bound", bound);
      toy.mlp.sn_bound = bound;
    }
  }
  if (doc.contains("training")) {
    const json& t = doc["training"];
    check_keys(t, {"epochs", "lr_start", "lr_end", "beta1", "beta2",
                   "adam_epsilon", "weight_decay", "batch_size", "seed"},
               "toy.training");
    read_field(t, "epochs", toy.training.epochs);
    read_field(t, "lr_start", toy.training.lr_start);
    read_field(t, "lr_end", toy.training.lr_end);
    read_field(t, "beta1", toy.training.beta1);
    read_field(t, "beta2", toy.training.beta2);
    read_field(t, "adam_epsilon", toy.training.adam_epsilon);
    read_field(t, "weight_decay", toy.training.weight_decay);
    read_field(t, "batch_size", toy.training.batch_size);
    read_field(t, "seed", toy.training.seed);
  }
  read_field(doc, "ood_shift", toy.ood_shift);
  read_field(doc, "report_shift", toy.report_shift);
  return toy;
}

// ---------------------------------------------------------------- streams

StackedSource stacked_source(const ActivationDataset& dataset,
                             std::vector<std::uint32_t> layer_ids,
                             std::uint64_t batch_size) {
  return [&dataset, layer_ids = std::move(layer_ids), batch_size](
             const std::function<void(const StackedBatch&)>& sink) {
    BatchStream stream = dataset.read_batches(layer_ids, batch_size);
    while (auto batches = stream.next()) sink(reshape_concat(*batches));
  };
}

struct CollapsePair {
  double nc1 = 0.0;
  double nc4 = 0.0;
};

// NC1 on train and NC4 (train centroids, val points) of the projected,
// unscaled features.
CollapsePair collapse_under(const StackedSource& train,
                            const StackedSource& val,
                            const TuckerProjection& projection,
                            int class_count) {
  CollapseAccumulator acc(projection.output_size(), class_count);
  train([&](const StackedBatch& b) {
    acc.add_mean_pass(process_stacked(b, projection, false), b.labels);
  });
  acc.finish_mean_pass();
  train([&](const StackedBatch& b) {
    acc.add_trace_pass(process_stacked(b, projection, false), b.labels);
  });
  const ClassStatistics stats = acc.finish();
  CollapsePair out;
  out.nc1 = nc1_from(stats);
  const NearestCentroid centroids(stats.class_means, stats.counts);
  std::int64_t correct = 0;
  std::int64_t total = 0;
  val([&](const StackedBatch& b) {
    correct += centroids.count_correct(process_stacked(b, projection, false),
                                       b.labels);
    total += b.size();
  });
  if (total == 0) throw ValidationError("empty val split");
  out.nc4 = double(correct) / double(total);
  return out;
}

TuckerFactors truncate(const TuckerFactors& full, std::int64_t c,
                       std::int64_t d) {
  TuckerFactors out = full;
  out.channel_factor = full.channel_factor.leftCols(c);
  out.feature_factor = full.feature_factor.leftCols(d);
  return out;
}

TuckerFactors identity_factors(const TuckerFactors& full) {
  TuckerFactors out = full;
  out.channel_factor = Eigen::MatrixXd::Identity(full.channel_factor.rows(),
                                                 full.channel_factor.rows());
  out.feature_factor = Eigen::MatrixXd::Identity(full.feature_factor.rows(),
                                                 full.feature_factor.rows());
  return out;
}

struct ProjectedSplit {
  RowMatrixXd z;
  std::vector<int> labels;
};

ProjectedSplit collect(const StackedSource& source,
                       const TuckerProjection& projection, bool scaled) {
  std::vector<RowMatrixXd> parts;
  ProjectedSplit out;
  std::int64_t rows = 0;
  source([&](const StackedBatch& b) {
    parts.push_back(process_stacked(b, projection, scaled));
    rows += b.size();
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  });
  out.z.resize(rows, projection.output_size());
  std::int64_t at = 0;
  for (const auto& part : parts) {
    out.z.middleRows(at, part.rows()) = part;
    at += part.rows();
  }
  return out;
}

std::vector<std::uint32_t> candidate_layers(const RunConfig& config) {
  if (config.layer) return {*config.layer};
  const fs::path path = config.out / kCandidatesJson;
  if (!fs::exists(path)) {
    throw ValidationError("no " + path.string() +
                          "; run measure-collapse or pass --layer");
  }
  const CollapseReport report = collapse_from_json(read_text(path));
  if (report.selection.layers.empty()) {
    throw ValidationError(path.string() + ": no candidate layers");
  }
  return report.selection.layers;
}

void check_layers(const ActivationDataset& dataset,
                  const std::vector<std::uint32_t>& layers,
                  const std::string& flag) {
  for (auto id : layers) {
    if (!dataset.has_layer(id)) {
      throw ValidationError(flag + " manifest has no layer " +
                            std::to_string(id));
    }
  }
}

std::pair<std::int64_t, std::int64_t> tensor_extent(
    const ActivationDataset& dataset, const std::vector<std::uint32_t>& layers) {
  std::int64_t channels = 0;
  std::int64_t features = 0;
  for (auto id : layers) {
    const auto& header = dataset.layer(id).header;
    channels = static_cast<std::int64_t>(header.channels());
    features += static_cast<std::int64_t>(header.spatial_size());
  }
  return {channels, features};
}

std::string sweep_table(const json& sweep) {
  std::ostringstream out;
  out << "c_proj,d_proj,nc1,nc4,accepted";
  for (const auto& row : sweep) {
    out << '\n'
        << row["c_proj"].get<std::int64_t>() << ','
        << row["d_proj"].get<std::int64_t>() << ','
        << format_double(row["nc1"].get<double>()) << ','
        << format_double(row["nc4"].get<double>()) << ','
        << (row["accepted"].get<bool>() ? 1 : 0);
  }
  return out.str();
}

// ---------------------------------------------------------------- predict

struct PredictionRows {
  std::vector<int> labels;
  std::vector<double> log_density;
  std::vector<double> entropy;
  RowMatrixXd probabilities;
};

int argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = k;
  }
  return static_cast<int>(best);
}

std::string prediction_csv(const ActivationDataset& dataset,
                           const std::vector<std::uint32_t>& layers,
                           const TuckerProjection& projection,
                           const std::optional<GdaModel>& gda,
                           const std::optional<LaplaceLinearModel>& laplace,
                           const RunConfig& config, int class_count) {
  std::ostringstream out;
  out << "sample_id,label,pred,log_density,entropy";
  for (int k = 0; k < class_count; ++k) out << ",p_" << k;
  out << '\n';
  BatchStream stream = dataset.read_batches(layers, config.batch_size);
  while (auto batches = stream.next()) {
    const StackedBatch stacked = reshape_concat(*batches);
    const RowMatrixXd z = process_stacked(stacked, projection, false);
    RowMatrixXd probs(z.rows(), class_count);
    std::vector<double> log_density(z.rows(),
                                    std::numeric_limits<double>::quiet_NaN());
    if (gda) {
      parallel_for(z.rows(), [&](std::int64_t i) {
        const Eigen::VectorXd row = z.row(i).transpose();
        const Eigen::VectorXd input = gda->pca ? gda->pca->apply(row) : Eigen::VectorXd(row);
        log_density[i] = gda_log_density(*gda, input);
        if (!laplace) probs.row(i) = gda_class_posterior(*gda, input).transpose();
      });
    }
    if (laplace) {
      const RowMatrixXd zs = process_stacked(stacked, projection, true);
      probs = predict_probabilities_batch(*laplace, zs, config.samples,
                                          config.seed, stacked.first_index);
    }
    for (std::int64_t i = 0; i < z.rows(); ++i) {
      const Eigen::RowVectorXd p = probs.row(i);
      out << stacked.first_index + i << ',' << stacked.labels[i] << ','
          << argmax(p) << ',' << format_double(log_density[i]) << ','
          << format_double(predictive_entropy(std::span(p.data(), p.size())));
      for (int k = 0; k < class_count; ++k) out << ',' << format_double(p(k));
      out << '\n';
    }
  }
  return out.str();
}

double parse_number(std::string_view field, const fs::path& path) {
  if (field == "nan") return std::numeric_limits<double>::quiet_NaN();
  double value = 0.0;
  const auto [ptr, ec] =
      std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ValidationError(path.string() + ": bad number \"" +
                          std::string(field) + "\"");
  }
  return value;
}

PredictionRows read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line.rfind("sample_id,label,pred,log_density,entropy", 0) != 0) {
    throw ValidationError(path.string() + ": bad prediction header");
  }
  const auto columns = std::count(line.begin(), line.end(), ',') + 1;
  const int classes = static_cast<int>(columns - 5);
  if (classes < 1) throw ValidationError(path.string() + ": no p_ columns");
  PredictionRows rows;
  std::vector<double> flat;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest = line;
    while (true) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (static_cast<long>(fields.size()) != columns) {
      throw ValidationError(path.string() + ": ragged row");
    }
    rows.labels.push_back(static_cast<int>(parse_number(fields[1], path)));
    rows.log_density.push_back(parse_number(fields[3], path));
    rows.entropy.push_back(parse_number(fields[4], path));
    for (int k = 0; k < classes; ++k) {
      flat.push_back(parse_number(fields[5 + k], path));
    }
  }
  rows.probabilities = Eigen::Map<RowMatrixXd>(
      flat.data(), static_cast<Eigen::Index>(rows.labels.size()), classes);
  return rows;
}

bool all_finite(const std::vector<double>& values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

std::vector<double> negated(const std::vector<double>& values) {
  std::vector<double> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(),
                 [](double v) { return -v; });
  return out;
}

}  // namespace

std::string to_string(HeadSelection head) {
  switch (head) {
    case HeadSelection::kGda: return "gda";
    case HeadSelection::kLaplace: return "laplace";
    case HeadSelection::kBoth: return "both";
  }
  return "both";
}

HeadSelection head_from_string(const std::string& text) {
  if (text == "gda") return HeadSelection::kGda;
  if (text == "laplace") return HeadSelection::kLaplace;
  if (text == "both") return HeadSelection::kBoth;
  throw ValidationError("--head must be gda, laplace or both, got \"" + text +
                        "\"");
}

std::optional<std::pair<std::int64_t, std::int64_t>> parse_dims(
    const std::string& text) {
  if (text == "auto") return std::nullopt;
  const auto x = text.find('x');
  std::int64_t c = 0;
  std::int64_t d = 0;
  const char* end = text.data() + text.size();
  if (x != std::string::npos) {
    const auto r1 = std::from_chars(text.data(), text.data() + x, c);
    const auto r2 = std::from_chars(text.data() + x + 1, end, d);
    if (r1.ec == std::errc() && r1.ptr == text.data() + x &&
        r2.ec == std::errc() && r2.ptr == end && c >= 1 && d >= 1) {
      return std::make_pair(c, d);
    }
  }
  throw ValidationError("--dims must be CxD or auto, got \"" + text + "\"");
}

RunConfig load_run_config(const fs::path& path) {
  const json doc = parse_json(path);
  check_keys(doc, {"train", "val", "test", "ood", "ambiguous", "epsilon",
                   "near_band", "layer", "dims", "head", "lambda_grid", "tau",
                   "tau_grid", "samples", "seed", "batch_size", "gda_pca_dims",
                   "out", "toy"},
             path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    const fs::path raw(p);
    return raw.is_absolute() ? raw : base / raw;
  };
  RunConfig config;
  for (auto [key, slot] :
       {std::pair{"train", &config.train}, std::pair{"val", &config.val},
        std::pair{"test", &config.test}, std::pair{"ood", &config.ood},
        std::pair{"ambiguous", &config.ambiguous}}) {
    if (doc.contains(key)) {
      std::string value;
      read_field(doc, key, value);
      *slot = resolve(value);
    }
  }
  read_field(doc, "epsilon", config.epsilon);
  read_field(doc, "near_band", config.near_band);
  if (doc.contains("layer")) {
    std::uint32_t layer = 0;
    read_field(doc, "layer", layer);
    config.layer = layer;
  }
  if (doc.contains("dims")) {
    std::string dims;
    read_field(doc, "dims", dims);
    config.dims = parse_dims(dims);
  }
  if (doc.contains("head")) {
    std::string head;
    read_field(doc, "head", head);
    config.head = head_from_string(head);
  }
  read_field(doc, "lambda_grid", config.lambda_grid);
  if (doc.contains("tau")) {
    if (doc["tau"].is_string()) {
      if (doc["tau"].get<std::string>() != "auto") {
        throw ValidationError("tau must be a number or \"auto\"");
      }
      config.tau.reset();
    } else {
      double tau = 0.0;
      read_field(doc, "tau", tau);
      config.tau = tau;
    }
  }
  read_field(doc, "tau_grid", config.tau_grid);
  read_field(doc, "samples", config.samples);
  read_field(doc, "seed", config.seed);
  read_field(doc, "batch_size", config.batch_size);
  read_field(doc, "gda_pca_dims", config.gda_pca_dims);
  if (doc.contains("out")) {
    std::string out;
    read_field(doc, "out", out);
    config.out = resolve(out);
  }
  if (doc.contains("toy")) {
    config.toy = toy_from_json(doc["toy"]);
  }
  if (config.samples < 1) throw ValidationError("samples must be >= 1");
  if (config.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (config.gda_pca_dims < 0) throw ValidationError("gda_pca_dims must be >= 0");
  return config;
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".psc.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw ValidationError("output directory " + dir.string() +
                            " is locked by another run (remove " +
                            path_.string() + " if stale)");
    }
    throw ValidationError("cannot create lock " + path_.string() + ": " +
                          std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ignored;
  fs::remove(path_, ignored);
}

RunConfig cmd_train_toy(const RunConfig& config) {
  const ToyConfig toy = config.toy.value_or(ToyConfig{});
  const SignDataset data = generate_sign_dataset(toy.dataset);
  const TrainResult trained =
      train_mlp(toy.mlp, toy.training, data.train, data.val);
  const Mlp& net = trained.network;

  LabeledPoints ood = data.test;
  ood.x.col(1).array() += toy.ood_shift * toy.dataset.sigma;

  const fs::path dumps = config.out / "dumps";
  RunConfig next = config;
  const std::pair<Split, const LabeledPoints*> splits[] = {
      {Split::kTrain, &data.train},
      {Split::kVal, &data.val},
      {Split::kTest, &data.test},
      {Split::kOod, &ood}};
  for (const auto& [split, points] : splits) {
    dump_activations(net, *points, dumps, split, "sign");
  }
  next.train = dumps / "train.json";
  next.val = dumps / "val.json";
  next.test = dumps / "test.json";
  next.ood = dumps / "ood.json";
  save_checkpoint(config.out / "toy.pscn", net);

  const double shift = toy.report_shift * toy.dataset.sigma;
  std::ostringstream report;
  report << "layer_id,point,pc1,pc2\n";
  for (const auto& row : sign_example_report(net, data.train, shift)) {
    report << row.layer_id << ',' << row.point << ','
           << format_double(row.pc1) << ',' << format_double(row.pc2) << '\n';
  }
  write_text(config.out / "sign_example.csv", report.str());

  json summary;
  summary["final_loss"] = trained.final_loss;
  summary["val_accuracy"] = trained.val_accuracy;
  summary["dense_layers"] = net.layers().size();
  summary["dumped_layers"] = net.layers().size() + 1;
  summary["perturbation_distance"] =
      perturbation_distances(net, data.val.x, shift);
  write_text(config.out / "toy_report.json", summary.dump(2) + "\n");
  return next;
}

void cmd_measure_collapse(const RunConfig& config) {
  const ActivationDataset train = open_dataset(require(config.train, "--train"));
  const ActivationDataset val = open_dataset(require(config.val, "--val"));
  ScanOptions options;
  options.epsilon = config.epsilon;
  options.near_band = config.near_band;
  options.batch_size = config.batch_size;
  const CollapseReport report = scan_layers(train, val, options);
  fs::create_directories(config.out);
  write_text(config.out / kCollapseCsv, collapse_csv(report));
  write_text(config.out / kCandidatesJson, collapse_json(report));
  if (report.selection.all_collapsed) {
    warn("every layer has NC1 <= epsilon; falling back to the least collapsed");
  }
}

void cmd_fit(const RunConfig& config) {
  const ActivationDataset train = open_dataset(require(config.train, "--train"));
  const ActivationDataset val = open_dataset(require(config.val, "--val"));
  if (train.class_count() != val.class_count()) {
    throw ValidationError("train and val disagree on class_count");
  }
  const int classes = train.class_count();
  const std::vector<std::uint32_t> layers = candidate_layers(config);
  check_layers(train, layers, "--train");
  check_layers(val, layers, "--val");
  const auto [channels, features] = tensor_extent(train, layers);

  const StackedSource train_src = stacked_source(train, layers, config.batch_size);
  const StackedSource val_src = stacked_source(val, layers, config.batch_size);
  const ChannelMoments moments = compute_channel_moments(train_src);
  const std::vector<Eigen::MatrixXd> correlation =
      covariance_to_correlation(moments);
  const TuckerFactors full = fit_tucker(correlation, channels, features);

  const CollapsePair before = collapse_under(
      train_src, val_src, make_projection(moments, identity_factors(full)),
      classes);

  std::vector<std::pair<std::int64_t, std::int64_t>> grid;
  if (config.dims) {
    const auto [c, d] = *config.dims;
    if (c > channels || d > features) {
      throw ValidationError("--dims " + std::to_string(c) + "x" +
                            std::to_string(d) + " exceeds layer extent " +
                            std::to_string(channels) + "x" +
                            std::to_string(features));
    }
    grid.push_back(*config.dims);
  } else {
    for (auto c : dim_grid(channels)) {
      for (auto d : dim_grid(features)) grid.emplace_back(c, d);
    }
    std::stable_sort(grid.begin(), grid.end(), [](auto a, auto b) {
      return a.first * a.second < b.first * b.second;
    });
  }

  json sweep = json::array();
  std::optional<std::pair<std::int64_t, std::int64_t>> chosen;
  CollapsePair after;
  for (const auto& [c, d] : grid) {
    const CollapsePair pair = collapse_under(
        train_src, val_src, make_projection(moments, truncate(full, c, d)),
        classes);
    const bool accepted =
        config.dims.has_value() ||
        (std::abs(pair.nc1 - before.nc1) < kDimSweepTolerance &&
         std::abs(pair.nc4 - before.nc4) < kDimSweepTolerance);
    sweep.push_back({{"c_proj", c}, {"d_proj", d}, {"nc1", pair.nc1},
                     {"nc4", pair.nc4}, {"accepted", accepted}});
    if (accepted) {
      chosen = {c, d};
      after = pair;
      break;
    }
  }
  if (!chosen) {
    throw ComputeError("no grid dims keep NC1 and NC4 within " +
                       format_double(kDimSweepTolerance) + ":\n" +
                       sweep_table(sweep));
  }

  TuckerProjection projection =
      make_projection(moments, truncate(full, chosen->first, chosen->second));
  ProjectedSplit train_z = collect(train_src, projection, false);
  projection.output_scaling = fit_output_scaling(train_z.z);
  fs::create_directories(config.out);
  save_projection(config.out / kProjectionFile, projection);

  json report;
  report["layers"] = layers;
  report["channels"] = channels;
  report["features"] = features;
  report["dims"] = {{"c_proj", chosen->first},
                    {"d_proj", chosen->second},
                    {"mode", config.dims ? "forced" : "auto"}};
  report["nc_before"] = {{"nc1", before.nc1}, {"nc4", before.nc4}};
  report["nc_after"] = {{"nc1", after.nc1}, {"nc4", after.nc4}};
  report["sweep"] = sweep;
  report["head"] = to_string(config.head);
  report["class_count"] = classes;

  if (config.head != HeadSelection::kLaplace) {
    GdaOptions options;
    if (!config.lambda_grid.empty()) options.jitter_grid = config.lambda_grid;
    GdaModel gda;
    if (config.gda_pca_dims > 0) {
      PcaReducer pca = fit_pca(train_z.z, config.gda_pca_dims);
      gda = fit_gda(pca.apply_rows(train_z.z), train_z.labels, classes, options);
      gda.pca = std::move(pca);
    } else {
      gda = fit_gda(train_z.z, train_z.labels, classes, options);
    }
    save_gda(config.out / kGdaFile, gda);
    report["gda"] = {{"jitter", gda.jitter},
                     {"pca_dims", config.gda_pca_dims}};
  }
  if (config.head != HeadSelection::kGda) {
    apply_output_scaling(*projection.output_scaling, train_z.z);
    double tau = 0.0;
    if (config.tau) {
      tau = *config.tau;
    } else {
      const ProjectedSplit val_z = collect(val_src, projection, true);
      tau = select_prior_precision(train_z.z, train_z.labels, val_z.z,
                                   val_z.labels, classes, config.tau_grid);
    }
    const LinearFitResult fit =
        train_linear_map(train_z.z, train_z.labels, classes, tau);
    const LaplaceLinearModel laplace =
        fit_laplace(train_z.z, train_z.labels, fit.weights, tau);
    save_laplace(config.out / kLaplaceFile, laplace);
    report["laplace"] = {{"tau", tau},
                         {"tau_mode", config.tau ? "fixed" : "auto"},
                         {"iterations", fit.iterations},
                         {"gradient_norm", fit.gradient_norm}};
  }
  write_text(config.out / kFitReport, report.dump(2) + "\n");
}

void cmd_predict(const RunConfig& config) {
  const fs::path report_path = config.out / kFitReport;
  if (!fs::exists(report_path)) {
    throw ValidationError("no " + report_path.string() + "; run fit first");
  }
  const json report = parse_json(report_path);
  const auto layers = report.at("layers").get<std::vector<std::uint32_t>>();
  const HeadSelection head = head_from_string(report.at("head").get<std::string>());
  const int classes = report.at("class_count").get<int>();

  const TuckerProjection projection =
      load_projection(config.out / kProjectionFile);
  std::optional<GdaModel> gda;
  std::optional<LaplaceLinearModel> laplace;
  if (head != HeadSelection::kLaplace) gda = load_gda(config.out / kGdaFile);
  if (head != HeadSelection::kGda) {
    laplace = load_laplace(config.out / kLaplaceFile);
  }

  const std::tuple<const std::optional<fs::path>*, const char*, const char*>
      groups[] = {{&config.test, "--test", kPredictionsCsv},
                  {&config.ood, "--ood", kPredictionsOodCsv},
                  {&config.ambiguous, "--ambiguous", kPredictionsAmbiguousCsv}};
  for (const auto& [manifest, flag, file] : groups) {
    const fs::path target = config.out / file;
    if (!*manifest) {
      if (std::string(flag) == "--test") require(*manifest, flag);
      fs::remove(target);
      continue;
    }
    const ActivationDataset dataset = open_dataset(**manifest);
    check_layers(dataset, layers, flag);
    if (dataset.class_count() != classes) {
      throw ValidationError(std::string(flag) + " manifest has class_count " +
                            std::to_string(dataset.class_count()) +
                            ", model expects " + std::to_string(classes));
    }
    write_text(target, prediction_csv(dataset, layers, projection, gda,
                                      laplace, config, classes));
  }
}

void cmd_evaluate(const RunConfig& config) {
  const fs::path clean_path = config.out / kPredictionsCsv;
  if (!fs::exists(clean_path)) {
    throw ValidationError("no " + clean_path.string() + "; run predict first");
  }
  const PredictionRows clean = read_predictions(clean_path);
  if (clean.labels.empty()) throw ValidationError("no test predictions");
  std::map<std::string, double> metrics;
  const NllAccuracy na = nll_accuracy(clean.probabilities, clean.labels);
  metrics["accuracy"] = na.accuracy;
  metrics["nll"] = na.nll;
  metrics["ece"] = ece(clean.probabilities, clean.labels);

  std::map<std::string, std::vector<double>> entropies;
  entropies["iD_clean"] = clean.entropy;

  const fs::path ood_path = config.out / kPredictionsOodCsv;
  if (fs::exists(ood_path)) {
    const PredictionRows ood = read_predictions(ood_path);
    if (ood.labels.empty()) throw ValidationError("no OOD predictions");
    // iD is the positive class: high density, or low entropy without GDA.
    if (all_finite(clean.log_density) && all_finite(ood.log_density)) {
      metrics["auroc_id_ood"] = auroc(clean.log_density, ood.log_density);
    } else {
      metrics["auroc_id_ood"] =
          auroc(negated(clean.entropy), negated(ood.entropy));
    }
    entropies["OOD"] = ood.entropy;
  } else {
    warn("no OOD predictions; auroc_id_ood omitted");
  }
  const fs::path ambiguous_path = config.out / kPredictionsAmbiguousCsv;
  if (fs::exists(ambiguous_path)) {
    const PredictionRows ambiguous = read_predictions(ambiguous_path);
    if (ambiguous.labels.empty()) throw ValidationError("no ambiguous predictions");
    metrics["auroc_clean_ambiguous"] =
        auroc(negated(clean.entropy), negated(ambiguous.entropy));
    entropies["iD_ambiguous"] = ambiguous.entropy;
  }
  write_text(config.out / kMetricsJson, metrics_json(metrics));
  write_text(config.out / kHistogramCsv,
             histogram_csv(entropy_histogram(entropies)));
}

void cmd_all(const RunConfig& config) {
  RunConfig run = config;
  if (!run.train && run.toy) run = cmd_train_toy(run);
  cmd_measure_collapse(run);
  cmd_fit(run);
  cmd_predict(run);
  cmd_evaluate(run);
}

}  // namespace psc
