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

// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Exit status is 1 if any criterion fails.

#include <unistd.h>

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "psc/activation_store.h"
#include "psc/collapse_metrics.h"
#include "psc/evaluation.h"
#include "psc/projection.h"
#include "psc/toy_networks.h"
#include "psc/uncertainty_heads.h"
#include "psc/workflow.h"

namespace {

namespace fs = std::filesystem;
using psc::RowMatrixXd;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records the first failure and keeps a running detail string.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && pass_) {
      pass_ = false;
      first_failure_ = what;
    }
  }
  void note(const std::string& text) {
    notes_ += notes_.empty() ? text : "; " + text;
  }
  Outcome outcome() const {
    return {pass_, pass_ ? notes_ : first_failure_ + (notes_.empty() ? "" : " | " + notes_)};
  }

 private:
  bool pass_ = true;
  std::string first_failure_;
  std::string notes_;
};

std::string num(double v) { return psc::format_double(v); }

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

RowMatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows,
                          Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  RowMatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

std::vector<int> random_labels(std::mt19937_64& rng, std::int64_t n, int classes) {
  std::uniform_int_distribution<int> pick(0, classes - 1);
  std::vector<int> labels(n);
  for (std::int64_t i = 0; i < n; ++i) {
    labels[i] = i < classes ? static_cast<int>(i) : pick(rng);
  }
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ------------------------------------------------------------- oracles

double dense_nc1(const RowMatrixXd& h, const std::vector<int>& y, int classes) {
  const Eigen::Index p = h.cols();
  RowMatrixXd means = RowMatrixXd::Zero(classes, p);
  std::vector<double> counts(classes, 0.0);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    means.row(y[i]) += h.row(i);
    counts[y[i]] += 1.0;
  }
  Eigen::RowVectorXd grand = Eigen::RowVectorXd::Zero(p);
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    if (counts[c] == 0) continue;
    means.row(c) /= counts[c];
    grand += means.row(c);
    ++present;
  }
  grand /= double(present);
  Eigen::MatrixXd sw = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd st = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const Eigen::VectorXd dw = (h.row(i) - means.row(y[i])).transpose();
    const Eigen::VectorXd dt = (h.row(i) - grand).transpose();
    sw += dw * dw.transpose();
    st += dt * dt.transpose();
  }
  const double n = double(h.rows()) * classes;
  return (sw / n).trace() / (st / n).trace();
}

double brute_nc4(const RowMatrixXd& train, const std::vector<int>& ty,
                 const RowMatrixXd& eval, const std::vector<int>& ey,
                 int classes) {
  std::vector<Eigen::RowVectorXd> centroid(classes,
                                           Eigen::RowVectorXd::Zero(train.cols()));
  std::vector<int> count(classes, 0);
  for (Eigen::Index i = 0; i < train.rows(); ++i) {
    centroid[ty[i]] += train.row(i);
    ++count[ty[i]];
  }
  for (int c = 0; c < classes; ++c) centroid[c] /= count[c];
  int correct = 0;
  for (Eigen::Index i = 0; i < eval.rows(); ++i) {
    int best = 0;
    double best_d = (eval.row(i) - centroid[0]).squaredNorm();
    for (int c = 1; c < classes; ++c) {
      const double d = (eval.row(i) - centroid[c]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == ey[i];
  }
  return double(correct) / double(eval.rows());
}

double dense_log_density(const psc::GdaModel& m, const Eigen::VectorXd& z) {
  long double total = 0.0L;
  const int p = static_cast<int>(m.dim());
  for (int c = 0; c < m.class_count(); ++c) {
    const Eigen::MatrixXd cov =
        m.covariances[c] + m.jitter * Eigen::MatrixXd::Identity(p, p);
    const Eigen::VectorXd d = z - m.means.row(c).transpose();
    const double quad = d.dot(cov.inverse() * d);
    total += static_cast<long double>(m.priors(c)) * std::exp(-0.5L * quad) /
             std::sqrt(std::pow(2.0L * std::numbers::pi_v<long double>, p) *
                       cov.determinant());
  }
  return static_cast<double>(std::log(total));
}

double pairwise_auroc(const std::vector<double>& pos,
                      const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (double(pos.size()) * double(neg.size()));
}

psc::StackedBatch stacked(const RowMatrixXd& values, std::int64_t c,
                          std::int64_t d, std::uint64_t first = 0) {
  psc::StackedBatch b;
  b.channels = c;
  b.features = d;
  b.first_index = first;
  b.values = values;
  b.labels.assign(values.rows(), 0);
  return b;
}

psc::StackedSource source_of(const RowMatrixXd& values, std::int64_t c,
                             std::int64_t d, std::int64_t batch) {
  return [=](const std::function<void(const psc::StackedBatch&)>& sink) {
    for (std::int64_t s = 0; s < values.rows(); s += batch) {
      const std::int64_t n = std::min(batch, values.rows() - s);
      sink(stacked(values.middleRows(s, n), c, d, s));
    }
  };
}

// ------------------------------------------------------------- criteria

Outcome nc_oracle() {
  Check check;
  std::mt19937_64 rng(101);
  const auto start = Clock::now();
  double worst = 0.0;
  const int datasets = 150;
  for (int t = 0; t < datasets; ++t) {
    std::uniform_int_distribution<int> pick_n(10, 200), pick_p(1, 8), pick_k(2, 5);
    const int n = pick_n(rng), p = pick_p(rng), k = pick_k(rng);
    const auto y = random_labels(rng, n, k);
    RowMatrixXd h = random_matrix(rng, n, p);
    const RowMatrixXd centers = random_matrix(rng, k, p, 1.5);
    for (int i = 0; i < n; ++i) h.row(i) += centers.row(y[i]);
    const auto ey = random_labels(rng, n / 2 + k, k);
    RowMatrixXd eval = random_matrix(rng, n / 2 + k, p);
    for (Eigen::Index i = 0; i < eval.rows(); ++i) eval.row(i) += centers.row(ey[i]);

    const double want = dense_nc1(h, y, k);
    const double got = psc::nc1(h, y, k);
    const double rel = std::abs(got - want) / std::abs(want);
    worst = std::max(worst, rel);
    check.expect(rel <= 1e-10, "nc1 rel error " + num(rel) + " on dataset " + std::to_string(t));
    check.expect(psc::nc4(h, y, eval, ey, k) == brute_nc4(h, y, eval, ey, k),
                 "nc4 differs on dataset " + std::to_string(t));
  }
  const double elapsed = seconds_since(start);
  check.expect(elapsed < 10.0, "runtime " + num(elapsed) + " s");
  check.note(std::to_string(datasets) + " datasets, worst nc1 rel " + num(worst) +
             ", " + num(std::round(elapsed * 1000) / 1000) + " s");
  return check.outcome();
}

Outcome hand_example() {
  Check check;
  RowMatrixXd h(4, 2);
  h << 0, 0, 2, 0, 0, 2, 2, 2;
  const std::vector<int> y = {0, 0, 1, 1};
  const double a = psc::nc1(h, y, 2), b = psc::nc4(h, y, h, y, 2);
  check.expect(a == 0.5, "nc1 = " + num(a));
  check.expect(b == 1.0, "nc4 = " + num(b));
  check.note("nc1 " + num(a) + ", nc4 " + num(b));
  return check.outcome();
}

Outcome moment_partition() {
  Check check;
  std::mt19937_64 rng(102);
  double worst = 0.0;
  for (int t = 0; t < 30; ++t) {
    const std::int64_t n = 2 + t * 2, c = 1 + t % 4, d = 1 + (t * 5) % 16;
    const RowMatrixXd v = random_matrix(rng, n, c * d, 3.0).array() + 1.0;
    const psc::ChannelMoments ref = psc::compute_channel_moments(source_of(v, c, d, n));
    for (std::int64_t batch : {std::int64_t{1}, std::int64_t{7}}) {
      const psc::ChannelMoments m = psc::compute_channel_moments(source_of(v, c, d, batch));
      const double mean_rel = (m.mean - ref.mean).cwiseAbs().maxCoeff() /
                              ref.mean.cwiseAbs().maxCoeff();
      double cov_rel = 0.0;
      for (std::int64_t k = 0; k < c; ++k) {
        cov_rel = std::max(cov_rel, (m.covariance[k] - ref.covariance[k]).cwiseAbs().maxCoeff() /
                                        ref.covariance[k].cwiseAbs().maxCoeff());
      }
      worst = std::max({worst, mean_rel, cov_rel});
      check.expect(mean_rel <= 1e-12 && cov_rel <= 1e-12,
                   "batch " + std::to_string(batch) + " rel " + num(std::max(mean_rel, cov_rel)));
    }
  }
  check.note("worst rel " + num(worst));
  return check.outcome();
}

Outcome tucker_properties() {
  Check check;
  std::mt19937_64 rng(103);
  double worst_orth = 0.0, worst_recon = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::int64_t c = 1 + t % 4, d = 2 + t % 9, n = 40;
    const RowMatrixXd v = random_matrix(rng, n, c * d);
    const psc::ChannelMoments m = psc::compute_channel_moments(source_of(v, c, d, n));
    const auto corr = psc::covariance_to_correlation(m);
    const psc::TuckerFactors full = psc::fit_tucker(corr, c, d);
    const auto& a = full.channel_factor;
    const auto& b = full.feature_factor;
    const double orth =
        std::max((a.transpose() * a - Eigen::MatrixXd::Identity(c, c)).cwiseAbs().maxCoeff(),
                 (b.transpose() * b - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff());
    const auto rebuilt = psc::tucker_reconstruct(corr, full);
    double recon = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      recon = std::max(recon, (rebuilt[k] - corr[k]).cwiseAbs().maxCoeff());
    }
    worst_orth = std::max(worst_orth, orth);
    worst_recon = std::max(worst_recon, recon);
    check.expect(orth <= 1e-8, "orthonormality " + num(orth));
    check.expect(recon <= 1e-8, "full-rank reconstruction " + num(recon));

    // Fixed random PSD tensor, truncated along the feature mode.
    std::vector<Eigen::MatrixXd> psd;
    for (std::int64_t k = 0; k < c; ++k) {
      const Eigen::MatrixXd g = random_matrix(rng, d, d + 2);
      psd.push_back(g * g.transpose());
    }
    double previous = std::numeric_limits<double>::infinity();
    for (std::int64_t dp = 1; dp <= d; ++dp) {
      const auto approx = psc::tucker_reconstruct(psd, psc::fit_tucker(psd, c, dp));
      double err = 0.0;
      for (std::int64_t k = 0; k < c; ++k) err += (approx[k] - psd[k]).squaredNorm();
      check.expect(err <= previous, "error rose at d_proj " + std::to_string(dp));
      previous = err;
    }
  }
  check.note("worst orthonormality " + num(worst_orth) + ", worst reconstruction " +
             num(worst_recon));
  return check.outcome();
}

Outcome full_dims_preserve_collapse() {
  Check check;
  std::mt19937_64 rng(104);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::int64_t n = 90, c = 1 + t % 3, d = 2 + t % 5;
    const int k = 2 + t % 3;
    const auto y = random_labels(rng, n, k);
    RowMatrixXd v = random_matrix(rng, n, c * d);
    const RowMatrixXd centers = random_matrix(rng, k, c * d, 1.5);
    for (std::int64_t i = 0; i < n; ++i) v.row(i) += centers.row(y[i]);
    const psc::ChannelMoments m = psc::compute_channel_moments(source_of(v, c, d, n));
    const psc::TuckerProjection identity = psc::make_projection(
        m, psc::TuckerFactors{Eigen::MatrixXd::Identity(c, c),
                              Eigen::MatrixXd::Identity(d, d), {}, {}});
    const psc::TuckerProjection full =
        psc::make_projection(m, psc::fit_tucker(psc::covariance_to_correlation(m), c, d));
    const RowMatrixXd before = psc::process_stacked(stacked(v, c, d), identity, false);
    const RowMatrixXd after = psc::process_stacked(stacked(v, c, d), full, false);
    const double d1 = std::abs(psc::nc1(after, y, k) - psc::nc1(before, y, k));
    const double d4 = std::abs(psc::nc4(after, y, after, y, k) -
                               psc::nc4(before, y, before, y, k));
    worst = std::max({worst, d1, d4});
    check.expect(d1 <= 1e-8 && d4 <= 1e-8, "full-dim drift " + num(std::max(d1, d4)));
  }
  check.note("worst drift " + num(worst));
  return check.outcome();
}

Outcome gda_correctness() {
  Check check;
  std::mt19937_64 rng(105);
  double worst = 0.0;
  for (int t = 0; t < 30; ++t) {
    const std::int64_t p = 1 + t % 5;
    const int k = 1 + t % 3;
    const auto y = random_labels(rng, 60, k);
    RowMatrixXd z = random_matrix(rng, 60, p);
    const RowMatrixXd centers = random_matrix(rng, k, p, 2.0);
    for (int i = 0; i < 60; ++i) z.row(i) += centers.row(y[i]);
    const psc::GdaModel model = psc::fit_gda(z, y, k);
    for (int s = 0; s < 5; ++s) {
      const Eigen::VectorXd x = random_matrix(rng, p, 1, 2.0);
      const double got = psc::gda_log_density(model, x);
      const double err = std::abs(got - dense_log_density(model, x)) /
                         std::max(1.0, std::abs(got));
      worst = std::max(worst, err);
      check.expect(err <= 1e-8, "dense oracle error " + num(err));
    }
  }

  psc::GdaModel normal;
  normal.priors = Eigen::VectorXd::Ones(1);
  normal.means = RowMatrixXd::Zero(1, 2);
  normal.covariances = {Eigen::MatrixXd::Identity(2, 2)};
  normal.cholesky = {Eigen::MatrixXd::Identity(2, 2)};
  normal.log_determinants = {0.0};
  const double mode = psc::gda_log_density(normal, Eigen::VectorXd::Zero(2));
  const double mode_err = std::abs(mode + std::log(2 * std::numbers::pi));
  check.expect(mode_err <= 1e-12, "standard normal mode error " + num(mode_err));

  const auto y1 = std::vector<int>(40, 0);
  const RowMatrixXd z1 = random_matrix(rng, 40, 1, 0.7).array() + 3.0;
  const psc::GdaModel one = psc::fit_gda(z1, y1, 1);
  const double mu = one.means(0, 0);
  const double sd = std::sqrt(one.covariances[0](0, 0) + one.jitter);
  const int steps = 20000;
  const double lo = mu - 12 * sd, hi = mu + 12 * sd, h = (hi - lo) / steps;
  double sum = 0.0;
  for (int s = 0; s <= steps; ++s) {
    const double w = (s == 0 || s == steps) ? 1 : (s % 2 ? 4 : 2);
    sum += w * std::exp(psc::gda_log_density(one, Eigen::VectorXd::Constant(1, lo + s * h)));
  }
  const double integral = sum * h / 3.0;
  check.expect(std::abs(integral - 1.0) <= 1e-6, "integral " + num(integral));
  check.note("worst dense rel " + num(worst) + ", mode error " + num(mode_err) +
             ", integral " + num(integral));
  return check.outcome();
}

Outcome laplace_correctness() {
  Check check;
  std::mt19937_64 rng(106);
  double worst_fd = 0.0, worst_ggn = 0.0, worst_limit = 0.0;
  for (int t = 0; t < 10; ++t) {
    const int k = 2 + t % 3;
    const std::int64_t p = 1 + t % 4;
    const auto y = random_labels(rng, 30, k);
    RowMatrixXd z = random_matrix(rng, 30, p);
    const RowMatrixXd centers = random_matrix(rng, k, p, 1.5);
    for (int i = 0; i < 30; ++i) z.row(i) += centers.row(y[i]);

    const RowMatrixXd w = random_matrix(rng, k, p + 1, 0.5);
    const double tau = 0.3 + t;
    RowMatrixXd grad;
    psc::logistic_objective(w, z, y, tau, &grad);
    const double step = 1e-5;
    for (Eigen::Index e = 0; e < w.size(); ++e) {
      RowMatrixXd up = w, down = w;
      up.data()[e] += step;
      down.data()[e] -= step;
      const double fd = (psc::logistic_objective(up, z, y, tau) -
                         psc::logistic_objective(down, z, y, tau)) / (2 * step);
      const double err = std::abs(grad.data()[e] - fd) / std::max(1.0, std::abs(fd));
      worst_fd = std::max(worst_fd, err);
      check.expect(err <= 1e-4, "gradient error " + num(err));
    }

    // N = 1: Kronecker product equals J^T H J.
    const RowMatrixXd z1 = random_matrix(rng, 1, p);
    const std::vector<int> y1 = {t % k};
    const RowMatrixXd w1 = random_matrix(rng, k, p + 1);
    const psc::LaplaceLinearModel single = psc::fit_laplace(z1, y1, w1, 2.0);
    const Eigen::VectorXd zt = psc::with_bias(z1.row(0).transpose());
    const Eigen::VectorXd prob = psc::softmax(w1 * zt);
    const Eigen::MatrixXd hess =
        Eigen::MatrixXd(prob.asDiagonal()) - prob * prob.transpose();
    const Eigen::Index q = p + 1;
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(k, k * q);
    for (Eigen::Index j = 0; j < q; ++j) {
      for (int a = 0; a < k; ++a) jac(a, j * k + a) = zt(j);
    }
    const Eigen::MatrixXd ggn = jac.transpose() * hess * jac;
    Eigen::MatrixXd kron(k * q, k * q);
    for (Eigen::Index i = 0; i < q; ++i) {
      for (Eigen::Index j = 0; j < q; ++j) {
        kron.block(i * k, j * k, k, k) = single.input_factor(i, j) * single.output_factor;
      }
    }
    const double ggn_err = (kron - ggn).cwiseAbs().maxCoeff();
    worst_ggn = std::max(worst_ggn, ggn_err);
    check.expect(ggn_err <= 1e-8, "GGN error " + num(ggn_err));

    const RowMatrixXd map = psc::train_linear_map(z, y, k, 1.0).weights;
    const psc::LaplaceLinearModel tight = psc::fit_laplace(z, y, map, 1e14);
    for (int i = 0; i < 5; ++i) {
      const Eigen::VectorXd x = z.row(i).transpose();
      const double err = (psc::predict_probabilities(tight, x, 10, 7 + i) -
                          psc::map_probabilities(tight, x)).cwiseAbs().maxCoeff();
      worst_limit = std::max(worst_limit, err);
      check.expect(err <= 1e-6, "zero-variance limit error " + num(err));
    }
  }
  check.note("worst gradient rel " + num(worst_fd) + ", GGN " + num(worst_ggn) +
             ", MAP limit " + num(worst_limit));
  return check.outcome();
}

Outcome metric_oracles() {
  Check check;
  const std::vector<double> pos = {0.9, 0.8}, neg = {0.7, 0.85};
  const double fixture = psc::auroc(pos, neg);
  check.expect(fixture == 0.75, "tie fixture " + num(fixture));

  std::mt19937_64 rng(107);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> a(1 + t % 29), b(1 + t % 19);
    for (double& v : a) v = std::round(3 * (normal(rng) + 0.4)) / 3;
    for (double& v : b) v = std::round(3 * normal(rng)) / 3;
    const double err = std::abs(psc::auroc(a, b) - pairwise_auroc(a, b));
    worst = std::max(worst, err);
    check.expect(err <= 1e-12, "auroc vs pairwise " + num(err));
  }

  RowMatrixXd p(2, 2);
  p << 0.1, 0.9, 0.6, 0.4;
  const std::vector<int> y = {1, 1};
  const double e = psc::ece(p, y, 15);
  check.expect(e == 0.35, "ece fixture " + num(e));

  double worst_nll = 0.0;
  for (int c : {2, 3, 5, 10}) {
    const RowMatrixXd u = RowMatrixXd::Constant(9, c, 1.0 / c);
    std::vector<int> labels(9);
    for (int i = 0; i < 9; ++i) labels[i] = i % c;
    const double err = std::abs(psc::nll_accuracy(u, labels).nll - std::log(double(c)));
    worst_nll = std::max(worst_nll, err);
    check.expect(err <= 1e-12, "uniform nll error " + num(err));
  }
  check.note("auroc fixture " + num(fixture) + ", worst pairwise " + num(worst) +
             ", ece " + num(e) + ", worst nll " + num(worst_nll));
  return check.outcome();
}

// ------------------------------------------------------------- toy runs

struct SeedRun {
  double val_accuracy = 0.0;
  bool has_collapsed_smooth_layer = false;
  double psc_auroc = 0.0;
  double penultimate_auroc = 0.0;
  double nc1_after = 0.0;
  double nc4_drift = 0.0;
  std::string dims;
  std::string layers;
};

std::vector<double> log_densities(const psc::GdaModel& gda, const RowMatrixXd& z) {
  std::vector<double> out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Eigen::VectorXd row = z.row(i).transpose();
    out[i] = psc::gda_log_density(gda, gda.pca ? gda.pca->apply(row) : row);
  }
  return out;
}

// Hidden activations as they are stored on disk (float32).
RowMatrixXd stored(const RowMatrixXd& values) {
  return values.cast<float>().cast<double>();
}

SeedRun run_seed(std::uint64_t seed, const fs::path& out) {
  psc::RunConfig config;
  config.out = out;
  psc::ToyConfig toy;
  toy.dataset.seed = seed;
  toy.training.seed = seed;
  config.toy = toy;
  const psc::RunConfig dumped = psc::cmd_train_toy(config);
  psc::cmd_measure_collapse(dumped);
  psc::cmd_fit(dumped);

  SeedRun run;
  const auto report = nlohmann::json::parse(slurp(out / "toy_report.json"));
  run.val_accuracy = report["val_accuracy"].get<double>();

  const psc::ActivationDataset train = psc::open_dataset(psc::load_manifest(*dumped.train));
  const psc::ActivationDataset val = psc::open_dataset(psc::load_manifest(*dumped.val));
  const psc::CollapseReport scan = psc::scan_layers(train, val);
  for (const auto& layer : scan.layers) {
    if (layer.nc1 > 0.2 && layer.nc4 >= 0.95) run.has_collapsed_smooth_layer = true;
  }

  const auto fit = nlohmann::json::parse(slurp(out / psc::kFitReport));
  run.nc1_after = fit["nc_after"]["nc1"].get<double>();
  run.nc4_drift = std::abs(fit["nc_after"]["nc4"].get<double>() -
                           fit["nc_before"]["nc4"].get<double>());
  run.dims = std::to_string(fit["dims"]["c_proj"].get<int>()) + "x" +
             std::to_string(fit["dims"]["d_proj"].get<int>());
  const auto layer_ids = fit["layers"].get<std::vector<std::uint32_t>>();
  for (auto id : layer_ids) run.layers += (run.layers.empty() ? "" : "+") + std::to_string(id);

  // iD val points against the same points moved 6 sigma along x2.
  const psc::Mlp net = psc::load_checkpoint(out / "toy.pscn");
  const psc::SignDataset data = psc::generate_sign_dataset(toy.dataset);
  RowMatrixXd far = data.val.x;
  far.col(1).array() += 6.0 * toy.dataset.sigma;
  const auto val_out = net.forward_collect(data.val.x);
  const auto far_out = net.forward_collect(far);

  auto psc_scores = [&](const std::vector<RowMatrixXd>& outputs) {
    std::vector<psc::ActivationBatch> batches;
    for (auto id : layer_ids) {
      psc::ActivationBatch b;
      b.layer_id = id;
      b.kind = psc::LayerKind::kFc;
      b.sample_shape = {static_cast<std::uint64_t>(outputs[id].cols())};
      b.values = outputs[id].cast<float>();
      b.labels = data.val.labels;
      batches.push_back(std::move(b));
    }
    const psc::TuckerProjection projection = psc::load_projection(out / psc::kProjectionFile);
    const psc::GdaModel gda = psc::load_gda(out / psc::kGdaFile);
    return log_densities(gda, psc::process_pipeline(batches, projection, false));
  };
  run.psc_auroc = psc::auroc(psc_scores(val_out), psc_scores(far_out));

  // Baseline: class-conditional Gaussian density on the last hidden layer.
  const std::uint32_t penultimate = static_cast<std::uint32_t>(val_out.size()) - 2;
  const auto train_out = net.forward_collect(data.train.x);
  const psc::GdaModel base = psc::fit_gda(stored(train_out[penultimate]), data.train.labels, 2);
  run.penultimate_auroc =
      psc::auroc(log_densities(base, stored(val_out[penultimate])),
                 log_densities(base, stored(far_out[penultimate])));
  return run;
}

const std::vector<std::uint64_t> kSeeds = {0, 1, 2, 3};

struct ToyResults {
  std::vector<SeedRun> runs;
  double seconds = 0.0;
  std::string error;
};

const ToyResults& toy_results(const fs::path& root) {
  static ToyResults results = [&] {
    ToyResults r;
    const auto start = Clock::now();
    try {
      for (auto seed : kSeeds) {
        r.runs.push_back(run_seed(seed, root / ("seed_" + std::to_string(seed))));
      }
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = seconds_since(start);
    return r;
  }();
  return results;
}

Outcome auto_dims_on_toy(const fs::path& root) {
  Check check;
  const ToyResults& r = toy_results(root);
  check.expect(r.error.empty(), "toy run failed: " + r.error);
  for (std::size_t s = 0; s < r.runs.size(); ++s) {
    const SeedRun& run = r.runs[s];
    check.expect(run.nc1_after > 0.2, "seed " + std::to_string(kSeeds[s]) +
                                          " nc1 after " + num(run.nc1_after));
    check.expect(run.nc4_drift < 0.05, "seed " + std::to_string(kSeeds[s]) +
                                           " nc4 drift " + num(run.nc4_drift));
    check.note("seed " + std::to_string(kSeeds[s]) + ": layer " + run.layers + " dims " +
               run.dims + " nc1 " + num(std::round(run.nc1_after * 1e4) / 1e4) +
               " dNC4 " + num(std::round(run.nc4_drift * 1e4) / 1e4));
  }
  return check.outcome();
}

Outcome sign_example(const fs::path& root) {
  Check check;
  const ToyResults& r = toy_results(root);
  check.expect(r.error.empty(), "toy run failed: " + r.error);
  int separating = 0;
  for (std::size_t s = 0; s < r.runs.size(); ++s) {
    const SeedRun& run = r.runs[s];
    const std::string tag = "seed " + std::to_string(kSeeds[s]);
    check.expect(run.val_accuracy >= 0.98, tag + " (a) val accuracy " + num(run.val_accuracy));
    check.expect(run.has_collapsed_smooth_layer, tag + " (b) no layer with NC1>0.2, NC4>=0.95");
    const bool c = run.psc_auroc >= 0.9 && run.psc_auroc >= run.penultimate_auroc;
    separating += c;
    check.note(tag + ": acc " + num(std::round(run.val_accuracy * 1e4) / 1e4) +
               " auroc psc " + num(std::round(run.psc_auroc * 1e4) / 1e4) +
               " vs penultimate " + num(std::round(run.penultimate_auroc * 1e4) / 1e4));
  }
  check.expect(separating >= 3, "(c) held in " + std::to_string(separating) + " of 4 seeds");
  check.expect(r.seconds < 120.0, "runtime " + num(r.seconds) + " s");
  check.note("(c) " + std::to_string(separating) + "/4, " +
             num(std::round(r.seconds * 100) / 100) + " s");
  return check.outcome();
}

Outcome determinism(const fs::path& root) {
  Check check;
  psc::RunConfig config;
  config.toy = psc::ToyConfig{};
  config.seed = 11;
  config.toy->dataset.seed = 11;
  config.toy->training.seed = 11;
  for (const char* name : {"rerun_a", "rerun_b"}) {
    config.out = root / name;
    psc::cmd_all(config);
  }
  for (const char* file : {psc::kPredictionsCsv, psc::kMetricsJson}) {
    const std::string a = slurp(root / "rerun_a" / file);
    const std::string b = slurp(root / "rerun_b" / file);
    check.expect(!a.empty() && a == b, std::string(file) + " differs between runs");
  }
  check.note("predictions.csv and metrics.json compared byte for byte");
  return check.outcome();
}

}  // namespace

int main() {
  const fs::path root =
      fs::temp_directory_path() / ("psc_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  psc::set_warning_handler([](std::string_view) {});

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"nc_metric_oracle_equivalence", nc_oracle},
      {"nc_hand_example", hand_example},
      {"moment_partition_invariance", moment_partition},
      {"tucker_properties", tucker_properties},
      {"projection_full_dims_preserve_collapse", full_dims_preserve_collapse},
      {"projection_auto_dims_on_toy", [&] { return auto_dims_on_toy(root); }},
      {"gda_correctness", gda_correctness},
      {"laplace_correctness", laplace_correctness},
      {"metric_oracles", metric_oracles},
      {"sign_example_end_to_end", [&] { return sign_example(root); }},
      {"all_pipeline_determinism", [&] { return determinism(root); }},
  };

  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome outcome;
    try {
      outcome = run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    failures += !outcome.pass;
    std::cout << (outcome.pass ? "PASS " : "FAIL ") << name << " (" << outcome.detail
              << ")" << std::endl;
  }
  fs::remove_all(root);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
