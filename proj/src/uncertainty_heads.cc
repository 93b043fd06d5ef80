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

#include "psc/uncertainty_heads.h"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "binary_io.h"

namespace psc {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_labels(std::span<const int> labels, std::int64_t rows,
                  int class_count) {
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw ValidationError("label count mismatch: " +
                          std::to_string(labels.size()) + " labels for " +
                          std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw ValidationError("label " + std::to_string(y) + " out of range");
    }
  }
}

}  // namespace

double log_sum_exp(std::span<const double> values) {
  double top = kNegInf;
  for (double v : values) top = std::max(top, v);
  if (top == kNegInf) return kNegInf;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - top);
  return top + std::log(sum);
}

Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  const double top = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - top).exp();
  return p / p.sum();
}

double predictive_entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

Eigen::VectorXd PcaReducer::apply(
    const Eigen::Ref<const Eigen::VectorXd>& z) const {
  return components.transpose() * (z - mean);
}

RowMatrixXd PcaReducer::apply_rows(const Eigen::Ref<const RowMatrixXd>& z) const {
  return (z.rowwise() - mean.transpose()) * components;
}

PcaReducer fit_pca(const Eigen::Ref<const RowMatrixXd>& z, std::int64_t dims) {
  if (dims < 1 || dims > z.cols()) {
    throw ValidationError("pca dims must be in [1, " +
                          std::to_string(z.cols()) + "]");
  }
  if (z.rows() < 2) throw ValidationError("pca needs N >= 2");
  PcaReducer pca;
  pca.mean = z.colwise().mean().transpose();
  const RowMatrixXd centered = z.rowwise() - pca.mean.transpose();
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / double(z.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw ComputeError("pca eigendecomposition failed");
  }
  pca.components = solver.eigenvectors().rowwise().reverse().leftCols(dims);
  for (std::int64_t k = 0; k < dims; ++k) {
    Eigen::Index at;
    pca.components.col(k).cwiseAbs().maxCoeff(&at);
    if (pca.components(at, k) < 0) pca.components.col(k) *= -1.0;
  }
  return pca;
}

std::vector<double> default_jitter_grid() {
  std::vector<double> grid;
  for (int e = -9; e <= -1; ++e) grid.push_back(std::pow(10.0, e));
  return grid;
}

namespace {

struct ClassMoments {
  Eigen::VectorXd counts;
  RowMatrixXd means;
  std::vector<Eigen::MatrixXd> covariances;
};

ClassMoments class_moments(const Eigen::Ref<const RowMatrixXd>& z,
                           std::span<const int> labels,
                           std::span<const std::int64_t> rows,
                           int class_count) {
  const std::int64_t p = z.cols();
  ClassMoments m;
  m.counts = Eigen::VectorXd::Zero(class_count);
  m.means = RowMatrixXd::Zero(class_count, p);
  for (auto i : rows) {
    m.means.row(labels[i]) += z.row(i);
    m.counts(labels[i]) += 1.0;
  }
  for (int c = 0; c < class_count; ++c) {
    if (m.counts(c) < 2) {
      throw ValidationError("class " + std::to_string(c) + " has " +
                            std::to_string(int(m.counts(c))) +
                            " samples; GDA needs at least 2");
    }
    m.means.row(c) /= m.counts(c);
  }
  m.covariances.assign(class_count, Eigen::MatrixXd::Zero(p, p));
  for (auto i : rows) {
    const Eigen::VectorXd d = (z.row(i) - m.means.row(labels[i])).transpose();
    m.covariances[labels[i]].noalias() += d * d.transpose();
  }
  for (int c = 0; c < class_count; ++c) {
    m.covariances[c] /= (m.counts(c) - 1.0);
  }
  return m;
}

// Fills the Cholesky factors for the given jitter; false if any class fails.
bool factorize(GdaModel& model, double jitter) {
  const std::int64_t p = model.dim();
  model.cholesky.clear();
  model.log_determinants.clear();
  for (const auto& cov : model.covariances) {
    Eigen::MatrixXd reg = cov;
    reg.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(reg);
    if (llt.info() != Eigen::Success) return false;
    Eigen::MatrixXd lower = llt.matrixL();
    if (!(lower.diagonal().array() > 0.0).all() || !lower.allFinite()) {
      return false;
    }
    model.log_determinants.push_back(
        2.0 * lower.diagonal().array().log().sum());
    model.cholesky.push_back(std::move(lower));
  }
  (void)p;
  model.jitter = jitter;
  return true;
}

GdaModel model_from(const ClassMoments& m) {
  GdaModel model;
  model.priors = m.counts / m.counts.sum();
  model.means = m.means;
  model.covariances = m.covariances;
  return model;
}

}  // namespace

GdaModel fit_gda(const Eigen::Ref<const RowMatrixXd>& z,
                 std::span<const int> labels, int class_count,
                 const GdaOptions& options) {
  if (class_count < 1) throw ValidationError("class_count must be >= 1");
  check_labels(labels, z.rows(), class_count);
  if (!z.allFinite()) throw ValidationError("non-finite feature in GDA input");
  std::vector<double> grid = options.jitter_grid;
  if (grid.empty()) throw ValidationError("empty jitter grid");
  std::sort(grid.begin(), grid.end());
  if (grid.front() < 0) throw ValidationError("jitter must be >= 0");

  std::vector<std::int64_t> all_rows(z.rows());
  for (std::int64_t i = 0; i < z.rows(); ++i) all_rows[i] = i;

  double chosen = grid.front();
  if (grid.size() > 1) {
    const auto stride = std::max<std::int64_t>(
        2, std::llround(1.0 / std::max(options.holdout_fraction, 1e-9)));
    std::vector<std::int64_t> fit_rows, held_rows;
    std::vector<std::int64_t> seen(class_count, 0);
    for (std::int64_t i = 0; i < z.rows(); ++i) {
      const int y = labels[i];
      if (++seen[y] % stride == 0) {
        held_rows.push_back(i);
      } else {
        fit_rows.push_back(i);
      }
    }
    const GdaModel base =
        model_from(class_moments(z, labels, fit_rows, class_count));
    double best_score = kNegInf;
    bool found = false;
    for (double jitter : grid) {
      GdaModel candidate = base;
      if (!factorize(candidate, jitter)) continue;
      double score = 0.0;
      for (auto i : held_rows) {
        score += gda_log_density(candidate, z.row(i).transpose());
      }
      if (!found || score > best_score) {
        best_score = score;
        chosen = jitter;
        found = true;
      }
    }
    if (!found) {
      throw ComputeError("Cholesky failure at max jitter " +
                         format_double(grid.back()));
    }
  }

  GdaModel model = model_from(class_moments(z, labels, all_rows, class_count));
  for (double jitter : grid) {
    if (jitter < chosen) continue;
    if (factorize(model, jitter)) return model;
  }
  throw ComputeError("Cholesky failure at max jitter " +
                     format_double(grid.back()));
}

Eigen::VectorXd gda_class_log_terms(
    const GdaModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (z.size() != model.dim()) {
    throw ValidationError("GDA input has dimension " + std::to_string(z.size()) +
                          ", model expects " + std::to_string(model.dim()));
  }
  if (!z.allFinite()) throw ValidationError("non-finite GDA input");
  const double log_two_pi = std::log(2.0 * std::numbers::pi);
  const int k = model.class_count();
  Eigen::VectorXd terms(k);
  for (int c = 0; c < k; ++c) {
    const Eigen::VectorXd diff = z - model.means.row(c).transpose();
    const Eigen::VectorXd white =
        model.cholesky[c].triangularView<Eigen::Lower>().solve(diff);
    terms(c) = std::log(model.priors(c)) -
               0.5 * (double(model.dim()) * log_two_pi +
                      model.log_determinants[c] + white.squaredNorm());
  }
  return terms;
}

double gda_log_density(const GdaModel& model,
                       const Eigen::Ref<const Eigen::VectorXd>& z) {
  const Eigen::VectorXd terms = gda_class_log_terms(model, z);
  return log_sum_exp(std::span(terms.data(), terms.size()));
}

Eigen::VectorXd gda_class_posterior(
    const GdaModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  return softmax(gda_class_log_terms(model, z));
}

Eigen::VectorXd with_bias(const Eigen::Ref<const Eigen::VectorXd>& z) {
  Eigen::VectorXd out(z.size() + 1);
  out.head(z.size()) = z;
  out(z.size()) = 1.0;
  return out;
}

namespace {

RowMatrixXd augmented(const Eigen::Ref<const RowMatrixXd>& z) {
  RowMatrixXd out(z.rows(), z.cols() + 1);
  out.leftCols(z.cols()) = z;
  out.col(z.cols()).setOnes();
  return out;
}

// Row-wise softmax of Z~ W^T.
RowMatrixXd class_probabilities(const RowMatrixXd& zt,
                                const Eigen::Ref<const RowMatrixXd>& weights) {
  RowMatrixXd logits = zt * weights.transpose();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - top).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

double objective_on(const RowMatrixXd& zt, std::span<const int> labels,
                    const Eigen::Ref<const RowMatrixXd>& weights, double tau,
                    RowMatrixXd* gradient) {
  const RowMatrixXd logits = zt * weights.transpose();
  double loss = 0.5 * tau * weights.squaredNorm();
  RowMatrixXd residual(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    const double lse =
        top + std::log((logits.row(i).array() - top).exp().sum());
    loss += lse - logits(i, labels[i]);
    if (gradient) {
      residual.row(i) = (logits.row(i).array() - lse).exp();
      residual(i, labels[i]) -= 1.0;
    }
  }
  if (gradient) *gradient = residual.transpose() * zt + tau * weights;
  return loss;
}

}  // namespace

double logistic_objective(const Eigen::Ref<const RowMatrixXd>& weights,
                          const Eigen::Ref<const RowMatrixXd>& z,
                          std::span<const int> labels, double tau,
                          RowMatrixXd* gradient) {
  if (weights.cols() != z.cols() + 1) {
    throw ValidationError("weights must be K x (p + 1)");
  }
  check_labels(labels, z.rows(), static_cast<int>(weights.rows()));
  return objective_on(augmented(z), labels, weights, tau, gradient);
}

LinearFitResult train_linear_map(const Eigen::Ref<const RowMatrixXd>& z,
                                 std::span<const int> labels, int class_count,
                                 double tau, const LinearFitOptions& options) {
  if (!(tau > 0.0)) throw ValidationError("prior precision must be > 0");
  if (class_count < 2) {
    throw ValidationError(
        "a linear head needs at least two classes; single-class fit rejected");
  }
  if (z.rows() < class_count) {
    throw ValidationError("need N >= class_count samples");
  }
  check_labels(labels, z.rows(), class_count);
  if (!z.allFinite()) throw ValidationError("non-finite feature in input");

  const RowMatrixXd zt = augmented(z);
  const std::int64_t k = class_count;
  const std::int64_t q = zt.cols();
  const double n = double(z.rows());

  LinearFitResult result;
  result.weights = RowMatrixXd::Zero(k, q);
  RowMatrixXd gradient;
  double f = objective_on(zt, labels, result.weights, tau, &gradient);

  for (int iter = 0;; ++iter) {
    result.gradient_norm = gradient.cwiseAbs().maxCoeff() / n;
    result.iterations = iter;
    if (result.gradient_norm < options.gradient_tolerance) return result;
    if (iter >= options.max_iterations) {
      throw ComputeError("linear head did not converge: gradient norm " +
                         format_double(result.gradient_norm) + " after " +
                         std::to_string(iter) + " iterations");
    }

    // Hessian in row-major vec(W) order: block (a, b) = Z~^T diag(w_ab) Z~.
    const RowMatrixXd probs = class_probabilities(zt, result.weights);
    Eigen::MatrixXd hessian(k * q, k * q);
    for (std::int64_t a = 0; a < k; ++a) {
      for (std::int64_t b = a; b < k; ++b) {
        Eigen::VectorXd w = -probs.col(a).cwiseProduct(probs.col(b));
        if (a == b) w += probs.col(a);
        const Eigen::MatrixXd block =
            zt.transpose() * w.asDiagonal() * zt;
        hessian.block(a * q, b * q, q, q) = block;
        hessian.block(b * q, a * q, q, q) = block.transpose();
      }
    }
    hessian.diagonal().array() += tau;

    const Eigen::VectorXd g =
        Eigen::Map<const Eigen::VectorXd>(gradient.data(), k * q);
    const Eigen::VectorXd step = -hessian.ldlt().solve(g);
    if (!step.allFinite()) {
      throw ComputeError("linear head Newton step is not finite");
    }
    const double slope = g.dot(step);
    const RowMatrixXd direction =
        Eigen::Map<const RowMatrixXd>(step.data(), k, q);

    double t = 1.0;
    RowMatrixXd trial;
    RowMatrixXd trial_gradient;
    double trial_f = 0.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving, t *= 0.5) {
      trial = result.weights + t * direction;
      trial_f = objective_on(zt, labels, trial, tau, &trial_gradient);
      if (trial_f <= f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // At round-off level the Armijo test is noise; trust the full step.
      trial = result.weights + direction;
      trial_f = objective_on(zt, labels, trial, tau, &trial_gradient);
    }
    result.weights = std::move(trial);
    gradient = std::move(trial_gradient);
    f = trial_f;
  }
}

Eigen::MatrixXd LaplaceLinearModel::posterior_precision() const {
  const double sn = std::sqrt(double(sample_count));
  const double st = std::sqrt(prior_precision);
  Eigen::MatrixXd pa = sn * input_factor;
  pa.diagonal().array() += st;
  Eigen::MatrixXd pg = sn * output_factor;
  pg.diagonal().array() += st;
  Eigen::MatrixXd out(pa.rows() * pg.rows(), pa.cols() * pg.cols());
  for (Eigen::Index i = 0; i < pa.rows(); ++i) {
    for (Eigen::Index j = 0; j < pa.cols(); ++j) {
      out.block(i * pg.rows(), j * pg.cols(), pg.rows(), pg.cols()) =
          pa(i, j) * pg;
    }
  }
  return out;
}

namespace {

void decompose_factors(LaplaceLinearModel& model) {
  const double sn = std::sqrt(double(model.sample_count));
  const double st = std::sqrt(model.prior_precision);
  auto decompose = [&](const Eigen::MatrixXd& factor, Eigen::MatrixXd& basis,
                       Eigen::VectorXd& eigenvalues) {
    Eigen::MatrixXd damped = sn * factor;
    damped.diagonal().array() += st;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(damped);
    if (solver.info() != Eigen::Success) {
      throw ComputeError("Kronecker factor eigendecomposition failed");
    }
    basis = solver.eigenvectors();
    eigenvalues = solver.eigenvalues();
    if (!(eigenvalues.array() > 0.0).all()) {
      throw ComputeError("posterior precision is not positive definite");
    }
  };
  decompose(model.input_factor, model.input_basis, model.input_eigenvalues);
  decompose(model.output_factor, model.output_basis, model.output_eigenvalues);
}

}  // namespace

LaplaceLinearModel fit_laplace(const Eigen::Ref<const RowMatrixXd>& z,
                               std::span<const int> labels,
                               const Eigen::Ref<const RowMatrixXd>& weights,
                               double tau) {
  if (!(tau > 0.0)) throw ValidationError("prior precision must be > 0");
  if (weights.cols() != z.cols() + 1) {
    throw ValidationError("weights must be K x (p + 1)");
  }
  if (z.rows() < 1) throw ValidationError("no samples");
  check_labels(labels, z.rows(), static_cast<int>(weights.rows()));

  const RowMatrixXd zt = augmented(z);
  const RowMatrixXd probs = class_probabilities(zt, weights);
  const double n = double(z.rows());

  LaplaceLinearModel model;
  model.weights = weights;
  model.prior_precision = tau;
  model.sample_count = z.rows();
  model.input_factor = zt.transpose() * zt / n;
  Eigen::MatrixXd g = -(probs.transpose() * probs);
  g.diagonal() += probs.colwise().sum().transpose();
  model.output_factor = g / n;
  decompose_factors(model);
  return model;
}

Eigen::VectorXd map_probabilities(const LaplaceLinearModel& model,
                                  const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (z.size() != model.dim()) {
    throw ValidationError("linear head input has dimension " +
                          std::to_string(z.size()) + ", model expects " +
                          std::to_string(model.dim()));
  }
  return softmax(model.weights * with_bias(z));
}

Eigen::VectorXd predict_probabilities(
    const LaplaceLinearModel& model,
    const Eigen::Ref<const Eigen::VectorXd>& z, int samples,
    std::uint64_t seed) {
  if (samples < 1) throw ValidationError("posterior samples must be >= 1");
  if (z.size() != model.dim()) {
    throw ValidationError("linear head input has dimension " +
                          std::to_string(z.size()) + ", model expects " +
                          std::to_string(model.dim()));
  }
  const Eigen::VectorXd zt = with_bias(z);
  const Eigen::VectorXd mean_logits = model.weights * zt;
  // W = W_map + U_G (E ./ sqrt(g a^T)) U_A^T with E standard normal.
  const Eigen::VectorXd rotated = model.input_basis.transpose() * zt;
  const Eigen::MatrixXd scale =
      (model.output_eigenvalues * model.input_eigenvalues.transpose())
          .cwiseSqrt()
          .cwiseInverse();
  const Eigen::MatrixXd weighted = scale * rotated.asDiagonal();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto k = weighted.rows();
  const auto q = weighted.cols();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd noise(k);
  for (int s = 0; s < samples; ++s) {
    noise.setZero();
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index j = 0; j < q; ++j) {
        noise(a) += normal(rng) * weighted(a, j);
      }
    }
    acc += softmax(mean_logits + model.output_basis * noise);
  }
  acc /= double(samples);
  return acc / acc.sum();
}

RowMatrixXd predict_probabilities_batch(const LaplaceLinearModel& model,
                                        const Eigen::Ref<const RowMatrixXd>& z,
                                        int samples, std::uint64_t base_seed,
                                        std::uint64_t first_index) {
  RowMatrixXd out(z.rows(), model.class_count());
  parallel_for(z.rows(), [&](std::int64_t i) {
    out.row(i) = predict_probabilities(model, z.row(i).transpose(), samples,
                                       base_seed ^ (first_index + i))
                     .transpose();
  });
  return out;
}

double select_prior_precision(const Eigen::Ref<const RowMatrixXd>& train_z,
                              std::span<const int> train_labels,
                              const Eigen::Ref<const RowMatrixXd>& val_z,
                              std::span<const int> val_labels,
                              int class_count, std::span<const double> grid) {
  if (grid.empty()) throw ValidationError("empty prior precision grid");
  check_labels(val_labels, val_z.rows(), class_count);
  double best_tau = grid.front();
  double best_nll = std::numeric_limits<double>::infinity();
  for (double tau : grid) {
    const auto fit =
        train_linear_map(train_z, train_labels, class_count, tau);
    const RowMatrixXd probs = class_probabilities(augmented(val_z), fit.weights);
    double nll = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      nll -= std::log(std::max(probs(i, val_labels[i]), 1e-12));
    }
    nll /= double(std::max<Eigen::Index>(1, probs.rows()));
    if (nll < best_nll) {
      best_nll = nll;
      best_tau = tau;
    }
  }
  return best_tau;
}

namespace {

constexpr std::string_view kGdaMagic = "PSCG";
constexpr std::string_view kLaplaceMagic = "PSCL";
constexpr std::uint32_t kHeadVersion = 1;

void put_dense(io::Writer& out, const Eigen::Ref<const RowMatrixXd>& m) {
  const RowMatrixXd copy = m;
  out.put_array(copy.data(), static_cast<std::size_t>(copy.size()));
}

RowMatrixXd get_dense(io::Reader& in, std::int64_t rows, std::int64_t cols) {
  RowMatrixXd m(rows, cols);
  in.get_array(m.data(), static_cast<std::size_t>(m.size()));
  return m;
}

}  // namespace

void save_gda(const std::filesystem::path& path, const GdaModel& model) {
  io::Writer out(path);
  out.magic(kGdaMagic);
  out.put<std::uint32_t>(kHeadVersion);
  out.put<std::uint64_t>(model.class_count());
  out.put<std::uint64_t>(model.dim());
  out.put<double>(model.jitter);
  out.put_array(model.priors.data(), model.priors.size());
  put_dense(out, model.means);
  for (const auto& cov : model.covariances) put_dense(out, cov);
  for (const auto& chol : model.cholesky) put_dense(out, chol);
  out.put<std::uint8_t>(model.pca ? 1 : 0);
  if (model.pca) {
    out.put<std::uint64_t>(model.pca->mean.size());
    out.put_array(model.pca->mean.data(), model.pca->mean.size());
    put_dense(out, model.pca->components);
  }
  out.close();
}

GdaModel load_gda(const std::filesystem::path& path) {
  io::Reader in(path);
  in.expect_magic(kGdaMagic);
  if (in.get<std::uint32_t>() != kHeadVersion) {
    throw ValidationError(path.string() + ": unsupported GDA version");
  }
  const auto k = static_cast<std::int64_t>(in.get<std::uint64_t>());
  const auto p = static_cast<std::int64_t>(in.get<std::uint64_t>());
  if (k < 1 || p < 1) throw ValidationError(path.string() + ": bad dims");
  GdaModel model;
  model.jitter = in.get<double>();
  model.priors.resize(k);
  in.get_array(model.priors.data(), k);
  model.means = get_dense(in, k, p);
  for (std::int64_t c = 0; c < k; ++c) {
    model.covariances.push_back(get_dense(in, p, p));
  }
  for (std::int64_t c = 0; c < k; ++c) {
    Eigen::MatrixXd chol = get_dense(in, p, p);
    model.log_determinants.push_back(2.0 * chol.diagonal().array().log().sum());
    model.cholesky.push_back(std::move(chol));
  }
  if (in.get<std::uint8_t>() != 0) {
    PcaReducer pca;
    const auto p0 = static_cast<std::int64_t>(in.get<std::uint64_t>());
    pca.mean.resize(p0);
    in.get_array(pca.mean.data(), p0);
    pca.components = get_dense(in, p0, p);
    model.pca = std::move(pca);
  }
  if (!in.at_end()) throw ValidationError(path.string() + ": trailing bytes");
  return model;
}

void save_laplace(const std::filesystem::path& path,
                  const LaplaceLinearModel& model) {
  io::Writer out(path);
  out.magic(kLaplaceMagic);
  out.put<std::uint32_t>(kHeadVersion);
  out.put<std::uint64_t>(model.weights.rows());
  out.put<std::uint64_t>(model.weights.cols());
  out.put<double>(model.prior_precision);
  out.put<std::uint64_t>(model.sample_count);
  put_dense(out, model.weights);
  put_dense(out, model.input_factor);
  put_dense(out, model.output_factor);
  out.close();
}

LaplaceLinearModel load_laplace(const std::filesystem::path& path) {
  io::Reader in(path);
  in.expect_magic(kLaplaceMagic);
  if (in.get<std::uint32_t>() != kHeadVersion) {
    throw ValidationError(path.string() + ": unsupported Laplace version");
  }
  const auto k = static_cast<std::int64_t>(in.get<std::uint64_t>());
  const auto q = static_cast<std::int64_t>(in.get<std::uint64_t>());
  if (k < 2 || q < 2) throw ValidationError(path.string() + ": bad dims");
  LaplaceLinearModel model;
  model.prior_precision = in.get<double>();
  model.sample_count = static_cast<std::int64_t>(in.get<std::uint64_t>());
  model.weights = get_dense(in, k, q);
  model.input_factor = get_dense(in, q, q);
  model.output_factor = get_dense(in, k, k);
  if (!in.at_end()) throw ValidationError(path.string() + ": trailing bytes");
  decompose_factors(model);
  return model;
}

}  // namespace psc
