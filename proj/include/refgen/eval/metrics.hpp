#pragma once

// Distribution and pairwise metrics: Frechet distance between Gaussian fits,
// KL divergence between class distributions, cosine scores between embeddings.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "refgen/core/error.hpp"

namespace refgen::eval {

struct FeatureSet {
  Eigen::MatrixXd rows;  // N x d
  std::string extractor;
};

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline constexpr double kPsdTolerance = 1e-8;

/// Mean and unbiased covariance.
inline GaussianStats fit_gaussian(const FeatureSet& f) {
  if (f.rows.rows() < 2) throw ValidationError("fit_gaussian: need at least 2 embeddings, got " + std::to_string(f.rows.rows()));
  if (!f.rows.allFinite()) throw ValidationError("fit_gaussian: non-finite embedding entries");
  GaussianStats g;
  g.mean = f.rows.colwise().mean().transpose();
  const Eigen::MatrixXd c = f.rows.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(f.rows.rows() - 1);
  return g;
}

namespace detail {

/// Symmetric square root with negative eigenvalues clipped to 0. Throws when
/// an eigenvalue is below -kPsdTolerance * max(1, largest |eigenvalue|).
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what, Eigen::VectorXd* evals_out = nullptr) {
  if (!m.isApprox(m.transpose(), 1e-9) && (m - m.transpose()).norm() > kPsdTolerance)
    throw ValidationError(std::string(what) + ": covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const auto& ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -kPsdTolerance * scale)
    throw ValidationError(std::string(what) + ": covariance is not positive semidefinite (eigenvalue " +
                          std::to_string(ev.minCoeff()) + ")");
  const Eigen::VectorXd clipped = ev.cwiseMax(0.0);
  if (evals_out) *evals_out = clipped;
  return es.eigenvectors() * clipped.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

struct FrechetResult {
  double distance = 0;
  double sqrt_residual = 0;  // ||S S - Sa Sb||_F / max(1, ||Sa Sb||_F)
  double offset = 0;         // diagonal jitter added when neither root was accurate
};

namespace detail {

/// S with S S = Ca Cb from R = Ca^(1/2), M = R Cb R: S = R M^(1/2) R^+. Exact
/// when Ca has full rank; tr S = tr M^(1/2) always.
inline Eigen::MatrixXd product_root(const Eigen::MatrixXd& ca, const Eigen::MatrixXd& cb, double* trace_root) {
  const auto d = ca.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (ca + ca.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  const double cutoff = 1e-12 * std::max(1.0, ev.maxCoeff());
  Eigen::VectorXd inv(d);
  for (Eigen::Index i = 0; i < d; ++i) inv[i] = ev[i] > cutoff ? 1.0 / std::sqrt(ev[i]) : 0.0;
  const Eigen::MatrixXd r = es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
  const Eigen::MatrixXd r_pinv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  Eigen::VectorXd m_ev;
  const Eigen::MatrixXd mroot = psd_sqrt(r * cb * r, "frechet_distance", &m_ev);
  *trace_root = m_ev.cwiseSqrt().sum();
  return r * mroot * r_pinv;
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)).
///
/// The root is built from whichever covariance has full rank (the transpose of
/// the Sb-side root squares to Sa Sb). Every root is checked by
/// ||S S - Sa Sb||_F < 1e-6 relative; if both sides fail, both covariances get
/// a small diagonal offset and the root is recomputed.
inline FrechetResult frechet_distance_detailed(const GaussianStats& a, const GaussianStats& b) {
  const auto d = a.mean.size();
  if (b.mean.size() != d || a.cov.rows() != d || a.cov.cols() != d || b.cov.rows() != d || b.cov.cols() != d)
    throw ValidationError("frechet_distance: dimension mismatch");
  detail::psd_sqrt(a.cov, "frechet_distance");
  detail::psd_sqrt(b.cov, "frechet_distance");
  FrechetResult res;
  double trace_root = 0;
  for (int attempt = 0; attempt < 2; ++attempt) {
    const Eigen::MatrixXd ca = a.cov + res.offset * Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd cb = b.cov + res.offset * Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd prod = ca * cb;
    const double scale = std::max(1.0, prod.norm());
    const Eigen::MatrixXd sa = detail::product_root(ca, cb, &trace_root);
    res.sqrt_residual = (sa * sa - prod).norm() / scale;
    if (res.sqrt_residual < 1e-6) break;
    double tb = 0;
    const Eigen::MatrixXd sb = detail::product_root(cb, ca, &tb).transpose();
    const double rb = (sb * sb - prod).norm() / scale;
    if (rb < res.sqrt_residual) {
      res.sqrt_residual = rb;
      trace_root = tb;
    }
    if (res.sqrt_residual < 1e-6) break;
    res.offset = 1e-6 * std::max(1.0, (a.cov.trace() + b.cov.trace()) / (2.0 * d));
  }
  res.distance = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_root;
  res.distance = std::max(0.0, res.distance);
  return res;
}

inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  return frechet_distance_detailed(a, b).distance;
}

inline constexpr double kProbFloor = 1e-12;

/// sum p_i ln(p_i / max(q_i, 1e-12)) in nats; terms with p_i = 0 contribute 0.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty()) throw ValidationError("kl_divergence: distributions differ in length");
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0) || !(q[i] >= 0)) throw ValidationError("kl_divergence: negative or NaN probability at index " + std::to_string(i));
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1) > 1e-6 || std::abs(sq - 1) > 1e-6) throw ValidationError("kl_divergence: probabilities must sum to 1");
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) kl += p[i] * std::log(p[i] / std::max(q[i], kProbFloor));
  return std::max(0.0, kl);
}

/// (a . b) / max(||a|| ||b||, eps).
inline double cosine_score(const std::vector<double>& a, const std::vector<double>& b, double eps = 1e-8) {
  if (a.size() != b.size()) throw ValidationError("cosine score: embedding sizes differ");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), eps);
}

/// Audio embedding against text embedding.
inline double clap_score(const std::vector<double>& e_a, const std::vector<double>& e_t, double eps = 1e-8) {
  return cosine_score(e_a, e_t, eps);
}

/// Target audio embedding against generated audio embedding.
inline double clap_a_score(const std::vector<double>& e_a, const std::vector<double>& e_hat, double eps = 1e-8) {
  return cosine_score(e_a, e_hat, eps);
}

}  // namespace refgen::eval
