#pragma once

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "tpr/error.hpp"

namespace tpr {

struct JacobiOptions {
  int max_sweeps = 100;
  /// Converged once max |off-diagonal| < tolerance * ||G||_F.
  double tolerance = 1e-10;
};

/// Raised when the Jacobi sweep cap is reached before convergence.
class ConvergenceError : public NumericError {
 public:
  ConvergenceError(const std::string& what, double residual) : NumericError(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending. Only the upper triangle is read.
std::vector<double> symmetric_eigenvalues(Eigen::MatrixXd g, const JacobiOptions& opt = {});

/// Eigenvalues of Z^T Z (the squared singular values of Z), descending and
/// clamped at zero.
template <typename Derived>
std::vector<double> gram_eigenvalues(const Eigen::MatrixBase<Derived>& z, const JacobiOptions& opt = {}) {
  if (z.rows() < 1 || z.cols() < 1) throw NumericError("gram_eigenvalues: empty matrix");
  if (!z.allFinite()) throw NumericError("gram_eigenvalues: non-finite entries");
  const Eigen::MatrixXd zd = z.template cast<double>();
  Eigen::MatrixXd g = zd.transpose() * zd;
  std::vector<double> ev = symmetric_eigenvalues(std::move(g), opt);
  for (double& v : ev) v = v < 0.0 ? 0.0 : v;
  return ev;
}

/// Singular values of Z via gram_eigenvalues.
template <typename Derived>
std::vector<double> singular_values(const Eigen::MatrixBase<Derived>& z, const JacobiOptions& opt = {}) {
  std::vector<double> ev = gram_eigenvalues(z, opt);
  for (double& v : ev) v = std::sqrt(v);
  return ev;
}

}  // namespace tpr
