#include "tpr/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace tpr {

namespace {

double max_off_diagonal(const Eigen::MatrixXd& a) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = i + 1; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j)));
  return m;
}

}  // namespace

std::vector<double> symmetric_eigenvalues(Eigen::MatrixXd a, const JacobiOptions& opt) {
  const Eigen::Index n = a.rows();
  if (n != a.cols()) throw NumericError("symmetric_eigenvalues: matrix is not square");
  a = a.triangularView<Eigen::Upper>().toDenseMatrix().selfadjointView<Eigen::Upper>();
  const double norm = a.norm();
  std::vector<double> ev(static_cast<std::size_t>(n), 0.0);
  if (norm == 0.0) return ev;
  const double threshold = opt.tolerance * norm;

  int sweep = 0;
  double off = max_off_diagonal(a);
  while (off >= threshold) {
    if (sweep == opt.max_sweeps) {
      throw ConvergenceError("Jacobi eigensolver did not converge in " + std::to_string(opt.max_sweeps) +
                                 " sweeps; max off-diagonal " + std::to_string(off),
                             off);
    }
    // Row-cyclic ordering: (0,1), (0,2), ..., (n-2,n-1).
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
    ++sweep;
    off = max_off_diagonal(a);
  }
  for (Eigen::Index i = 0; i < n; ++i) ev[static_cast<std::size_t>(i)] = a(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

}  // namespace tpr
