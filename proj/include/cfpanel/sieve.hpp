#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cfpanel/config.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/linalg.hpp"

namespace cfpanel {

/// Axis-aligned domain box.
struct Box {
  VectorXd lo;
  VectorXd hi;

  Index dim() const noexcept { return lo.size(); }

  static Box symmetric(Index dim, double half = 1.0) {
    return {VectorXd::Constant(dim, -half), VectorXd::Constant(dim, half)};
  }

  /// Componentwise [min, max] of the rows of `x`.
  static Box of_rows(const MatrixXd& x) {
    if (x.rows() == 0) throw DataError("cannot take the box of an empty sample");
    return {x.colwise().minCoeff().transpose(), x.colwise().maxCoeff().transpose()};
  }

  Box widened(const VectorXd& pad) const { return {lo - pad, hi + pad}; }

  bool contains(const VectorXd& x, double tol = 0.0) const {
    return ((x - lo).array() >= -tol).all() && ((hi - x).array() >= -tol).all();
  }
};

/// Finite set of approximating functions with analytic first derivatives.
///
/// Power series: all monomials of total degree <= d (plus optional extra terms) in
/// inputs rescaled affinely so the box maps to [-1, 1]^dim. B-splines: tensor products
/// of clamped univariate splines; the first tensor function is replaced by the constant,
/// which leaves the span unchanged because the splines sum to one on the box.
class SieveBasis {
public:
  static constexpr Index max_dim_out = 10000;

  static SieveBasis power(Index dim_in, int degree, Box box = {}, std::vector<std::vector<int>> extra = {}) {
    if (dim_in < 1) throw ConfigError("basis needs at least one input");
    if (degree < 0) throw ConfigError("power basis degree must be >= 0");
    if (box.dim() == 0) box = Box::symmetric(dim_in);
    check_box(box, dim_in);
    SieveBasis b;
    b.kind_ = BasisKind::power;
    b.dim_in_ = dim_in;
    b.box_ = box;
    b.degree_ = degree;
    double count = 1.0;
    for (int k = 1; k <= degree; ++k) count = count * static_cast<double>(dim_in + k) / k;
    if (count > static_cast<double>(max_dim_out))
      throw ConfigError("power basis would have " + std::to_string(static_cast<long long>(count)) +
                        " functions (limit " + std::to_string(max_dim_out) + ")");
    for (int d = 0; d <= degree; ++d) {
      std::vector<int> e(static_cast<std::size_t>(dim_in), 0);
      graded(e, 0, d, b.exponents_);
    }
    for (auto& t : extra) {
      if (static_cast<Index>(t.size()) != dim_in)
        throw ConfigError("extra basis term has " + std::to_string(t.size()) + " exponents, expected " +
                          std::to_string(dim_in));
      if (std::any_of(t.begin(), t.end(), [](int v) { return v < 0; }))
        throw ConfigError("extra basis term has a negative exponent");
      if (std::find(b.exponents_.begin(), b.exponents_.end(), t) == b.exponents_.end()) b.exponents_.push_back(t);
    }
    if (static_cast<Index>(b.exponents_.size()) > max_dim_out) throw ConfigError("power basis too large");
    b.dim_out_ = static_cast<Index>(b.exponents_.size());
    b.center_ = 0.5 * (box.lo + box.hi);
    b.half_width_ = 0.5 * (box.hi - box.lo);
    for (Index j = 0; j < dim_in; ++j)
      if (!(b.half_width_(j) > 0.0)) b.half_width_(j) = 1.0;
    return b;
  }

  /// Tensor-product B-spline basis. `interior` holds the interior knots per dimension.
  static SieveBasis bspline(Index dim_in, int degree, const Box& box, std::vector<std::vector<double>> interior) {
    if (dim_in < 1) throw ConfigError("basis needs at least one input");
    if (degree < 1) throw ConfigError("B-spline degree must be >= 1");
    check_box(box, dim_in);
    if (static_cast<Index>(interior.size()) != dim_in) throw ConfigError("need one interior knot list per dimension");
    SieveBasis b;
    b.kind_ = BasisKind::bspline;
    b.dim_in_ = dim_in;
    b.box_ = box;
    b.degree_ = degree;
    double count = 1.0;
    for (Index j = 0; j < dim_in; ++j) {
      const auto& in = interior[static_cast<std::size_t>(j)];
      const double lo = box.lo(j), hi = box.hi(j);
      if (!(hi > lo)) throw ConfigError("B-spline box has an empty side in dimension " + std::to_string(j));
      for (std::size_t k = 0; k < in.size(); ++k) {
        if (!(in[k] > lo && in[k] < hi)) throw ConfigError("interior knot outside the open box");
        if (k > 0 && !(in[k] > in[k - 1])) throw ConfigError("knots must be strictly increasing");
      }
      std::vector<double> full(static_cast<std::size_t>(degree + 1), lo);
      full.insert(full.end(), in.begin(), in.end());
      full.insert(full.end(), static_cast<std::size_t>(degree + 1), hi);
      b.knots_.push_back(std::move(full));
      b.univariate_.push_back(static_cast<Index>(in.size()) + degree + 1);
      count *= static_cast<double>(b.univariate_.back());
    }
    if (count > static_cast<double>(max_dim_out))
      throw ConfigError("B-spline basis would have " + std::to_string(static_cast<long long>(count)) +
                        " functions (limit " + std::to_string(max_dim_out) + ")");
    b.dim_out_ = static_cast<Index>(count);
    return b;
  }

  BasisKind kind() const noexcept { return kind_; }
  Index dim_in() const noexcept { return dim_in_; }
  Index dim_out() const noexcept { return dim_out_; }
  int degree() const noexcept { return degree_; }
  const Box& box() const noexcept { return box_; }
  const std::vector<std::vector<int>>& exponents() const noexcept { return exponents_; }
  const std::vector<double>& knot_vector(Index dim) const { return knots_.at(static_cast<std::size_t>(dim)); }

  /// Copy whose functions are all multiplied by `factor`.
  SieveBasis scaled(double factor) const {
    SieveBasis b = *this;
    b.scale_ *= factor;
    return b;
  }

  std::string label() const {
    if (kind_ == BasisKind::power) return "power(d=" + std::to_string(degree_) + ",K=" + std::to_string(dim_out_) + ")";
    return "bspline(p=" + std::to_string(degree_) + ",knots=" + std::to_string(univariate_.front() - degree_ - 1) +
           ",K=" + std::to_string(dim_out_) + ")";
  }

  VectorXd evaluate(const VectorXd& x) const {
    VectorXd out(dim_out_);
    fill(x, &out, nullptr);
    return out;
  }

  /// dim_out x dim_in matrix of partial derivatives.
  MatrixXd jacobian(const VectorXd& x) const {
    VectorXd val(dim_out_);
    MatrixXd jac(dim_out_, dim_in_);
    fill(x, &val, &jac);
    return jac;
  }

  void evaluate_with_jacobian(const VectorXd& x, VectorXd& val, MatrixXd& jac) const {
    val.resize(dim_out_);
    jac.resize(dim_out_, dim_in_);
    fill(x, &val, &jac);
  }

  /// n x dim_out design matrix for the rows of `x`.
  MatrixXd design(const MatrixXd& x) const {
    if (x.cols() != dim_in_)
      throw DataError("basis expects " + std::to_string(dim_in_) + " inputs, got " + std::to_string(x.cols()));
    MatrixXd out(x.rows(), dim_out_);
    VectorXd row(dim_out_);
    for (Index i = 0; i < x.rows(); ++i) {
      fill(x.row(i).transpose(), &row, nullptr);
      out.row(i) = row.transpose();
    }
    return out;
  }

  /// Values and derivatives of the univariate splines of dimension `dim` at `x`.
  void univariate(Index dim, double x, VectorXd& val, VectorXd& der) const {
    const auto& U = knots_[static_cast<std::size_t>(dim)];
    const Index nb = univariate_[static_cast<std::size_t>(dim)];
    const int p = degree_;
    const double lo = U.front(), hi = U.back();
    const bool outside = x < lo || x > hi;
    x = std::clamp(x, lo, hi);
    // Span index s with U[s] <= x < U[s+1]; the right end uses the last nonempty span.
    auto s = static_cast<Index>(std::upper_bound(U.begin(), U.end(), x) - U.begin()) - 1;
    s = std::min<Index>(s, nb - 1);
    while (s > p && U[static_cast<std::size_t>(s)] == U[static_cast<std::size_t>(s + 1)]) --s;

    // Nonzero functions N_{s-p..s} by the triangular Cox-de Boor scheme.
    std::vector<double> N(static_cast<std::size_t>(p + 1), 0.0), left(static_cast<std::size_t>(p + 1)),
        right(static_cast<std::size_t>(p + 1));
    std::vector<double> Nlow(static_cast<std::size_t>(p), 0.0);
    N[0] = 1.0;
    for (int j = 1; j <= p; ++j) {
      if (j == p) std::copy(N.begin(), N.begin() + p, Nlow.begin());
      left[static_cast<std::size_t>(j)] = x - U[static_cast<std::size_t>(s + 1 - j)];
      right[static_cast<std::size_t>(j)] = U[static_cast<std::size_t>(s + j)] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double denom = right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(j - r)];
        const double tmp = N[static_cast<std::size_t>(r)] / denom;
        N[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r + 1)] * tmp;
        saved = left[static_cast<std::size_t>(j - r)] * tmp;
      }
      N[static_cast<std::size_t>(j)] = saved;
    }
    val = VectorXd::Zero(nb);
    der = VectorXd::Zero(nb);
    for (int r = 0; r <= p; ++r) val(s - p + r) = N[static_cast<std::size_t>(r)];
    if (outside) return;
    // N'_{k,p} = p [N_{k,p-1}/(u_{k+p}-u_k) - N_{k+1,p-1}/(u_{k+p+1}-u_{k+1})]
    for (int r = 0; r <= p; ++r) {
      const Index k = s - p + r;
      double d = 0.0;
      if (r >= 1) {
        const double a = U[static_cast<std::size_t>(k + p)] - U[static_cast<std::size_t>(k)];
        if (a > 0.0) d += Nlow[static_cast<std::size_t>(r - 1)] / a;
      }
      if (r <= p - 1) {
        const double b = U[static_cast<std::size_t>(k + p + 1)] - U[static_cast<std::size_t>(k + 1)];
        if (b > 0.0) d -= Nlow[static_cast<std::size_t>(r)] / b;
      }
      der(k) = p * d;
    }
  }

private:
  static void check_box(const Box& box, Index dim_in) {
    if (box.dim() != dim_in || box.hi.size() != dim_in) throw ConfigError("basis box dimension mismatch");
    if (!box.lo.allFinite() || !box.hi.allFinite() || ((box.hi - box.lo).array() < 0.0).any())
      throw ConfigError("basis box must be finite with lo <= hi");
  }

  static void graded(std::vector<int>& e, std::size_t pos, int left, std::vector<std::vector<int>>& out) {
    if (pos + 1 == e.size()) {
      e[pos] = left;
      out.push_back(e);
      return;
    }
    for (int k = left; k >= 0; --k) {
      e[pos] = k;
      graded(e, pos + 1, left - k, out);
    }
    e[pos] = 0;
  }

  void fill(const VectorXd& x, VectorXd* val, MatrixXd* jac) const {
    if (x.size() != dim_in_)
      throw DataError("basis expects " + std::to_string(dim_in_) + " inputs, got " + std::to_string(x.size()));
    if (kind_ == BasisKind::power)
      fill_power(x, *val, jac);
    else
      fill_bspline(x, *val, jac);
    if (scale_ != 1.0) {
      *val *= scale_;
      if (jac) *jac *= scale_;
    }
  }

  void fill_power(const VectorXd& x, VectorXd& val, MatrixXd* jac) const {
    int top = 0;
    for (const auto& e : exponents_) top = std::max(top, *std::max_element(e.begin(), e.end()));
    // pw(j, k) = u_j^k
    MatrixXd pw(dim_in_, top + 1);
    for (Index j = 0; j < dim_in_; ++j) {
      const double u = (x(j) - center_(j)) / half_width_(j);
      pw(j, 0) = 1.0;
      for (int k = 1; k <= top; ++k) pw(j, k) = pw(j, k - 1) * u;
    }
    for (Index r = 0; r < dim_out_; ++r) {
      const auto& e = exponents_[static_cast<std::size_t>(r)];
      double v = 1.0;
      for (Index j = 0; j < dim_in_; ++j) v *= pw(j, e[static_cast<std::size_t>(j)]);
      val(r) = v;
      if (!jac) continue;
      for (Index j = 0; j < dim_in_; ++j) {
        const int ej = e[static_cast<std::size_t>(j)];
        if (ej == 0) {
          (*jac)(r, j) = 0.0;
          continue;
        }
        double d = ej * pw(j, ej - 1) / half_width_(j);
        for (Index k = 0; k < dim_in_; ++k)
          if (k != j) d *= pw(k, e[static_cast<std::size_t>(k)]);
        (*jac)(r, j) = d;
      }
    }
  }

  void fill_bspline(const VectorXd& x, VectorXd& val, MatrixXd* jac) const {
    std::vector<VectorXd> v(static_cast<std::size_t>(dim_in_)), d(static_cast<std::size_t>(dim_in_));
    for (Index j = 0; j < dim_in_; ++j) univariate(j, x(j), v[static_cast<std::size_t>(j)], d[static_cast<std::size_t>(j)]);
    // Tensor index with the last dimension varying fastest.
    std::vector<Index> idx(static_cast<std::size_t>(dim_in_), 0);
    for (Index r = 0; r < dim_out_; ++r) {
      double prod = 1.0;
      for (Index j = 0; j < dim_in_; ++j) prod *= v[static_cast<std::size_t>(j)](idx[static_cast<std::size_t>(j)]);
      val(r) = prod;
      if (jac) {
        for (Index j = 0; j < dim_in_; ++j) {
          double g = d[static_cast<std::size_t>(j)](idx[static_cast<std::size_t>(j)]);
          for (Index k = 0; k < dim_in_; ++k)
            if (k != j) g *= v[static_cast<std::size_t>(k)](idx[static_cast<std::size_t>(k)]);
          (*jac)(r, j) = g;
        }
      }
      for (Index j = dim_in_ - 1; j >= 0; --j) {
        if (++idx[static_cast<std::size_t>(j)] < univariate_[static_cast<std::size_t>(j)]) break;
        idx[static_cast<std::size_t>(j)] = 0;
      }
    }
    val(0) = 1.0;
    if (jac) jac->row(0).setZero();
  }

  BasisKind kind_ = BasisKind::power;
  Index dim_in_ = 0;
  Index dim_out_ = 0;
  int degree_ = 0;
  Box box_;
  double scale_ = 1.0;
  std::vector<std::vector<int>> exponents_;
  VectorXd center_;
  VectorXd half_width_;
  std::vector<std::vector<double>> knots_;
  std::vector<Index> univariate_;
};

/// Resolve a basis request on a sample: knots go to sample quantiles (or uniform) inside `box`.
inline SieveBasis make_basis(const BasisSpec& spec, const MatrixXd& sample, const Box& box) {
  const Index dim = box.dim();
  const int degree = spec.degree_for(sample.rows());
  if (spec.kind == BasisKind::power) return SieveBasis::power(dim, degree, box, spec.extra_terms);
  if (!spec.extra_terms.empty()) throw ConfigError("extra terms are only supported for power bases");
  std::vector<std::vector<double>> interior(static_cast<std::size_t>(dim));
  for (Index j = 0; j < dim; ++j) {
    const double lo = box.lo(j), hi = box.hi(j);
    auto& knots = interior[static_cast<std::size_t>(j)];
    auto uniform = [&] {
      knots.clear();
      for (int k = 1; k <= spec.knots; ++k) knots.push_back(lo + (hi - lo) * k / (spec.knots + 1));
    };
    if (spec.quantile_knots && sample.rows() > 0) {
      std::vector<double> col(sample.col(j).data(), sample.col(j).data() + sample.rows());
      for (int k = 1; k <= spec.knots; ++k) knots.push_back(linalg::quantile(col, static_cast<double>(k) / (spec.knots + 1)));
      bool ok = true;
      for (std::size_t k = 0; k < knots.size(); ++k)
        ok = ok && knots[k] > lo && knots[k] < hi && (k == 0 || knots[k] > knots[k - 1]);
      if (!ok) uniform();
    } else {
      uniform();
    }
  }
  Box b = box;
  for (Index j = 0; j < dim; ++j)
    if (!(b.hi(j) > b.lo(j))) {
      b.lo(j) -= 0.5;
      b.hi(j) += 0.5;
    }
  return SieveBasis::bspline(dim, degree, b, interior);
}

/// Least-squares series regression of the columns of Y on a basis.
struct SeriesFit {
  SieveBasis basis;
  MatrixXd coeffs;  ///< dim_out x m
  Index gram_rank = 0;

  Index responses() const noexcept { return coeffs.cols(); }

  VectorXd predict(const VectorXd& x) const { return coeffs.transpose() * basis.evaluate(x); }

  MatrixXd predict_rows(const MatrixXd& x) const { return basis.design(x) * coeffs; }

  /// m x dim_in derivative of the fitted responses.
  MatrixXd jacobian(const VectorXd& x) const { return coeffs.transpose() * basis.jacobian(x); }
};

/// Fit on a precomputed design matrix so several response sets can share it.
inline SeriesFit series_fit_design(const SieveBasis& basis, const MatrixXd& design, const MatrixXd& Y) {
  if (design.rows() < 1) throw DataError("series regression needs at least one observation");
  if (design.rows() != Y.rows()) throw DataError("design and response row counts differ");
  const linalg::SymmetricPinv pinv(design.transpose() * design);
  return {basis, pinv.solve(design.transpose() * Y), pinv.rank()};
}

inline SeriesFit series_fit(const MatrixXd& X, const MatrixXd& Y, const SieveBasis& basis) {
  return series_fit_design(basis, basis.design(X), Y);
}

struct LooResult {
  double score = 0.0;
  /// Rows whose leverage is numerically one; their terms come from an explicit refit.
  std::vector<Index> degenerate;
};

/// Leave-one-out squared prediction error, summed over rows and response columns.
inline LooResult loo_cv(const MatrixXd& design, const MatrixXd& Y, double leverage_tol = 1e-8) {
  const Index n = design.rows();
  if (n != Y.rows()) throw DataError("design and response row counts differ");
  if (n < 2) throw DataError("leave-one-out needs at least two observations");
  const linalg::SymmetricPinv pinv(design.transpose() * design);
  const MatrixXd coef = pinv.solve(design.transpose() * Y);
  const MatrixXd resid = Y - design * coef;
  const MatrixXd GinvPt = pinv.solve(design.transpose());  // K x n
  LooResult out;
  for (Index i = 0; i < n; ++i) {
    const double h = design.row(i).dot(GinvPt.col(i));
    if (1.0 - h > leverage_tol) {
      out.score += resid.row(i).squaredNorm() / ((1.0 - h) * (1.0 - h));
      continue;
    }
    out.degenerate.push_back(i);
    MatrixXd Pm(n - 1, design.cols()), Ym(n - 1, Y.cols());
    Pm << design.topRows(i), design.bottomRows(n - 1 - i);
    Ym << Y.topRows(i), Y.bottomRows(n - 1 - i);
    const linalg::SymmetricPinv sub(Pm.transpose() * Pm);
    const MatrixXd c = sub.solve(Pm.transpose() * Ym);
    out.score += (Y.row(i) - design.row(i) * c).squaredNorm();
  }
  return out;
}

inline LooResult loo_cv_score(const MatrixXd& X, const MatrixXd& Y, const SieveBasis& basis) {
  return loo_cv(basis.design(X), Y);
}

/// Index of the candidate with the lowest leave-one-out score; ties go to the smaller basis.
inline std::size_t select_basis(const std::vector<SieveBasis>& candidates, const MatrixXd& X, const MatrixXd& Y,
                                std::vector<double>* scores = nullptr) {
  if (candidates.empty()) throw ConfigError("no candidate bases");
  std::size_t best = 0;
  double best_score = 0.0;
  if (scores) scores->clear();
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double s = loo_cv_score(X, Y, candidates[c]).score;
    if (scores) scores->push_back(s);
    const double tol = 1e-12 * std::max(std::abs(s), std::abs(best_score));
    const bool better = c == 0 || s < best_score - tol ||
                        (std::abs(s - best_score) <= tol && candidates[c].dim_out() < candidates[best].dim_out());
    if (better) {
      best = c;
      best_score = s;
    }
  }
  return best;
}

} // namespace cfpanel
