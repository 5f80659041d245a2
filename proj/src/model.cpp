#include "rcisysid/model.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <string>

#include "rcisysid/error.hpp"

namespace rcisysid {

double BranchNet::eval(const Vec& input) const {
  Vec h = input;
  for (const auto& layer : hidden) {
    Vec a = layer.W * h + layer.b;
    for (int k = 0; k < a.size(); ++k) a(k) = swish(a(k));
    h = std::move(a);
  }
  return w_out.dot(h) + b_out;
}

SchedulingNet SchedulingNet::random(int n_p, int nx, int nu, int hidden_layers, int width,
                                    bool uses_input, std::mt19937_64& rng) {
  if (n_p < 1) throw ConfigError("scheduling order n_p must be >= 1");
  if (hidden_layers < 0 || (hidden_layers > 0 && width < 1))
    throw ConfigError("invalid scheduling network shape");
  SchedulingNet net;
  net.n_p = n_p;
  net.nx = nx;
  net.nu = nu;
  net.uses_input = uses_input;
  std::normal_distribution<double> normal;
  auto gaussian = [&](int rows, int cols, double scale) {
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) m(i, j) = scale * normal(rng);
    return m;
  };
  for (int i = 0; i + 1 < n_p; ++i) {
    BranchNet branch;
    int fan_in = net.input_dim();
    for (int l = 0; l < hidden_layers; ++l) {
      branch.hidden.push_back({gaussian(width, fan_in, 1.0 / std::sqrt(double(fan_in))), Vec::Zero(width)});
      fan_in = width;
    }
    branch.w_out = gaussian(fan_in, 1, 1.0 / std::sqrt(double(fan_in))).col(0);
    branch.b_out = 0.0;
    net.branches.push_back(std::move(branch));
  }
  return net;
}

Vec SchedulingNet::net_input(const Vec& x, const Vec& u) const {
  if (x.size() != nx || (uses_input && u.size() != nu))
    throw ConfigError("scheduling input has wrong dimension");
  if (!uses_input) return x;
  Vec in(nx + nu);
  in << x, u;
  return in;
}

Vec SchedulingNet::logits(const Vec& x, const Vec& u) const {
  Vec out(n_p - 1);
  if (n_p == 1) return out;
  const Vec in = net_input(x, u);
  for (int i = 0; i + 1 < n_p; ++i) out(i) = branches[i].eval(in);
  return out;
}

Vec softmax_with_zero(const Vec& logits) {
  const int n = static_cast<int>(logits.size());
  Vec p(n + 1);
  double m = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(logits(i))) throw NumericalError("non-finite scheduling activation");
    m = std::max(m, logits(i));
  }
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    p(i) = std::exp(logits(i) - m);
    total += p(i);
  }
  p(n) = std::exp(-m);
  total += p(n);
  return p / total;
}

Vec SchedulingNet::schedule(const Vec& x, const Vec& u) const {
  if (n_p == 1) return Vec::Ones(1);
  return softmax_with_zero(logits(x, u));
}

QlpvModel QlpvModel::lti(const Mat& A, const Mat& B, const Mat& C) {
  QlpvModel m;
  m.A = {A};
  m.B = {B};
  m.K = {Mat::Zero(A.rows(), C.rows())};
  m.C = C;
  m.net.n_p = 1;
  m.net.nx = static_cast<int>(A.rows());
  m.net.nu = static_cast<int>(B.cols());
  m.x0 = Vec::Zero(A.rows());
  m.validate();
  return m;
}

QlpvModel QlpvModel::from_lti(const Mat& A, const Mat& B, const Mat& C, const SchedulingNet& net) {
  QlpvModel m;
  m.A.assign(net.n_p, A);
  m.B.assign(net.n_p, B);
  m.K.assign(net.n_p, Mat::Zero(A.rows(), C.rows()));
  m.C = C;
  m.net = net;
  m.x0 = Vec::Zero(A.rows());
  m.validate();
  return m;
}

namespace {

Mat combine(const MatList& mats, const Vec& p) {
  Mat out = p(0) * mats[0];
  for (size_t i = 1; i < mats.size(); ++i) out += p(static_cast<int>(i)) * mats[i];
  return out;
}

void check_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw NumericalError(std::string("non-finite ") + what);
}

}  // namespace

Mat QlpvModel::A_of(const Vec& p) const { return combine(A, p); }
Mat QlpvModel::B_of(const Vec& p) const { return combine(B, p); }
Mat QlpvModel::K_of(const Vec& p) const { return combine(K, p); }

Mat QlpvModel::A_nominal() const { return combine(A, Vec::Constant(np(), 1.0 / np())); }
Mat QlpvModel::B_nominal() const { return combine(B, Vec::Constant(np(), 1.0 / np())); }

Vec QlpvModel::step(const Vec& x, const Vec& u) const {
  const Vec p = net.schedule(x, u);
  Vec xn = Vec::Zero(nx());
  for (int i = 0; i < np(); ++i) xn += p(i) * (A[i] * x + B[i] * u);
  check_finite(xn, "state");
  return xn;
}

Vec QlpvModel::step_observer(const Vec& z, const Vec& u, const Vec& y) const {
  const Vec p = net.schedule(z, u);
  const Vec e = y - C * z;
  Vec zn = Vec::Zero(nx());
  for (int i = 0; i < np(); ++i) zn += p(i) * (A[i] * z + B[i] * u + K[i] * e);
  check_finite(zn, "observer state");
  return zn;
}

void QlpvModel::validate() const {
  const int n = nx();
  if (A.empty()) throw ConfigError("model has no vertices");
  if (B.size() != A.size() || K.size() != A.size())
    throw ConfigError("vertex lists A, B, K differ in length");
  if (net.n_p != np()) throw ConfigError("scheduling net order differs from vertex count");
  if (static_cast<int>(net.branches.size()) != std::max(0, np() - 1) && np() > 1)
    throw ConfigError("scheduling net needs n_p - 1 branches");
  const int nu0 = static_cast<int>(B[0].cols());
  for (int i = 0; i < np(); ++i) {
    if (A[i].rows() != n || A[i].cols() != n) throw ConfigError("A_i must be n_x x n_x");
    if (B[i].rows() != n || B[i].cols() != nu0) throw ConfigError("B_i must be n_x x n_u");
    if (K[i].rows() != n || K[i].cols() != ny()) throw ConfigError("K_i must be n_x x n_y");
  }
  if (x0.size() != n) throw ConfigError("x0 must have n_x entries");
  if (net.nx != n || net.nu != nu0) throw ConfigError("scheduling net dimensions differ from model");
}

Scaler Scaler::identity(int nu, int ny) {
  return {Vec::Zero(nu), Vec::Ones(nu), Vec::Zero(ny), Vec::Ones(ny)};
}

void Dataset::validate() const {
  if (u.cols() != y.cols()) throw ConfigError("input and output sequences differ in length");
  if (u.cols() == 0) throw ConfigError("dataset is empty");
  if (!u.allFinite() || !y.allFinite()) throw ConfigError("dataset contains non-finite values");
}

Dataset Dataset::slice(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > size()) throw ConfigError("dataset slice out of range");
  return {u.middleCols(begin, count), y.middleCols(begin, count), dt};
}

namespace {

void channel_stats(const Mat& s, Vec& mean, Vec& stdev, const char* name) {
  const double n = static_cast<double>(s.cols());
  mean = s.rowwise().mean();
  stdev.resize(s.rows());
  for (int i = 0; i < s.rows(); ++i) {
    stdev(i) = std::sqrt((s.row(i).array() - mean(i)).square().sum() / n);
    if (!(stdev(i) > 0.0))
      throw ConfigError(std::string("constant ") + name + " channel " + std::to_string(i + 1) +
                        " cannot be scaled");
  }
}

}  // namespace

Scaler fit_scaler(const Dataset& data) {
  data.validate();
  Scaler s;
  channel_stats(data.u, s.u_mean, s.u_std, "input");
  channel_stats(data.y, s.y_mean, s.y_std, "output");
  return s;
}

Dataset apply_scaler(const Dataset& data, const Scaler& s) {
  Dataset out = data;
  out.u = (data.u.colwise() - s.u_mean).array().colwise() / s.u_std.array();
  out.y = (data.y.colwise() - s.y_mean).array().colwise() / s.y_std.array();
  return out;
}

Mat unscale_outputs(const Mat& y_scaled, const Scaler& s) {
  Mat out = y_scaled.array().colwise() * s.y_std.array();
  return out.colwise() + s.y_mean;
}

Trajectory simulate(const QlpvModel& m, const Dataset& data, SimMode mode) {
  data.validate();
  if (data.nu() != m.nu() || data.ny() != m.ny()) throw ConfigError("dataset dimensions differ from model");
  const int N = data.size();
  Trajectory tr;
  tr.x.resize(m.nx(), N + 1);
  tr.y_hat.resize(m.ny(), N);
  tr.x.col(0) = mode == SimMode::Prediction ? m.x0 : Vec::Zero(m.nx());
  for (int t = 0; t < N; ++t) {
    const Vec x = tr.x.col(t);
    tr.y_hat.col(t) = m.C * x;
    try {
      tr.x.col(t + 1) = mode == SimMode::Prediction ? m.step(x, data.u.col(t))
                                                     : m.step_observer(x, data.u.col(t), data.y.col(t));
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at time index " + std::to_string(t));
    }
  }
  return tr;
}

DisturbanceEstimate estimate_disturbance(const Mat& residuals, double kappa) {
  if (residuals.cols() == 0) throw ConfigError("no residuals to estimate disturbance set");
  if (!(kappa > 1.0)) throw ConfigError("kappa must exceed 1");
  const int ny = static_cast<int>(residuals.rows());
  DisturbanceEstimate est;
  est.set.c_w.resize(ny);
  est.set.eps_w.resize(ny);
  est.set.kappa = kappa;
  est.argmax.assign(ny, 0);
  est.argmin.assign(ny, 0);
  for (int i = 0; i < ny; ++i) {
    for (int t = 1; t < residuals.cols(); ++t) {
      if (residuals(i, t) > residuals(i, est.argmax[i])) est.argmax[i] = t;
      if (residuals(i, t) < residuals(i, est.argmin[i])) est.argmin[i] = t;
    }
    const double hi = residuals(i, est.argmax[i]);
    const double lo = residuals(i, est.argmin[i]);
    est.set.c_w(i) = 0.5 * (hi + lo);
    est.set.eps_w(i) = 0.5 * (hi - lo);
  }
  return est;
}

double bfr(const Mat& y, const Mat& y_hat) {
  if (y.rows() != y_hat.rows() || y.cols() != y_hat.cols()) throw ConfigError("bfr: sequences differ in shape");
  if (y.size() == 0) throw ConfigError("bfr: empty sequence");
  double total = 0.0;
  for (int i = 0; i < y.rows(); ++i) {
    const double denom = (y.row(i).array() - y.row(i).mean()).matrix().norm();
    if (denom == 0.0) {
      std::clog << "warning: bfr undefined for constant output channel " << i + 1 << ", using 0\n";
      continue;
    }
    total += std::max(0.0, 1.0 - (y.row(i) - y_hat.row(i)).norm() / denom) * 100.0;
  }
  return total / static_cast<double>(y.rows());
}

double kappa_lower_bound(const Vec& alpha, const Vec& eps_w) {
  if (alpha.size() != eps_w.size()) throw ConfigError("alpha and eps_w differ in length");
  double worst = 0.0;
  for (int i = 0; i < alpha.size(); ++i) {
    if (eps_w(i) == 0.0) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, alpha(i) / eps_w(i));
  }
  return 1.0 + worst;
}

}  // namespace rcisysid
