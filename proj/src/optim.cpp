#include "rcisysid/optim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <string>

#include "rcisysid/error.hpp"

namespace rcisysid::optim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Point {
  double a = 0.0;
  double f = kInf;
  double d = 0.0;  // directional derivative
  Vec g;
};

}  // namespace

Result adam(const Objective& f, const Vec& x0, const AdamSettings& s, const Monitor& monitor) {
  Result res;
  Vec x = x0, g(x0.size());
  double fx = f(x, &g);
  ++res.evaluations;
  if (!std::isfinite(fx)) throw NumericalError("adam: objective not finite at the initial point");
  Vec m = Vec::Zero(x.size()), v = Vec::Zero(x.size());
  Vec best = x;
  double f_best = fx;
  double lr = s.lr;
  double b1t = 1.0, b2t = 1.0;
  res.history.push_back(fx);
  for (int it = 0; it < s.iters; ++it) {
    if (!g.allFinite()) throw NumericalError("adam: non-finite gradient at iteration " + std::to_string(it));
    Vec m_new = s.beta1 * m + (1.0 - s.beta1) * g;
    Vec v_new = s.beta2 * v + (1.0 - s.beta2) * g.cwiseAbs2();
    const double b1n = b1t * s.beta1, b2n = b2t * s.beta2;
    const Vec step = lr * (m_new / (1.0 - b1n)).array() / ((v_new / (1.0 - b2n)).array().sqrt() + s.eps);
    Vec x_try = x - step;
    Vec g_try(x.size());
    const double f_try = f(x_try, &g_try);
    ++res.evaluations;
    if (!std::isfinite(f_try)) {
      ++res.rejected;
      lr *= 0.5;
      continue;
    }
    m = std::move(m_new);
    v = std::move(v_new);
    b1t = b1n;
    b2t = b2n;
    x = std::move(x_try);
    g = std::move(g_try);
    fx = f_try;
    ++res.iterations;
    res.history.push_back(fx);
    if (fx < f_best) {
      f_best = fx;
      best = x;
    }
    if (monitor && !monitor(it, x, fx)) break;
  }
  res.x = best;
  res.f = f_best;
  return res;
}

namespace {

double interpolate(const Point& lo, const Point& hi) {
  const double width = hi.a - lo.a;
  double a = 0.5 * (lo.a + hi.a);
  if (std::isfinite(lo.f) && std::isfinite(hi.f) && width != 0.0) {
    // cubic through both values and slopes
    const double d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (lo.a - hi.a);
    const double disc = d1 * d1 - lo.d * hi.d;
    if (disc >= 0.0) {
      const double d2 = std::copysign(std::sqrt(disc), hi.a - lo.a);
      const double denom = hi.d - lo.d + 2.0 * d2;
      if (denom != 0.0) a = hi.a - (hi.a - lo.a) * (hi.d + d2 - d1) / denom;
    }
  }
  const double left = std::min(lo.a, hi.a), right = std::max(lo.a, hi.a);
  const double margin = 0.1 * (right - left);
  if (!std::isfinite(a) || a < left + margin || a > right - margin) a = 0.5 * (left + right);
  return a;
}

}  // namespace

Result lbfgs(const Objective& f, const Vec& x0, const LbfgsSettings& s, const Monitor& monitor) {
  Result res;
  const int n = static_cast<int>(x0.size());
  Vec x = x0, g(n);
  double fx = f(x, &g);
  ++res.evaluations;
  if (!std::isfinite(fx)) throw NumericalError("lbfgs: objective not finite at the initial point");
  res.history.push_back(fx);
  std::deque<Vec> S, Y;
  std::deque<double> rho;

  auto eval = [&](const Vec& d, double a) {
    Point p;
    p.a = a;
    p.g.resize(n);
    p.f = f(x + a * d, &p.g);
    ++res.evaluations;
    if (!std::isfinite(p.f) || !p.g.allFinite()) {
      p.f = kInf;
      p.d = 0.0;
    } else {
      p.d = p.g.dot(d);
    }
    return p;
  };

  for (int it = 0; it < s.max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= s.grad_tol) break;
    // two-loop recursion
    Vec q = g;
    std::vector<double> alpha(S.size());
    for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
      alpha[i] = rho[i] * S[i].dot(q);
      q -= alpha[i] * Y[i];
    }
    if (!S.empty()) q *= S.back().dot(Y.back()) / Y.back().squaredNorm();
    for (size_t i = 0; i < S.size(); ++i) {
      const double beta = rho[i] * Y[i].dot(q);
      q += (alpha[i] - beta) * S[i];
    }
    Vec d = -q;
    double d0 = g.dot(d);
    if (!(d0 < 0.0)) {
      S.clear();
      Y.clear();
      rho.clear();
      d = -g;
      d0 = -g.squaredNorm();
    }
    double a = S.empty() ? std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>()) : 1.0;

    // strong-Wolfe search
    Point prev{0.0, fx, d0, g};
    Point accepted;
    bool found = false;
    Point best_armijo;
    auto zoom = [&](Point lo, Point hi, int used) {
      for (int z = used; z < s.max_linesearch; ++z) {
        const double aj = interpolate(lo, hi);
        Point pj = eval(d, aj);
        const bool arm_j = pj.f <= fx + s.c1 * aj * d0;
        if (arm_j && pj.f < best_armijo.f) best_armijo = pj;
        if (!arm_j || pj.f >= lo.f) {
          hi = pj;
        } else {
          if (std::abs(pj.d) <= -s.c2 * d0) {
            accepted = pj;
            found = true;
            return;
          }
          if (pj.d * (hi.a - lo.a) >= 0.0) hi = lo;
          lo = pj;
        }
        if (std::abs(hi.a - lo.a) < 1e-16 * std::max(1.0, lo.a)) return;
      }
    };
    for (int ls = 0; ls < s.max_linesearch && !found; ++ls) {
      Point cur = eval(d, a);
      const bool armijo = cur.f <= fx + s.c1 * a * d0;
      if (armijo && cur.f < best_armijo.f) best_armijo = cur;
      if (!armijo || (ls > 0 && cur.f >= prev.f)) {
        zoom(prev, cur, ls);
        break;
      }
      if (std::abs(cur.d) <= -s.c2 * d0) {
        accepted = cur;
        found = true;
        break;
      }
      if (cur.d >= 0.0) {
        zoom(cur, prev, ls);
        break;
      }
      prev = cur;
      a *= 2.0;
    }
    if (!found) {
      // fall back to the best sufficient-decrease point, else give up
      if (std::isfinite(best_armijo.f) && best_armijo.f < fx) {
        accepted = best_armijo;
      } else if (!S.empty()) {
        S.clear();
        Y.clear();
        rho.clear();
        continue;
      } else {
        break;
      }
    }
    const Vec step = accepted.a * d;
    const Vec yv = accepted.g - g;
    const double f_old = fx;
    x += step;
    fx = accepted.f;
    const double sy = step.dot(yv);
    if (sy > 1e-12 * step.norm() * yv.norm()) {
      S.push_back(step);
      Y.push_back(yv);
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > s.memory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
    }
    g = accepted.g;
    ++res.iterations;
    res.history.push_back(fx);
    if (monitor && !monitor(it, x, fx)) break;
    if (f_old - fx <= s.f_tol * std::max({std::abs(f_old), std::abs(fx), 1.0})) break;
  }
  res.x = x;
  res.f = fx;
  return res;
}

}  // namespace rcisysid::optim
