#include "rcisysid/geometry.hpp"

#include <cmath>
#include <sstream>

#include "rcisysid/error.hpp"

namespace rcisysid {

Mat TemplatePolytope::vertices(const Vec& q) const {
  Mat out(nx(), nv());
  for (int k = 0; k < nv(); ++k) out.col(k) = vertex_maps[k] * q;
  return out;
}

TemplatePolytope make_box_template(int nx, const Mat& sigma) {
  if (nx < 1 || sigma.rows() != nx || sigma.cols() != nx) {
    throw ConfigError("make_box_template: sigma must be " + std::to_string(nx) + "x" +
                      std::to_string(nx));
  }
  const double det = sigma.determinant();
  if (!(std::abs(det) > 1e-10)) {
    std::ostringstream msg;
    msg << "make_box_template: sigma is near-singular, |det| = " << std::abs(det);
    throw ConfigError(msg.str());
  }
  if (nx > 20) throw ConfigError("make_box_template: n_x too large for vertex enumeration");

  TemplatePolytope poly;
  poly.sigma = sigma;
  Mat base(2 * nx, nx);
  base << Mat::Identity(nx, nx), -Mat::Identity(nx, nx);
  poly.F = base * sigma.inverse();

  // q_upper + q_lower >= 0 per coordinate
  poly.E.resize(nx, 2 * nx);
  poly.E << -Mat::Identity(nx, nx), -Mat::Identity(nx, nx);

  const int nv = 1 << nx;
  poly.vertex_maps.reserve(nv);
  for (int k = 0; k < nv; ++k) {
    Mat selector = Mat::Zero(nx, 2 * nx);
    for (int i = 0; i < nx; ++i) {
      if ((k >> i) & 1) {
        selector(i, nx + i) = -1.0;
      } else {
        selector(i, i) = 1.0;
      }
    }
    poly.vertex_maps.push_back(sigma * selector);
  }
  return poly;
}

bool contains(const TemplatePolytope& poly, const Vec& q, const Vec& x) {
  if (x.size() != poly.nx() || q.size() != poly.nf()) {
    throw ConfigError("contains: dimension mismatch");
  }
  return ((poly.F * x - q).array() <= kGeomTol).all();
}

bool in_configuration_cone(const TemplatePolytope& poly, const Vec& q) {
  if (q.size() != poly.nf()) throw ConfigError("in_configuration_cone: dimension mismatch");
  return ((poly.E * q).array() <= kGeomTol).all();
}

bool ConstraintPolyhedron::contains(const Vec& x, double tol) const {
  if (x.size() != dim()) throw ConfigError("ConstraintPolyhedron::contains: dimension mismatch");
  return ((H * x - h).array() <= tol).all();
}

ConstraintPolyhedron ConstraintPolyhedron::box(const Vec& lo, const Vec& hi) {
  const int n = static_cast<int>(lo.size());
  if (hi.size() != n) throw ConfigError("box: bound size mismatch");
  if (((hi - lo).array() < 0.0).any()) throw ConfigError("box: lower bound exceeds upper bound");
  if (n > 20) throw ConfigError("box: dimension too large for vertex enumeration");
  ConstraintPolyhedron out;
  out.H.resize(2 * n, n);
  out.H << Mat::Identity(n, n), -Mat::Identity(n, n);
  out.h.resize(2 * n);
  out.h << hi, -lo;
  Mat verts(n, 1 << n);
  for (int k = 0; k < (1 << n); ++k) {
    for (int i = 0; i < n; ++i) verts(i, k) = ((k >> i) & 1) ? lo(i) : hi(i);
  }
  out.vertices = verts;
  return out;
}

ConstraintPolyhedron ConstraintPolyhedron::to_scaled(const Vec& offset, const Vec& scale) const {
  if (offset.size() != dim() || scale.size() != dim()) {
    throw ConfigError("to_scaled: dimension mismatch");
  }
  ConstraintPolyhedron out;
  out.H = H * scale.asDiagonal();
  out.h = h - H * offset;
  if (vertices) {
    Mat v = *vertices;
    for (int k = 0; k < v.cols(); ++k) {
      v.col(k) = (v.col(k) - offset).cwiseQuotient(scale);
    }
    out.vertices = v;
  }
  return out;
}

}  // namespace rcisysid
