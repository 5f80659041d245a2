#pragma once

#include <optional>

#include "rcisysid/linalg.hpp"

namespace rcisysid {

/// Absolute tolerance shared by all polyhedral predicates.
inline constexpr double kGeomTol = 1e-9;

/// Configuration-constrained polytope family X(q) = {x : F x <= q}.
///
/// For q in the cone {q : E q <= 0} the set is the convex hull of the
/// vertices V_k q. Only the box class F = [I; -I] Sigma^{-1} is constructed
/// here; the struct itself is general so other templates can be plugged in.
struct TemplatePolytope {
  Mat F;                 // f x n_x
  Mat E;                 // rows x f
  MatList vertex_maps;   // v matrices, each n_x x f
  Mat sigma;             // n_x x n_x shape matrix used to build F

  int nx() const { return static_cast<int>(F.cols()); }
  int nf() const { return static_cast<int>(F.rows()); }
  int nv() const { return static_cast<int>(vertex_maps.size()); }

  /// Vertices V_k q, one per column.
  Mat vertices(const Vec& q) const;
};

/// Build the box template F = [I; -I] Sigma^{-1}.
///
/// q = [q_upper; q_lower] bounds Sigma^{-1} x from above by q_upper and from
/// below by -q_lower. Vertex k picks, for coordinate i, the upper bound when
/// bit i of k is clear and the lower one when it is set. Throws ConfigError
/// when |det Sigma| <= 1e-10.
TemplatePolytope make_box_template(int nx, const Mat& sigma);

bool contains(const TemplatePolytope& poly, const Vec& q, const Vec& x);

bool in_configuration_cone(const TemplatePolytope& poly, const Vec& q);

/// Polyhedron {x : H x <= h}, optionally with its vertex list (one per column).
struct ConstraintPolyhedron {
  Mat H;
  Vec h;
  std::optional<Mat> vertices;

  int dim() const { return static_cast<int>(H.cols()); }
  bool contains(const Vec& x, double tol = kGeomTol) const;

  /// Axis-aligned box lo <= x <= hi, with all 2^n corners as vertices.
  static ConstraintPolyhedron box(const Vec& lo, const Vec& hi);

  /// Image under the affine change of variables x = diag(scale) z + offset,
  /// expressed in z coordinates.
  ConstraintPolyhedron to_scaled(const Vec& offset, const Vec& scale) const;
};

}  // namespace rcisysid
