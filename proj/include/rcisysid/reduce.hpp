#pragma once

#include <vector>

#include "rcisysid/geometry.hpp"
#include "rcisysid/model.hpp"

namespace rcisysid {

/// Folds branches whose last-layer weights vanish into the terminal vertex.
/// The result has the same input-output behaviour; without constant branches
/// the model is returned unchanged.
QlpvModel lump_constant_branches(const QlpvModel& m, double threshold = 1e-6);

/// Retained scheduling branches and the cached factors
/// f_it = exp(N_i(x_t, u_t) - b_i) along the prediction states of the model.
struct ReductionPlan {
  std::vector<int> retained;  // branch indices in 0..n_p-2, ascending
  Mat factors;                // (n_p - 1) x N, all branches
  int np_reduced = 1;         // retained.size() + 1
  double mse = 0.0;           // of the restricted model
  int candidates = 0;         // index sets evaluated
};

/// Factors f_it over the prediction chain of `m` on `data`.
Mat scheduling_factors(const QlpvModel& m, const Dataset& data);

/// Model keeping only the listed branches (and their vertices) plus the
/// terminal vertex. The dropped logits leave the softmax entirely.
QlpvModel restrict_model(const QlpvModel& m, const std::vector<int>& retained);

/// Exhaustive search over index sets of size np_target - 1, scored by the
/// prediction MSE of the restricted model (+inf when it diverges). Ties go to the lexicographically
/// smallest set. More than 1e6 candidates is a ConfigError.
ReductionPlan select_indices(const QlpvModel& m, const Dataset& data, int np_target);

struct ReducedMatrices {
  Vec b_L;       // np_reduced - 1 biases
  MatList A, B;  // np_reduced vertices
  double objective = 0.0;   // unweighted QP objective (upper bound) at the result
  double fractional = 0.0;  // the normalized least-squares value it bounds
};

/// Refits vertex matrices and output biases for the retained branches so the
/// scheduled [A B] matches the full model along the training states, keeping
/// X(q) invariant for every reduced vertex under the given vertex inputs.
/// An empty q drops the invariance rows. With refine_iters > 0 the QP is
/// re-solved with per-sample weights 1/den_t^2 from the previous iterate and the
/// iterate with the smallest normalized objective is returned.
ReducedMatrices reduce_matrices(const ReductionPlan& plan, const QlpvModel& m, const TemplatePolytope& tmpl,
                                const Vec& q, const Mat& vertex_inputs, int refine_iters = 0);

/// Restricted model carrying the refitted matrices and biases.
QlpvModel apply_reduction(const QlpvModel& m, const ReductionPlan& plan, const ReducedMatrices& red);

struct OutputRefit {
  Mat C;
  DisturbanceSet w;
  double lp_value = 0.0;  // sum of eps_w
};

/// min ||eps_w||_1 s.t. |y_t - C x_t - c_w| <= eps_w over the prediction
/// states of `m`. With `fixed_C` only (c_w, eps_w) are free.
OutputRefit refit_output_map(const QlpvModel& m, const Dataset& data, double kappa,
                             const Mat* fixed_C = nullptr);

}  // namespace rcisysid
