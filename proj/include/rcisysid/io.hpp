#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>

#include <json.hpp>

#include "rcisysid/geometry.hpp"
#include "rcisysid/model.hpp"

namespace rcisysid {

using Json = nlohmann::ordered_json;

inline constexpr const char* kFormatTag = "rci-sysid/1";

/// Matrices are arrays of rows; vectors are flat arrays. Doubles are written
/// with round-trip precision, non-finite values as null.
Json to_json(const Mat& m);
Json to_json(const Vec& v);
Mat mat_from_json(const Json& j);
Vec vec_from_json(const Json& j);

Json to_json(const QlpvModel& m);
QlpvModel model_from_json(const Json& j);
Json to_json(const Scaler& s);
Scaler scaler_from_json(const Json& j);
Json to_json(const DisturbanceSet& w);
DisturbanceSet disturbance_from_json(const Json& j);
Json to_json(const ConstraintPolyhedron& p);
ConstraintPolyhedron polyhedron_from_json(const Json& j);

/// Everything one pipeline stage hands to the next. Constraint sets, the
/// model and the disturbance set live in scaled coordinates.
struct Artifact {
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  QlpvModel model;
  Scaler scaler;
  DisturbanceSet w;
  ConstraintPolyhedron U, Y;
  Mat sigma;           // box template shape; empty before init-rci
  Vec q;               // empty when no certified set exists
  Mat vertex_inputs;
  double r = std::numeric_limits<double>::infinity();
  std::map<std::string, double> metrics;

  bool has_set() const { return sigma.size() > 0 && q.size() > 0; }
};

Json to_json(const Artifact& a);
Artifact artifact_from_json(const Json& j);

/// Throws ConfigError on unreadable files or a wrong format tag.
Json read_json_file(const std::string& path);
void write_json_file(const Json& j, const std::string& path);
Artifact load_artifact(const std::string& path);
void save_artifact(const Artifact& a, const std::string& path);

/// 64-bit FNV-1a of the compact dump, as 16 hex digits.
std::string config_hash(const Json& config);

}  // namespace rcisysid
