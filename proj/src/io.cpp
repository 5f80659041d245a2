#include "rcisysid/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rcisysid/error.hpp"

namespace rcisysid {

namespace {

Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double number_from(const Json& j) {
  if (j.is_null()) return std::numeric_limits<double>::infinity();
  if (!j.is_number()) throw ConfigError("expected a number, got " + j.dump());
  return j.get<double>();
}

const Json& field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing field '") + key + "'");
  return j.at(key);
}

Json branch_to_json(const BranchNet& b) {
  Json layers = Json::array();
  for (const auto& l : b.hidden) layers.push_back({{"W", to_json(l.W)}, {"b", to_json(l.b)}});
  return {{"hidden", layers}, {"w_out", to_json(b.w_out)}, {"b_out", b.b_out}};
}

BranchNet branch_from_json(const Json& j) {
  BranchNet b;
  for (const auto& l : field(j, "hidden")) b.hidden.push_back({mat_from_json(field(l, "W")), vec_from_json(field(l, "b"))});
  b.w_out = vec_from_json(field(j, "w_out"));
  b.b_out = field(j, "b_out").get<double>();
  return b;
}

Json list_to_json(const MatList& l) {
  Json a = Json::array();
  for (const auto& m : l) a.push_back(to_json(m));
  return a;
}

MatList list_from_json(const Json& j) {
  MatList l;
  for (const auto& m : j) l.push_back(mat_from_json(m));
  return l;
}

}  // namespace

Json to_json(const Mat& m) {
  Json rows = Json::array();
  for (int i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (int k = 0; k < m.cols(); ++k) r.push_back(number(m(i, k)));
    rows.push_back(r);
  }
  // keep the column count for matrices without rows
  if (m.rows() == 0) return Json{{"rows", 0}, {"cols", m.cols()}};
  return rows;
}

Json to_json(const Vec& v) {
  Json a = Json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(number(v(i)));
  return a;
}

Mat mat_from_json(const Json& j) {
  if (j.is_object()) return Mat::Zero(field(j, "rows").get<int>(), field(j, "cols").get<int>());
  if (!j.is_array()) throw ConfigError("matrix must be an array of rows");
  const int r = static_cast<int>(j.size());
  const int c = r ? static_cast<int>(j[0].size()) : 0;
  Mat m(r, c);
  for (int i = 0; i < r; ++i) {
    if (!j[i].is_array() || static_cast<int>(j[i].size()) != c) throw ConfigError("ragged matrix rows");
    for (int k = 0; k < c; ++k) m(i, k) = number_from(j[i][k]);
  }
  return m;
}

Vec vec_from_json(const Json& j) {
  if (!j.is_array()) throw ConfigError("vector must be an array");
  Vec v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(i) = number_from(j[i]);
  return v;
}

Json to_json(const QlpvModel& m) {
  Json branches = Json::array();
  for (const auto& b : m.net.branches) branches.push_back(branch_to_json(b));
  return {{"nx", m.nx()},
          {"nu", m.nu()},
          {"ny", m.ny()},
          {"np", m.np()},
          {"A", list_to_json(m.A)},
          {"B", list_to_json(m.B)},
          {"K", list_to_json(m.K)},
          {"C", to_json(m.C)},
          {"x0", to_json(m.x0)},
          {"net", {{"uses_input", m.net.uses_input}, {"branches", branches}}}};
}

QlpvModel model_from_json(const Json& j) {
  QlpvModel m;
  m.A = list_from_json(field(j, "A"));
  m.B = list_from_json(field(j, "B"));
  m.K = list_from_json(field(j, "K"));
  m.C = mat_from_json(field(j, "C"));
  m.x0 = vec_from_json(field(j, "x0"));
  const Json& net = field(j, "net");
  m.net.n_p = static_cast<int>(m.A.size());
  m.net.nx = field(j, "nx").get<int>();
  m.net.nu = field(j, "nu").get<int>();
  m.net.uses_input = field(net, "uses_input").get<bool>();
  for (const auto& b : field(net, "branches")) m.net.branches.push_back(branch_from_json(b));
  m.validate();
  return m;
}

Json to_json(const Scaler& s) {
  return {{"u_mean", to_json(s.u_mean)}, {"u_std", to_json(s.u_std)}, {"y_mean", to_json(s.y_mean)},
          {"y_std", to_json(s.y_std)}};
}

Scaler scaler_from_json(const Json& j) {
  return {vec_from_json(field(j, "u_mean")), vec_from_json(field(j, "u_std")), vec_from_json(field(j, "y_mean")),
          vec_from_json(field(j, "y_std"))};
}

Json to_json(const DisturbanceSet& w) {
  return {{"c_w", to_json(w.c_w)}, {"eps_w", to_json(w.eps_w)}, {"kappa", w.kappa}};
}

DisturbanceSet disturbance_from_json(const Json& j) {
  return {vec_from_json(field(j, "c_w")), vec_from_json(field(j, "eps_w")), field(j, "kappa").get<double>()};
}

Json to_json(const ConstraintPolyhedron& p) {
  Json j = {{"H", to_json(p.H)}, {"h", to_json(p.h)}};
  if (p.vertices) j["vertices"] = to_json(*p.vertices);
  return j;
}

ConstraintPolyhedron polyhedron_from_json(const Json& j) {
  ConstraintPolyhedron p;
  p.H = mat_from_json(field(j, "H"));
  p.h = vec_from_json(field(j, "h"));
  if (j.contains("vertices")) p.vertices = mat_from_json(j.at("vertices"));
  return p;
}

Json to_json(const Artifact& a) {
  Json metrics = Json::object();
  for (const auto& [k, v] : a.metrics) metrics[k] = number(v);
  Json j = {{"format", kFormatTag},   {"stage", a.stage},         {"config_hash", a.config_hash},
            {"seed", a.seed},         {"model", to_json(a.model)}, {"scaler", to_json(a.scaler)},
            {"disturbance", to_json(a.w)}, {"U", to_json(a.U)},    {"Y", to_json(a.Y)}};
  if (a.sigma.size()) j["sigma"] = to_json(a.sigma);
  if (a.q.size()) {
    j["q"] = to_json(a.q);
    j["vertex_inputs"] = to_json(a.vertex_inputs);
  }
  j["r"] = number(a.r);
  j["metrics"] = metrics;
  return j;
}

Artifact artifact_from_json(const Json& j) {
  if (!j.contains("format") || j.at("format") != kFormatTag)
    throw ConfigError(std::string("not an artifact of format ") + kFormatTag);
  Artifact a;
  a.stage = field(j, "stage").get<std::string>();
  a.config_hash = field(j, "config_hash").get<std::string>();
  a.seed = field(j, "seed").get<std::uint64_t>();
  a.model = model_from_json(field(j, "model"));
  a.scaler = scaler_from_json(field(j, "scaler"));
  a.w = disturbance_from_json(field(j, "disturbance"));
  a.U = polyhedron_from_json(field(j, "U"));
  a.Y = polyhedron_from_json(field(j, "Y"));
  if (j.contains("sigma")) a.sigma = mat_from_json(j.at("sigma"));
  if (j.contains("q")) {
    a.q = vec_from_json(j.at("q"));
    a.vertex_inputs = mat_from_json(field(j, "vertex_inputs"));
  }
  a.r = number_from(field(j, "r"));
  for (const auto& [k, v] : field(j, "metrics").items()) a.metrics[k] = number_from(v);
  return a;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_json_file(const Json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << j.dump(2) << '\n';
}

Artifact load_artifact(const std::string& path) {
  try {
    return artifact_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void save_artifact(const Artifact& a, const std::string& path) { write_json_file(to_json(a), path); }

std::string config_hash(const Json& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rcisysid
