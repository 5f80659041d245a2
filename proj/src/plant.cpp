#include "rcisysid/plant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>
#include <vector>

#include "rcisysid/error.hpp"

namespace rcisysid {

Vec trig_step(const Vec& z, double u, const TrigParams& p) {
  Vec zn(3);
  zn(0) = p.a(0) * std::sin(z(0)) + p.b(0) * std::cos(0.5 * z(1)) * u;
  zn(1) = p.a(1) * std::sin(z(0) + z(2)) + p.b(1) * std::atan(z(0) + z(1));
  zn(2) = p.a(2) * std::exp(-z(1)) + p.b(2) * std::sin(-0.5 * z(0)) * u;
  return zn;
}

double trig_output(const Vec& z, const TrigParams& p) {
  double y = 0.0;
  for (int i = 0; i < 3; ++i) y += std::atan(p.c(i) * z(i) * z(i) * z(i));
  return y;
}

Dataset gen_trigonometric(int n, std::uint64_t seed, const TrigParams& p) {
  if (n < 1) throw ConfigError("sample count must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> input(-p.u_amplitude, p.u_amplitude);
  std::normal_distribution<double> normal;
  Dataset d;
  d.u.resize(1, n);
  d.y.resize(1, n);
  Vec z = Vec::Zero(3);
  for (int t = 0; t < n; ++t) {
    const double u = input(rng);
    d.u(0, t) = u;
    d.y(0, t) = trig_output(z, p) + p.output_noise * normal(rng);
    z = trig_step(z, u, p);
    for (int i = 0; i < 3; ++i) z(i) += p.state_noise * normal(rng);
  }
  return d;
}

namespace {

double spring(double d, const MsdParams& p) { return p.k1 * d + p.k2 * d * d * d; }

}  // namespace

Vec msd_derivative(const Vec& s, double u, const MsdParams& p) {
  const int n = p.masses;
  Vec ds(2 * n);
  ds.head(n) = s.tail(n);
  for (int i = 0; i < n; ++i) {
    const double x_prev = i == 0 ? 0.0 : s(i - 1);
    const double v_prev = i == 0 ? 0.0 : s(n + i - 1);
    double force = -spring(s(i) - x_prev, p) - p.b * (s(n + i) - v_prev);
    if (i + 1 < n) force += spring(s(i + 1) - s(i), p) + p.b * (s(n + i + 1) - s(n + i));
    if (i == 0) force += u;
    ds(n + i) = force / p.m;
  }
  return ds;
}

Vec msd_step(const Vec& state, double u, const MsdParams& p) {
  const int steps = std::max(1, static_cast<int>(std::lround(p.dt / p.substep)));
  const double h = p.dt / steps;
  Vec s = state;
  for (int k = 0; k < steps; ++k) {
    const Vec k1 = msd_derivative(s, u, p);
    const Vec k2 = msd_derivative(s + 0.5 * h * k1, u, p);
    const Vec k3 = msd_derivative(s + 0.5 * h * k2, u, p);
    const Vec k4 = msd_derivative(s + h * k3, u, p);
    s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!s.allFinite()) throw NumericalError("mass-spring-damper integration diverged");
  return s;
}

double msd_energy(const Vec& s, const MsdParams& p) {
  const int n = p.masses;
  double e = 0.5 * p.m * s.tail(n).squaredNorm();
  for (int i = 0; i < n; ++i) {
    const double d = s(i) - (i == 0 ? 0.0 : s(i - 1));
    e += 0.5 * p.k1 * d * d + 0.25 * p.k2 * d * d * d * d;
  }
  return e;
}

Vec multisine(int n, double dt, int tones, double f_low, double f_high, double amplitude,
              std::mt19937_64& rng) {
  if (tones < 1 || !(f_low > 0.0) || !(f_high >= f_low)) throw ConfigError("invalid multisine band");
  // tones past Nyquist would alias onto low frequencies, so the band stops there
  f_high = std::min(f_high, 0.5 / dt);
  if (f_high < f_low) throw ConfigError("multisine band lies above the Nyquist frequency");
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  Vec freq(tones), ph(tones);
  for (int k = 0; k < tones; ++k) {
    const double frac = tones == 1 ? 0.0 : double(k) / (tones - 1);
    freq(k) = f_low * std::pow(f_high / f_low, frac);
    ph(k) = phase(rng);
  }
  Vec s = Vec::Zero(n);
  for (int t = 0; t < n; ++t)
    for (int k = 0; k < tones; ++k) s(t) += std::sin(2.0 * std::numbers::pi * freq(k) * t * dt + ph(k));
  const double peak = s.cwiseAbs().maxCoeff();
  if (peak > 0.0) s *= amplitude / peak;
  return s;
}

std::pair<Dataset, Dataset> gen_msd_chain(int n_train, int n_test, std::uint64_t seed, const MsdParams& p) {
  if (n_train < 1 || n_test < 1) throw ConfigError("sample counts must be >= 1");
  std::mt19937_64 rng(seed);
  auto run = [&](const Vec& u) {
    Dataset d;
    d.dt = p.dt;
    d.u = u.transpose();
    d.y.resize(1, u.size());
    Vec s = Vec::Zero(2 * p.masses);
    for (int t = 0; t < u.size(); ++t) {
      d.y(0, t) = s(p.masses - 1);
      s = msd_step(s, u(t), p);
    }
    return d;
  };
  const Vec u_train = multisine(n_train, p.dt, p.tones, p.f_low, p.f_high, p.u_amplitude, rng);
  std::uniform_real_distribution<double> uniform(-p.u_amplitude, p.u_amplitude);
  Vec u_test(n_test);
  for (int t = 0; t < n_test; ++t) u_test(t) = uniform(rng);
  return {run(u_train), run(u_test)};
}

void MsdPlant::apply(const Vec& u) {
  if (u.size() != 1) throw ConfigError("mass-spring-damper plant takes one input");
  state_ = msd_step(state_, u(0), p_);
}

void save_csv(const Dataset& data, const std::string& path) {
  data.validate();
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw ConfigError("cannot write " + path);
  std::fputs("t", f);
  for (int i = 0; i < data.nu(); ++i) std::fprintf(f, ",u%d", i + 1);
  for (int i = 0; i < data.ny(); ++i) std::fprintf(f, ",y%d", i + 1);
  std::fputs("\n", f);
  for (int t = 0; t < data.size(); ++t) {
    std::fprintf(f, "%.17g", t * data.dt);
    for (int i = 0; i < data.nu(); ++i) std::fprintf(f, ",%.17g", data.u(i, t));
    for (int i = 0; i < data.ny(); ++i) std::fprintf(f, ",%.17g", data.y(i, t));
    std::fputs("\n", f);
  }
  std::fclose(f);
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

}  // namespace

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
  auto header = split(line);
  for (auto& h : header) h = trim(h);
  if (header.empty() || header[0] != "t") throw ConfigError(path + ": missing column t");
  int nu = 0, ny = 0;
  size_t k = 1;
  while (k < header.size() && header[k] == "u" + std::to_string(nu + 1)) ++nu, ++k;
  while (k < header.size() && header[k] == "y" + std::to_string(ny + 1)) ++ny, ++k;
  if (nu == 0) throw ConfigError(path + ": missing column u1");
  if (ny == 0) throw ConfigError(path + ": missing column y1");
  if (k != header.size())
    throw ConfigError(path + ": unexpected column " + header[k] + " (expected u" + std::to_string(nu + 1) +
                      " or y" + std::to_string(ny + 1) + ")");
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                        " cells, got " + std::to_string(cells.size()));
    std::vector<double> row;
    for (size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (cell.empty() || *end != '\0')
        throw ConfigError(path + ":" + std::to_string(lineno) + ": non-numeric value '" + cell + "' in column " +
                          header[c]);
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError(path + ": no data rows");
  Dataset d;
  const int n = static_cast<int>(rows.size());
  d.u.resize(nu, n);
  d.y.resize(ny, n);
  for (int t = 0; t < n; ++t) {
    for (int i = 0; i < nu; ++i) d.u(i, t) = rows[t][1 + i];
    for (int i = 0; i < ny; ++i) d.y(i, t) = rows[t][1 + nu + i];
  }
  d.dt = n > 1 ? rows[1][0] - rows[0][0] : 1.0;
  if (!(d.dt > 0.0)) d.dt = 1.0;
  return d;
}

}  // namespace rcisysid
