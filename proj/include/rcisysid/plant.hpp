#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "rcisysid/model.hpp"

namespace rcisysid {

struct TrigParams {
  Vec a = (Vec(3) << 0.5, 0.6, 0.4).finished();
  Vec b = (Vec(3) << 1.7, 0.4, 0.9).finished();
  Vec c = (Vec(3) << 2.2, 1.8, -1.0).finished();
  double state_noise = 0.01;
  double output_noise = 0.01;
  double u_amplitude = 0.5;
};

/// Noise-free state update of the three-state trigonometric benchmark.
Vec trig_step(const Vec& z, double u, const TrigParams& p);
double trig_output(const Vec& z, const TrigParams& p);

/// n samples driven by u ~ U[-amp, amp], z_0 = 0.
Dataset gen_trigonometric(int n, std::uint64_t seed, const TrigParams& p = {});

struct MsdParams {
  int masses = 5;
  double m = 1.0;
  double b = 1.0;
  double k1 = 0.5;
  double k2 = 0.5;
  double dt = 0.1;
  double substep = 0.01;
  double u_amplitude = 2.0;
  int tones = 50;
  double f_low = 0.1;
  double f_high = 100.0;
};

/// Time derivative of [positions; velocities]. Each spring/damper acts on
/// the relative displacement of neighbours; mass 1 is tied to the wall and
/// the force acts on mass 1.
Vec msd_derivative(const Vec& state, double u, const MsdParams& p);

/// One sample period of fixed-step RK4 with the input held constant.
Vec msd_step(const Vec& state, double u, const MsdParams& p);

/// Kinetic plus spring potential energy.
double msd_energy(const Vec& state, const MsdParams& p);

/// Sum of `tones` sines, log-spaced in [f_low, min(f_high, 1/(2 dt))] Hz with uniform random
/// phases, sampled every dt and rescaled to fill [-amplitude, amplitude].
Vec multisine(int n, double dt, int tones, double f_low, double f_high, double amplitude,
              std::mt19937_64& rng);

/// Training record under multisine excitation and test record under uniform
/// random input, both from rest.
std::pair<Dataset, Dataset> gen_msd_chain(int n_train, int n_test, std::uint64_t seed,
                                          const MsdParams& p = {});

/// Header `t,u1..u_nu,y1..y_ny`; values written with 17 significant digits.
void save_csv(const Dataset& data, const std::string& path);
Dataset load_csv(const std::string& path);

/// Physical system driven sample by sample in closed loop.
class Plant {
 public:
  virtual ~Plant() = default;
  virtual Vec output() const = 0;
  virtual void apply(const Vec& u) = 0;
};

class MsdPlant : public Plant {
 public:
  explicit MsdPlant(const MsdParams& p = {}) : p_(p), state_(Vec::Zero(2 * p.masses)) {}
  Vec output() const override { return Vec::Constant(1, state_(p_.masses - 1)); }
  void apply(const Vec& u) override;
  const Vec& state() const { return state_; }

 private:
  MsdParams p_;
  Vec state_;
};

}  // namespace rcisysid
